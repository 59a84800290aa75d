//! Predictor network: per layer a depthwise conv (kernel 3, same-length
//! padding) followed by a pointwise conv and ReLU; a final pointwise layer
//! aggregates channels and a positional softmax yields the distribution.
//! Fully convolutional, so one parameter set serves any input length.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CompressorConfig;
use crate::error::{Error, Result};
use crate::explain::{RelevanceScores, Source};
use crate::numerics::io::{read_f32_vec, read_u32, write_f32_slice, write_u32};
use crate::numerics::{ops, Graph, NodeId, Scalar, Tensor};

pub const COMPRESSOR_MAGIC: &[u8; 4] = b"FTH0";
pub const COMPRESSOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F: Scalar> {
    /// `[c_in, k]`
    pub dw_kernel: Tensor<F>,
    /// `[c_in]`
    pub dw_bias: Tensor<F>,
    /// `[c_out, c_in]`
    pub pw_weight: Tensor<F>,
    /// `[c_out]`
    pub pw_bias: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressorParams<F: Scalar> {
    pub config: CompressorConfig,
    pub layers: Vec<LayerParams<F>>,
    /// `[1, c_last]` aggregation to a single channel.
    pub head_weight: Tensor<F>,
    /// `[1]`
    pub head_bias: Tensor<F>,
}

impl<F: Scalar> CompressorParams<F> {
    /// He-style init scaled by fan-in; biases zero.
    pub fn init(config: CompressorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let c_in = config.c_in(l);
            let c_out = config.channels[l];
            layers.push(LayerParams {
                dw_kernel: Tensor::randn(&[c_in, config.kernel], (2.0 / config.kernel as f64).sqrt(), &mut rng),
                dw_bias: Tensor::zeros(&[c_in]),
                pw_weight: Tensor::randn(&[c_out, c_in], (2.0 / c_in as f64).sqrt(), &mut rng),
                pw_bias: Tensor::zeros(&[c_out]),
            });
        }
        let c_last = *config.channels.last().expect("validated nonempty");
        Ok(CompressorParams {
            head_weight: Tensor::randn(&[1, c_last], (1.0 / c_last as f64).sqrt(), &mut rng),
            head_bias: Tensor::zeros(&[1]),
            config,
            layers,
        })
    }

    /// All-zero parameters; `predict` then returns the uniform distribution.
    pub fn zeros(config: CompressorConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|l| {
                let c_in = config.c_in(l);
                let c_out = config.channels[l];
                LayerParams {
                    dw_kernel: Tensor::zeros(&[c_in, config.kernel]),
                    dw_bias: Tensor::zeros(&[c_in]),
                    pw_weight: Tensor::zeros(&[c_out, c_in]),
                    pw_bias: Tensor::zeros(&[c_out]),
                }
            })
            .collect();
        let c_last = *config.channels.last().expect("validated nonempty");
        Ok(CompressorParams {
            head_weight: Tensor::zeros(&[1, c_last]),
            head_bias: Tensor::zeros(&[1]),
            config,
            layers,
        })
    }

    /// Flat tensor view in serialization order: per layer the depthwise
    /// kernel, depthwise bias, pointwise weight, pointwise bias; then the
    /// aggregation head weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in &self.layers {
            out.push(&l.dw_kernel);
            out.push(&l.dw_bias);
            out.push(&l.pw_weight);
            out.push(&l.pw_bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in &mut self.layers {
            out.push(&mut l.dw_kernel);
            out.push(&mut l.dw_bias);
            out.push(&mut l.pw_weight);
            out.push(&mut l.pw_bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn cast<G: Scalar>(&self) -> CompressorParams<G> {
        CompressorParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    dw_kernel: l.dw_kernel.cast(),
                    dw_bias: l.dw_bias.cast(),
                    pw_weight: l.pw_weight.cast(),
                    pw_bias: l.pw_bias.cast(),
                })
                .collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}

fn check_input<F: Scalar>(config: &CompressorConfig, a0v: &[F]) -> Result<()> {
    if a0v.len() < config.kernel {
        return Err(Error::InvalidArg(format!(
            "input length {} shorter than kernel {}",
            a0v.len(),
            config.kernel
        )));
    }
    if !a0v.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "predict" });
    }
    Ok(())
}

/// Predicted relevance distribution for a probe vector; output length
/// equals input length and sums to one.
pub fn predict<F: Scalar>(params: &CompressorParams<F>, a0v: &[F]) -> Result<RelevanceScores<F>> {
    check_input(&params.config, a0v)?;
    let n = a0v.len();
    let mut x = Tensor::from_vec(vec![1, n], a0v.to_vec())?;
    for layer in &params.layers {
        let dw = ops::conv1d_depthwise(&x, &layer.dw_kernel, &layer.dw_bias)?;
        let pw = ops::conv1d_pointwise(&dw, &layer.pw_weight, &layer.pw_bias)?;
        x = ops::relu(&pw);
    }
    let logits = ops::conv1d_pointwise(&x, &params.head_weight, &params.head_bias)?;
    let probs = ops::row_softmax(&logits)?;
    RelevanceScores::new(probs.into_data(), Source::Predicted)
}

/// Node ids from a recorded compressor forward pass.
pub struct CompressorPass {
    /// `[1, n]` softmax output.
    pub output: NodeId,
    /// Parameter leaves in `CompressorParams::tensors` order.
    pub param_ids: Vec<NodeId>,
}

/// Record the compressor forward pass for training.
pub fn build_compressor_forward<F: Scalar>(
    graph: &mut Graph<F>,
    params: &CompressorParams<F>,
    a0v: &[F],
) -> Result<CompressorPass> {
    check_input(&params.config, a0v)?;
    let n = a0v.len();
    let mut param_ids = Vec::with_capacity(params.layers.len() * 4 + 2);
    let mut x = graph.leaf(Tensor::from_vec(vec![1, n], a0v.to_vec())?);
    for layer in &params.layers {
        let dw_k = graph.leaf(layer.dw_kernel.clone());
        let dw_b = graph.leaf(layer.dw_bias.clone());
        let pw_w = graph.leaf(layer.pw_weight.clone());
        let pw_b = graph.leaf(layer.pw_bias.clone());
        param_ids.extend([dw_k, dw_b, pw_w, pw_b]);
        let dw = graph.conv1d_depthwise(x, dw_k, dw_b)?;
        let pw = graph.conv1d_pointwise(dw, pw_w, pw_b)?;
        x = graph.relu(pw)?;
    }
    let head_w = graph.leaf(params.head_weight.clone());
    let head_b = graph.leaf(params.head_bias.clone());
    param_ids.extend([head_w, head_b]);
    let logits = graph.conv1d_pointwise(x, head_w, head_b)?;
    let output = graph.row_softmax(logits)?;
    Ok(CompressorPass { output, param_ids })
}

// ── parameter file: FTH0, version, JSON sidecar, raw weight blocks ───

pub fn write_compressor<F: Scalar, W: Write>(w: &mut W, params: &CompressorParams<F>) -> Result<()> {
    w.write_all(COMPRESSOR_MAGIC)?;
    write_u32(w, COMPRESSOR_VERSION)?;
    let sidecar = serde_json::to_vec(&params.config)?;
    write_u32(w, sidecar.len() as u32)?;
    w.write_all(&sidecar)?;
    for t in params.tensors() {
        let data: Vec<f32> = t.data().iter().map(|v| v.as_f32()).collect();
        write_f32_slice(w, &data)?;
    }
    Ok(())
}

pub fn read_compressor<F: Scalar, R: Read>(r: &mut R) -> Result<CompressorParams<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != COMPRESSOR_MAGIC {
        return Err(Error::Format(format!("bad compressor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != COMPRESSOR_VERSION {
        return Err(Error::Format(format!("unsupported compressor version {version}")));
    }
    let sidecar_len = read_u32(r)? as usize;
    let mut sidecar = vec![0u8; sidecar_len];
    r.read_exact(&mut sidecar)?;
    let config: CompressorConfig = serde_json::from_slice(&sidecar)?;
    config.validate()?;

    let mut read_block = |shape: &[usize]| -> Result<Tensor<F>> {
        let numel: usize = shape.iter().product();
        let raw = read_f32_vec(r, numel)?;
        Tensor::from_vec(shape.to_vec(), raw.into_iter().map(|v| F::from_f64_c(v as f64)).collect())
    };

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let c_in = config.c_in(l);
        let c_out = config.channels[l];
        layers.push(LayerParams {
            dw_kernel: read_block(&[c_in, config.kernel])?,
            dw_bias: read_block(&[c_in])?,
            pw_weight: read_block(&[c_out, c_in])?,
            pw_bias: read_block(&[c_out])?,
        });
    }
    let c_last = *config.channels.last().expect("validated nonempty");
    let head_weight = read_block(&[1, c_last])?;
    let head_bias = read_block(&[1])?;
    Ok(CompressorParams { config, layers, head_weight, head_bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CompressorConfig {
        CompressorConfig { n_layers: 3, kernel: 3, channels: vec![4, 8, 16] }
    }

    #[test]
    fn zero_params_predict_uniform() {
        let params = CompressorParams::<f32>::zeros(CompressorConfig::default()).unwrap();
        let out = predict(&params, &vec![0.3f32; 12]).unwrap();
        for &v in &out.r_v {
            assert!((v - 1.0 / 12.0).abs() < 1e-7);
        }
    }

    #[test]
    fn predict_is_a_distribution_of_input_length() {
        let params = CompressorParams::<f32>::init(small_config(), 5).unwrap();
        for n in [3, 7, 64] {
            let input: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin().abs()).collect();
            let out = predict(&params, &input).unwrap();
            assert_eq!(out.r_v.len(), n);
            let sum: f64 = out.r_v.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "length {n}: sum {sum}");
            assert!(out.r_v.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn same_params_accept_length_64_and_256() {
        let params = CompressorParams::<f32>::init(CompressorConfig::default(), 11).unwrap();
        let a = predict(&params, &vec![0.01f32; 64]).unwrap();
        let b = predict(&params, &vec![0.01f32; 256]).unwrap();
        assert_eq!(a.r_v.len(), 64);
        assert_eq!(b.r_v.len(), 256);
    }

    #[test]
    fn input_shorter_than_kernel_is_rejected() {
        let params = CompressorParams::<f32>::init(small_config(), 1).unwrap();
        assert!(predict(&params, &[0.5f32, 0.5]).is_err());
    }

    #[test]
    fn graph_forward_matches_pure_predict() {
        let params = CompressorParams::<f32>::init(small_config(), 2).unwrap();
        let input: Vec<f32> = (0..10).map(|i| 0.05 * i as f32).collect();
        let pure = predict(&params, &input).unwrap();
        let mut graph = Graph::new();
        let pass = build_compressor_forward(&mut graph, &params, &input).unwrap();
        assert_eq!(graph.value(pass.output).data(), pure.r_v.as_slice());
    }

    #[test]
    fn compressor_file_round_trips() {
        let params = CompressorParams::<f32>::init(small_config(), 8).unwrap();
        let mut buf = Vec::new();
        write_compressor(&mut buf, &params).unwrap();
        assert_eq!(&buf[..4], COMPRESSOR_MAGIC);
        let back: CompressorParams<f32> = read_compressor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn sidecar_uses_the_documented_field_names() {
        let json = serde_json::to_value(CompressorConfig::default()).unwrap();
        assert!(json.get("layers").is_some());
        assert!(json.get("kernel").is_some());
        assert!(json.get("channels").is_some());
    }
}
