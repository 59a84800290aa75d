//! Primitive tensor operations: forward math and the matching backward rules.
//!
//! Everything here is pure; the recording layer lives in `graph`. Each
//! forward validates operand shapes and the finiteness of its output.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn require_rank2<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank-2, got {s:?}"))),
    }
}

// ── elementwise ──────────────────────────────────────────────────────

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    let out = Tensor::from_vec_unchecked(a.shape().to_vec(), data);
    out.check_finite("add")?;
    Ok(out)
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    let out = Tensor::from_vec_unchecked(a.shape().to_vec(), data);
    out.check_finite("mul")?;
    Ok(out)
}

pub fn scale<F: Scalar>(x: &Tensor<F>, factor: F) -> Result<Tensor<F>> {
    let data = x.data().iter().map(|v| *v * factor).collect();
    let out = Tensor::from_vec_unchecked(x.shape().to_vec(), data);
    out.check_finite("scale")?;
    Ok(out)
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let data = x.data().iter().map(|v| v.max(F::zero())).collect();
    Tensor::from_vec_unchecked(x.shape().to_vec(), data)
}

pub fn relu_backward<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(v, g)| if *v > F::zero() { *g } else { F::zero() })
        .collect();
    Tensor::from_vec_unchecked(x.shape().to_vec(), data)
}

/// Tanh-form GELU.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let c = F::from_f64_c((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_c(0.044715);
    let half = F::from_f64_c(0.5);
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let inner = c * (v + k * v * v * v);
            half * v * (F::one() + inner.tanh())
        })
        .collect();
    let out = Tensor::from_vec_unchecked(x.shape().to_vec(), data);
    out.check_finite("gelu")?;
    Ok(out)
}

pub fn gelu_backward<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let c = F::from_f64_c((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_c(0.044715);
    let half = F::from_f64_c(0.5);
    let three = F::from_f64_c(3.0);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let inner = c * (v + k * v * v * v);
            let t = inner.tanh();
            let sech2 = F::one() - t * t;
            let d_inner = c * (F::one() + three * k * v * v);
            let d = half * (F::one() + t) + half * v * sech2 * d_inner;
            g * d
        })
        .collect();
    Tensor::from_vec_unchecked(x.shape().to_vec(), data)
}

// ── linear algebra ───────────────────────────────────────────────────

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    let out = Tensor::from_vec_unchecked(vec![m, n], out);
    out.check_finite("matmul")?;
    Ok(out)
}

pub fn transpose<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = require_rank2("transpose", x)?;
    let xd = x.data();
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![c, r], out))
}

/// Row-broadcast bias: `[s, d] + [d]`.
pub fn add_bias<F: Scalar>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let (s, d) = require_rank2("add_bias", x)?;
    if bias.shape() != [d] {
        return Err(Error::shape("add_bias", format!("x [{s},{d}] vs bias {:?}", bias.shape())));
    }
    let bd = bias.data();
    let mut out = Vec::with_capacity(s * d);
    for i in 0..s {
        for (xv, bv) in x.row(i).iter().zip(bd) {
            out.push(*xv + *bv);
        }
    }
    let out = Tensor::from_vec_unchecked(vec![s, d], out);
    out.check_finite("add_bias")?;
    Ok(out)
}

/// Backward of `add_bias` into the bias operand: column sums of the
/// upstream gradient.
pub fn col_sum<F: Scalar>(grad_out: &Tensor<F>) -> Tensor<F> {
    let (s, d) = (grad_out.shape()[0], grad_out.shape()[1]);
    let mut out = vec![F::zero(); d];
    for i in 0..s {
        for (o, g) in out.iter_mut().zip(grad_out.row(i)) {
            *o = *o + *g;
        }
    }
    Tensor::from_vec_unchecked(vec![d], out)
}

pub fn slice_cols<F: Scalar>(x: &Tensor<F>, start: usize, width: usize) -> Result<Tensor<F>> {
    let (s, d) = require_rank2("slice_cols", x)?;
    if start + width > d {
        return Err(Error::shape("slice_cols", format!("cols [{start}, {}) of width-{d} matrix", start + width)));
    }
    let mut out = Vec::with_capacity(s * width);
    for i in 0..s {
        out.extend_from_slice(&x.row(i)[start..start + width]);
    }
    Ok(Tensor::from_vec_unchecked(vec![s, width], out))
}

pub fn concat_cols<F: Scalar>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no inputs".to_string()));
    }
    let s = require_rank2("concat_cols", parts[0])?.0;
    let mut total = 0;
    for p in parts {
        let (r, c) = require_rank2("concat_cols", p)?;
        if r != s {
            return Err(Error::shape("concat_cols", format!("row counts differ: {s} vs {r}")));
        }
        total += c;
    }
    let mut out = Vec::with_capacity(s * total);
    for i in 0..s {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![s, total], out))
}

// ── normalization and softmax ────────────────────────────────────────

/// Softmax over every full row of a rank-2 tensor.
pub fn row_softmax<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (s, d) = require_rank2("row_softmax", x)?;
    if d == 0 {
        return Err(Error::shape("row_softmax", "rows must have at least one element".to_string()));
    }
    let mut out = Vec::with_capacity(s * d);
    for i in 0..s {
        softmax_into(x.row(i), &mut out);
    }
    let out = Tensor::from_vec_unchecked(vec![s, d], out);
    out.check_finite("row_softmax")?;
    Ok(out)
}

fn softmax_into<F: Scalar>(row: &[F], out: &mut Vec<F>) {
    let mut max = row[0];
    for v in row {
        max = max.max(*v);
    }
    let base = out.len();
    // Accumulate the normalizer in f64 so long rows still sum to 1 well
    // within 1e-6 after the division.
    let mut sum = 0.0f64;
    for v in row {
        let e = (*v - max).exp();
        sum += e.as_f64();
        out.push(e);
    }
    let sum = F::from_f64_c(sum);
    for v in &mut out[base..] {
        *v = *v / sum;
    }
}

/// Shared softmax Jacobian action: `dx = p ⊙ (g − <g, p>)` per row segment.
fn softmax_vjp_row<F: Scalar>(probs: &[F], grad: &[F], out: &mut [F]) {
    let mut dot = F::zero();
    for (p, g) in probs.iter().zip(grad) {
        dot = dot + *p * *g;
    }
    for ((o, p), g) in out.iter_mut().zip(probs).zip(grad) {
        *o = *p * (*g - dot);
    }
}

pub fn row_softmax_backward<F: Scalar>(probs: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let (s, d) = (probs.shape()[0], probs.shape()[1]);
    let mut out = vec![F::zero(); s * d];
    for i in 0..s {
        softmax_vjp_row(probs.row(i), grad_out.row(i), &mut out[i * d..(i + 1) * d]);
    }
    Tensor::from_vec_unchecked(vec![s, d], out)
}

/// Causal row softmax on a square score matrix: row `i` is a softmax over
/// columns `0..=i`; entries above the diagonal are exactly zero.
pub fn causal_softmax<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (s, c) = require_rank2("causal_softmax", x)?;
    if s != c {
        return Err(Error::shape("causal_softmax", format!("square matrix required, got [{s},{c}]")));
    }
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        softmax_into(&x.row(i)[..=i], &mut out);
        out.resize((i + 1) * s, F::zero());
    }
    let out = Tensor::from_vec_unchecked(vec![s, s], out);
    out.check_finite("causal_softmax")?;
    Ok(out)
}

/// Backward of `causal_softmax` into the scores. Only the lower-triangular
/// prefix of each row participates; everything above the diagonal is
/// structurally masked.
pub fn causal_softmax_backward<F: Scalar>(probs: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let s = probs.shape()[0];
    let mut out = vec![F::zero(); s * s];
    for i in 0..s {
        let p = &probs.row(i)[..=i];
        let g = &grad_out.row(i)[..=i];
        softmax_vjp_row(p, g, &mut out[i * s..i * s + i + 1]);
    }
    Tensor::from_vec_unchecked(vec![s, s], out)
}

/// Zero the strictly-upper-triangular part in place.
pub fn mask_strict_upper<F: Scalar>(m: &mut Tensor<F>) {
    let s = m.shape()[0];
    let c = m.shape()[1];
    let data = m.data_mut();
    for i in 0..s {
        for j in (i + 1)..c {
            data[i * c + j] = F::zero();
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer norm with learned gain and shift. Returns the output plus
/// the normalized activations and inverse std needed by the backward pass.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (s, d) = require_rank2("layer_norm", x)?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("x [{s},{d}] vs gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let eps = F::from_f64_c(LAYER_NORM_EPS);
    let dn = F::from_f64_c(d as f64);
    let mut out = Vec::with_capacity(s * d);
    let mut xhat = Vec::with_capacity(s * d);
    let mut inv_std = Vec::with_capacity(s);
    for i in 0..s {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<F>() / dn;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / dn;
        let istd = (var + eps).sqrt().recip();
        inv_std.push(istd);
        for ((v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let xh = (*v - mean) * istd;
            xhat.push(xh);
            out.push(xh * *g + *b);
        }
    }
    let out = Tensor::from_vec_unchecked(vec![s, d], out);
    out.check_finite("layer_norm")?;
    let xhat = Tensor::from_vec_unchecked(vec![s, d], xhat);
    let inv_std = Tensor::from_vec_unchecked(vec![s], inv_std);
    Ok((out, xhat, inv_std))
}

/// Gradients of layer norm w.r.t. (x, gamma, beta).
pub fn layer_norm_backward<F: Scalar>(
    xhat: &Tensor<F>,
    inv_std: &Tensor<F>,
    gamma: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (s, d) = (xhat.shape()[0], xhat.shape()[1]);
    let dn = F::from_f64_c(d as f64);
    let mut dx = vec![F::zero(); s * d];
    let mut dgamma = vec![F::zero(); d];
    let mut dbeta = vec![F::zero(); d];
    for i in 0..s {
        let xh = xhat.row(i);
        let g = grad_out.row(i);
        let istd = inv_std.data()[i];
        // dxhat = g ⊙ gamma; reduce its mean and its xhat-weighted mean.
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            let dxh = g[j] * gamma.data()[j];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh[j];
            dgamma[j] = dgamma[j] + g[j] * xh[j];
            dbeta[j] = dbeta[j] + g[j];
        }
        mean_dxhat = mean_dxhat / dn;
        mean_dxhat_xhat = mean_dxhat_xhat / dn;
        for j in 0..d {
            let dxh = g[j] * gamma.data()[j];
            dx[i * d + j] = istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::from_vec_unchecked(vec![s, d], dx),
        Tensor::from_vec_unchecked(vec![d], dgamma),
        Tensor::from_vec_unchecked(vec![d], dbeta),
    )
}

// ── lookup ───────────────────────────────────────────────────────────

/// Gather rows of an embedding table.
pub fn embedding<F: Scalar>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (v, d) = require_rank2("embedding", table)?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::shape("embedding", format!("id {id} out of vocab {v}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_vec_unchecked(vec![ids.len(), d], out))
}

pub fn embedding_backward<F: Scalar>(
    table_shape: &[usize],
    ids: &[usize],
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let d = table_shape[1];
    let mut out = vec![F::zero(); table_shape[0] * d];
    for (r, &id) in ids.iter().enumerate() {
        for (o, g) in out[id * d..(id + 1) * d].iter_mut().zip(grad_out.row(r)) {
            *o = *o + *g;
        }
    }
    Tensor::from_vec_unchecked(table_shape.to_vec(), out)
}

// ── 1-D convolution, channels-first `[C, L]` ─────────────────────────

/// Depthwise conv with same-length zero padding; `kernel` is `[C, k]`
/// with odd `k`, `bias` is `[C]`.
pub fn conv1d_depthwise<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (c, l) = require_rank2("conv1d_depthwise", x)?;
    let (ck, k) = require_rank2("conv1d_depthwise", kernel)?;
    if ck != c || bias.shape() != [c] {
        return Err(Error::shape(
            "conv1d_depthwise",
            format!("x [{c},{l}], kernel {:?}, bias {:?}", kernel.shape(), bias.shape()),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidArg(format!("depthwise kernel size must be odd, got {k}")));
    }
    let pad = (k - 1) / 2;
    let mut out = vec![F::zero(); c * l];
    for ch in 0..c {
        let xr = x.row(ch);
        let kr = kernel.row(ch);
        let b = bias.data()[ch];
        for i in 0..l {
            let mut acc = b;
            for (t, &kv) in kr.iter().enumerate() {
                let j = i + t;
                if j >= pad && j - pad < l {
                    acc = acc + kv * xr[j - pad];
                }
            }
            out[ch * l + i] = acc;
        }
    }
    let out = Tensor::from_vec_unchecked(vec![c, l], out);
    out.check_finite("conv1d_depthwise")?;
    Ok(out)
}

pub fn conv1d_depthwise_backward<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (c, l) = (x.shape()[0], x.shape()[1]);
    let k = kernel.shape()[1];
    let pad = (k - 1) / 2;
    let mut dx = vec![F::zero(); c * l];
    let mut dk = vec![F::zero(); c * k];
    let mut db = vec![F::zero(); c];
    for ch in 0..c {
        let xr = x.row(ch);
        let kr = kernel.row(ch);
        let gr = grad_out.row(ch);
        for i in 0..l {
            let g = gr[i];
            db[ch] = db[ch] + g;
            for t in 0..k {
                let j = i + t;
                if j >= pad && j - pad < l {
                    dk[ch * k + t] = dk[ch * k + t] + g * xr[j - pad];
                    dx[ch * l + (j - pad)] = dx[ch * l + (j - pad)] + g * kr[t];
                }
            }
        }
    }
    (
        Tensor::from_vec_unchecked(vec![c, l], dx),
        Tensor::from_vec_unchecked(vec![c, k], dk),
        Tensor::from_vec_unchecked(vec![c], db),
    )
}

/// Pointwise (1x1) conv: `weight` is `[C_out, C_in]`, `bias` is `[C_out]`.
pub fn conv1d_pointwise<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (c_in, l) = require_rank2("conv1d_pointwise", x)?;
    let (c_out, c_in2) = require_rank2("conv1d_pointwise", weight)?;
    if c_in != c_in2 || bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv1d_pointwise",
            format!("x [{c_in},{l}], weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        ));
    }
    let mut out = matmul(weight, x)?.into_data();
    for ch in 0..c_out {
        let b = bias.data()[ch];
        for v in &mut out[ch * l..(ch + 1) * l] {
            *v = *v + b;
        }
    }
    let out = Tensor::from_vec_unchecked(vec![c_out, l], out);
    out.check_finite("conv1d_pointwise")?;
    Ok(out)
}

pub fn conv1d_pointwise_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let dx = matmul(&transpose(weight)?, grad_out)?;
    let dw = matmul(grad_out, &transpose(x)?)?;
    let c_out = weight.shape()[0];
    let mut db = vec![F::zero(); c_out];
    for ch in 0..c_out {
        db[ch] = grad_out.row(ch).iter().copied().sum();
    }
    Ok((dx, dw, Tensor::from_vec_unchecked(vec![c_out], db)))
}

// ── scalar losses ────────────────────────────────────────────────────

/// Mean negative log-likelihood over `(row, class)` targets.
/// Also returns the per-target softmax rows needed for backward.
pub fn cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[(usize, usize)],
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (s, v) = require_rank2("cross_entropy", logits)?;
    if targets.is_empty() {
        return Err(Error::InvalidArg("cross_entropy needs at least one target".to_string()));
    }
    let mut probs = Vec::with_capacity(targets.len() * v);
    let mut loss = F::zero();
    for &(row, class) in targets {
        if row >= s || class >= v {
            return Err(Error::shape("cross_entropy", format!("target ({row},{class}) outside [{s},{v}]")));
        }
        let base = probs.len();
        softmax_into(logits.row(row), &mut probs);
        let p = probs[base + class];
        loss = loss - p.ln();
    }
    loss = loss / F::from_f64_c(targets.len() as f64);
    let loss = Tensor::scalar(loss).map_err(|_| Error::NonFinite { op: "cross_entropy" })?;
    Ok((loss, Tensor::from_vec_unchecked(vec![targets.len(), v], probs)))
}

pub fn cross_entropy_backward<F: Scalar>(
    logits_shape: &[usize],
    targets: &[(usize, usize)],
    probs: &Tensor<F>,
    grad_out: F,
) -> Tensor<F> {
    let v = logits_shape[1];
    let inv_n = grad_out / F::from_f64_c(targets.len() as f64);
    let mut out = vec![F::zero(); logits_shape[0] * v];
    for (t, &(row, class)) in targets.iter().enumerate() {
        let p = probs.row(t);
        for j in 0..v {
            let indicator = if j == class { F::one() } else { F::zero() };
            out[row * v + j] = out[row * v + j] + inv_n * (p[j] - indicator);
        }
    }
    Tensor::from_vec_unchecked(logits_shape.to_vec(), out)
}

/// Log-probability of one class at one row: `log softmax(logits[row])[class]`.
pub fn log_softmax_pick<F: Scalar>(
    logits: &Tensor<F>,
    row: usize,
    class: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (s, v) = require_rank2("log_softmax_pick", logits)?;
    if row >= s || class >= v {
        return Err(Error::shape("log_softmax_pick", format!("pick ({row},{class}) outside [{s},{v}]")));
    }
    let mut probs = Vec::with_capacity(v);
    softmax_into(logits.row(row), &mut probs);
    let value = probs[class].ln();
    let value = Tensor::scalar(value).map_err(|_| Error::NonFinite { op: "log_softmax_pick" })?;
    Ok((value, Tensor::from_vec_unchecked(vec![v], probs)))
}

pub fn log_softmax_pick_backward<F: Scalar>(
    logits_shape: &[usize],
    row: usize,
    class: usize,
    probs: &Tensor<F>,
    grad_out: F,
) -> Tensor<F> {
    let v = logits_shape[1];
    let mut out = vec![F::zero(); logits_shape[0] * v];
    for j in 0..v {
        let indicator = if j == class { F::one() } else { F::zero() };
        out[row * v + j] = grad_out * (indicator - probs.data()[j]);
    }
    Tensor::from_vec_unchecked(logits_shape.to_vec(), out)
}

/// `KL(p ‖ q) = Σ p_i (ln p_i − ln q_i)` with the `0·ln 0 = 0` convention.
/// `q` must be strictly positive wherever `p` is.
pub fn kl_div<F: Scalar>(p: &[F], q: &[F]) -> Result<F> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_div", format!("lengths {} vs {}", p.len(), q.len())));
    }
    let mut acc = F::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > F::zero() {
            if qi <= F::zero() {
                return Err(Error::NonFinite { op: "kl_div" });
            }
            acc = acc + pi * (pi.ln() - qi.ln());
        }
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite { op: "kl_div" });
    }
    Ok(acc)
}

pub fn kl_div_backward<F: Scalar>(p: &[F], q: &[F], out_shape: &[usize], grad_out: F) -> Tensor<F> {
    let data = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > F::zero() { -grad_out * pi / qi } else { F::zero() })
        .collect();
    Tensor::from_vec_unchecked(out_shape.to_vec(), data)
}

pub fn sum_all<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let total = x.data().iter().copied().sum::<F>();
    Tensor::scalar(total).map_err(|_| Error::NonFinite { op: "sum" })
}
