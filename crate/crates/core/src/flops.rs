//! Analytic FLOPs accounting in exact integer arithmetic.
//!
//! Per transformer layer the visual-token cost is `4nd² + 2n²d + lnm`
//! (attention plus FFN terms), multiplied by the block count for the full
//! model. The compressor side counts the first-layer attention probe
//! (`nd² + nd`: key projection plus text-to-visual attention) and the
//! depthwise-separable conv stack (`Σ n(C_in·k + C_in·C_out)`).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LM-side cost parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmFlopsConfig {
    /// Visual-token count.
    pub n: u128,
    /// Hidden size.
    pub d: u128,
    /// FFN intermediate size.
    pub m: u128,
    /// FFN layer count.
    pub l: u128,
    /// Transformer block count.
    pub n_layers: u128,
}

/// Conv-stack cost parameters: `(c_in, c_out, k)` per layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvFlopsConfig {
    pub n: u128,
    pub layers: Vec<(u128, u128, u128)>,
    /// Count the trailing channel-aggregation pointwise layer.
    pub include_final_pointwise: bool,
}

impl ConvFlopsConfig {
    /// Stack with `1 -> channels[0] -> ... -> channels[last]` and a fixed
    /// kernel size, the shape of the trained compressor.
    pub fn from_channels(n: u128, channels: &[u128], kernel: u128, include_final_pointwise: bool) -> Self {
        let mut layers = Vec::with_capacity(channels.len());
        let mut c_in = 1u128;
        for &c_out in channels {
            layers.push((c_in, c_out, kernel));
            c_in = c_out;
        }
        ConvFlopsConfig { n, layers, include_final_pointwise }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, win) in self.layers.windows(2).enumerate() {
            if win[0].1 != win[1].0 {
                return Err(Error::InvalidArg(format!(
                    "channel chain broken between layers {i} and {}: {} out vs {} in",
                    i + 1,
                    win[0].1,
                    win[1].0
                )));
            }
        }
        Ok(())
    }
}

/// `4nd² + 2n²d + lnm` for one transformer layer.
pub fn flops_layer(cfg: &LlmFlopsConfig) -> u128 {
    4 * cfg.n * cfg.d * cfg.d + 2 * cfg.n * cfg.n * cfg.d + cfg.l * cfg.n * cfg.m
}

/// Layer cost times the block count.
pub fn flops_llm(cfg: &LlmFlopsConfig) -> u128 {
    cfg.n_layers * flops_layer(cfg)
}

/// First-layer attention probe: key projection for visual tokens plus
/// text-to-visual attention, `nd² + nd`.
pub fn flops_attn(n: u128, d: u128) -> u128 {
    n * d * d + n * d
}

/// Depthwise-separable conv stack: `Σ n(C_in·k + C_in·C_out)`, plus the
/// channel-aggregation pointwise layer when enabled.
pub fn flops_conv(cfg: &ConvFlopsConfig) -> Result<u128> {
    cfg.validate()?;
    let mut total = 0u128;
    for &(c_in, c_out, k) in &cfg.layers {
        total += cfg.n * (c_in * k + c_in * c_out);
    }
    if cfg.include_final_pointwise {
        if let Some(&(_, c_last, _)) = cfg.layers.last() {
            total += cfg.n * c_last;
        }
    }
    Ok(total)
}

/// Cost summary with ratios against a total (computed or externally
/// stated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub flops_llm: u128,
    pub flops_attn: u128,
    pub flops_conv: u128,
    /// Denominator the ratios are taken against.
    pub total: u128,
    /// True when the caller supplied the total instead of using `flops_llm`.
    pub total_is_stated: bool,
    pub attn_ratio: f64,
    pub conv_ratio: f64,
}

pub fn report(
    llm_cfg: &LlmFlopsConfig,
    conv_cfg: &ConvFlopsConfig,
    stated_total: Option<u128>,
) -> Result<FlopsReport> {
    let flops_llm_v = flops_llm(llm_cfg);
    let flops_attn_v = flops_attn(llm_cfg.n, llm_cfg.d);
    let flops_conv_v = flops_conv(conv_cfg)?;
    let (total, total_is_stated) = match stated_total {
        Some(t) => (t, true),
        None => (flops_llm_v, false),
    };
    let ratio = |x: u128| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    Ok(FlopsReport {
        flops_llm: flops_llm_v,
        flops_attn: flops_attn_v,
        flops_conv: flops_conv_v,
        total,
        total_is_stated,
        attn_ratio: ratio(flops_attn_v),
        conv_ratio: ratio(flops_conv_v),
    })
}

impl FlopsReport {
    /// Lossless CSV: exact integers, shortest-round-trip ratios.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "quantity,flops,ratio_vs_total")?;
        writeln!(w, "llm,{},{}", self.flops_llm, ratio_str(self.flops_llm, self.total))?;
        writeln!(w, "attn,{},{}", self.flops_attn, self.attn_ratio)?;
        writeln!(w, "conv,{},{}", self.flops_conv, self.conv_ratio)?;
        writeln!(w, "total,{},{}", self.total, 1.0f64)?;
        writeln!(w, "total_is_stated,{},", u8::from(self.total_is_stated))?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<FlopsReport> {
        let mut llm = None;
        let mut attn = None;
        let mut conv = None;
        let mut total = None;
        let mut stated = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!("bad flops csv line: {line}")));
            }
            let flops: u128 = fields[1].parse().map_err(|_| Error::Format(format!("bad integer in: {line}")))?;
            let ratio: f64 = if fields[2].is_empty() {
                0.0
            } else {
                fields[2].parse().map_err(|_| Error::Format(format!("bad ratio in: {line}")))?
            };
            match fields[0] {
                "llm" => llm = Some(flops),
                "attn" => attn = Some((flops, ratio)),
                "conv" => conv = Some((flops, ratio)),
                "total" => total = Some(flops),
                "total_is_stated" => stated = Some(flops == 1),
                other => return Err(Error::Format(format!("unknown flops row {other}"))),
            }
        }
        let (attn, attn_ratio) = attn.ok_or_else(|| Error::Format("missing attn row".into()))?;
        let (conv, conv_ratio) = conv.ok_or_else(|| Error::Format("missing conv row".into()))?;
        Ok(FlopsReport {
            flops_llm: llm.ok_or_else(|| Error::Format("missing llm row".into()))?,
            flops_attn: attn,
            flops_conv: conv,
            total: total.ok_or_else(|| Error::Format("missing total row".into()))?,
            total_is_stated: stated.ok_or_else(|| Error::Format("missing total_is_stated row".into()))?,
            attn_ratio,
            conv_ratio,
        })
    }

    pub fn write_markdown<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "| quantity | FLOPs | % of total |")?;
        writeln!(w, "|---|---:|---:|")?;
        writeln!(w, "| LM (all layers) | {} | {:.4}% |", group_digits(self.flops_llm), 100.0 * ratio_val(self.flops_llm, self.total))?;
        writeln!(w, "| first-layer attention probe | {} | {:.4}% |", group_digits(self.flops_attn), 100.0 * self.attn_ratio)?;
        writeln!(w, "| conv predictor | {} | {:.4}% |", group_digits(self.flops_conv), 100.0 * self.conv_ratio)?;
        writeln!(w, "| ratio denominator | {} | 100% |", group_digits(self.total))?;
        writeln!(w)?;
        if self.total_is_stated {
            writeln!(
                w,
                "Ratios use the externally stated total; the formula above computes {} for the LM.",
                group_digits(self.flops_llm)
            )?;
        }
        writeln!(
            w,
            "Note: the FFN term is counted as l*n*m as configured; per-matmul 2*n*m accounting would give a larger LM total."
        )?;
        Ok(())
    }
}

fn ratio_val(x: u128, total: u128) -> f64 {
    if total == 0 {
        0.0
    } else {
        x as f64 / total as f64
    }
}

fn ratio_str(x: u128, total: u128) -> f64 {
    ratio_val(x, total)
}

/// Thousands separators for readable tables.
pub fn group_digits(v: u128) -> String {
    let digits = v.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    let offset = digits.len() % 3;
    for (i, ch) in digits.chars().enumerate() {
        if i != 0 && (i + 3 - offset) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_llm() -> LlmFlopsConfig {
        LlmFlopsConfig { n: 1568, d: 3584, m: 18944, l: 3, n_layers: 28 }
    }

    fn reference_conv(include_final: bool) -> ConvFlopsConfig {
        ConvFlopsConfig::from_channels(1568, &[32, 64, 128, 256, 512], 3, include_final)
    }

    #[test]
    fn unit_config_sums_terms() {
        let cfg = LlmFlopsConfig { n: 1, d: 1, m: 1, l: 1, n_layers: 1 };
        assert_eq!(flops_layer(&cfg), 7);
        assert_eq!(flops_llm(&cfg), 7);
        assert_eq!(flops_attn(1, 1), 2);
    }

    #[test]
    fn reference_layer_and_model_totals() {
        assert_eq!(flops_layer(&reference_llm()), 98_276_720_640);
        assert_eq!(flops_llm(&reference_llm()), 2_751_748_177_920);
    }

    #[test]
    fn zero_visual_tokens_cost_nothing() {
        let cfg = LlmFlopsConfig { n: 0, ..reference_llm() };
        assert_eq!(flops_llm(&cfg), 0);
    }

    #[test]
    fn doubling_n_scales_terms_polynomially() {
        for (n, d, m, l) in [(3u128, 5u128, 7u128, 2u128), (10, 4, 6, 3)] {
            let base = LlmFlopsConfig { n, d, m, l, n_layers: 1 };
            let doubled = LlmFlopsConfig { n: 2 * n, ..base };
            let quad_term = 2 * n * n * d;
            let linear_terms = 4 * n * d * d + l * n * m;
            assert_eq!(flops_layer(&doubled), 4 * quad_term + 2 * linear_terms);
        }
    }

    #[test]
    fn attention_probe_matches_frozen_value() {
        assert_eq!(flops_attn(1568, 3584), 20_146_667_520);
    }

    #[test]
    fn conv_stack_matches_frozen_values() {
        assert_eq!(flops_conv(&reference_conv(false)).unwrap(), 275_270_240);
        assert_eq!(flops_conv(&reference_conv(true)).unwrap(), 276_073_056);
    }

    #[test]
    fn single_unit_conv_layer() {
        let cfg = ConvFlopsConfig { n: 1, layers: vec![(1, 1, 1)], include_final_pointwise: false };
        assert_eq!(flops_conv(&cfg).unwrap(), 2);
    }

    #[test]
    fn broken_channel_chain_is_rejected() {
        let cfg = ConvFlopsConfig { n: 4, layers: vec![(1, 8, 3), (16, 32, 3)], include_final_pointwise: false };
        assert!(flops_conv(&cfg).is_err());
    }

    #[test]
    fn conv_is_linear_in_n() {
        let a = flops_conv(&reference_conv(true)).unwrap();
        let mut cfg = reference_conv(true);
        cfg.n *= 3;
        assert_eq!(flops_conv(&cfg).unwrap(), 3 * a);
    }

    #[test]
    fn report_against_stated_total() {
        let rep = report(&reference_llm(), &reference_conv(true), Some(11_690_000_000_000)).unwrap();
        assert!((rep.attn_ratio * 100.0 - 0.17).abs() < 0.01);
        assert!(rep.conv_ratio * 100.0 < 0.0026 + 1e-4);
        assert!(rep.total_is_stated);
    }

    #[test]
    fn report_falls_back_to_computed_total() {
        let rep = report(&reference_llm(), &reference_conv(true), None).unwrap();
        assert_eq!(rep.total, rep.flops_llm);
        assert!(!rep.total_is_stated);
    }

    #[test]
    fn all_zero_n_gives_zero_ratios() {
        let llm = LlmFlopsConfig { n: 0, d: 0, m: 0, l: 0, n_layers: 0 };
        let conv = ConvFlopsConfig { n: 0, layers: vec![(1, 2, 3), (2, 4, 3)], include_final_pointwise: true };
        let rep = report(&llm, &conv, None).unwrap();
        assert_eq!(rep.flops_llm, 0);
        assert_eq!(rep.flops_conv, 0);
        assert_eq!(rep.attn_ratio, 0.0);
        assert_eq!(rep.conv_ratio, 0.0);
    }

    #[test]
    fn csv_round_trips_losslessly() {
        let rep = report(&reference_llm(), &reference_conv(true), Some(11_690_000_000_000)).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let back = FlopsReport::parse_csv(&String::from_utf8(buf).unwrap()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(0), "0");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(20_146_667_520), "20,146,667,520");
    }
}
