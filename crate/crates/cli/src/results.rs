//! Result rows, the results CSV/markdown formats, and the side-by-side
//! strategy table.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// One evaluated (method, ratio) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub ratio: f64,
    pub accuracy: f64,
    pub preservation_pct: f64,
    /// Fraction of plans that keep the queried cell.
    pub oracle_hit_rate: f64,
    /// Mean KL(label ‖ predicted); populated for the predicted method.
    pub mean_kl: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str =
    "method,ratio,accuracy,preservation_pct,oracle_hit_rate,mean_kl,n_samples,seed";

pub fn write_results_csv<W: Write>(w: &mut W, rows: &[ResultRow]) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        let kl = r.mean_kl.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{},{},{}",
            r.method, r.ratio, r.accuracy, r.preservation_pct, r.oracle_hit_rate, kl, r.n_samples, r.seed
        )?;
    }
    Ok(())
}

pub fn write_results_markdown<W: Write>(w: &mut W, rows: &[ResultRow]) -> Result<()> {
    writeln!(w, "| method | ratio | accuracy | preservation % | oracle hit | mean KL | n |")?;
    writeln!(w, "|---|---:|---:|---:|---:|---:|---:|")?;
    for r in rows {
        let kl = r.mean_kl.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".to_string());
        writeln!(
            w,
            "| {} | {} | {:.4} | {:.2} | {:.4} | {} | {} |",
            r.method, r.ratio, r.accuracy, r.preservation_pct, r.oracle_hit_rate, kl, r.n_samples
        )?;
    }
    Ok(())
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != RESULTS_HEADER {
                bail!("unexpected results header: {line}");
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("bad results row: {line}");
        }
        rows.push(ResultRow {
            method: f[0].to_string(),
            ratio: f[1].parse().context("ratio")?,
            accuracy: f[2].parse().context("accuracy")?,
            preservation_pct: f[3].parse().context("preservation")?,
            oracle_hit_rate: f[4].parse().context("oracle_hit_rate")?,
            mean_kl: if f[5].is_empty() { None } else { Some(f[5].parse().context("mean_kl")?) },
            n_samples: f[6].parse().context("n_samples")?,
            seed: f[7].parse().context("seed")?,
        });
    }
    Ok(rows)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_results_csv(&text)
}

/// Side-by-side preservation table for two strategy runs over the same
/// methods and ratios.
pub fn write_strategy_comparison<W: Write>(
    w: &mut W,
    label_a: &str,
    rows_a: &[ResultRow],
    label_b: &str,
    rows_b: &[ResultRow],
) -> Result<()> {
    writeln!(w, "| method | ratio | preservation % ({label_a}) | preservation % ({label_b}) |")?;
    writeln!(w, "|---|---:|---:|---:|")?;
    for a in rows_a {
        let Some(b) = rows_b
            .iter()
            .find(|b| b.method == a.method && (b.ratio - a.ratio).abs() < 1e-12)
        else {
            bail!("no matching row for {} @ {}", a.method, a.ratio);
        };
        writeln!(
            w,
            "| {} | {} | {:.2} | {:.2} |",
            a.method, a.ratio, a.preservation_pct, b.preservation_pct
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, ratio: f64, kl: Option<f64>) -> ResultRow {
        ResultRow {
            method: method.to_string(),
            ratio,
            accuracy: 0.9,
            preservation_pct: 92.5,
            oracle_hit_rate: 0.75,
            mean_kl: kl,
            n_samples: 500,
            seed: 3,
        }
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![row("vanilla", 1.0, None), row("predicted", 0.5, Some(0.421))];
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &rows).unwrap();
        let back = parse_results_csv(&String::from_utf8(buf).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].method, "vanilla");
        assert_eq!(back[1].mean_kl, Some(0.421));
    }

    #[test]
    fn comparison_table_pairs_rows() {
        let a = vec![row("explain", 0.5, None)];
        let b = vec![row("explain", 0.5, None)];
        let mut buf = Vec::new();
        write_strategy_comparison(&mut buf, "grad", &a, "mean", &b).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("explain"));
        assert!(text.lines().count() >= 3);
    }
}
