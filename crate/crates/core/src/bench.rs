//! Single-worker decode timing and time-versus-length regression.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::decode::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::linearize::delinearize;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub decode: DecodeConfig,
    /// Untimed passes over the whole corpus before measuring.
    pub warmup: usize,
    /// Timed repetitions per sentence; the median is kept.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub id: String,
    pub tokens: usize,
    pub decisions: usize,
    pub spans: usize,
    /// The decision budget ran out and the output was closed early.
    pub truncated: bool,
    pub seconds: f64,
}

/// `y ≈ coef[0] + coef[1] x + coef[2] x² …`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub coef: Vec<f64>,
}

impl PolyFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub total_seconds: f64,
    pub sentences_per_sec: f64,
    pub decisions_per_sec: f64,
    /// Seconds per token from the linear fit.
    pub slope: f64,
    pub linear: PolyFit,
    pub quadratic: PolyFit,
    /// `|c₂ N²| / ŷ(N)` of the quadratic fit at the largest N measured.
    pub quadratic_share: f64,
    /// Rank correlation between N and time.
    pub spearman: f64,
}

/// Least-squares polynomial fit of the given degree.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(Error::Config(format!(
            "need more than {degree} points for a degree-{degree} fit"
        )));
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let coef = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Config(format!("least squares failed: {e}")))?;
    Ok(PolyFit {
        coef: coef.iter().copied().collect(),
    })
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Times decoding plus span recovery for every sentence on the calling
/// thread. Needs at least three sentences for the fits.
pub fn bench_decode(model: &Model, corpus: &[Sentence], config: &BenchConfig) -> Result<BenchReport> {
    if corpus.is_empty() {
        return Err(Error::Config("bench corpus is empty".into()));
    }
    let dc = &config.decode;
    let run = |s: &Sentence| -> Result<(usize, usize, bool)> {
        let out = decode(model, s, dc)?;
        let spans = delinearize(&out.sequence, s.len(), dc.scheme, &model.labels)?;
        Ok((out.sequence.len(), spans.len(), out.truncated))
    };
    for _ in 0..config.warmup {
        for s in corpus {
            run(s)?;
        }
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for s in corpus {
        let mut times = Vec::with_capacity(config.repeats.max(1));
        let mut shape = (0, 0, false);
        for _ in 0..config.repeats.max(1) {
            let t0 = Instant::now();
            shape = run(s)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            id: s.id.clone(),
            tokens: s.len(),
            decisions: shape.0,
            spans: shape.1,
            truncated: shape.2,
            seconds: median(times),
        });
    }
    summarize(rows)
}

pub fn summarize(rows: Vec<BenchRow>) -> Result<BenchReport> {
    let x: Vec<f64> = rows.iter().map(|r| r.tokens as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    let total_seconds: f64 = y.iter().sum();
    let decisions: usize = rows.iter().map(|r| r.decisions).sum();
    let linear = polyfit(&x, &y, 1)?;
    let quadratic = polyfit(&x, &y, 2)?;
    let n_max = x.iter().copied().fold(0.0, f64::max);
    let predicted = quadratic.predict(n_max);
    let quadratic_share = (quadratic.coef[2] * n_max * n_max).abs() / predicted.abs().max(f64::MIN_POSITIVE);
    Ok(BenchReport {
        total_seconds,
        sentences_per_sec: rows.len() as f64 / total_seconds,
        decisions_per_sec: decisions as f64 / total_seconds,
        slope: linear.coef[1],
        linear,
        quadratic,
        quadratic_share,
        spearman: spearman(&x, &y),
        rows,
    })
}

/// Per-sentence rows, columns `id,tokens,decisions,spans,truncated,seconds`.
pub fn write_rows_csv<W: Write>(report: &BenchReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "tokens", "decisions", "spans", "truncated", "seconds"])?;
    for r in &report.rows {
        out.write_record([
            r.id.clone(),
            r.tokens.to_string(),
            r.decisions.to_string(),
            r.spans.to_string(),
            r.truncated.to_string(),
            format!("{:.9}", r.seconds),
        ])?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

/// One-row summary, columns
/// `sentences,total_seconds,sentences_per_sec,decisions_per_sec,slope,lin_c0,lin_c1,quad_c0,quad_c1,quad_c2,quadratic_share,spearman`.
pub fn write_summary_csv<W: Write>(report: &BenchReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "sentences",
        "total_seconds",
        "sentences_per_sec",
        "decisions_per_sec",
        "slope",
        "lin_c0",
        "lin_c1",
        "quad_c0",
        "quad_c1",
        "quad_c2",
        "quadratic_share",
        "spearman",
    ])?;
    let mut rec = vec![report.rows.len().to_string()];
    rec.extend(
        [
            report.total_seconds,
            report.sentences_per_sec,
            report.decisions_per_sec,
            report.slope,
            report.linear.coef[0],
            report.linear.coef[1],
            report.quadratic.coef[0],
            report.quadratic.coef[1],
            report.quadratic.coef[2],
            report.quadratic_share,
            report.spearman,
        ]
        .iter()
        .map(|v| format!("{v:e}")),
    );
    out.write_record(&rec)?;
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyfit_recovers_exact_polynomials() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v + 0.25 * v * v).collect();
        let q = polyfit(&x, &y, 2).unwrap();
        for (c, e) in q.coef.iter().zip([2.0, -0.5, 0.25]) {
            assert!((c - e).abs() < 1e-9);
        }
        let l = polyfit(&x, &x.iter().map(|v| 3.0 * v + 1.0).collect::<Vec<_>>(), 1).unwrap();
        assert!((l.coef[1] - 3.0).abs() < 1e-9);
        assert!(polyfit(&[1.0, 2.0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn spearman_matches_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), -1.0);
        // d = (0, 0, -1, 1): 1 - 6·2 / (4·15) = 0.8
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]) - 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn quadratic_share_of_linear_data_is_small() {
        let rows = (5..=200)
            .map(|n| BenchRow {
                id: n.to_string(),
                tokens: n,
                decisions: 2 * n,
                spans: n / 4,
                truncated: false,
                seconds: 1e-4 + 3e-6 * n as f64,
            })
            .collect();
        let r = summarize(rows).unwrap();
        assert!(r.quadratic_share < 1e-6);
        assert!((r.spearman - 1.0).abs() < 1e-12);
        assert!((r.slope - 3e-6).abs() < 1e-12);
    }
}
