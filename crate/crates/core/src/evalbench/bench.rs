//! Frame-level versus utterance-level self-attention cost.
//!
//! The frame-level reference attends over the `L` frames of each of `S`
//! samples; the utterance-level path attends over the `U` utterances of each
//! of `C = S / U` conversations. Both use one vanilla scaled dot-product
//! self-attention without projections, so the measured ratio isolates the
//! `S·L²·D` versus `C·U²·D` cost.

use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax_in_place, Mat};

/// Predicted utterance-level / frame-level time ratio `U / L²`.
pub fn analytic_time_ratio(u: usize, l: usize) -> f64 {
    u as f64 / (l as f64 * l as f64)
}

/// Frame-level feature storage over utterance-level storage at equal `S`, `D`.
pub fn analytic_space_factor(l: usize) -> f64 {
    l as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSize {
    pub s: usize,
    pub l: usize,
    pub u: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<BenchSize>,
    pub repeats: usize,
    /// Rows whose buffers would exceed this many bytes are reported, not run.
    pub memory_budget_bytes: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut sizes = Vec::new();
        for l in [32, 64, 128] {
            for u in [8, 16] {
                sizes.push(BenchSize {
                    s: 128,
                    l,
                    u,
                    d: 64,
                });
            }
        }
        Self {
            sizes,
            repeats: 3,
            memory_budget_bytes: 1 << 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityProfile {
    pub s: usize,
    pub l: usize,
    pub c_conv: usize,
    pub u: usize,
    pub d: usize,
    pub frame_seconds: f64,
    pub utterance_seconds: f64,
    pub measured_ratio: f64,
    pub analytic_ratio: f64,
    /// Peak bytes held by the frame-level kernel (inputs, scores, outputs).
    pub frame_peak_bytes: u64,
    pub utterance_peak_bytes: u64,
    pub measured_space_factor: f64,
    pub analytic_space_factor: f64,
    /// `ok`, or why the row was skipped.
    pub status: String,
}

/// Self-attention of each `n × d` block of `x`, written to `out`; `scores`
/// must hold `n²` values and is reused across blocks.
pub fn blocked_self_attention<T: Scalar>(
    x: &[T],
    n: usize,
    d: usize,
    scores: &mut [T],
    out: &mut [T],
) {
    let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let block = n * d;
    for (xb, ob) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for i in 0..n {
            let qi = &xb[i * d..(i + 1) * d];
            let row = &mut scores[i * n..(i + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &xb[j * d..(j + 1) * d]) * scale;
            }
            softmax_in_place(row, None);
            let oi = &mut ob[i * d..(i + 1) * d];
            oi.iter_mut().for_each(|v| *v = T::zero());
            for (j, &p) in row.iter().enumerate() {
                for (o, &v) in oi.iter_mut().zip(&xb[j * d..(j + 1) * d]) {
                    *o += p * v;
                }
            }
        }
    }
}

fn peak_bytes<T: Scalar>(blocks: usize, n: usize, d: usize) -> u64 {
    // input + output + one score matrix
    ((2 * blocks * n * d + n * n) * T::BYTES) as u64
}

fn time_kernel<T: Scalar>(x: &Mat<T>, n: usize, d: usize, repeats: usize) -> f64 {
    let mut scores = vec![T::zero(); n * n];
    let mut out = vec![T::zero(); x.len()];
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        blocked_self_attention(black_box(x.as_slice()), n, d, &mut scores, &mut out);
        black_box(&out);
        best = best.min(t0.elapsed().as_secs_f64());
    }
    best
}

pub fn complexity_benchmark<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<ComplexityProfile>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    for &BenchSize { s, l, u, d } in &cfg.sizes {
        if u == 0 || l == 0 || d == 0 || s % u != 0 {
            return Err(Error::Config(format!(
                "benchmark size S={s}, L={l}, U={u}, D={d} needs positive sizes and U dividing S"
            )));
        }
        let c_conv = s / u;
        let frame_peak = peak_bytes::<T>(s, l, d);
        let utt_peak = peak_bytes::<T>(c_conv, u, d);
        let mut row = ComplexityProfile {
            s,
            l,
            c_conv,
            u,
            d,
            frame_seconds: f64::NAN,
            utterance_seconds: f64::NAN,
            measured_ratio: f64::NAN,
            analytic_ratio: analytic_time_ratio(u, l),
            frame_peak_bytes: frame_peak,
            utterance_peak_bytes: utt_peak,
            measured_space_factor: (s * l * d) as f64 / (c_conv * u * d) as f64,
            analytic_space_factor: analytic_space_factor(l),
            status: "ok".into(),
        };
        if frame_peak > cfg.memory_budget_bytes {
            row.status = format!(
                "skipped: needs {frame_peak} bytes over budget {}",
                cfg.memory_budget_bytes
            );
            rows.push(row);
            continue;
        }
        let frames = Mat::<T>::gaussian(s * l, d, 1.0, &mut rng);
        let utts = Mat::<T>::gaussian(c_conv * u, d, 1.0, &mut rng);
        row.frame_seconds = time_kernel(&frames, l, d, cfg.repeats);
        row.utterance_seconds = time_kernel(&utts, u, d, cfg.repeats);
        row.measured_ratio = row.utterance_seconds / row.frame_seconds;
        rows.push(row);
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "S,L,C,U,D,frame_seconds,utterance_seconds,measured_ratio,analytic_ratio,frame_peak_bytes,utterance_peak_bytes,measured_space_factor,analytic_space_factor,status";

pub fn render_bench_csv(rows: &[ComplexityProfile]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{},{},{}\n",
            r.s,
            r.l,
            r.c_conv,
            r.u,
            r.d,
            r.frame_seconds,
            r.utterance_seconds,
            r.measured_ratio,
            r.analytic_ratio,
            r.frame_peak_bytes,
            r.utterance_peak_bytes,
            r.measured_space_factor,
            r.analytic_space_factor,
            r.status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_formulas() {
        assert_eq!(analytic_time_ratio(10, 100), 0.001);
        assert_eq!(analytic_time_ratio(16, 64), 16.0 / 4096.0);
        assert_eq!(analytic_space_factor(100), 100.0);
    }

    #[test]
    fn kernel_matches_matrix_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Mat::<f64>::gaussian(6, 4, 1.0, &mut rng);
        let mut scores = vec![0.0; 9];
        let mut out = vec![0.0; 24];
        blocked_self_attention(x.as_slice(), 3, 4, &mut scores, &mut out);
        for b in 0..2 {
            let xb = x.select_rows(&[3 * b, 3 * b + 1, 3 * b + 2]);
            let p = xb.matmul_nt(&xb).unwrap().map(|v| v / 2.0).softmax_rows();
            let want = p.matmul(&xb).unwrap();
            for (a, w) in out[b * 12..(b + 1) * 12].iter().zip(want.as_slice()) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_follow_sizes_and_budget() {
        let cfg = BenchConfig {
            sizes: vec![
                BenchSize {
                    s: 8,
                    l: 4,
                    u: 2,
                    d: 4,
                },
                BenchSize {
                    s: 8,
                    l: 1000,
                    u: 2,
                    d: 64,
                },
            ],
            repeats: 1,
            memory_budget_bytes: 1 << 20,
            seed: 1,
        };
        let rows = complexity_benchmark::<f32>(&cfg).unwrap();
        assert_eq!(rows[0].c_conv, 4);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[0].frame_seconds > 0.0);
        assert!(rows[1].status.starts_with("skipped"));
        assert_eq!(rows[1].measured_space_factor, 1000.0);
        let bad = BenchConfig {
            sizes: vec![BenchSize {
                s: 7,
                l: 4,
                u: 2,
                d: 4,
            }],
            ..cfg
        };
        assert!(complexity_benchmark::<f32>(&bad).is_err());
        assert_eq!(render_bench_csv(&rows).lines().count(), 3);
    }
}
