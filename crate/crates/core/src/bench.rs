//! Runtime and working-set scaling of the two mixers with sequence length.

use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::{self, normal_tensor, AttentionParams, Mamba2Params};
use crate::model::MixerKind;
use crate::tensor::{memory, Tensor};

pub const MIN_REPS: usize = 11;
pub const WARMUPS: usize = 3;
pub const MIN_FIT_POINTS: usize = 4;
pub const DEFAULT_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

pub const POINTS_HEADER: &str = "mixer,L,d,median_s,iqr_s,transient_bytes";
pub const RATIOS_HEADER: &str = "L,ratio";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub mixer: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub d: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    pub transient_bytes: usize,
}

impl BenchPoint {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mixer, self.l, self.d, self.median_s, self.iqr_s, self.transient_bytes
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    #[serde(rename = "L")]
    pub l: usize,
    pub ratio: f64,
}

/// Median and interquartile range (linear interpolation between order statistics).
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn check_sweep(lengths: &[usize], reps: usize) -> Result<()> {
    if reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_REPS} timed repetitions are required, got {reps}"
        )));
    }
    if lengths.is_empty() || lengths.contains(&0) || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "sequence lengths must be positive and strictly ascending, got {lengths:?}"
        )));
    }
    Ok(())
}

/// Times `run` on the input built by `input` for every length. Input
/// construction is outside the timed region; memory is measured in a
/// separate untimed call.
pub fn sweep_with<I, O>(
    name: &str,
    d: usize,
    lengths: &[usize],
    reps: usize,
    mut input: impl FnMut(usize) -> I,
    mut run: impl FnMut(&I) -> Result<O>,
) -> Result<Vec<BenchPoint>> {
    check_sweep(lengths, reps)?;
    let mut points = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let x = input(l);
        let (out, usage) = memory::measure(|| run(&x));
        drop(out?);
        for _ in 0..WARMUPS {
            black_box(run(&x)?);
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            let out = run(black_box(&x))?;
            times.push(start.elapsed().as_secs_f64());
            drop(black_box(out));
        }
        let (median_s, iqr_s) = median_iqr(&times);
        points.push(BenchPoint {
            mixer: name.to_string(),
            l,
            d,
            median_s,
            iqr_s,
            transient_bytes: usage.transient_bytes(),
        });
    }
    Ok(points)
}

/// Deterministic `L×d` standard-normal input for a given length.
pub fn bench_input(l: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    normal_tensor(&mut rng, &[l, d], 1.0)
}

/// Forward-pass timings of one mixer over `lengths` (ascending, `reps ≥ 11`).
pub fn run_sweep(kind: MixerKind, d: usize, lengths: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = |l| bench_input(l, d, seed);
    match kind {
        MixerKind::Attention => {
            let p = AttentionParams::init(d, &mut rng);
            sweep_with("attention", d, lengths, reps, input, |x| mixers::attention_forward(x, &p))
        }
        MixerKind::Mamba2 => {
            let p = Mamba2Params::init(d, &mut rng);
            sweep_with("mamba2", d, lengths, reps, input, |x| mixers::mamba2_scan(x, &p))
        }
    }
}

/// Least-squares slope of `log runtime` against `log L`.
pub fn fit_exponent(points: &[BenchPoint]) -> Result<ScalingFit> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.l as f64, p.median_s)).collect();
    fit_power_law(&xy)
}

/// Fits `y = c·x^e` by ordinary least squares in log-log space.
pub fn fit_power_law(xy: &[(f64, f64)]) -> Result<ScalingFit> {
    if xy.len() < MIN_FIT_POINTS {
        return Err(Error::InvalidArgument(format!(
            "a scaling fit needs at least {MIN_FIT_POINTS} points, got {}",
            xy.len()
        )));
    }
    if xy.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument("scaling fit needs positive lengths and runtimes".into()));
    }
    let logs: Vec<(f64, f64)> = xy.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("scaling fit needs distinct lengths".into()));
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(ScalingFit {
        exponent,
        intercept,
        r2,
    })
}

/// `attention / scan` median runtime per length.
pub fn speedup_report(attention: &[BenchPoint], scan: &[BenchPoint]) -> Result<Vec<SpeedupRow>> {
    let la: Vec<usize> = attention.iter().map(|p| p.l).collect();
    let ls: Vec<usize> = scan.iter().map(|p| p.l).collect();
    if la != ls {
        return Err(Error::InvalidArgument(format!(
            "speedup needs matching length grids, got {la:?} and {ls:?}"
        )));
    }
    Ok(attention
        .iter()
        .zip(scan)
        .map(|(a, s)| SpeedupRow {
            l: a.l,
            ratio: a.median_s / s.median_s,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(lengths: &[usize], f: impl Fn(f64) -> f64) -> Vec<BenchPoint> {
        lengths
            .iter()
            .map(|&l| BenchPoint {
                mixer: "stub".into(),
                l,
                d: 1,
                median_s: f(l as f64),
                iqr_s: 0.0,
                transient_bytes: 0,
            })
            .collect()
    }

    #[test]
    fn power_laws_recover_their_exponent() {
        let ls = [256, 512, 1024, 2048, 4096];
        let quad = fit_exponent(&synthetic(&ls, |l| 3e-9 * l * l)).unwrap();
        assert!((quad.exponent - 2.0).abs() < 1e-12);
        assert!(quad.r2 > 0.98);
        let lin = fit_exponent(&synthetic(&ls, |l| 5e-7 * l)).unwrap();
        assert!((lin.exponent - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_needs_four_points() {
        assert!(fit_exponent(&synthetic(&[1, 2, 4], |l| l)).is_err());
    }

    #[test]
    fn identical_stubs_give_unit_ratios() {
        let a = synthetic(&[8, 16, 32, 64], |l| l * 1e-6);
        let rows = speedup_report(&a, &a).unwrap();
        assert!(rows.iter().all(|r| r.ratio == 1.0));
        let b = synthetic(&[8, 16, 32], |l| l);
        assert!(speedup_report(&a, &b).is_err());
    }

    #[test]
    fn median_and_iqr() {
        let (m, iqr) = median_iqr(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((m, iqr), (3.0, 2.0));
        assert_eq!(median_iqr(&[7.0; 11]), (7.0, 0.0));
    }

    #[test]
    fn constant_stub_has_tiny_iqr() {
        let points = sweep_with("stub", 1, &[1, 2, 3, 4], 11, |l| l, |&l| Ok(black_box(l) + 1)).unwrap();
        assert_eq!(points.len(), 4);
        for p in &points {
            assert!(p.iqr_s < 1e-4, "{p:?}");
        }
    }

    #[test]
    fn rejects_bad_sweeps() {
        assert!(run_sweep(MixerKind::Mamba2, 4, &[8, 16, 32, 64], 1, 0).is_err());
        assert!(run_sweep(MixerKind::Mamba2, 4, &[16, 8], 11, 0).is_err());
    }

    #[test]
    fn memory_accounting_separates_the_mixers() {
        let d = 4;
        let attn = run_sweep(MixerKind::Attention, d, &[128, 256], 11, 1).unwrap();
        let scan = run_sweep(MixerKind::Mamba2, d, &[128, 256], 11, 1).unwrap();
        assert!(attn[1].transient_bytes >= 256 * 256 * 8);
        assert!(attn[1].transient_bytes as f64 >= 3.5 * attn[0].transient_bytes as f64);
        assert_eq!(scan[0].transient_bytes, scan[1].transient_bytes);
        assert_eq!(scan[0].transient_bytes, (d * d + 3 * d) * 8);
    }

    #[test]
    fn inputs_are_deterministic() {
        assert_eq!(bench_input(16, 4, 3), bench_input(16, 4, 3));
        assert_ne!(bench_input(16, 4, 3), bench_input(16, 4, 4));
    }
}
