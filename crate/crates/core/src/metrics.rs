//! Field-level error metrics and the evaluation report.
//!
//! PSNR and SSIM rescale both fields to `[0, 255]` with the ground-truth range of each
//! variable before applying the 8-bit formulas.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::{FlowSnapshotSeries, Provenance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
pub const HISTOGRAM_BINS: usize = 32;

fn check_pair<T>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} values vs {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::shape("metrics need at least one value"));
    }
    Ok(())
}

fn pairs<'a, T: Scalar>(x: &'a [T], y: &'a [T]) -> impl Iterator<Item = (f64, f64)> + 'a {
    x.iter().zip(y).map(|(a, b)| (a.to_f64_lossy(), b.to_f64_lossy()))
}

pub fn mae<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(pairs(x, y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn mse<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(pairs(x, y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Percentage; points with `|x| + |x̂| = 0` contribute 0.
pub fn smape<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    check_pair(x, y)?;
    let sum: f64 = pairs(x, y)
        .map(|(a, b)| {
            let den = (a.abs() + b.abs()) / 2.0;
            if den == 0.0 {
                0.0
            } else {
                (a - b).abs() / den
            }
        })
        .sum();
    Ok(100.0 * sum / x.len() as f64)
}

/// Coefficient of determination about the global mean of `x`; `None` for constant `x`.
pub fn r2<T: Scalar>(x: &[T], y: &[T]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let mean = x.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / x.len() as f64;
    let ss_tot: f64 = x.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = pairs(x, y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// Map `[lo, hi]` onto `[0, 255]`; a degenerate range only shifts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelScale {
    pub lo: f64,
    pub hi: f64,
}

impl PixelScale {
    pub fn of<T: Scalar>(truth: &[T]) -> Self {
        let (lo, hi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        });
        Self { lo, hi }
    }

    pub fn apply(&self, v: f64) -> f64 {
        let spread = if self.hi > self.lo { self.hi - self.lo } else { 1.0 };
        (v - self.lo) / spread * 255.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the scaled error is zero and the value was capped.
    pub capped: bool,
}

pub fn psnr_from_scaled_mse(mse: f64) -> Psnr {
    if mse <= 0.0 {
        return Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        };
    }
    let db = 10.0 * (255.0f64 * 255.0 / mse).log10();
    if db > PSNR_CAP_DB {
        Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        }
    } else {
        Psnr { db, capped: false }
    }
}

pub fn psnr<T: Scalar>(x: &[T], y: &[T], scale: PixelScale) -> Result<Psnr> {
    check_pair(x, y)?;
    let m = pairs(x, y)
        .map(|(a, b)| (scale.apply(a) - scale.apply(b)).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_scaled_mse(m))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(x: &Array2<f64>, g: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..SSIM_WINDOW).map(|k| g[k] * x[[i, j + k]]).sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..SSIM_WINDOW).map(|k| g[k] * rows[[i + k, j]]).sum::<f64>();
        }
    }
    out
}

/// Mean local SSIM of two fields already on the `[0, 255]` scale.
pub fn ssim_scaled(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "field {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let x = x.to_owned();
    let y = y.to_owned();
    let mx = filter_valid(&x, &g);
    let my = filter_valid(&y, &g);
    let sxx = filter_valid(&(&x * &x), &g);
    let syy = filter_valid(&(&y * &y), &g);
    let sxy = filter_valid(&(&x * &y), &g);
    let mut total = 0.0;
    for idx in 0..mx.len() {
        let (a, b) = (mx.as_slice().unwrap()[idx], my.as_slice().unwrap()[idx]);
        let vx = sxx.as_slice().unwrap()[idx] - a * a;
        let vy = syy.as_slice().unwrap()[idx] - b * b;
        let cxy = sxy.as_slice().unwrap()[idx] - a * b;
        let num = (2.0 * a * b + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / mx.len() as f64)
}

/// SSIM of `(H, W)` fields after rescaling both with `scale`.
pub fn ssim<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>, scale: PixelScale) -> Result<f64> {
    let xs = x.mapv(|v| scale.apply(v.to_f64_lossy()));
    let ys = y.mapv(|v| scale.apply(v.to_f64_lossy()));
    ssim_scaled(xs.view(), ys.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub mse: f64,
    pub smape: f64,
    /// `null` when the truth is constant.
    pub r2: Option<f64>,
    pub psnr: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

/// Summary of absolute point-wise errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// `bins + 1` edges from 0 to `max`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ErrorHistogram {
    pub fn from_errors(errors: &[f64], bins: usize) -> Self {
        let n = errors.len().max(1) as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = errors.iter().copied().fold(0.0, f64::max);
        let bins = bins.max(1);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &e in errors {
            let i = ((e / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self {
            mean,
            std,
            max,
            edges,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub timesteps: usize,
    pub variables: Vec<VariableMetrics>,
    pub aggregate: MetricSet,
    pub mse_per_timestep: Vec<f64>,
    pub abs_error: ErrorHistogram,
}

fn channel<'a>(s: &'a FlowSnapshotSeries, c: usize) -> impl Iterator<Item = f32> + 'a {
    let nc = s.c();
    s.data.iter().skip(c).step_by(nc).copied()
}

fn frame_channel(s: &FlowSnapshotSeries, t: usize, c: usize) -> Array2<f32> {
    let (h, w, nc) = (s.h(), s.w(), s.c());
    let frame = s.snapshot(t);
    Array2::from_shape_fn((h, w), |(i, j)| frame[(i * w + j) * nc + c])
}

/// All metrics per variable and pooled, plus the per-timestep MSE curve and error statistics.
pub fn evaluate(pred: &FlowSnapshotSeries, truth: &FlowSnapshotSeries) -> Result<MetricsReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.variables != truth.variables {
        return Err(Error::shape(format!(
            "prediction variables {:?} vs truth {:?}",
            pred.variables, truth.variables
        )));
    }
    let mut variables = Vec::with_capacity(truth.c());
    for (c, name) in truth.variables.iter().enumerate() {
        let x: Vec<f32> = channel(truth, c).collect();
        let y: Vec<f32> = channel(pred, c).collect();
        let scale = PixelScale::of(&x);
        let p = psnr(&x, &y, scale)?;
        let mut s = 0.0;
        for t in 0..truth.t() {
            s += ssim(frame_channel(truth, t, c).view(), frame_channel(pred, t, c).view(), scale)?;
        }
        variables.push(VariableMetrics {
            name: name.clone(),
            metrics: MetricSet {
                mae: mae(&x, &y)?,
                mse: mse(&x, &y)?,
                smape: smape(&x, &y)?,
                r2: r2(&x, &y)?,
                psnr: p.db,
                psnr_capped: p.capped,
                ssim: s / truth.t() as f64,
            },
        });
    }
    let nv = variables.len() as f64;
    let aggregate = MetricSet {
        mae: mae(&truth.data, &pred.data)?,
        mse: mse(&truth.data, &pred.data)?,
        smape: smape(&truth.data, &pred.data)?,
        r2: r2(&truth.data, &pred.data)?,
        psnr: variables.iter().map(|v| v.metrics.psnr).sum::<f64>() / nv,
        psnr_capped: variables.iter().any(|v| v.metrics.psnr_capped),
        ssim: variables.iter().map(|v| v.metrics.ssim).sum::<f64>() / nv,
    };
    let mse_per_timestep = (0..truth.t())
        .map(|t| mse(truth.snapshot(t), pred.snapshot(t)))
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = pairs(&truth.data, &pred.data).map(|(a, b)| (a - b).abs()).collect();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: truth.scenario.clone(),
        timesteps: truth.t(),
        variables,
        aggregate,
        mse_per_timestep,
        abs_error: ErrorHistogram::from_errors(&errors, HISTOGRAM_BINS),
    })
}

/// The truth snapshots a forecast lines up with.
///
/// A truth series of the same length is used as is; a longer one is sliced at the
/// forecast's recorded start index.
pub fn align_truth(pred: &FlowSnapshotSeries, truth: &FlowSnapshotSeries) -> Result<FlowSnapshotSeries> {
    if truth.t() == pred.t() {
        return Ok(truth.clone());
    }
    let Provenance::Forecast(info) = &pred.provenance else {
        return Err(Error::shape(format!(
            "prediction has {} snapshots, truth {}, and no forecast start to align them",
            pred.t(),
            truth.t()
        )));
    };
    let end = info.forecast_start + pred.t();
    if end > truth.t() {
        return Err(Error::shape(format!(
            "forecast covers snapshots {}..{end}, truth has only {}",
            info.forecast_start,
            truth.t()
        )));
    }
    truth.slice_time(info.forecast_start..end)
}

/// Repeat snapshot `last` of `history` for `horizon` steps.
pub fn persistence_forecast(history: &FlowSnapshotSeries, last: usize, horizon: usize) -> Result<FlowSnapshotSeries> {
    if last >= history.t() || horizon == 0 {
        return Err(Error::shape(format!(
            "persistence from snapshot {last} of {} over {horizon} steps",
            history.t()
        )));
    }
    let frame = history.snapshot(last);
    let data = frame.repeat(horizon);
    let mut out = history.with_frames(data, horizon)?;
    out.provenance = Provenance::Label(format!("persistence({last})"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mae_mse_hand_examples() {
        assert_eq!(mae(&[0.0f64, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0f64, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[1.5f64, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(mae(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn smape_examples() {
        assert!((smape(&[1.0f64], &[3.0]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(smape(&[0.0f64], &[0.0]).unwrap(), 0.0);
        assert_eq!(smape(&[2.0f64, -1.0], &[2.0, -1.0]).unwrap(), 0.0);
    }

    #[test]
    fn r2_examples() {
        assert_eq!(r2(&[0.0f64, 2.0], &[2.0, 0.0]).unwrap(), Some(-3.0));
        assert_eq!(r2(&[0.0f64, 2.0], &[0.0, 2.0]).unwrap(), Some(1.0));
        assert_eq!(r2(&[0.0f64, 2.0], &[1.0, 1.0]).unwrap(), Some(0.0));
        assert_eq!(r2(&[3.0f64, 3.0], &[1.0, 2.0]).unwrap(), None);
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_scaled_mse(255.0 * 255.0).db, 0.0);
        let expected = 10.0 * 65025.0f64.log10();
        assert!((psnr_from_scaled_mse(1.0).db - expected).abs() < 1e-12);
        assert!((expected - 48.1308).abs() < 1e-4);

        let x = [0.0f64, 1.0];
        let scale = PixelScale::of(&x);
        let flipped = psnr(&x, &[1.0, 0.0], scale).unwrap();
        assert!(flipped.db.abs() < 1e-12 && !flipped.capped);
        let off = psnr(&x, &[1.0 / 255.0, 1.0 + 1.0 / 255.0], scale).unwrap();
        assert!((off.db - expected).abs() < 1e-9);
        let exact = psnr(&x, &x, scale).unwrap();
        assert_eq!(exact, Psnr { db: 100.0, capped: true });
    }

    fn random_field(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..255.0))
    }

    #[test]
    fn ssim_examples() {
        let x = random_field(1, 16, 20);
        assert!((ssim_scaled(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-12);
        let inv = x.mapv(|v| 255.0 - v);
        assert!(ssim_scaled(x.view(), inv.view()).unwrap() < 1.0);
        let c = Array2::from_elem((12, 12), 42.0);
        assert!((ssim_scaled(c.view(), c.view()).unwrap() - 1.0).abs() < 1e-12);
        let small = Array2::<f64>::zeros((10, 12));
        assert!(ssim_scaled(small.view(), small.view()).is_err());
    }

    /// Direct 2D window sum at every valid position.
    fn ssim_direct(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let g = gaussian_window();
        let (h, w) = x.dim();
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..SSIM_WINDOW {
                    for b in 0..SSIM_WINDOW {
                        let wt = g[a] * g[b];
                        let (u, v) = (x[[i + a, j + b]], y[[i + a, j + b]]);
                        mx += wt * u;
                        my += wt * v;
                        sxx += wt * u * u;
                        syy += wt * v * v;
                        sxy += wt * u * v;
                    }
                }
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * (sxy - mx * my) + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (sxx - mx * mx + syy - my * my + SSIM_C2);
                total += num / den;
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let x = random_field(2, 14, 13);
        let y = &x + &random_field(3, 14, 13).mapv(|v| v * 0.2);
        let fast = ssim_scaled(x.view(), y.view()).unwrap();
        assert!((fast - ssim_direct(&x, &y)).abs() < 1e-10);
    }

    #[test]
    fn histogram_counts_every_error() {
        let h = ErrorHistogram::from_errors(&[0.0, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        assert_eq!(h.counts[3], 2);
        assert_eq!(h.mean, 0.625);
        assert_eq!(h.edges.len(), 5);
    }

    proptest! {
        #[test]
        fn symmetric_metrics(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert_eq!(mae(&x, &y).unwrap(), mae(&y, &x).unwrap());
            prop_assert_eq!(mse(&x, &y).unwrap(), mse(&y, &x).unwrap());
            prop_assert!((smape(&x, &y).unwrap() - smape(&y, &x).unwrap()).abs() < 1e-9);
            if let Some(r) = r2(&x, &y).unwrap() {
                prop_assert!(r <= 1.0);
            }
        }

        #[test]
        fn scaling_error_up_is_monotone(
            v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30),
            c in 1.0f64..5.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + c * (b - a)).collect();
            prop_assert!(mae(&x, &z).unwrap() >= mae(&x, &y).unwrap() * (1.0 - 1e-12));
            prop_assert!(mse(&x, &z).unwrap() >= mse(&x, &y).unwrap() * (1.0 - 1e-12));
        }

        #[test]
        fn ssim_identity(seed in 0u64..1000, h in 11usize..16, w in 11usize..16, amp in 1e-3f64..1e3) {
            let x = random_field(seed, h, w).mapv(|v| v * amp - 7.0);
            let scale = PixelScale::of(x.as_slice().unwrap());
            prop_assert!((ssim(x.view(), x.view(), scale).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
