//! Frame-quality metrics and best-of-N evaluation of stochastic rollouts.

use std::io::Write;
use std::path::Path;

use crate::data::{batch_frames, VideoSequence};
use crate::error::{Error, Result};
use crate::models::{ModelParams, Sampling, SvgModel};
use crate::rng::{stream, Domain, Rng};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Returned by [`psnr`] for identical frames, and the ceiling otherwise.
pub const PSNR_CAP: f64 = 100.0;

/// Rows of test sequences pushed through one rollout batch.
const EVAL_BATCH: usize = 64;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

fn check_pair(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<()> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Config(format!(
            "frame sizes {} and {} do not match {h}x{w}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Valid-region separable filter of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let src = &img[y * w + x..y * w + x + k];
            rows[y * ow + x] = src.iter().zip(taps).map(|(a, t)| a * t).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| rows[(y + i) * ow + x] * taps[i]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `h x w` frames with values in [0, 1],
/// over every position where the 11x11 window fits.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair(a, b, h, w)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!("ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_taps();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair(a, b, h, w)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Ssim,
    Psnr,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Ssim, Metric::Psnr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr",
        }
    }

    pub fn score(self, a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
        match self {
            Metric::Ssim => ssim(a, b, h, w),
            Metric::Psnr => psnr(a, b, h, w),
        }
    }
}

/// Per-step mean of a metric over test sequences with a normal-approximation
/// 95% half-width. Entry `i` is predicted frame `context + i` (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricCurve {
    pub metric: Metric,
    pub samples: usize,
    pub context: usize,
    pub mean: Vec<f64>,
    pub ci95: Vec<f64>,
}

impl MetricCurve {
    /// Summarise a `[sequence][step]` score table.
    pub fn from_scores(metric: Metric, samples: usize, context: usize, scores: &[Vec<f64>]) -> Self {
        let steps = scores.first().map_or(0, Vec::len);
        let n = scores.len() as f64;
        let mut mean = Vec::with_capacity(steps);
        let mut ci95 = Vec::with_capacity(steps);
        for t in 0..steps {
            let m = scores.iter().map(|s| s[t]).sum::<f64>() / n;
            let half = if scores.len() > 1 {
                let var = scores.iter().map(|s| (s[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
                1.96 * (var / n).sqrt()
            } else {
                0.0
            };
            mean.push(m);
            ci95.push(half);
        }
        MetricCurve {
            metric,
            samples,
            context,
            mean,
            ci95,
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Mean of the curve over steps `from..to` (indices into the curve).
    pub fn window_mean(&self, from: usize, to: usize) -> f64 {
        let s = &self.mean[from..to];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub curves: Vec<MetricCurve>,
    /// Index of the selected sample per metric, per sequence.
    pub selected: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn curve(&self, metric: Metric) -> &MetricCurve {
        self.curves.iter().find(|c| c.metric == metric).expect("every metric is evaluated")
    }
}

/// Index of the largest score; the earliest wins ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Mean score, sample index and per-step scores of a sequence's best sample.
type Best = (f64, usize, Vec<f64>);

/// Best-of-`samples` evaluation over `horizon` predicted frames after
/// `context` conditioning frames. Each sequence keeps, per metric, the
/// sample with the highest mean score over the horizon. Latent noise for
/// sequence `i`, sample `s` comes from stream `(seed, EvalSample, [i, s])`.
pub fn best_of_n_eval(
    model: &SvgModel,
    params: &ModelParams,
    sequences: &[VideoSequence],
    context: usize,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples == 0 {
        return Err(Error::Config("best-of-N evaluation needs at least one sample".into()));
    }
    if horizon == 0 || context == 0 {
        return Err(Error::Config("evaluation needs context >= 1 and horizon >= 1".into()));
    }
    let total = context + horizon;
    if let Some(s) = sequences.iter().find(|s| s.len < total) {
        return Err(Error::Data(format!(
            "test sequences have {} frames, evaluation needs {total}",
            s.len
        )));
    }
    if sequences.is_empty() {
        return Err(Error::Data("no test sequences".into()));
    }
    // a deterministic model produces the same rollout for every sample
    let draws = if model.mode().is_stochastic() { samples } else { 1 };
    let metrics = Metric::ALL;
    let mut best: Vec<Vec<Option<Best>>> = vec![vec![None; sequences.len()]; metrics.len()];

    for (chunk_idx, chunk) in sequences.chunks(EVAL_BATCH).enumerate() {
        let first = chunk_idx * EVAL_BATCH;
        let frames = batch_frames(chunk)?;
        let (h, w) = (chunk[0].height, chunk[0].width);
        for s in 0..draws {
            let mut rngs: Vec<Rng> = (0..chunk.len())
                .map(|i| stream(seed, Domain::EvalSample, &[(first + i) as u64, s as u64]))
                .collect();
            let roll = model.rollout(params, &frames[..context], context, total, Sampling::Prior, &mut rngs)?;
            for (i, seq) in chunk.iter().enumerate() {
                for (m, metric) in metrics.iter().enumerate() {
                    let mut per_step = Vec::with_capacity(horizon);
                    for k in 0..horizon {
                        let pred = &roll.frames[k].data()[i * h * w..(i + 1) * h * w];
                        let v = metric.score(pred, seq.frame(context + k), h, w)?;
                        if !v.is_finite() {
                            return Err(Error::Numerical(format!(
                                "non-finite {} for sequence {} sample {s}",
                                metric.name(),
                                first + i
                            )));
                        }
                        per_step.push(v);
                    }
                    let score = per_step.iter().sum::<f64>() / horizon as f64;
                    let slot = &mut best[m][first + i];
                    if slot.as_ref().is_none_or(|(b, _, _)| score > *b) {
                        *slot = Some((score, s, per_step));
                    }
                }
            }
        }
    }

    let mut curves = Vec::new();
    let mut selected = Vec::new();
    for (m, metric) in metrics.iter().enumerate() {
        let rows: Vec<Best> = best[m].drain(..).map(|b| b.expect("every sequence scored")).collect();
        let table: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
        curves.push(MetricCurve::from_scores(*metric, samples, context, &table));
        selected.push(rows.iter().map(|r| r.1).collect());
    }
    Ok(EvalReport { curves, selected })
}

pub const CURVE_HEADER: &str = "t,mean,ci95,metric,n_samples";

/// CSV rows `t,mean,ci95,metric,n_samples`, with `t` the 1-based index of
/// the predicted frame in the full sequence.
pub fn write_curves_csv(path: &Path, curves: &[MetricCurve]) -> Result<()> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for c in curves {
        for (i, (m, ci)) in c.mean.iter().zip(&c.ci95).enumerate() {
            out.push_str(&format!(
                "{},{m:.10},{ci:.10},{},{}\n",
                c.context + i + 1,
                c.metric.name(),
                c.samples
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn psnr_reference_values() {
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        assert_eq!(psnr_from_mse(1e-20), PSNR_CAP);
    }

    #[test]
    fn selection_prefers_earliest_maximum() {
        assert_eq!(select_best(&[0.1, 0.5, 0.5, 0.2]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn ssim_rejects_small_or_mismatched_frames() {
        assert!(ssim(&[0.0; 64], &[0.0; 64], 8, 8).is_err());
        assert!(ssim(&[0.0; 144], &[0.0; 143], 12, 12).is_err());
        let x: Vec<f64> = (0..144).map(|i| (i % 7) as f64 / 7.0).collect();
        assert!((ssim(&x, &x, 12, 12).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn curve_ci_is_zero_for_identical_sequences() {
        let c = MetricCurve::from_scores(Metric::Ssim, 3, 5, &[vec![0.5, 0.7], vec![0.5, 0.7]]);
        assert_eq!(c.mean, vec![0.5, 0.7]);
        assert_eq!(c.ci95, vec![0.0, 0.0]);
    }
}
