//! Trajectory-distribution estimation by template matching, and the
//! learned-prior variance probe.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Bounds, Glyph, VideoSequence, Wall};
use crate::error::{Error, Result};
use crate::models::{ModelParams, SvgModel};
use crate::nn::StateVars;
use crate::tensor::Graph;

/// Offsets whose window has (near) zero variance have no defined
/// correlation and are skipped.
const FLAT_WINDOW: f64 = 1e-12;

/// Default half-range of the velocity histogram: bins centred on -8..=8.
pub const VELOCITY_HALF_RANGE: i64 = 8;

/// Top-left `(x, y)` offset maximising zero-mean normalised
/// cross-correlation between `template` and the frame window under it.
/// Ties go to the smallest `y`, then the smallest `x`. Returns `None` when
/// every window is flat (no peak exists).
pub fn locate_digit(frame: &[f64], h: usize, w: usize, template: &Glyph) -> Result<Option<(usize, usize)>> {
    let k = template.size;
    if k > h || k > w {
        return Err(Error::Data(format!("template {k}x{k} does not fit in a {h}x{w} frame")));
    }
    if frame.len() != h * w {
        return Err(Error::Data(format!("frame has {} pixels, expected {}", frame.len(), h * w)));
    }
    let n = (k * k) as f64;
    let t_mean = template.pixels.iter().sum::<f64>() / n;
    let centred: Vec<f64> = template.pixels.iter().map(|p| p - t_mean).collect();
    let t_norm = centred.iter().map(|c| c * c).sum::<f64>().sqrt();
    if t_norm <= FLAT_WINDOW {
        return Err(Error::Data("template is constant".into()));
    }

    // summed-area tables of the frame and its square
    let stride = w + 1;
    let mut s1 = vec![0.0; (h + 1) * stride];
    let mut s2 = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let (mut r1, mut r2) = (0.0, 0.0);
        for x in 0..w {
            let v = frame[y * w + x];
            r1 += v;
            r2 += v * v;
            s1[(y + 1) * stride + x + 1] = s1[y * stride + x + 1] + r1;
            s2[(y + 1) * stride + x + 1] = s2[y * stride + x + 1] + r2;
        }
    }
    let area = |s: &[f64], x: usize, y: usize| {
        s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
    };

    let mut best: Option<(f64, usize, usize)> = None;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let sum = area(&s1, x, y);
            let var = area(&s2, x, y) - sum * sum / n;
            if var <= FLAT_WINDOW {
                continue;
            }
            let mut dot = 0.0;
            for r in 0..k {
                let row = &frame[(y + r) * w + x..(y + r) * w + x + k];
                dot += row.iter().zip(&centred[r * k..(r + 1) * k]).map(|(a, b)| a * b).sum::<f64>();
            }
            let score = dot / (var.sqrt() * t_norm);
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, x, y));
            }
        }
    }
    Ok(best.map(|(_, x, y)| (x, y)))
}

/// Counts of integer displacements `(dx, dy)` between frames `t` and
/// `t + 1`, on unit bins centred on `-half_range..=half_range`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityHistogram {
    pub t: usize,
    pub half_range: i64,
    /// Row-major by `dy` then `dx`.
    pub counts: Vec<u64>,
    /// Number of counted displacements (equals the sum of `counts`).
    pub samples: u64,
    /// Frames where localisation found no peak, or the displacement fell
    /// outside the binned square.
    pub dropped: u64,
}

impl VelocityHistogram {
    pub fn new(t: usize, half_range: i64) -> Self {
        let side = (2 * half_range + 1) as usize;
        VelocityHistogram {
            t,
            half_range,
            counts: vec![0; side * side],
            samples: 0,
            dropped: 0,
        }
    }

    pub fn side(&self) -> usize {
        (2 * self.half_range + 1) as usize
    }

    pub fn bin(&self, dx: i64, dy: i64) -> Option<usize> {
        let r = self.half_range;
        if dx.abs() > r || dy.abs() > r {
            return None;
        }
        Some((dy + r) as usize * self.side() + (dx + r) as usize)
    }

    pub fn count(&self, dx: i64, dy: i64) -> u64 {
        self.bin(dx, dy).map_or(0, |i| self.counts[i])
    }

    pub fn add(&mut self, v: Option<(i64, i64)>) {
        match v.and_then(|(dx, dy)| self.bin(dx, dy)) {
            Some(i) => {
                self.counts[i] += 1;
                self.samples += 1;
            }
            None => self.dropped += 1,
        }
    }

    /// Add the counts of another histogram with the same binning.
    pub fn merge(&mut self, other: &VelocityHistogram) -> Result<()> {
        if other.half_range != self.half_range {
            return Err(Error::Data(format!(
                "cannot merge histograms with half-range {} and {}",
                self.half_range, other.half_range
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.samples += other.samples;
        self.dropped += other.dropped;
        Ok(())
    }

    pub fn normalized(&self) -> Vec<f64> {
        let n = self.samples.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Fraction of counted mass in the fullest bin.
    pub fn peak_mass(&self) -> f64 {
        self.counts.iter().copied().max().unwrap_or(0) as f64 / self.samples.max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let r = self.half_range;
        let mut out = String::from("dy\\dx");
        for dx in -r..=r {
            out.push_str(&format!(",{dx}"));
        }
        out.push('\n');
        for dy in -r..=r {
            out.push_str(&dy.to_string());
            for dx in -r..=r {
                out.push_str(&format!(",{}", self.count(dx, dy)));
            }
            out.push('\n');
        }
        write_file(path, &out)
    }
}

/// One localisation pair: frame `t`, frame `t + 1`, and the template.
pub type FramePair<'a> = (&'a [f64], &'a [f64], &'a Glyph);

/// Histogram of `locate(frame t+1) - locate(frame t)` over the given pairs.
pub fn velocity_distribution(pairs: &[FramePair<'_>], h: usize, w: usize, t: usize) -> Result<VelocityHistogram> {
    let found: Vec<Option<(i64, i64)>> = pairs
        .par_iter()
        .map(|(a, b, tpl)| -> Result<Option<(i64, i64)>> {
            let p0 = locate_digit(a, h, w, tpl)?;
            let p1 = locate_digit(b, h, w, tpl)?;
            Ok(p0.zip(p1).map(|((x0, y0), (x1, y1))| (x1 as i64 - x0 as i64, y1 as i64 - y0 as i64)))
        })
        .collect::<Result<_>>()?;
    let mut hist = VelocityHistogram::new(t, VELOCITY_HALF_RANGE);
    for v in found {
        hist.add(v);
    }
    Ok(hist)
}

/// [`velocity_distribution`] over single-digit sequences, each matched
/// against its own template.
pub fn sequence_velocity_distribution(
    seqs: &[VideoSequence],
    templates: &[&Glyph],
    t: usize,
) -> Result<VelocityHistogram> {
    if seqs.len() != templates.len() {
        return Err(Error::Data(format!("{} sequences but {} templates", seqs.len(), templates.len())));
    }
    let first = seqs.first().ok_or_else(|| Error::Data("no sequences".into()))?;
    if let Some(s) = seqs.iter().find(|s| s.len < t + 2) {
        return Err(Error::Data(format!("sequence of {} frames has no frame {}", s.len, t + 1)));
    }
    let pairs: Vec<FramePair<'_>> = seqs
        .iter()
        .zip(templates)
        .map(|(s, g)| (s.frame(t), s.frame(t + 1), *g))
        .collect();
    velocity_distribution(&pairs, first.height, first.width, t)
}

/// Total-variation distance between two normalised histograms.
pub fn compare_distributions(a: &VelocityHistogram, b: &VelocityHistogram) -> Result<f64> {
    if a.half_range != b.half_range {
        return Err(Error::Data(format!(
            "histogram binning differs: half-range {} vs {}",
            a.half_range, b.half_range
        )));
    }
    if a.samples == 0 || b.samples == 0 {
        return Err(Error::Data("cannot compare an empty histogram".into()));
    }
    tv_distance(&a.normalized(), &b.normalized())
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Data("distributions have different support".into()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Distribution of the rendered displacement `round(clamp(pos + v, 0, max))
/// - round(pos)` along one axis for `v ~ U[lo, hi]`, where `max` is an
/// integer extent. Returned over `-half_range..=half_range`.
pub fn axis_displacement_pmf(pos: f64, max: f64, lo: f64, hi: f64, half_range: i64) -> Result<Vec<f64>> {
    if hi <= lo {
        return Err(Error::Config(format!("empty velocity range [{lo}, {hi}]")));
    }
    let start = pos.round() as i64;
    let mut pmf = vec![0.0; (2 * half_range + 1) as usize];
    let top = max as i64;
    for m in 0..=top {
        let a = if m == 0 { f64::NEG_INFINITY } else { m as f64 - 0.5 - pos };
        let b = if m == top { f64::INFINITY } else { m as f64 + 0.5 - pos };
        let len = (b.min(hi) - a.max(lo)).max(0.0);
        if len == 0.0 {
            continue;
        }
        let d = m - start;
        if d.abs() > half_range {
            return Err(Error::Config(format!("displacement {d} exceeds histogram range")));
        }
        pmf[(d + half_range) as usize] += len / (hi - lo);
    }
    Ok(pmf)
}

/// Exact distribution of the rendered displacement one step after a
/// collision. `(x, y)` is the position at the collision frame (on the
/// wall), `hit_x` / `hit_y` the walls struck there. Both velocity
/// components are redrawn from U[-s, s]; a struck axis keeps only the
/// inward half. Row-major by `dy` then `dx`, like [`VelocityHistogram`].
pub fn post_bounce_distribution(
    bounds: &Bounds,
    x: f64,
    y: f64,
    hit_x: Option<Wall>,
    hit_y: Option<Wall>,
    half_range: i64,
) -> Result<Vec<f64>> {
    let s = bounds.max_speed;
    let range = |hit: Option<Wall>| match hit {
        Some(Wall::Left) | Some(Wall::Top) => (0.0, s),
        Some(_) => (-s, 0.0),
        None => (-s, s),
    };
    let (xl, xh) = range(hit_x);
    let (yl, yh) = range(hit_y);
    let px = axis_displacement_pmf(x, bounds.max_x(), xl, xh, half_range)?;
    let py = axis_displacement_pmf(y, bounds.max_y(), yl, yh, half_range)?;
    Ok(py.iter().flat_map(|a| px.iter().map(move |b| a * b)).collect())
}

/// Per-step statistics of the learned prior's standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorVarianceCurve {
    /// 0-based index of the frame each entry predicts (`1..T`).
    pub steps: Vec<usize>,
    /// Mean over sequences of the latent-averaged sigma.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Collision frames of each digit of the shared trajectory.
    pub collisions: Vec<Vec<usize>>,
}

impl PriorVarianceCurve {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Mean sigma over entries within `near` frames of a collision, and over
    /// entries at least `far` frames from every collision.
    pub fn collision_contrast(&self, near: usize, far: usize) -> Option<(f64, f64)> {
        let events: Vec<usize> = self.collisions.iter().flatten().copied().collect();
        let dist = |t: usize| events.iter().map(|&k| t.abs_diff(k)).min();
        let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (&t, &m) in self.steps.iter().zip(&self.mean) {
            match dist(t) {
                Some(d) if d <= near => {
                    a += m;
                    na += 1;
                }
                Some(d) if d < far => {}
                _ => {
                    b += m;
                    nb += 1;
                }
            }
        }
        (na > 0 && nb > 0).then(|| (a / na as f64, b / nb as f64))
    }

    /// CSV rows `t,mean,std,collision_digit1,collision_digit2` with `t` the
    /// 1-based frame index and a 1 flag on each digit's collision frames.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,mean,std,collision_digit1,collision_digit2\n");
        for (i, &t) in self.steps.iter().enumerate() {
            let flag = |d: usize| self.collisions.get(d).is_some_and(|c| c.contains(&t)) as u8;
            out.push_str(&format!(
                "{},{:.10},{:.10},{},{}\n",
                t + 1,
                self.mean[i],
                self.std[i],
                flag(0),
                flag(1)
            ));
        }
        write_file(path, &out)
    }
}

/// Feed ground-truth sequences through the encoder and learned prior and
/// record sigma of `p(z_t | x_1..t-1)` for every `t >= 1`. The sequences
/// are expected to share one trajectory; its collision log is attached.
pub fn prior_variance_probe(model: &SvgModel, params: &ModelParams, probe: &[VideoSequence]) -> Result<PriorVarianceCurve> {
    if model.config().mode != crate::config::Mode::Lp {
        return Err(Error::Mode {
            mode: model.mode().name().into(),
            what: "the prior-variance probe, which needs a learned prior",
        });
    }
    let first = probe.first().ok_or_else(|| Error::Data("empty probe set".into()))?;
    if first.len < 2 {
        return Err(Error::Data("probe sequences need at least two frames".into()));
    }
    let frames = crate::data::batch_frames(probe)?;
    let batch = probe.len();
    let mut state = model.initial_state(batch).prior.expect("lp model has prior state");
    let (mut mean, mut std, mut steps) = (Vec::new(), Vec::new(), Vec::new());
    for t in 1..first.len {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let mut sv = StateVars::constant(&mut g, &state);
        let x = g.constant(frames[t - 1].clone());
        let h = model.encode(&mut g, &p, x)?.h;
        let prior = model.prior_step(&mut g, &p, h, &mut sv)?.detach(&g);
        let sigma = prior.sigma();
        let zdim = sigma.shape()[1];
        let per_seq: Vec<f64> = sigma.data().chunks(zdim).map(|r| r.iter().sum::<f64>() / zdim as f64).collect();
        let m = per_seq.iter().sum::<f64>() / batch as f64;
        let var = per_seq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / batch as f64;
        steps.push(t);
        mean.push(m);
        std.push(var.sqrt());
        state = sv.detach(&g);
    }
    Ok(PriorVarianceCurve {
        steps,
        mean,
        std,
        collisions: first.collisions.iter().map(|c| c.iter().map(|e| e.step).collect()).collect(),
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
