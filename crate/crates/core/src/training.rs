//! Adam, the training loop and checkpoints.
//!
//! Step `k` draws its batch from stream `(seed, TrainData, k)` and its
//! latent noise from `(seed, TrainNoise, k)`, so the only RNG state a
//! checkpoint has to carry is the step counter.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Mode};
use crate::data::{batch_frames, SmMnist};
use crate::error::{Error, Result};
use crate::models::{Component, ModelParams, SvgModel};
use crate::objective::{sequence_elbo_loss, sequence_recon_loss, LossReport, ModelGrads, Noise};
use crate::rng::{derive_seed, stream, Domain};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Refuses non-finite gradients without
/// touching any state.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[&Tensor],
    state: &mut AdamState,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Config(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.all_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Produces the training batch for a given step.
pub trait BatchSource {
    /// `T` tensors of shape `[B x 1 x S x S]`.
    fn batch(&self, step: u64) -> Result<Vec<Tensor>>;
}

/// Fresh SM-MNIST sequences for every step.
pub struct OnTheFly<'a> {
    pub data: &'a SmMnist,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl BatchSource for OnTheFly<'_> {
    fn batch(&self, step: u64) -> Result<Vec<Tensor>> {
        let first = step * self.batch_size as u64;
        let seqs = self
            .data
            .sequences(self.seed, Domain::TrainData, first, self.batch_size, self.seq_len)?;
        batch_frames(&seqs)
    }
}

/// The same batch at every step.
pub struct FixedBatch(pub Vec<Tensor>);

impl BatchSource for FixedBatch {
    fn batch(&self, _step: u64) -> Result<Vec<Tensor>> {
        Ok(self.0.clone())
    }
}

/// Metrics for one completed step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the completed step.
    pub step: u64,
    pub report: LossReport,
    pub grad_norm: f64,
    pub clipped: bool,
    pub wallclock_ms: u128,
}

pub const METRICS_HEADER: &str = "step,total,recon,kl,wallclock_ms,grad_norm,clipped";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{:e},{}",
            self.step,
            self.report.total,
            self.report.recon(),
            self.report.kl(),
            self.wallclock_ms,
            self.grad_norm,
            self.clipped as u8
        )
    }
}

/// Model, parameters, optimiser state and configuration.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: SvgModel,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed optimisation steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.model.validate()?;
        config.train.validate()?;
        let init_seed = derive_seed(config.seed, Domain::Init, &[]);
        let (model, params) = SvgModel::new(config.model.clone(), init_seed)?;
        let adam = AdamState::new(config.train.lr, params_iter(&params));
        Ok(Trainer {
            config,
            model,
            params,
            adam,
            step: 0,
        })
    }

    /// Loss and gradients for one batch at the current step.
    pub fn loss_and_grads(&self, frames: &[Tensor]) -> Result<(LossReport, ModelGrads)> {
        let tc = &self.config.train;
        let pass = match self.model.mode() {
            Mode::Deterministic => sequence_recon_loss(&self.model, &self.params, frames, tc.context)?,
            _ => {
                let mut rng = stream(self.config.seed, Domain::TrainNoise, &[self.step]);
                sequence_elbo_loss(&self.model, &self.params, frames, tc.context, tc.beta, Noise::Rng(&mut rng))?
            }
        };
        pass.backward()
    }

    /// One optimisation step on the batch for the current step index.
    pub fn train_step(&mut self, source: &dyn BatchSource) -> Result<StepMetrics> {
        let start = Instant::now();
        let frames = source.batch(self.step)?;
        let (report, mut grads) = self.loss_and_grads(&frames)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.train.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient norm at step {}",
                self.step + 1
            )));
        }
        let g: Vec<&Tensor> = grads.all().collect();
        adam_step(params_iter_mut(&mut self.params), &g, &mut self.adam)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            report,
            grad_norm,
            clipped: self.config.train.clip_norm > 0.0 && grad_norm > self.config.train.clip_norm,
            wallclock_ms: start.elapsed().as_millis(),
        })
    }

    /// Run until `self.step == until`, calling `on_step` after every step.
    pub fn train(
        &mut self,
        source: &dyn BatchSource,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let m = self.train_step(source)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// Parameter tensors in checkpoint order.
pub fn params_iter(p: &ModelParams) -> impl Iterator<Item = &Tensor> {
    p.components()
        .into_iter()
        .flat_map(|(_, set)| set.iter().map(|(_, t)| t))
}

pub fn params_iter_mut(p: &mut ModelParams) -> impl Iterator<Item = &mut Tensor> {
    let ModelParams {
        encoder,
        decoder,
        predictor,
        posterior,
        prior,
    } = p;
    encoder
        .tensors_mut()
        .chain(decoder.tensors_mut())
        .chain(predictor.tensors_mut())
        .chain(posterior.iter_mut().flat_map(|s| s.tensors_mut()))
        .chain(prior.iter_mut().flat_map(|s| s.tensors_mut()))
}

/// Append-only CSV metrics log.
pub struct MetricsLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl MetricsLog {
    /// Open for appending; writes the header if the file is new or empty.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

const CKPT_MAGIC: &[u8; 8] = b"SVGCKPT\0";
pub const CKPT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

fn qualified_names(params: &ModelParams) -> Vec<String> {
    params
        .components()
        .into_iter()
        .flat_map(|(c, set)| set.iter().map(move |(n, _)| format!("{}/{n}", c.name())))
        .collect()
}

/// Serialise a trainer.
///
/// Layout: magic `SVGCKPT\0`, `u32` version, config TOML (`u32` length +
/// UTF-8), `u64` step, Adam `u64` step and `f64` lr, beta1, beta2, eps,
/// `u32` record count, then records of (name, `u32` rank, `u64` dims,
/// `f64` values), all little-endian, then the SHA-256 of everything before.
/// Parameter records are named `component/param`; Adam moments are
/// `adam.m/...` and `adam.v/...`.
pub fn checkpoint_bytes(tr: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CKPT_MAGIC);
    w.u32(CKPT_VERSION);
    w.str(&tr.config.to_toml());
    w.u64(tr.step);
    w.u64(tr.adam.step);
    for v in [tr.adam.lr, tr.adam.beta1, tr.adam.beta2, tr.adam.eps] {
        w.f64(v);
    }
    let names = qualified_names(&tr.params);
    w.u32(3 * names.len() as u32);
    for (name, t) in names.iter().zip(params_iter(&tr.params)) {
        w.tensor(name, t);
    }
    for (name, t) in names.iter().zip(&tr.adam.m) {
        w.tensor(&format!("adam.m/{name}"), t);
    }
    for (name, t) in names.iter().zip(&tr.adam.v) {
        w.tensor(&format!("adam.v/{name}"), t);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn save_checkpoint(tr: &Trainer, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(tr);
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < CKPT_MAGIC.len() + 4 + 32 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt)".into()));
    }
    let mut r = Reader { buf: body, at: 8 };
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} is not supported (expected {CKPT_VERSION})"
        )));
    }
    let config = ExperimentConfig::from_toml(&r.str()?)?;
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let count = r.u32()? as usize;
    let mut records = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    if r.at != body.len() {
        return Err(Error::Checkpoint("trailing bytes after records".into()));
    }

    let mut tr = Trainer::new(config)?;
    let names = qualified_names(&tr.params);
    if count != 3 * names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} records for a {} model, found {count}",
            3 * names.len(),
            tr.model.mode().name()
        )));
    }
    let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
        let t = records
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
        if t.shape() != like.shape() {
            return Err(Error::Checkpoint(format!(
                "record `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };
    for (name, p) in names.iter().zip(params_iter_mut(&mut tr.params)) {
        *p = take(name, p)?;
    }
    for (i, name) in names.iter().enumerate() {
        tr.adam.m[i] = take(&format!("adam.m/{name}"), &tr.adam.m[i])?;
        tr.adam.v[i] = take(&format!("adam.v/{name}"), &tr.adam.v[i])?;
    }
    tr.step = step;
    tr.adam.step = adam_step;
    tr.adam.lr = lr;
    tr.adam.beta1 = beta1;
    tr.adam.beta2 = beta2;
    tr.adam.eps = eps;
    Ok(tr)
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Component names present in a trainer, in checkpoint order.
pub fn present_components(tr: &Trainer) -> Vec<Component> {
    tr.params.components().into_iter().map(|(c, _)| c).collect()
}
