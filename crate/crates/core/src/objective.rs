//! Training objective: per-pixel squared error plus a beta-weighted KL
//! between the inference network and the prior.
//!
//! Both terms are summed over their trailing dimensions and averaged over
//! the batch, then summed over the predicted steps `t = C+1..T`.

use crate::config::Mode;
use crate::error::{Error, Result};
use crate::models::{reparam_with_noise, standard_normal, BoundParams, GaussianVars, ModelParams, SvgModel};
use crate::rng::Rng;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Per-step loss breakdown. `*_per_step[k]` refers to frame `C+1+k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub recon_per_step: Vec<f64>,
    pub kl_per_step: Vec<f64>,
    pub beta: f64,
}

impl LossReport {
    pub fn recon(&self) -> f64 {
        self.recon_per_step.iter().sum()
    }

    pub fn kl(&self) -> f64 {
        self.kl_per_step.iter().sum()
    }
}

/// `KL(q || p)` for diagonal Gaussians in log-sigma form, summed over the
/// latent axis and averaged over the batch. `p = None` means N(0, I).
pub fn gaussian_kl(g: &mut Graph, q: &GaussianVars, p: Option<&GaussianVars>) -> Result<Var> {
    let batch = g.shape(q.mu)[0] as f64;
    let ls2 = g.scale(q.log_sigma, 2.0);
    let var_q = g.exp(ls2);
    let term = match p {
        Some(p) => {
            let dls = g.sub(p.log_sigma, q.log_sigma)?;
            let dm = g.sub(q.mu, p.mu)?;
            let dm2 = g.square(dm);
            let num = g.add(var_q, dm2)?;
            let neg2 = g.scale(p.log_sigma, -2.0);
            let inv_var_p = g.exp(neg2);
            let ratio = g.mul(num, inv_var_p)?;
            let half = g.scale(ratio, 0.5);
            g.add(dls, half)?
        }
        None => {
            let m2 = g.square(q.mu);
            let num = g.add(var_q, m2)?;
            let half = g.scale(num, 0.5);
            g.sub(half, q.log_sigma)?
        }
    };
    let term = g.add_scalar(term, -0.5);
    let total = g.sum(term);
    Ok(g.scale(total, 1.0 / batch))
}

/// Plain-value KL between diagonal Gaussians given `(mu, sigma)` pairs,
/// summed over all entries.
pub fn gaussian_kl_values(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::Config("gaussian_kl_values: length mismatch".into()));
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (sq, sp) = (sigma_q[i], sigma_p[i]);
        if !(sq > 0.0 && sp > 0.0) {
            return Err(Error::Numerical(format!(
                "standard deviations must be positive (entry {i}: {sq}, {sp})"
            )));
        }
        let d = mu_q[i] - mu_p[i];
        kl += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

/// `sum (x_hat - x)^2 / B`.
pub fn reconstruction_loss(g: &mut Graph, x_hat: Var, x: Var) -> Result<Var> {
    let batch = g.shape(x)[0] as f64;
    let d = g.sub(x_hat, x)?;
    let d2 = g.square(d);
    let s = g.sum(d2);
    Ok(g.scale(s, 1.0 / batch))
}

/// Where the latent noise for each step comes from.
pub enum Noise<'a> {
    Rng(&'a mut Rng),
    /// One `[B x |z|]` tensor per step `t = 2..=T`.
    Fixed(&'a [Tensor]),
}

/// A finished forward pass ready for backpropagation.
pub struct LossPass {
    pub report: LossReport,
    pub graph: Graph,
    pub loss: Var,
    pub bound: BoundParams,
}

impl LossPass {
    pub fn backward(mut self) -> Result<(LossReport, ModelGrads)> {
        let grads = self.graph.backward(self.loss)?;
        Ok((self.report, ModelGrads::collect(&grads, &self.bound, &self.graph)))
    }
}

/// Gradients in the same layout as [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
    pub predictor: Vec<Tensor>,
    pub posterior: Option<Vec<Tensor>>,
    pub prior: Option<Vec<Tensor>>,
}

impl ModelGrads {
    fn collect(grads: &Gradients, bound: &BoundParams, g: &Graph) -> Self {
        let take = |vars: &[Var]| -> Vec<Tensor> {
            vars.iter().map(|v| grads.get_or_zeros(*v, g.shape(*v))).collect()
        };
        ModelGrads {
            encoder: take(&bound.encoder),
            decoder: take(&bound.decoder),
            predictor: take(&bound.predictor),
            posterior: bound.posterior.as_deref().map(take),
            prior: bound.prior.as_deref().map(take),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Tensor> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.predictor)
            .chain(self.posterior.iter().flatten())
            .chain(self.prior.iter().flatten())
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(&mut self.decoder)
            .chain(&mut self.predictor)
            .chain(self.posterior.iter_mut().flatten())
            .chain(self.prior.iter_mut().flatten())
    }

    pub fn global_norm(&self) -> f64 {
        self.all().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Teacher-forced sequence loss for fp/lp models.
///
/// `frames` holds `T` tensors `[B x 1 x S x S]`; the first `context` are
/// conditioning frames. Latents are drawn from the inference network at
/// every step; only steps after the context contribute to the loss.
pub fn sequence_elbo_loss(
    model: &SvgModel,
    params: &ModelParams,
    frames: &[Tensor],
    context: usize,
    beta: f64,
    noise: Noise<'_>,
) -> Result<LossPass> {
    if !model.mode().is_stochastic() {
        return Err(Error::Mode {
            mode: model.mode().name().into(),
            what: "the variational objective",
        });
    }
    sequence_pass(model, params, frames, context, beta, noise)
}

/// Reconstruction-only sequence loss for the deterministic baseline.
pub fn sequence_recon_loss(
    model: &SvgModel,
    params: &ModelParams,
    frames: &[Tensor],
    context: usize,
) -> Result<LossPass> {
    if model.mode().is_stochastic() {
        return Err(Error::Config("reconstruction-only loss is for the deterministic model".into()));
    }
    sequence_pass(model, params, frames, context, 0.0, Noise::Fixed(&[]))
}

fn sequence_pass(
    model: &SvgModel,
    params: &ModelParams,
    frames: &[Tensor],
    context: usize,
    beta: f64,
    mut noise: Noise<'_>,
) -> Result<LossPass> {
    let total_len = frames.len();
    if context == 0 || context >= total_len {
        return Err(Error::Config(format!(
            "need 1 <= context < T (context {context}, T {total_len})"
        )));
    }
    let batch = frames[0].shape()[0];
    let zdim = model.config().latent_dim;
    let stochastic = model.mode().is_stochastic();
    if let Noise::Fixed(eps) = &noise {
        if stochastic && eps.len() != total_len - 1 {
            return Err(Error::Config(format!(
                "fixed noise needs {} tensors, got {}",
                total_len - 1,
                eps.len()
            )));
        }
    }

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let stacked = g.constant(Tensor::stack_rows(frames)?);
    let enc = model.encode(&mut g, &bound, stacked)?;
    let h: Vec<Var> = (0..total_len)
        .map(|t| g.slice(enc.h, 0, t * batch, batch))
        .collect::<std::result::Result<_, _>>()?;
    let skips: Vec<Var> = enc
        .skips
        .iter()
        .map(|s| g.slice(*s, 0, (context - 1) * batch, batch))
        .collect::<std::result::Result<_, _>>()?;

    let mut state = crate::models::StepState::constant(&mut g, &model.initial_state(batch));
    let mut outputs = Vec::new();
    let mut kls = Vec::new();
    for t in 1..total_len {
        let z = if stochastic {
            let q = model.posterior_step(&mut g, &bound, h[t], state.posterior.as_mut().expect("posterior state"))?;
            let p = match state.prior.as_mut() {
                Some(sp) => Some(model.prior_step(&mut g, &bound, h[t - 1], sp)?),
                None => None,
            };
            let eps = match &mut noise {
                Noise::Rng(rng) => standard_normal(batch, zdim, rng),
                Noise::Fixed(list) => list[t - 1].clone(),
            };
            let z = reparam_with_noise(&mut g, q.mu, q.sigma, eps)?;
            if t >= context {
                kls.push(gaussian_kl(&mut g, &q, p.as_ref())?);
            }
            Some(z)
        } else {
            None
        };
        let gt = model.predictor_step(&mut g, &bound, h[t - 1], z, &mut state.predictor)?;
        if t >= context {
            outputs.push(gt);
        }
    }

    let steps = outputs.len();
    let all_g = g.concat(&outputs, 0)?;
    let tiled: Vec<Var> = skips
        .iter()
        .map(|s| g.concat(&vec![*s; steps], 0))
        .collect::<std::result::Result<_, _>>()?;
    let x_hat = model.decode(&mut g, &bound, all_g, &tiled)?;

    let mut recon_vars = Vec::with_capacity(steps);
    for k in 0..steps {
        let pred = g.slice(x_hat, 0, k * batch, batch)?;
        let target = g.constant(frames[context + k].clone());
        recon_vars.push(reconstruction_loss(&mut g, pred, target)?);
    }
    let mut terms = recon_vars.clone();
    for &kl in &kls {
        terms.push(g.scale(kl, beta));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }

    let report = LossReport {
        total: g.value(loss).item(),
        recon_per_step: recon_vars.iter().map(|v| g.value(*v).item()).collect(),
        kl_per_step: kls.iter().map(|v| g.value(*v).item()).collect(),
        beta,
    };
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", report.total)));
    }
    Ok(LossPass {
        report,
        graph: g,
        loss,
        bound,
    })
}

/// Convenience for callers that only need the report.
pub fn evaluate_loss(
    model: &SvgModel,
    params: &ModelParams,
    frames: &[Tensor],
    context: usize,
    beta: f64,
    noise: Noise<'_>,
) -> Result<LossReport> {
    let pass = match model.mode() {
        Mode::Deterministic => sequence_recon_loss(model, params, frames, context)?,
        _ => sequence_elbo_loss(model, params, frames, context, beta, noise)?,
    };
    Ok(pass.report)
}
