//! Frame encoder/decoder, frame predictor, inference network and learned
//! prior, assembled into one [`SvgModel`] per [`Mode`].
//!
//! All `*_step` functions operate on graph variables so that the same code
//! drives training (teacher forcing, trainable leaves) and generation
//! (constant leaves, one short graph per step).

use rand_distr::{Distribution, StandardNormal};

use crate::config::{Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Init, LinearLayer, LstmStack, ParamSet, RecurrentState, StateVars};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Sub-networks, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Decoder,
    Predictor,
    Posterior,
    Prior,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Encoder,
        Component::Decoder,
        Component::Predictor,
        Component::Posterior,
        Component::Prior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::Predictor => "predictor",
            Component::Posterior => "posterior",
            Component::Prior => "prior",
        }
    }
}

/// Diagonal Gaussian with detached values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianParams {
    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }
}

/// Diagonal Gaussian inside a graph. `sigma = exp(log_sigma)`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
}

impl GaussianVars {
    pub fn detach(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).clone(),
            log_sigma: g.value(self.log_sigma).clone(),
        }
    }
}

/// Encoder output: `h` is `[B x |h|]`, `skips[i]` is the activation of
/// stride-2 stage `i` (`[B x channels[i] x S/2^(i+1) x S/2^(i+1)]`).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub h: Var,
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
struct Encoder {
    down: Vec<ConvLayer>,
    last: ConvLayer,
}

#[derive(Clone, Debug)]
struct Decoder {
    project: LinearLayer,
    up: Vec<ConvLayer>,
    out: ConvLayer,
}

#[derive(Clone, Debug)]
struct Predictor {
    embed: LinearLayer,
    lstm: LstmStack,
    out: LinearLayer,
}

#[derive(Clone, Debug)]
struct GaussianLstm {
    embed: LinearLayer,
    lstm: LstmStack,
    head: LinearLayer,
}

/// Trainable tensors, one set per sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub predictor: ParamSet,
    pub posterior: Option<ParamSet>,
    pub prior: Option<ParamSet>,
}

impl ModelParams {
    pub fn get(&self, c: Component) -> Option<&ParamSet> {
        match c {
            Component::Encoder => Some(&self.encoder),
            Component::Decoder => Some(&self.decoder),
            Component::Predictor => Some(&self.predictor),
            Component::Posterior => self.posterior.as_ref(),
            Component::Prior => self.prior.as_ref(),
        }
    }

    pub fn get_mut(&mut self, c: Component) -> Option<&mut ParamSet> {
        match c {
            Component::Encoder => Some(&mut self.encoder),
            Component::Decoder => Some(&mut self.decoder),
            Component::Predictor => Some(&mut self.predictor),
            Component::Posterior => self.posterior.as_mut(),
            Component::Prior => self.prior.as_mut(),
        }
    }

    /// Present components in checkpoint order.
    pub fn components(&self) -> Vec<(Component, &ParamSet)> {
        Component::ALL
            .iter()
            .filter_map(|&c| self.get(c).map(|p| (c, p)))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.components().iter().map(|(_, p)| p.num_elements()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams {
            encoder: self.encoder.bind(g, trainable),
            decoder: self.decoder.bind(g, trainable),
            predictor: self.predictor.bind(g, trainable),
            posterior: self.posterior.as_ref().map(|p| p.bind(g, trainable)),
            prior: self.prior.as_ref().map(|p| p.bind(g, trainable)),
        }
    }
}

/// [`ModelParams`] bound into a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub predictor: Vec<Var>,
    pub posterior: Option<Vec<Var>>,
    pub prior: Option<Vec<Var>>,
}

impl BoundParams {
    pub fn get(&self, c: Component) -> Option<&[Var]> {
        match c {
            Component::Encoder => Some(&self.encoder),
            Component::Decoder => Some(&self.decoder),
            Component::Predictor => Some(&self.predictor),
            Component::Posterior => self.posterior.as_deref(),
            Component::Prior => self.prior.as_deref(),
        }
    }
}

/// Parameter counts per sub-network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub predictor: usize,
    pub posterior: usize,
    pub prior: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.predictor + self.posterior + self.prior
    }
}

#[derive(Clone, Debug)]
pub struct SvgModel {
    config: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    predictor: Predictor,
    posterior: Option<GaussianLstm>,
    prior: Option<GaussianLstm>,
}

/// How latents are drawn after the conditioning frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// N(0, I) for fp, the learned prior for lp.
    Prior,
    /// Inference network applied to the ground-truth future.
    Posterior,
}

/// Output of [`SvgModel::rollout`]. Entries are indexed by predicted frame
/// `t = C+1..=T`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub frames: Vec<Tensor>,
    pub latents: Vec<Option<Tensor>>,
    pub posterior: Vec<Option<GaussianParams>>,
    pub prior: Vec<Option<GaussianParams>>,
}

/// Recurrent states carried across single-step graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub predictor: RecurrentState,
    pub posterior: Option<RecurrentState>,
    pub prior: Option<RecurrentState>,
}

/// Graph-resident [`ModelState`].
#[derive(Clone, Debug)]
pub struct StepState {
    pub predictor: StateVars,
    pub posterior: Option<StateVars>,
    pub prior: Option<StateVars>,
}

impl StepState {
    pub fn constant(g: &mut Graph, s: &ModelState) -> Self {
        StepState {
            predictor: StateVars::constant(g, &s.predictor),
            posterior: s.posterior.as_ref().map(|p| StateVars::constant(g, p)),
            prior: s.prior.as_ref().map(|p| StateVars::constant(g, p)),
        }
    }

    pub fn detach(&self, g: &Graph) -> ModelState {
        ModelState {
            predictor: self.predictor.detach(g),
            posterior: self.posterior.as_ref().map(|p| p.detach(g)),
            prior: self.prior.as_ref().map(|p| p.detach(g)),
        }
    }
}

/// Draw `[rows x dim]` standard normals.
pub fn standard_normal(rows: usize, dim: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[rows, dim], |_| StandardNormal.sample(rng))
}

/// `[rows x dim]` standard normals where row `i` is drawn from `rngs[i]`,
/// or every row from `rngs[0]` when a single stream is given.
pub fn standard_normal_rows(rows: usize, dim: usize, rngs: &mut [Rng]) -> Result<Tensor> {
    match rngs.len() {
        1 => Ok(standard_normal(rows, dim, &mut rngs[0])),
        n if n == rows => {
            let mut data = Vec::with_capacity(rows * dim);
            for rng in rngs.iter_mut() {
                data.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(rng) }));
            }
            Ok(Tensor::new(vec![rows, dim], data)?)
        }
        n => Err(Error::Config(format!("need 1 or {rows} random streams, got {n}"))),
    }
}

/// `z = mu + sigma * eps`, `eps ~ N(0, I)` drawn from `rng`.
pub fn reparam_sample(g: &mut Graph, mu: Var, sigma: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let eps = Tensor::from_fn(&shape, |_| StandardNormal.sample(rng));
    reparam_with_noise(g, mu, sigma, eps)
}

/// `z = mu + sigma * eps` with caller-supplied noise.
pub fn reparam_with_noise(g: &mut Graph, mu: Var, sigma: Var, eps: Tensor) -> Result<Var> {
    let eps = g.constant(eps);
    let spread = g.mul(sigma, eps)?;
    Ok(g.add(mu, spread)?)
}

/// Initial bias of the output logit. sigmoid(-3) is about 0.05, near the
/// mean intensity of a mostly black frame; starting at 0.5 instead makes
/// the first updates overshoot into a saturated all-black output.
pub const OUTPUT_BIAS_INIT: f64 = -3.0;

impl SvgModel {
    /// Build a model with freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(SvgModel, ModelParams)> {
        config.validate()?;
        let mut init = Init::new(seed);
        let c = &config;
        let n = c.channels.len();

        let mut enc = ParamSet::new();
        let mut down = Vec::with_capacity(n);
        for (i, &ch) in c.channels.iter().enumerate() {
            let cin = if i == 0 { 1 } else { c.channels[i - 1] };
            down.push(ConvLayer::new(&mut enc, &format!("down{i}"), cin, ch, 4, 2, 1, &mut init)?);
        }
        let last = ConvLayer::new(&mut enc, "embed", c.channels[n - 1], c.embed_dim, 4, 1, 0, &mut init)?;

        let mut dec = ParamSet::new();
        let project = LinearLayer::new(&mut dec, "project", c.predictor_out, c.channels[n - 1] * 16, &mut init)?;
        let mut up = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let cout = if i == 0 { c.channels[0] } else { c.channels[i - 1] };
            up.push(ConvLayer::new(&mut dec, &format!("up{i}"), 2 * c.channels[i], cout, 3, 1, 1, &mut init)?);
        }
        let out = ConvLayer::new(&mut dec, "out", c.channels[0], 1, 3, 1, 1, &mut init)?;
        dec.set(out.bias, Tensor::full(&[1], OUTPUT_BIAS_INIT))?;

        let mut pred = ParamSet::new();
        let pred_in = c.embed_dim + if c.mode.is_stochastic() { c.latent_dim } else { 0 };
        let predictor = Predictor {
            embed: LinearLayer::new(&mut pred, "embed", pred_in, c.predictor_cells, &mut init)?,
            lstm: LstmStack::new(
                &mut pred,
                "lstm",
                c.predictor_cells,
                c.predictor_cells,
                c.predictor_layers,
                &mut init,
            )?,
            out: LinearLayer::new(&mut pred, "out", c.predictor_cells, c.predictor_out, &mut init)?,
        };

        let gaussian = |cells: usize, init: &mut Init| -> Result<(GaussianLstm, ParamSet)> {
            let mut ps = ParamSet::new();
            let net = GaussianLstm {
                embed: LinearLayer::new(&mut ps, "embed", c.embed_dim, cells, init)?,
                lstm: LstmStack::new(&mut ps, "lstm", cells, cells, 1, init)?,
                head: LinearLayer::new(&mut ps, "head", cells, 2 * c.latent_dim, init)?,
            };
            Ok((net, ps))
        };
        let (posterior, post_ps) = if c.mode.is_stochastic() {
            let (net, ps) = gaussian(c.posterior_cells, &mut init)?;
            (Some(net), Some(ps))
        } else {
            (None, None)
        };
        let (prior, prior_ps) = if c.mode == Mode::Lp {
            let (net, ps) = gaussian(c.prior_cells, &mut init)?;
            (Some(net), Some(ps))
        } else {
            (None, None)
        };

        let model = SvgModel {
            encoder: Encoder { down, last },
            decoder: Decoder { project, up, out },
            predictor,
            posterior,
            prior,
            config,
        };
        let params = ModelParams {
            encoder: enc,
            decoder: dec,
            predictor: pred,
            posterior: post_ps,
            prior: prior_ps,
        };
        Ok((model, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Closed-form parameter counts for this geometry.
    pub fn param_counts(&self) -> ParamCounts {
        let c = &self.config;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let lin = |fin: usize, fout: usize| fout * fin + fout;
        let lstm = |input: usize, cells: usize| 4 * cells * (input + cells) + 4 * cells;
        let n = c.channels.len();
        let mut encoder = conv(c.channels[n - 1], c.embed_dim, 4);
        let mut decoder = lin(c.predictor_out, 16 * c.channels[n - 1]) + conv(c.channels[0], 1, 3);
        for i in 0..n {
            let cin = if i == 0 { 1 } else { c.channels[i - 1] };
            encoder += conv(cin, c.channels[i], 4);
            let cout = if i == 0 { c.channels[0] } else { c.channels[i - 1] };
            decoder += conv(2 * c.channels[i], cout, 3);
        }
        let z = if c.mode.is_stochastic() { c.latent_dim } else { 0 };
        let p = c.predictor_cells;
        let predictor =
            lin(c.embed_dim + z, p) + c.predictor_layers * lstm(p, p) + lin(p, c.predictor_out);
        let gauss = |cells: usize| lin(c.embed_dim, cells) + lstm(cells, cells) + lin(cells, 2 * c.latent_dim);
        ParamCounts {
            encoder,
            decoder,
            predictor,
            posterior: if c.mode.is_stochastic() { gauss(c.posterior_cells) } else { 0 },
            prior: if c.mode == Mode::Lp { gauss(c.prior_cells) } else { 0 },
        }
    }

    /// Zero recurrent states for a batch of `batch` sequences.
    pub fn initial_state(&self, batch: usize) -> ModelState {
        let c = &self.config;
        ModelState {
            predictor: RecurrentState::zeros(batch, c.predictor_layers, c.predictor_cells),
            posterior: self
                .posterior
                .as_ref()
                .map(|_| RecurrentState::zeros(batch, 1, c.posterior_cells)),
            prior: self
                .prior
                .as_ref()
                .map(|_| RecurrentState::zeros(batch, 1, c.prior_cells)),
        }
    }

    fn check_frames(&self, g: &Graph, x: Var) -> Result<()> {
        let s = self.config.frame_size;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Config(format!(
                "encoder expects frames [B x 1 x {s} x {s}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Frames `[B x 1 x S x S]` to `h` and skip activations.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Encoded> {
        self.check_frames(g, x)?;
        let w = &p.encoder;
        let mut skips = Vec::with_capacity(self.encoder.down.len());
        let mut a = x;
        for layer in &self.encoder.down {
            let y = layer.forward(g, w, a)?;
            a = g.leaky_relu(y);
            skips.push(a);
        }
        let y = self.encoder.last.forward(g, w, a)?;
        let y = g.tanh(y);
        let batch = g.shape(x)[0];
        let h = g.reshape(y, &[batch, self.config.embed_dim])?;
        Ok(Encoded { h, skips })
    }

    /// `g_t [B x |g|]` plus skips to frames in `[0, 1]`. Skips may carry a
    /// batch dimension that matches `g_t`.
    pub fn decode(&self, g: &mut Graph, p: &BoundParams, gt: Var, skips: &[Var]) -> Result<Var> {
        let c = &self.config;
        let n = c.channels.len();
        if skips.len() != n {
            return Err(Error::Config(format!("decoder needs {n} skip tensors, got {}", skips.len())));
        }
        let w = &p.decoder;
        let batch = g.shape(gt)[0];
        let y = self.decoder.project.forward(g, w, gt)?;
        let y = g.leaky_relu(y);
        let mut a = g.reshape(y, &[batch, c.channels[n - 1], 4, 4])?;
        for (layer, skip) in self.decoder.up.iter().zip(skips.iter().rev()) {
            let joined = g.concat(&[a, *skip], 1)?;
            let y = layer.forward(g, w, joined)?;
            let y = g.leaky_relu(y);
            a = g.upsample2x(y)?;
        }
        let y = self.decoder.out.forward(g, w, a)?;
        Ok(g.sigmoid(y))
    }

    fn gaussian_step(
        net: &GaussianLstm,
        g: &mut Graph,
        w: &[Var],
        h: Var,
        state: &mut StateVars,
        zdim: usize,
    ) -> Result<GaussianVars> {
        let e = net.embed.forward(g, w, h)?;
        let top = net.lstm.step(g, w, e, state)?;
        let out = net.head.forward(g, w, top)?;
        let mu = g.slice(out, 1, 0, zdim)?;
        let log_sigma = g.slice(out, 1, zdim, zdim)?;
        let sigma = g.exp(log_sigma);
        Ok(GaussianVars { mu, log_sigma, sigma })
    }

    /// Inference network `q(z_t | x_1..t)` fed with `h_t`.
    pub fn posterior_step(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h: Var,
        state: &mut StateVars,
    ) -> Result<GaussianVars> {
        let net = self.posterior.as_ref().ok_or_else(|| self.unsupported("an inference network"))?;
        let w = p.posterior.as_deref().expect("posterior params bound with posterior net");
        Self::gaussian_step(net, g, w, h, state, self.config.latent_dim)
    }

    /// Learned prior `p(z_t | x_1..t-1)` fed with `h_{t-1}`; lp only.
    pub fn prior_step(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h_prev: Var,
        state: &mut StateVars,
    ) -> Result<GaussianVars> {
        let net = self.prior.as_ref().ok_or_else(|| self.unsupported("a learned prior"))?;
        let w = p.prior.as_deref().expect("prior params bound with prior net");
        Self::gaussian_step(net, g, w, h_prev, state, self.config.latent_dim)
    }

    /// Frame predictor output `g_t` from `h_{t-1}` and `z_t`.
    pub fn predictor_step(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h_prev: Var,
        z: Option<Var>,
        state: &mut StateVars,
    ) -> Result<Var> {
        let input = match (self.mode().is_stochastic(), z) {
            (true, Some(z)) => g.concat(&[h_prev, z], 1)?,
            (false, None) => h_prev,
            (true, None) => return Err(Error::Config("stochastic predictor needs a latent".into())),
            (false, Some(_)) => return Err(self.unsupported("latent inputs")),
        };
        let w = &p.predictor;
        let e = self.predictor.embed.forward(g, w, input)?;
        let top = self.predictor.lstm.step(g, w, e, state)?;
        let out = self.predictor.out.forward(g, w, top)?;
        Ok(g.tanh(out))
    }

    /// Predicted frame `x_hat_t` from `h_{t-1}`, `z_t` and the frozen skips.
    pub fn predict_step(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        h_prev: Var,
        z: Option<Var>,
        state: &mut StateVars,
        skips: &[Var],
    ) -> Result<Var> {
        let gt = self.predictor_step(g, p, h_prev, z, state)?;
        self.decode(g, p, gt, skips)
    }

    fn unsupported(&self, what: &'static str) -> Error {
        Error::Mode {
            mode: self.mode().name().to_string(),
            what,
        }
    }

    /// Generate frames `C+1..=horizon` after conditioning on `frames[..context]`.
    ///
    /// All recurrences warm up over the conditioning frames with latents
    /// from the inference network. Skips are taken from frame `C` and held
    /// fixed. In [`Sampling::Posterior`] mode `frames` must hold the full
    /// ground truth up to `horizon`. Latent noise for batch row `i` comes
    /// from `rngs[i]` (or all rows from `rngs[0]`).
    #[allow(clippy::needless_range_loop)]
    pub fn rollout(
        &self,
        params: &ModelParams,
        frames: &[Tensor],
        context: usize,
        horizon: usize,
        sampling: Sampling,
        rngs: &mut [Rng],
    ) -> Result<Rollout> {
        if context == 0 || context >= horizon {
            return Err(Error::Config(format!(
                "rollout needs 1 <= context < horizon (context {context}, horizon {horizon})"
            )));
        }
        let needed = if sampling == Sampling::Posterior { horizon } else { context };
        if frames.len() < needed {
            return Err(Error::Config(format!(
                "rollout needs {needed} input frames, got {}",
                frames.len()
            )));
        }
        if sampling == Sampling::Posterior && !self.mode().is_stochastic() {
            return Err(self.unsupported("posterior sampling"));
        }
        let batch = frames[0].shape()[0];
        let zdim = self.config.latent_dim;
        let mut state = self.initial_state(batch);
        let mut skips: Vec<Tensor> = Vec::new();
        let mut out = Rollout {
            frames: Vec::new(),
            latents: Vec::new(),
            posterior: Vec::new(),
            prior: Vec::new(),
        };
        let mut prev = frames[0].clone();
        // t is the 0-based index of the frame being predicted
        for t in 1..horizon {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let mut sv = StepState::constant(&mut g, &state);
            let x_prev = g.constant(prev.clone());
            let enc = self.encode(&mut g, &p, x_prev)?;
            if t == context {
                skips = enc.skips.iter().map(|v| g.value(*v).clone()).collect();
            }
            let generating = t >= context;
            let use_posterior = self.mode().is_stochastic() && (!generating || sampling == Sampling::Posterior);

            let post = if use_posterior {
                let x_t = g.constant(frames[t].clone());
                let h_t = self.encode(&mut g, &p, x_t)?.h;
                let sv_post = sv.posterior.as_mut().expect("stochastic state");
                Some(self.posterior_step(&mut g, &p, h_t, sv_post)?)
            } else {
                None
            };
            let prior = match (&self.prior, sv.prior.as_mut()) {
                (Some(_), Some(sv_prior)) => Some(self.prior_step(&mut g, &p, enc.h, sv_prior)?),
                _ => None,
            };
            let z = match self.mode() {
                Mode::Deterministic => None,
                _ => {
                    let eps = standard_normal_rows(batch, zdim, rngs)?;
                    match (use_posterior, self.mode()) {
                        (true, _) => {
                            let q = post.expect("posterior computed");
                            Some(reparam_with_noise(&mut g, q.mu, q.sigma, eps)?)
                        }
                        (false, Mode::Lp) => {
                            let pr = prior.expect("prior computed");
                            Some(reparam_with_noise(&mut g, pr.mu, pr.sigma, eps)?)
                        }
                        _ => Some(g.constant(eps)),
                    }
                }
            };
            let gt = self.predictor_step(&mut g, &p, enc.h, z, &mut sv.predictor)?;
            if generating {
                let skip_vars: Vec<Var> = skips.iter().map(|s| g.constant(s.clone())).collect();
                let x_hat = self.decode(&mut g, &p, gt, &skip_vars)?;
                let frame = g.value(x_hat).clone();
                out.latents.push(z.map(|v| g.value(v).clone()));
                out.posterior.push(post.map(|q| q.detach(&g)));
                out.prior.push(prior.map(|q| q.detach(&g)));
                prev = frame.clone();
                out.frames.push(frame);
            } else {
                prev = frames[t].clone();
            }
            state = sv.detach(&g);
        }
        Ok(out)
    }
}
