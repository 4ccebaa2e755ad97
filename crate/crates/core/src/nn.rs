//! Parameterised layers on top of [`crate::tensor`].
//!
//! Layers never own tensors. They hold [`ParamId`]s into a [`ParamSet`];
//! a forward pass first binds the set into a graph (one leaf per tensor)
//! and hands the resulting `&[Var]` to each layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Index of a tensor inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, insertion-ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, t));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.1.shape() != t.shape() {
            return Err(Error::Config(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                slot.0,
                slot.1.shape(),
                t.shape()
            )));
        }
        slot.1 = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Bind every tensor as a graph leaf, in insertion order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Seeded parameter initialiser: `Uniform(-a, a)` with `a = sqrt(1 / fan_in)`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let a = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-a..=a))
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let weight = params.insert(format!("{name}.weight"), init.uniform(&[fan_out, fan_in], fan_in))?;
        let bias = params.insert(format!("{name}.bias"), init.uniform(&[fan_out], fan_in))?;
        Ok(LinearLayer {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// `x W^T + b` for `x [B x in]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.weight.0], Some(p[self.bias.0]))?)
    }
}

/// Single LSTM cell. Gate blocks along the `4 * cells` axis are ordered
/// input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub cells: usize,
}

pub const FORGET_BIAS: f64 = 1.0;

impl LstmCell {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, cells: usize, init: &mut Init) -> Result<Self> {
        let w_input = params.insert(format!("{name}.w_input"), init.uniform(&[4 * cells, input], input))?;
        let w_hidden = params.insert(format!("{name}.w_hidden"), init.uniform(&[4 * cells, cells], cells))?;
        let mut bias = init.uniform(&[4 * cells], cells);
        bias.data_mut()[cells..2 * cells].fill(FORGET_BIAS);
        let bias = params.insert(format!("{name}.bias"), bias)?;
        Ok(LstmCell {
            w_input,
            w_hidden,
            bias,
            input,
            cells,
        })
    }

    /// One recurrence step; returns `(h', c')`.
    pub fn step(&self, g: &mut Graph, p: &[Var], x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.cells;
        let from_x = g.linear(x, p[self.w_input.0], Some(p[self.bias.0]))?;
        let from_h = g.linear(h, p[self.w_hidden.0], None)?;
        let gates = g.add(from_x, from_h)?;
        let i = g.slice(gates, 1, 0, n)?;
        let f = g.slice(gates, 1, n, n)?;
        let cand = g.slice(gates, 1, 2 * n, n)?;
        let o = g.slice(gates, 1, 3 * n, n)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Hidden and cell states of every layer in an [`LstmStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl RecurrentState {
    pub fn zeros(batch: usize, layers: usize, cells: usize) -> Self {
        RecurrentState {
            h: vec![Tensor::zeros(&[batch, cells]); layers],
            c: vec![Tensor::zeros(&[batch, cells]); layers],
        }
    }
}

/// Graph-resident view of a [`RecurrentState`].
#[derive(Clone, Debug)]
pub struct StateVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl StateVars {
    pub fn constant(g: &mut Graph, s: &RecurrentState) -> Self {
        StateVars {
            h: s.h.iter().map(|t| g.constant(t.clone())).collect(),
            c: s.c.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    pub fn detach(&self, g: &Graph) -> RecurrentState {
        RecurrentState {
            h: self.h.iter().map(|v| g.value(*v).clone()).collect(),
            c: self.c.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }
}

/// Stacked LSTM: layer k consumes the hidden output of layer k - 1.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmCell>,
}

impl LstmStack {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        cells: usize,
        depth: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|k| {
                let fan_in = if k == 0 { input } else { cells };
                LstmCell::new(params, &format!("{name}.{k}"), fan_in, cells, init)
            })
            .collect::<Result<_>>()?;
        Ok(LstmStack { layers })
    }

    pub fn cells(&self) -> usize {
        self.layers[0].cells
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Advance every layer; returns the top layer's hidden output.
    pub fn step(&self, g: &mut Graph, p: &[Var], x: Var, state: &mut StateVars) -> Result<Var> {
        let mut input = x;
        for (k, cell) in self.layers.iter().enumerate() {
            let (h, c) = cell.step(g, p, input, state.h[k], state.c[k])?;
            state.h[k] = h;
            state.c[k] = c;
            input = h;
        }
        Ok(input)
    }
}

/// Convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
        padding: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let fan_in = in_channels * size * size;
        let kernel = params.insert(
            format!("{name}.kernel"),
            init.uniform(&[out_channels, in_channels, size, size], fan_in),
        )?;
        let bias = params.insert(format!("{name}.bias"), init.uniform(&[out_channels], fan_in))?;
        Ok(ConvLayer {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p[self.kernel.0], Some(p[self.bias.0]), self.stride, self.padding)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bound(ps: &ParamSet) -> (Graph, Vec<Var>) {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, true);
        (g, p)
    }

    #[test]
    fn identity_and_constant_linear() {
        let mut ps = ParamSet::new();
        let layer = LinearLayer::new(&mut ps, "l", 3, 3, &mut Init::new(0)).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        ps.set(layer.weight, eye).unwrap();
        ps.set(layer.bias, Tensor::zeros(&[3])).unwrap();
        let (mut g, p) = bound(&ps);
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let y = layer.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        ps.set(layer.weight, Tensor::zeros(&[3, 3])).unwrap();
        ps.set(layer.bias, Tensor::full(&[3], 0.7)).unwrap();
        let (mut g, p) = bound(&ps);
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = layer.forward(&mut g, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut ps = ParamSet::new();
        let layer = LinearLayer::new(&mut ps, "l", 3, 2, &mut Init::new(0)).unwrap();
        let (mut g, p) = bound(&ps);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(layer.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn zero_lstm_stays_at_rest() {
        let mut ps = ParamSet::new();
        let cell = LstmCell::new(&mut ps, "c", 3, 4, &mut Init::new(1)).unwrap();
        for t in ps.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let (mut g, p) = bound(&ps);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let h = g.constant(Tensor::zeros(&[2, 4]));
        let c = g.constant(Tensor::zeros(&[2, 4]));
        let (h2, c2) = cell.step(&mut g, &p, x, h, c).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut ps = ParamSet::new();
        let cell = LstmCell::new(&mut ps, "c", 2, 3, &mut Init::new(2)).unwrap();
        for t in ps.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut bias = Tensor::zeros(&[12]);
        bias.data_mut()[3..6].fill(20.0);
        ps.set(cell.bias, bias).unwrap();
        let (mut g, p) = bound(&ps);
        let x = g.constant(Tensor::from_fn(&[1, 2], |i| i as f64 + 0.3));
        let h = g.constant(Tensor::from_fn(&[1, 3], |i| 0.1 * i as f64));
        let c = g.constant(Tensor::from_fn(&[1, 3], |i| 0.5 - 0.4 * i as f64));
        let (_, c2) = cell.step(&mut g, &p, x, h, c).unwrap();
        // f = sigmoid(20), i * g = 0.5 * tanh(0) = 0
        let f = 1.0 / (1.0 + (-20.0f64).exp());
        for (a, b) in g.value(c2).data().iter().zip(g.value(c).data()) {
            assert!((a - f * b).abs() < 1e-15);
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let mut ps = ParamSet::new();
        let cell = LstmCell::new(&mut ps, "c", 5, 4, &mut Init::new(3)).unwrap();
        let b = ps.get(cell.bias).data();
        assert!(b[4..8].iter().all(|&v| v == FORGET_BIAS));
        assert!(b[..4].iter().all(|&v| v.abs() <= 0.5));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut ps = ParamSet::new();
            LinearLayer::new(&mut ps, "l", 100, 7, &mut Init::new(seed)).unwrap();
            ps
        };
        let a = build(9);
        assert_eq!(a, build(9));
        assert_ne!(a.get(ParamId(0)), build(10).get(ParamId(0)));
        assert!(a.iter().all(|(_, t)| t.data().iter().all(|v| v.abs() <= 0.1)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(ps.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
