//! Small fully-connected networks with hand-written backprop, and Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::uniform_in;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// No hidden nonlinearity; used for linear test networks.
    Identity,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Self::Tanh),
            "identity" => Some(Self::Identity),
            _ => None,
        }
    }
}

/// Dense network `sizes[0] → … → sizes[L]` with a linear output layer.
///
/// Parameters live in one flat vector: for each layer, the `out × in`
/// row-major weight matrix followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Layer outputs from a forward pass, kept for backprop.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], |v| v.as_slice())
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "network needs an input and an output layer");
        Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; param_count(sizes)],
        }
    }

    /// Glorot-uniform weights, zero biases; the output layer is scaled by
    /// `out_scale`.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut ChaCha8Rng, out_scale: f64) -> Self {
        let mut net = Self::zeros(sizes, activation);
        let layers = sizes.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (i + o) as f64).sqrt() * if l + 1 == layers { out_scale } else { 1.0 };
            for w in &mut net.params[off..off + i * o] {
                *w = uniform_in(rng, -limit, limit);
            }
            off += i * o + o;
        }
        net
    }

    pub fn from_params(sizes: &[usize], activation: Activation, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == param_count(sizes)).then(|| Self {
            sizes: sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    /// Offset of the bias vector of `layer`.
    pub fn bias_offset(&self, layer: usize) -> usize {
        let before: usize = self.sizes.windows(2).take(layer).map(|w| w[0] * w[1] + w[1]).sum();
        before + self.sizes[layer] * self.sizes[layer + 1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward_tape(x, &mut tape);
        tape.acts.pop().unwrap_or_default()
    }

    pub fn forward_tape(&self, x: &[f64], tape: &mut Tape) {
        assert_eq!(x.len(), self.sizes[0], "input width");
        let layers = self.sizes.len() - 1;
        tape.acts.resize(layers + 1, Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (w, rest) = self.params[off..].split_at(i * o);
            let b = &rest[..o];
            let (head, tail) = tape.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            for j in 0..o {
                let row = &w[j * i..(j + 1) * i];
                let mut s = b[j];
                for (wi, xi) in row.iter().zip(input) {
                    s += wi * xi;
                }
                if l + 1 < layers && self.activation == Activation::Tanh {
                    s = s.tanh();
                }
                out.push(s);
            }
            off += i * o + o;
        }
    }

    /// Adds `∂L/∂params` to `grad` given `dout = ∂L/∂output` for the pass
    /// recorded in `tape`.
    pub fn backward(&self, tape: &Tape, dout: &[f64], grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(dout.len(), self.output_width());
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dout.to_vec();
        for l in (0..layers).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers && self.activation == Activation::Tanh {
                for (d, a) in delta.iter_mut().zip(&tape.acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &tape.acts[l];
            let base = offsets[l];
            for j in 0..o {
                let g = &mut grad[base + j * i..base + (j + 1) * i];
                for (gw, xi) in g.iter_mut().zip(input) {
                    *gw += delta[j] * xi;
                }
                grad[base + i * o + j] += delta[j];
            }
            if l > 0 {
                let w = &self.params[base..base + i * o];
                let mut prev = vec![0.0; i];
                for j in 0..o {
                    let row = &w[j * i..(j + 1) * i];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += wi * delta[j];
                    }
                }
                delta = prev;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Random network for gradient checks.
pub fn random_net(sizes: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Mlp {
    let mut net = Mlp::init(sizes, activation, rng, 1.0);
    for p in net.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    net
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 4, 1], Activation::Tanh);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]), vec![0.0]);
    }

    #[test]
    fn linear_single_weight() {
        let net = Mlp::from_params(&[1, 1], Activation::Identity, vec![2.5, 0.0]).unwrap();
        assert_eq!(net.forward(&[4.0]), vec![10.0]);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = stream(11, Domain::Aux, 0);
        for act in [Activation::Tanh, Activation::Identity] {
            let net = random_net(&[4, 5, 3, 2], act, &mut rng);
            let x = [0.3, -0.7, 1.1, 0.2];
            let dout = [0.8, -1.3];
            let loss = |n: &Mlp| {
                let y = n.forward(&x);
                y[0] * dout[0] + y[1] * dout[1]
            };
            let mut tape = Tape::default();
            net.forward_tape(&x, &mut tape);
            let mut grad = vec![0.0; net.params().len()];
            net.backward(&tape, &dout, &mut grad);
            let h = 1e-5;
            for k in 0..grad.len() {
                let mut a = net.clone();
                a.params_mut()[k] += h;
                let mut b = net.clone();
                b.params_mut()[k] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "{act:?} param {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn adam_with_zero_lr_is_noop() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut opt = Adam::new(3, 0.0);
        opt.step(&mut p, &[0.3, -1.0, 7.0]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![5.0];
        let mut opt = Adam::new(1, 0.1);
        for _ in 0..500 {
            let g = [2.0 * p[0]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2);
    }
}
