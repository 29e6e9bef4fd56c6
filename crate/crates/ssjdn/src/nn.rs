//! Neural-network plumbing: a named parameter store, layer builders that
//! register and apply their weights, and an Adam optimizer.
//!
//! Parameters live outside any tape in a [`Params`] store, keyed by
//! dotted path names (`"image.block0.w"`). For each forward pass a store
//! is *bound* to a tape ([`Params::bind`]), which records every tensor as
//! a leaf and hands out the matching [`Var`]s. Gradients collected from
//! one or more backward sweeps are accumulated positionally in a
//! [`GradAccum`] and fed to [`Adam::step`].

use crate::autodiff::{PadMode, Tape, Var};
use ndarray::{ArrayD, IxDyn, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Ordered, name-addressable set of trainable tensors.
///
/// Iteration order is insertion order and is part of the crate's
/// determinism story: optimizer state, gradient accumulators and bound
/// tapes all align positionally with this order.
#[derive(Clone, Default)]
pub struct Params {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under `name`. Panics on duplicates — parameter
    /// paths are static strings chosen by the model builders.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name:?}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Fetch a tensor; panics when absent (a wiring bug, not a user error).
    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams<'_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, a)| tape.leaf(a.clone()))
            .collect();
        BoundParams { params: self, vars }
    }
}

/// A [`Params`] store registered on a specific tape.
pub struct BoundParams<'p> {
    params: &'p Params,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    /// The tape variable carrying the named parameter.
    pub fn var(&self, name: &str) -> Var {
        let i = *self
            .params
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        self.vars[i]
    }

    /// Leaf variables aligned with the store's insertion order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Positional gradient accumulator aligned with a [`Params`] store.
pub struct GradAccum {
    grads: Vec<ArrayD<f64>>,
}

impl GradAccum {
    pub fn zeros_like(params: &Params) -> Self {
        GradAccum {
            grads: params
                .iter()
                .map(|(_, a)| ArrayD::zeros(a.raw_dim()))
                .collect(),
        }
    }

    /// Add `scale` times the gradients a backward sweep produced for the
    /// leaves of `bound`. Parameters the sweep never reached contribute
    /// nothing.
    pub fn add_scaled(
        &mut self,
        bound: &BoundParams<'_>,
        sweep: &crate::autodiff::Grads,
        scale: f64,
    ) {
        assert_eq!(self.grads.len(), bound.vars.len(), "accumulator misaligned");
        for (acc, &var) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = sweep.get(var) {
                acc.scaled_add(scale, g);
            }
        }
    }

    pub fn grads(&self) -> &[ArrayD<f64>] {
        &self.grads
    }

    /// Euclidean norm over every accumulated gradient, for logging.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam optimizer with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .iter()
            .map(|(_, a)| ArrayD::zeros(a.raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Apply one update. `grads` must align positionally with `params`
    /// (as produced by [`GradAccum`]).
    pub fn step(&mut self, params: &mut Params, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), params.len(), "gradient set misaligned");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, (_, p)) in params.entries.iter_mut().enumerate() {
            let g = &grads[i];
            assert_eq!(g.shape(), p.shape(), "gradient shape mismatch at index {i}");
            Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// He-normal initialization, suited to ReLU fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    normal_init(shape, std, rng)
}

/// Glorot-uniform initialization for sigmoid/tanh layers.
pub fn glorot_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-limit..limit))
}

/// Zero-mean Gaussian with the given standard deviation.
pub fn normal_init(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// A 2-d convolution layer owning a weight and bias under `name`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    /// "Same"-padded unit-stride convolution (odd kernels).
    pub fn same(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same-padding requires an odd kernel");
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation: 1,
            pad: kernel / 2,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Set the dilation rate, widening the padding so spatial size is
    /// preserved at unit stride.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.pad = dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        params.add(
            format!("{}.w", self.name),
            he_normal(
                &[self.out_ch, self.in_ch, self.kernel, self.kernel],
                fan_in,
                rng,
            ),
        );
        params.add(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_ch])));
    }

    pub fn forward(&self, tape: &Tape, bp: &BoundParams<'_>, x: Var) -> Var {
        tape.conv2d(
            x,
            bp.var(&format!("{}.w", self.name)),
            bp.var(&format!("{}.b", self.name)),
            self.stride,
            self.dilation,
            self.pad,
            self.pad_mode,
        )
    }
}

/// A fully connected layer `y = Wx + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        params.add(
            format!("{}.w", self.name),
            glorot_uniform(&[self.out_dim, self.in_dim], self.in_dim, self.out_dim, rng),
        );
        params.add(format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_dim])));
    }

    pub fn forward(&self, tape: &Tape, bp: &BoundParams<'_>, x: Var) -> Var {
        tape.matvec(
            bp.var(&format!("{}.w", self.name)),
            x,
            Some(bp.var(&format!("{}.b", self.name))),
        )
    }
}

/// Token embedding table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Embedding {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        params.add(
            format!("{}.table", self.name),
            normal_init(&[self.vocab, self.dim], 0.1, rng),
        );
    }

    pub fn forward(&self, tape: &Tape, bp: &BoundParams<'_>, token: usize) -> Var {
        tape.gather_row(bp.var(&format!("{}.table", self.name)), token)
    }
}

/// Gated recurrent unit with a learned initial hidden state.
///
/// Update rule per step (the reset gate modulates the hidden-to-candidate
/// path):
///
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// n = tanh(Wn x + r * (Un h) + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize) -> Self {
        Gru {
            name: name.into(),
            in_dim,
            hidden,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for gate in ["z", "r", "n"] {
            params.add(
                format!("{}.w{gate}", self.name),
                glorot_uniform(&[self.hidden, self.in_dim], self.in_dim, self.hidden, rng),
            );
            params.add(
                format!("{}.u{gate}", self.name),
                glorot_uniform(&[self.hidden, self.hidden], self.hidden, self.hidden, rng),
            );
            params.add(format!("{}.b{gate}", self.name), ArrayD::zeros(IxDyn(&[self.hidden])));
        }
        // A small random initial state keeps empty sequences away from the
        // exact-zero embedding that cosine similarity rejects.
        params.add(format!("{}.h0", self.name), normal_init(&[self.hidden], 0.1, rng));
    }

    /// Run the recurrence over embedded inputs and return the final state.
    pub fn forward_sequence(&self, tape: &Tape, bp: &BoundParams<'_>, inputs: &[Var]) -> Var {
        let p = |suffix: &str| bp.var(&format!("{}.{suffix}", self.name));
        let mut h = p("h0");
        for &x in inputs {
            let zl = tape.matvec(p("wz"), x, Some(p("bz")));
            let zh = tape.matvec(p("uz"), h, None);
            let z = tape.sigmoid(tape.add(zl, zh));
            let rl = tape.matvec(p("wr"), x, Some(p("br")));
            let rh = tape.matvec(p("ur"), h, None);
            let r = tape.sigmoid(tape.add(rl, rh));
            let nl = tape.matvec(p("wn"), x, Some(p("bn")));
            let nh = tape.mul(r, tape.matvec(p("un"), h, None));
            let n = tape.tanh(tape.add(nl, nh));
            // (1 - z) * n + z * h, written as n + z * (h - n).
            let diff = tape.sub(h, n);
            h = tape.add(n, tape.mul(z, diff));
        }
        h
    }
}
