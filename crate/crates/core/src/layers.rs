//! Parameterized building blocks shared by the network and its projections.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`]. Layers are
//! declared through a [`ParamBuilder`], which either allocates and initializes
//! tensors or merely records their shapes (for parameter counting of presets
//! too large to allocate).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, ParamId, ParamStore, Real, Var};

/// How a freshly declared tensor is filled.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Zeros,
    /// A `(1, n_chunks * width)` bias row that is 1 on the listed chunks and
    /// 0 elsewhere; used for modulation producers whose scale chunks start
    /// at unit scale.
    ChunkOnes { n_chunks: usize, ones: Vec<usize> },
}

/// Sink for parameter declarations.
pub trait ParamBuilder {
    fn declare(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId;
}

/// Records names and shapes only.
#[derive(Debug, Default)]
pub struct ShapeRecorder {
    pub shapes: Vec<(String, (usize, usize))>,
}

impl ParamBuilder for ShapeRecorder {
    fn declare(&mut self, name: &str, rows: usize, cols: usize, _init: Init) -> ParamId {
        self.shapes.push((name.to_string(), (rows, cols)));
        ParamId(self.shapes.len() - 1)
    }
}

/// Allocates tensors into a store, drawing uniform values from a seeded
/// stream in declaration order.
pub struct StoreBuilder<T: Real> {
    pub store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> StoreBuilder<T> {
    pub fn new(seed: u64) -> Self {
        StoreBuilder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<T: Real> ParamBuilder for StoreBuilder<T> {
    fn declare(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let value = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let rng = &mut self.rng;
                Array2::from_shape_simple_fn((rows, cols), || {
                    T::c(rng.gen_range(-bound..bound))
                })
            }
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::ChunkOnes { n_chunks, ones } => {
                let width = cols / n_chunks;
                Array2::from_shape_fn((rows, cols), |(_, c)| {
                    if ones.contains(&(c / width)) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
        };
        self.store.add(name, value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(pb: &mut dyn ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(pb, name, fan_in, fan_out, Init::Uniform { fan_in }, Init::Uniform { fan_in })
    }

    pub fn zeros(pb: &mut dyn ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(pb, name, fan_in, fan_out, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(
        pb: &mut dyn ParamBuilder,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        w_init: Init,
        b_init: Init,
    ) -> Self {
        let w = pb.declare(&format!("{name}.w"), fan_in, fan_out, w_init);
        let b = pb.declare(&format!("{name}.b"), 1, fan_out, b_init);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

/// Same-padded 1-D convolution over the token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(pb: &mut dyn ParamBuilder, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let fan_in = kernel * c_in;
        let w = pb.declare(&format!("{name}.w"), fan_in, c_out, Init::Uniform { fan_in });
        let b = pb.declare(&format!("{name}.b"), 1, c_out, Init::Uniform { fan_in });
        Conv1d { w, b, kernel }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1d(x, w, b, self.kernel)
    }
}

/// `conv(k) -> SiLU -> conv(k)`, widening to the hidden size in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMlp {
    pub c1: Conv1d,
    pub c2: Conv1d,
}

impl ConvMlp {
    pub fn new(pb: &mut dyn ParamBuilder, name: &str, width: usize, hidden: usize, kernel: usize) -> Self {
        ConvMlp {
            c1: Conv1d::new(pb, &format!("{name}.c1"), width, hidden, kernel),
            c2: Conv1d::new(pb, &format!("{name}.c2"), hidden, width, kernel),
        }
    }

    pub fn kernel(&self) -> usize {
        self.c1.kernel
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.c1.apply(g, x);
        let h = g.silu(h);
        self.c2.apply(g, h)
    }
}

/// `linear -> SiLU -> linear`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut dyn ParamBuilder, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            l1: Linear::new(pb, &format!("{name}.l1"), d_in, hidden),
            l2: Linear::new(pb, &format!("{name}.l2"), hidden, d_out),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.l1.apply(g, x);
        let h = g.silu(h);
        self.l2.apply(g, h)
    }
}

/// Feed-forward sublayer: convolutional for temporal streams, dense for text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ffn {
    Conv(ConvMlp),
    Dense(Mlp),
}

impl Ffn {
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Ffn::Conv(m) => m.apply(g, x),
            Ffn::Dense(m) => m.apply(g, x),
        }
    }
}

/// `LayerNorm(x) * gamma + beta`; `gamma` and `beta` are either single rows
/// (broadcast to every token) or one row per token.
pub fn modulate<T: Real>(g: &mut Graph<'_, T>, x: Var, gamma: Var, beta: Var) -> Var {
    let n = g.layer_norm(x);
    let scaled = g.mul(n, gamma);
    g.add(scaled, beta)
}

/// `x * gate`, with the same broadcasting rule as [`modulate`].
pub fn gate<T: Real>(g: &mut Graph<'_, T>, x: Var, gate: Var) -> Var {
    g.mul(x, gate)
}
