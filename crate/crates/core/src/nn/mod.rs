//! Neural building blocks on top of the tape.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`]. A layer
//! is created through a [`Registry`], which either allocates and
//! initializes parameters ([`Builder`]) or just records their shapes
//! ([`ShapeCounter`]) so very large configurations can be sized without
//! allocating them.

mod attention;
mod conv;
mod lstm;

use std::cell::RefCell;

use rand_chacha::ChaCha20Rng;
use rimsa_autodiff::{Graph, Init, ParamId, ParamStore, Tensor};

use crate::error::{CoreError, Result};

pub use attention::{Mha, SpatialAttention};
pub use conv::{BatchNorm1d, Conv1d, DwConv1d, SeBlock};
pub use lstm::BiLstm;

pub trait Registry {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId;
    fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId;
}

pub struct Builder {
    pub store: ParamStore,
    rng: ChaCha20Rng,
}

impl Builder {
    pub fn new(rng: ChaCha20Rng) -> Self {
        Builder {
            store: ParamStore::new(),
            rng,
        }
    }
}

impl Registry for Builder {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n = shape.iter().product();
        let data = init.sample(n, &mut self.rng);
        self.store.add(name, shape, data)
    }

    fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.store.add_buffer(name, shape, vec![value; n])
    }
}

/// Records `(name, element count)` of every weight; buffers are skipped.
#[derive(Default)]
pub struct ShapeCounter {
    pub entries: Vec<(String, usize)>,
    next: usize,
}

impl Registry for ShapeCounter {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> ParamId {
        self.entries
            .push((name.to_string(), shape.iter().product()));
        self.next += 1;
        ParamId(self.next - 1)
    }

    fn buffer(&mut self, _name: &str, _shape: &[usize], _value: f64) -> ParamId {
        self.next += 1;
        ParamId(self.next - 1)
    }
}

/// Per-forward state: the graph, parameter values, mode, and buffer
/// updates produced in training mode.
pub struct Ctx<'g, 's> {
    pub graph: &'g Graph,
    pub store: &'s ParamStore,
    pub train: bool,
    updates: RefCell<Vec<(ParamId, Vec<f64>)>>,
}

impl<'g, 's> Ctx<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, train: bool) -> Self {
        Ctx {
            graph,
            store,
            train,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> Tensor<'g> {
        self.graph.param(self.store, id)
    }

    pub fn push_update(&self, id: ParamId, value: Vec<f64>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Buffer values to write back after the step.
    pub fn take_updates(&self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Vec<f64>)>) {
    for (id, v) in updates {
        *store.get_mut(id).data_mut() = v;
    }
}

/// Weight initialization family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitStyle {
    /// `U(±1/√fan_in)` for weights and biases.
    FanIn,
    /// `N(0, 0.02²)` weights, zero biases.
    Gpt,
}

pub const GPT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        reg: &mut dyn Registry,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        style: InitStyle,
    ) -> Self {
        let (wi, bi) = match style {
            InitStyle::FanIn => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                (Init::Uniform(bound), Init::Uniform(bound))
            }
            InitStyle::Gpt => (Init::Normal(GPT_STD), Init::Zeros),
        };
        Linear {
            w: reg.param(&format!("{name}.w"), &[in_dim, out_dim], wi),
            b: reg.param(&format!("{name}.b"), &[out_dim], bi),
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of an input of any rank ≥ 1.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(CoreError::Shape(format!(
                "linear expects last dim {}, got {shape:?}",
                self.in_dim
            )));
        }
        let rows = x.numel() / self.in_dim;
        let y = x
            .reshape(&[rows, self.in_dim])?
            .matmul(ctx.p(self.w))?
            .add(ctx.p(self.b))?;
        let mut out = shape;
        *out.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(&out)?)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(reg: &mut dyn Registry, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: reg.param(&format!("{name}.gamma"), &[dim], Init::Ones),
            beta: reg.param(&format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        Ok(x.layer_norm(NORM_EPS)?
            .mul(ctx.p(self.gamma))?
            .add(ctx.p(self.beta))?)
    }
}

/// Two-layer feed-forward block `W₂·GELU(W₁x)`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(
        reg: &mut dyn Registry,
        name: &str,
        dim: usize,
        expansion: usize,
        style: InitStyle,
    ) -> Self {
        Ffn {
            l1: Linear::new(reg, &format!("{name}.fc1"), dim, dim * expansion, style),
            l2: Linear::new(reg, &format!("{name}.fc2"), dim * expansion, dim, style),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let h = self.l1.forward(ctx, x)?.gelu();
        self.l2.forward(ctx, h)
    }
}

/// Learnable positional table `max_seq × dim`.
#[derive(Clone, Debug)]
pub struct PosEmbedding {
    pub table: ParamId,
    pub max_seq: usize,
}

impl PosEmbedding {
    pub fn new(reg: &mut dyn Registry, name: &str, max_seq: usize, dim: usize) -> Self {
        PosEmbedding {
            table: reg.param(
                &format!("{name}.table"),
                &[max_seq, dim],
                Init::Normal(GPT_STD),
            ),
            max_seq,
        }
    }

    /// Rows `0..t` of the table.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, t: usize) -> Result<Tensor<'g>> {
        if t > self.max_seq {
            return Err(CoreError::Shape(format!(
                "sequence of {t} tokens exceeds max_seq {}",
                self.max_seq
            )));
        }
        Ok(ctx.p(self.table).slice(0, 0, t)?)
    }
}
