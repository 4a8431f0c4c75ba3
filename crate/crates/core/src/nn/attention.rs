use rimsa_autodiff::{Init, ParamId, Tensor};

use super::{Ctx, InitStyle, Linear, Registry, GPT_STD};
use crate::error::{CoreError, Result};

/// Multi-head scaled dot-product attention over `[B, T, D]`.
#[derive(Clone, Debug)]
pub struct Mha {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
    pub causal: bool,
}

impl Mha {
    pub fn new(
        reg: &mut dyn Registry,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        style: InitStyle,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Shape(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Mha {
            qkv: Linear::new(reg, &format!("{name}.qkv"), dim, 3 * dim, style),
            out: Linear::new(reg, &format!("{name}.proj"), dim, dim, style),
            heads,
            dim,
            causal,
        })
    }

    /// Attention weights `[B·heads, T, T]` and the concatenated head
    /// outputs `[B, T, D]` before the output projection.
    pub fn attend<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<(Tensor<'g>, Tensor<'g>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(CoreError::Shape(format!(
                "attention expects [B, T, {}], got {s:?}",
                self.dim
            )));
        }
        let (b, t, h) = (s[0], s[1], self.heads);
        let d = self.dim / h;
        let qkv = self
            .qkv
            .forward(ctx, x)?
            .reshape(&[b, t, 3, h, d])?
            .permute(&[2, 0, 3, 1, 4])?
            .reshape(&[3, b * h, t, d])?;
        let part = |i: usize| -> Result<Tensor<'g>> {
            Ok(qkv.slice(0, i, i + 1)?.reshape(&[b * h, t, d])?)
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q.bmm(k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
        let weights = if self.causal {
            scores.causal_softmax()?
        } else {
            scores.softmax()?
        };
        let mixed = weights
            .bmm(v)?
            .reshape(&[b, h, t, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?;
        Ok((weights, mixed))
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let (_, mixed) = self.attend(ctx, x)?;
        self.out.forward(ctx, mixed)
    }
}

/// Attention across feature channels. The `D` channels are split into
/// `heads` groups of `d`; within group `g` the affinity is
/// `A_g = softmax_rows(W_g · X_gᵀX_g / T)` (`d × d`) and the output is
/// `X_g A_gᵀ`, so each channel becomes a mixture of its group's channels.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub ws: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl SpatialAttention {
    pub fn new(reg: &mut dyn Registry, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Shape(format!(
                "spatial attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let d = dim / heads;
        Ok(SpatialAttention {
            ws: reg.param(&format!("{name}.ws"), &[heads, d, d], Init::Normal(GPT_STD)),
            heads,
            dim,
        })
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(CoreError::Shape(format!(
                "spatial attention expects [B, T, {}], got {s:?}",
                self.dim
            )));
        }
        let (b, t, h) = (s[0], s[1], self.heads);
        let d = self.dim / h;
        let xg = x
            .reshape(&[b, t, h, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * h, t, d])?;
        let affinity = xg.transpose()?.bmm(xg)?.scale(1.0 / t as f64);
        let ws = ctx
            .p(self.ws)
            .broadcast_to(&[b, h, d, d])?
            .reshape(&[b * h, d, d])?;
        let a = ws.bmm(affinity)?.softmax()?;
        Ok(xg
            .bmm(a.transpose()?)?
            .reshape(&[b, h, t, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?)
    }
}
