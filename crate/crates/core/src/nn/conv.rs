use rimsa_autodiff::{Init, ParamId, Tensor};

use super::{Ctx, InitStyle, Linear, Registry, NORM_EPS};
use crate::error::{CoreError, Result};

/// Length-preserving 1-D convolution over `[B, C_in, T]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub out_ch: usize,
}

impl Conv1d {
    pub fn new(
        reg: &mut dyn Registry,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Conv1d {
            w: reg.param(
                &format!("{name}.w"),
                &[out_ch, in_ch, kernel],
                Init::Uniform(bound),
            ),
            b: reg.param(&format!("{name}.b"), &[out_ch], Init::Uniform(bound)),
            out_ch,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let b = ctx.p(self.b).reshape(&[self.out_ch, 1])?;
        Ok(x.conv1d(ctx.p(self.w))?.add(b)?)
    }
}

/// Depthwise length-preserving convolution over `[B, C, T]`.
#[derive(Clone, Debug)]
pub struct DwConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub ch: usize,
}

impl DwConv1d {
    pub fn new(reg: &mut dyn Registry, name: &str, ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let bound = 1.0 / (kernel as f64).sqrt();
        DwConv1d {
            w: reg.param(&format!("{name}.w"), &[ch, kernel], Init::Uniform(bound)),
            b: reg.param(&format!("{name}.b"), &[ch], Init::Uniform(bound)),
            ch,
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let b = ctx.p(self.b).reshape(&[self.ch, 1])?;
        Ok(x.dwconv1d(ctx.p(self.w))?.add(b)?)
    }
}

/// Batch normalization over `[B, C, T]` with per-channel statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub ch: usize,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn new(reg: &mut dyn Registry, name: &str, ch: usize) -> Self {
        BatchNorm1d {
            gamma: reg.param(&format!("{name}.gamma"), &[ch], Init::Ones),
            beta: reg.param(&format!("{name}.beta"), &[ch], Init::Zeros),
            running_mean: reg.buffer(&format!("{name}.running_mean"), &[ch], 0.0),
            running_var: reg.buffer(&format!("{name}.running_var"), &[ch], 1.0),
            ch,
            momentum: 0.1,
        }
    }

    /// Training mode normalizes with batch statistics and queues a
    /// running-statistics update on `ctx`; evaluation mode uses the stored
    /// running statistics.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.ch {
            return Err(CoreError::Shape(format!(
                "batch norm expects [B, {}, T], got {s:?}",
                self.ch
            )));
        }
        let g = ctx.graph;
        let normalized = if ctx.train {
            if s[0] < 2 {
                return Err(CoreError::Shape(
                    "batch norm in training mode needs a batch of at least 2".into(),
                ));
            }
            let (y, mean, var) = x.channel_norm(NORM_EPS)?;
            let n = (s[0] * s[2]) as f64;
            let m = self.momentum;
            let rm = &ctx.store.get(self.running_mean).data;
            let rv = &ctx.store.get(self.running_var).data;
            let new_mean = rm
                .iter()
                .zip(&mean)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            let new_var = rv
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - m) * r + m * b * n / (n - 1.0))
                .collect();
            ctx.push_update(self.running_mean, new_mean);
            ctx.push_update(self.running_var, new_var);
            y
        } else {
            let rm = ctx.store.get(self.running_mean).data.to_vec();
            let scale: Vec<f64> = ctx
                .store
                .get(self.running_var)
                .data
                .iter()
                .map(|v| 1.0 / (v + NORM_EPS).sqrt())
                .collect();
            x.sub(g.constant(rm, &[self.ch, 1])?)?
                .mul(g.constant(scale, &[self.ch, 1])?)?
        };
        let gamma = ctx.p(self.gamma).reshape(&[self.ch, 1])?;
        let beta = ctx.p(self.beta).reshape(&[self.ch, 1])?;
        Ok(normalized.mul(gamma)?.add(beta)?)
    }
}

/// Squeeze-excitation gate over `[B, C, T]`:
/// `x · σ(W₂ ReLU(W₁ mean_T(x)))` per channel.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub l1: Linear,
    pub l2: Linear,
    pub ch: usize,
}

impl SeBlock {
    pub fn new(reg: &mut dyn Registry, name: &str, ch: usize, reduction: usize) -> Self {
        let hidden = (ch / reduction.max(1)).max(1);
        SeBlock {
            l1: Linear::new(reg, &format!("{name}.fc1"), ch, hidden, InitStyle::FanIn),
            l2: Linear::new(reg, &format!("{name}.fc2"), hidden, ch, InitStyle::FanIn),
            ch,
        }
    }

    /// Per-channel gate values, `[B, C]`.
    pub fn gate<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = x.shape();
        let pooled = x.mean_axis(2)?.reshape(&[s[0], self.ch])?;
        let h = self.l1.forward(ctx, pooled)?.relu();
        Ok(self.l2.forward(ctx, h)?.sigmoid())
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = x.shape();
        let gate = self.gate(ctx, x)?.reshape(&[s[0], self.ch, 1])?;
        Ok(x.mul(gate)?)
    }
}
