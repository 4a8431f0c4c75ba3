use rimsa_autodiff::{Init, ParamId, Tensor};

use super::{Ctx, Registry};
use crate::error::{CoreError, Result};

/// One direction of an LSTM. Gate order along the `4H` axis is
/// input, forget, cell, output.
#[derive(Clone, Debug)]
struct Direction {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Bidirectional LSTM over `[B, T, D]`, output `[B, T, 2H]` with the
/// forward states first.
#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: Direction,
    bwd: Direction,
    pub in_dim: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(reg: &mut dyn Registry, name: &str, in_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut dir = |tag: &str| Direction {
            w_ih: reg.param(
                &format!("{name}.{tag}.w_ih"),
                &[in_dim, 4 * hidden],
                Init::Uniform(bound),
            ),
            w_hh: reg.param(
                &format!("{name}.{tag}.w_hh"),
                &[hidden, 4 * hidden],
                Init::Uniform(bound),
            ),
            b: reg.param(
                &format!("{name}.{tag}.b"),
                &[4 * hidden],
                Init::Uniform(bound),
            ),
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        BiLstm {
            fwd,
            bwd,
            in_dim,
            hidden,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.fwd.w_ih,
            self.fwd.w_hh,
            self.fwd.b,
            self.bwd.w_ih,
            self.bwd.w_hh,
            self.bwd.b,
        ]
    }

    fn run<'g>(
        &self,
        ctx: &Ctx<'g, '_>,
        dir: &Direction,
        x: Tensor<'g>,
        reverse: bool,
    ) -> Result<Vec<Tensor<'g>>> {
        let s = x.shape();
        let (b, t, h) = (s[0], s[1], self.hidden);
        let g = ctx.graph;
        // input projections for every step at once: [B, T, 4H]
        let xp = x
            .reshape(&[b * t, self.in_dim])?
            .matmul(ctx.p(dir.w_ih))?
            .add(ctx.p(dir.b))?
            .reshape(&[b, t, 4 * h])?;
        let w_hh = ctx.p(dir.w_hh);
        let mut h_prev = g.constant(vec![0.0; b * h], &[b, h])?;
        let mut c_prev = g.constant(vec![0.0; b * h], &[b, h])?;
        let mut outs = vec![None; t];
        let steps: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for step in steps {
            let gates = xp
                .slice(1, step, step + 1)?
                .reshape(&[b, 4 * h])?
                .add(h_prev.matmul(w_hh)?)?;
            let i = gates.slice(1, 0, h)?.sigmoid();
            let f = gates.slice(1, h, 2 * h)?.sigmoid();
            let c_hat = gates.slice(1, 2 * h, 3 * h)?.tanh();
            let o = gates.slice(1, 3 * h, 4 * h)?.sigmoid();
            let c = f.mul(c_prev)?.add(i.mul(c_hat)?)?;
            let h_t = o.mul(c.tanh())?;
            outs[step] = Some(h_t.reshape(&[b, 1, h])?);
            h_prev = h_t;
            c_prev = c;
        }
        Ok(outs
            .into_iter()
            .map(|o| o.expect("every step visited"))
            .collect())
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.in_dim || s[1] == 0 {
            return Err(CoreError::Shape(format!(
                "lstm expects [B, T>=1, {}], got {s:?}",
                self.in_dim
            )));
        }
        let f = Tensor::concat(&self.run(ctx, &self.fwd, x, false)?, 1)?;
        let b = Tensor::concat(&self.run(ctx, &self.bwd, x, true)?, 1)?;
        Ok(Tensor::concat(&[f, b], 2)?)
    }
}
