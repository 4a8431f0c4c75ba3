//! The four-stage pilot-to-configuration network.
//!
//! 1. Preprocessor: Re/Im stacking, conv + GELU + batch norm, max-pool,
//!    bidirectional LSTM with a residual from the pooled conv features.
//! 2. Spatio-temporal attention: `LN(x + MHA(x) + spatial(x) + FFN(x))`.
//! 3. Backbone: token projection with a learned positional table, causal
//!    pre-norm decoder layers, four depthwise/SE residual stages, pooling.
//! 4. Heads: element phases, digital precoder and channel estimate.
//!
//! All tensors carry a leading batch axis. Precoders are produced in units
//! of `√P_max` (column norm at most 1) and channel estimates in units of
//! the model's stored channel scale; [`Model::decode`] converts back.

use std::f64::consts::PI;
use std::path::Path;

use rimsa_autodiff::{Graph, ParamId, ParamStore, Tensor};

use crate::config::{ControllerConfig, Pooling, SystemConfig};
use crate::error::{CoreError, Result};
use crate::geometry::{CMat, C64};
use crate::nn::{
    apply_updates, BatchNorm1d, BiLstm, Builder, Conv1d, Ctx, DwConv1d, Ffn, InitStyle, LayerNorm,
    Linear, Mha, PosEmbedding, Registry, SeBlock, ShapeCounter, SpatialAttention,
};
use crate::rng::{stream, Stream};

/// Width of the phase and precoder expansion layers.
pub const HEAD_HIDDEN: usize = 1024;
/// Width of the channel-estimation expansion layer.
pub const CHANNEL_HIDDEN: usize = 2048;
pub const SE_REDUCTION: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    attn: Mha,
    ln2: LayerNorm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct ResidualStage {
    dw_a: DwConv1d,
    dw_b: DwConv1d,
    se: SeBlock,
}

#[derive(Clone, Debug)]
struct ExpandHead {
    fc1: Linear,
    ln: LayerNorm,
    fc2: Linear,
}

impl ExpandHead {
    fn new(reg: &mut dyn Registry, name: &str, n_p: usize, out: usize) -> Self {
        ExpandHead {
            fc1: Linear::new(
                reg,
                &format!("{name}.fc1"),
                n_p,
                HEAD_HIDDEN,
                InitStyle::FanIn,
            ),
            ln: LayerNorm::new(reg, &format!("{name}.ln"), HEAD_HIDDEN),
            fc2: Linear::new(
                reg,
                &format!("{name}.fc2"),
                HEAD_HIDDEN,
                out,
                InitStyle::FanIn,
            ),
        }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let h = self.fc1.forward(ctx, x)?.gelu();
        let h = self.ln.forward(ctx, h)?;
        self.fc2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Controller {
    pub cfg: ControllerConfig,
    pub n_r: usize,
    pub n_t: usize,
    pub k: usize,
    pre_conv: Conv1d,
    pre_bn: BatchNorm1d,
    lstm: BiLstm,
    st_time: Mha,
    st_space: SpatialAttention,
    st_ffn: Ffn,
    st_ln: LayerNorm,
    proj: Linear,
    pos: PosEmbedding,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    stages: Vec<ResidualStage>,
    phase_head: ExpandHead,
    precoder_head: ExpandHead,
    ch_fc1: Linear,
    ch_fc2: Linear,
    /// RMS of received pilot entries; inputs are divided by it.
    pub input_scale: ParamId,
    /// Channel normalizer; estimates are produced in these units.
    pub channel_scale: ParamId,
}

/// Batched network outputs inside a graph.
pub struct Outputs<'g> {
    /// `[B, N_t]`, radians.
    pub phases: Tensor<'g>,
    /// `[B, 2, N_R, K]`, units of `√P_max`.
    pub w: Tensor<'g>,
    /// `[B, 2, N_t, K]`, units of the channel scale.
    pub h_est: Tensor<'g>,
}

/// Per-sample outputs in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerOutput {
    pub phases: Vec<f64>,
    /// `N_R × K`, column power at most `P_max`.
    pub w: CMat,
    pub h_est: CMat,
}

/// Names of weights held fixed under the backbone freeze: the attention
/// and feed-forward blocks of every decoder layer.
pub fn is_backbone_weight(name: &str) -> bool {
    name.starts_with("backbone.layers.") && (name.contains(".attn.") || name.contains(".ffn."))
}

impl Controller {
    pub fn new(reg: &mut dyn Registry, sys: &SystemConfig, cfg: &ControllerConfig) -> Result<Self> {
        cfg.validate(sys)?;
        let (n_r, n_t, k) = (sys.n_r(), sys.n_t(), sys.k_users);
        let c = 2 * n_r;
        let n_p = cfg.n_p;
        // registration order defines checkpoint layout
        let pre_conv = Conv1d::new(reg, "pre.conv", c, c, 3);
        let pre_bn = BatchNorm1d::new(reg, "pre.bn", c);
        let lstm = BiLstm::new(reg, "pre.lstm", c, n_r);
        let st_time = Mha::new(reg, "st.time", c, cfg.st_heads, false, InitStyle::FanIn)?;
        let st_space = SpatialAttention::new(reg, "st.space", c, cfg.st_heads)?;
        let st_ffn = Ffn::new(reg, "st.ffn", c, 4, InitStyle::FanIn);
        let st_ln = LayerNorm::new(reg, "st.ln", c);
        let proj = Linear::new(reg, "backbone.proj", c, n_p, InitStyle::Gpt);
        let pos = PosEmbedding::new(reg, "backbone.pos", cfg.max_seq, n_p);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("backbone.layers.{i}");
                Ok(DecoderLayer {
                    ln1: LayerNorm::new(reg, &format!("{p}.ln1"), n_p),
                    attn: Mha::new(
                        reg,
                        &format!("{p}.attn"),
                        n_p,
                        cfg.heads,
                        true,
                        InitStyle::Gpt,
                    )?,
                    ln2: LayerNorm::new(reg, &format!("{p}.ln2"), n_p),
                    ffn: Ffn::new(
                        reg,
                        &format!("{p}.ffn"),
                        n_p,
                        cfg.ffn_expansion,
                        InitStyle::Gpt,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(reg, "backbone.ln_f", n_p);
        let stages = (0..cfg.residual_stages)
            .map(|i| ResidualStage {
                dw_a: DwConv1d::new(reg, &format!("backbone.res.{i}.dw_a"), n_p, 3),
                dw_b: DwConv1d::new(reg, &format!("backbone.res.{i}.dw_b"), n_p, 3),
                se: SeBlock::new(reg, &format!("backbone.res.{i}.se"), n_p, SE_REDUCTION),
            })
            .collect();
        let phase_head = ExpandHead::new(reg, "head.phase", n_p, n_t);
        let precoder_head = ExpandHead::new(reg, "head.precoder", n_p, 2 * n_r * k);
        let ch_fc1 = Linear::new(
            reg,
            "head.channel.fc1",
            n_p,
            CHANNEL_HIDDEN,
            InitStyle::FanIn,
        );
        let ch_fc2 = Linear::new(
            reg,
            "head.channel.fc2",
            CHANNEL_HIDDEN,
            2 * n_t * k,
            InitStyle::FanIn,
        );
        let input_scale = reg.buffer("norm.input_scale", &[1], 1.0);
        let channel_scale = reg.buffer("norm.channel_scale", &[1], 1.0);
        Ok(Controller {
            cfg: cfg.clone(),
            n_r,
            n_t,
            k,
            pre_conv,
            pre_bn,
            lstm,
            st_time,
            st_space,
            st_ffn,
            st_ln,
            proj,
            pos,
            layers,
            ln_f,
            stages,
            phase_head,
            precoder_head,
            ch_fc1,
            ch_fc2,
            input_scale,
            channel_scale,
        })
    }

    /// Stage 1: `[B, 2N_R, L]` pilots → `[B, ⌊L/2⌋, 2N_R]` features.
    pub fn preprocess<'g>(&self, ctx: &Ctx<'g, '_>, y: Tensor<'g>) -> Result<Tensor<'g>> {
        let s = y.shape();
        if s.len() != 3 || s[1] != 2 * self.n_r {
            return Err(CoreError::Shape(format!(
                "pilots must be [B, {}, L], got {s:?}",
                2 * self.n_r
            )));
        }
        if s[2] < 2 {
            return Err(CoreError::Shape(format!("pilot length {} < 2", s[2])));
        }
        let inv = 1.0 / ctx.store.get(self.input_scale).data[0];
        let x = self.pre_conv.forward(ctx, y.scale(inv))?.gelu();
        let x = self.pre_bn.forward(ctx, x)?;
        let pooled = x.maxpool1d(2)?.transpose()?;
        Ok(self.lstm.forward(ctx, pooled)?.add(pooled)?)
    }

    /// Stage 2, shape preserving.
    pub fn st_attention<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let time = self.st_time.forward(ctx, x)?;
        let space = self.st_space.forward(ctx, x)?;
        let ffn = self.st_ffn.forward(ctx, x)?;
        let sum = x.add(time)?.add(space)?.add(ffn)?;
        self.st_ln.forward(ctx, sum)
    }

    /// Decoder token states `[B, T', N_P]` after the final layer norm.
    pub fn decode_tokens<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let t = x.shape()[1];
        let mut h = self.proj.forward(ctx, x)?.add(self.pos.forward(ctx, t)?)?;
        for layer in &self.layers {
            let a = layer.attn.forward(ctx, layer.ln1.forward(ctx, h)?)?;
            h = h.add(a)?;
            let f = layer.ffn.forward(ctx, layer.ln2.forward(ctx, h)?)?;
            h = h.add(f)?;
        }
        self.ln_f.forward(ctx, h)
    }

    /// Stage 3: `[B, T', 2N_R]` → `[B, N_P]`.
    pub fn backbone<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let mut m = self.decode_tokens(ctx, x)?.transpose()?;
        for st in &self.stages {
            let branch = st.dw_a.forward(ctx, m)?.add(st.dw_b.forward(ctx, m)?)?;
            m = m.add(st.se.forward(ctx, branch)?)?;
        }
        let b = m.shape()[0];
        let t = m.shape()[2];
        let pooled = match self.cfg.pooling {
            Pooling::Mean => m.mean_axis(2)?,
            Pooling::Last => m.slice(2, t - 1, t)?,
        };
        Ok(pooled.reshape(&[b, self.cfg.n_p])?)
    }

    pub fn phase_head<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        Ok(self
            .phase_head
            .forward(ctx, x)?
            .hardtanh(-1.0, 1.0)
            .scale(PI))
    }

    pub fn precoder_head<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let b = x.shape()[0];
        let raw = self
            .precoder_head
            .forward(ctx, x)?
            .reshape(&[b, 2, self.n_r, self.k])?;
        cap_columns(raw)
    }

    pub fn channel_head<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Result<Tensor<'g>> {
        let b = x.shape()[0];
        let h = self.ch_fc1.forward(ctx, x)?.leaky_relu(LEAKY_SLOPE);
        Ok(self
            .ch_fc2
            .forward(ctx, h)?
            .reshape(&[b, 2, self.n_t, self.k])?)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, y: Tensor<'g>) -> Result<Outputs<'g>> {
        let feats = self.preprocess(ctx, y)?;
        let fused = self.st_attention(ctx, feats)?;
        let emb = self.backbone(ctx, fused)?;
        Ok(Outputs {
            phases: self.phase_head(ctx, emb)?,
            w: self.precoder_head(ctx, emb)?,
            h_est: self.channel_head(ctx, emb)?,
        })
    }

    /// `(trainable, frozen, total)` weight counts for a configuration,
    /// computed from shapes alone.
    pub fn param_counts(
        sys: &SystemConfig,
        cfg: &ControllerConfig,
    ) -> Result<(usize, usize, usize)> {
        let mut counter = ShapeCounter::default();
        Controller::new(&mut counter, sys, cfg)?;
        let mut frozen = 0;
        let mut total = 0;
        for (name, n) in &counter.entries {
            total += n;
            if cfg.freeze_backbone && is_backbone_weight(name) {
                frozen += n;
            }
        }
        Ok((total - frozen, frozen, total))
    }
}

/// Rescale each precoder column (`[B, 2, N_R, K]`) to squared norm at most 1.
pub fn cap_columns<'g>(w: Tensor<'g>) -> Result<Tensor<'g>> {
    let norms = w.square().sum_axis(1)?.sum_axis(2)?;
    Ok(w.mul(norms.cap_factor(1.0))?)
}

/// A controller together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Controller,
    pub store: ParamStore,
    pub sys: SystemConfig,
}

impl Model {
    pub fn new(sys: &SystemConfig, cfg: &ControllerConfig, seed: u64) -> Result<Self> {
        let mut builder = Builder::new(stream(seed, Stream::Init, 0));
        let arch = Controller::new(&mut builder, sys, cfg)?;
        let mut store = builder.store;
        if cfg.freeze_backbone {
            let frozen: Vec<_> = store
                .iter()
                .filter(|(_, p)| is_backbone_weight(&p.name))
                .map(|(id, _)| id)
                .collect();
            for id in frozen {
                store.set_frozen(id, true);
            }
        }
        Ok(Model {
            arch,
            store,
            sys: sys.clone(),
        })
    }

    pub fn set_scales(&mut self, input_scale: f64, channel_scale: f64) {
        *self.store.get_mut(self.arch.input_scale).data_mut() = vec![input_scale];
        *self.store.get_mut(self.arch.channel_scale).data_mut() = vec![channel_scale];
    }

    pub fn channel_scale(&self) -> f64 {
        self.store.get(self.arch.channel_scale).data[0]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(rimsa_autodiff::save(&self.store, path)?)
    }

    /// Load parameters saved from a model of the same architecture.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        Ok(rimsa_autodiff::load(&mut self.store, path)?)
    }

    /// Pilots of a batch as a `[B, 2N_R, L]` tensor.
    pub fn pilots_tensor<'g>(&self, g: &'g Graph, ys: &[&[f64]]) -> Result<Tensor<'g>> {
        let l = self.sys.pilot_len;
        let per = 2 * self.arch.n_r * l;
        let mut data = Vec::with_capacity(ys.len() * per);
        for y in ys {
            if y.len() != per {
                return Err(CoreError::Shape(format!(
                    "pilot sample has {} values, expected {per}",
                    y.len()
                )));
            }
            data.extend_from_slice(y);
        }
        Ok(g.constant(data, &[ys.len(), 2 * self.arch.n_r, l])?)
    }

    /// Evaluation-mode forward pass returning physical-unit outputs.
    pub fn predict(&self, ys: &[&[f64]], p_max: f64) -> Result<Vec<ControllerOutput>> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store, false);
        let out = self.arch.forward(&ctx, self.pilots_tensor(&g, ys)?)?;
        Ok(self.decode(&out, p_max))
    }

    /// Training-mode forward without an optimizer step; batch-norm running
    /// statistics are updated.
    pub fn forward_train_stats(&mut self, ys: &[&[f64]]) -> Result<()> {
        let updates = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.store, true);
            self.arch.forward(&ctx, self.pilots_tensor(&g, ys)?)?;
            ctx.take_updates()
        };
        apply_updates(&mut self.store, updates);
        Ok(())
    }

    pub fn decode(&self, out: &Outputs<'_>, p_max: f64) -> Vec<ControllerOutput> {
        let (n_r, n_t, k) = (self.arch.n_r, self.arch.n_t, self.arch.k);
        let phases = out.phases.value();
        let w = out.w.value();
        let h = out.h_est.value();
        let b = phases.len() / n_t;
        let (ws, cs) = (p_max.sqrt(), self.channel_scale());
        (0..b)
            .map(|i| ControllerOutput {
                phases: phases[i * n_t..(i + 1) * n_t].to_vec(),
                w: unpack_complex(&w[i * 2 * n_r * k..(i + 1) * 2 * n_r * k], n_r, k, ws),
                h_est: unpack_complex(&h[i * 2 * n_t * k..(i + 1) * 2 * n_t * k], n_t, k, cs),
            })
            .collect()
    }
}

/// `[2, rows, cols]` real layout (real block first) to a complex matrix.
pub fn unpack_complex(v: &[f64], rows: usize, cols: usize, scale: f64) -> CMat {
    let n = rows * cols;
    CMat::from_fn(rows, cols, |r, c| {
        C64::new(v[r * cols + c] * scale, v[n + r * cols + c] * scale)
    })
}

/// Complex matrix to the `[2, rows, cols]` real layout.
pub fn pack_complex(m: &CMat, scale: f64) -> Vec<f64> {
    let (rows, cols) = (m.nrows(), m.ncols());
    let mut out = vec![0.0; 2 * rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = m[(r, c)].re * scale;
            out[rows * cols + r * cols + c] = m[(r, c)].im * scale;
        }
    }
    out
}
