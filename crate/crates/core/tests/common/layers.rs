//! Finite-difference checks of single layers under a fixed linear readout.

use rimsa_autodiff::{grad_check, grad_check_params, Graph, ParamStore, Tensor};

use rimsa_core::nn::{
    BatchNorm1d, BiLstm, Builder, Conv1d, Ctx, DwConv1d, Ffn, InitStyle, LayerNorm, Linear, Mha,
    PosEmbedding, SeBlock, SpatialAttention,
};
use rimsa_core::rng::{stream, Stream};

const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

pub trait Layer {
    fn run<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Tensor<'g>;
}

macro_rules! layer {
    ($t:ty) => {
        impl Layer for $t {
            fn run<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Tensor<'g> {
                self.forward(ctx, x).unwrap()
            }
        }
    };
}

layer!(Linear);
layer!(LayerNorm);
layer!(Ffn);
layer!(Conv1d);
layer!(DwConv1d);
layer!(BatchNorm1d);
layer!(SeBlock);
layer!(BiLstm);
layer!(Mha);
layer!(SpatialAttention);

impl Layer for PosEmbedding {
    fn run<'g>(&self, ctx: &Ctx<'g, '_>, x: Tensor<'g>) -> Tensor<'g> {
        let t = x.shape()[1];
        x.add(self.forward(ctx, t).unwrap()).unwrap()
    }
}

pub fn pattern(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (0.7 * i as f64 + phase).sin()).collect()
}

/// `Σ c_i y_i` with fixed, non-uniform weights.
pub fn readout<'g>(y: Tensor<'g>) -> Tensor<'g> {
    let c = y
        .graph()
        .constant(pattern(y.numel(), 0.3), &y.shape())
        .unwrap();
    y.mul(c).unwrap().sum()
}

pub fn builder(seed: u64) -> Builder {
    Builder::new(stream(seed, Stream::Init, 0))
}

/// Worst relative error over the layer's parameters and its input.
pub fn check<L: Layer>(layer: &L, store: &mut ParamStore, shape: &[usize], train: bool) -> f64 {
    let n: usize = shape.iter().product();
    let x = pattern(n, 1.1);
    let params = grad_check_params(
        store,
        |g, s| {
            let ctx = Ctx::new(g, s, train);
            let input = g.constant(x.clone(), shape)?;
            Ok(readout(layer.run(&ctx, input)))
        },
        EPS,
    )
    .unwrap();
    let frozen = store.clone();
    let input = grad_check(
        |g: &Graph, t| {
            let ctx = Ctx::new(g, &frozen, train);
            Ok(readout(layer.run(&ctx, t)))
        },
        &x,
        shape,
        EPS,
    )
    .unwrap();
    params.max(input)
}

/// Worst relative error of every layer type, by name.
pub fn all_layer_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut b = builder(1);
    let l = Linear::new(&mut b, "l", 4, 3, InitStyle::FanIn);
    out.push(("linear", check(&l, &mut b.store, &[2, 5, 4], false)));
    let mut b = builder(2);
    let l = LayerNorm::new(&mut b, "ln", 6);
    out.push(("layer_norm", check(&l, &mut b.store, &[3, 6], false)));
    let mut b = builder(3);
    let l = Ffn::new(&mut b, "f", 4, 2, InitStyle::FanIn);
    out.push(("ffn", check(&l, &mut b.store, &[2, 3, 4], false)));
    let mut b = builder(4);
    let l = PosEmbedding::new(&mut b, "p", 8, 3);
    out.push(("positional", check(&l, &mut b.store, &[2, 5, 3], false)));
    let mut b = builder(5);
    let l = Conv1d::new(&mut b, "c", 3, 4, 3);
    out.push(("conv1d", check(&l, &mut b.store, &[2, 3, 7], false)));
    let mut b = builder(5);
    let l = DwConv1d::new(&mut b, "d", 3, 3);
    out.push(("dwconv1d", check(&l, &mut b.store, &[2, 3, 7], false)));
    let mut b = builder(6);
    let l = BatchNorm1d::new(&mut b, "bn", 3);
    out.push((
        "batch_norm_train",
        check(&l, &mut b.store, &[4, 3, 5], true),
    ));
    out.push((
        "batch_norm_eval",
        check(&l, &mut b.store, &[4, 3, 5], false),
    ));
    let mut b = builder(7);
    let l = SeBlock::new(&mut b, "se", 4, 2);
    out.push(("squeeze_excite", check(&l, &mut b.store, &[2, 4, 6], false)));
    let mut b = builder(8);
    let l = BiLstm::new(&mut b, "l", 3, 2);
    out.push(("bilstm", check(&l, &mut b.store, &[2, 4, 3], false)));
    for (name, causal) in [("attention", false), ("causal_attention", true)] {
        let mut b = builder(9);
        let l = Mha::new(&mut b, "a", 4, 2, causal, InitStyle::FanIn).unwrap();
        out.push((name, check(&l, &mut b.store, &[2, 3, 4], false)));
    }
    let mut b = builder(10);
    let l = sharp_spatial(&mut b);
    out.push((
        "spatial_attention",
        check(&l, &mut b.store, &[2, 4, 6], false),
    ));
    out
}

/// Spatial attention with affinity weights large enough that the softmax
/// is far from uniform.
pub fn sharp_spatial(b: &mut Builder) -> SpatialAttention {
    let s = SpatialAttention::new(b, "s", 6, 2).unwrap();
    let ws = b.store.get(s.ws).data.iter().map(|w| w * 50.0).collect();
    *b.store.get_mut(s.ws).data_mut() = ws;
    s
}
