#![allow(dead_code)]

pub mod layers;
pub mod scalar;

use rimsa_autodiff::{grad_check, grad_check_entries, Graph, ParamId, ParamStore, Tensor};

use rimsa_core::config::SystemConfig;
use rimsa_core::config::{Config, Utility};
use rimsa_core::controller::{Controller, Model};
use rimsa_core::dataset::{generate, Sample};
use rimsa_core::geometry::CMat;
use rimsa_core::loss::{hybrid_loss, Targets};
use rimsa_core::nn::Ctx;
use rimsa_core::train::fit_scales;

/// Desk geometry with `N_R = 8`, `L = 16` and a reduced backbone.
pub fn small_config() -> Config {
    let mut cfg = Config::desk();
    cfg.system.pilot_len = 16;
    cfg.controller.n_p = 32;
    cfg.controller.n_layers = 2;
    cfg.controller.heads = 4;
    cfg.controller.freeze_backbone = false;
    cfg
}

struct LossSetup<'a> {
    arch: Controller,
    sys: &'a SystemConfig,
    targets: &'a Targets<'a>,
    utility: Utility,
}

impl LossSetup<'_> {
    fn loss<'g>(&self, g: &'g Graph, store: &ParamStore, input: Tensor<'g>) -> Tensor<'g> {
        let ctx = Ctx::new(g, store, true);
        let out = self.arch.forward(&ctx, input).unwrap();
        hybrid_loss(g, self.sys, &out, self.targets, 0.5, 0.0, self.utility)
            .unwrap()
            .total
    }
}

pub struct GradReport {
    pub params: f64,
    pub input: f64,
    pub entries: usize,
}

/// Finite-difference check of the hybrid loss (with `λ_pre = 0`) through the
/// whole controller: every first-convolution weight, `per_param` sampled
/// entries of each other parameter, and every pilot input.
pub fn controller_grad_check(
    batch: usize,
    per_param: usize,
    utility: Utility,
    eps: f64,
) -> GradReport {
    let cfg = small_config();
    let sys = cfg.system.clone();
    let ds = generate(&sys, batch, 0, 0, 21).unwrap();
    let samples: Vec<Sample> = ds.train().to_vec();
    let (in_scale, ch_scale) = fit_scales(&samples);
    let mut model = Model::new(&sys, &cfg.controller, 4).unwrap();
    // pilots are fed pre-normalized so the input step size is well scaled
    model.set_scales(1.0, ch_scale);
    let y: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.y.iter().map(|v| v / in_scale))
        .collect();
    let shape = [batch, 2 * sys.n_r(), sys.pilot_len];
    let hs: Vec<&CMat> = samples.iter().map(|s| &s.h).collect();
    let targets = Targets {
        h: &hs,
        channel_scale: ch_scale,
        p_max: sys.p_data_mw(),
        noise: sys.noise_dl_mw(),
    };
    let setup = LossSetup {
        arch: model.arch.clone(),
        sys: &sys,
        targets: &targets,
        utility,
    };

    let mut entries: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in model.store.iter().filter(|(_, p)| p.trainable()) {
        let n = p.numel();
        if p.name == "pre.conv.w" {
            entries.extend((0..n).map(|i| (id, i)));
        } else {
            entries.extend((0..per_param.min(n)).map(|j| (id, (j * 7919 + 13) % n)));
        }
    }
    let params = grad_check_entries(
        &mut model.store,
        |g, s| {
            let input = g.constant(y.clone(), &shape)?;
            Ok(setup.loss(g, s, input))
        },
        &entries,
        eps,
    )
    .unwrap();
    let store = model.store.clone();
    let input = grad_check(|g: &Graph, t| Ok(setup.loss(g, &store, t)), &y, &shape, eps).unwrap();
    GradReport {
        params,
        input,
        entries: entries.len(),
    }
}
