//! Acceptance suite: one line per criterion, then a summary.
//!
//! Runs every criterion by default; pass criterion ids (`1 2 7b`) after
//! `--` to run a subset. Exits non-zero if any hard criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use rimsa_core::config::{dbm_to_mw, Config, SystemConfig, TrainConfig, Utility};
use rimsa_core::controller::{is_backbone_weight, Controller, Model};
use rimsa_core::dataset::{self, generate, replay, Dataset};
use rimsa_core::eval::{evaluate, random_baseline, zf_reference, Metrics};
use rimsa_core::geometry::CMat;
use rimsa_core::precoding::{equivalent_channel, zf_precoder};
use rimsa_core::rimsa::{build_v, sum_rate, PhaseConfig};
use rimsa_core::train::{lambda_schedule, onecycle_lr, train, TrainingReport};

use common::scalar::{instance, oracle_sum_rate, random_w, to_rows};

const LAYER_TOL: f64 = 1e-5;
const E2E_TOL: f64 = 1e-3;
const GAIN_OVER_RANDOM: f64 = 1.2;

/// Seeds and run lengths of the training criteria.
const SIGNAL_SEED: u64 = 1;
const SIGNAL_EPOCHS: usize = 300;
const PILOT_LENGTHS: [usize; 3] = [15, 30, 45];
const TREND_SEEDS: [u64; 3] = [1, 2, 3];
const TREND_EPOCHS: usize = 80;
const FAIRNESS_SEEDS: [u64; 3] = [11, 12, 13];
const FAIRNESS_EPOCHS: usize = 60;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

/// Every metric set evaluated during the run, for the fairness invariant.
#[derive(Default)]
struct Seen {
    metrics: Vec<(String, usize, Metrics)>,
}

impl Seen {
    fn record(&mut self, label: &str, k: usize, m: &Metrics) {
        self.metrics.push((label.to_string(), k, m.clone()));
    }
}

fn desk() -> Config {
    Config::desk()
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn fit(cfg: &Config, ds: &Dataset, seed: u64, label: &str) -> (Model, TrainingReport) {
    let mut model = Model::new(&cfg.system, &cfg.controller, seed).unwrap();
    let t = Instant::now();
    let report = train(&mut model, ds, &cfg.train, seed, None, |r| {
        if r.epoch % 20 == 0 {
            eprintln!(
                "  [{label}] epoch {:>3} {:>7.1}s  val sum {:.3}  val max-min {:.3}",
                r.epoch,
                t.elapsed().as_secs_f64(),
                r.val_rate,
                r.val_maxmin
            );
        }
    })
    .unwrap();
    eprintln!(
        "  [{label}] best epoch {} of {} in {:.1}s",
        report.best_epoch,
        report.epochs.len(),
        t.elapsed().as_secs_f64()
    );
    (model, report)
}

fn criterion_1(_: &mut Seen) -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for sys in [Config::full().system, desk().system] {
        let eye = CMat::identity(sys.n_r(), sys.n_r());
        for i in 0..1000 {
            let phases = PhaseConfig::random(sys.n_t(), &mut ChaCha20Rng::seed_from_u64(i));
            let v = build_v(&phases, &sys).unwrap();
            let gram = v.herm_mul(&v.dense()).unwrap();
            worst = worst.max((gram - &eye).norm());
        }
    }
    let el = t.elapsed();
    Outcome::new(
        worst < 1e-10 && within(el, 5),
        format!("unitarity: max ‖VᴴV−I‖_F = {worst:.2e} over 2×1000 configs (< 1e-10) in {el:.2?} (< 5 s)"),
    )
}

fn criterion_2(_: &mut Seen) -> Outcome {
    let sys = desk().system;
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut rank_deficient = 0;
    for seed in 0..200 {
        let (h, phases) = instance(seed, &sys);
        let h_eq = equivalent_channel(&h, &build_v(&phases, &sys).unwrap()).unwrap();
        let sv = h_eq.singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            rank_deficient += 1;
            continue;
        }
        let m = zf_precoder(&h_eq, sys.p_data_mw(), 0.0).unwrap();
        let g = h_eq.adjoint() * &m;
        for i in 0..sys.k_users {
            for k in (0..sys.k_users).filter(|&k| k != i) {
                worst = worst.max(g[(i, k)].norm() / h_eq.norm());
            }
        }
    }
    let el = t.elapsed();
    Outcome::new(
        worst < 1e-8 && rank_deficient == 0 && within(el, 5),
        format!(
            "ZF null interference: max |(H_eqᴴM)_ik|/‖H_eq‖ = {worst:.2e} on 200 instances (< 1e-8), \
             {rank_deficient} rank-deficient, in {el:.2?} (< 5 s)"
        ),
    )
}

fn criterion_3(_: &mut Seen) -> Outcome {
    let sys = desk().system;
    let noise = sys.noise_dl_mw();
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (h, phases) = instance(seed, &sys);
        let w = random_w(seed + 1000, sys.n_r(), sys.k_users, sys.p_data_mw());
        let got = sum_rate(&h, &build_v(&phases, &sys).unwrap(), &w, noise).unwrap();
        let want = oracle_sum_rate(&to_rows(&h), phases.alpha(), &to_rows(&w), sys.n_e(), noise);
        worst = worst.max((got - want).abs() / want.abs());
    }
    let el = t.elapsed();
    Outcome::new(
        worst < 1e-10 && within(el, 5),
        format!("rate oracle: max relative deviation {worst:.2e} on 100 instances (< 1e-10) in {el:.2?} (< 5 s)"),
    )
}

fn criterion_4(_: &mut Seen) -> Outcome {
    let t = Instant::now();
    let layers = common::layers::all_layer_errors();
    let (worst_name, worst_layer) =
        layers
            .iter()
            .cloned()
            .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let sum = common::controller_grad_check(2, 3, Utility::Sum, 1e-6);
    let maxmin = common::controller_grad_check(2, 3, Utility::Maxmin, 1e-6);
    let e2e = sum
        .params
        .max(sum.input)
        .max(maxmin.params)
        .max(maxmin.input);
    let el = t.elapsed();
    Outcome::new(
        worst_layer < LAYER_TOL && e2e < E2E_TOL && within(el, 120),
        format!(
            "gradients: {} layers, worst {worst_layer:.2e} ({worst_name}) (< 1e-5); end to end {e2e:.2e} \
             over {} parameter entries and all pilot inputs (< 1e-3); {el:.1?} (< 2 min)",
            layers.len(),
            sum.entries
        ),
    )
}

fn criterion_5(_: &mut Seen) -> Outcome {
    let mut cfg = desk();
    cfg.train.epochs = 50;
    cfg.train.batch_size = 2;
    cfg.train.accum_steps = 1;
    cfg.train.early_stop_patience = 50;
    let ds = generate(&cfg.system, 8, 0, 0, 5).unwrap();
    let mut model = Model::new(&cfg.system, &cfg.controller, 5).unwrap();
    let snapshot = |m: &Model| -> Vec<(String, bool, Vec<u64>)> {
        m.store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    p.frozen,
                    p.data.iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    let before = snapshot(&model);
    let report = train(&mut model, &ds, &cfg.train, 5, None, |_| {}).unwrap();
    let after = snapshot(&model);
    let mut frozen_changed = 0;
    let mut trainable_moved = 0;
    let mut set_matches = true;
    for ((name, frozen, a), (_, _, b)) in before.iter().zip(&after) {
        set_matches &= *frozen == is_backbone_weight(name);
        if *frozen {
            frozen_changed += usize::from(a != b);
        } else {
            trainable_moved += usize::from(a != b);
        }
    }
    let (trainable, frozen, total) = model.store.counts();
    let expected = Controller::param_counts(&cfg.system, &cfg.controller).unwrap();
    Outcome::new(
        report.steps == 200
            && frozen_changed == 0
            && trainable_moved > 0
            && set_matches
            && (trainable, frozen, total) == expected,
        format!(
            "freeze: {} steps, {frozen_changed} frozen tensors changed, {trainable_moved} trainable tensors moved; \
             trainable {trainable}/{total} = {:.4} (configured {}/{})",
            report.steps,
            trainable as f64 / total as f64,
            expected.0,
            expected.2
        ),
    )
}

fn criterion_6(seen: &mut Seen) -> Outcome {
    let t = Instant::now();
    let mut cfg = desk();
    cfg.train.epochs = SIGNAL_EPOCHS;
    let sys = cfg.system.clone();
    let ds = generate(&sys, 512, 128, 128, SIGNAL_SEED).unwrap();
    let p = sys.p_data_mw();
    let (model, report) = fit(&cfg, &ds, SIGNAL_SEED, "signal");
    let ctrl = evaluate(&model, ds.test(), &sys, p).unwrap();
    let random = random_baseline(ds.test(), &sys, p, SIGNAL_SEED).unwrap();
    let reference = zf_reference(ds.test(), &sys, p).unwrap();
    for (label, m) in [
        ("signal/controller", &ctrl),
        ("signal/random", &random),
        ("signal/reference", &reference),
    ] {
        seen.record(label, sys.k_users, m);
    }
    let el = t.elapsed();
    let need = GAIN_OVER_RANDOM * random.mean_sum_rate;
    Outcome::new(
        ctrl.mean_sum_rate >= need && ctrl.mean_sum_rate <= reference.mean_sum_rate && within(el, 30 * 60),
        format!(
            "learning signal: controller {:.3} ± {:.3} vs random {:.3} (need ≥ {need:.3}) and reference {:.3}; \
             {} epochs, best {}; {:.0} s (< 30 min)",
            ctrl.mean_sum_rate,
            ctrl.sum_rate_sem(),
            random.mean_sum_rate,
            reference.mean_sum_rate,
            report.epochs.len(),
            report.best_epoch,
            el.as_secs_f64()
        ),
    )
}

fn criterion_7a(seen: &mut Seen) -> Outcome {
    let sys = desk().system;
    let ds = generate(&sys, 0, 0, 128, 7).unwrap();
    let powers = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
    let rates: Vec<Metrics> = powers
        .iter()
        .map(|&dbm| zf_reference(ds.test(), &sys, dbm_to_mw(dbm)).unwrap())
        .collect();
    for (dbm, m) in powers.iter().zip(&rates) {
        seen.record(&format!("power {dbm} dBm/reference"), sys.k_users, m);
    }
    let means: Vec<f64> = rates.iter().map(|m| m.mean_sum_rate).collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let per_instance_drops = (0..ds.test().len())
        .filter(|&i| {
            rates
                .windows(2)
                .any(|w| w[1].sum_rates[i] < w[0].sum_rates[i])
        })
        .count();
    let curve: Vec<String> = powers
        .iter()
        .zip(&means)
        .map(|(p, r)| format!("{p}:{r:.2}"))
        .collect();
    Outcome::new(
        monotone,
        format!(
            "power trend: reference mean sum rate [{}] (dBm:bps/Hz); {per_instance_drops}/128 instances dip somewhere",
            curve.join(" ")
        ),
    )
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn criterion_7b(_: &mut Seen) -> Outcome {
    let t = Instant::now();
    let mut rows = Vec::new();
    for &l in &PILOT_LENGTHS {
        let mut vals = Vec::new();
        for &seed in &TREND_SEEDS {
            let mut cfg = desk();
            cfg.system.pilot_len = l;
            cfg.train.epochs = TREND_EPOCHS;
            let ds = generate(&cfg.system, 512, 128, 0, seed).unwrap();
            let (_, report) = fit(&cfg, &ds, seed, &format!("L={l} seed={seed}"));
            vals.push(report.epochs[report.best_epoch].val_rate);
        }
        let (mean, se) = mean_se(&vals);
        rows.push((l, mean, se));
    }
    let trend = rows
        .windows(2)
        .all(|w| w[1].1 >= w[0].1 - (w[0].2.powi(2) + w[1].2.powi(2)).sqrt());
    let el = t.elapsed();
    let table: Vec<String> = rows
        .iter()
        .map(|(l, m, s)| format!("L={l}: {m:.3}±{s:.3}"))
        .collect();
    Outcome::new(
        trend && within(el, 90 * 60),
        format!(
            "pilot trend: best validation sum rate over 3 seeds [{}]; {:.0} s",
            table.join(", "),
            el.as_secs_f64()
        ),
    )
}

fn criterion_8(_: &mut Seen) -> Outcome {
    let cfg: TrainConfig = desk().train;
    let lambdas: Vec<f64> = (0..cfg.epochs).map(|e| lambda_schedule(e, &cfg)).collect();
    let lambda_ok = lambdas[0] == 0.0
        && *lambdas.last().unwrap() == cfg.lambda_rate_max
        && lambdas.windows(2).all(|w| w[1] >= w[0]);
    let mut lr_ok = true;
    for total in [3usize, 10, 101, 1000, 4000] {
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, &cfg)).collect();
        let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
        let at = lrs.iter().position(|&v| v == peak).unwrap();
        lr_ok &= lrs[0] == 1e-5 && peak == 3e-4 && lrs[total - 1] == 1e-5;
        lr_ok &= lrs[..=at].windows(2).all(|w| w[1] >= w[0])
            && lrs[at..].windows(2).all(|w| w[1] <= w[0]);
    }
    Outcome::new(
        lambda_ok && lr_ok && cfg.lr_min == 1e-5 && cfg.lr_max == 3e-4,
        format!(
            "schedules: λ_rate 0 → {} non-decreasing over {} epochs; OneCycle 1e-5 → 3e-4 → 1e-5 exact",
            cfg.lambda_rate_max, cfg.epochs
        ),
    )
}

fn criterion_9(seen: &mut Seen) -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for &seed in &FAIRNESS_SEEDS {
        let mut cfg = desk();
        cfg.train.epochs = FAIRNESS_EPOCHS;
        let sys = cfg.system.clone();
        let ds = generate(&sys, 512, 128, 128, seed).unwrap();
        let mut mm = [0.0; 2];
        for (i, utility) in [Utility::Sum, Utility::Maxmin].into_iter().enumerate() {
            cfg.train.utility = utility;
            let (model, _) = fit(&cfg, &ds, seed, &format!("{utility:?} seed={seed}"));
            let m = evaluate(&model, ds.test(), &sys, sys.p_data_mw()).unwrap();
            seen.record(
                &format!("fairness {utility:?} seed {seed}"),
                sys.k_users,
                &m,
            );
            mm[i] = m.mean_maxmin;
        }
        wins += usize::from(mm[1] > mm[0]);
        pairs.push(format!("{:.3}/{:.3}", mm[0], mm[1]));
    }
    let mut checked = 0;
    let mut violations = 0;
    for (_, k, m) in &seen.metrics {
        for (s, mm) in m.sum_rates.iter().zip(&m.maxmin_rates) {
            checked += 1;
            violations += usize::from(*mm > s / *k as f64 + 1e-12);
        }
    }
    let soft = if wins >= 2 {
        "met"
    } else {
        "not met, logged only"
    };
    Outcome::new(
        violations == 0,
        format!(
            "fairness: max-min ≤ mean rate on {checked} evaluated instances ({violations} violations); \
             test max-min sum/maxmin-trained [{}], maxmin wins {wins}/3 (soft: {soft}); {:.0} s",
            pairs.join(", "),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_10(_: &mut Seen) -> Outcome {
    let cfg = desk();
    let sys: SystemConfig = cfg.system.clone();
    let ds = generate(&sys, 64, 16, 16, 5).unwrap();
    let mut bytes = Vec::new();
    dataset::write(&ds, &mut bytes).unwrap();
    let back = dataset::read(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    dataset::write(&back, &mut again).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let samples_equal = ds.samples.iter().zip(&back.samples).all(|(a, b)| {
        bits(&a.y) == bits(&b.y)
            && a.h
                .iter()
                .zip(b.h.iter())
                .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
    });
    let dataset_ok = bytes == again && samples_equal && ds.samples.len() == back.samples.len();

    let replayed = (0..ds.samples.len())
        .filter(|&i| bits(&replay(&ds, &sys, i).unwrap()) == bits(&ds.samples[i].y))
        .count();

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.rmck"), dir.path().join("b.rmck"));
    let mut model = Model::new(&sys, &cfg.controller, 3).unwrap();
    let (is, cs) = rimsa_core::train::fit_scales(ds.train());
    model.set_scales(is, cs);
    model.save(&a).unwrap();
    let mut other = Model::new(&sys, &cfg.controller, 4).unwrap();
    other.load(&a).unwrap();
    other.save(&b).unwrap();
    let p = sys.p_data_mw();
    let ma = evaluate(&model, ds.test(), &sys, p).unwrap();
    let mb = evaluate(&other, ds.test(), &sys, p).unwrap();
    let ckpt_ok = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap()
        && bits(&ma.sum_rates) == bits(&mb.sum_rates)
        && bits(&ma.maxmin_rates) == bits(&mb.maxmin_rates);
    Outcome::new(
        dataset_ok && ckpt_ok && replayed == ds.samples.len(),
        format!(
            "persistence: dataset round trip {}, checkpoint round trip {}, replay {replayed}/{} samples bitwise",
            if dataset_ok { "bitwise" } else { "differs" },
            if ckpt_ok { "bitwise" } else { "differs" },
            ds.samples.len()
        ),
    )
}

type Criterion = fn(&mut Seen) -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 11] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("5", criterion_5),
        ("8", criterion_8),
        ("10", criterion_10),
        ("7a", criterion_7a),
        ("6", criterion_6),
        ("7b", criterion_7b),
        ("9", criterion_9),
    ];
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut seen = Seen::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let t = Instant::now();
        let out = run(&mut seen);
        ran += 1;
        println!(
            "criterion {id:>3}  {}  {}  [{:.1} s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
