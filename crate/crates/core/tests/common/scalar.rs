//! Scalar `(re, im)` reimplementations of the rate computation, with no
//! matrix library.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use rimsa_core::config::SystemConfig;
use rimsa_core::geometry::{complex_gaussian, rician_channel, sample_users, CMat, C64};
use rimsa_core::rimsa::PhaseConfig;

pub type Cx = (f64, f64);

pub fn mul(a: Cx, b: Cx) -> Cx {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

pub fn conj(a: Cx) -> Cx {
    (a.0, -a.1)
}

pub fn add(a: Cx, b: Cx) -> Cx {
    (a.0 + b.0, a.1 + b.1)
}

pub fn sub(a: Cx, b: Cx) -> Cx {
    (a.0 - b.0, a.1 - b.1)
}

pub fn div(a: Cx, b: Cx) -> Cx {
    let d = b.0 * b.0 + b.1 * b.1;
    let n = mul(a, conj(b));
    (n.0 / d, n.1 / d)
}

pub fn to_rows(m: &CMat) -> Vec<Vec<Cx>> {
    (0..m.nrows())
        .map(|r| {
            (0..m.ncols())
                .map(|c| (m[(r, c)].re, m[(r, c)].im))
                .collect()
        })
        .collect()
}

/// Element `n` on chain `n / N_E` carries `exp(-jα_n)/√N_E`.
pub fn oracle_eq_channel(h: &[Vec<Cx>], alpha: &[f64], n_e: usize, n_r: usize) -> Vec<Vec<Cx>> {
    let k = h[0].len();
    let s = 1.0 / (n_e as f64).sqrt();
    let mut out = vec![vec![(0.0, 0.0); k]; n_r];
    for r in 0..n_r {
        for j in 0..k {
            for e in 0..n_e {
                let n = r * n_e + e;
                let tap = (s * alpha[n].cos(), -s * alpha[n].sin());
                out[r][j] = add(out[r][j], mul(conj(tap), h[n][j]));
            }
        }
    }
    out
}

pub fn oracle_sum_rate(h: &[Vec<Cx>], alpha: &[f64], w: &[Vec<Cx>], n_e: usize, noise: f64) -> f64 {
    let n_r = w.len();
    let k = w[0].len();
    let eq = oracle_eq_channel(h, alpha, n_e, n_r);
    let mut total = 0.0;
    for user in 0..k {
        let mut powers = vec![0.0; k];
        for (i, p) in powers.iter_mut().enumerate() {
            let mut g = (0.0, 0.0);
            for r in 0..n_r {
                g = add(g, mul(conj(w[r][i]), eq[r][user]));
            }
            *p = g.0 * g.0 + g.1 * g.1;
        }
        let interference: f64 = (0..k).filter(|&i| i != user).map(|i| powers[i]).sum();
        total += (1.0 + powers[user] / (interference + noise)).log2();
    }
    total
}

/// A random desk-style instance: channel and uniform phases.
pub fn instance(seed: u64, sys: &SystemConfig) -> (CMat, PhaseConfig) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let users = sample_users(sys, &mut rng);
    let h = rician_channel(sys, &users, &mut rng).unwrap().h;
    (h, PhaseConfig::random(sys.n_t(), &mut rng))
}

pub fn random_w(seed: u64, n_r: usize, k: usize, p: f64) -> CMat {
    let mut w = complex_gaussian(n_r, k, &mut ChaCha20Rng::seed_from_u64(seed));
    for mut col in w.column_iter_mut() {
        let n = col.norm();
        col *= C64::new(p.sqrt() / n, 0.0);
    }
    w
}
