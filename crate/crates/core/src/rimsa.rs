//! Analog beamformer, uplink pilots and downlink rate metrics.

use std::f64::consts::PI;

use rand::Rng;

use crate::config::SystemConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{complex_gaussian, CMat, C64};

/// Element phases in radians, canonicalized to `[-π, π]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    alpha: Vec<f64>,
}

pub fn wrap_phase(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        a
    } else {
        a - 2.0 * PI * (a / (2.0 * PI)).round()
    }
}

impl PhaseConfig {
    pub fn new(alpha: Vec<f64>) -> Self {
        PhaseConfig {
            alpha: alpha.into_iter().map(wrap_phase).collect(),
        }
    }

    pub fn zeros(n_t: usize) -> Self {
        PhaseConfig {
            alpha: vec![0.0; n_t],
        }
    }

    pub fn random<R: Rng + ?Sized>(n_t: usize, rng: &mut R) -> Self {
        PhaseConfig {
            alpha: (0..n_t).map(|_| rng.random_range(-PI..PI)).collect(),
        }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

/// Block-diagonal `N_t × N_R` matrix; column `r` holds
/// `exp(-jα)/√N_E` on chain `r`'s rows. Stored by its phases only.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformingMatrix {
    n_r: usize,
    n_e: usize,
    /// `exp(-jα_n)/√N_E` per element.
    taps: Vec<C64>,
}

pub fn build_v(phases: &PhaseConfig, cfg: &SystemConfig) -> Result<BeamformingMatrix> {
    if phases.alpha.len() != cfg.n_t() {
        return Err(CoreError::Shape(format!(
            "{} phases for {} elements",
            phases.alpha.len(),
            cfg.n_t()
        )));
    }
    let s = 1.0 / (cfg.n_e() as f64).sqrt();
    Ok(BeamformingMatrix {
        n_r: cfg.n_r(),
        n_e: cfg.n_e(),
        taps: phases
            .alpha
            .iter()
            .map(|&a| C64::from_polar(s, -a))
            .collect(),
    })
}

impl BeamformingMatrix {
    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    pub fn dense(&self) -> CMat {
        let n_t = self.n_r * self.n_e;
        let mut v = CMat::zeros(n_t, self.n_r);
        for (n, &t) in self.taps.iter().enumerate() {
            v[(n, n / self.n_e)] = t;
        }
        v
    }

    /// `Vᴴ A` for an `N_t × m` matrix, exploiting the block structure.
    pub fn herm_mul(&self, a: &CMat) -> Result<CMat> {
        if a.nrows() != self.taps.len() {
            return Err(CoreError::Shape(format!(
                "V^H needs {} rows, got {}",
                self.taps.len(),
                a.nrows()
            )));
        }
        let mut out = CMat::zeros(self.n_r, a.ncols());
        for c in 0..a.ncols() {
            for r in 0..self.n_r {
                let mut acc = C64::new(0.0, 0.0);
                for e in 0..self.n_e {
                    let n = r * self.n_e + e;
                    acc += self.taps[n].conj() * a[(n, c)];
                }
                out[(r, c)] = acc;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotBlock {
    /// `K × L` pilot sequences.
    pub x: CMat,
    /// `N_R × L` received samples.
    pub y: CMat,
}

/// Row `k` is `√P_pilot · exp(-j2πkℓ/L)`.
pub fn dft_pilots(cfg: &SystemConfig) -> Result<CMat> {
    let (k, l) = (cfg.k_users, cfg.pilot_len);
    if l < k {
        return Err(CoreError::Config(format!(
            "pilot length {l} cannot hold {k} orthogonal pilots"
        )));
    }
    let amp = cfg.p_pilot_mw().sqrt();
    Ok(CMat::from_fn(k, l, |i, j| {
        C64::from_polar(amp, -2.0 * PI * (i * j) as f64 / l as f64)
    }))
}

/// `Y = Vᴴ H X + Vᴴ N` with `N` i.i.d. CN(0, noise_var).
pub fn receive_pilots<R: Rng + ?Sized>(
    v: &BeamformingMatrix,
    h: &CMat,
    x: &CMat,
    noise_var: f64,
    rng: &mut R,
) -> Result<PilotBlock> {
    if h.ncols() != x.nrows() {
        return Err(CoreError::Shape(format!(
            "{} users in H but {} pilot rows",
            h.ncols(),
            x.nrows()
        )));
    }
    let mut received = h * x;
    let noise = complex_gaussian(h.nrows(), x.ncols(), rng) * C64::new(noise_var.sqrt(), 0.0);
    received += noise;
    Ok(PilotBlock {
        x: x.clone(),
        y: v.herm_mul(&received)?,
    })
}

/// `G[i, k] = w_iᴴ h_eq,k` for `H_eq = Vᴴ H`.
fn gains(h: &CMat, v: &BeamformingMatrix, w: &CMat) -> Result<CMat> {
    let h_eq = v.herm_mul(h)?;
    if w.nrows() != h_eq.nrows() || w.ncols() != h_eq.ncols() {
        return Err(CoreError::Shape(format!(
            "W is {}x{}, equivalent channel is {}x{}",
            w.nrows(),
            w.ncols(),
            h_eq.nrows(),
            h_eq.ncols()
        )));
    }
    Ok(w.adjoint() * h_eq)
}

fn sinr_from_gains(g: &CMat, k: usize, noise: f64) -> Result<f64> {
    let signal = g[(k, k)].norm_sqr();
    let interference: f64 = (0..g.nrows())
        .filter(|&i| i != k)
        .map(|i| g[(i, k)].norm_sqr())
        .sum();
    let denom = interference + noise;
    if denom <= 0.0 {
        if signal == 0.0 {
            return Err(CoreError::Domain(format!(
                "SINR of user {k} is 0/0 (zero noise and zero signal)"
            )));
        }
        return Ok(f64::INFINITY);
    }
    Ok(signal / denom)
}

/// `|w_kᴴVᴴh_k|² / (Σ_{i≠k} |w_iᴴVᴴh_k|² + σ²)`.
pub fn sinr(h: &CMat, v: &BeamformingMatrix, w: &CMat, k: usize, noise: f64) -> Result<f64> {
    sinr_from_gains(&gains(h, v, w)?, k, noise)
}

/// `log₂(1 + SINR_k)` for every user.
pub fn user_rates(h: &CMat, v: &BeamformingMatrix, w: &CMat, noise: f64) -> Result<Vec<f64>> {
    let g = gains(h, v, w)?;
    (0..g.ncols())
        .map(|k| Ok((1.0 + sinr_from_gains(&g, k, noise)?).log2()))
        .collect()
}

pub fn sum_rate(h: &CMat, v: &BeamformingMatrix, w: &CMat, noise: f64) -> Result<f64> {
    Ok(user_rates(h, v, w, noise)?.iter().sum())
}

pub fn max_min_rate(h: &CMat, v: &BeamformingMatrix, w: &CMat, noise: f64) -> Result<f64> {
    Ok(user_rates(h, v, w, noise)?
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}
