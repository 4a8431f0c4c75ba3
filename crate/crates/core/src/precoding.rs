//! Zero-forcing precoding on the equivalent channel and the perfect-CSI
//! reference built on it.

use crate::config::SystemConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{CMat, C64};
use crate::rimsa::{build_v, max_min_rate, sum_rate, BeamformingMatrix, PhaseConfig};

/// `H_eq = Vᴴ H`, `N_R × K`.
pub fn equivalent_channel(h: &CMat, v: &BeamformingMatrix) -> Result<CMat> {
    v.herm_mul(h)
}

/// Scale-aware default regularizer `1e-9 · tr(H_eqᴴ H_eq) / K`.
pub fn default_reg(h_eq: &CMat) -> f64 {
    let tr: f64 = h_eq.iter().map(|z| z.norm_sqr()).sum();
    1e-9 * tr / h_eq.ncols().max(1) as f64
}

/// `M₀ = H_eq (H_eqᴴ H_eq + reg·I)⁻¹`, then each column rescaled to squared
/// norm `min(‖m₀‖², p_max)`.
pub fn zf_precoder(h_eq: &CMat, p_max: f64, reg: f64) -> Result<CMat> {
    let (n_r, k) = (h_eq.nrows(), h_eq.ncols());
    if n_r < k {
        return Err(CoreError::Shape(format!(
            "zero forcing needs N_R >= K, got {n_r} < {k}"
        )));
    }
    if !(reg >= 0.0) {
        return Err(CoreError::Domain(format!("negative regularizer {reg}")));
    }
    let mut gram = h_eq.adjoint() * h_eq;
    for i in 0..k {
        gram[(i, i)] += C64::new(reg, 0.0);
    }
    let sv = gram.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-13 * smax) || smax == 0.0 {
        return Err(CoreError::Singular(format!(
            "H_eq^H H_eq + reg I is rank deficient (sigma_min / sigma_max = {:.3e}); use reg > 0",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    let inv = gram
        .try_inverse()
        .ok_or_else(|| CoreError::Singular("Gram matrix inversion failed; use reg > 0".into()))?;
    let mut m = h_eq * inv;
    for mut col in m.column_iter_mut() {
        let n2: f64 = col.iter().map(|z| z.norm_sqr()).sum();
        if n2 > p_max && n2 > 0.0 {
            col *= C64::new((p_max / n2).sqrt(), 0.0);
        }
    }
    Ok(m)
}

/// ZF with the default regularizer, falling back to a stronger one when
/// the equivalent channel is numerically singular.
pub fn zf_default(h_eq: &CMat, p_max: f64) -> Result<CMat> {
    let reg = default_reg(h_eq);
    zf_precoder(h_eq, p_max, reg).or_else(|_| zf_precoder(h_eq, p_max, reg.max(1e-300) * 1e6))
}

/// Sum rate and max-min rate under perfect-CSI ZF for the given phases.
pub fn reference_pipeline(
    h: &CMat,
    phases: &PhaseConfig,
    cfg: &SystemConfig,
    p_max: f64,
) -> Result<(f64, f64)> {
    let v = build_v(phases, cfg)?;
    let h_eq = equivalent_channel(h, &v)?;
    if h_eq.iter().all(|z| *z == C64::new(0.0, 0.0)) {
        return Ok((0.0, 0.0));
    }
    let w = zf_default(&h_eq, p_max)?;
    let noise = cfg.noise_dl_mw();
    Ok((sum_rate(h, &v, &w, noise)?, max_min_rate(h, &v, &w, noise)?))
}

/// Phases that co-phase each chain's elements to a target vector:
/// `α_n = -arg(target_n)`, so that `Vᴴ` (taps `e^{jα}/√N_E`) sums the
/// target coherently.
fn cophase(target: impl Fn(usize) -> C64, n_t: usize) -> PhaseConfig {
    PhaseConfig::new((0..n_t).map(|n| -target(n).arg()).collect())
}

/// Perfect-CSI phase choice: the best (by ZF sum rate) of
/// chains assigned round-robin to users and co-phased to that user's
/// channel, and all chains co-phased to the sum of user channels.
pub fn oracle_phases(h: &CMat, cfg: &SystemConfig, p_max: f64) -> Result<PhaseConfig> {
    let (n_t, n_e, k) = (cfg.n_t(), cfg.n_e(), h.ncols());
    let candidates = [
        cophase(|n| h[(n, (n / n_e) % k)], n_t),
        cophase(|n| (0..k).map(|j| h[(n, j)]).sum(), n_t),
    ];
    let mut best: Option<(f64, PhaseConfig)> = None;
    for p in candidates {
        let (rate, _) = reference_pipeline(h, &p, cfg, p_max)?;
        if best.as_ref().is_none_or(|(b, _)| rate > *b) {
            best = Some((rate, p));
        }
    }
    Ok(best.expect("candidate list is non-empty").1)
}
