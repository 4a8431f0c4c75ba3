//! Hybrid training loss.
//!
//! `total = l_mse + λ_rate·l_rate + λ_pre·l_fro`, averaged over the batch:
//!
//! - `l_mse = ‖Ĥ − H‖²_F` in channel-scale units;
//! - `l_rate = −Σ_k log₂(1 + SINR_k)` (sum utility) or the negative
//!   soft minimum of the per-user rates (max-min utility);
//! - `l_fro = ‖M − W‖²_F` in units of `√P_max`, where `M` is the ZF
//!   precoder on the equivalent channel under the predicted phases. `M` is
//!   a fixed target: no gradient flows through the matrix inverse.

use std::f64::consts::LN_2;

use rimsa_autodiff::{Graph, Tensor};

use crate::config::{SystemConfig, Utility};
use crate::controller::{pack_complex, Outputs};
use crate::error::{CoreError, Result};
use crate::geometry::CMat;
use crate::precoding::{equivalent_channel, zf_default};
use crate::rimsa::{build_v, PhaseConfig};

/// Soft-minimum temperature for max-min training.
pub const SOFTMIN_TAU: f64 = 10.0;

/// Per-batch inputs that do not depend on the network.
pub struct Targets<'a> {
    /// True channels in physical units.
    pub h: &'a [&'a CMat],
    pub channel_scale: f64,
    pub p_max: f64,
    pub noise: f64,
}

pub struct LossTerms<'g> {
    pub total: Tensor<'g>,
    pub l_mse: Tensor<'g>,
    pub l_rate: Tensor<'g>,
    pub l_fro: Tensor<'g>,
    /// Per-user rates `[B, 1, K]` in bps/Hz.
    pub rates: Tensor<'g>,
}

/// Per-user rates `[B, 1, K]` from phases `[B, N_t]`, precoders
/// `[B, 2, N_R, K]` (units of `√P_max`) and channels `[B, 2, N_t, K]`
/// (units of `channel_scale`). `noise_eff = σ² / (P_max · scale²)`.
pub fn rates_tensor<'g>(
    sys: &SystemConfig,
    phases: Tensor<'g>,
    w: Tensor<'g>,
    h: Tensor<'g>,
    noise_eff: f64,
) -> Result<Tensor<'g>> {
    let g = phases.graph();
    let b = phases.shape()[0];
    let (n_r, n_e, k) = (sys.n_r(), sys.n_e(), sys.k_users);
    let cos = phases.cos().reshape(&[b, n_r, n_e, 1])?;
    let sin = phases.sin().reshape(&[b, n_r, n_e, 1])?;
    let hr = h.slice(1, 0, 1)?.reshape(&[b, n_r, n_e, k])?;
    let hi = h.slice(1, 1, 2)?.reshape(&[b, n_r, n_e, k])?;
    let s = 1.0 / (n_e as f64).sqrt();
    // Vᴴh: Σ_e e^{jα}(h_re + j h_im)/√N_E
    let eq_r = cos
        .mul(hr)?
        .sub(sin.mul(hi)?)?
        .sum_axis(2)?
        .reshape(&[b, n_r, k])?
        .scale(s);
    let eq_i = cos
        .mul(hi)?
        .add(sin.mul(hr)?)?
        .sum_axis(2)?
        .reshape(&[b, n_r, k])?
        .scale(s);
    let wr = w.slice(1, 0, 1)?.reshape(&[b, n_r, k])?.transpose()?;
    let wi = w.slice(1, 1, 2)?.reshape(&[b, n_r, k])?.transpose()?;
    // G[i, k] = w_iᴴ h_eq,k
    let gr = wr.bmm(eq_r)?.add(wi.bmm(eq_i)?)?;
    let gi = wr.bmm(eq_i)?.sub(wi.bmm(eq_r)?)?;
    let power = gr.square().add(gi.square())?;
    let mut eye = vec![0.0; k * k];
    for i in 0..k {
        eye[i * k + i] = 1.0;
    }
    let signal = power.mul(g.constant(eye, &[k, k])?)?.sum_axis(1)?;
    let received = power.sum_axis(1)?;
    let sinr = signal.div(received.sub(signal)?.add_scalar(noise_eff))?;
    Ok(sinr.add_scalar(1.0).log()?.scale(1.0 / LN_2))
}

/// `-(1/τ) log Σ_k exp(-τ r_k)` over the last axis, per row.
pub fn softmin<'g>(rates: Tensor<'g>, tau: f64) -> Result<Tensor<'g>> {
    let g = rates.graph();
    let s = rates.shape();
    let k = *s.last().unwrap();
    let v = rates.value();
    let mins: Vec<f64> = v
        .chunks(k)
        .map(|r| r.iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    let mut ms = s.clone();
    *ms.last_mut().unwrap() = 1;
    let m = g.constant(mins, &ms)?;
    let lse = rates
        .sub(m)?
        .scale(-tau)
        .exp()
        .sum_axis(s.len() - 1)?
        .log()?;
    Ok(m.sub(lse.scale(1.0 / tau))?)
}

/// ZF targets for a batch in `[B, 2, N_R, K]` layout, units of `√P_max`.
pub fn zf_targets(sys: &SystemConfig, phases: &[f64], t: &Targets<'_>) -> Result<Vec<f64>> {
    let n_t = sys.n_t();
    let mut out = Vec::with_capacity(t.h.len() * 2 * sys.n_r() * sys.k_users);
    for (i, h) in t.h.iter().enumerate() {
        let v = build_v(
            &PhaseConfig::new(phases[i * n_t..(i + 1) * n_t].to_vec()),
            sys,
        )?;
        let m = zf_default(&equivalent_channel(h, &v)?, t.p_max)?;
        out.extend(pack_complex(&m, 1.0 / t.p_max.sqrt()));
    }
    Ok(out)
}

pub fn hybrid_loss<'g>(
    g: &'g Graph,
    sys: &SystemConfig,
    out: &Outputs<'g>,
    t: &Targets<'_>,
    lambda_rate: f64,
    lambda_pre: f64,
    utility: Utility,
) -> Result<LossTerms<'g>> {
    let b = t.h.len();
    let (n_t, n_r, k) = (sys.n_t(), sys.n_r(), sys.k_users);
    if out.phases.shape() != [b, n_t]
        || out.w.shape() != [b, 2, n_r, k]
        || out.h_est.shape() != [b, 2, n_t, k]
    {
        return Err(CoreError::Shape(format!(
            "outputs {:?}/{:?}/{:?} do not match a batch of {b}",
            out.phases.shape(),
            out.w.shape(),
            out.h_est.shape()
        )));
    }
    let inv_b = 1.0 / b as f64;
    let mut h_data = Vec::with_capacity(b * 2 * n_t * k);
    for h in t.h {
        h_data.extend(pack_complex(h, 1.0 / t.channel_scale));
    }
    let h = g.constant(h_data, &[b, 2, n_t, k])?;
    let l_mse = out.h_est.sub(h)?.square().sum().scale(inv_b);

    let noise_eff = t.noise / (t.p_max * t.channel_scale * t.channel_scale);
    let rates = rates_tensor(sys, out.phases, out.w, h, noise_eff)?;
    let l_rate = match utility {
        Utility::Sum => rates.sum().scale(-inv_b),
        Utility::Maxmin => softmin(rates, SOFTMIN_TAU)?.sum().scale(-inv_b),
    };

    let m = zf_targets(sys, &out.phases.value(), t)?;
    let m = g.constant(m, &[b, 2, n_r, k])?;
    let l_fro = m.sub(out.w)?.square().sum().scale(inv_b);

    let total = l_mse
        .add(l_rate.scale(lambda_rate))?
        .add(l_fro.scale(lambda_pre))?;
    Ok(LossTerms {
        total,
        l_mse,
        l_rate,
        l_fro,
        rates,
    })
}
