//! Test-set metrics for the controller and the reference methods.
//!
//! All rates use the true channel and the downlink noise power. Each
//! method maps a sample to phases and a precoder; only the mapping differs.

use serde::Serialize;

use crate::config::SystemConfig;
use crate::controller::Model;
use crate::dataset::Sample;
use crate::error::{CoreError, Result};
use crate::precoding::{oracle_phases, reference_pipeline};
use crate::rimsa::{build_v, max_min_rate, sum_rate, PhaseConfig};
use crate::rng::{stream, Stream};

/// Forward passes are run in chunks of this many samples.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: usize,
    pub mean_sum_rate: f64,
    pub mean_maxmin: f64,
    /// Per-sample sum rates, in dataset order.
    #[serde(skip)]
    pub sum_rates: Vec<f64>,
    /// Per-sample max-min rates, in dataset order.
    #[serde(skip)]
    pub maxmin_rates: Vec<f64>,
    /// Mean `‖Ĥ − H‖²_F` in channel-scale units, for the controller only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_mse: Option<f64>,
}

impl Metrics {
    fn from_rates(rates: Vec<(f64, f64)>, l_mse: Option<f64>) -> Result<Metrics> {
        if rates.is_empty() {
            return Err(CoreError::Dataset("no samples to evaluate".into()));
        }
        let n = rates.len() as f64;
        let (sum_rates, maxmin_rates): (Vec<f64>, Vec<f64>) = rates.into_iter().unzip();
        Ok(Metrics {
            samples: sum_rates.len(),
            mean_sum_rate: sum_rates.iter().sum::<f64>() / n,
            mean_maxmin: maxmin_rates.iter().sum::<f64>() / n,
            sum_rates,
            maxmin_rates,
            l_mse,
        })
    }

    /// Standard error of the mean sum rate.
    pub fn sum_rate_sem(&self) -> f64 {
        let n = self.sum_rates.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let var = self
            .sum_rates
            .iter()
            .map(|r| (r - self.mean_sum_rate).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }
}

/// Controller metrics at downlink power `p_max` (mW). The predicted
/// precoder is expressed in units of `√p_max`, so changing `p_max`
/// rescales it without retraining.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    sys: &SystemConfig,
    p_max: f64,
) -> Result<Metrics> {
    let noise = sys.noise_dl_mw();
    let cs = model.channel_scale();
    let mut rates = Vec::with_capacity(samples.len());
    let mut mse = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let ys: Vec<&[f64]> = chunk.iter().map(|s| s.y.as_slice()).collect();
        for (out, s) in model.predict(&ys, p_max)?.iter().zip(chunk) {
            let v = build_v(&PhaseConfig::new(out.phases.clone()), sys)?;
            rates.push((
                sum_rate(&s.h, &v, &out.w, noise)?,
                max_min_rate(&s.h, &v, &out.w, noise)?,
            ));
            mse += (&out.h_est - &s.h).norm_squared() / (cs * cs);
        }
    }
    let n = samples.len().max(1) as f64;
    Metrics::from_rates(rates, Some(mse / n))
}

/// Uniform random phases per sample (from the baseline stream of `seed`)
/// with ZF on the resulting equivalent channel.
pub fn random_baseline(
    samples: &[Sample],
    sys: &SystemConfig,
    p_max: f64,
    seed: u64,
) -> Result<Metrics> {
    let rates = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let phases =
                PhaseConfig::random(sys.n_t(), &mut stream(seed, Stream::Baseline, i as u64));
            reference_pipeline(&s.h, &phases, sys, p_max)
        })
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_rates(rates, None)
}

/// Perfect-CSI reference: oracle phases with ZF.
pub fn zf_reference(samples: &[Sample], sys: &SystemConfig, p_max: f64) -> Result<Metrics> {
    let rates = samples
        .iter()
        .map(|s| reference_pipeline(&s.h, &oracle_phases(&s.h, sys, p_max)?, sys, p_max))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_rates(rates, None)
}
