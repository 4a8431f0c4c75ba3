//! Array geometry, user placement and Rician channel realizations.
//!
//! Channel vectors are stored in element order: RF chain `r` owns rows
//! `r·N_E .. (r+1)·N_E`. Each chain drives a contiguous `N_Ex × N_Ey` patch
//! of the aperture; chains tile the aperture row-major along x.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SystemConfig;
use crate::error::{CoreError, Result};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;

#[derive(Clone, Debug, PartialEq)]
pub struct UserSet {
    pub positions: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    /// `N_t × K`, column `k` is user `k`'s channel.
    pub h: CMat,
    pub h_los: CMat,
    pub h_nlos: CMat,
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub users: UserSet,
    pub blocks: Vec<ChannelRealization>,
}

/// Direction cosines `(sinφ·cosθ, sinθ)` and distance of a user seen from
/// the array, which lies in the y-z plane.
pub fn angles_from_positions(user: [f64; 3], bs: [f64; 3]) -> Result<(f64, f64, f64)> {
    let dx = user[0] - bs[0];
    let dy = user[1] - bs[1];
    let dz = user[2] - bs[2];
    let d = (dx * dx + dy * dy + dz * dz).sqrt();
    if !(d > 0.0) {
        return Err(CoreError::Geometry(
            "user coincides with the array position".into(),
        ));
    }
    Ok((dy / d, dz / d, d))
}

/// Aperture coordinates `(i_x, i_y)` of element `n` (element order).
pub fn element_coords(cfg: &SystemConfig, n: usize) -> (usize, usize) {
    let n_e = cfg.n_e();
    let (r, e) = (n / n_e, n % n_e);
    let ix = (r % cfg.n_rx) * cfg.n_ex + e % cfg.n_ex;
    let iy = (r / cfg.n_rx) * cfg.n_ey + e / cfg.n_ex;
    (ix, iy)
}

/// Raster index `i_y·N_x + i_x` of element `n`.
pub fn element_to_raster(cfg: &SystemConfig, n: usize) -> usize {
    let (ix, iy) = element_coords(cfg, n);
    iy * cfg.n_x() + ix
}

/// Array response in raster order: entry `n` is
/// `exp(j·2π·d_R/λ·(i_1·u + i_2·v))` with `i_1 = n mod N_x`,
/// `i_2 = ⌊n / N_x⌋`.
pub fn steering_vector(cfg: &SystemConfig, u: f64, v: f64) -> Result<Vec<C64>> {
    if !(u.abs() <= 1.0 + 1e-12) || !(v.abs() <= 1.0 + 1e-12) {
        return Err(CoreError::Domain(format!(
            "direction cosines ({u}, {v}) outside [-1, 1]"
        )));
    }
    let nx = cfg.n_x();
    let k = 2.0 * std::f64::consts::PI * cfg.element_spacing / cfg.wavelength;
    Ok((0..cfg.n_t())
        .map(|n| {
            let (i1, i2) = ((n % nx) as f64, (n / nx) as f64);
            C64::from_polar(1.0, k * (i1 * u + i2 * v))
        })
        .collect())
}

pub fn path_loss(distance: f64, cfg: &SystemConfig) -> f64 {
    cfg.pathloss_ref * distance.powf(-cfg.pathloss_exp)
}

pub fn sample_users<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> UserSet {
    let r = &cfg.user_region;
    let draw = |rng: &mut R, lo: f64, hi: f64| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    let positions = (0..cfg.k_users)
        .map(|_| {
            let x = draw(rng, r.x_min, r.x_max);
            let y = draw(rng, r.y_min, r.y_max);
            [x, y, r.z]
        })
        .collect();
    UserSet { positions }
}

/// i.i.d. CN(0, 1) entries.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re * s, im * s)
    })
}

/// Deterministic LoS component (element order) and distances.
pub fn los_component(cfg: &SystemConfig, users: &UserSet) -> Result<(CMat, Vec<f64>)> {
    let n_t = cfg.n_t();
    let mut h_los = CMat::zeros(n_t, users.positions.len());
    let mut distances = Vec::with_capacity(users.positions.len());
    let raster: Vec<usize> = (0..n_t).map(|n| element_to_raster(cfg, n)).collect();
    for (k, &p) in users.positions.iter().enumerate() {
        let (u, v, d) = angles_from_positions(p, cfg.bs_position)?;
        let a = steering_vector(cfg, u, v)?;
        for n in 0..n_t {
            h_los[(n, k)] = a[raster[n]];
        }
        distances.push(d);
    }
    Ok((h_los, distances))
}

/// `h_k = √L_k (√(κ/(κ+1)) h_los + √(1/(κ+1)) h_nlos)`.
pub fn combine(cfg: &SystemConfig, h_los: &CMat, h_nlos: &CMat, distances: &[f64]) -> CMat {
    let kappa = cfg.rician_k;
    let (a, b) = ((kappa / (kappa + 1.0)).sqrt(), (1.0 / (kappa + 1.0)).sqrt());
    let mut h = CMat::zeros(h_los.nrows(), h_los.ncols());
    for k in 0..h_los.ncols() {
        let g = path_loss(distances[k], cfg).sqrt();
        for n in 0..h_los.nrows() {
            h[(n, k)] = (h_los[(n, k)] * a + h_nlos[(n, k)] * b) * g;
        }
    }
    h
}

pub fn rician_channel<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    users: &UserSet,
    rng: &mut R,
) -> Result<ChannelRealization> {
    let (h_los, distances) = los_component(cfg, users)?;
    let h_nlos = complex_gaussian(cfg.n_t(), users.positions.len(), rng);
    let h = combine(cfg, &h_los, &h_nlos, &distances);
    Ok(ChannelRealization {
        h,
        h_los,
        h_nlos,
        distances,
    })
}

/// One placement, `n_blocks` coherence blocks sharing the LoS part.
pub fn generate_episode<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    n_blocks: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_blocks == 0 {
        return Err(CoreError::Config(
            "an episode needs at least one block".into(),
        ));
    }
    let users = sample_users(cfg, rng);
    let (h_los, distances) = los_component(cfg, &users)?;
    let blocks = (0..n_blocks)
        .map(|_| {
            let h_nlos = complex_gaussian(cfg.n_t(), cfg.k_users, rng);
            ChannelRealization {
                h: combine(cfg, &h_los, &h_nlos, &distances),
                h_los: h_los.clone(),
                h_nlos,
                distances: distances.clone(),
            }
        })
        .collect();
    Ok(Episode { users, blocks })
}
