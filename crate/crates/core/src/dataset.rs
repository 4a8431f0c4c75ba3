//! Pilot/channel datasets and their binary file format.
//!
//! Layout (little-endian): magic `RMDS`, `u32` version, `u32` N_R, N_t,
//! K and L, `u64` train/val/test counts, `u64` seed, `f64` uplink noise
//! variance, N_t `f64` pilot phases, the `K × L` pilot matrix as `[2, K, L]`
//! reals, then per sample Y as `[2, N_R, L]`, H as `[2, N_t, K]` and the
//! K user positions as `[K, 3]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::SystemConfig;
use crate::controller::{pack_complex, unpack_complex};
use crate::error::{CoreError, Result};
use crate::geometry::{rician_channel, sample_users, CMat};
use crate::rimsa::{build_v, dft_pilots, receive_pilots, PhaseConfig};
use crate::rng::{stream, Stream};

const MAGIC: &[u8; 4] = b"RMDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub n_r: usize,
    pub n_t: usize,
    pub k: usize,
    pub l: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub noise_var: f64,
    /// Element phases used while pilots are received.
    pub pilot_phases: Vec<f64>,
    /// `K × L` pilot matrix.
    pub pilots: CMat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Received pilots in `[2, N_R, L]` layout.
    pub y: Vec<f64>,
    /// True channel, `N_t × K`.
    pub h: CMat,
    pub positions: Vec<[f64; 3]>,
}

/// Samples are stored train first, then validation, then test.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.header.n_train]
    }

    pub fn val(&self) -> &[Sample] {
        let h = &self.header;
        &self.samples[h.n_train..h.n_train + h.n_val]
    }

    pub fn test(&self) -> &[Sample] {
        let h = &self.header;
        &self.samples[h.n_train + h.n_val..]
    }

    /// Error unless the dataset dimensions match `sys`.
    pub fn check_compatible(&self, sys: &SystemConfig) -> Result<()> {
        let h = &self.header;
        let want = (sys.n_r(), sys.n_t(), sys.k_users, sys.pilot_len);
        if (h.n_r, h.n_t, h.k, h.l) != want {
            return Err(CoreError::Dataset(format!(
                "dataset has (N_R, N_t, K, L) = {:?}, config expects {want:?}",
                (h.n_r, h.n_t, h.k, h.l)
            )));
        }
        Ok(())
    }
}

/// Sample `index` of a dataset with the given seed and pilot setup.
fn generate_sample(
    sys: &SystemConfig,
    seed: u64,
    index: u64,
    pilot_phases: &PhaseConfig,
    pilots: &CMat,
) -> Result<Sample> {
    let users = sample_users(sys, &mut stream(seed, Stream::Users, index));
    let channel = rician_channel(sys, &users, &mut stream(seed, Stream::Nlos, index))?;
    let v = build_v(pilot_phases, sys)?;
    let block = receive_pilots(
        &v,
        &channel.h,
        pilots,
        sys.noise_ul_mw(),
        &mut stream(seed, Stream::Noise, index),
    )?;
    Ok(Sample {
        y: pack_complex(&block.y, 1.0),
        h: channel.h,
        positions: users.positions,
    })
}

/// Draw `n_train + n_val + n_test` independent samples. Sample `i` uses
/// stream index `i` of the user, NLoS and noise streams, so any sample can
/// be regenerated on its own.
pub fn generate(
    sys: &SystemConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    sys.validate()?;
    let total = n_train + n_val + n_test;
    if total == 0 {
        return Err(CoreError::Dataset(
            "a dataset needs at least one sample".into(),
        ));
    }
    let pilot_phases = PhaseConfig::random(sys.n_t(), &mut stream(seed, Stream::PilotPhase, 0));
    let pilots = dft_pilots(sys)?;
    let samples = (0..total as u64)
        .map(|i| generate_sample(sys, seed, i, &pilot_phases, &pilots))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            n_r: sys.n_r(),
            n_t: sys.n_t(),
            k: sys.k_users,
            l: sys.pilot_len,
            n_train,
            n_val,
            n_test,
            seed,
            noise_var: sys.noise_ul_mw(),
            pilot_phases: pilot_phases.alpha().to_vec(),
            pilots,
        },
        samples,
    })
}

/// Recompute sample `index`'s pilots from its stored channel, the stored
/// pilot setup and the noise stream.
pub fn replay(ds: &Dataset, sys: &SystemConfig, index: usize) -> Result<Vec<f64>> {
    ds.check_compatible(sys)?;
    let h = &ds.header;
    let sample = ds
        .samples
        .get(index)
        .ok_or_else(|| CoreError::Dataset(format!("no sample {index}")))?;
    let v = build_v(&PhaseConfig::new(h.pilot_phases.clone()), sys)?;
    let block = receive_pilots(
        &v,
        &sample.h,
        &h.pilots,
        h.noise_var,
        &mut stream(h.seed, Stream::Noise, index as u64),
    )?;
    Ok(pack_complex(&block.y, 1.0))
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    v.iter().try_for_each(|&x| w.write_f64::<LittleEndian>(x))
}

pub fn write<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let h = &ds.header;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for d in [h.n_r, h.n_t, h.k, h.l] {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for c in [h.n_train, h.n_val, h.n_test] {
        w.write_u64::<LittleEndian>(c as u64)?;
    }
    w.write_u64::<LittleEndian>(h.seed)?;
    w.write_f64::<LittleEndian>(h.noise_var)?;
    write_f64s(&mut w, &h.pilot_phases)?;
    write_f64s(&mut w, &pack_complex(&h.pilots, 1.0))?;
    for s in &ds.samples {
        write_f64s(&mut w, &s.y)?;
        write_f64s(&mut w, &pack_complex(&s.h, 1.0))?;
        for p in &s.positions {
            write_f64s(&mut w, p)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut v)
        .map_err(|_| CoreError::Dataset("truncated dataset".into()))?;
    Ok(v)
}

pub fn read<R: Read>(mut r: R) -> Result<Dataset> {
    let trunc = |_| CoreError::Dataset("truncated dataset header".into());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(CoreError::Dataset("not a dataset file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != VERSION {
        return Err(CoreError::Dataset(format!(
            "unsupported dataset version {version}"
        )));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    }
    let [n_r, n_t, k, l] = dims;
    let mut counts = [0usize; 3];
    for c in &mut counts {
        *c = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    }
    let [n_train, n_val, n_test] = counts;
    let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
    let noise_var = r.read_f64::<LittleEndian>().map_err(trunc)?;
    if n_r == 0 || n_t == 0 || k == 0 || l == 0 || n_t % n_r != 0 {
        return Err(CoreError::Dataset(format!(
            "inconsistent dimensions N_R={n_r} N_t={n_t} K={k} L={l}"
        )));
    }
    let pilot_phases = read_f64s(&mut r, n_t)?;
    let pilots = unpack_complex(&read_f64s(&mut r, 2 * k * l)?, k, l, 1.0);
    let total = n_train + n_val + n_test;
    let mut samples = Vec::with_capacity(total.min(1 << 20));
    for _ in 0..total {
        let y = read_f64s(&mut r, 2 * n_r * l)?;
        let h = unpack_complex(&read_f64s(&mut r, 2 * n_t * k)?, n_t, k, 1.0);
        let positions = read_f64s(&mut r, 3 * k)?
            .chunks(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        samples.push(Sample { y, h, positions });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CoreError::Dataset(
            "trailing bytes after the last sample".into(),
        ));
    }
    Ok(Dataset {
        header: DatasetHeader {
            n_r,
            n_t,
            k,
            l,
            n_train,
            n_val,
            n_test,
            seed,
            noise_var,
            pilot_phases,
            pilots,
        },
        samples,
    })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    write(ds, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<Dataset> {
    read(BufReader::new(File::open(path)?))
}
