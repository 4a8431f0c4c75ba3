//! `rimsa`: dataset generation, training, evaluation and parameter sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, file or
//! format error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rimsa_core::config::dbm_to_mw;
use rimsa_core::controller::Model;
use rimsa_core::dataset::{self, Dataset};
use rimsa_core::eval::{evaluate, random_baseline, zf_reference, Metrics};
use rimsa_core::train::{metrics_csv, train, TrainingReport};
use rimsa_core::{Config, CoreError, Utility};
use serde_json::json;

const CHECKPOINT_FILE: &str = "checkpoint.rmck";
const METRICS_FILE: &str = "metrics.csv";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(
    name = "rimsa",
    version,
    about = "RIMSA beamforming simulator and learned controller"
)]
struct Cli {
    /// TOML configuration; the built-in desk configuration when absent.
    #[arg(long, global = true, env = "RIMSA_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 128)]
        val_samples: usize,
        #[arg(long, default_value_t = 128)]
        test_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a controller; writes the best checkpoint and per-epoch metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the configured utility.
        #[arg(long)]
        utility: Option<Utility>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print test-set metrics as JSON. Without a checkpoint only the
    /// random baseline and the perfect-CSI reference are reported.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Downlink power override in dBm.
        #[arg(long, allow_negative_numbers = true)]
        power_dbm: Option<f64>,
        /// Seed of the random baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate all methods across one experiment axis; writes CSV.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_hyphen_values = true
        )]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 128)]
        val_samples: usize,
        #[arg(long, default_value_t = 128)]
        test_samples: usize,
        /// Overrides the configured epoch count (not used on the epochs axis).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    /// Pilot length L.
    Pilot,
    /// Downlink power in dBm; one model, re-evaluated per power.
    Power,
    /// User count K with L = 15·K.
    Users,
    /// Decoder layer count.
    Layers,
    /// Training epochs.
    Epochs,
}

struct CliError {
    code: u8,
    message: String,
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::Config(_) => 1,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn usage(message: String) -> CliError {
    CliError { code: 1, message }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        None => Ok(Config::desk()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            Config::from_toml(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn load_dataset(path: &Path, cfg: &Config) -> CliResult<Dataset> {
    let ds = dataset::load(path).map_err(|e| match e {
        CoreError::Io(io) => io_error(path, io),
        other => CliError {
            code: 2,
            message: format!("{}: {other}", path.display()),
        },
    })?;
    ds.check_compatible(&cfg.system)?;
    Ok(ds)
}

/// Decorrelated seed for one sweep point.
fn point_seed(base: u64, value: f64) -> u64 {
    let mut z = base ^ value.to_bits().rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

fn cmd_gen_data(cfg: &Config, out: &Path, n: [usize; 3], seed: u64) -> CliResult<()> {
    let ds = dataset::generate(&cfg.system, n[0], n[1], n[2], seed)?;
    dataset::save(&ds, out).map_err(|e| match e {
        CoreError::Io(io) => io_error(out, io),
        other => other.into(),
    })?;
    let h = &ds.header;
    println!(
        "wrote {}: N_R={} N_t={} K={} L={} train={} val={} test={} seed={}",
        out.display(),
        h.n_r,
        h.n_t,
        h.k,
        h.l,
        h.n_train,
        h.n_val,
        h.n_test,
        h.seed
    );
    Ok(())
}

fn train_logged(
    cfg: &Config,
    ds: &Dataset,
    seed: u64,
    checkpoint: Option<&Path>,
) -> CliResult<(Model, TrainingReport)> {
    let mut model = Model::new(&cfg.system, &cfg.controller, seed)?;
    let report = train(&mut model, ds, &cfg.train, seed, checkpoint, |r| {
        eprintln!(
            "epoch {:>4}  loss {:>12.5}  val sum rate {:>8.4}  val max-min {:>8.4}",
            r.epoch, r.train_total, r.val_rate, r.val_maxmin
        );
    })?;
    eprintln!(
        "best epoch {} of {} (validation loss {:.6})",
        report.best_epoch,
        report.epochs.len(),
        report.best_val_loss
    );
    Ok((model, report))
}

fn cmd_train(
    mut cfg: Config,
    data: &Path,
    out_dir: &Path,
    utility: Option<Utility>,
    epochs: Option<usize>,
    seed: u64,
) -> CliResult<()> {
    if let Some(u) = utility {
        cfg.train.utility = u;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = load_dataset(data, &cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    let label = match cfg.train.utility {
        Utility::Sum => "sum",
        Utility::Maxmin => "maxmin",
    };
    eprintln!("validation utility: {label} (model selection on the {label} rate loss)");
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let (_, report) = train_logged(&cfg, &ds, seed, Some(&ckpt))?;
    let csv_path = out_dir.join(METRICS_FILE);
    fs::write(&csv_path, metrics_csv(&report.epochs)).map_err(|e| io_error(&csv_path, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| io_error(&cfg_path, e))?;
    println!(
        "wrote {}, {} and {}",
        ckpt.display(),
        csv_path.display(),
        cfg_path.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &Config,
    data: &Path,
    checkpoint: Option<&Path>,
    power_dbm: Option<f64>,
    seed: u64,
) -> CliResult<()> {
    let ds = load_dataset(data, cfg)?;
    let sys = &cfg.system;
    let p = power_dbm.map(dbm_to_mw).unwrap_or_else(|| sys.p_data_mw());
    let test = if ds.test().is_empty() {
        &ds.samples[..]
    } else {
        ds.test()
    };
    let random = random_baseline(test, sys, p, seed)?;
    let reference = zf_reference(test, sys, p)?;
    let mut out = json!({
        "samples": test.len(),
        "power_dbm": power_dbm.unwrap_or(sys.p_data_dbm),
        "random_baseline": &random,
        "zf_reference": &reference,
    });
    if let Some(path) = checkpoint {
        let mut model = Model::new(sys, &cfg.controller, 0)?;
        model.load(path).map_err(|e| CliError {
            code: 2,
            message: format!("{}: {e}", path.display()),
        })?;
        let m = evaluate(&model, test, sys, p)?;
        out["gain_over_random"] = json!(m.mean_sum_rate / random.mean_sum_rate - 1.0);
        out["fraction_of_reference"] = json!(m.mean_sum_rate / reference.mean_sum_rate);
        out["controller"] = json!(&m);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("metrics serialize")
    );
    Ok(())
}

fn csv_row(out: &mut String, value: f64, method: &str, m: &Metrics) {
    let _ = writeln!(
        out,
        "{value},{method},{},{}",
        fmt9(m.mean_sum_rate),
        fmt9(m.mean_maxmin)
    );
}

const SWEEP_HEADER: &str = "axis_value,method,mean_rate,mean_maxmin";

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    base: Config,
    axis: Axis,
    values: &[f64],
    out_path: &Path,
    n: [usize; 3],
    epochs: Option<usize>,
    seed: u64,
) -> CliResult<()> {
    if values.is_empty() {
        return Err(usage("sweep needs at least one axis value".into()));
    }
    let mut base = base;
    if let Some(e) = epochs {
        base.train.epochs = e;
    }
    let as_count = |v: f64| -> CliResult<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(usage(format!(
                "{axis:?} axis needs positive integers, got {v}"
            )))
        }
    };
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    // the power axis trains once and re-evaluates at every power
    let shared = if axis == Axis::Power {
        let ds = dataset::generate(&base.system, n[0], n[1], n[2], seed)?;
        let (model, _) = train_logged(&base, &ds, seed, None)?;
        Some((ds, model))
    } else {
        None
    };
    for &value in values {
        eprintln!("{axis:?} = {value}");
        let mut cfg = base.clone();
        match axis {
            Axis::Pilot => cfg.system.pilot_len = as_count(value)?,
            Axis::Users => {
                cfg.system.k_users = as_count(value)?;
                cfg.system.pilot_len = 15 * cfg.system.k_users;
            }
            Axis::Layers => cfg.controller.n_layers = as_count(value)?,
            Axis::Epochs => cfg.train.epochs = as_count(value)?,
            Axis::Power => cfg.system.p_data_dbm = value,
        }
        cfg.validate()
            .map_err(|e| usage(format!("{axis:?} = {value}: {e}")))?;
        let sys = &cfg.system;
        let p = sys.p_data_mw();
        let owned;
        let (ds, model, s) = match &shared {
            Some((ds, model)) => (ds, model, seed),
            None => {
                let s = point_seed(seed, value);
                let ds = dataset::generate(sys, n[0], n[1], n[2], s)?;
                let (model, _) = train_logged(&cfg, &ds, s, None)?;
                owned = (ds, model);
                (&owned.0, &owned.1, s)
            }
        };
        let test = ds.test();
        csv_row(
            &mut out,
            value,
            "controller",
            &evaluate(model, test, sys, p)?,
        );
        csv_row(
            &mut out,
            value,
            "random",
            &random_baseline(test, sys, p, s)?,
        );
        csv_row(
            &mut out,
            value,
            "zf_reference",
            &zf_reference(test, sys, p)?,
        );
    }
    fs::write(out_path, &out).map_err(|e| io_error(out_path, e))?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            out,
            samples,
            val_samples,
            test_samples,
            seed,
        } => cmd_gen_data(&cfg, &out, [samples, val_samples, test_samples], seed),
        Command::Train {
            data,
            out_dir,
            utility,
            epochs,
            seed,
        } => cmd_train(cfg, &data, &out_dir, utility, epochs, seed),
        Command::Eval {
            data,
            checkpoint,
            power_dbm,
            seed,
        } => cmd_eval(&cfg, &data, checkpoint.as_deref(), power_dbm, seed),
        Command::Sweep {
            axis,
            values,
            out,
            samples,
            val_samples,
            test_samples,
            epochs,
            seed,
        } => cmd_sweep(
            cfg,
            axis,
            &values,
            &out,
            [samples, val_samples, test_samples],
            epochs,
            seed,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
