//! Config-driven experiment runner: training with periodic evaluation,
//! CSV metrics, sample grids, checkpoints, sweeps and latent
//! interpolation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Policy;
use crate::data::{self, BatchIter, DataError, Dataset, SyntheticSpec};
use crate::gan::{self, GanError, LossKind, Strategy, TrainConfig, TrainState};
use crate::metrics::{self, FeatureExtractor, MetricsError, MetricsRecord};
use crate::nn::{AdamConfig, Checkpoint, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::tensor::{no_grad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// True when training stopped on NaN/inf.
    pub fn is_non_finite_halt(&self) -> bool {
        matches!(self, ExperimentError::Gan(GanError::NonFinite(_)))
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// Flat experiment configuration. Every field has a default; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: String,
    pub loss: String,
    pub policy: String,
    pub d_steps_per_g: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub r1_gamma: f32,
    pub r1_on_augmented: bool,
    pub shared_draw: bool,
    pub lr: f32,
    /// D learning rate; `lr` when absent.
    pub lr_d: Option<f32>,
    pub beta1: f32,
    pub beta2: f32,
    /// Defaults to `10·batch_size·eval_every` when absent.
    pub ema_half_life_images: Option<f64>,
    pub seed: u64,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub resolution: usize,
    /// `"synthetic"` or a path to a folder of images.
    pub dataset: String,
    pub synthetic_n: usize,
    pub synthetic_classes: usize,
    pub data_seed: u64,
    pub fraction: f64,
    pub flip: bool,
    /// Generated images per proxy-FID evaluation.
    pub eval_samples: usize,
    /// Generated images scored by the discriminator-accuracy streams.
    pub eval_fakes: usize,
    pub feature_seed: u64,
    pub out_dir: String,
    pub write_checkpoints: bool,
    /// `"base_channels"` or `"r1_gamma"`; empty for no sweep.
    pub sweep_axis: String,
    pub sweep_values: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: "diffaugment".into(),
            loss: "non_saturating".into(),
            policy: "color,translation,cutout".into(),
            d_steps_per_g: 1,
            batch_size: 32,
            total_steps: 2000,
            eval_every: 250,
            r1_gamma: 0.1,
            r1_on_augmented: true,
            shared_draw: false,
            lr: 2e-4,
            lr_d: None,
            beta1: 0.0,
            beta2: 0.999,
            ema_half_life_images: None,
            seed: 0,
            latent_dim: 64,
            base_channels: 16,
            resolution: 16,
            dataset: "synthetic".into(),
            synthetic_n: 500,
            synthetic_classes: 4,
            data_seed: 0,
            fraction: 1.0,
            flip: true,
            eval_samples: 500,
            eval_fakes: 256,
            feature_seed: 0,
            out_dir: "runs/default".into(),
            write_checkpoints: true,
            sweep_axis: String::new(),
            sweep_values: Vec::new(),
        }
    }
}

/// Parses one `--override` value: a TOML literal if it parses as one,
/// otherwise a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` and applies `key=value` overrides on top.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
            let key = k.trim();
            let mut value = parse_override_value(v.trim());
            // Integers given for float fields are accepted by serde only as floats.
            if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(key), &value) {
                value = toml::Value::Float(*i as f64);
            }
            table.insert(key.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy.parse().map_err(|e: GanError| config_err(format!("strategy: {e}")))
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        self.loss.parse().map_err(|e: GanError| config_err(format!("loss: {e}")))
    }

    pub fn parsed_policy(&self) -> Result<Policy> {
        self.policy.parse().map_err(|e| config_err(format!("policy: {e}")))
    }

    pub fn ema_half_life(&self) -> f64 {
        self.ema_half_life_images
            .unwrap_or((10 * self.batch_size) as f64 * self.eval_every as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy()?;
        self.loss_kind()?;
        self.parsed_policy()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(config_err(format!("fraction: must be in (0, 1], got {}", self.fraction)));
        }
        if self.eval_samples < metrics::MIN_FID_SAMPLES {
            return Err(config_err(format!(
                "eval_samples: need at least {} for proxy-FID, got {}",
                metrics::MIN_FID_SAMPLES,
                self.eval_samples
            )));
        }
        if self.eval_fakes == 0 {
            return Err(config_err("eval_fakes: must be positive"));
        }
        if self.dataset == "synthetic" && self.synthetic_n < 80 {
            return Err(config_err(format!("synthetic_n: need at least 80, got {}", self.synthetic_n)));
        }
        match self.sweep_axis.as_str() {
            "" => {}
            "base_channels" => {
                if self.sweep_values.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
                    return Err(config_err("sweep_values: base_channels must be positive integers"));
                }
            }
            "r1_gamma" => {
                if self.sweep_values.iter().any(|v| !(*v >= 0.0)) {
                    return Err(config_err("sweep_values: r1_gamma must be >= 0"));
                }
            }
            other => {
                return Err(config_err(format!(
                    "sweep_axis: unknown axis {other:?} (expected base_channels or r1_gamma)"
                )))
            }
        }
        self.train_config()?.validate().map_err(|e| config_err(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            strategy: self.strategy()?,
            loss: self.loss_kind()?,
            policy: self.parsed_policy()?,
            d_steps_per_g: self.d_steps_per_g,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            r1_gamma: self.r1_gamma,
            r1_on_augmented: self.r1_on_augmented,
            shared_draw: self.shared_draw,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                ..AdamConfig::default()
            },
            lr_d: self.lr_d,
            ema_half_life_images: self.ema_half_life(),
            seed: self.seed,
            generator: GeneratorConfig {
                latent_dim: self.latent_dim,
                base_channels: self.base_channels,
                resolution: self.resolution,
            },
            discriminator: DiscriminatorConfig {
                base_channels: self.base_channels,
                resolution: self.resolution,
            },
        })
    }

    /// Full dataset (before subsampling) named by the config.
    pub fn full_dataset(&self) -> Result<Dataset> {
        Ok(if self.dataset == "synthetic" {
            data::make_synthetic(SyntheticSpec {
                n: self.synthetic_n,
                resolution: self.resolution,
                seed: self.data_seed,
                classes: self.synthetic_classes,
            })?
        } else {
            data::load_folder(Path::new(&self.dataset), self.resolution, self.data_seed)?
        })
    }
}

/// Raises glibc's mmap and trim thresholds so the large, short-lived
/// buffers of convolution are recycled instead of being returned to the
/// kernel and page-faulted back in on every call.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tuning parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub best_proxy_fid: f64,
    pub best_step: u64,
    /// Detector score of the final EMA samples under the config's policy.
    pub final_artifact_score: f64,
    /// EMA generator samples from the last evaluation.
    pub final_samples: Tensor,
    pub csv: String,
}

impl RunResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("at least the step-0 record")
    }
}

const EVAL_STREAM: u64 = 100;
const CHUNK: usize = 64;
const GRID_SIDE: usize = 8;

/// Samples `z.shape[0]` images in chunks without recording a graph.
pub fn generate(g: &Generator, z: &Tensor) -> Result<Tensor> {
    let n = z.shape()[0];
    let mut parts = Vec::new();
    no_grad(|| -> Result<()> {
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            parts.push(g.forward(&z.slice(0, start, end)?).map_err(GanError::from)?);
            start = end;
        }
        Ok(())
    })?;
    Ok(Tensor::concat(&parts, 0)?)
}

struct Evaluator {
    extractor: FeatureExtractor,
    reference: (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>),
    z_fid: Tensor,
    train_reals: Tensor,
    val_reals: Tensor,
}

impl Evaluator {
    fn record(&self, state: &TrainState, cfg: &TrainConfig, n_fakes: usize) -> Result<(MetricsRecord, Tensor)> {
        let ema = state.ema_generator()?;
        let samples = generate(&ema, &self.z_fid)?;
        let fid = metrics::proxy_fid_to_stats(&self.reference, &samples, &self.extractor)?;
        let z_acc = self.z_fid.slice(0, 0, n_fakes.min(self.z_fid.shape()[0]))?;
        let fakes = generate(&state.generator, &z_acc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(EVAL_STREAM + 1);
        let acc = metrics::d_accuracies(
            &state.discriminator,
            &self.train_reals,
            &self.val_reals,
            &fakes,
            cfg.strategy,
            &cfg.policy,
            &mut rng,
        )?;
        let rec = MetricsRecord::from_parts(state.step, fid, acc, state.last.loss_d as f64, state.last.loss_g as f64);
        Ok((rec, samples))
    }
}

fn step_name(step: u64) -> String {
    format!("step_{step:08}")
}

/// Trains per `cfg`. With `out`, writes `metrics.csv`, `grids/`, `ckpt/`,
/// `config.toml` and `summary.txt` there; on a NaN halt writes
/// `diagnostic.txt` and returns the error.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    tune_allocator();
    let tcfg = cfg.train_config()?;
    let full = cfg.full_dataset()?;
    if full.val_indices.is_empty() {
        return Err(config_err("dataset: validation split is empty"));
    }
    let dataset = data::subsample(&full, cfg.fraction, cfg.data_seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("grids"))?;
        if cfg.write_checkpoints {
            fs::create_dir_all(dir.join("ckpt"))?;
        }
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
    }

    let extractor = FeatureExtractor::new(cfg.feature_seed);
    let reference = metrics::gaussian_stats(&extractor.features(&full.all())?);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(EVAL_STREAM);
    let evaluator = Evaluator {
        extractor,
        reference,
        z_fid: gan::sample_latent(cfg.eval_samples, cfg.latent_dim, &mut eval_rng),
        train_reals: dataset.train(),
        val_reals: dataset.val(),
    };

    let mut state = TrainState::new(&tcfg)?;
    let mut batches = BatchIter::new(cfg.batch_size, cfg.flip);
    let mut records = Vec::new();
    let mut csv = String::from(metrics::CSV_HEADER);
    csv.push('\n');
    let mut last_samples;

    let evaluate = |state: &TrainState, records: &mut Vec<MetricsRecord>, csv: &mut String| -> Result<Tensor> {
        let (rec, samples) = evaluator.record(state, &tcfg, cfg.eval_fakes)?;
        log::info!(
            "step {} proxy_fid {:.4} acc train/val/fake {:.2}/{:.2}/{:.2}",
            rec.step,
            rec.proxy_fid,
            rec.acc_train_real,
            rec.acc_val_real,
            rec.acc_fake
        );
        csv.push_str(&rec.csv_row());
        csv.push('\n');
        records.push(rec);
        if let Some(dir) = out {
            let n = samples.shape()[0].min(GRID_SIDE * GRID_SIDE);
            data::save_png(&samples.slice(0, 0, n)?, GRID_SIDE, &dir.join("grids").join(format!("{}.png", step_name(state.step))))?;
            if cfg.write_checkpoints {
                state
                    .to_checkpoint(&tcfg)
                    .save(&dir.join("ckpt").join(step_name(state.step)))
                    .map_err(GanError::from)?;
            }
            fs::write(dir.join("metrics.csv"), csv.as_bytes())?;
        }
        Ok(samples)
    };

    last_samples = Some(evaluate(&state, &mut records, &mut csv)?);
    while state.step < cfg.total_steps {
        let mut next = |rng: &mut ChaCha8Rng| -> gan::Result<Tensor> { Ok(batches.next_batch(&dataset, rng)) };
        if let Err(e) = state.train_step(&tcfg, &mut next) {
            if let (Some(dir), GanError::NonFinite(diag)) = (out, &e) {
                fs::write(dir.join("diagnostic.txt"), diag.to_string())?;
            }
            return Err(e.into());
        }
        if state.step % cfg.eval_every == 0 || state.step == cfg.total_steps {
            last_samples = Some(evaluate(&state, &mut records, &mut csv)?);
        }
    }

    let (best_step, best_proxy_fid) = records
        .iter()
        .map(|r| (r.step, r.proxy_fid))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let final_samples = last_samples.expect("evaluated at least once");
    let final_artifact_score = metrics::artifact_score(&final_samples, &tcfg.policy)?;
    let result = RunResult {
        records,
        best_proxy_fid,
        best_step,
        final_artifact_score,
        final_samples,
        csv,
    };
    if let Some(dir) = out {
        fs::write(dir.join("summary.txt"), summary_text(cfg, &result))?;
    }
    Ok(result)
}

fn summary_text(cfg: &ExperimentConfig, r: &RunResult) -> String {
    let last = r.last();
    let mut s = String::new();
    let _ = writeln!(s, "strategy = {}", cfg.strategy);
    let _ = writeln!(s, "policy = {}", cfg.policy);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "feature_seed = {}", cfg.feature_seed);
    let _ = writeln!(s, "best_proxy_fid = {}", r.best_proxy_fid);
    let _ = writeln!(s, "best_step = {}", r.best_step);
    let _ = writeln!(s, "final_step = {}", last.step);
    let _ = writeln!(s, "final_proxy_fid = {}", last.proxy_fid);
    let _ = writeln!(s, "final_acc_train_real = {}", last.acc_train_real);
    let _ = writeln!(s, "final_acc_val_real = {}", last.acc_val_real);
    let _ = writeln!(s, "final_artifact_score = {}", r.final_artifact_score);
    s
}

/// One config per sweep value, each with its own output subdirectory.
pub fn sweep_configs(cfg: &ExperimentConfig) -> Result<Vec<(f64, ExperimentConfig)>> {
    if cfg.sweep_axis.is_empty() || cfg.sweep_values.is_empty() {
        return Err(config_err("sweep_axis and sweep_values must be set for a sweep"));
    }
    cfg.sweep_values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match cfg.sweep_axis.as_str() {
                "base_channels" => c.base_channels = v as usize,
                "r1_gamma" => c.r1_gamma = v as f32,
                other => return Err(config_err(format!("sweep_axis: unknown axis {other:?}"))),
            }
            c.sweep_axis.clear();
            c.sweep_values.clear();
            c.out_dir = PathBuf::from(&cfg.out_dir)
                .join(format!("{}_{}", cfg.sweep_axis, v))
                .to_string_lossy()
                .into_owned();
            Ok((v, c))
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "axis_value,best_proxy_fid,best_step";

/// Runs every sweep value and returns the consolidated CSV rows. With
/// `out`, each run writes into `out/<axis>_<value>` and the summary goes to
/// `out/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(String, Vec<(f64, RunResult)>)> {
    cfg.validate()?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut results = Vec::new();
    for (v, c) in sweep_configs(cfg)? {
        let sub = out.map(|o| o.join(format!("{}_{}", cfg.sweep_axis, v)));
        let r = run(&c, sub.as_deref())?;
        let _ = writeln!(csv, "{},{},{}", v, r.best_proxy_fid, r.best_step);
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("sweep.csv"), csv.as_bytes())?;
        }
        results.push((v, r));
    }
    Ok((csv, results))
}

/// `steps` frames linearly interpolating from `z0` to `z1` (both endpoints
/// included), rendered by `g`.
pub fn interpolation_frames(g: &Generator, z0: &[f32], z1: &[f32], steps: usize) -> Result<Tensor> {
    if steps < 2 {
        return Err(config_err("interpolation needs at least 2 steps"));
    }
    let dim = g.config().latent_dim;
    if z0.len() != dim || z1.len() != dim {
        return Err(config_err(format!("latent vectors must have {dim} entries")));
    }
    let mut zs = Vec::with_capacity(steps * dim);
    for i in 0..steps {
        if i == steps - 1 {
            zs.extend_from_slice(z1);
            continue;
        }
        // Exact at t = 0 and constant when z0 = z1.
        let t = i as f32 / (steps - 1) as f32;
        zs.extend(z0.iter().zip(z1).map(|(a, b)| a + t * (b - a)));
    }
    generate(g, &Tensor::from_vec(zs, &[steps, dim])?)
}

/// Loads the EMA generator from `checkpoint`, draws `pairs` latent pairs
/// from `seed` and writes one horizontal strip per pair into `out`.
pub fn interpolate(checkpoint: &Path, pairs: usize, steps: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    tune_allocator();
    let ck = Checkpoint::load(checkpoint).map_err(GanError::from)?;
    let g = gan::ema_generator_from_checkpoint(&ck)?;
    let dim = g.config().latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for p in 0..pairs {
        let z = gan::sample_latent(2, dim, &mut rng).to_vec();
        let frames = interpolation_frames(&g, &z[..dim], &z[dim..], steps)?;
        let path = out.join(format!("interp_{p:03}.png"));
        data::save_png(&frames, steps, &path)?;
        written.push(path);
    }
    Ok(written)
}
