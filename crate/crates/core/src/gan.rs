//! Objectives, the four augmentation strategies, R1 and the training loop.
//!
//! With `f_D`/`f_G` from [`LossKind`] and a random augmentation `T`:
//!
//! | strategy             | `L_D` real term   | `L_D` fake term      | `L_G` argument |
//! |----------------------|-------------------|----------------------|----------------|
//! | `Baseline`           | `f_D(−D(x))`      | `f_D(D(G(z)))`       | `D(G(z))`      |
//! | `AugmentRealsOnly`   | `f_D(−D(T(x)))`   | `f_D(D(G(z)))`       | `D(G(z))`      |
//! | `AugmentDOnly`       | `f_D(−D(T(x)))`   | `f_D(D(T(G(z))))`    | `D(G(z))`      |
//! | `DiffAugment`        | `f_D(−D(T(x)))`   | `f_D(D(T(G(z))))`    | `D(T(G(z)))`   |
//!
//! and `L_G = E f_G(−arg)`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::augment::{self, AugmentError, AugmentationSample, Policy};
use crate::nn::{
    self, AdamConfig, AdamState, Checkpoint, CheckpointError, Critic, Discriminator, DiscriminatorConfig,
    EmaShadow, Generator, GeneratorConfig, NnError, RngState,
};
use crate::tensor::{no_grad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GanError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training halted on non-finite values\n{0}")]
    NonFinite(Box<Diagnostic>),
}

pub type Result<T, E = GanError> = std::result::Result<T, E>;

/// State captured when a run halts on NaN/inf.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub step: u64,
    pub phase: &'static str,
    pub loss_d: f32,
    pub loss_g: f32,
    pub r1: f32,
    pub detail: String,
    pub rngs: Vec<(String, RngState)>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "step: {}", self.step)?;
        writeln!(f, "phase: {}", self.phase)?;
        writeln!(f, "loss_d: {}", self.loss_d)?;
        writeln!(f, "loss_g: {}", self.loss_g)?;
        writeln!(f, "r1: {}", self.r1)?;
        writeln!(f, "detail: {}", self.detail)?;
        for (name, s) in &self.rngs {
            writeln!(f, "rng.{name}: stream={} word_pos={} seed={:02x?}", s.stream, s.word_pos, s.seed)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    NonSaturating,
    Hinge,
}

impl LossKind {
    /// Discriminator loss applied elementwise to its signed argument.
    pub fn f_d(self, t: &Tensor) -> Result<Tensor> {
        Ok(match self {
            LossKind::NonSaturating => t.softplus()?,
            LossKind::Hinge => t.add_scalar(1.0)?.maximum_scalar(0.0)?,
        })
    }

    pub fn f_g(self, t: &Tensor) -> Result<Tensor> {
        Ok(match self {
            LossKind::NonSaturating => t.softplus()?,
            LossKind::Hinge => t.clone(),
        })
    }
}

impl FromStr for LossKind {
    type Err = GanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "non_saturating" | "nonsaturating" | "ns" => Ok(LossKind::NonSaturating),
            "hinge" => Ok(LossKind::Hinge),
            other => Err(GanError::Config(format!(
                "unknown loss {other:?} (expected non_saturating or hinge)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::NonSaturating => "non_saturating",
            LossKind::Hinge => "hinge",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Strategy {
    #[default]
    Baseline,
    AugmentRealsOnly,
    AugmentDOnly,
    DiffAugment,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::AugmentRealsOnly,
        Strategy::AugmentDOnly,
        Strategy::DiffAugment,
    ];

    pub fn augments_reals(self) -> bool {
        self != Strategy::Baseline
    }

    pub fn augments_fakes_for_d(self) -> bool {
        matches!(self, Strategy::AugmentDOnly | Strategy::DiffAugment)
    }

    pub fn augments_fakes_for_g(self) -> bool {
        self == Strategy::DiffAugment
    }
}

impl FromStr for Strategy {
    type Err = GanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(Strategy::Baseline),
            "augment_reals_only" | "reals_only" => Ok(Strategy::AugmentRealsOnly),
            "augment_d_only" | "d_only" => Ok(Strategy::AugmentDOnly),
            "diffaugment" | "diff_augment" => Ok(Strategy::DiffAugment),
            other => Err(GanError::Config(format!(
                "unknown strategy {other:?} (expected baseline, augment_reals_only, augment_d_only or diffaugment)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Baseline => "baseline",
            Strategy::AugmentRealsOnly => "augment_reals_only",
            Strategy::AugmentDOnly => "augment_d_only",
            Strategy::DiffAugment => "diffaugment",
        })
    }
}

/// Draws `T` for a loss term, or reuses a realized draw when sharing.
fn augment_term(
    x: &Tensor,
    policy: &Policy,
    shared: Option<&[AugmentationSample]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<AugmentationSample>)> {
    match shared {
        Some(samples) if samples.first().is_none_or(|s| sample_batch(s) == x.shape()[0]) => {
            Ok((augment::replay(x, samples)?, samples.to_vec()))
        }
        _ => Ok(augment::apply_policy(x, policy, rng)?),
    }
}

fn sample_batch(s: &AugmentationSample) -> usize {
    match s {
        AugmentationSample::Translation { shifts } => shifts.len(),
        AugmentationSample::Cutout { corners, .. } => corners.len(),
        AugmentationSample::Brightness { factors }
        | AugmentationSample::Saturation { factors }
        | AugmentationSample::Contrast { factors } => factors.len(),
    }
}

/// Discriminator objective and the intermediate values callers reuse.
pub struct DLoss {
    pub loss: Tensor,
    /// What D saw as "real": `x` or `T(x)`.
    pub real_input: Tensor,
    pub real_samples: Vec<AugmentationSample>,
    pub real_logits: Tensor,
    pub fake_logits: Tensor,
}

/// `L_D` for `strategy`. `fakes` must already be detached from G.
/// With `shared_draw`, the fake term reuses the real term's realized `T`.
#[allow(clippy::too_many_arguments)]
pub fn d_loss(
    d: &dyn Critic,
    reals: &Tensor,
    fakes: &Tensor,
    strategy: Strategy,
    loss: LossKind,
    policy: &Policy,
    shared_draw: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DLoss> {
    if reals.shape() != fakes.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "d_loss",
            lhs: reals.shape().to_vec(),
            rhs: fakes.shape().to_vec(),
        }
        .into());
    }
    let (real_input, real_samples) = if strategy.augments_reals() {
        augment_term(reals, policy, None, rng)?
    } else {
        (reals.clone(), Vec::new())
    };
    let fake_input = if strategy.augments_fakes_for_d() {
        let shared = shared_draw.then_some(real_samples.as_slice());
        augment_term(fakes, policy, shared, rng)?.0
    } else {
        fakes.clone()
    };
    let real_logits = d.logits(&real_input)?;
    let fake_logits = d.logits(&fake_input)?;
    let loss_value = loss
        .f_d(&real_logits.neg()?)?
        .mean()?
        .add(&loss.f_d(&fake_logits)?.mean()?)?;
    Ok(DLoss {
        loss: loss_value,
        real_input,
        real_samples,
        real_logits,
        fake_logits,
    })
}

/// `L_G` for `strategy` given generated images still attached to G.
pub fn g_loss(
    d: &dyn Critic,
    fakes: &Tensor,
    strategy: Strategy,
    loss: LossKind,
    policy: &Policy,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let input = if strategy.augments_fakes_for_g() {
        augment::apply_policy(fakes, policy, rng)?.0
    } else {
        fakes.clone()
    };
    let logits = d.logits(&input)?;
    loss.f_g(&logits.neg()?)?.mean()
        .map_err(Into::into)
}

/// `(γ/2)·E‖∇D‖²` on real data.
///
/// `augmented` is the `T(x)` the discriminator saw and `samples` the draw
/// that produced it. With `on_augmented` the gradient is taken with
/// respect to `T(x)`; otherwise with respect to `x`, i.e. `J_Tᵀ ∇D(T(x))`.
pub fn r1_penalty(
    d: &dyn Critic,
    augmented: &Tensor,
    samples: &[AugmentationSample],
    on_augmented: bool,
    gamma: f32,
) -> Result<Tensor> {
    if gamma < 0.0 {
        return Err(GanError::Config(format!("r1_gamma must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    let point = augmented.detach();
    let mut grad = d.input_gradient(&point)?;
    if !on_augmented {
        grad = augment::replay_adjoint(&grad, samples)?;
    }
    let batch = grad.shape()[0] as f32;
    Ok(grad.square()?.sum()?.scale(gamma / (2.0 * batch))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub policy: Policy,
    pub d_steps_per_g: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub r1_gamma: f32,
    pub r1_on_augmented: bool,
    /// Reuse one realized `T` for the real and fake terms of `L_D`.
    pub shared_draw: bool,
    pub adam: AdamConfig,
    /// D learning rate; `adam.lr` when absent.
    pub lr_d: Option<f32>,
    pub ema_half_life_images: f64,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::DiffAugment,
            loss: LossKind::NonSaturating,
            policy: "color,translation,cutout".parse().expect("valid policy"),
            d_steps_per_g: 1,
            batch_size: 32,
            total_steps: 2000,
            eval_every: 250,
            r1_gamma: 0.1,
            r1_on_augmented: true,
            shared_draw: false,
            adam: AdamConfig::default(),
            lr_d: None,
            ema_half_life_images: 32.0 * 100.0,
            seed: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GanError::Config(msg));
        if !(self.r1_gamma >= 0.0) {
            return bad(format!("r1_gamma must be >= 0, got {}", self.r1_gamma));
        }
        if self.d_steps_per_g < 1 {
            return bad("d_steps_per_g must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        if self.generator.resolution != self.discriminator.resolution {
            return bad("generator and discriminator resolutions differ".into());
        }
        for lr in [Some(self.adam.lr), self.lr_d].into_iter().flatten() {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rate must be finite and >= 0, got {lr}"));
            }
        }
        if !(self.ema_half_life_images >= 0.0) {
            return bad("ema_half_life_images must be >= 0".into());
        }
        Ok(())
    }
}

/// Independent ChaCha8 streams fanned out from one master seed.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub latent: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub data: ChaCha8Rng,
}

pub const RNG_STREAM_NAMES: [&str; 4] = ["init", "latent", "augment", "data"];

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |id| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self {
            init: stream(1),
            latent: stream(2),
            augment: stream(3),
            data: stream(4),
        }
    }

    fn all(&self) -> [&ChaCha8Rng; 4] {
        [&self.init, &self.latent, &self.augment, &self.data]
    }

    pub fn states(&self) -> Vec<(String, RngState)> {
        RNG_STREAM_NAMES
            .iter()
            .zip(self.all())
            .map(|(n, r)| (n.to_string(), RngState::capture(r)))
            .collect()
    }
}

/// Standard-normal latent batch.
pub fn sample_latent(batch: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(data, &[batch, dim]).expect("shape matches data")
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub loss_d: f32,
    pub loss_g: f32,
    pub r1: f32,
}

pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub ema: EmaShadow,
    pub rngs: RngStreams,
    pub step: u64,
    pub last: StepLosses,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rngs = RngStreams::from_seed(config.seed);
        let generator = Generator::new(config.generator, &mut rngs.init)?;
        let discriminator = Discriminator::new(config.discriminator, &mut rngs.init)?;
        let opt_g = AdamState::new(&generator.parameters(), config.adam);
        let adam_d = AdamConfig {
            lr: config.lr_d.unwrap_or(config.adam.lr),
            ..config.adam
        };
        let opt_d = AdamState::new(&discriminator.parameters(), adam_d);
        let ema = EmaShadow::new(&generator.parameters(), config.ema_half_life_images);
        Ok(Self {
            generator,
            discriminator,
            opt_g,
            opt_d,
            ema,
            rngs,
            step: 0,
            last: StepLosses::default(),
        })
    }

    /// Generator carrying the EMA weights.
    pub fn ema_generator(&self) -> Result<Generator> {
        Ok(self.ema.generator(&self.generator)?)
    }

    fn halt(&self, phase: &'static str, detail: String, losses: StepLosses) -> GanError {
        GanError::NonFinite(Box::new(Diagnostic {
            step: self.step,
            phase,
            loss_d: losses.loss_d,
            loss_g: losses.loss_g,
            r1: losses.r1,
            detail,
            rngs: self.rngs.states(),
        }))
    }

    /// `d_steps_per_g` discriminator updates, one generator update, then
    /// the EMA update. `next_reals` supplies one real batch per call.
    pub fn train_step(
        &mut self,
        config: &TrainConfig,
        next_reals: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Tensor>,
    ) -> Result<StepLosses> {
        let latent_dim = config.generator.latent_dim;
        let d_params = self.discriminator.parameters();
        let g_params = self.generator.parameters();
        let mut losses = StepLosses {
            loss_g: self.last.loss_g,
            ..Default::default()
        };
        for _ in 0..config.d_steps_per_g {
            let reals = next_reals(&mut self.rngs.data)?;
            let batch = reals.shape()[0];
            let z = sample_latent(batch, latent_dim, &mut self.rngs.latent);
            let fakes = no_grad(|| self.generator.forward(&z))?;
            let parts = d_loss(
                &self.discriminator,
                &reals,
                &fakes,
                config.strategy,
                config.loss,
                &config.policy,
                config.shared_draw,
                &mut self.rngs.augment,
            )?;
            let r1 = r1_penalty(
                &self.discriminator,
                &parts.real_input,
                &parts.real_samples,
                config.r1_on_augmented,
                config.r1_gamma,
            )?;
            losses.loss_d = parts.loss.item();
            losses.r1 = r1.item();
            if !losses.loss_d.is_finite() || !losses.r1.is_finite() {
                return Err(self.halt("discriminator", "non-finite loss".into(), losses));
            }
            nn::zero_grads(&d_params);
            parts.loss.add(&r1)?.backward()?;
            if let Err(e) = self.opt_d.step(&d_params) {
                return Err(self.halt("discriminator", e.to_string(), losses));
            }
        }

        let z = sample_latent(config.batch_size, latent_dim, &mut self.rngs.latent);
        let fakes = self.generator.forward(&z)?;
        let lg = g_loss(
            &self.discriminator,
            &fakes,
            config.strategy,
            config.loss,
            &config.policy,
            &mut self.rngs.augment,
        )?;
        losses.loss_g = lg.item();
        if !losses.loss_g.is_finite() {
            return Err(self.halt("generator", "non-finite loss".into(), losses));
        }
        nn::zero_grads(&g_params);
        lg.backward()?;
        // The G pass also deposits gradients on D; they are never applied.
        nn::zero_grads(&d_params);
        if let Err(e) = self.opt_g.step(&g_params) {
            return Err(self.halt("generator", e.to_string(), losses));
        }
        self.ema.update(&g_params, config.batch_size);
        self.step += 1;
        self.last = losses;
        Ok(losses)
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut arrays = Vec::new();
        let mut push_params = |prefix: &str, params: &[nn::Param], opt: &AdamState| {
            for (i, p) in params.iter().enumerate() {
                let shape = p.tensor.shape().to_vec();
                arrays.push((format!("{prefix}param.{}", p.name), shape.clone(), p.tensor.to_vec()));
                arrays.push((format!("{prefix}adam_m.{}", p.name), shape.clone(), opt.m[i].clone()));
                arrays.push((format!("{prefix}adam_v.{}", p.name), shape, opt.v[i].clone()));
            }
        };
        let g_params = self.generator.parameters();
        push_params("", &g_params, &self.opt_g);
        push_params("", &self.discriminator.parameters(), &self.opt_d);
        for (p, v) in g_params.iter().zip(&self.ema.values) {
            arrays.push((format!("ema.{}", p.name), p.tensor.shape().to_vec(), v.clone()));
        }
        let g = config.generator;
        let d = config.discriminator;
        let meta = vec![
            ("latent_dim".to_string(), g.latent_dim.to_string()),
            ("g_channels".to_string(), g.base_channels.to_string()),
            ("d_channels".to_string(), d.base_channels.to_string()),
            ("resolution".to_string(), g.resolution.to_string()),
            ("adam_g_step".to_string(), self.opt_g.step.to_string()),
            ("adam_d_step".to_string(), self.opt_d.step.to_string()),
            ("ema_half_life_images".to_string(), self.ema.half_life_images.to_string()),
        ];
        Checkpoint {
            step: self.step,
            meta,
            rngs: self.rngs.states(),
            arrays,
        }
    }

    /// Rebuilds the full state. Architecture is read from the checkpoint;
    /// optimizer hyperparameters come from `config`.
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let (gcfg, dcfg) = architecture(ck)?;
        let parse = |key: &str| -> Result<f64> {
            ck.meta(key)?
                .parse::<f64>()
                .map_err(|e| GanError::Config(format!("checkpoint meta {key}: {e}")))
        };
        let cfg = TrainConfig {
            generator: gcfg,
            discriminator: dcfg,
            ema_half_life_images: parse("ema_half_life_images")?,
            ..config.clone()
        };
        let mut state = TrainState::new(&cfg)?;
        let load = |params: &[nn::Param], opt: &mut AdamState| -> Result<()> {
            let fetch = |kind: &str| -> Result<Vec<Vec<f32>>> {
                params
                    .iter()
                    .map(|p| Ok(ck.array(&format!("{kind}.{}", p.name))?.to_vec()))
                    .collect()
            };
            nn::load_values(params, &fetch("param")?)?;
            opt.m = fetch("adam_m")?;
            opt.v = fetch("adam_v")?;
            Ok(())
        };
        load(&state.generator.parameters(), &mut state.opt_g)?;
        load(&state.discriminator.parameters(), &mut state.opt_d)?;
        state.opt_g.step = parse("adam_g_step")? as u64;
        state.opt_d.step = parse("adam_d_step")? as u64;
        state.ema.values = state
            .generator
            .parameters()
            .iter()
            .map(|p| Ok(ck.array(&format!("ema.{}", p.name))?.to_vec()))
            .collect::<Result<_>>()?;
        state.rngs = RngStreams {
            init: ck.rng("init")?.restore(),
            latent: ck.rng("latent")?.restore(),
            augment: ck.rng("augment")?.restore(),
            data: ck.rng("data")?.restore(),
        };
        state.step = ck.step;
        Ok(state)
    }
}

/// Network shapes recorded in a checkpoint.
pub fn architecture(ck: &Checkpoint) -> Result<(GeneratorConfig, DiscriminatorConfig)> {
    let get = |key: &str| -> Result<usize> {
        ck.meta(key)?
            .parse::<usize>()
            .map_err(|e| GanError::Config(format!("checkpoint meta {key}: {e}")))
    };
    let resolution = get("resolution")?;
    Ok((
        GeneratorConfig {
            latent_dim: get("latent_dim")?,
            base_channels: get("g_channels")?,
            resolution,
        },
        DiscriminatorConfig {
            base_channels: get("d_channels")?,
            resolution,
        },
    ))
}

/// EMA generator stored in a checkpoint, without optimizer state.
pub fn ema_generator_from_checkpoint(ck: &Checkpoint) -> Result<Generator> {
    let (gcfg, _) = architecture(ck)?;
    let g = Generator::new(gcfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let values = g
        .parameters()
        .iter()
        .map(|p| Ok(ck.array(&format!("ema.{}", p.name))?.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    nn::load_values(&g.parameters(), &values)?;
    Ok(g)
}
