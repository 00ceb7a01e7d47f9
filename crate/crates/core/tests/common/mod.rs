//! Finite-difference gradient suite shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use diffaug::augment::{self, AugmentationSample, Policy};
use diffaug::gan::{self, LossKind, Strategy};
use diffaug::gradcheck;
use diffaug::nn::{Critic, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Param};
use diffaug::tensor::{no_grad, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-3;
pub const TOL: f64 = 2e-3;
pub const INSTANCES: u64 = 20;
/// Coordinates probed per input tensor.
const MAX_PROBES: usize = 48;
/// A kink inside `[x−ε, x+ε]` biases the central difference by half the
/// gap between the one-sided slopes, so skipping gaps above `2·TOL` keeps
/// piecewise-linear kinks from masquerading as gradient errors.
const KINK_TOL: f64 = 2.0 * TOL;

/// Worst error plus how many coordinates were compared or skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Outcome {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl Outcome {
    fn absorb(&mut self, r: &gradcheck::GradCheck) {
        self.worst = self.worst.max(r.max_rel_error);
        self.checked += r.checked;
        self.skipped += r.skipped;
    }

    fn merge(mut self, o: Outcome) -> Outcome {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.skipped += o.skipped;
        self
    }

    /// Passes when under `tol` with at least three quarters of the probes
    /// actually compared.
    pub fn passes(&self, tol: f64) -> bool {
        self.worst < tol && self.checked >= 3 * (self.checked + self.skipped) / 4
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max rel err {:.2e} ({} checked, {} skipped)", self.worst, self.checked, self.skipped)
    }
}

pub type Build = dyn Fn(&[Tensor]) -> diffaug::tensor::Result<Tensor>;

pub fn uniform(n: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn probes(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= MAX_PROBES {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, MAX_PROBES).into_vec();
        v.sort_unstable();
        v
    }
}

fn weighted_sum(out: &Tensor, weights: &[f32]) -> f64 {
    out.data().iter().zip(weights).map(|(&a, &w)| a as f64 * w as f64).sum()
}

/// Max relative error between the analytic gradient of `Σ r ⊙ build(inputs)`
/// (random fixed `r`) and central differences, over every input.
pub fn check_op(build: &Build, inputs: &[(Vec<f32>, Vec<usize>)], rng: &mut ChaCha8Rng) -> Outcome {
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| Tensor::parameter(d.clone(), s).unwrap())
        .collect();
    let out = build(&params).unwrap();
    let weights = uniform(out.numel(), -1.0, 1.0, rng);
    let r = Tensor::from_vec(weights.clone(), out.shape()).unwrap();
    out.mul(&r).unwrap().sum().unwrap().backward().unwrap();

    let mut outcome = Outcome::default();
    for (k, (data, _)) in inputs.iter().enumerate() {
        let analytic = params[k].grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let idx = probes(data.len(), rng);
        let f = |v: &[f32]| {
            let ts: Vec<Tensor> = inputs
                .iter()
                .enumerate()
                .map(|(j, (d, s))| Tensor::from_vec(if j == k { v.to_vec() } else { d.clone() }, s).unwrap())
                .collect();
            no_grad(|| weighted_sum(&build(&ts).unwrap(), &weights))
        };
        outcome.absorb(&gradcheck::check(f, data, &analytic, &idx, EPS, Some(KINK_TOL)));
    }
    outcome
}

pub struct OpCase {
    pub name: &'static str,
    /// Builds the input tensors for one random instance.
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<(Vec<f32>, Vec<usize>)>,
    pub build: Box<Build>,
}

fn img(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<usize>) {
    (uniform(b * c * h * w, -1.0, 1.0, rng), vec![b, c, h, w])
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> (Vec<f32>, Vec<usize>) {
    (uniform(r * c, -1.0, 1.0, rng), vec![r, c])
}

fn case(name: &'static str, inputs: fn(&mut ChaCha8Rng) -> Vec<(Vec<f32>, Vec<usize>)>, build: impl Fn(&[Tensor]) -> diffaug::tensor::Result<Tensor> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// One case per tensor operation (and per broadcasting/stride variant).
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", |r| vec![mat(r, 3, 4), mat(r, 3, 4)], |t| t[0].add(&t[1])),
        case("add_batch_broadcast", |r| vec![img(r, 2, 2, 3, 3), img(r, 1, 2, 3, 3)], |t| {
            t[0].add(&t[1].reshape(&[2, 3, 3])?)
        }),
        case("add_scalar_broadcast", |r| vec![mat(r, 3, 4), (uniform(1, -1.0, 1.0, r), vec![1])], |t| t[0].add(&t[1])),
        case("sub", |r| vec![mat(r, 3, 4), mat(r, 3, 4)], |t| t[0].sub(&t[1])),
        case("mul", |r| vec![mat(r, 3, 4), mat(r, 3, 4)], |t| t[0].mul(&t[1])),
        case("mul_batch_broadcast", |r| vec![img(r, 3, 2, 2, 2), (uniform(8, -1.0, 1.0, r), vec![2, 2, 2])], |t| {
            t[0].mul(&t[1])
        }),
        case("scale", |r| vec![mat(r, 3, 4)], |t| t[0].scale(-1.7)),
        case("neg", |r| vec![mat(r, 3, 4)], |t| t[0].neg()),
        case("add_scalar", |r| vec![mat(r, 3, 4)], |t| t[0].add_scalar(0.3)),
        case("leaky_relu", |r| vec![mat(r, 4, 5)], |t| t[0].leaky_relu(0.2)),
        case("tanh", |r| vec![mat(r, 4, 5)], |t| t[0].tanh()),
        case("sigmoid", |r| vec![mat(r, 4, 5)], |t| t[0].sigmoid()),
        case("log", |r| vec![(uniform(12, 0.5, 2.0, r), vec![3, 4])], |t| t[0].log()),
        case("exp", |r| vec![mat(r, 3, 4)], |t| t[0].exp()),
        case("square", |r| vec![mat(r, 3, 4)], |t| t[0].square()),
        case("softplus", |r| vec![(uniform(12, -4.0, 4.0, r), vec![3, 4])], |t| t[0].softplus()),
        case("maximum_scalar", |r| vec![mat(r, 4, 5)], |t| t[0].maximum_scalar(0.1)),
        case("reshape", |r| vec![mat(r, 3, 4)], |t| t[0].reshape(&[2, 6])?.square()),
        case("matmul", |r| vec![mat(r, 3, 4), mat(r, 4, 2)], |t| t[0].matmul(&t[1])),
        case("transpose", |r| vec![mat(r, 3, 4)], |t| t[0].transpose()?.square()),
        case("sum", |r| vec![mat(r, 3, 4)], |t| t[0].square()?.sum()),
        case("mean", |r| vec![mat(r, 3, 4)], |t| t[0].square()?.mean()),
        case("sum_axis", |r| vec![img(r, 2, 3, 2, 2)], |t| t[0].square()?.sum_axis(1)),
        case("mean_axis", |r| vec![img(r, 2, 3, 2, 2)], |t| t[0].square()?.mean_axis(2)),
        case("concat", |r| vec![img(r, 1, 2, 3, 3), img(r, 2, 2, 3, 3)], |t| {
            Tensor::concat(&[t[0].clone(), t[1].clone()], 0)?.square()
        }),
        case("slice", |r| vec![img(r, 2, 4, 3, 3)], |t| t[0].slice(1, 1, 3)?.square()),
        case("pad_zero", |r| vec![img(r, 2, 2, 3, 3)], |t| t[0].pad_zero((1, 2, 0, 1))?.square()),
        case("upsample_nearest2x", |r| vec![img(r, 2, 2, 3, 3)], |t| t[0].upsample_nearest2x()?.square()),
        case("conv2d_stride1", |r| vec![img(r, 2, 2, 5, 5), img(r, 3, 2, 3, 3), (uniform(3, -1.0, 1.0, r), vec![3])], |t| {
            t[0].conv2d(&t[1], Some(&t[2]), 1, 1)
        }),
        case("conv2d_stride2", |r| vec![img(r, 2, 2, 6, 6), img(r, 3, 2, 3, 3)], |t| t[0].conv2d(&t[1], None, 2, 1)),
        case("conv_transpose2d", |r| vec![img(r, 2, 3, 3, 3), img(r, 3, 2, 3, 3)], |t| {
            t[0].conv_transpose2d(&t[1], 2, 1, (6, 6))
        }),
        case("translate", |r| vec![img(r, 3, 2, 4, 4)], |t| t[0].translate(&[(1, 0), (-2, 1), (0, -1)])),
        case("cutout", |r| vec![img(r, 3, 2, 4, 4)], |t| t[0].cutout(&[(0, 0), (-1, 2), (3, 1)], 2)),
        case("brightness", |r| vec![img(r, 2, 3, 3, 3)], |t| t[0].brightness(&[0.3, -0.2])?.square()),
        case("contrast", |r| vec![img(r, 2, 3, 3, 3)], |t| t[0].contrast(&[0.6, 1.4])?.square()),
        case("saturation", |r| vec![img(r, 2, 3, 3, 3)], |t| t[0].saturation(&[0.2, 1.8])?.square()),
    ]
}

/// `(name, worst error over instances)` for every op.
pub fn op_suite() -> Vec<(&'static str, Outcome)> {
    op_cases()
        .iter()
        .map(|c| {
            let worst = (0..INSTANCES)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let inputs = (c.inputs)(&mut rng);
                    check_op(&*c.build, &inputs, &mut rng)
                })
                .fold(Outcome::default(), Outcome::merge);
            (c.name, worst)
        })
        .collect()
}

/// Worst error of the gradient through a realized augmentation chain,
/// `x ↦ Σ r ⊙ T(x)` squared, over random images and draws.
pub fn augment_chain_error(policy: &str) -> Outcome {
    let policy: Policy = policy.parse().unwrap();
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = img(&mut rng, 2, 3, 8, 8);
            let probe = Tensor::from_vec(x.0.clone(), &x.1).unwrap();
            let samples: Vec<AugmentationSample> = augment::apply_policy(&probe, &policy, &mut rng).unwrap().1;
            let build = move |t: &[Tensor]| -> diffaug::tensor::Result<Tensor> {
                Ok(augment::replay(&t[0], &samples).expect("replay").square()?)
            };
            check_op(&build, &[x], &mut rng)
        })
        .fold(Outcome::default(), Outcome::merge)
}

pub fn small_discriminator(seed: u64) -> Discriminator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Discriminator::new(
        DiscriminatorConfig {
            base_channels: 4,
            resolution: 16,
        },
        &mut rng,
    )
    .unwrap()
}

pub fn small_generator(seed: u64) -> Generator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Generator::new(
        GeneratorConfig {
            latent_dim: 8,
            base_channels: 4,
            resolution: 16,
        },
        &mut rng,
    )
    .unwrap()
}

/// Redraws weights at fan-in variance and biases in ±0.1 so pre-activations
/// are O(1) and few leaky-ReLU kinks sit within `EPS` of a unit.
pub fn reinit(params: &[Param], gain: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        let shape = p.tensor.shape().to_vec();
        let n = p.tensor.numel();
        let v = if shape.len() == 1 {
            uniform(n, -0.1, 0.1, &mut rng)
        } else {
            let fan_in = if shape.len() == 4 { n / shape[0] } else { shape[0] };
            let bound = gain * (3.0 / fan_in as f32).sqrt();
            uniform(n, -bound, bound, &mut rng)
        };
        p.tensor.set_data(&v);
    }
}

/// Discriminator input gradient (the quantity R1 penalizes) against central
/// differences of `Σ D(x)` in `x`.
pub fn d_input_gradient_error() -> Outcome {
    (0..INSTANCES)
        .map(|seed| {
            let d = small_discriminator(seed);
            reinit(&d.parameters(), 1.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let (x, shape) = img(&mut rng, 2, 3, 16, 16);
            let xt = Tensor::from_vec(x.clone(), &shape).unwrap();
            let analytic = no_grad(|| d.input_gradient(&xt).unwrap().to_vec());
            let f = |v: &[f32]| {
                let t = Tensor::from_vec(v.to_vec(), &shape).unwrap();
                no_grad(|| d.logits(&t).unwrap().to_vec().iter().map(|&a| a as f64).sum())
            };
            let idx = probes(x.len(), &mut rng);
            let mut o = Outcome::default();
            o.absorb(&gradcheck::check(f, &x, &analytic, &idx, EPS, Some(KINK_TOL)));
            o
        })
        .fold(Outcome::default(), Outcome::merge)
}

/// Gradient of `loss()` with respect to every parameter in `params`,
/// checked by perturbing parameter values in place.
pub fn param_gradient_error(params: &[Param], loss: &dyn Fn() -> Tensor, rng: &mut ChaCha8Rng) -> Outcome {
    for p in params {
        p.tensor.zero_grad();
    }
    loss().backward().unwrap();
    let mut outcome = Outcome::default();
    for p in params {
        let data = p.tensor.to_vec();
        let analytic = p.tensor.grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let idx = probes(data.len(), rng);
        let f = |v: &[f32]| {
            p.tensor.set_data(v);
            let value = no_grad(|| loss().item() as f64);
            p.tensor.set_data(&data);
            value
        };
        outcome.absorb(&gradcheck::check(f, &data, &analytic, &idx, EPS, Some(KINK_TOL)));
    }
    outcome
}

/// End-to-end `L_G` under DiffAugment with respect to the generator's
/// parameters; the augmentation draw is fixed by cloning the rng.
pub fn g_loss_diffaugment_error() -> Outcome {
    let policy: Policy = "color,translation,cutout".parse().unwrap();
    (0..INSTANCES)
        .map(|seed| {
            let g = small_generator(seed);
            reinit(&g.parameters(), 1.0, 500 + seed);
            let d = small_discriminator(100 + seed);
            reinit(&d.parameters(), 1.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let z = gan::sample_latent(2, 8, &mut rng);
            let draw = rng.clone();
            let loss = || {
                let fakes = g.forward(&z).unwrap();
                gan::g_loss(&d, &fakes, Strategy::DiffAugment, LossKind::NonSaturating, &policy, &mut draw.clone()).unwrap()
            };
            param_gradient_error(&g.parameters(), &loss, &mut rng)
        })
        .fold(Outcome::default(), Outcome::merge)
}

/// R1 penalty with respect to the discriminator's parameters, on augmented
/// reals, with the gradient taken at `T(x)` or pulled back to `x`.
pub fn r1_gradient_error(on_augmented: bool) -> Outcome {
    let policy: Policy = "color,translation,cutout".parse().unwrap();
    (0..INSTANCES)
        .map(|seed| {
            let d = small_discriminator(200 + seed);
            reinit(&d.parameters(), 1.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
            let (x, shape) = img(&mut rng, 2, 3, 16, 16);
            let x = Tensor::from_vec(x, &shape).unwrap();
            let (tx, samples) = augment::apply_policy(&x, &policy, &mut rng).unwrap();
            let loss = || gan::r1_penalty(&d, &tx, &samples, on_augmented, 10.0).unwrap();
            param_gradient_error(&d.parameters(), &loss, &mut rng)
        })
        .fold(Outcome::default(), Outcome::merge)
}
