use diffaug::augment::{self, AugmentKind, AugmentationSample, Policy};
use diffaug::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const B: usize = 3;
const C: usize = 3;
const R: usize = 8;
const N: usize = B * C * R * R;

fn tensor(v: &[f32]) -> Tensor {
    Tensor::from_vec(v.to_vec(), &[B, C, R, R]).unwrap()
}

fn images() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, N)
}

fn shifts() -> impl Strategy<Value = Vec<(i32, i32)>> {
    let m = augment::max_shift(R);
    prop::collection::vec((-m..=m, -m..=m), B)
}

fn corners() -> impl Strategy<Value = Vec<(i32, i32)>> {
    let half = (augment::cutout_side(R) / 2) as i32;
    prop::collection::vec((-half..R as i32 - half, -half..R as i32 - half), B)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Every linear sample kind, drawn from `seed`.
fn linear_samples(seed: u64) -> Vec<AugmentationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [AugmentKind::Translation, AugmentKind::Cutout, AugmentKind::Contrast, AugmentKind::Saturation]
        .into_iter()
        .map(|k| AugmentationSample::draw(k, B, R, R, &mut rng))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_shift_is_bit_exact(x in images()) {
        let out = augment::translate(&tensor(&x), &[(0, 0); B]).unwrap();
        prop_assert_eq!(out.to_vec(), x);
    }

    #[test]
    fn cutout_outside_image_is_bit_exact(x in images()) {
        let side = augment::cutout_side(R);
        let corners = [(-(side as i32), 0), (R as i32, 2), (1, R as i32)];
        let out = augment::cutout(&tensor(&x), &corners, side).unwrap();
        prop_assert_eq!(out.to_vec(), x);
    }

    #[test]
    fn neutral_color_factors_are_bit_exact(x in images()) {
        let t = tensor(&x);
        prop_assert_eq!(augment::brightness(&t, &[0.0; B]).unwrap().to_vec(), x.clone());
        prop_assert_eq!(augment::contrast(&t, &[1.0; B]).unwrap().to_vec(), x.clone());
        prop_assert_eq!(augment::saturation(&t, &[1.0; B]).unwrap().to_vec(), x);
    }

    #[test]
    fn translation_superposition(x in images(), y in images(), a in -2.0f32..2.0, b in -2.0f32..2.0, s in shifts()) {
        let mix: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = augment::translate(&tensor(&mix), &s).unwrap().to_vec();
        let tx = augment::translate(&tensor(&x), &s).unwrap().to_vec();
        let ty = augment::translate(&tensor(&y), &s).unwrap().to_vec();
        for i in 0..N {
            // Translation only moves values, so both sides round identically.
            prop_assert_eq!(lhs[i], a * tx[i] + b * ty[i]);
        }
    }

    #[test]
    fn cutout_superposition(x in images(), y in images(), a in -2.0f32..2.0, b in -2.0f32..2.0, c in corners()) {
        let side = augment::cutout_side(R);
        let mix: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = augment::cutout(&tensor(&mix), &c, side).unwrap().to_vec();
        let tx = augment::cutout(&tensor(&x), &c, side).unwrap().to_vec();
        let ty = augment::cutout(&tensor(&y), &c, side).unwrap().to_vec();
        for i in 0..N {
            prop_assert_eq!(lhs[i], a * tx[i] + b * ty[i]);
        }
    }

    #[test]
    fn adjoint_inner_product_identity(x in images(), y in images(), seed in any::<u64>()) {
        for s in linear_samples(seed) {
            let tx = s.apply(&tensor(&x)).unwrap().to_vec();
            let ty = s.apply_adjoint(&tensor(&y)).unwrap().to_vec();
            let lhs = dot(&tx, &y);
            let rhs = dot(&x, &ty);
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
            prop_assert!(rel < 1e-4, "{:?}: {} vs {}", s.kind(), lhs, rhs);
        }
    }

    #[test]
    fn chain_adjoint_inner_product_identity(x in images(), y in images(), seed in any::<u64>()) {
        let samples = linear_samples(seed);
        let tx = augment::replay(&tensor(&x), &samples).unwrap().to_vec();
        let ty = augment::replay_adjoint(&tensor(&y), &samples).unwrap().to_vec();
        let (lhs, rhs) = (dot(&tx, &y), dot(&x, &ty));
        prop_assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0) < 1e-4);
    }

    #[test]
    fn replay_reproduces_policy_output_bit_exactly(x in images(), seed in any::<u64>()) {
        let policy: Policy = "color,translation,cutout".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, samples) = augment::apply_policy(&tensor(&x), &policy, &mut rng).unwrap();
        prop_assert_eq!(augment::replay(&tensor(&x), &samples).unwrap().to_vec(), out.to_vec());
    }

    #[test]
    fn same_seed_same_draw(x in images(), seed in any::<u64>()) {
        let policy: Policy = "color,translation,cutout".parse().unwrap();
        let a = augment::apply_policy(&tensor(&x), &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment::apply_policy(&tensor(&x), &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.0.to_vec(), b.0.to_vec());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn draws_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy: Policy = "color,translation,cutout".parse().unwrap();
        let (_, samples) = augment::apply_policy(&Tensor::zeros(&[B, C, R, R]), &policy, &mut rng).unwrap();
        let m = augment::max_shift(R);
        let side = augment::cutout_side(R) as i32;
        for s in samples {
            match s {
                AugmentationSample::Translation { shifts } => {
                    prop_assert!(shifts.iter().all(|&(dx, dy)| dx.abs() <= m && dy.abs() <= m));
                }
                AugmentationSample::Cutout { corners, side: sd } => {
                    prop_assert_eq!(sd as i32, side);
                    prop_assert!(corners.iter().all(|&(t, l)| (-side / 2..R as i32 - side / 2).contains(&t)
                        && (-side / 2..R as i32 - side / 2).contains(&l)));
                }
                AugmentationSample::Brightness { factors } => {
                    prop_assert!(factors.iter().all(|f| (-0.5..0.5).contains(f)));
                }
                AugmentationSample::Contrast { factors } => {
                    prop_assert!(factors.iter().all(|f| (0.5..1.5).contains(f)));
                }
                AugmentationSample::Saturation { factors } => {
                    prop_assert!(factors.iter().all(|f| (0.0..2.0).contains(f)));
                }
            }
        }
    }

    #[test]
    fn augmentations_pass_gradients_through(x in images(), seed in any::<u64>()) {
        let policy: Policy = "color,translation,cutout".parse().unwrap();
        let p = Tensor::parameter(x, &[B, C, R, R]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, _) = augment::apply_policy(&p, &policy, &mut rng).unwrap();
        prop_assert!(out.graph_contains_augmentation());
        out.sum().unwrap().backward().unwrap();
        prop_assert!(p.grad().is_some());
    }
}

#[test]
fn contrast_of_two_doubles_a_zero_mean_image() {
    // Outside the sampling range, so this goes through the raw tensor op.
    let x = Tensor::from_vec(vec![-0.5, 0.5, 0.25, -0.25], &[1, 1, 2, 2]).unwrap();
    assert_eq!(x.contrast(&[2.0]).unwrap().to_vec(), vec![-1.0, 1.0, 0.5, -0.5]);
}

#[test]
fn one_pixel_right_shift_of_two_by_two() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
    assert_eq!(augment::translate(&x, &[(1, 0)]).unwrap().to_vec(), vec![0.0, 1.0, 0.0, 3.0]);
}
