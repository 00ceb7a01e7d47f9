use std::collections::HashSet;

use diffaug::augment::Policy;
use diffaug::data::{self, BatchIter, Dataset, SyntheticSpec};
use diffaug::metrics::{self, FeatureExtractor, MetricsRecord};
use diffaug::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(n: usize, seed: u64) -> Dataset {
    data::make_synthetic(SyntheticSpec {
        n,
        resolution: 16,
        seed,
        classes: 4,
    })
    .unwrap()
}

#[test]
fn synthetic_is_deterministic_and_in_range() {
    let a = synthetic(100, 3);
    let b = synthetic(100, 3);
    assert_eq!(a.images, b.images);
    assert_eq!(a.all().shape(), &[100, 3, 16, 16]);
    assert!(a.images.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_ne!(a.images, synthetic(100, 4).images);
    assert!(data::make_synthetic(SyntheticSpec {
        resolution: 24,
        ..SyntheticSpec::default()
    })
    .is_err());
}

#[test]
fn synthetic_images_vary_per_pixel() {
    let ds = synthetic(500, 0);
    let per = ds.image_len();
    let n = ds.len() as f64;
    let varied = (0..per)
        .filter(|&p| {
            let vals: Vec<f64> = (0..ds.len()).map(|i| ds.image(i)[p] as f64).collect();
            let mean = vals.iter().sum::<f64>() / n;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n > 0.01
        })
        .count();
    assert!(varied * 2 >= per, "{varied} of {per}");
}

#[test]
fn split_is_twenty_percent_and_disjoint() {
    let ds = synthetic(500, 1);
    assert_eq!(ds.val_indices.len(), 100);
    assert_eq!(ds.train_indices.len(), 400);
    let train: HashSet<_> = ds.train_indices.iter().collect();
    assert!(ds.val_indices.iter().all(|i| !train.contains(i)));
}

fn write_png(path: &std::path::Path, w: u32, h: u32, px: impl Fn(u32, u32) -> [u8; 3]) {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(px(x, y)));
    img.save(path).unwrap();
}

#[test]
fn two_by_two_png_normalizes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let levels = [0u8, 85, 170, 255];
    write_png(&dir.path().join("a.png"), 2, 2, |x, y| [levels[(y * 2 + x) as usize]; 3]);
    let ds = data::load_folder(dir.path(), 2, 0).unwrap();
    let want = [-1.0f32, -1.0 / 3.0, 1.0 / 3.0, 1.0];
    for c in 0..3 {
        for (got, w) in ds.image(0)[c * 4..c * 4 + 4].iter().zip(want) {
            assert!((got - w).abs() < 1e-6, "{got} vs {w}");
        }
    }
}

#[test]
fn folder_loading_counts_skips_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..10u32 {
        // Non-square on purpose: center crop then resize.
        write_png(&dir.path().join(format!("img{i:02}.png")), 24, 20, |x, y| {
            [(x * 10 + i) as u8, (y * 12) as u8, (i * 20) as u8]
        });
    }
    std::fs::write(dir.path().join("broken.png"), b"not an image").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"hello").unwrap();
    let a = data::load_folder(dir.path(), 16, 7).unwrap();
    let b = data::load_folder(dir.path(), 16, 7).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a.images, b.images);
    assert!(a.images.iter().all(|v| (-1.0..=1.0).contains(v)));

    let empty = tempfile::tempdir().unwrap();
    assert!(data::load_folder(empty.path(), 16, 0).is_err());
}

#[test]
fn subsample_counts_and_keeps_validation() {
    let ds = synthetic(125, 2);
    assert_eq!(ds.train_indices.len(), 100);
    let full = data::subsample(&ds, 1.0, 5).unwrap();
    let a: HashSet<_> = full.train_indices.iter().collect();
    let b: HashSet<_> = ds.train_indices.iter().collect();
    assert_eq!(a, b);
    let tenth = data::subsample(&ds, 0.1, 5).unwrap();
    assert_eq!(tenth.train_indices.len(), 10);
    assert_eq!(tenth.val_indices, ds.val_indices);
    assert!(data::subsample(&ds, 0.0, 5).is_err());
    assert!(data::subsample(&ds, 1.5, 5).is_err());
}

#[test]
fn subsamples_nest_across_seeds() {
    let ds = synthetic(500, 0);
    for seed in 0..20 {
        let small: HashSet<_> = data::subsample(&ds, 0.1, seed).unwrap().train_indices.into_iter().collect();
        let large: HashSet<_> = data::subsample(&ds, 0.2, seed).unwrap().train_indices.into_iter().collect();
        assert!(small.is_subset(&large), "seed {seed}");
        assert_eq!(data::subsample(&ds, 0.1, seed).unwrap().train_indices, data::subsample(&ds, 0.1, seed).unwrap().train_indices);
    }
}

#[test]
fn full_batch_without_flip_is_a_permutation_of_train() {
    let ds = synthetic(100, 4);
    let n = ds.train_indices.len();
    let mut it = BatchIter::new(n, false);
    let batch = it.next_batch(&ds, &mut ChaCha8Rng::seed_from_u64(0)).to_vec();
    let per = ds.image_len();
    let mut got: Vec<Vec<u32>> = batch.chunks(per).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
    let mut want: Vec<Vec<u32>> = ds
        .train_indices
        .iter()
        .map(|&i| ds.image(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn forced_flip_reverses_columns() {
    let ds = synthetic(100, 5);
    let mut it = BatchIter::with_flip_probability(1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut probe = rng.clone();
    let out = it.next_batch(&ds, &mut rng).to_vec();
    // Recover which image was drawn from the same shuffle.
    let mut order = ds.train_indices.clone();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut probe);
    let src = ds.image(order[0]);
    let r = 16;
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                assert_eq!(out[(c * r + y) * r + x], src[(c * r + y) * r + (r - 1 - x)]);
            }
        }
    }
}

#[test]
fn flip_frequency_is_one_half() {
    let ds = synthetic(100, 6);
    let small = data::subsample(&ds, 0.05, 0).unwrap();
    let n = small.train_indices.len();
    let per = small.image_len();
    let originals: Vec<&[f32]> = small.train_indices.iter().map(|&i| small.image(i)).collect();
    let mut seen = vec![0usize; n];
    let mut flipped = vec![0usize; n];
    let mut it = BatchIter::new(n, true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let batch = it.next_batch(&small, &mut rng).to_vec();
        for img in batch.chunks(per) {
            let k = originals.iter().position(|o| {
                let mut f = o.to_vec();
                data::flip_horizontal(&mut f, 16);
                *o == img || f == img
            });
            let k = k.expect("every batch image comes from the train set");
            seen[k] += 1;
            if originals[k] != img {
                flipped[k] += 1;
            }
        }
    }
    for k in 0..n {
        let f = flipped[k] as f64 / seen[k] as f64;
        assert!((0.45..=0.55).contains(&f), "image {k}: {f}");
    }
}

#[test]
fn cache_round_trips() {
    let ds = data::subsample(&synthetic(100, 8), 0.5, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    data::save_cache(&ds, &path).unwrap();
    let back = data::load_cache(&path).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.train_indices, ds.train_indices);
    assert_eq!(back.val_indices, ds.val_indices);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(data::load_cache(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_is_an_involution(v in prop::collection::vec(-1.0f32..1.0, 3 * 8 * 8)) {
        let mut w = v.clone();
        data::flip_horizontal(&mut w, 8);
        data::flip_horizontal(&mut w, 8);
        prop_assert_eq!(w, v);
    }

    #[test]
    fn validation_split_ignores_fraction(seed in 0u64..1000, f in 0.05f64..1.0) {
        let ds = synthetic(100, 0);
        let sub = data::subsample(&ds, f, seed).unwrap();
        prop_assert_eq!(&sub.val_indices, &ds.val_indices);
        prop_assert_eq!(sub.train_indices.len(), (f * 80.0 - 1e-9).ceil() as usize);
    }
}

fn random_images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..n * 3 * 16 * 16).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &[n, 3, 16, 16]).unwrap()
}

#[test]
fn proxy_fid_of_a_set_with_itself_is_zero() {
    let fe = FeatureExtractor::new(0);
    let a = synthetic(200, 0).all();
    assert!(metrics::proxy_fid(&a, &a, &fe).unwrap() < 1e-4);
}

#[test]
fn proxy_fid_separates_black_from_white() {
    let fe = FeatureExtractor::new(0);
    let black = Tensor::full(&[64, 3, 16, 16], -1.0);
    let white = Tensor::full(&[64, 3, 16, 16], 1.0);
    let ds = synthetic(256, 1).all();
    let halves = metrics::proxy_fid(&ds.slice(0, 0, 128).unwrap(), &ds.slice(0, 128, 256).unwrap(), &fe).unwrap();
    let bw = metrics::proxy_fid(&black, &white, &fe).unwrap();
    assert!(bw > 0.0);
    assert!(bw > halves, "{bw} vs {halves}");
}

#[test]
fn proxy_fid_is_symmetric_and_order_invariant() {
    let fe = FeatureExtractor::new(3);
    let a = random_images(80, 1);
    let b = synthetic(80, 2).all();
    let ab = metrics::proxy_fid(&a, &b, &fe).unwrap();
    let ba = metrics::proxy_fid(&b, &a, &fe).unwrap();
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
    let reversed: Vec<Tensor> = (0..80).rev().map(|i| a.slice(0, i, i + 1).unwrap()).collect();
    let ar = Tensor::concat(&reversed, 0).unwrap();
    let arb = metrics::proxy_fid(&ar, &b, &fe).unwrap();
    assert!((ab - arb).abs() < 1e-6 * ab.max(1.0), "{ab} vs {arb}");
    assert!(metrics::proxy_fid(&a.slice(0, 0, 10).unwrap(), &b, &fe).is_err());
}

#[test]
fn features_are_deterministic_per_seed() {
    let x = random_images(4, 5);
    assert_eq!(FeatureExtractor::new(1).features(&x).unwrap(), FeatureExtractor::new(1).features(&x).unwrap());
    assert_ne!(FeatureExtractor::new(1).features(&x).unwrap(), FeatureExtractor::new(2).features(&x).unwrap());
    assert_eq!(FeatureExtractor::new(1).features(&x).unwrap()[0].len(), metrics::FEATURE_DIM);
}

#[test]
fn zeroed_square_scores_near_one() {
    let mut x = random_images(8, 2).to_vec();
    for b in 0..8 {
        for c in 0..3 {
            for y in 4..12 {
                for xx in 2..10 {
                    x[((b * 3 + c) * 16 + y) * 16 + xx] = 0.0;
                }
            }
        }
    }
    let t = Tensor::from_vec(x, &[8, 3, 16, 16]).unwrap();
    let s = metrics::artifact_score(&t, &"cutout".parse::<Policy>().unwrap()).unwrap();
    assert!(s > 0.99, "{s}");
}

#[test]
fn zeroed_border_band_scores_near_one() {
    let mut x = random_images(8, 3).to_vec();
    for b in 0..8 {
        for c in 0..3 {
            for y in 0..16 {
                for xx in 0..2 {
                    x[((b * 3 + c) * 16 + y) * 16 + xx] = 0.0;
                }
            }
        }
    }
    let t = Tensor::from_vec(x, &[8, 3, 16, 16]).unwrap();
    let s = metrics::artifact_score(&t, &"translation".parse::<Policy>().unwrap()).unwrap();
    assert!(s > 0.99, "{s}");
}

#[test]
fn noise_scores_low() {
    let t = random_images(200, 4);
    let policy: Policy = "translation,cutout".parse().unwrap();
    let s = metrics::artifact_score(&t, &policy).unwrap();
    assert!(s < 0.1, "{s}");
    assert_eq!(metrics::artifact_score(&t, &Policy::none()).unwrap(), 0.0);
}

#[test]
fn sign_accuracy_counts_correct_side() {
    assert_eq!(metrics::sign_accuracy(&[1.0, -1.0, 2.0, 0.5], true), 0.75);
    assert_eq!(metrics::sign_accuracy(&[1.0, -1.0, 2.0, 0.5], false), 0.25);
}

#[test]
fn csv_rows_round_trip() {
    let r = MetricsRecord {
        step: 250,
        proxy_fid: 1.25,
        acc_train_real: 0.5,
        acc_val_real: 0.25,
        acc_fake: 1.0,
        acc_t_real: 0.75,
        acc_t_fake: 0.0,
        acc_raw_fake: 0.125,
        loss_d: 1.5,
        loss_g: 0.75,
    };
    assert_eq!(MetricsRecord::parse_csv_row(&r.csv_row()), Some(r));
    let csv = metrics::to_csv(&[r]);
    assert_eq!(csv.lines().next(), Some(metrics::CSV_HEADER));
}
