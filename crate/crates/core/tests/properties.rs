//! Randomized invariants of augmentation, smoothing, confusion matrices and splitting.

use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use statenet_core::augment::{apply_affine, augment_image, sample_params, AffineParams, AugmentConfig};
use statenet_core::data::{split, DatasetIndex, Sample, SplitTag};
use statenet_core::metrics::{smooth, ConfusionMatrix, Metric, Series};
use statenet_core::rng::{stream, Domain};
use statenet_core::tensor::Tensor;

fn image() -> impl Strategy<Value = Tensor> {
    (1usize..10, 1usize..10, 1usize..4).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0u8..=255, h * w * c)
            .prop_map(move |v| Tensor::new([h, w, c], v.into_iter().map(f32::from).collect()).unwrap())
    })
}

fn sorted_bits(t: &Tensor) -> Vec<u32> {
    let mut v: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

fn series(values: Vec<f64>) -> Series {
    Series {
        run: "r".into(),
        metric: Metric::Loss,
        split: SplitTag::Train,
        points: values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flip_preserves_histogram(img in image()) {
        let p = AffineParams { flip: true, ..AffineParams::IDENTITY };
        let out = apply_affine(&img, &p).unwrap();
        prop_assert_eq!(sorted_bits(&out), sorted_bits(&img));
    }

    #[test]
    fn affine_only_copies_input_values(img in image(), seed in any::<u64>()) {
        let s = img.shape().to_vec();
        let p = sample_params(&AugmentConfig::default(), s[0], s[1], &mut stream(seed, Domain::Augment, &[]));
        let out = apply_affine(&img, &p).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        let present: std::collections::BTreeSet<u32> = img.data().iter().map(|v| v.to_bits()).collect();
        prop_assert!(out.data().iter().all(|v| present.contains(&v.to_bits())));
    }

    #[test]
    fn sampled_params_stay_in_range(h in 1usize..300, w in 1usize..300, seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let p = sample_params(&cfg, h, w, &mut stream(seed, Domain::Augment, &[]));
        prop_assert!(p.theta.abs() <= cfg.rotation_range);
        prop_assert!(p.tx.abs() <= h as f64 * cfg.height_shift_range);
        prop_assert!(p.ty.abs() <= w as f64 * cfg.width_shift_range);
        prop_assert!(p.shear.abs() <= cfg.shear_range);
        for z in [p.zx, p.zy] {
            prop_assert!((1.0 - cfg.zoom_range..=1.0 + cfg.zoom_range).contains(&z));
        }
    }

    #[test]
    fn table_one_output_is_unit_bounded_and_seeded(img in image(), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let a = augment_image(&img, &cfg, &mut stream(seed, Domain::Augment, &[1]), true).unwrap();
        let b = augment_image(&img, &cfg, &mut stream(seed, Domain::Augment, &[1]), true).unwrap();
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn smoothing_keeps_axis_and_bounds(values in prop::collection::vec(-5.0f64..5.0, 1..40), alpha in 0.01f64..0.99) {
        let raw = series(values.clone());
        let s = smooth(&raw, alpha).unwrap();
        prop_assert_eq!(s.points.len(), raw.points.len());
        prop_assert!(s.points.iter().zip(&raw.points).all(|(a, b)| a.0 == b.0));
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.points.iter().all(|p| lo <= p.1 && p.1 <= hi));
        prop_assert_eq!(smooth(&smooth(&raw, 0.0).unwrap(), alpha).unwrap(), s);
        let flat = series(vec![values[0]; values.len()]);
        prop_assert_eq!(smooth(&flat, alpha).unwrap(), flat);
    }

    #[test]
    fn confusion_rows_count_true_classes(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let classes: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let (labels, predicted): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = ConfusionMatrix::from_predictions(&classes, &labels, &predicted).unwrap();
        prop_assert_eq!(m.total(), labels.len());
        for (k, row) in m.counts.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == k).count());
        }
        let correct = labels.iter().zip(&predicted).filter(|(a, b)| a == b).count();
        prop_assert_eq!(m.accuracy(), correct as f64 / labels.len() as f64);
    }

    #[test]
    fn split_is_within_one_sample_per_class(
        sizes in prop::collection::vec(1usize..60, 1..6),
        (a, b) in (0.0f64..1.0, 0.0f64..1.0),
        seed in any::<u64>(),
    ) {
        let fractions = [a.min(b), a.max(b) - a.min(b), 1.0 - a.max(b)];
        let mut samples = Vec::new();
        for (class, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample { path: PathBuf::from(format!("{class}/{i}.png")), class, split: SplitTag::Train });
            }
        }
        let index = DatasetIndex {
            classes: (0..sizes.len()).map(|c| c.to_string()).collect(),
            samples,
            warnings: Vec::new(),
        };
        let out = split(&index, fractions, seed).unwrap();
        let mut counts: BTreeMap<(usize, SplitTag), usize> = BTreeMap::new();
        for s in &out.samples {
            *counts.entry((s.class, s.split)).or_default() += 1;
        }
        for (class, &n) in sizes.iter().enumerate() {
            for (tag, f) in [SplitTag::Train, SplitTag::Val, SplitTag::Test].into_iter().zip(fractions) {
                let got = counts.get(&(class, tag)).copied().unwrap_or(0) as f64;
                prop_assert!((got - n as f64 * f).abs() <= 1.0, "class {class} {tag}: {got} of {n} at {f}");
            }
        }
    }
}
