use calibra_core::data::{normalize, denormalize, sample_patch_and_shuffle};
use calibra_core::eval::{argmax, seg_metrics, ConfusionMatrix};
use calibra_core::losses::{
    calibrator_loss, discriminator_loss, CalibratorTerms, GroupLabel, GroupLogits,
};
use calibra_core::nets::{
    build_calibrator, build_classifier, build_discriminator, calibrate, calibrate_batch,
    CalibratorConfig, ClassifierArch, DiscriminatorKind, Network,
};
use calibra_core::optim::{AdamConfig, AdamState};
use calibra_core::{ops, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Replaces every parameter with a random value so the calibrator output
/// is far from the identity.
fn scramble(net: &mut Network, scale: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<(String, Vec<usize>)> =
        net.params.iter().map(|(k, v)| (k.to_owned(), v.shape().to_vec())).collect();
    for (k, s) in names {
        net.set_param(&k, uniform(&s, -scale, scale, rng)).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn calibration_respects_the_budget(seed in any::<u64>(), eps in 0.0f64..=2.0, scale in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cal = build_calibrator(&CalibratorConfig::default(), 2, 8, 8, seed).unwrap();
        scramble(&mut cal, scale, &mut rng);
        let x = uniform(&[3, 2, 8, 8], -1.0, 1.0, &mut rng);
        let y = calibrate_batch(&cal, &x, eps, 2).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() <= eps, "{} > {}", (a - b).abs(), eps);
            prop_assert!((-1.0..=1.0).contains(b));
        }
    }

    #[test]
    fn fresh_calibrator_leaves_classifier_outputs_unchanged(seed in any::<u64>(), eps in 0.0f64..=2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal = build_calibrator(&CalibratorConfig::default(), 1, 8, 8, seed).unwrap();
        let clf = build_classifier(ClassifierArch::desk(1, 8, 5).spec(), seed).unwrap();
        let x = uniform(&[4, 1, 8, 8], -1.0, 1.0, &mut rng);
        let y = calibrate_batch(&cal, &x, eps, 4).unwrap();
        prop_assert_eq!(&x, &y);
        prop_assert_eq!(clf.eval(&x, 4).unwrap(), clf.eval(&y, 4).unwrap());
    }

    #[test]
    fn patch_shuffle_preserves_histogram(seed in any::<u64>(), patch in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let out = sample_patch_and_shuffle(&image, patch, &mut rng).unwrap();
        prop_assert_eq!(out.numel(), 2 * patch * patch);
        // every output value occurs in the image, and each channel's values
        // form a multiset equal to some patch×patch window of that channel
        for ch in 0..2 {
            let mut got: Vec<f64> = out.data()[ch * patch * patch..(ch + 1) * patch * patch].to_vec();
            got.sort_by(f64::total_cmp);
            let plane = &image.data()[ch * 36..(ch + 1) * 36];
            let found = (0..=6 - patch).any(|r| (0..=6 - patch).any(|c| {
                let mut win: Vec<f64> = (0..patch * patch)
                    .map(|k| plane[(r + k / patch) * 6 + c + k % patch])
                    .collect();
                win.sort_by(f64::total_cmp);
                win == got
            }));
            prop_assert!(found);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..12, spread in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[rows, cols], -spread, spread, &mut rng);
        let p = ops::softmax(&x);
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let ce = ops::cross_entropy_rows(&x, &targets).unwrap();
        prop_assert!(ce.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn normalisation_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
        prop_assert!(denormalize(&normalize(&raw).unwrap()).unwrap().max_abs_diff(&raw) <= 1e-15);
    }

    #[test]
    fn tensor_files_round_trip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 0..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = uniform(&dims, -1e6, 1e6, &mut rng);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn argmax_is_invariant_to_monotone_maps(seed in any::<u64>(), a in 0.01f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let affine: Vec<f64> = row.iter().map(|v| a * v + b).collect();
        let cubed: Vec<f64> = row.iter().map(|v| v.powi(3) + v.exp()).collect();
        prop_assert_eq!(argmax(&row), argmax(&affine));
        prop_assert_eq!(argmax(&row), argmax(&cubed));
    }

    #[test]
    fn same_seed_same_outputs(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cal = build_calibrator(&CalibratorConfig::default(), 1, 8, 8, seed).unwrap();
            scramble(&mut cal, 0.5, &mut rng);
            let x = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let b = cal.bind(&mut tape, true);
            let xv = tape.constant(x);
            let y = calibrate(&mut tape, &cal, &b, xv, 0.3).unwrap();
            let s = tape.sum(y);
            let g = b.grads(&tape.backward(s).unwrap());
            (tape.value(y).clone(), g)
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        prop_assert!(y1.data().iter().zip(y2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        for (k, v) in &g1 {
            prop_assert!(v.data().iter().zip(g2[k].data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn frozen_sets_keep_their_bits(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clf = build_classifier(ClassifierArch::desk(1, 8, 3).spec(), seed).unwrap();
        clf.params.freeze();
        let before = clf.params.fingerprint();
        let grads: BTreeMap<String, Tensor> = clf
            .params
            .iter()
            .map(|(k, v)| (k.to_owned(), uniform(v.shape(), -1.0, 1.0, &mut rng)))
            .collect();
        let mut adam = AdamState::new(AdamConfig::default());
        prop_assert!(clf.params.apply_adam(&mut adam, &grads).is_err());
        prop_assert_eq!(clf.params.fingerprint(), before);
    }

    #[test]
    fn losses_are_non_negative_and_calibrator_loss_is_its_parts(seed in any::<u64>(), rows in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<Tensor> = (0..4).map(|_| uniform(&[rows, 4], -5.0, 5.0, &mut rng)).collect();
        let mut tape = Tape::new();
        let v: Vec<_> = logits.iter().map(|t| tape.param(t.clone())).collect();
        let groups: Vec<GroupLogits> = GroupLabel::ALL
            .iter()
            .zip(&v)
            .map(|(&label, &logits)| GroupLogits { label, logits })
            .collect();
        let ld = discriminator_loss(&mut tape, &groups).unwrap();
        prop_assert!(tape.value(ld).item() >= 0.0);
        let terms = CalibratorTerms {
            feat_calibrated_source: v[0],
            feat_calibrated_target: v[1],
            pixel_calibrated_source: v[2],
            pixel_calibrated_target: v[3],
        };
        let lc = calibrator_loss(&mut tape, &terms).unwrap();
        let parts: Vec<f64> = logits
            .iter()
            .map(|t| ops::cross_entropy_rows(t, &vec![0; rows]).unwrap().iter().sum::<f64>() / rows as f64)
            .collect();
        // grouped either way, the sum is the same
        let left = (parts[0] + parts[1]) + (parts[2] + parts[3]);
        let right = parts[0] + (parts[1] + (parts[2] + parts[3]));
        prop_assert!((tape.value(lc).item() - left).abs() <= 1e-12);
        prop_assert!((left - right).abs() <= 1e-12);
    }
}

/// Brute-force IoU from explicit sets of sample ids.
fn iou_by_sets(truth: &[usize], pred: &[usize], k: usize) -> Option<(u64, u64)> {
    use std::collections::BTreeSet;
    let t: BTreeSet<usize> = truth.iter().enumerate().filter(|(_, &c)| c == k).map(|(i, _)| i).collect();
    let p: BTreeSet<usize> = pred.iter().enumerate().filter(|(_, &c)| c == k).map(|(i, _)| i).collect();
    let union = t.union(&p).count() as u64;
    (union > 0).then(|| (t.intersection(&p).count() as u64, union))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seg_metrics_match_set_oracle(seed in any::<u64>(), k in 2usize..6, n in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let cm = ConfusionMatrix::from_predictions(k, &truth, &pred).unwrap();
        prop_assert_eq!(cm.total(), n as u64);
        let m = seg_metrics(&cm).unwrap();
        for c in 0..k {
            let oracle = iou_by_sets(&truth, &pred, c).map(|(i, u)| i as f64 / u as f64);
            prop_assert_eq!(m.iou[c], oracle);
        }
    }
}

#[test]
fn gradients_route_only_to_the_updated_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clf = build_classifier(ClassifierArch::desk(1, 8, 3).spec(), 1).unwrap();
    let mut cal = build_calibrator(&CalibratorConfig::default(), 1, 8, 8, 2).unwrap();
    scramble(&mut cal, 0.3, &mut rng);
    let dp = build_discriminator(DiscriminatorKind::Pixel, 64, 8, 3).unwrap();
    let mut df = build_discriminator(DiscriminatorKind::Feature, 64, 8, 4).unwrap();
    scramble(&mut df, 0.5, &mut rng);
    let x = uniform(&[3, 1, 8, 8], -1.0, 1.0, &mut rng);

    // discriminator step: calibrated inputs enter detached
    let mut tape = Tape::new();
    let cal_b = cal.bind(&mut tape, true);
    let clf_b = clf.bind(&mut tape, false);
    let feat_b = df.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let cx = calibrate(&mut tape, &cal, &cal_b, xv, 0.5).unwrap();
    let fc = clf.features(&mut tape, &clf_b, cx).unwrap();
    let detached = tape.detach(fc);
    let fx = clf.features(&mut tape, &clf_b, xv).unwrap();
    let groups: Vec<GroupLogits> = GroupLabel::ALL
        .iter()
        .zip([fx, fx, detached, detached])
        .map(|(&label, f)| GroupLogits { label, logits: df.forward(&mut tape, &feat_b, f).unwrap() })
        .collect();
    let ld = discriminator_loss(&mut tape, &groups).unwrap();
    let g = tape.backward(ld).unwrap();
    assert!(cal_b.grads(&g).values().all(|t| t.data().iter().all(|v| *v == 0.0)));
    assert!(cal_b.vars().all(|v| !g.reached(v)));
    assert!(feat_b.grads(&g).values().any(|t| t.data().iter().any(|v| *v != 0.0)));

    // calibrator step: classifier and discriminators are constants
    let mut tape = Tape::new();
    let cal_b = cal.bind(&mut tape, true);
    let clf_b = clf.bind(&mut tape, false);
    let feat_b = df.bind(&mut tape, false);
    let pix_b = dp.bind(&mut tape, false);
    let xv = tape.constant(x);
    let cx = calibrate(&mut tape, &cal, &cal_b, xv, 0.5).unwrap();
    let fc = clf.features(&mut tape, &clf_b, cx).unwrap();
    let fl = df.forward(&mut tape, &feat_b, fc).unwrap();
    let flat = tape.reshape(cx, &[3, 64]).unwrap();
    let pl = dp.forward(&mut tape, &pix_b, flat).unwrap();
    let terms = CalibratorTerms {
        feat_calibrated_source: fl,
        feat_calibrated_target: fl,
        pixel_calibrated_source: pl,
        pixel_calibrated_target: pl,
    };
    let lc = calibrator_loss(&mut tape, &terms).unwrap();
    let g = tape.backward(lc).unwrap();
    for b in [&clf_b, &feat_b, &pix_b] {
        assert!(b.vars().all(|v| !g.reached(v)));
        assert!(b.grads(&g).values().all(|t| t.data().iter().all(|v| *v == 0.0)));
    }
    assert!(cal_b.grads(&g).values().any(|t| t.data().iter().any(|v| *v != 0.0)));
}
