use envfake_core::audio::{fit_duration, AudioClip, Crop};
use envfake_core::datakit::{Label, Manifest, ManifestEntry, Split};
use envfake_core::encoder::{read_layerstack, write_layerstack, LayerStack};
use envfake_core::eval::{compute_eer, eer_oracle, TrialScore};
use envfake_core::model::{attentive_stats_pool, fuse, BackendParams, FusionParams, POOL_EPS};
use envfake_core::numerics::{dropout, relu, relu_backward, seeded_rng, softmax_slice, Tensor};
use envfake_core::training::{weighted_loss, ClassWeights};
use proptest::prelude::*;

fn labeled(bona: &[f64], spoof: &[f64]) -> Vec<TrialScore> {
    let mk = |i: usize, score: f64, label| TrialScore { trial_id: format!("{label}{i}"), score, label: Some(label) };
    bona.iter()
        .enumerate()
        .map(|(i, &s)| mk(i, s, Label::Bona))
        .chain(spoof.iter().enumerate().map(|(i, &s)| mk(i, s, Label::Spoof)))
        .collect()
}

fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // coarse grid so ties are common
    let score = (0i32..20).prop_map(|k| k as f64 * 0.5 - 5.0);
    (prop::collection::vec(score.clone(), 1..25), prop::collection::vec(score, 1..25))
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
        let y = softmax_slice(&x).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in y.iter().zip(softmax_slice(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes_and_values(n in 1usize..20, extra in 1usize..4) {
        prop_assert!(Tensor::new(vec![n], vec![0.0f64; n]).is_ok());
        prop_assert!(Tensor::new(vec![n], vec![0.0f64; n + extra]).is_err());
        let mut v = vec![1.0f64; n];
        v[n - 1] = f64::NAN;
        prop_assert!(Tensor::new(vec![n], v).is_err());
    }

    #[test]
    fn relu_gradient_masks_nonpositive_inputs(x in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        let t = Tensor::vector(x.clone()).unwrap();
        let g = relu_backward(&t, &Tensor::vector(vec![1.0; x.len()]).unwrap()).unwrap();
        for ((&xi, &yi), &gi) in x.iter().zip(relu(&t).data()).zip(g.data()) {
            prop_assert_eq!(yi, xi.max(0.0));
            prop_assert_eq!(gi, if xi > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity(x in prop::collection::vec(-3.0f64..3.0, 1..30), seed in any::<u64>(), training in any::<bool>()) {
        let t = Tensor::vector(x).unwrap();
        let (y, _) = dropout(&t, 0.0, &mut seeded_rng(seed, &[]), training).unwrap();
        prop_assert_eq!(y, t);
    }

    #[test]
    fn eer_matches_oracle_and_is_a_fraction((bona, spoof) in score_sets()) {
        let s = labeled(&bona, &spoof);
        let (a, b) = (compute_eer(&s).unwrap(), eer_oracle(&s).unwrap());
        prop_assert!((a.eer - b.eer).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.eer));
        let separated = bona.iter().cloned().fold(f64::INFINITY, f64::min) > spoof.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(a.eer == 0.0, separated);
    }

    #[test]
    fn eer_is_a_rank_statistic((bona, spoof) in score_sets()) {
        let base = compute_eer(&labeled(&bona, &spoof)).unwrap().eer;
        let warp = |v: &Vec<f64>| v.iter().map(|x| (x * 0.7).exp() * 3.0 + 1.0).collect::<Vec<_>>();
        prop_assert!((compute_eer(&labeled(&warp(&bona), &warp(&spoof))).unwrap().eer - base).abs() < 1e-12);
        let twice = |v: &Vec<f64>| v.iter().chain(v).copied().collect::<Vec<_>>();
        prop_assert!((compute_eer(&labeled(&twice(&bona), &twice(&spoof))).unwrap().eer - base).abs() < 1e-12);
        // swapping the classes is still consistent with the oracle
        let flipped = labeled(&spoof, &bona);
        prop_assert!((compute_eer(&flipped).unwrap().eer - eer_oracle(&flipped).unwrap().eer).abs() < 1e-9);
    }

    #[test]
    fn loss_normalization_cancels_weight_scale(
        logits in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 1..10),
        wb in 0.1f64..10.0,
        ws in 0.1f64..10.0,
        c in 0.01f64..100.0,
    ) {
        let logits: Vec<[f64; 2]> = logits.into_iter().map(|(a, b)| [a, b]).collect();
        let labels: Vec<Label> = (0..logits.len()).map(|i| if i % 3 == 0 { Label::Bona } else { Label::Spoof }).collect();
        let (l1, g1) = weighted_loss(&logits, &labels, &ClassWeights::new(wb, ws).unwrap()).unwrap();
        let (l2, g2) = weighted_loss(&logits, &labels, &ClassWeights::new(c * wb, c * ws).unwrap()).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        let (eq, _) = weighted_loss(&logits, &labels, &ClassWeights::new(wb, wb).unwrap()).unwrap();
        let (one, _) = weighted_loss(&logits, &labels, &ClassWeights::uniform()).unwrap();
        prop_assert_eq!(eq, one);
    }

    #[test]
    fn fit_duration_always_yields_ten_seconds(len in 1usize..200_000, seed in any::<u64>()) {
        let clip = AudioClip::mono((0..len).map(|i| ((i % 97) as f32) / 200.0).collect(), 16_000).unwrap();
        let out = fit_duration(&clip, 10, Crop::Random(&mut seeded_rng(seed, &[]))).unwrap();
        prop_assert_eq!(out.samples().len(), 160_000);
    }

    #[test]
    fn fusion_weights_form_a_convex_combination(g in prop::collection::vec(-20.0f64..20.0, 6)) {
        let fusion = FusionParams { layer_set: vec![4, 5, 6, 7, 8, 9], logits: Tensor::vector(g).unwrap() };
        let w = fusion.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        let same = LayerStack::new((0..12).map(|_| Tensor::matrix(2, 2, vec![0.5, -1.0, 0.25, 2.0]).unwrap()).collect()).unwrap();
        let out = fuse(&same, &fusion.clone()).unwrap();
        for (a, b) in out.data().iter().zip([0.5, -1.0, 0.25, 2.0]) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_statistics_stay_in_envelope(frames in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..12), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded_rng(seed, &[]);
        let mut b = BackendParams::<f64>::zeros(3, 3, 2, 0.0);
        b.w_att.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        b.v_att.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        let t = frames.len();
        let h = Tensor::matrix(t, 3, frames.concat()).unwrap();
        let pooled = attentive_stats_pool(&h, &b).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = frames.iter().map(|f| f[j]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, c), &v| (a.min(v), c.max(v)));
            prop_assert!(pooled.data()[j] >= lo - 1e-12 && pooled.data()[j] <= hi + 1e-12);
            prop_assert!(pooled.data()[3 + j] >= POOL_EPS.sqrt() - 1e-15);
        }
    }

    #[test]
    fn manifest_text_round_trips(rows in prop::collection::vec(("[a-z0-9_]{1,8}", any::<bool>(), 0usize..3), 0..20)) {
        let mut seen = std::collections::HashSet::new();
        let entries: Vec<ManifestEntry> = rows
            .into_iter()
            .filter(|(id, _, _)| seen.insert(id.clone()))
            .map(|(id, bona, s)| ManifestEntry {
                path: format!("audio/{id}.wav").into(),
                trial_id: id,
                label: if bona { Label::Bona } else { Label::Spoof },
                split: Split::ALL[s],
            })
            .collect();
        let m = Manifest::new(entries).unwrap();
        prop_assert_eq!(Manifest::parse(&m.to_text()).unwrap().entries, m.entries);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layerstack_files_are_lossless(l in 1usize..5, t in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded_rng(seed, &[]);
        let layers = (0..l).map(|_| Tensor::matrix(t, d, (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()).collect();
        let stack = LayerStack::new(layers).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.lstk");
        write_layerstack(&stack, &p).unwrap();
        prop_assert_eq!(read_layerstack(&p).unwrap(), stack);
    }
}
