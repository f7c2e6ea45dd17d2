use envfake_core::audio::{normalize_clip, read_wav, write_wav, AudioClip, Crop, CLIP_SAMPLES};
use envfake_core::datakit::{gen_synthetic_corpus, split_manifest, Shift};
use envfake_core::encoder::{encode, EncoderKind, EncoderSpec, Index};
use envfake_core::eval::score_manifest;
use envfake_core::features::{self, compute_global_stats, fit_frames, logmel, normalize, write_melspec, NormStats};
use envfake_core::model::ModelConfig;
use envfake_core::numerics::seeded_rng;
use envfake_core::stacks::{clip_features, IndexSource};
use envfake_core::training::{train, Dataset, TrainConfig};
use rand::Rng;

#[test]
fn chain_shapes_hold_for_odd_rates_and_channels() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded_rng(21, &[]);
    let stats = NormStats::new(-6.0, 3.0, "fixed", 1).unwrap();
    for (i, (rate, channels)) in [(44_100u32, 2u16), (22_050, 1), (48_000, 2), (8_000, 1)].into_iter().enumerate() {
        let secs = rng.gen_range(2.0..12.0);
        let n = (secs * rate as f64) as usize * channels as usize;
        let clip = AudioClip::new((0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect(), channels, rate).unwrap();
        let path = dir.path().join(format!("{i}.wav"));
        write_wav(&clip, &path).unwrap();
        let fixed = normalize_clip(&read_wav(&path).unwrap(), Crop::Random(&mut rng)).unwrap();
        assert_eq!(fixed.samples().len(), CLIP_SAMPLES);
        let mel = logmel(&fixed).unwrap();
        assert_eq!(mel.num_frames(), 998);
        let mel = fit_frames(&normalize(&mel, &stats).unwrap(), 1024).unwrap();
        assert_eq!(mel.frames().shape(), &[1024, 128]);
    }
}

#[test]
fn staged_files_train_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_synthetic_corpus(5, 8, 24, &dir.path().join("data"), Shift::None).unwrap();
    let parts = split_manifest(&corpus, [0.5, 0.5, 0.0], 5).unwrap();

    let feat_dir = dir.path().join("feats");
    std::fs::create_dir_all(&feat_dir).unwrap();
    let mut feats = Vec::new();
    for e in &corpus.entries {
        let mel = clip_features(&read_wav(&corpus.resolve(e)).unwrap(), Crop::Start).unwrap();
        let p = feat_dir.join(format!("{}.mels", e.trial_id));
        write_melspec(&mel, &p).unwrap();
        feats.push((e.trial_id.clone(), p));
    }
    let feat_index = Index::new(feats);
    let train_paths: Vec<_> = parts.train.entries.iter().map(|e| feat_index.get(&e.trial_id).unwrap().to_path_buf()).collect();
    let stats = compute_global_stats("train", train_paths.len(), |i| features::read_melspec(&train_paths[i])).unwrap();

    let spec = EncoderSpec { kind: EncoderKind::Stub, dim: 16, ..EncoderSpec::default() };
    let emb = encode(&corpus.ids(), &feat_index, &spec, Some(&stats), &dir.path().join("emb")).unwrap();
    assert_eq!(emb.len(), corpus.len());
    assert_eq!(Index::read(&dir.path().join("emb/index.tsv")).unwrap().len(), corpus.len());

    let layer_set = [4, 5, 6, 7, 8, 9];
    let train_src = IndexSource::new(&parts.train.ids(), &emb, &layer_set).unwrap();
    let dev_src = IndexSource::new(&parts.dev.ids(), &emb, &layer_set).unwrap();
    let train_set = Dataset::new(parts.train.ids(), parts.train.labels(), &train_src).unwrap();
    let dev_set = Dataset::new(parts.dev.ids(), parts.dev.labels(), &dev_src).unwrap();
    let model = ModelConfig { dim: 16, hidden: 8, attn_dim: 4, ..ModelConfig::default() };
    let cfg = TrainConfig { batch_size: 8, max_steps: 4, eval_every: 2, ..TrainConfig::default() };
    let run = train::<f32>(&train_set, &dev_set, &model, &cfg, None).unwrap();
    let ckpt = run.best_checkpoint();

    let scores = score_manifest(&parts.dev, &ckpt.params, &dev_src).unwrap();
    assert_eq!(scores.len(), parts.dev.len());
    assert_eq!(scores, score_manifest(&parts.dev, &ckpt.params, &dev_src).unwrap());
    for (s, id) in scores.iter().zip(parts.dev.ids()) {
        let stack = emb.get(&id).map(|p| envfake_core::encoder::read_layerstack(p).unwrap()).unwrap();
        assert_eq!(s.score, envfake_core::model::score(&stack, &ckpt.params).unwrap() as f64);
    }

    let empty = split_manifest(&corpus, [1.0, 0.0, 0.0], 5).unwrap().dev;
    let none = IndexSource::new(&[], &emb, &layer_set).unwrap();
    assert!(score_manifest(&empty, &ckpt.params, &none).unwrap().is_empty());
}
