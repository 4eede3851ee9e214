use vidlang_core::checkpoint::{load_checkpoint, save_checkpoint};
use vidlang_core::data::generate_synthetic_corpus;
use vidlang_core::eval::{score_all, ScoringCache};
use vidlang_core::introspect::{gradcam, read_pgm, render_heatmap, GradCamOptions, ScalingReport, CELL};
use vidlang_core::train::{train_retrieval, train_vqa, vqa_accuracy};
use vidlang_core::{Model, ModelConfig, PoolingMode, RunConfig, Tensor, TrainConfig};

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { steps: Some(steps), seed: Some(seed), batch_size: 8, ..TrainConfig::desk() }
}

#[test]
fn checkpoint_file_roundtrip_preserves_encodings() {
    let cfg = ModelConfig::toy();
    let corpus = generate_synthetic_corpus(1, 8, &cfg, false).unwrap();
    let mut model = Model::<f32>::new(cfg, 1).unwrap();
    train_retrieval(&mut model, &corpus, &quick(3, 1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, 3, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.model.pooling_mode, model.pooling_mode);
    let a = score_all(&model, &corpus).unwrap();
    let b = score_all(&loaded.model, &corpus).unwrap();
    assert_eq!(a.vtc, b.vtc);
    assert_eq!(a.vtm, b.vtm);
}

#[test]
fn score_matrices_are_consistent() {
    let cfg = ModelConfig::toy();
    let corpus = generate_synthetic_corpus(2, 6, &cfg, false).unwrap();
    let model = Model::<f64>::new(cfg, 2).unwrap();
    let scores = score_all(&model, &corpus).unwrap();
    // Each VTC cell is the dot product of two independently encoded unit vectors.
    let (i, j) = (4, 1);
    let mut g = model.inference_graph();
    let v = model.encode_video(&mut g, &corpus[i].video).unwrap();
    let t = model.encode_text(&mut g, &corpus[j].caption).unwrap();
    let dot: f64 = g.value(v.cls).data().iter().zip(g.value(t.cls).data()).map(|(a, b)| a * b).sum();
    assert!((scores.vtc.at(i, j) - dot).abs() < 1e-12);
    assert!(scores.vtc.data().iter().all(|s| s.abs() <= 1.0 + 1e-12));
    // Matched log-probabilities.
    assert!(scores.vtm.data().iter().all(|&s| s <= 0.0 && s.is_finite()));
    let cache = ScoringCache::new(&model, &corpus).unwrap();
    assert_eq!(cache.vtm(i, j).unwrap(), scores.vtm.at(i, j));
    // Parallel scoring is deterministic.
    assert_eq!(score_all(&model, &corpus).unwrap().vtm, scores.vtm);
}

#[test]
fn zeroed_matching_head_gives_chance_loss() {
    let cfg = ModelConfig::toy();
    let corpus = generate_synthetic_corpus(3, 8, &cfg, false).unwrap();
    for seed in 0..3 {
        let mut model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        for id in model.vtm_head.ids() {
            let shape = model.params.get(id).shape().to_vec();
            model.params.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = model.inference_graph();
        let videos: Vec<_> = corpus.iter().map(|p| &p.video).collect();
        let captions: Vec<_> = corpus.iter().map(|p| &p.caption).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let out = model.retrieval_step(&mut g, &videos, &captions, &mut rng).unwrap();
        assert!((g.value(out.vtm).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn vqa_training_fits_the_toy_corpus() {
    let cfg = ModelConfig::toy();
    let corpus = generate_synthetic_corpus(4, 80, &cfg, true).unwrap();
    let (train, val) = corpus.split_at(64);
    let mut model = Model::<f32>::new(cfg, 4).unwrap();
    let tcfg = TrainConfig { steps: Some(300), seed: Some(4), ..TrainConfig::desk() };
    let report = train_vqa(&mut model, train, val, &tcfg, None).unwrap();
    let acc = vqa_accuracy(&model, train).unwrap();
    assert!(acc >= 90.0, "train accuracy {acc}");
    assert_eq!(report.best_val_accuracy, vqa_accuracy(&model, val).unwrap());
    assert!(report.best_val_accuracy >= report.curve.last().unwrap().val_accuracy);
}

#[test]
fn introspection_exports() {
    let cfg = ModelConfig::toy();
    let corpus = generate_synthetic_corpus(5, 4, &cfg, false).unwrap();
    let mut model = Model::<f64>::new(cfg.clone(), 5).unwrap();
    let shape = model.params.get(model.video.gamma).shape().to_vec();
    let ramp: Vec<f64> = (0..shape.iter().product()).map(|i| i as f64 * 0.1 - 0.5).collect();
    model.params.set(model.video.gamma, Tensor::from_f64(&shape, &ramp).unwrap()).unwrap();

    let report = ScalingReport::from_model(&model).unwrap();
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("layer,frame,gamma,alpha"));
    assert!(csv.contains(&format!("0,1,{},{}", ramp[1], ramp[1].tanh() + 1.0)));

    let dir = tempfile::tempdir().unwrap();
    for mode in [PoolingMode::TextDependent, PoolingMode::Vanilla, PoolingMode::Original, PoolingMode::OriginalSpatial] {
        model.pooling_mode = mode;
        let map = gradcam(&model, &corpus[0], GradCamOptions::for_model(&model)).unwrap();
        assert_eq!((map.grid.len(), map.grid[0].len()), (cfg.frames, cfg.patches_per_frame()));
        let peak = map.grid.iter().flatten().copied().fold(0.0, f64::max);
        assert!(map.grid.iter().flatten().all(|&v| v >= 0.0) && (peak == 1.0 || peak == 0.0));
        let path = dir.path().join(format!("{mode}.pgm"));
        render_heatmap(&map.grid, &path).unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (cfg.patches_per_frame() * CELL, cfg.frames * CELL));
        assert_eq!(px.len(), w * h);
    }
}

#[test]
fn run_config_overrides() {
    let base = r#"{"num_layers": 2, "learning_rate": 0.01}"#;
    let cfg = RunConfig::from_json_with_overrides(
        Some(base),
        &[("frames".into(), "2".into()), ("frames_train".into(), "2".into()), ("frames_eval".into(), "2".into()), ("pooling_mode".into(), "vanilla".into())],
    )
    .unwrap();
    assert_eq!((cfg.model.num_layers, cfg.model.frames), (2, 2));
    assert_eq!(cfg.train.learning_rate, 0.01);
    assert_eq!(cfg.train.pooling_mode, PoolingMode::Vanilla);
    assert!(RunConfig::from_json_with_overrides(None, &[("bogus".into(), "1".into())]).is_err());
    assert!(RunConfig::from_json_with_overrides(Some(r#"{"bogus": 1}"#), &[]).is_err());
    assert!(RunConfig::from_json_with_overrides(None, &[("hidden_dim".into(), "63".into())]).is_err());
}
