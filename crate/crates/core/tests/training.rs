use flowseq_core::compute::{ops, Checkpoint, Precision};
use flowseq_core::data::{build_vocabs, encode_corpus, synth_corpus, EncodedPair, SynthTask};
use flowseq_core::model::{FlowSeq, FlowSeqConfig, Preset};
use flowseq_core::training::{average_checkpoints, read_manifest, train, MetricRecord, TrainConfig, TrainHooks};
use flowseq_core::Error;

fn setup() -> (FlowSeqConfig, Vec<EncodedPair>) {
    let corpus = synth_corpus(SynthTask::LexicalSwap, 16, (3, 8), 200, 3).unwrap();
    let (sv, tv) = build_vocabs(&corpus, 1, false).unwrap();
    let mut cfg = FlowSeqConfig::preset(Preset::Tiny);
    cfg.model.src_vocab = sv.len();
    cfg.model.tgt_vocab = tv.len();
    cfg.model.d_model = 32;
    cfg.model.d_hidden = 64;
    cfg.model.precision = Precision::F64;
    (cfg, encode_corpus(&corpus, &sv, &tv))
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        steps: 12,
        batch_sentences: 16,
        kl_zero_steps: Some(4),
        kl_ramp_steps: Some(4),
        log_interval: 1,
        eval_interval: 6,
        keep_best: 2,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn run(dir: &std::path::Path) -> Vec<MetricRecord> {
    let (cfg, pairs) = setup();
    let model = FlowSeq::new(cfg, 1).unwrap();
    let mut hooks = TrainHooks { out_dir: Some(dir.to_path_buf()), ..TrainHooks::default() };
    train(&model, &pairs, &train_cfg(), &mut hooks).unwrap().records
}

#[test]
fn same_seed_gives_identical_metrics_and_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(a.path());
    run(b.path());
    let read = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(ra.len(), 12);
    assert_eq!(ra.iter().map(|r| r.step).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
    // The KL weight is zero for 4 updates, then ramps linearly to 1 over 4 more.
    let w: Vec<f64> = ra.iter().map(|r| r.kl_weight).collect();
    assert_eq!(&w[..5], &[0.0; 5]);
    assert_eq!(w[6], 0.5);
    assert_eq!(&w[8..], &[1.0; 4]);
    assert!(ra.iter().all(|r| r.recon.is_finite() && r.kl.is_finite() && r.grad_norm.is_finite()));
    let ca = std::fs::read(a.path().join("checkpoints/step00000012.ckpt")).unwrap();
    let cb = std::fs::read(b.path().join("checkpoints/step00000012.ckpt")).unwrap();
    assert_eq!(ca, cb);
    let timing = std::fs::read_to_string(a.path().join("timing.jsonl")).unwrap();
    assert_eq!(timing.lines().count(), 12);
}

#[test]
fn manifest_and_averaging() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path());
    let best = read_manifest(&dir.path().join("checkpoints/best.json")).unwrap();
    assert_eq!(best.len(), 2);
    assert!(best[0].score >= best[1].score);
    let paths: Vec<_> = best.iter().map(|b| b.path.clone()).collect();
    let avg = average_checkpoints(&paths).unwrap();
    let parts: Vec<Checkpoint> = paths.iter().map(|p| Checkpoint::read(p).unwrap()).collect();
    for (i, (name, t)) in avg.tensors.iter().enumerate() {
        let want: Vec<f64> = ops::to_f64_vec(&parts[0].tensors[i].1)
            .unwrap()
            .iter()
            .zip(ops::to_f64_vec(&parts[1].tensors[i].1).unwrap())
            .map(|(x, y)| (x + y) / 2.0)
            .collect();
        let got = ops::to_f64_vec(t).unwrap();
        assert!(got.iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-12), "{name}");
    }
    let (cfg, _) = setup();
    let model = FlowSeq::new(cfg, 9).unwrap();
    model.store.load_checkpoint(&avg, model.digest()).unwrap();
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup();
    let model = FlowSeq::new(cfg.clone(), 1).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let mut other = cfg;
    other.flow.coupling_hidden = 48;
    let err = FlowSeq::new(other, 1).unwrap().load(&path).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }), "{err}");

    let mut bad = Checkpoint::read(&path).unwrap();
    bad.digest = flowseq_core::config::ConfigDigest::of_text("elsewhere");
    let a = Checkpoint::read(&path).unwrap();
    assert!(matches!(Checkpoint::average(&[a, bad]), Err(Error::DigestMismatch { .. })));
}
