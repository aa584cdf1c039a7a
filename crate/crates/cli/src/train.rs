use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use flowseq_core::compute::{NoiseRng, Precision};
use flowseq_core::config::KvConfig;
use flowseq_core::data::{encode_corpus, make_batch, EncodedPair, TokenBatch};
use flowseq_core::decoding::{argmax_decode, trim_at_eos, ArModel};
use flowseq_core::eval::corpus_bleu;
use flowseq_core::model::FlowSeq;
use flowseq_core::nets::{sample_posterior, Ctx};
use flowseq_core::training::{train, TrainHooks};
use flowseq_core::verify;
use flowseq_core::Error;

use crate::run::{Arch, RunConfig, RunDir, FINAL_CHECKPOINT};
use crate::{CmdResult, Failure};

#[derive(Args)]
pub struct TrainArgs {
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (`section.key=value`); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Synthetic task (copy, reverse, sort, lexical-swap) or `none` for files.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    shared_vocab: bool,
    #[arg(long)]
    max_src_len: Option<usize>,
    #[arg(long)]
    max_tgt_len: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kl_zero_steps: Option<usize>,
    #[arg(long)]
    kl_ramp_steps: Option<usize>,
    /// Architecture preset: tiny, desk, base, large.
    #[arg(long)]
    preset: Option<String>,
    /// `flowseq` or `ar` (the autoregressive rescorer and baseline).
    #[arg(long)]
    arch: Option<String>,
    /// Check flow invertibility on dev latents after training.
    #[arg(long)]
    verify_flow: bool,
}

impl TrainArgs {
    fn config(&self) -> flowseq_core::Result<RunConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::from_file(p)?,
            None => KvConfig::new(),
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags: [(&str, Option<String>); 16] = [
            ("data.task", self.task.clone()),
            ("data.src", path(&self.src)),
            ("data.tgt", path(&self.tgt)),
            ("data.dev_src", path(&self.dev_src)),
            ("data.dev_tgt", path(&self.dev_tgt)),
            ("data.min_count", self.min_count.map(|v| v.to_string())),
            ("data.shared_vocab", self.shared_vocab.then(|| "true".into())),
            ("data.max_src_len", self.max_src_len.map(|v| v.to_string())),
            ("data.max_tgt_len", self.max_tgt_len.map(|v| v.to_string())),
            ("train.steps", self.steps.map(|v| v.to_string())),
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("train.kl_zero_steps", self.kl_zero_steps.map(|v| v.to_string())),
            ("train.kl_ramp_steps", self.kl_ramp_steps.map(|v| v.to_string())),
            ("run.preset", self.preset.clone()),
            ("run.arch", self.arch.clone()),
            ("data.task", (self.src.is_some() && self.task.is_none()).then(|| "none".into())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.set(k, &v)?;
            }
        }
        kv.apply_overrides(&self.overrides)?;
        RunConfig::from_kv(&kv)
    }
}

pub fn run(args: TrainArgs) -> CmdResult {
    let config = args.config()?;
    config.train.validate()?;
    let (train_corpus, dev_corpus) = config.data.load()?;
    let rd = RunDir::create(&args.out, config, &train_corpus)?;
    let cfg = &rd.config;
    log::info!("run {} digest {} seed {}", rd.path.display(), cfg.digest(), cfg.seed());
    let pairs = encode_corpus(&train_corpus, &rd.src_vocab, &rd.tgt_vocab);
    let dev = dev_corpus.map(|d| encode_corpus(&d, &rd.src_vocab, &rd.tgt_vocab));
    match cfg.run.arch {
        Arch::FlowSeq => train_flowseq(&rd, &pairs, dev.as_deref(), args.verify_flow),
        Arch::Ar => train_ar(&rd, &pairs),
    }
}

fn train_flowseq(rd: &RunDir, pairs: &[EncodedPair], dev: Option<&[EncodedPair]>, verify_flow: bool) -> CmdResult {
    let cfg = &rd.config;
    let model = FlowSeq::new(cfg.model.clone(), cfg.seed())?;
    let mut hooks = TrainHooks {
        out_dir: Some(rd.path.clone()),
        ..TrainHooks::default()
    };
    if let Some(dev) = dev {
        hooks.dev_score = Some(Box::new(move |m: &FlowSeq| dev_bleu(m, dev)));
    }
    let summary = train(&model, pairs, &cfg.train, &mut hooks)?;
    model.save(&rd.path.join(FINAL_CHECKPOINT))?;
    log::info!(
        "trained {} steps ({} pairs skipped); best checkpoints: {}",
        summary.steps,
        summary.skipped_pairs,
        summary.best.iter().map(|b| format!("{}:{:.3}", b.step, b.score)).collect::<Vec<_>>().join(" ")
    );
    if verify_flow {
        let probe = dev.unwrap_or(pairs);
        check_flow(&model.frozen()?, &probe[..probe.len().min(64)])?;
    }
    Ok(())
}

/// Corpus BLEU of argmax decoding on the dev pairs.
fn dev_bleu(model: &FlowSeq, dev: &[EncodedPair]) -> flowseq_core::Result<f64> {
    let frozen = model.frozen()?;
    let mut hyps = Vec::with_capacity(dev.len());
    for chunk in dev.chunks(64) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|p| p.src.clone()).collect();
        hyps.extend(argmax_decode(&frozen, &TokenBatch::from_rows(&rows, 0)?)?.into_iter().map(|h| h.tokens));
    }
    let refs: Vec<Vec<u32>> = dev.iter().map(|p| trim_at_eos(&p.tgt)).collect();
    Ok(corpus_bleu(&hyps, &refs)?.bleu)
}

/// Round-trips posterior latents of `pairs` through the trained flow.
fn check_flow(model: &FlowSeq, pairs: &[EncodedPair]) -> CmdResult {
    let (src, tgt) = make_batch(pairs, model.config.flow.n_scales)?;
    let enc = model.encode(&src, &Ctx::eval())?;
    let post = model.posterior_params(&tgt, &enc, 0.0, &Ctx::eval())?;
    let mask = tgt.mask_tensor(model.dtype())?;
    let (z, _) = sample_posterior(&post, &mask, &mut NoiseRng::new(model.config.model.src_vocab as u64))?;
    let tol = match model.config.model.precision {
        Precision::F64 => verify::INVERT_TOL_F64,
        Precision::F32 => verify::INVERT_TOL_F32,
    };
    let err = verify::round_trip_error(&model.flow, &z, &mask, &enc)?;
    if err < tol {
        log::info!("flow round trip on {} sentences: max error {err:.3e} < {tol:e}", pairs.len());
        return Ok(());
    }
    let layer = verify::locate_inversion_failure(&model.flow, &z, &mask, &enc, tol)?
        .map(|(name, e)| format!("; first failing layer {name} ({e:.3e})"))
        .unwrap_or_default();
    Err(Failure::Verification(format!("flow round trip error {err:.3e} >= {tol:e}{layer}")))
}

fn train_ar(rd: &RunDir, pairs: &[EncodedPair]) -> CmdResult {
    let cfg = &rd.config;
    let model = ArModel::new(cfg.ar.clone(), cfg.seed())?;
    let path = rd.path.join("metrics.jsonl");
    let mut log_file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut write_err = None;
    let last = model.train(pairs, &cfg.train, |step, loss| {
        log::info!("step {} loss {loss:.4}", step - 1);
        let line = serde_json::json!({ "step": step - 1, "loss": loss });
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&path, e).into());
    }
    model.save(&rd.path.join(FINAL_CHECKPOINT))?;
    log::info!("final loss {last:.4}");
    Ok(())
}
