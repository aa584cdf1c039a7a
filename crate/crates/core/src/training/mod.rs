//! Variational training: the ELBO objective, KL annealing, AMSGrad, and
//! checkpoint management.

mod elbo;
mod optim;
mod schedule;

pub use elbo::{elbo_loss, length_loss, sequence_log_likelihood, smoothed_nll, ElboReport, ElboSettings};
pub use optim::{clip_grad_norm, grad_norm, Adam};
pub use schedule::{kl_weight, learning_rate};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compute::{Checkpoint, NoiseRng, Parameter};
use crate::data::{epoch_batches, BatchConfig, EncodedPair};
use crate::model::FlowSeq;
use crate::nets::Ctx;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub amsgrad: bool,
    pub grad_clip: f64,
    pub label_smoothing: f64,
    /// `auto` = 15% of `steps`.
    pub kl_zero_steps: Option<usize>,
    /// `auto` = 5% of `steps`.
    pub kl_ramp_steps: Option<usize>,
    pub kl_samples: usize,
    pub batch_sentences: usize,
    pub max_tokens: usize,
    pub token_dropout_rate: f64,
    pub seed: u64,
    pub log_interval: usize,
    pub eval_interval: usize,
    pub keep_best: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr_init: 5e-4,
            lr_decay: 0.999995,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            amsgrad: true,
            grad_clip: 1.0,
            label_smoothing: 0.1,
            kl_zero_steps: None,
            kl_ramp_steps: None,
            kl_samples: 1,
            batch_sentences: 64,
            max_tokens: 16_384,
            token_dropout_rate: 0.2,
            seed: 1,
            log_interval: 100,
            eval_interval: 1000,
            keep_best: 5,
        }
    }
}

crate::kv_section!(TrainConfig, "train", {
    steps,
    lr_init,
    lr_decay,
    adam_beta1,
    adam_beta2,
    adam_eps,
    amsgrad,
    grad_clip,
    label_smoothing,
    kl_zero_steps,
    kl_ramp_steps,
    kl_samples,
    batch_sentences,
    max_tokens,
    token_dropout_rate,
    seed,
    log_interval,
    eval_interval,
    keep_best,
});

impl TrainConfig {
    /// The full-scale optimizer and schedule.
    pub fn full_scale() -> Self {
        Self {
            steps: 200_000,
            kl_zero_steps: Some(30_000),
            kl_ramp_steps: Some(10_000),
            batch_sentences: 2048,
            ..Self::default()
        }
    }

    pub fn kl_zero(&self) -> usize {
        self.kl_zero_steps.unwrap_or(self.steps * 3 / 20)
    }

    pub fn kl_ramp(&self) -> usize {
        self.kl_ramp_steps.unwrap_or(self.steps / 20)
    }

    pub fn kl_weight(&self, step: usize) -> f64 {
        kl_weight(step, self.kl_zero(), self.kl_ramp())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        learning_rate(step, self.lr_init, self.lr_decay)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_init > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("train.lr_init must be positive and train.lr_decay in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("train.grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("train.label_smoothing must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.token_dropout_rate) {
            return bad("train.token_dropout_rate must lie in [0, 1]");
        }
        if self.batch_sentences == 0 || self.kl_samples == 0 {
            return bad("train.batch_sentences and train.kl_samples must be at least 1");
        }
        Ok(())
    }
}

/// One line of the metric log. `step` is the 0-based index of the update
/// the values come from; `kl_weight` and `lr` are the ones it used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub length_loss: f64,
    pub elbo: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub step: usize,
    pub score: f64,
    pub path: PathBuf,
}

/// Optional side effects of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory for `metrics.jsonl`, `timing.jsonl`, and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
    /// Dev-set score (higher is better) computed at every eval interval.
    pub dev_score: Option<Box<dyn FnMut(&FlowSeq) -> Result<f64> + 'a>>,
    /// Called with every logged record.
    pub on_record: Option<Box<dyn FnMut(&MetricRecord) + 'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<MetricRecord>,
    pub best: Vec<BestEntry>,
    pub skipped_pairs: usize,
    pub steps: usize,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, best: &[BestEntry]) -> Result<()> {
    let path = dir.join("best.json");
    let text = serde_json::to_string_pretty(best).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a best-k manifest written by [`train`].
pub fn read_manifest(path: &Path) -> Result<Vec<BestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

const INIT_STREAM: u64 = 0x494e_4954;
const STEP_STREAM: u64 = 0x5354_4550;

/// Trains `model` on `pairs` for `cfg.steps` updates.
///
/// Batch order, dropout, and posterior noise derive from `cfg.seed`, so two
/// runs with the same inputs produce identical metric logs. A non-finite
/// loss or gradient stops training with [`Error::Diverged`]; when an output
/// directory is set, the parameters from before the failing update are
/// saved as `checkpoints/last_good.ckpt`.
pub fn train(model: &FlowSeq, pairs: &[EncodedPair], cfg: &TrainConfig, hooks: &mut TrainHooks) -> Result<TrainSummary> {
    cfg.validate()?;
    let ckpt_dir = hooks.out_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        for f in ["metrics.jsonl", "timing.jsonl"] {
            let p = hooks.out_dir.as_ref().unwrap().join(f);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let bcfg = BatchConfig {
        num_scales: model.config.flow.n_scales,
        batch_sentences: cfg.batch_sentences,
        max_tokens: cfg.max_tokens,
        max_src_len: model.config.model.max_positions,
        max_tgt_len: model.config.model.max_positions,
    };
    let params: Vec<Parameter> = model.store.trainable().cloned().collect();
    let mut opt = Adam::new(params.clone(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.amsgrad)?;
    let root = NoiseRng::new(cfg.seed);
    let start = std::time::Instant::now();

    let mut records = Vec::new();
    let mut best: Vec<BestEntry> = Vec::new();
    let mut skipped = 0;
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.steps {
        let ep = epoch_batches(pairs, &bcfg, cfg.seed, epoch)?;
        if ep.batches.is_empty() {
            return Err(Error::Data("no trainable sentence pairs after length filtering".into()));
        }
        if epoch == 0 {
            skipped = ep.skipped;
        }
        epoch += 1;
        for (src, tgt) in &ep.batches {
            if step >= cfg.steps {
                break;
            }
            if !model.flow.is_initialized()? {
                model.initialize_flow(src, tgt, &mut root.fork(INIT_STREAM))?;
            }
            let mut rng = root.fork(STEP_STREAM).fork(step as u64);
            let ctx = Ctx::train(rng.fork(1));
            let settings = ElboSettings {
                kl_weight: cfg.kl_weight(step),
                label_smoothing: cfg.label_smoothing,
                token_dropout: cfg.token_dropout_rate,
                kl_samples: cfg.kl_samples,
            };
            let (loss, mut report) = elbo_loss(model, src, tgt, &settings, &ctx, &mut rng)?;
            report.step = step;
            let loss_value = crate::compute::ops::to_f64_scalar(&loss)?;
            let mut grads = loss.backward()?;
            let norm = clip_grad_norm(&mut grads, &params, cfg.grad_clip)?;
            if !loss_value.is_finite() || !norm.is_finite() {
                if let Some(d) = &ckpt_dir {
                    model.save(&d.join("last_good.ckpt"))?;
                }
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "loss {loss_value}, recon {}, kl {}, length {}, grad norm {norm}",
                        report.recon_loss, report.kl_estimate, report.length_loss
                    ),
                });
            }
            let lr = cfg.learning_rate(step);
            opt.step(&grads, lr)?;
            let index = step;
            step += 1;

            let eval_now = cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.steps);
            let log_now = eval_now || (cfg.log_interval > 0 && index % cfg.log_interval == 0);
            if !log_now {
                continue;
            }
            let mut rec = MetricRecord {
                step: index,
                recon: report.recon_loss,
                kl: report.kl_estimate,
                kl_weight: report.kl_weight,
                length_loss: report.length_loss,
                elbo: report.elbo,
                lr,
                grad_norm: norm,
                dev_bleu: None,
            };
            if eval_now {
                let score = match hooks.dev_score.as_mut() {
                    Some(f) => {
                        let s = f(model)?;
                        rec.dev_bleu = Some(s);
                        s
                    }
                    None => report.elbo,
                };
                if let Some(d) = &ckpt_dir {
                    let path = d.join(format!("step{step:08}.ckpt"));
                    model.save(&path)?;
                    best.push(BestEntry { step, score, path });
                    best.sort_by(|a, b| b.score.total_cmp(&a.score).then(b.step.cmp(&a.step)));
                    best.truncate(cfg.keep_best.max(1));
                    write_manifest(d, &best)?;
                }
            }
            if let Some(dir) = &hooks.out_dir {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
                append_line(&dir.join("metrics.jsonl"), &line)?;
                let timing = serde_json::json!({ "step": index, "wall_time": start.elapsed().as_secs_f64() });
                append_line(&dir.join("timing.jsonl"), &timing.to_string())?;
            }
            if let Some(f) = hooks.on_record.as_mut() {
                f(&rec);
            }
            log::info!(
                "step {index} recon {:.4} kl {:.4} w {:.3} len {:.4} lr {:.3e}{}",
                rec.recon,
                rec.kl,
                rec.kl_weight,
                rec.length_loss,
                lr,
                rec.dev_bleu.map(|b| format!(" dev {b:.2}")).unwrap_or_default()
            );
            records.push(rec);
        }
    }
    Ok(TrainSummary {
        records,
        best,
        skipped_pairs: skipped,
        steps: step,
    })
}

/// Element-wise mean of checkpoints that share a config digest.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    let ckpts = paths.iter().map(|p| Checkpoint::read(p)).collect::<Result<Vec<_>>>()?;
    Checkpoint::average(&ckpts)
}
