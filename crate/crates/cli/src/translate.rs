use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use flowseq_core::config::{KvConfig, KvSection};
use flowseq_core::data::TokenBatch;
use flowseq_core::decoding::{translate, DecodeConfig, Hypothesis, Method};
use flowseq_core::Error;
use serde::Serialize;

use crate::run::{read_token_lines, Arch, RunDir};
use crate::CmdResult;

#[derive(Args)]
pub struct TranslateArgs {
    /// Run directory of the model.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint file; defaults to the run's final checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Line-delimited records with scores and latencies.
    #[arg(long)]
    side: Option<PathBuf>,
    /// argmax, npd, or iwd (FlowSeq runs).
    #[arg(long)]
    method: Option<Method>,
    /// Length candidates per sentence.
    #[arg(long)]
    l: Option<usize>,
    /// Latent samples per length candidate.
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Importance samples per candidate.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Beam width for autoregressive runs.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Autoregressive run used to rescore NPD candidates.
    #[arg(long)]
    rescorer: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Override a `decode.*` key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl TranslateArgs {
    fn decode_config(&self, base: &DecodeConfig) -> flowseq_core::Result<DecodeConfig> {
        let mut kv = KvConfig::new();
        kv.apply_overrides(&self.overrides)?;
        kv.check_prefixes(&["decode"], DecodeConfig::valid_keys)?;
        let mut cfg = DecodeConfig::read_over(base.clone(), &kv)?;
        if let Some(m) = self.method {
            cfg.method = m;
        }
        cfg.l = self.l.unwrap_or(cfg.l);
        cfg.r = self.r.unwrap_or(cfg.r);
        cfg.temperature = self.temperature.unwrap_or(cfg.temperature);
        cfg.k_iwd = self.k.unwrap_or(cfg.k_iwd);
        cfg.beam = self.beam.unwrap_or(cfg.beam);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct SideRecord<'a> {
    line: usize,
    hypothesis: &'a str,
    score: f64,
    raw_length: usize,
    latency_seconds: f64,
    method: String,
    digest: String,
    seed: u64,
}

pub fn run(args: TranslateArgs) -> CmdResult {
    let rd = RunDir::open(&args.run)?;
    let cfg = args.decode_config(&rd.config.decode)?;
    let ckpt = rd.checkpoint(args.checkpoint.as_deref());
    let sources: Vec<Vec<u32>> = read_token_lines(&args.input)?
        .iter()
        .map(|toks| rd.src_vocab.encode_with_eos(toks))
        .collect();

    let (hyps, method) = match rd.config.run.arch {
        Arch::FlowSeq => {
            let model = rd.load_flowseq(&ckpt)?;
            let rescorer = match &args.rescorer {
                Some(p) => {
                    let ar = RunDir::open(p)?;
                    rd.check_vocab_compatible(&ar)?;
                    Some(ar.load_ar(&ar.checkpoint(None))?)
                }
                None => None,
            };
            let hyps = batched(&sources, args.batch_size, |src| translate(&model, src, &cfg, rescorer.as_ref()))?;
            (hyps, cfg.method.to_string())
        }
        Arch::Ar => {
            let model = rd.load_ar(&ckpt)?;
            let hyps = batched(&sources, args.batch_size, |src| model.beam_search(src, cfg.beam))?;
            (hyps, format!("beam{}", cfg.beam))
        }
    };

    let lines: Vec<String> = hyps.iter().map(|h| rd.tgt_vocab.decode(&h.tokens).join(" ")).collect();
    write_lines(&args.output, &lines)?;
    let digest = rd.config.digest().to_hex();
    let side = args.side.clone().unwrap_or_else(|| meta_path(&args.output));
    let records: Vec<String> = hyps
        .iter()
        .zip(&lines)
        .enumerate()
        .map(|(i, (h, line))| {
            serde_json::to_string(&SideRecord {
                line: i,
                hypothesis: line,
                score: h.score,
                raw_length: h.raw_length,
                latency_seconds: h.latency_seconds,
                method: method.clone(),
                digest: digest.clone(),
                seed: cfg.seed,
            })
            .expect("side record serializes")
        })
        .collect();
    write_lines(&side, &records)?;
    log::info!("translated {} sentences with {method}; records in {}", lines.len(), side.display());
    Ok(())
}

fn batched(sources: &[Vec<u32>], batch: usize, mut f: impl FnMut(&TokenBatch) -> flowseq_core::Result<Vec<Hypothesis>>) -> flowseq_core::Result<Vec<Hypothesis>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch.max(1)) {
        out.extend(f(&TokenBatch::from_rows(chunk, 0)?)?);
    }
    Ok(out)
}

fn meta_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".jsonl");
    output.with_file_name(name)
}

pub fn write_lines(path: &Path, lines: &[String]) -> flowseq_core::Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
