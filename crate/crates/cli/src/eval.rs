use std::path::PathBuf;

use clap::{ArgAction, Args};
use flowseq_core::decoding::{ArModel, DecodeConfig, Method};
use flowseq_core::eval::{
    aggregate, corpus_bleu, loo_bleu, multi_ref_bleu, pairwise_bleu, read_records, render_tables, write_records, BeamTranslator, BenchConfig, BleuReport,
    FlowSeqTranslator, LatencyReport, Translator, BUCKET_BATCH_SIZE, STANDARD_BATCH_SIZES,
};
use flowseq_core::model::FlowSeq;
use flowseq_core::Error;
use serde::Serialize;

use crate::run::{read_token_lines, Arch, RunDir};
use crate::translate::write_lines;
use crate::{CmdResult, Failure};

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    /// Reference file; repeat for multiple references.
    #[arg(long = "ref", alias = "refs", required = true)]
    refs: Vec<PathBuf>,
    /// Also write the report as one line-delimited record.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn render_bleu(r: &BleuReport) -> String {
    let p: Vec<String> = r.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
    format!(
        "BLEU = {:.2}, {} (BP = {:.3}, hyp_len = {}, ref_len = {})",
        r.bleu,
        p.join("/"),
        r.brevity_penalty,
        r.hyp_len,
        r.ref_len
    )
}

fn write_report<T: Serialize>(path: &Option<PathBuf>, record: &T) -> flowseq_core::Result<String> {
    let line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
    if let Some(p) = path {
        write_lines(p, std::slice::from_ref(&line))?;
    }
    Ok(line)
}

pub fn score(args: ScoreArgs) -> CmdResult {
    let hyps = read_token_lines(&args.hyp)?;
    let refs = args.refs.iter().map(|p| read_token_lines(p)).collect::<flowseq_core::Result<Vec<_>>>()?;
    for (p, r) in args.refs.iter().zip(&refs) {
        if r.len() != hyps.len() {
            return Err(Failure::Usage(format!("{} has {} lines but {} has {}", args.hyp.display(), hyps.len(), p.display(), r.len())));
        }
    }
    let report = if refs.len() == 1 {
        corpus_bleu(&hyps, &refs[0])?
    } else {
        let per_sentence: Vec<Vec<Vec<String>>> = (0..hyps.len()).map(|i| refs.iter().map(|r| r[i].clone()).collect()).collect();
        multi_ref_bleu(&hyps, &per_sentence)?
    };
    println!("{}", write_report(&args.report, &report)?);
    println!("{}", render_bleu(&report));
    Ok(())
}

#[derive(Args)]
pub struct DiversityArgs {
    /// Hypotheses, `m` consecutive lines per source sentence.
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    hyps_per_sentence: usize,
    /// Reference file; repeat (at least twice) for leave-one-out BLEU.
    #[arg(long = "ref")]
    refs: Vec<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct DiversityReport {
    sentences: usize,
    hyps_per_sentence: usize,
    pairwise_bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loo_bleu: Option<f64>,
}

pub fn diversity(args: DiversityArgs) -> CmdResult {
    let m = args.hyps_per_sentence;
    let lines = read_token_lines(&args.hyps)?;
    if m < 2 || lines.len() % m != 0 {
        return Err(Failure::Usage(format!("{} lines cannot be split into sets of {m} (need m >= 2)", lines.len())));
    }
    let sets: Vec<Vec<Vec<String>>> = lines.chunks(m).map(<[_]>::to_vec).collect();
    let refs = args.refs.iter().map(|p| read_token_lines(p)).collect::<flowseq_core::Result<Vec<_>>>()?;
    let loo = if refs.is_empty() {
        None
    } else {
        if refs.iter().any(|r| r.len() != sets.len()) {
            return Err(Failure::Usage(format!("every reference file needs {} lines", sets.len())));
        }
        let per_sentence: Vec<Vec<Vec<String>>> = (0..sets.len()).map(|i| refs.iter().map(|r| r[i].clone()).collect()).collect();
        Some(loo_bleu(&sets, &per_sentence)?)
    };
    let report = DiversityReport {
        sentences: sets.len(),
        hyps_per_sentence: m,
        pairwise_bleu: pairwise_bleu(&sets, m)?,
        loo_bleu: loo,
    };
    println!("{}", write_report(&args.report, &report)?);
    println!("sentences\t{}\npairwise BLEU\t{:.2}", report.sentences, report.pairwise_bleu);
    if let Some(l) = report.loo_bleu {
        println!("leave-one-out BLEU\t{l:.2}");
    }
    Ok(())
}

#[derive(Args)]
pub struct BenchArgs {
    /// Run directories to time, comma separated.
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// Source sentences.
    #[arg(long)]
    input: Option<PathBuf>,
    /// References, used only for their lengths (bucketing); defaults to the
    /// source lengths.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = STANDARD_BATCH_SIZES)]
    batch_sizes: Vec<usize>,
    /// Also time each target-length bucket.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    buckets: bool,
    #[arg(long, default_value_t = BUCKET_BATCH_SIZE)]
    bucket_batch_size: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// Decoding method for FlowSeq runs.
    #[arg(long, default_value = "argmax")]
    method: Method,
    /// Beam width for autoregressive runs.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Autoregressive run used to rescore NPD candidates.
    #[arg(long)]
    rescorer: Option<PathBuf>,
    /// Raw timing records (line-delimited).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Re-aggregate existing timing records instead of timing.
    #[arg(long, conflicts_with_all = ["models", "input"])]
    from_records: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

enum Loaded {
    Flow(FlowSeq),
    Ar(ArModel),
}

pub fn bench(args: BenchArgs) -> CmdResult {
    let records = match &args.from_records {
        Some(p) => read_records(p)?,
        None => time_models(&args)?,
    };
    if let Some(p) = &args.records {
        write_records(p, &records)?;
    }
    let reports = aggregate(&records);
    let lines = reports
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| Error::Data(e.to_string())))
        .collect::<flowseq_core::Result<Vec<_>>>()?;
    if let Some(p) = &args.report {
        write_lines(p, &lines)?;
    }
    for l in &lines {
        println!("{l}");
    }
    println!("{}", render_tables(&reports));
    print_ratios(&reports);
    Ok(())
}

fn print_ratios(reports: &[LatencyReport]) {
    for r in reports {
        if let Some(ratio) = r.bucket_ratio() {
            println!("{}: longest/shortest bucket {ratio:.2}", r.model);
        }
        if r.by_batch_size.len() > 1 {
            println!("{}: strictly faster with batch size: {}", r.model, r.strictly_faster_with_batch());
        }
    }
}

fn time_models(args: &BenchArgs) -> flowseq_core::Result<Vec<flowseq_core::eval::TimingRecord>> {
    let input = args.input.as_ref().ok_or_else(|| Error::Config("bench needs --input (or --from-records)".into()))?;
    if args.models.is_empty() {
        return Err(Error::Config("bench needs --models".into()));
    }
    let runs = args.models.iter().map(|p| RunDir::open(p)).collect::<flowseq_core::Result<Vec<_>>>()?;
    for r in &runs[1..] {
        runs[0].check_vocab_compatible(r)?;
    }
    let src_tokens = read_token_lines(input)?;
    let sources: Vec<Vec<u32>> = src_tokens.iter().map(|t| runs[0].src_vocab.encode_with_eos(t)).collect();
    let lengths: Vec<usize> = match &args.reference {
        Some(p) => read_token_lines(p)?.iter().map(Vec::len).collect(),
        None => src_tokens.iter().map(Vec::len).collect(),
    };
    if lengths.len() != sources.len() {
        return Err(Error::Data(format!("{} sources but {} reference lines", sources.len(), lengths.len())));
    }
    let rescorer = match &args.rescorer {
        Some(p) => {
            let ar = RunDir::open(p)?;
            runs[0].check_vocab_compatible(&ar)?;
            Some(ar.load_ar(&ar.checkpoint(None))?)
        }
        None => None,
    };
    let models = runs
        .iter()
        .map(|r| {
            log::info!("{}: digest {} seed {}", r.path.display(), r.config.digest(), r.config.seed());
            let ckpt = r.checkpoint(None);
            Ok(match r.config.run.arch {
                Arch::FlowSeq => Loaded::Flow(r.load_flowseq(&ckpt)?),
                Arch::Ar => Loaded::Ar(r.load_ar(&ckpt)?),
            })
        })
        .collect::<flowseq_core::Result<Vec<_>>>()?;
    let decode = DecodeConfig {
        method: args.method,
        ..runs[0].config.decode.clone()
    };
    let translators: Vec<Box<dyn Translator + '_>> = models
        .iter()
        .map(|m| -> Box<dyn Translator + '_> {
            match m {
                Loaded::Flow(model) => Box::new(FlowSeqTranslator {
                    model,
                    config: decode.clone(),
                    rescorer: rescorer.as_ref(),
                }),
                Loaded::Ar(model) => Box::new(BeamTranslator { model, beam: args.beam }),
            }
        })
        .collect();
    let refs: Vec<&dyn Translator> = translators.iter().map(|t| t.as_ref()).collect();
    let cfg = BenchConfig {
        batch_sizes: args.batch_sizes.clone(),
        buckets: args.buckets,
        bucket_batch_size: args.bucket_batch_size,
        repetitions: args.repetitions,
        ..BenchConfig::default()
    };
    flowseq_core::eval::latency_benchmark(&refs, &sources, &lengths, &cfg)
}
