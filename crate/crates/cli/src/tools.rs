use std::path::PathBuf;

use clap::Args;
use flowseq_core::data::EncodedPair;
use flowseq_core::decoding::distill_pairs;
use flowseq_core::training::{average_checkpoints, read_manifest};
use flowseq_core::verify::{render_checks, selftest as run_selftest, Level, SelftestOptions};

use crate::run::{read_token_lines, RunDir};
use crate::translate::write_lines;
use crate::{CmdResult, Failure};

#[derive(Args)]
pub struct SelftestArgs {
    /// `fast` or `full`.
    #[arg(long, default_value = "fast")]
    level: Level,
    /// Corrupt the inverse of the named coupling layer (negative control).
    #[arg(long, hide = true)]
    corrupt_coupling: Option<String>,
}

pub fn selftest(args: SelftestArgs) -> CmdResult {
    let opts = SelftestOptions {
        corrupt_coupling: args.corrupt_coupling,
    };
    let checks = run_selftest(args.level, &opts);
    print!("{}", render_checks(&checks));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("failing checks: {}", failed.join(", "))))
    }
}

#[derive(Args)]
pub struct AvgArgs {
    /// Checkpoint files to average.
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Average the best checkpoints listed in a run's manifest.
    #[arg(long, conflicts_with = "inputs")]
    run: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

pub fn avg_checkpoints(args: AvgArgs) -> CmdResult {
    let paths = match &args.run {
        Some(r) => read_manifest(&r.join("checkpoints").join("best.json"))?.into_iter().map(|b| b.path).collect(),
        None => args.inputs.clone(),
    };
    if paths.is_empty() {
        return Err(Failure::Usage("no checkpoints to average (use --inputs or --run)".into()));
    }
    let avg = average_checkpoints(&paths)?;
    avg.write(&args.output)?;
    log::info!("averaged {} checkpoints into {}", paths.len(), args.output.display());
    Ok(())
}

#[derive(Args)]
pub struct DistillArgs {
    /// Autoregressive run used as teacher.
    #[arg(long)]
    teacher: PathBuf,
    /// Source sentences to re-translate.
    #[arg(long)]
    src: PathBuf,
    /// Output file of teacher translations, aligned with `--src`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

pub fn distill(args: DistillArgs) -> CmdResult {
    let rd = RunDir::open(&args.teacher)?;
    let teacher = rd.load_ar(&rd.checkpoint(None))?;
    let pairs: Vec<EncodedPair> = read_token_lines(&args.src)?
        .iter()
        .map(|toks| EncodedPair {
            src: rd.src_vocab.encode_with_eos(toks),
            tgt: Vec::new(),
        })
        .collect();
    let out = distill_pairs(&teacher, &pairs, args.beam, args.batch_size)?;
    let lines: Vec<String> = out
        .iter()
        .map(|p| rd.tgt_vocab.decode(&flowseq_core::decoding::trim_at_eos(&p.tgt)).join(" "))
        .collect();
    write_lines(&args.output, &lines)?;
    log::info!("distilled {} sentences with beam {} (teacher digest {})", lines.len(), args.beam, rd.config.digest());
    Ok(())
}
