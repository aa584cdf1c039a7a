use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{bucket_label, length_bucket, TokenBatch, LENGTH_BUCKETS};
use crate::decoding::{self, ArModel, DecodeConfig, Hypothesis};
use crate::model::FlowSeq;
use crate::{Error, Result};

pub const STANDARD_BATCH_SIZES: [usize; 6] = [1, 4, 8, 32, 64, 128];
pub const BUCKET_BATCH_SIZE: usize = 32;

/// Anything that turns a source batch into hypotheses.
pub trait Translator {
    fn tag(&self) -> String;
    fn translate(&self, src: &TokenBatch) -> Result<Vec<Hypothesis>>;
}

pub struct FlowSeqTranslator<'a> {
    pub model: &'a FlowSeq,
    pub config: DecodeConfig,
    pub rescorer: Option<&'a ArModel>,
}

impl Translator for FlowSeqTranslator<'_> {
    fn tag(&self) -> String {
        format!("flowseq-{}", self.config.method)
    }

    fn translate(&self, src: &TokenBatch) -> Result<Vec<Hypothesis>> {
        decoding::translate(self.model, src, &self.config, self.rescorer)
    }
}

pub struct BeamTranslator<'a> {
    pub model: &'a ArModel,
    pub beam: usize,
}

impl Translator for BeamTranslator<'_> {
    fn tag(&self) -> String {
        format!("ar-beam{}", self.beam)
    }

    fn translate(&self, src: &TokenBatch) -> Result<Vec<Hypothesis>> {
        self.model.beam_search(src, self.beam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    BatchSize,
    Bucket,
}

/// One timed pass over a sentence set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub model: String,
    pub kind: SweepKind,
    /// Batch size, or bucket index.
    pub key: usize,
    pub repetition: usize,
    pub sentences: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    /// (batch size, median seconds per sentence)
    pub by_batch_size: Vec<(usize, f64)>,
    /// (bucket label, median seconds per sentence)
    pub by_bucket: Vec<(String, f64)>,
}

impl LatencyReport {
    /// Longest non-empty bucket time over shortest non-empty bucket time.
    pub fn bucket_ratio(&self) -> Option<f64> {
        let first = self.by_bucket.first()?.1;
        let last = self.by_bucket.last()?.1;
        Some(last / first)
    }

    pub fn strictly_faster_with_batch(&self) -> bool {
        self.by_batch_size.windows(2).all(|w| w[1].1 < w[0].1)
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    /// Time each non-empty target-length bucket at `bucket_batch_size`.
    pub buckets: bool,
    pub bucket_batch_size: usize,
    pub repetitions: usize,
    pub warmup_batches: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: STANDARD_BATCH_SIZES.to_vec(),
            buckets: true,
            bucket_batch_size: BUCKET_BATCH_SIZE,
            repetitions: 5,
            warmup_batches: 1,
        }
    }
}

fn time_pass(t: &dyn Translator, sources: &[Vec<u32>], batch: usize) -> Result<f64> {
    let mut secs = 0.0;
    for chunk in sources.chunks(batch) {
        let src = TokenBatch::from_rows(chunk, 0)?;
        let start = Instant::now();
        let out = t.translate(&src)?;
        secs += start.elapsed().as_secs_f64();
        std::hint::black_box(out);
    }
    Ok(secs)
}

fn warm_up(t: &dyn Translator, sources: &[Vec<u32>], batch: usize, n: usize) -> Result<()> {
    for chunk in sources.chunks(batch).take(n) {
        t.translate(&TokenBatch::from_rows(chunk, 0)?)?;
    }
    Ok(())
}

/// Times every translator over `sources` for each batch size and, at the
/// bucket batch size, for each target-length bucket (by `target_lengths`).
/// Returns the raw records; use [`aggregate`] for the report.
pub fn latency_benchmark(translators: &[&dyn Translator], sources: &[Vec<u32>], target_lengths: &[usize], cfg: &BenchConfig) -> Result<Vec<TimingRecord>> {
    if sources.len() != target_lengths.len() {
        return Err(Error::Data("one target length per source sentence is required".into()));
    }
    if cfg.repetitions == 0 || cfg.batch_sizes.contains(&0) || cfg.bucket_batch_size == 0 {
        return Err(Error::Config("repetitions and batch sizes must be positive".into()));
    }
    let mut buckets: Vec<Vec<Vec<u32>>> = vec![Vec::new(); LENGTH_BUCKETS.len()];
    for (s, &len) in sources.iter().zip(target_lengths) {
        buckets[length_bucket(len)].push(s.clone());
    }
    let mut records = Vec::new();
    for t in translators {
        let tag = t.tag();
        for &b in &cfg.batch_sizes {
            warm_up(*t, sources, b, cfg.warmup_batches)?;
            for rep in 0..cfg.repetitions {
                records.push(TimingRecord {
                    model: tag.clone(),
                    kind: SweepKind::BatchSize,
                    key: b,
                    repetition: rep,
                    sentences: sources.len(),
                    seconds: time_pass(*t, sources, b)?,
                });
            }
        }
        for (k, set) in buckets.iter().enumerate().filter(|(_, s)| cfg.buckets && !s.is_empty()) {
            warm_up(*t, set, cfg.bucket_batch_size, cfg.warmup_batches)?;
            for rep in 0..cfg.repetitions {
                records.push(TimingRecord {
                    model: tag.clone(),
                    kind: SweepKind::Bucket,
                    key: k,
                    repetition: rep,
                    sentences: set.len(),
                    seconds: time_pass(*t, set, cfg.bucket_batch_size)?,
                });
            }
        }
    }
    Ok(records)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-model reports: median over repetitions of seconds per sentence.
pub fn aggregate(records: &[TimingRecord]) -> Vec<LatencyReport> {
    let mut groups: BTreeMap<(String, SweepKind, usize), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.model) {
            order.push(r.model.clone());
        }
        groups
            .entry((r.model.clone(), r.kind, r.key))
            .or_default()
            .push(r.seconds / r.sentences.max(1) as f64);
    }
    order
        .into_iter()
        .map(|model| {
            let pick = |kind: SweepKind| {
                groups
                    .iter()
                    .filter(|((m, k, _), _)| *m == model && *k == kind)
                    .map(|((_, _, key), v)| (*key, median(v.clone())))
                    .collect::<Vec<_>>()
            };
            LatencyReport {
                by_batch_size: pick(SweepKind::BatchSize),
                by_bucket: pick(SweepKind::Bucket).into_iter().map(|(k, v)| (bucket_label(k), v)).collect(),
                model,
            }
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[TimingRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TimingRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Human-readable batch-size and length-bucket tables.
pub fn render_tables(reports: &[LatencyReport]) -> String {
    let mut s = String::from("batch size");
    for r in reports {
        s.push_str(&format!("\t{}", r.model));
    }
    s.push('\n');
    if let Some(first) = reports.first() {
        for (i, (b, _)) in first.by_batch_size.iter().enumerate() {
            s.push_str(&b.to_string());
            for r in reports {
                s.push_str(&format!("\t{:.6}", r.by_batch_size.get(i).map_or(f64::NAN, |x| x.1)));
            }
            s.push('\n');
        }
    }
    s.push_str("\nlength bucket");
    for r in reports {
        s.push_str(&format!("\t{}", r.model));
    }
    s.push('\n');
    if let Some(first) = reports.first() {
        for (i, (label, _)) in first.by_bucket.iter().enumerate() {
            s.push_str(label);
            for r in reports {
                s.push_str(&format!("\t{:.6}", r.by_bucket.get(i).map_or(f64::NAN, |x| x.1)));
            }
            s.push('\n');
        }
    }
    s
}
