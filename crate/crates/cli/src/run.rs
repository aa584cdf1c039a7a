//! Run configuration and run directories.
//!
//! A run directory holds `config.txt` (the full canonical configuration),
//! `src.vocab`, `tgt.vocab`, the metric logs written by training, and the
//! checkpoints.

use std::path::{Path, PathBuf};

use flowseq_core::config::{ConfigDigest, KvConfig, KvSection};
use flowseq_core::data::{build_vocabs, synth_corpus, ParallelCorpus, SynthTask, Vocabulary};
use flowseq_core::decoding::{ArConfig, ArModel, DecodeConfig};
use flowseq_core::model::{FlowSeq, FlowSeqConfig, ModelConfig, Preset};
use flowseq_core::flow::FlowConfig;
use flowseq_core::training::TrainConfig;
use flowseq_core::{Error, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const SECTIONS: [&str; 7] = ["run", "data", "model", "flow", "train", "decode", "ar"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    FlowSeq,
    Ar,
}

flowseq_core::kv_enum!(Arch {
    FlowSeq => "flowseq",
    Ar => "ar",
});

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub arch: Arch,
    pub preset: Preset,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            arch: Arch::FlowSeq,
            preset: Preset::Tiny,
        }
    }
}

flowseq_core::kv_section!(RunSection, "run", { arch, preset });

/// Where training data comes from. `task = none` reads `src`/`tgt` files.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub task: String,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
    pub src: String,
    pub tgt: String,
    pub dev_src: String,
    pub dev_tgt: String,
    pub min_count: usize,
    pub shared_vocab: bool,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: "lexical-swap".into(),
            vocab_size: 64,
            min_len: 4,
            max_len: 16,
            train_size: 20_000,
            dev_size: 200,
            seed: 1,
            src: String::new(),
            tgt: String::new(),
            dev_src: String::new(),
            dev_tgt: String::new(),
            min_count: 1,
            shared_vocab: false,
            max_src_len: 250,
            max_tgt_len: 250,
        }
    }
}

flowseq_core::kv_section!(DataConfig, "data", {
    task,
    vocab_size,
    min_len,
    max_len,
    train_size,
    dev_size,
    seed,
    src,
    tgt,
    dev_src,
    dev_tgt,
    min_count,
    shared_vocab,
    max_src_len,
    max_tgt_len,
});

impl DataConfig {
    pub fn synth_task(&self) -> Result<Option<SynthTask>> {
        match self.task.as_str() {
            "none" => Ok(None),
            t => t.parse().map(Some),
        }
    }

    /// Training and dev corpora.
    pub fn load(&self) -> Result<(ParallelCorpus, Option<ParallelCorpus>)> {
        let (train, dev) = match self.synth_task()? {
            Some(task) => {
                let c = synth_corpus(task, self.vocab_size, (self.min_len, self.max_len), self.train_size + self.dev_size, self.seed)?;
                c.split_tail(self.dev_size)
            }
            None => {
                if self.src.is_empty() || self.tgt.is_empty() {
                    return Err(Error::Config("data.task = none needs data.src and data.tgt (--src, --tgt)".into()));
                }
                let (c, stats) = ParallelCorpus::from_files(Path::new(&self.src), Path::new(&self.tgt), self.max_src_len, self.max_tgt_len)?;
                log::info!("loaded {} pairs ({} empty, {} too long)", stats.kept, stats.empty, stats.too_long);
                if !self.dev_src.is_empty() {
                    let (d, _) = ParallelCorpus::from_files(Path::new(&self.dev_src), Path::new(&self.dev_tgt), self.max_src_len, self.max_tgt_len)?;
                    return Ok((c, Some(d)));
                }
                c.split_tail(self.dev_size)
            }
        };
        Ok((train, (!dev.is_empty()).then_some(dev)))
    }
}

/// Every configuration section of a run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub model: FlowSeqConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub ar: ArConfig,
}

impl RunConfig {
    /// Defaults of the selected preset, overlaid with `kv`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_prefixes(&SECTIONS, all_keys)?;
        let run = RunSection::from_kv(kv)?;
        Ok(Self {
            data: DataConfig::from_kv(kv)?,
            model: FlowSeqConfig::from_kv(kv, FlowSeqConfig::preset(run.preset))?,
            train: TrainConfig::from_kv(kv)?,
            decode: DecodeConfig::from_kv(kv)?,
            ar: ArConfig::read_over(ArConfig::default(), kv)?,
            run,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.run.to_kv();
        self.data.write_into(&mut kv);
        kv.merge(&self.model.to_kv());
        self.train.write_into(&mut kv);
        self.decode.write_into(&mut kv);
        self.ar.write_into(&mut kv);
        kv
    }

    /// Hash of the canonical text of every section.
    pub fn digest(&self) -> ConfigDigest {
        self.to_kv().digest()
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set_vocab_sizes(&mut self, src: usize, tgt: usize) {
        self.model.model.src_vocab = src;
        self.model.model.tgt_vocab = tgt;
        self.ar.src_vocab = src;
        self.ar.tgt_vocab = tgt;
    }
}

fn all_keys() -> Vec<String> {
    let mut keys = RunSection::valid_keys();
    keys.extend(DataConfig::valid_keys());
    keys.extend(ModelConfig::valid_keys());
    keys.extend(FlowConfig::valid_keys());
    keys.extend(TrainConfig::valid_keys());
    keys.extend(DecodeConfig::valid_keys());
    keys.extend(ArConfig::valid_keys());
    keys
}

/// A finished (or in-progress) training run on disk.
pub struct RunDir {
    pub path: PathBuf,
    pub config: RunConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        let kv = KvConfig::from_file(&path.join(CONFIG_FILE))?;
        Ok(Self {
            config: RunConfig::from_kv(&kv)?,
            src_vocab: Vocabulary::load(&path.join(SRC_VOCAB_FILE))?,
            tgt_vocab: Vocabulary::load(&path.join(TGT_VOCAB_FILE))?,
            path: path.to_path_buf(),
        })
    }

    /// Creates the directory, builds vocabularies from `train`, and writes
    /// the configuration with the vocabulary sizes filled in.
    pub fn create(path: &Path, mut config: RunConfig, train: &ParallelCorpus) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let (src_vocab, tgt_vocab) = build_vocabs(train, config.data.min_count, config.data.shared_vocab)?;
        config.set_vocab_sizes(src_vocab.len(), tgt_vocab.len());
        src_vocab.save(&path.join(SRC_VOCAB_FILE))?;
        tgt_vocab.save(&path.join(TGT_VOCAB_FILE))?;
        let mut text = format!("# digest {}\n", config.digest());
        text.push_str(&config.to_kv().to_text());
        let cfg_path = path.join(CONFIG_FILE);
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            config,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn checkpoint(&self, explicit: Option<&Path>) -> PathBuf {
        explicit.map(Path::to_path_buf).unwrap_or_else(|| self.path.join(FINAL_CHECKPOINT))
    }

    /// Inference view of the FlowSeq model stored at `ckpt`.
    pub fn load_flowseq(&self, ckpt: &Path) -> Result<FlowSeq> {
        self.expect_arch(Arch::FlowSeq)?;
        let model = FlowSeq::new(self.config.model.clone(), self.config.seed())?;
        model.load(ckpt)?;
        model.frozen()
    }

    /// Inference view of the autoregressive model stored at `ckpt`.
    pub fn load_ar(&self, ckpt: &Path) -> Result<ArModel> {
        self.expect_arch(Arch::Ar)?;
        let model = ArModel::new(self.config.ar.clone(), self.config.seed())?;
        model.load(ckpt)?;
        model.frozen()
    }

    fn expect_arch(&self, arch: Arch) -> Result<()> {
        if self.config.run.arch != arch {
            return Err(Error::Config(format!(
                "{} holds a {} model, expected {arch}",
                self.path.display(),
                self.config.run.arch
            )));
        }
        Ok(())
    }

    /// Source and target vocabularies must agree with another run's.
    pub fn check_vocab_compatible(&self, other: &RunDir) -> Result<()> {
        if self.src_vocab != other.src_vocab || self.tgt_vocab != other.tgt_vocab {
            return Err(Error::VocabMismatch(format!(
                "{} and {} were trained with different vocabularies",
                self.path.display(),
                other.path.display()
            )));
        }
        Ok(())
    }
}

/// Reads `path` as whitespace-tokenized lines.
pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(flowseq_core::data::tokenize).collect())
}
