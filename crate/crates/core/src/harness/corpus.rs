//! Corpus files: transcript manifests, LM text, and the task description
//! that lets features be regenerated from utterance ids.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::toy::{synth_features, utt_seed, FeatureStats, Grammar, ToyTaskConfig};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::params::name_hash;
use crate::seq2seq::Utterance;
use crate::vocab::Vocabulary;

pub const TRAIN_FILE: &str = "train.tsv";
pub const DEV_FILE: &str = "dev.tsv";
pub const EVAL_FILE: &str = "eval.tsv";
pub const LM_FILE: &str = "lm.txt";
pub const TASK_FILE: &str = "task.conf";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSizes {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
    /// LM text lines per training transcript.
    pub lm_factor: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            train: 2000,
            dev: 200,
            eval: 200,
            lm_factor: 10,
        }
    }
}

/// `utt_id <TAB> transcript` rows.
pub type Manifest = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub eval: PathBuf,
    pub lm_text: PathBuf,
    pub task: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CorpusFiles {
            train: dir.join(TRAIN_FILE),
            dev: dir.join(DEV_FILE),
            eval: dir.join(EVAL_FILE),
            lm_text: dir.join(LM_FILE),
            task: dir.join(TASK_FILE),
        }
    }
}

/// Samples the splits and LM text from the task grammar and writes them,
/// together with `task.conf` (task settings plus training-set feature
/// statistics), into `dir`.
pub fn gen_corpus(cfg: &ToyTaskConfig, sizes: &CorpusSizes, dir: &Path) -> Result<CorpusFiles> {
    if sizes.train == 0 || sizes.dev == 0 || sizes.eval == 0 || sizes.lm_factor == 0 {
        return Err(Error::Config("corpus sizes must be positive".into()));
    }
    let grammar = Grammar::generate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ name_hash("toy.transcripts"));
    let mut split = |name: &str, n: usize| -> Result<Manifest> {
        (1..=n)
            .map(|i| Ok((format!("{name}-{i:05}"), sample_line(&grammar, cfg, &mut rng)?)))
            .collect()
    };
    let train = split("train", sizes.train)?;
    let dev = split("dev", sizes.dev)?;
    let eval = split("eval", sizes.eval)?;
    let mut lm_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ name_hash("toy.lm"));
    let lm: Vec<String> = (0..sizes.train * sizes.lm_factor)
        .map(|_| sample_line(&grammar, cfg, &mut lm_rng))
        .collect::<Result<_>>()?;

    let raw: Vec<_> = train
        .iter()
        .map(|(id, text)| synth_features(text, cfg, utt_seed(cfg, id)))
        .collect::<Result<_>>()?;
    let stats = FeatureStats::fit(&raw)?;

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CorpusFiles::in_dir(dir);
    write_manifest(&files.train, &train)?;
    write_manifest(&files.dev, &dev)?;
    write_manifest(&files.eval, &eval)?;
    write_text(&files.lm_text, &lm.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    let mut kv = KeyValues::new();
    cfg.write_kv(&mut kv);
    stats.write_kv(&mut kv);
    write_text(&files.task, &kv.to_text())?;
    Ok(files)
}

fn sample_line(grammar: &Grammar, cfg: &ToyTaskConfig, rng: &mut ChaCha8Rng) -> Result<String> {
    let len = rng.gen_range(cfg.length.0..=cfg.length.1);
    grammar.sample(len, rng)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let text: String = rows.iter().map(|(id, t)| format!("{id}\t{t}\n")).collect();
    write_text(path, &text)
}

/// Parses `utt_id <TAB> transcript` lines; ids must be unique.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, transcript) = line.split_once('\t').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected `utt_id<TAB>transcript`", path.display(), n + 1))
        })?;
        if id.is_empty() || !seen.insert(id.to_string()) {
            return Err(Error::Config(format!("{}:{}: empty or duplicate id `{id}`", path.display(), n + 1)));
        }
        rows.push((id.to_string(), transcript.to_string()));
    }
    Ok(rows)
}

/// Non-empty lines of an LM text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// A generated task: settings, vocabulary, and normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub config: ToyTaskConfig,
    pub vocab: Vocabulary,
    pub stats: FeatureStats,
}

impl ToyTask {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let config = ToyTaskConfig::from_kv(&kv)?;
        let stats = FeatureStats::from_kv(&kv)?;
        if stats.mean.len() != config.feat_dim {
            return Err(Error::Config("feature statistics disagree with toy.feat_dim".into()));
        }
        let vocab = Vocabulary::new(config.chars())?;
        Ok(ToyTask { config, vocab, stats })
    }

    /// Regenerates normalized features for every manifest row.
    pub fn utterances(&self, rows: &[(String, String)]) -> Result<Vec<Utterance>> {
        rows.iter()
            .map(|(id, text)| {
                let raw = synth_features(text, &self.config, utt_seed(&self.config, id))?;
                Ok(Utterance {
                    id: id.clone(),
                    text: text.clone(),
                    tokens: self.vocab.encode(text)?,
                    feats: self.stats.apply(&raw)?,
                })
            })
            .collect()
    }
}
