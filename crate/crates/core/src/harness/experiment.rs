//! End-to-end experiment: train the LM, train one ASR model per fusion
//! kind, beam-decode dev and eval, and tabulate error rates.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::corpus::{read_lines, read_manifest, write_manifest, write_text, CorpusFiles, ToyTask};
use crate::attention::AttentionConfig;
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::decode::{beam_search, BeamResult, DecodeConfig, ShallowLm};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::metrics::{evaluate, ErrorRates};
use crate::params::ParamStore;
use crate::rnnlm::{lm_train, LmConfig, LmTrainConfig, LoadedLm};
use crate::seq2seq::{train_asr, AsrTrainConfig, LoadedModel, ModelConfig, Seq2Seq, Utterance};
use crate::train::OptimConfig;
use crate::vocab::Vocabulary;

/// First line of every report.
pub const REPORT_VERSION: &str = "# lmfusion report v1";

const KEYS: &[&str] = &[
    "task",
    "train",
    "dev",
    "eval",
    "lm_text",
    "output",
    "fusions",
    "seed",
    "asr.epochs",
    "asr.batch_size",
    "asr.eps",
    "asr.alpha",
    "asr.att_norm",
    "asr.enc_layers",
    "asr.enc_units",
    "asr.enc_proj",
    "asr.embed",
    "asr.dec_units",
    "asr.att_dim",
    "asr.att_channels",
    "asr.att_width",
    "lm.epochs",
    "lm.batch_size",
    "lm.eps",
    "lm.embed",
    "lm.units",
    "lm.layers",
    "decode.beam",
    "decode.gamma",
    "decode.lambda",
    "decode.max_len_ratio",
    "decode.baseline_without_lm",
];

/// Everything a run needs. Paths in the file are relative to the file's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub task: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub eval: PathBuf,
    pub lm_text: PathBuf,
    pub output: PathBuf,
    pub fusions: Vec<FusionKind>,
    pub seed: u64,
    pub asr_epochs: usize,
    pub asr_batch_size: usize,
    pub asr_eps: f64,
    /// Model shape; `feat_dim`, `vocab_size` and `fusion` are filled in per run.
    pub model: ModelConfig,
    pub lm_epochs: usize,
    pub lm_batch_size: usize,
    pub lm_eps: f64,
    pub lm_model: LmConfig,
    pub decode: DecodeConfig,
    /// Adds a row for the baseline decoded without the LM.
    pub baseline_without_lm: bool,
}

impl ExperimentManifest {
    /// Desk defaults over a generated corpus, writing into `output`.
    pub fn template(files: &CorpusFiles, output: &Path) -> Self {
        let asr = AsrTrainConfig::desk(ModelConfig::desk(0, 0, FusionKind::None));
        let lm = LmTrainConfig::desk(0);
        ExperimentManifest {
            task: files.task.clone(),
            train: files.train.clone(),
            dev: files.dev.clone(),
            eval: files.eval.clone(),
            lm_text: files.lm_text.clone(),
            output: output.to_path_buf(),
            fusions: FusionKind::ALL.to_vec(),
            seed: 1,
            asr_epochs: asr.epochs,
            asr_batch_size: asr.batch_size,
            asr_eps: asr.optim.eps,
            model: asr.model,
            lm_epochs: lm.epochs,
            lm_batch_size: lm.batch_size,
            lm_eps: lm.optim.eps,
            lm_model: lm.model,
            decode: DecodeConfig::default(),
            baseline_without_lm: true,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&kv, base)
    }

    /// Missing optional keys take the values of [`ExperimentManifest::template`].
    pub fn from_kv(kv: &KeyValues, base: &Path) -> Result<Self> {
        kv.check_keys(KEYS)?;
        let path = |k: &str| -> Result<PathBuf> { Ok(base.join(kv.require(k)?)) };
        let files = CorpusFiles {
            task: path("task")?,
            train: path("train")?,
            dev: path("dev")?,
            eval: path("eval")?,
            lm_text: path("lm_text")?,
        };
        let d = Self::template(&files, &path("output")?);
        let fusions = match kv.list("fusions") {
            Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<FusionKind>>>()?,
            None => d.fusions.clone(),
        };
        if fusions.is_empty() {
            return Err(Error::Config("`fusions` lists no fusion kind".into()));
        }
        let att_norm = match kv.raw("asr.att_norm") {
            Some(v) => v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `asr.att_norm`")))?,
            None => d.model.att_norm,
        };
        let model = ModelConfig {
            enc_layers: kv.get_or("asr.enc_layers", d.model.enc_layers)?,
            enc_units: kv.get_or("asr.enc_units", d.model.enc_units)?,
            enc_proj: kv.get_or("asr.enc_proj", d.model.enc_proj)?,
            embed: kv.get_or("asr.embed", d.model.embed)?,
            dec_units: kv.get_or("asr.dec_units", d.model.dec_units)?,
            attention: AttentionConfig {
                dim: kv.get_or("asr.att_dim", d.model.attention.dim)?,
                channels: kv.get_or("asr.att_channels", d.model.attention.channels)?,
                width: kv.get_or("asr.att_width", d.model.attention.width)?,
            },
            alpha: kv.get_or("asr.alpha", d.model.alpha)?,
            att_norm,
            ..d.model
        };
        let lm_model = LmConfig {
            embed: kv.get_or("lm.embed", d.lm_model.embed)?,
            units: kv.get_or("lm.units", d.lm_model.units)?,
            layers: kv.get_or("lm.layers", d.lm_model.layers)?,
            ..d.lm_model
        };
        let decode = DecodeConfig {
            beam: kv.get_or("decode.beam", d.decode.beam)?,
            gamma: kv.get_or("decode.gamma", d.decode.gamma)?,
            lambda: kv.get_or("decode.lambda", d.decode.lambda)?,
            max_len_ratio: kv.get_or("decode.max_len_ratio", d.decode.max_len_ratio)?,
            nbest: 1,
        };
        decode.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(ExperimentManifest {
            fusions,
            seed: kv.get_or("seed", d.seed)?,
            asr_epochs: kv.get_or("asr.epochs", d.asr_epochs)?,
            asr_batch_size: kv.get_or("asr.batch_size", d.asr_batch_size)?,
            asr_eps: kv.get_or("asr.eps", d.asr_eps)?,
            model,
            lm_epochs: kv.get_or("lm.epochs", d.lm_epochs)?,
            lm_batch_size: kv.get_or("lm.batch_size", d.lm_batch_size)?,
            lm_eps: kv.get_or("lm.eps", d.lm_eps)?,
            lm_model,
            decode,
            baseline_without_lm: kv.get_or("decode.baseline_without_lm", d.baseline_without_lm)?,
            ..d
        })
    }

    /// Serializes with paths made relative to `base` where possible.
    pub fn to_kv(&self, base: &Path) -> KeyValues {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut kv = KeyValues::new();
        kv.set("task", rel(&self.task));
        kv.set("train", rel(&self.train));
        kv.set("dev", rel(&self.dev));
        kv.set("eval", rel(&self.eval));
        kv.set("lm_text", rel(&self.lm_text));
        kv.set("output", rel(&self.output));
        kv.set("fusions", self.fusions.iter().map(|f| f.name()).collect::<Vec<_>>().join(", "));
        kv.set("seed", self.seed);
        kv.set("asr.epochs", self.asr_epochs);
        kv.set("asr.batch_size", self.asr_batch_size);
        kv.set("asr.eps", self.asr_eps);
        kv.set("asr.alpha", self.model.alpha);
        kv.set("asr.att_norm", self.model.att_norm.name());
        kv.set("asr.enc_layers", self.model.enc_layers);
        kv.set("asr.enc_units", self.model.enc_units);
        kv.set("asr.enc_proj", self.model.enc_proj);
        kv.set("asr.embed", self.model.embed);
        kv.set("asr.dec_units", self.model.dec_units);
        kv.set("asr.att_dim", self.model.attention.dim);
        kv.set("asr.att_channels", self.model.attention.channels);
        kv.set("asr.att_width", self.model.attention.width);
        kv.set("lm.epochs", self.lm_epochs);
        kv.set("lm.batch_size", self.lm_batch_size);
        kv.set("lm.eps", self.lm_eps);
        kv.set("lm.embed", self.lm_model.embed);
        kv.set("lm.units", self.lm_model.units);
        kv.set("lm.layers", self.lm_model.layers);
        kv.set("decode.beam", self.decode.beam);
        kv.set("decode.gamma", self.decode.gamma);
        kv.set("decode.lambda", self.decode.lambda);
        kv.set("decode.max_len_ratio", self.decode.max_len_ratio);
        kv.set("decode.baseline_without_lm", self.baseline_without_lm);
        kv
    }

    pub fn asr_config(&self, kind: FusionKind, feat_dim: usize, vocab_size: usize) -> AsrTrainConfig {
        let mut cfg = AsrTrainConfig::desk(ModelConfig {
            feat_dim,
            vocab_size,
            fusion: kind,
            ..self.model
        });
        cfg.epochs = self.asr_epochs;
        cfg.batch_size = self.asr_batch_size;
        cfg.optim = OptimConfig {
            eps: self.asr_eps,
            ..cfg.optim
        };
        cfg.seed = self.seed;
        cfg
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmTrainConfig {
        let mut cfg = LmTrainConfig::desk(vocab_size);
        cfg.model = LmConfig {
            vocab_size,
            ..self.lm_model
        };
        cfg.epochs = self.lm_epochs;
        cfg.batch_size = self.lm_batch_size;
        cfg.optim = OptimConfig {
            eps: self.lm_eps,
            ..cfg.optim
        };
        cfg.seed = self.seed;
        cfg
    }

    /// Every referenced input must exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.task, &self.train, &self.dev, &self.eval, &self.lm_text] {
            if !p.is_file() {
                return Err(Error::Config(format!("manifest path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub fusion: FusionKind,
    pub gamma: f64,
    pub best_epoch: usize,
    pub dev: ErrorRates,
    pub eval: ErrorRates,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, fusion: FusionKind, gamma: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.fusion == fusion && r.gamma == gamma)
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!("{REPORT_VERSION}\n");
        let head = ["fusion", "gamma", "epoch", "dev CER", "dev WER", "eval CER", "eval WER"];
        let mut lines = vec![head.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        for r in &self.rows {
            lines.push(vec![
                r.fusion.name().to_string(),
                format!("{:.2}", r.gamma),
                r.best_epoch.to_string(),
                format!("{:.2}", r.dev.cer()),
                format!("{:.2}", r.dev.wer()),
                format!("{:.2}", r.eval.cer()),
                format!("{:.2}", r.eval.wer()),
            ]);
        }
        let widths: Vec<usize> = (0..head.len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    /// Tab-separated rows with raw error counts.
    pub fn tsv(&self) -> String {
        let mut out = format!(
            "{REPORT_VERSION}\nfusion\tgamma\tbest_epoch\tdev_cer\tdev_wer\teval_cer\teval_wer\tdev_char_errors\tdev_chars\tdev_word_errors\tdev_words\teval_char_errors\teval_chars\teval_word_errors\teval_words\n"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.fusion.name(),
                r.gamma,
                r.best_epoch,
                r.dev.cer(),
                r.dev.wer(),
                r.eval.cer(),
                r.eval.wer(),
                r.dev.char_errors,
                r.dev.chars,
                r.dev.word_errors,
                r.dev.words,
                r.eval.char_errors,
                r.eval.chars,
                r.eval.word_errors,
                r.eval.words,
            );
        }
        out
    }
}

/// Beam-decodes every utterance.
pub fn decode_utterances(
    model: &Seq2Seq,
    store: &ParamStore,
    lm: Option<ShallowLm>,
    cfg: &DecodeConfig,
    utts: &[Utterance],
) -> Result<Vec<BeamResult>> {
    utts.iter()
        .map(|u| {
            beam_search(model, store, lm, cfg, &u.feats)
                .map_err(|e| e.in_stage(format!("utterance {}", u.id)))
        })
        .collect()
}

/// `utt_id <TAB> transcript` pairs of the best hypotheses.
pub fn transcripts(utts: &[Utterance], results: &[BeamResult], vocab: &Vocabulary) -> Vec<(String, String)> {
    utts.iter()
        .zip(results)
        .map(|(u, r)| (u.id.clone(), vocab.decode(r.best.labels())))
        .collect()
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

struct Trained {
    model: Seq2Seq,
    store: ParamStore,
    checkpoint: Checkpoint,
    best_epoch: usize,
}

/// Runs the whole pipeline, writing checkpoints, training logs, transcripts
/// and the report under `manifest.output`.
pub fn run_experiment(manifest: &ExperimentManifest) -> Result<Report> {
    stage("load", manifest.check_paths())?;
    let task = stage("load", ToyTask::load(&manifest.task))?;
    let load = |p: &Path| -> Result<Vec<Utterance>> { task.utterances(&read_manifest(p)?) };
    let train = stage("load", load(&manifest.train))?;
    let dev = stage("load", load(&manifest.dev))?;
    let eval = stage("load", load(&manifest.eval))?;
    let out = &manifest.output;
    stage("output", std::fs::create_dir_all(out).map_err(|e| Error::io(out, e)))?;
    let vocab = &task.vocab;
    let (feat_dim, v) = (task.config.feat_dim, vocab.len());

    let needs_lm = manifest.decode.gamma > 0.0 || manifest.fusions.iter().any(|k| k.uses_lm());
    let lm = if needs_lm {
        let lm = stage("train-lm", train_lm(manifest, vocab, out))?;
        Some(lm)
    } else {
        None
    };

    let mut kinds = manifest.fusions.clone();
    kinds.dedup();
    let needs_base = kinds.iter().any(|k| k.is_post_hoc());
    let mut order = Vec::new();
    if needs_base || kinds.contains(&FusionKind::None) {
        order.push(FusionKind::None);
    }
    order.extend(kinds.iter().copied().filter(|&k| k != FusionKind::None));

    let mut base: Option<Checkpoint> = None;
    let mut report = Report::default();
    for kind in order {
        let name = kind.name();
        let trained = stage(&format!("train-asr {name}"), {
            let cfg = manifest.asr_config(kind, feat_dim, v);
            train_variant(&train, &dev, vocab, lm.as_ref(), base.as_ref(), &cfg, &out.join(name))
        })?;
        if kind == FusionKind::None {
            base = Some(trained.checkpoint.clone());
        }
        if !kinds.contains(&kind) {
            continue;
        }
        let mut gammas = vec![manifest.decode.gamma];
        if kind == FusionKind::None && manifest.baseline_without_lm && manifest.decode.gamma > 0.0 {
            gammas.insert(0, 0.0);
        }
        for gamma in gammas {
            let cfg = DecodeConfig {
                gamma,
                ..manifest.decode
            };
            let dir = if gamma == manifest.decode.gamma {
                out.join(name)
            } else {
                out.join(format!("{name}-nolm"))
            };
            let row = stage(&format!("decode {name}"), {
                let shallow = lm.as_ref().map(|l| ShallowLm {
                    lm: &l.lm,
                    store: &l.store,
                });
                decode_variant(&trained, shallow, &cfg, vocab, &dev, &eval, &dir)
            })?;
            report.rows.push(row);
        }
    }
    stage("report", write_text(&out.join("report.txt"), &report.table()))?;
    stage("report", write_text(&out.join("report.tsv"), &report.tsv()))?;
    Ok(report)
}

fn train_lm(manifest: &ExperimentManifest, vocab: &Vocabulary, out: &Path) -> Result<LoadedLm> {
    let lines = read_lines(&manifest.lm_text)?;
    let result = lm_train(&lines, vocab, &manifest.lm_config(vocab.len()))?;
    result.checkpoint.save(&out.join("lm.ckpt"))?;
    let log: String = result
        .log
        .iter()
        .map(|e| format!("{}, {:.6}, {:.6}, {:e}\n", e.epoch, e.train_loss, e.dev_loss, e.eps))
        .collect();
    write_text(&out.join("lm.log"), &log)?;
    LoadedLm::from_checkpoint(&result.checkpoint)
}

fn train_variant(
    train: &[Utterance],
    dev: &[Utterance],
    vocab: &Vocabulary,
    lm: Option<&LoadedLm>,
    base: Option<&Checkpoint>,
    cfg: &AsrTrainConfig,
    dir: &Path,
) -> Result<Trained> {
    let lm = if cfg.model.fusion.uses_lm() { lm } else { None };
    let result = train_asr(train, dev, vocab, lm, base, cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    result.checkpoint.save(&dir.join("model.ckpt"))?;
    let log: String = result.log.iter().map(|e| format!("{}\n", e.line())).collect();
    write_text(&dir.join("train.log"), &log)?;
    let loaded = LoadedModel::from_checkpoint(&result.checkpoint)?;
    Ok(Trained {
        model: loaded.model,
        store: loaded.store,
        checkpoint: result.checkpoint,
        best_epoch: result.best_epoch,
    })
}

fn decode_variant(
    trained: &Trained,
    lm: Option<ShallowLm>,
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
    dev: &[Utterance],
    eval: &[Utterance],
    dir: &Path,
) -> Result<ReportRow> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lm = if cfg.gamma > 0.0 { lm } else { None };
    let mut rates = Vec::new();
    for (name, utts) in [("dev", dev), ("eval", eval)] {
        let results = decode_utterances(&trained.model, &trained.store, lm, cfg, utts)?;
        let hyps = transcripts(utts, &results, vocab);
        write_manifest(&dir.join(format!("{name}.hyp")), &hyps)?;
        let refs: Vec<(String, String)> = utts.iter().map(|u| (u.id.clone(), u.text.clone())).collect();
        rates.push(evaluate(&hyps, &refs)?);
    }
    Ok(ReportRow {
        fusion: trained.model.config.fusion,
        gamma: cfg.gamma,
        best_epoch: trained.best_epoch,
        dev: rates[0],
        eval: rates[1],
    })
}
