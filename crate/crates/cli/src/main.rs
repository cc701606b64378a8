//! Command-line front end: corpus generation, training, decoding, scoring,
//! gradient checks and full experiments.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmfusion_core::harness::corpus::{read_lines, read_manifest, write_text};
use lmfusion_core::harness::experiment::{decode_utterances, transcripts};
use lmfusion_core::harness::{
    fusion_gradcheck, gen_corpus, run_experiment, CorpusSizes, ExperimentManifest, GradSuiteConfig, ToyTask,
};
use lmfusion_core::rnnlm::{lm_train, LmTrainConfig};
use lmfusion_core::seq2seq::{train_asr, AsrTrainConfig};
use lmfusion_core::{
    evaluate, Checkpoint, DecodeConfig, Error, FusionKind, LoadedLm, LoadedModel, ModelConfig, Result, ShallowLm,
    ToyTaskConfig,
};

#[derive(Parser)]
#[command(name = "lmfusion", version, about = "Attention ASR with language-model fusion on a synthetic task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, LM text and an experiment manifest.
    GenCorpus(GenCorpus),
    /// Train the character RNNLM.
    TrainLm(TrainLm),
    /// Train an ASR model, optionally fused with a trained LM.
    TrainAsr(TrainAsr),
    /// Beam-search decode a manifest of utterances.
    Decode(Decode),
    /// Score hypotheses against references.
    Eval(Eval),
    /// Check backprop against finite differences for fusion variants.
    Gradcheck(Gradcheck),
    /// Run the full pipeline described by a manifest.
    RunExperiment(RunExperiment),
}

#[derive(Args)]
struct GenCorpus {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 200)]
    eval: usize,
    /// LM text lines per training utterance.
    #[arg(long, default_value_t = 10)]
    lm_factor: usize,
    /// Feature noise standard deviation.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "abcdefg ")]
    alphabet: String,
    #[arg(long, default_value_t = 8)]
    feat_dim: usize,
    #[arg(long, default_value_t = 2)]
    frames_min: usize,
    #[arg(long, default_value_t = 4)]
    frames_max: usize,
    #[arg(long, default_value_t = 5)]
    len_min: usize,
    #[arg(long, default_value_t = 15)]
    len_max: usize,
}

#[derive(Args)]
struct TrainLm {
    /// Task description written by gen-corpus.
    #[arg(long)]
    task: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainAsr {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// none, deep, cold, ccf1, ccf2, ccf3-sum or ccf3-affine.
    #[arg(long, default_value = "none")]
    fusion: String,
    /// LM checkpoint, required by every fusion except none.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Trained none-fusion checkpoint, required by deep fusion.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// CTC weight of the training objective.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct Decode {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Manifest of `utt_id<TAB>transcript` lines to decode.
    #[arg(long)]
    input: PathBuf,
    /// LM checkpoint for shallow fusion.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// LM weight. 0.4 and 0.5 are other settings worth trying.
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
    /// CTC weight of the decoding score.
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 20)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    max_len_ratio: f64,
    /// Print this many hypotheses per utterance as `utt_id, rank, score, transcript`.
    #[arg(long)]
    nbest: Option<usize>,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// Comma-separated fusion kinds; all fused kinds by default.
    #[arg(long, value_delimiter = ',')]
    fusion: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Check the attention term over the whole reference instead of one step.
    #[arg(long)]
    all_steps: bool,
}

#[derive(Args)]
struct RunExperiment {
    manifest: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen_corpus_cmd(a),
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::TrainAsr(a) => train_asr_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::RunExperiment(a) => run_experiment_cmd(a),
    }
}

fn gen_corpus_cmd(a: GenCorpus) -> Result<()> {
    let cfg = ToyTaskConfig {
        alphabet: a.alphabet,
        feat_dim: a.feat_dim,
        frames_per_char: (a.frames_min, a.frames_max),
        noise_sigma: a.sigma,
        length: (a.len_min, a.len_max),
        seed: a.seed,
        ..ToyTaskConfig::default()
    };
    let sizes = CorpusSizes {
        train: a.train,
        dev: a.dev,
        eval: a.eval,
        lm_factor: a.lm_factor,
    };
    let files = gen_corpus(&cfg, &sizes, &a.out)?;
    let manifest = ExperimentManifest::template(&files, &a.out.join("exp"));
    let path = a.out.join("experiment.conf");
    write_text(&path, &manifest.to_kv(&a.out).to_text())?;
    println!("wrote corpus and {}", path.display());
    Ok(())
}

fn train_lm_cmd(a: TrainLm) -> Result<()> {
    let task = ToyTask::load(&a.task)?;
    let mut cfg = LmTrainConfig::desk(task.vocab.len());
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(u) = a.units {
        cfg.model.units = u;
    }
    let result = lm_train(&read_lines(&a.text)?, &task.vocab, &cfg)?;
    for e in &result.log {
        println!("{}, {:.6}, {:.6}, {:e}", e.epoch, e.train_loss, e.dev_loss, e.eps);
    }
    result.checkpoint.save(&a.out)
}

fn train_asr_cmd(a: TrainAsr) -> Result<()> {
    let kind: FusionKind = a.fusion.parse()?;
    let task = ToyTask::load(&a.task)?;
    let train = task.utterances(&read_manifest(&a.train)?)?;
    let dev = task.utterances(&read_manifest(&a.dev)?)?;
    let lm = a.lm.as_deref().map(load_lm).transpose()?;
    let base = a.base.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = AsrTrainConfig::desk(ModelConfig::desk(task.config.feat_dim, task.vocab.len(), kind));
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(alpha) = a.alpha {
        cfg.model.alpha = alpha;
    }
    let result = train_asr(&train, &dev, &task.vocab, lm.as_ref(), base.as_ref(), &cfg)?;
    for e in &result.log {
        println!("{}", e.line());
    }
    result.checkpoint.save(&a.out)
}

fn load_lm(path: &Path) -> Result<LoadedLm> {
    LoadedLm::from_checkpoint(&Checkpoint::load(path)?)
}

fn decode_cmd(a: Decode) -> Result<()> {
    let task = ToyTask::load(&a.task)?;
    let loaded = LoadedModel::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    if loaded.vocab != task.vocab {
        return Err(Error::Config("model alphabet differs from the task alphabet".into()));
    }
    let lm = a.lm.as_deref().map(load_lm).transpose()?;
    let cfg = DecodeConfig {
        beam: a.beam,
        gamma: a.gamma,
        lambda: a.lambda,
        max_len_ratio: a.max_len_ratio,
        nbest: a.nbest.unwrap_or(1),
    };
    cfg.validate()?;
    let utts = task.utterances(&read_manifest(&a.input)?)?;
    let shallow = lm.as_ref().map(|l| ShallowLm {
        lm: &l.lm,
        store: &l.store,
    });
    let results = decode_utterances(&loaded.model, &loaded.store, shallow, &cfg, &utts)?;
    let mut text = String::new();
    if a.nbest.is_some() {
        for (u, r) in utts.iter().zip(&results) {
            for (rank, h) in r.nbest.iter().enumerate() {
                let _ = writeln!(text, "{}\t{}\t{:.6}\t{}", u.id, rank + 1, h.score, task.vocab.decode(h.labels()));
            }
        }
    } else {
        for (id, t) in transcripts(&utts, &results, &task.vocab) {
            let _ = writeln!(text, "{id}\t{t}");
        }
    }
    match a.out {
        Some(path) => write_text(&path, &text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn eval_cmd(a: Eval) -> Result<()> {
    let rates = evaluate(&read_manifest(&a.hyp)?, &read_manifest(&a.reference)?)?;
    println!(
        "CER {:.2} ({}/{})  WER {:.2} ({}/{})",
        rates.cer(),
        rates.char_errors,
        rates.chars,
        rates.wer(),
        rates.word_errors,
        rates.words
    );
    Ok(())
}

fn gradcheck_cmd(a: Gradcheck) -> Result<()> {
    let kinds: Vec<FusionKind> = if a.fusion.is_empty() {
        FusionKind::ALL.into_iter().filter(|k| *k != FusionKind::None).collect()
    } else {
        a.fusion.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?
    };
    let cfg = GradSuiteConfig {
        alpha: a.alpha,
        att_steps: if a.all_steps { None } else { Some(1) },
        ..GradSuiteConfig::default()
    };
    let mut failed = Vec::new();
    for kind in kinds {
        let report = fusion_gradcheck(kind, &cfg)?;
        let worst = report.worst().map_or(0.0, |c| c.rel_error);
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {kind}: {} parameters, worst relative error {worst:.3e}", report.checks.len());
        for c in report.checks.iter().filter(|c| !c.passed(lmfusion_core::gradcheck::GRAD_TOLERANCE)) {
            println!("  {} {:.3e}", c.name, c.rel_error);
        }
        if !report.passed() {
            failed.push(kind.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run_experiment_cmd(a: RunExperiment) -> Result<()> {
    let manifest = ExperimentManifest::load(&a.manifest)?;
    let report = run_experiment(&manifest)?;
    print!("{}", report.table());
    Ok(())
}
