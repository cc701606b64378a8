//! Character-level recurrent language model.
//!
//! At every step the model consumes the previous token and exposes both its
//! pre-softmax logits and its top-layer hidden state; the fusion layers read
//! one or the other.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{quantize, Checkpoint};
use crate::error::{Error, Result};
use crate::lstm::{LstmParams, LstmState, TapedLstmState};
use crate::optim::AdaDelta;
use crate::params::{Init, ParamId, ParamStore, INIT_SCALE};
use crate::tensor::Tensor;
use crate::train::{accumulate_batch, apply_step, mean_loss, OptimConfig};
use crate::vocab::{TokenId, Vocabulary, EOS, SOS};

pub const LM_PREFIX: &str = "lm";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed: usize,
    pub units: usize,
    pub layers: usize,
}

impl LmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            embed: 16,
            units: 64,
            layers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub layers: Vec<LstmState>,
}

impl LmState {
    pub fn on_tape(&self, tape: &mut Tape) -> TapedLmState {
        TapedLmState {
            layers: self.layers.iter().map(|s| s.on_tape(tape)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapedLmState {
    pub layers: Vec<TapedLstmState>,
}

impl TapedLmState {
    pub fn read(&self, tape: &Tape) -> LmState {
        LmState {
            layers: self.layers.iter().map(|s| s.read(tape)).collect(),
        }
    }
}

/// Output of one LM step on a tape.
#[derive(Debug, Clone)]
pub struct LmStepOut {
    pub logits: Var,
    pub hidden: Var,
    pub state: TapedLmState,
}

#[derive(Debug, Clone)]
pub struct Lm {
    pub config: LmConfig,
    pub embed: ParamId,
    pub layers: Vec<LstmParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Lm {
    pub fn new(store: &mut ParamStore, config: LmConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.units == 0 || config.embed == 0 || config.vocab_size == 0 {
            return Err(Error::Config(format!("degenerate LM config {config:?}")));
        }
        let p = LM_PREFIX;
        let embed = store.add(&format!("{p}.embed"), &[config.vocab_size, config.embed], Init::Uniform(INIT_SCALE), seed)?;
        let mut layers = Vec::new();
        let mut input = config.embed;
        for l in 0..config.layers {
            layers.push(LstmParams::new(store, &format!("{p}.l{l}"), input, config.units, 1.0, seed)?);
            input = config.units;
        }
        let out_w = store.add(&format!("{p}.out.w"), &[config.vocab_size, config.units], Init::Uniform(INIT_SCALE), seed)?;
        let out_b = store.add(&format!("{p}.out.b"), &[config.vocab_size], Init::Zeros, seed)?;
        Ok(Lm {
            config,
            embed,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn from_store(store: &ParamStore, config: LmConfig) -> Result<Self> {
        let p = LM_PREFIX;
        Ok(Lm {
            config,
            embed: store.require(&format!("{p}.embed"))?,
            layers: (0..config.layers)
                .map(|l| LstmParams::from_store(store, &format!("{p}.l{l}")))
                .collect::<Result<_>>()?,
            out_w: store.require(&format!("{p}.out.w"))?,
            out_b: store.require(&format!("{p}.out.b"))?,
        })
    }

    pub fn initial_state(&self) -> LmState {
        LmState {
            layers: vec![LstmState::zeros(self.config.units); self.config.layers],
        }
    }

    pub fn step(&self, tape: &mut Tape, token: TokenId, state: &TapedLmState) -> Result<LmStepOut> {
        if token >= self.config.vocab_size {
            return Err(Error::Vocabulary(format!(
                "token id {token} outside LM vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = tape.param(self.embed);
        let mut x = tape.row(table, token)?;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, st) in self.layers.iter().zip(&state.layers) {
            let s = layer.step(tape, x, *st)?;
            x = s.hidden;
            next.push(s);
        }
        let (w, b) = (tape.param(self.out_w), tape.param(self.out_b));
        let logits = tape.linear(w, b, x)?;
        Ok(LmStepOut {
            logits,
            hidden: x,
            state: TapedLmState { layers: next },
        })
    }

    /// Summed log-probability of `tokens` (which must end with `<eos>`),
    /// starting from `<sos>`, as a tape scalar.
    pub fn sequence_logprob(&self, tape: &mut Tape, tokens: &[TokenId]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if *tokens.last().unwrap() != EOS {
            return Err(Error::Argument("sequence must end with <eos>".into()));
        }
        let mut st = self.initial_state().on_tape(tape);
        let mut prev = SOS;
        let mut terms = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let out = self.step(tape, prev, &st)?;
            let lp = tape.log_softmax(out.logits);
            terms.push((tape.pick(lp, tok)?, 1.0));
            st = out.state;
            prev = tok;
        }
        tape.weighted_sum(&terms)
    }

    pub fn checkpoint(&self, store: &ParamStore, vocab: &Vocabulary) -> Checkpoint {
        let mut sub = ParamStore::new();
        for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with(LM_PREFIX)) {
            sub.insert(p.clone()).expect("unique names");
        }
        let mut ckpt = Checkpoint::from_store(&sub);
        ckpt.meta.insert("kind".into(), "lm".into());
        ckpt.meta.insert("alphabet".into(), vocab.alphabet());
        ckpt.meta.insert("lm.embed".into(), self.config.embed.to_string());
        ckpt.meta.insert("lm.units".into(), self.config.units.to_string());
        ckpt.meta.insert("lm.layers".into(), self.config.layers.to_string());
        ckpt
    }
}

/// A trained LM restored from its checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedLm {
    pub lm: Lm,
    pub store: ParamStore,
    pub vocab: Vocabulary,
}

impl LoadedLm {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let vocab = Vocabulary::new(ckpt.meta("alphabet")?.chars())?;
        let config = lm_config_from_meta(ckpt, vocab.len())?;
        let store = ckpt.to_store()?;
        let lm = Lm::from_store(&store, config)?;
        Ok(LoadedLm { lm, store, vocab })
    }
}

pub(crate) fn lm_config_from_meta(ckpt: &Checkpoint, vocab_size: usize) -> Result<LmConfig> {
    let num = |k: &str| -> Result<usize> {
        ckpt.meta(k)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata `{k}` is not an integer")))
    };
    Ok(LmConfig {
        vocab_size,
        embed: num("lm.embed")?,
        units: num("lm.units")?,
        layers: num("lm.layers")?,
    })
}

/// One untaped LM step: logits, top-layer hidden state and the next state.
pub fn lm_step(token: TokenId, st: &LmState, lm: &Lm, store: &ParamStore) -> Result<(Tensor, Tensor, LmState)> {
    let mut tape = Tape::inference(store);
    let taped = st.on_tape(&mut tape);
    let out = lm.step(&mut tape, token, &taped)?;
    Ok((
        tape.value(out.logits).clone(),
        tape.value(out.hidden).clone(),
        out.state.read(&tape),
    ))
}

pub fn lm_sequence_logprob(tokens: &[TokenId], lm: &Lm, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::inference(store);
    let v = lm.sequence_logprob(&mut tape, tokens)?;
    Ok(tape.scalar(v))
}

/// Encodes corpus lines, naming the line and character of the first
/// out-of-vocabulary symbol.
pub fn encode_corpus(lines: &[String], vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    lines
        .iter()
        .enumerate()
        .map(|(n, line)| {
            let mut ids = Vec::with_capacity(line.len() + 1);
            for c in line.chars() {
                let id = vocab.id(c).ok_or_else(|| {
                    Error::Vocabulary(format!("line {}: character {c:?} not in vocabulary", n + 1))
                })?;
                ids.push(id);
            }
            ids.push(EOS);
            Ok(ids)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LmTrainConfig {
    pub model: LmConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Share of the corpus held out for validation.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl LmTrainConfig {
    pub fn desk(vocab_size: usize) -> Self {
        LmTrainConfig {
            model: LmConfig::desk(vocab_size),
            epochs: 4,
            batch_size: 16,
            optim: OptimConfig {
                eps: crate::seq2seq::DESK_EPS,
                ..OptimConfig::default()
            },
            dev_fraction: 0.05,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmEpoch {
    pub epoch: usize,
    /// Mean per-token negative log-likelihood.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub eps: f64,
}

impl LmEpoch {
    pub fn dev_perplexity(&self) -> f64 {
        self.dev_loss.exp()
    }
}

#[derive(Debug, Clone)]
pub struct LmTrainResult {
    pub lm: Lm,
    pub store: ParamStore,
    pub checkpoint: Checkpoint,
    pub log: Vec<LmEpoch>,
}

/// Mean per-token negative log-likelihood of one encoded line.
fn token_nll(lm: &Lm, tape: &mut Tape, seq: &[TokenId]) -> Result<Var> {
    let lp = lm.sequence_logprob(tape, seq)?;
    Ok(tape.scale(lp, -1.0 / seq.len() as f64))
}

/// Cross-entropy training on text lines; keeps the parameters with the best
/// held-out loss and rounds them to checkpoint precision.
pub fn lm_train(corpus: &[String], vocab: &Vocabulary, cfg: &LmTrainConfig) -> Result<LmTrainResult> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty LM corpus".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Config("LM vocabulary size disagrees with the alphabet".into()));
    }
    let encoded = encode_corpus(corpus, vocab)?;
    let n_dev = ((encoded.len() as f64 * cfg.dev_fraction).round() as usize).min(encoded.len() - 1);
    let (train, dev) = encoded.split_at(encoded.len() - n_dev);
    let dev = if dev.is_empty() { train } else { dev };

    let mut store = ParamStore::new();
    let lm = Lm::new(&mut store, cfg.model, cfg.seed)?;
    let mut opt = AdaDelta::new(&store, cfg.optim.lr, cfg.optim.rho, cfg.optim.eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut log = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Vec<TokenId>> = chunk.iter().map(|&i| &train[i]).collect();
            store.zero_grads();
            total += accumulate_batch(&mut store, &batch, |tape, seq| token_nll(&lm, tape, seq))?;
            apply_step(&mut store, &mut opt, cfg.optim.grad_clip)?;
        }
        let dev_loss = mean_loss(&store, dev, |tape, seq| token_nll(&lm, tape, seq))?;
        let improved = best.as_ref().is_none_or(|(b, _)| dev_loss < *b);
        if improved {
            best = Some((dev_loss, store.clone()));
        } else if cfg.optim.eps_decay > 0.0 && cfg.optim.eps_decay < 1.0 {
            opt.decay_eps(cfg.optim.eps_decay)?;
        }
        let entry = LmEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            dev_loss,
            eps: opt.eps(),
        };
        log::info!(
            "lm epoch {epoch}: train {:.4} dev {:.4} (ppl {:.3})",
            entry.train_loss,
            entry.dev_loss,
            entry.dev_perplexity()
        );
        log.push(entry);
    }

    let (_, mut store) = best.expect("at least one epoch");
    quantize(&mut store);
    store.zero_grads();
    let checkpoint = lm.checkpoint(&store, vocab);
    Ok(LmTrainResult {
        lm,
        store,
        checkpoint,
        log,
    })
}
