//! Attention encoder-decoder with a CTC head and a fusion slot.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionParams, AttentionState};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{quantize, Checkpoint};
use crate::decode::greedy;
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionKind, FusionParams, GateTrace, LmSide, FUSION_PREFIX};
use crate::lstm::{Encoder, EncoderConfig, LstmParams, LstmState, TapedLstmState};
use crate::metrics::edit_distance;
use crate::optim::AdaDelta;
use crate::params::{Init, ParamId, ParamStore, INIT_SCALE};
use crate::rnnlm::{lm_config_from_meta, LoadedLm, Lm, LmConfig, LmState, TapedLmState};
use crate::tensor::Tensor;
use crate::train::{accumulate_batch, apply_step, mean_loss, OptimConfig};
use crate::vocab::{TokenId, Vocabulary, BLANK, EOS, SOS};

/// Scale of the attention term in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttNorm {
    /// Mean negative log-likelihood per reference position.
    Token,
    /// Summed over the reference, the same per-utterance scale as CTC.
    Sequence,
}

impl AttNorm {
    pub fn name(self) -> &'static str {
        match self {
            AttNorm::Token => "token",
            AttNorm::Sequence => "sequence",
        }
    }
}

impl std::str::FromStr for AttNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(AttNorm::Token),
            "sequence" => Ok(AttNorm::Sequence),
            _ => Err(Error::Argument(format!("unknown attention normalization `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub enc_layers: usize,
    pub enc_units: usize,
    pub enc_proj: usize,
    pub embed: usize,
    /// Decoder width `d`; also the width of every fusion projection.
    pub dec_units: usize,
    pub attention: AttentionConfig,
    pub vocab_size: usize,
    pub fusion: FusionKind,
    /// CTC weight of the joint objective.
    pub alpha: f64,
    pub att_norm: AttNorm,
}

impl ModelConfig {
    pub fn desk(feat_dim: usize, vocab_size: usize, fusion: FusionKind) -> Self {
        ModelConfig {
            feat_dim,
            enc_layers: 2,
            enc_units: 32,
            enc_proj: 32,
            embed: 16,
            dec_units: 32,
            attention: AttentionConfig::default(),
            vocab_size,
            fusion,
            alpha: 0.5,
            att_norm: AttNorm::Sequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        let dims = [
            self.feat_dim,
            self.enc_layers,
            self.enc_units,
            self.enc_proj,
            self.embed,
            self.dec_units,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero dimension in model config {self:?}")));
        }
        Ok(())
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.feat_dim,
            layers: self.enc_layers,
            units: self.enc_units,
            proj: self.enc_proj,
        }
    }

    fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            meta.insert(k.to_string(), v);
        };
        put("fusion", self.fusion.name().into());
        put("alpha", self.alpha.to_string());
        put("att_norm", self.att_norm.name().into());
        put("feat_dim", self.feat_dim.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("enc_units", self.enc_units.to_string());
        put("enc_proj", self.enc_proj.to_string());
        put("embed", self.embed.to_string());
        put("dec_units", self.dec_units.to_string());
        put("att_dim", self.attention.dim.to_string());
        put("att_channels", self.attention.channels.to_string());
        put("att_width", self.attention.width.to_string());
    }

    fn from_meta(ckpt: &Checkpoint, vocab_size: usize) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            ckpt.meta(k)?
                .parse()
                .map_err(|_| Error::Format(format!("metadata `{k}` is not an integer")))
        };
        Ok(ModelConfig {
            feat_dim: num("feat_dim")?,
            enc_layers: num("enc_layers")?,
            enc_units: num("enc_units")?,
            enc_proj: num("enc_proj")?,
            embed: num("embed")?,
            dec_units: num("dec_units")?,
            attention: AttentionConfig {
                dim: num("att_dim")?,
                channels: num("att_channels")?,
                width: num("att_width")?,
            },
            vocab_size,
            fusion: ckpt.meta("fusion")?.parse()?,
            alpha: ckpt
                .meta("alpha")?
                .parse()
                .map_err(|_| Error::Format("metadata `alpha` is not a number".into()))?,
            att_norm: ckpt.meta("att_norm")?.parse()?,
        })
    }
}

/// Full decoder state between output steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStep {
    pub y_prev: TokenId,
    pub lstm: LstmState,
    pub attn: AttentionState,
    pub lm: Option<LmState>,
}

impl DecoderStep {
    pub fn on_tape(&self, tape: &mut Tape) -> TapedStep {
        TapedStep {
            y_prev: self.y_prev,
            lstm: self.lstm.on_tape(tape),
            attn: tape.constant(self.attn.weights.clone()),
            lm: self.lm.as_ref().map(|s| s.on_tape(tape)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapedStep {
    pub y_prev: TokenId,
    pub lstm: TapedLstmState,
    pub attn: Var,
    pub lm: Option<TapedLmState>,
}

impl TapedStep {
    pub fn read(&self, tape: &Tape) -> DecoderStep {
        DecoderStep {
            y_prev: self.y_prev,
            lstm: self.lstm.read(tape),
            attn: AttentionState {
                weights: tape.value(self.attn).clone(),
            },
            lm: self.lm.as_ref().map(|s| s.read(tape)),
        }
    }
}

/// Encoder output on a tape: `enc` is `[T, e]`, `keys` the attention
/// projection of every frame.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub enc: Var,
    pub keys: Var,
    pub frames: usize,
}

/// Encoder output as plain tensors, reusable across decoding tapes.
#[derive(Debug, Clone)]
pub struct EncodedValues {
    pub enc: Tensor,
    pub keys: Tensor,
    /// CTC log-probabilities `[T, V]`.
    pub ctc_log_probs: Tensor,
}

impl EncodedValues {
    pub fn frames(&self) -> usize {
        self.enc.shape()[0]
    }

    pub fn on_tape(&self, tape: &mut Tape) -> Encoded {
        Encoded {
            enc: tape.constant(self.enc.clone()),
            keys: tape.constant(self.keys.clone()),
            frames: self.frames(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOut {
    pub log_probs: Var,
    /// Output-layer logits after the optional ReLU.
    pub logits: Var,
    pub next: TapedStep,
    pub trace: Option<GateTrace>,
}

/// Scalar loss on a tape with its two components as plain numbers.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ctc: f64,
    pub att: f64,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub ctc_w: ParamId,
    pub ctc_b: ParamId,
    pub embed: ParamId,
    pub decoder: LstmParams,
    pub attention: AttentionParams,
    pub fusion: FusionParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub lm: Option<Lm>,
}

fn output_names(kind: FusionKind) -> (String, String) {
    if kind.is_post_hoc() {
        (format!("{FUSION_PREFIX}.out.w"), format!("{FUSION_PREFIX}.out.b"))
    } else {
        ("dec.out.w".into(), "dec.out.b".into())
    }
}

impl Seq2Seq {
    /// Adds freshly initialized model parameters to `store`. When the fusion
    /// uses an LM, its parameters must already be in `store`.
    pub fn new(store: &mut ParamStore, config: ModelConfig, lm: Option<LmConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let lm = match (config.fusion.uses_lm(), lm) {
            (false, _) => None,
            (true, Some(c)) => Some(Lm::from_store(store, c)?),
            (true, None) => {
                return Err(Error::Config(format!("{} fusion needs a language model", config.fusion)));
            }
        };
        if let Some(lm) = &lm {
            if lm.config.vocab_size != config.vocab_size {
                return Err(Error::Config("LM vocabulary differs from the ASR vocabulary".into()));
            }
        }
        let u = Init::Uniform(INIT_SCALE);
        let (v, d, e) = (config.vocab_size, config.dec_units, config.enc_proj);
        let encoder = Encoder::new(store, "enc", config.encoder(), seed)?;
        let ctc_w = store.add("ctc.w", &[v, e], u, seed)?;
        let ctc_b = store.add("ctc.b", &[v], Init::Zeros, seed)?;
        let embed = store.add("dec.embed", &[v, config.embed], u, seed)?;
        let decoder = LstmParams::new(store, "dec.lstm", config.embed + e, d, 1.0, seed)?;
        let attention = AttentionParams::new(store, "dec.att", config.attention, e, d, seed)?;
        let lm_dim = lm.as_ref().map_or(0, |l| l.config.units);
        let fusion = FusionParams::new(store, config.fusion, d, v, lm_dim, seed)?;
        if config.fusion.is_post_hoc() {
            // The base model's own output layer, kept so a finished baseline
            // loads unchanged.
            store.add("dec.out.w", &[v, d], u, seed)?;
            store.add("dec.out.b", &[v], Init::Zeros, seed)?;
        }
        let (ow, ob) = output_names(config.fusion);
        let inf = config.fusion.inference_dim(d, lm_dim);
        let out_w = store.add(&ow, &[v, inf], u, seed)?;
        let out_b = store.add(&ob, &[v], Init::Zeros, seed)?;
        Ok(Seq2Seq {
            config,
            encoder,
            ctc_w,
            ctc_b,
            embed,
            decoder,
            attention,
            fusion,
            out_w,
            out_b,
            lm,
        })
    }

    pub fn from_store(store: &ParamStore, config: ModelConfig, lm: Option<LmConfig>) -> Result<Self> {
        config.validate()?;
        let lm = match (config.fusion.uses_lm(), lm) {
            (false, _) => None,
            (true, Some(c)) => Some(Lm::from_store(store, c)?),
            (true, None) => {
                return Err(Error::Config(format!("{} fusion needs a language model", config.fusion)));
            }
        };
        let (ow, ob) = output_names(config.fusion);
        Ok(Seq2Seq {
            config,
            encoder: Encoder::from_store(store, "enc", config.encoder())?,
            ctc_w: store.require("ctc.w")?,
            ctc_b: store.require("ctc.b")?,
            embed: store.require("dec.embed")?,
            decoder: LstmParams::from_store(store, "dec.lstm")?,
            attention: AttentionParams::from_store(store, "dec.att", config.attention)?,
            fusion: FusionParams::from_store(store, config.fusion)?,
            out_w: store.require(&ow)?,
            out_b: store.require(&ob)?,
            lm,
        })
    }

    pub fn initial_step(&self, frames: usize) -> DecoderStep {
        DecoderStep {
            y_prev: SOS,
            lstm: LstmState::zeros(self.config.dec_units),
            attn: AttentionState::uniform(frames),
            lm: self.lm.as_ref().map(Lm::initial_state),
        }
    }

    /// Runs the encoder over `feats: [T, f]`.
    pub fn encode(&self, tape: &mut Tape, feats: &Tensor) -> Result<Encoded> {
        let (t, f) = feats
            .dims2()
            .ok_or_else(|| Error::shape("encode", feats.shape(), &[self.config.feat_dim]))?;
        if f != self.config.feat_dim {
            return Err(Error::shape("encode", feats.shape(), &[t, self.config.feat_dim]));
        }
        let rows: Vec<Var> = (0..t)
            .map(|i| tape.constant(Tensor::from_parts(vec![f], feats.row(i).to_vec())))
            .collect();
        let outs = self.encoder.forward(tape, &rows)?;
        let enc = tape.stack_rows(&outs)?;
        let keys = self.attention.precompute(tape, enc)?;
        Ok(Encoded { enc, keys, frames: t })
    }

    /// Per-frame CTC log-probabilities `[T, V]`.
    pub fn ctc_log_probs(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var> {
        let (w, b) = (tape.param(self.ctc_w), tape.param(self.ctc_b));
        let z = tape.matmul_t(enc.enc, w)?;
        let z = tape.add_row_broadcast(z, b)?;
        Ok(tape.log_softmax(z))
    }

    pub fn encode_values(&self, store: &ParamStore, feats: &Tensor) -> Result<EncodedValues> {
        let mut tape = Tape::inference(store);
        let enc = self.encode(&mut tape, feats)?;
        let lp = self.ctc_log_probs(&mut tape, &enc)?;
        Ok(EncodedValues {
            enc: tape.value(enc.enc).clone(),
            keys: tape.value(enc.keys).clone(),
            ctc_log_probs: tape.value(lp).clone(),
        })
    }

    /// One decoder step consuming `st.y_prev`. The returned state still
    /// carries the same `y_prev`; the caller sets the next token.
    pub fn step(&self, tape: &mut Tape, enc: &Encoded, st: &TapedStep, record: bool) -> Result<StepOut> {
        if st.y_prev >= self.config.vocab_size {
            return Err(Error::Vocabulary(format!("token id {} outside vocabulary", st.y_prev)));
        }
        let (lm_side, lm_next) = match (&self.lm, &st.lm) {
            (Some(lm), Some(state)) => {
                let out = lm.step(tape, st.y_prev, state)?;
                (
                    Some(LmSide {
                        logits: out.logits,
                        hidden: out.hidden,
                    }),
                    Some(out.state),
                )
            }
            (None, _) => (None, None),
            (Some(_), None) => return Err(Error::Argument("decoder state lacks an LM state".into())),
        };
        let (context, weights) = self
            .attention
            .attend(tape, enc.enc, enc.keys, st.lstm.hidden, st.attn)?;
        let table = tape.param(self.embed);
        let emb = tape.row(table, st.y_prev)?;
        let x = tape.concat(&[emb, context])?;
        let lstm = self.decoder.step(tape, x, st.lstm)?;
        let fused = fuse(tape, &self.fusion, lstm.hidden, lstm.cell, lm_side, record)?;
        let (w, b) = (tape.param(self.out_w), tape.param(self.out_b));
        let mut logits = tape.linear(w, b, fused.inference)?;
        if self.config.fusion.output_relu() {
            logits = tape.relu(logits);
        }
        let log_probs = tape.log_softmax(logits);
        Ok(StepOut {
            log_probs,
            logits,
            next: TapedStep {
                y_prev: st.y_prev,
                lstm: TapedLstmState {
                    hidden: fused.carry_hidden,
                    cell: fused.carry_cell,
                },
                attn: weights,
                lm: lm_next,
            },
            trace: fused.trace,
        })
    }

    /// Teacher-forced attention log-probabilities for `reference` (which
    /// must end with `<eos>`), one `[V]` variable per position.
    pub fn teacher_forced(&self, tape: &mut Tape, enc: &Encoded, reference: &[TokenId]) -> Result<Vec<Var>> {
        let mut st = self.initial_step(enc.frames).on_tape(tape);
        let mut out = Vec::with_capacity(reference.len());
        for (t, &tok) in reference.iter().enumerate() {
            let s = self.step(tape, enc, &st, false).map_err(|e| e.at_step(t))?;
            out.push(s.log_probs);
            st = s.next;
            st.y_prev = tok;
        }
        Ok(out)
    }

    /// Joint loss of one utterance. `labels` are the characters without
    /// `<eos>`. `att_steps` truncates the attention term to its first
    /// positions, and `config.att_norm` sets its scale.
    pub fn loss(&self, tape: &mut Tape, feats: &Tensor, labels: &[TokenId], att_steps: Option<usize>) -> Result<LossParts> {
        let alpha = self.config.alpha;
        let enc = self.encode(tape, feats)?;
        let mut reference = labels.to_vec();
        reference.push(EOS);
        if let Some(n) = att_steps {
            reference.truncate(n.max(1));
        }
        let mut terms = Vec::new();
        let mut ctc_value = 0.0;
        if alpha > 0.0 {
            let lp = self.ctc_log_probs(tape, &enc)?;
            let ctc = tape.ctc_loss(lp, labels, BLANK)?;
            ctc_value = tape.scalar(ctc);
            terms.push((ctc, alpha));
        }
        let mut att_value = 0.0;
        if alpha < 1.0 {
            let steps = self.teacher_forced(tape, &enc, &reference)?;
            let n = match self.config.att_norm {
                AttNorm::Token => reference.len() as f64,
                AttNorm::Sequence => 1.0,
            };
            let mut picks = Vec::with_capacity(steps.len());
            for (&lp, &tok) in steps.iter().zip(&reference) {
                picks.push((tape.pick(lp, tok)?, -1.0 / n));
            }
            let att = tape.weighted_sum(&picks)?;
            att_value = tape.scalar(att);
            terms.push((att, 1.0 - alpha));
        }
        let total = tape.weighted_sum(&terms)?;
        Ok(LossParts {
            total,
            ctc: ctc_value,
            att: att_value,
        })
    }

    /// Parameter ids the model reads, fusion connector included.
    pub fn connector_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fusion.ids();
        if self.config.fusion.is_post_hoc() {
            ids.extend([self.out_w, self.out_b]);
        }
        ids
    }

    pub fn checkpoint(&self, store: &ParamStore, vocab: &Vocabulary) -> Checkpoint {
        let mut ckpt = Checkpoint::from_store(store);
        ckpt.meta.insert("kind".into(), "asr".into());
        ckpt.meta.insert("alphabet".into(), vocab.alphabet());
        self.config.write_meta(&mut ckpt.meta);
        if let Some(lm) = &self.lm {
            ckpt.meta.insert("lm.embed".into(), lm.config.embed.to_string());
            ckpt.meta.insert("lm.units".into(), lm.config.units.to_string());
            ckpt.meta.insert("lm.layers".into(), lm.config.layers.to_string());
        }
        ckpt
    }
}

/// One decoder step on plain tensors.
pub fn decoder_step(
    step: &DecoderStep,
    enc: &EncodedValues,
    model: &Seq2Seq,
    store: &ParamStore,
) -> Result<(Tensor, DecoderStep)> {
    let mut tape = Tape::inference(store);
    let e = enc.on_tape(&mut tape);
    let st = step.on_tape(&mut tape);
    let out = model.step(&mut tape, &e, &st, false)?;
    Ok((tape.value(out.log_probs).clone(), out.next.read(&tape)))
}

/// Mean negative log-likelihood of `reference` under per-step log-probs.
pub fn attention_loss(log_probs: &[Tensor], reference: &[TokenId]) -> Result<f64> {
    if log_probs.len() != reference.len() {
        return Err(Error::Argument(format!(
            "{} steps of log-probs for a reference of {}",
            log_probs.len(),
            reference.len()
        )));
    }
    if reference.last() != Some(&EOS) {
        return Err(Error::Argument("reference must end with <eos>".into()));
    }
    let mut total = 0.0;
    for (lp, &tok) in log_probs.iter().zip(reference) {
        let v = lp
            .data()
            .get(tok)
            .ok_or_else(|| Error::Vocabulary(format!("token id {tok} outside vocabulary")))?;
        total -= v;
    }
    Ok(total / reference.len() as f64)
}

pub fn joint_loss(l_ctc: f64, l_att: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * l_ctc + (1.0 - alpha) * l_att)
}

/// A trained model restored from its checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: Seq2Seq,
    pub store: ParamStore,
    pub vocab: Vocabulary,
}

impl LoadedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind")? != "asr" {
            return Err(Error::Format("checkpoint does not hold an ASR model".into()));
        }
        let vocab = Vocabulary::new(ckpt.meta("alphabet")?.chars())?;
        let config = ModelConfig::from_meta(ckpt, vocab.len())?;
        let lm = if config.fusion.uses_lm() {
            Some(lm_config_from_meta(ckpt, vocab.len())?)
        } else {
            None
        };
        let store = ckpt.to_store()?;
        let model = Seq2Seq::from_store(&store, config, lm)?;
        Ok(LoadedModel { model, store, vocab })
    }
}

/// One utterance ready for training or decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    /// Characters of `text` as token ids, without `<eos>`.
    pub tokens: Vec<TokenId>,
    /// `[T, f]` acoustic features.
    pub feats: Tensor,
}

/// AdaDelta eps of the desk-scale trainers.
pub const DESK_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct AsrTrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Output length limit of the greedy dev decode, relative to `T`.
    pub max_len_ratio: f64,
}

impl AsrTrainConfig {
    /// Desk-scale defaults. AdaDelta starts from a larger eps than the
    /// usual 1e-8 so that a few thousand updates suffice.
    pub fn desk(model: ModelConfig) -> Self {
        AsrTrainConfig {
            model,
            epochs: 15,
            batch_size: 8,
            optim: OptimConfig {
                eps: DESK_EPS,
                ..OptimConfig::default()
            },
            seed: 1,
            max_len_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_cer: f64,
    pub eps: f64,
}

impl EpochLog {
    /// `epoch, train_loss, dev_loss, dev_cer, eps`
    pub fn line(&self) -> String {
        format!(
            "{}, {:.6}, {:.6}, {:.2}, {:e}",
            self.epoch, self.train_loss, self.dev_loss, self.dev_cer, self.eps
        )
    }
}

#[derive(Debug, Clone)]
pub struct AsrTrainResult {
    pub model: Seq2Seq,
    pub store: ParamStore,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Greedy character error rate, in percent, over `utts`.
pub fn greedy_cer(model: &Seq2Seq, store: &ParamStore, utts: &[Utterance], max_len_ratio: f64) -> Result<f64> {
    let mut errors = 0;
    let mut total = 0;
    for u in utts {
        let hyp = greedy(model, store, &u.feats, max_len_ratio)?;
        errors += edit_distance(&hyp, &u.tokens);
        total += u.tokens.len();
    }
    Ok(if total == 0 { 0.0 } else { 100.0 * errors as f64 / total as f64 })
}

/// Builds the parameter store for a training run: LM parameters loaded and
/// frozen, and for deep fusion the base model loaded and frozen too.
fn build_store(
    vocab: &Vocabulary,
    lm: Option<&LoadedLm>,
    base: Option<&Checkpoint>,
    cfg: &AsrTrainConfig,
) -> Result<(Seq2Seq, ParamStore)> {
    let kind = cfg.model.fusion;
    if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Config("model vocabulary size disagrees with the alphabet".into()));
    }
    let mut store = ParamStore::new();
    let lm_config = match (kind.uses_lm(), lm) {
        (false, _) => None,
        (true, None) => return Err(Error::Config(format!("{kind} fusion needs an LM checkpoint"))),
        (true, Some(lm)) => {
            if lm.vocab != *vocab {
                return Err(Error::Config(format!(
                    "LM alphabet {:?} differs from ASR alphabet {:?}",
                    lm.vocab.alphabet(),
                    vocab.alphabet()
                )));
            }
            for (_, p) in lm.store.iter() {
                let mut p = p.clone();
                p.frozen = true;
                store.insert(p)?;
            }
            Some(lm.lm.config)
        }
    };
    let model = Seq2Seq::new(&mut store, cfg.model, lm_config, cfg.seed)?;
    if kind.is_post_hoc() {
        let base = base.ok_or_else(|| Error::Config("deep fusion needs a trained base model".into()))?;
        let loaded = LoadedModel::from_checkpoint(base)?;
        if loaded.model.config.fusion != FusionKind::None {
            return Err(Error::Config("deep fusion base model must be trained without fusion".into()));
        }
        if loaded.vocab != *vocab {
            return Err(Error::Config("base model alphabet differs from the ASR alphabet".into()));
        }
        store.load_from(&loaded.store, "")?;
        let connector: Vec<ParamId> = model.connector_ids();
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            p.frozen = !connector.contains(&id);
        }
    }
    Ok((model, store))
}

/// Trains with the joint objective, keeping the parameters of the epoch with
/// the lowest dev loss. LM parameters (and, for deep fusion, the whole base
/// model) stay frozen throughout.
pub fn train_asr(
    train: &[Utterance],
    dev: &[Utterance],
    vocab: &Vocabulary,
    lm: Option<&LoadedLm>,
    base: Option<&Checkpoint>,
    cfg: &AsrTrainConfig,
) -> Result<AsrTrainResult> {
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    let (model, mut store) = build_store(vocab, lm, base, cfg)?;
    let frozen_before: Vec<(ParamId, Vec<u8>)> = store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(id, p)| (id, value_bytes(&p.value)))
        .collect();
    let mut opt = AdaDelta::new(&store, cfg.optim.lr, cfg.optim.rho, cfg.optim.eps)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| (train[i].feats.shape()[0], i));
    let batches: Vec<Vec<&Utterance>> = order
        .chunks(cfg.batch_size)
        .map(|c| c.iter().map(|&i| &train[i]).collect())
        .collect();
    let mut batch_order: Vec<usize> = (0..batches.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dev_set = if dev.is_empty() { train } else { dev };

    let loss_fn = |tape: &mut Tape, u: &&Utterance| -> Result<Var> {
        Ok(model.loss(tape, &u.feats, &u.tokens, None)?.total)
    };
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        batch_order.shuffle(&mut rng);
        let mut total = 0.0;
        for &b in &batch_order {
            store.zero_grads();
            total += accumulate_batch(&mut store, &batches[b], loss_fn)?;
            apply_step(&mut store, &mut opt, cfg.optim.grad_clip)?;
        }
        let dev_refs: Vec<&Utterance> = dev_set.iter().collect();
        let dev_loss = mean_loss(&store, &dev_refs, loss_fn)?;
        let dev_cer = greedy_cer(&model, &store, dev_set, cfg.max_len_ratio)?;
        if best.as_ref().is_none_or(|(b, _, _)| dev_loss < *b) {
            best = Some((dev_loss, epoch, store.clone()));
        } else if cfg.optim.eps_decay > 0.0 && cfg.optim.eps_decay < 1.0 {
            opt.decay_eps(cfg.optim.eps_decay)?;
        }
        let entry = EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            dev_loss,
            dev_cer,
            eps: opt.eps(),
        };
        log::info!("{} {}", cfg.model.fusion, entry.line());
        log.push(entry);
    }

    let (_, best_epoch, mut store) = best.expect("at least one epoch");
    for (id, bytes) in &frozen_before {
        if value_bytes(store.value(*id)) != *bytes {
            return Err(Error::Contract(format!("frozen parameter {} changed", store.get(*id).name)));
        }
    }
    quantize(&mut store);
    store.zero_grads();
    let checkpoint = model.checkpoint(&store, vocab);
    Ok(AsrTrainResult {
        model,
        store,
        checkpoint,
        log,
        best_epoch,
    })
}

fn value_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::CellUpdate;
    use crate::gradcheck::{check_params, GRAD_EPSILON, GRAD_TOLERANCE};
    use crate::rnnlm::{LmConfig, LM_PREFIX};
    use crate::tensor::{activation, log_softmax_row, Activation};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny_config(fusion: FusionKind, v: usize) -> ModelConfig {
        ModelConfig {
            feat_dim: 2,
            enc_layers: 1,
            enc_units: 2,
            enc_proj: 3,
            embed: 2,
            dec_units: 3,
            attention: AttentionConfig {
                dim: 3,
                channels: 2,
                width: 3,
            },
            vocab_size: v,
            fusion,
            alpha: 0.5,
            att_norm: AttNorm::Token,
        }
    }

    fn tiny_lm(store: &mut ParamStore, v: usize) -> LmConfig {
        let c = LmConfig {
            vocab_size: v,
            embed: 2,
            units: 3,
            layers: 1,
        };
        Lm::new(store, c, 99).unwrap();
        store.set_frozen_prefix(LM_PREFIX, true);
        c
    }

    fn tiny_model(fusion: FusionKind, v: usize, seed: u64) -> (Seq2Seq, ParamStore) {
        let mut store = ParamStore::new();
        let lm = fusion.uses_lm().then(|| tiny_lm(&mut store, v));
        let m = Seq2Seq::new(&mut store, tiny_config(fusion, v), lm, seed).unwrap();
        (m, store)
    }

    fn feats(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * f).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(t, f, data).unwrap()
    }

    fn zero_store(store: &mut ParamStore, keep: impl Fn(&str) -> bool) {
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if !keep(&p.name) {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let (m, mut store) = tiny_model(FusionKind::None, 4, 1);
        zero_store(&mut store, |_| false);
        let enc = m.encode_values(&store, &feats(3, 2, 0)).unwrap();
        let (lp, _) = decoder_step(&m.initial_step(3), &enc, &m, &store).unwrap();
        for v in lp.data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn ccf1_with_zero_projection_reproduces_baseline_bitwise() {
        let (base, base_store) = tiny_model(FusionKind::None, 4, 7);
        let (fused, mut fused_store) = tiny_model(FusionKind::Ccf1, 4, 7);
        let proj = fused.fusion.proj.unwrap();
        for id in [proj.w, proj.b] {
            let p = fused_store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = feats(4, 2, 3);
        let eb = base.encode_values(&base_store, &x).unwrap();
        let ef = fused.encode_values(&fused_store, &x).unwrap();
        assert_eq!(eb.enc, ef.enc);
        let (mut sb, mut sf) = (base.initial_step(4), fused.initial_step(4));
        for tok in [3, 3, EOS] {
            let (lb, nb) = decoder_step(&sb, &eb, &base, &base_store).unwrap();
            let (lf, nf) = decoder_step(&sf, &ef, &fused, &fused_store).unwrap();
            assert_eq!(lb, lf);
            assert_eq!(nb.lstm, nf.lstm);
            sb = DecoderStep { y_prev: tok, ..nb };
            sf = DecoderStep { y_prev: tok, ..nf };
        }
    }

    #[test]
    fn two_steps_match_manual_composition() {
        use crate::attention::location_attention;
        use crate::fusion::ccf1_fuse;
        use crate::lstm::lstm_cell_step;
        use crate::rnnlm::lm_step;

        let (m, store) = tiny_model(FusionKind::Ccf1, 4, 5);
        let x = feats(2, 2, 8);
        let enc = m.encode_values(&store, &x).unwrap();
        let enc_rows: Vec<Tensor> = (0..2).map(|i| Tensor::vector(enc.enc.row(i).to_vec()).unwrap()).collect();
        let lm = m.lm.as_ref().unwrap();

        let mut st = m.initial_step(2);
        let (mut h, mut c) = (Tensor::zeros(&[3]), Tensor::zeros(&[3]));
        let mut att = AttentionState::uniform(2);
        let mut lm_state = lm.initial_state();
        let mut y = SOS;
        for next in [3, EOS] {
            let (l_lm, _, lm_next) = lm_step(y, &lm_state, lm, &store).unwrap();
            let (ctx, att_next) = location_attention(&h, &enc_rows, &att, &m.attention, &store).unwrap();
            let emb = store.value(m.embed).row(y).to_vec();
            let input = Tensor::vector(emb.into_iter().chain(ctx.data().iter().copied()).collect()).unwrap();
            let cell = lstm_cell_step(&input, &LstmState { hidden: h.clone(), cell: c.clone() }, &m.decoder, &store).unwrap();
            let fused = ccf1_fuse(&cell.hidden, &cell.cell, &l_lm, &m.fusion, &store).unwrap();
            let logits = crate::tensor::linear(store.value(m.out_w), store.value(m.out_b), &fused.inference_vec).unwrap();
            let expect = activation(Activation::LogSoftmax, &logits);

            let (lp, nst) = decoder_step(&st, &enc, &m, &store).unwrap();
            for (a, b) in lp.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-14);
            }
            h = fused.carry_hidden;
            c = fused.carry_cell;
            att = att_next;
            lm_state = lm_next;
            y = next;
            st = DecoderStep { y_prev: next, ..nst };
            assert_eq!(st.lstm.cell, c);
        }
    }

    #[test]
    fn relu_policy_applies_to_logits() {
        for kind in FusionKind::ALL {
            let (m, store) = tiny_model(kind, 4, 2);
            let mut tape = Tape::inference(&store);
            let enc = m.encode(&mut tape, &feats(3, 2, 1)).unwrap();
            let st = m.initial_step(3).on_tape(&mut tape);
            let out = m.step(&mut tape, &enc, &st, false).unwrap();
            let has_negative = tape.data(out.logits).iter().any(|&v| v < 0.0);
            if kind.output_relu() {
                assert!(!has_negative, "{kind}");
            }
        }
    }

    #[test]
    fn attention_loss_examples() {
        let one_hot = |k: usize| {
            let mut v = vec![-1e9; 3];
            v[k] = 0.0;
            Tensor::vector(log_softmax_row(&v)).unwrap()
        };
        let perfect = attention_loss(&[one_hot(1), one_hot(EOS)], &[1, EOS]).unwrap();
        assert!(perfect.abs() < 1e-12);
        let uniform = Tensor::vector(vec![-(3f64.ln()); 3]).unwrap();
        let l = attention_loss(&[uniform.clone(), uniform.clone()], &[0, EOS]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        let a = Tensor::vector(log_softmax_row(&[0.1, 0.5, -0.3])).unwrap();
        let b = Tensor::vector(log_softmax_row(&[1.0, -1.0, 2.0])).unwrap();
        let l = attention_loss(&[a.clone(), b.clone()], &[1, EOS]).unwrap();
        assert_eq!(l, -(a.data()[1] + b.data()[2]) / 2.0);
        assert!(matches!(attention_loss(&[a.clone()], &[1, EOS]), Err(Error::Argument(_))));
        assert!(attention_loss(&[a], &[1]).is_err());
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert_eq!(joint_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(joint_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert!(matches!(joint_loss(2.0, 4.0, 1.5), Err(Error::Argument(_))));
    }

    #[test]
    fn taped_loss_matches_components() {
        let (m, store) = tiny_model(FusionKind::Cold, 4, 3);
        let x = feats(3, 2, 4);
        let mut tape = Tape::inference(&store);
        let parts = m.loss(&mut tape, &x, &[3, 3], None).unwrap();
        let enc = m.encode_values(&store, &x).unwrap();
        let ctc = crate::ctc::ctc_forward(&enc.ctc_log_probs, &[3, 3], BLANK).unwrap();
        assert!((parts.ctc - ctc).abs() < 1e-12);
        let mut st = m.initial_step(3);
        let mut lps = Vec::new();
        for tok in [3, 3, EOS] {
            let (lp, next) = decoder_step(&st, &enc, &m, &store).unwrap();
            lps.push(lp);
            st = DecoderStep { y_prev: tok, ..next };
        }
        let att = attention_loss(&lps, &[3, 3, EOS]).unwrap();
        assert!((parts.att - att).abs() < 1e-12);
        let joint = joint_loss(ctc, att, 0.5).unwrap();
        assert!((tape.scalar(parts.total) - joint).abs() < 1e-12);

        let mut seq = m.clone();
        seq.config.att_norm = AttNorm::Sequence;
        let mut tape = Tape::inference(&store);
        let parts = seq.loss(&mut tape, &x, &[3, 3], None).unwrap();
        assert!((parts.att - 3.0 * att).abs() < 1e-12);
    }

    fn gradcheck(kind: FusionKind, alpha: f64, att_steps: Option<usize>) {
        let (mut m, mut store) = tiny_model(kind, 4, 21);
        m.config.alpha = alpha;
        // Zero biases leave ReLU logits on the kink; move to a generic point.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in store.trainable().collect::<Vec<_>>() {
            for v in store.get_mut(id).value.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let x = feats(3, 2, 5);
        let ids: Vec<ParamId> = store.trainable().collect();
        let reports = check_params(&store, &ids, GRAD_EPSILON, |tape| {
            Ok(m.loss(tape, &x, &[3, 3], att_steps)?.total)
        })
        .unwrap();
        for r in &reports {
            assert!(r.passed(GRAD_TOLERANCE), "{kind} alpha {alpha}: {} rel {:e}", r.name, r.rel_error);
        }
        assert!(reports.iter().all(|r| !r.name.starts_with(LM_PREFIX)));
    }

    #[test]
    fn end_to_end_gradients() {
        for kind in FusionKind::ALL {
            for alpha in [0.0, 0.5, 1.0] {
                gradcheck(kind, alpha, None);
            }
        }
    }

    #[test]
    fn one_step_gradients() {
        gradcheck(FusionKind::Ccf3(CellUpdate::Affine), 0.5, Some(1));
    }

    fn toy_set(n: usize, seed: u64) -> Vec<Utterance> {
        // Two symbols with fixed prototypes, two frames per symbol.
        let protos = [[1.0, -1.0], [-1.0, 1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let len = 2 + i % 3;
                let tokens: Vec<TokenId> = (0..len).map(|k| 3 + (k + i) % 2).collect();
                let mut data = Vec::new();
                for &t in &tokens {
                    for _ in 0..2 {
                        for &p in &protos[t - 3] {
                            let noise: f64 = StandardNormal.sample(&mut rng);
                            data.push(p + 0.1 * noise);
                        }
                    }
                }
                Utterance {
                    id: format!("u{i}"),
                    text: String::new(),
                    feats: Tensor::matrix(2 * len, 2, data).unwrap(),
                    tokens,
                }
            })
            .collect()
    }

    fn small_cfg(fusion: FusionKind) -> AsrTrainConfig {
        let mut model = ModelConfig::desk(2, 5, fusion);
        model.enc_units = 8;
        model.enc_proj = 8;
        model.dec_units = 8;
        model.embed = 4;
        model.attention.dim = 8;
        let mut cfg = AsrTrainConfig::desk(model);
        cfg.epochs = 3;
        cfg.batch_size = 4;
        cfg.optim.eps = 1e-6;
        cfg
    }

    fn small_lm(vocab: &Vocabulary) -> LoadedLm {
        let mut cfg = crate::rnnlm::LmTrainConfig::desk(vocab.len());
        cfg.model.units = 4;
        cfg.model.embed = 2;
        cfg.epochs = 1;
        let lines: Vec<String> = ["abab", "baba", "ab"].iter().map(|s| s.to_string()).collect();
        let r = crate::rnnlm::lm_train(&lines, vocab, &cfg).unwrap();
        LoadedLm::from_checkpoint(&r.checkpoint).unwrap()
    }

    #[test]
    fn dev_attention_loss_decreases() {
        let vocab = Vocabulary::new("ab".chars()).unwrap();
        let mut cfg = small_cfg(FusionKind::None);
        cfg.model.alpha = 0.0;
        let train = toy_set(40, 1);
        let dev = toy_set(8, 2);
        let r = train_asr(&train, &dev, &vocab, None, None, &cfg).unwrap();
        let losses: Vec<f64> = r.log.iter().map(|e| e.dev_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn fused_training_keeps_lm_bytes() {
        let vocab = Vocabulary::new("ab".chars()).unwrap();
        let lm = small_lm(&vocab);
        let cfg = small_cfg(FusionKind::Ccf3(CellUpdate::Affine));
        let r = train_asr(&toy_set(8, 1), &toy_set(4, 2), &vocab, Some(&lm), None, &cfg).unwrap();
        let before = Checkpoint::from_store(&lm.store);
        for e in &before.entries {
            let after = r.checkpoint.entry(&e.name).unwrap();
            assert_eq!(after.value_bytes(), e.value_bytes(), "{}", e.name);
            assert!(after.frozen);
        }
    }

    #[test]
    fn deep_fusion_trains_only_the_connector() {
        let vocab = Vocabulary::new("ab".chars()).unwrap();
        let lm = small_lm(&vocab);
        let mut cfg = small_cfg(FusionKind::None);
        cfg.epochs = 1;
        let base = train_asr(&toy_set(8, 1), &toy_set(4, 2), &vocab, None, None, &cfg).unwrap();
        let mut cfg = small_cfg(FusionKind::Deep);
        cfg.epochs = 2;
        let deep = train_asr(&toy_set(8, 1), &toy_set(4, 2), &vocab, Some(&lm), Some(&base.checkpoint), &cfg).unwrap();
        let lm_ckpt = Checkpoint::from_store(&lm.store);
        for e in base.checkpoint.entries.iter().chain(&lm_ckpt.entries) {
            assert_eq!(deep.checkpoint.entry(&e.name).unwrap().value_bytes(), e.value_bytes(), "{}", e.name);
        }
        let connector: Vec<&str> = deep
            .checkpoint
            .entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.name.as_str())
            .collect();
        assert!(!connector.is_empty());
        assert!(connector.iter().all(|n| n.starts_with(FUSION_PREFIX)), "{connector:?}");

        let reloaded = LoadedModel::from_checkpoint(&deep.checkpoint).unwrap();
        assert_eq!(reloaded.model.config.fusion, FusionKind::Deep);
    }

    #[test]
    fn configuration_errors() {
        let vocab = Vocabulary::new("ab".chars()).unwrap();
        let other = Vocabulary::new("abc".chars()).unwrap();
        let lm = small_lm(&other);
        let cfg = small_cfg(FusionKind::Cold);
        let data = toy_set(2, 1);
        assert!(matches!(train_asr(&data, &data, &vocab, None, None, &cfg), Err(Error::Config(_))));
        assert!(matches!(train_asr(&data, &data, &vocab, Some(&lm), None, &cfg), Err(Error::Config(_))));
        let deep = small_cfg(FusionKind::Deep);
        let lm = small_lm(&vocab);
        assert!(matches!(train_asr(&data, &data, &vocab, Some(&lm), None, &deep), Err(Error::Config(_))));
    }
}
