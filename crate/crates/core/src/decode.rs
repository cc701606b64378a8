//! Label-synchronous beam search with CTC prefix scoring and shallow LM
//! fusion.
//!
//! A hypothesis is scored as `(1 - λ)·att + λ·ctc + γ·lm` where `att` is the
//! summed decoder log-probability, `ctc` the CTC prefix log-probability and
//! `lm` the summed external LM log-probability. Once a hypothesis ends in
//! `<eos>` its CTC term is the full-sequence probability.

use std::cmp::Ordering;

use crate::autodiff::Tape;
use crate::ctc::{CtcPrefixScorer, CtcPrefixState};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rnnlm::{lm_step, Lm, LmState};
use crate::seq2seq::{DecoderStep, EncodedValues, Seq2Seq};
use crate::tensor::{log_softmax_row, Tensor};
use crate::vocab::{TokenId, BLANK, EOS, SOS};

/// Log-linear combination of a model score and an LM score.
pub fn shallow_combine(score_am: f64, score_lm: f64, gamma: f64) -> f64 {
    score_am + gamma * score_lm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// LM weight.
    pub gamma: f64,
    /// CTC weight.
    pub lambda: f64,
    /// Output length limit as a multiple of the frame count.
    pub max_len_ratio: f64,
    /// Number of finished hypotheses to return.
    pub nbest: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 20,
            gamma: 0.3,
            lambda: 0.3,
            max_len_ratio: 1.0,
            nbest: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Argument("beam must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Argument(format!("gamma {} must be a finite value >= 0", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Argument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.max_len_ratio > 0.0 && self.max_len_ratio.is_finite()) {
            return Err(Error::Argument("max_len_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Longest number of characters a hypothesis may hold for `frames`.
    pub fn max_len(&self, frames: usize) -> usize {
        ((self.max_len_ratio * frames as f64).ceil() as usize).max(1)
    }
}

/// An external LM used for shallow fusion.
#[derive(Debug, Clone, Copy)]
pub struct ShallowLm<'a> {
    pub lm: &'a Lm,
    pub store: &'a ParamStore,
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Emitted tokens; a finished hypothesis ends with `<eos>`.
    pub tokens: Vec<TokenId>,
    pub att_score: f64,
    pub ctc_score: f64,
    pub lm_score: f64,
    pub score: f64,
    pub dec_state: DecoderStep,
    pub ctc_state: Option<CtcPrefixState>,
    pub lm_state: Option<LmState>,
}

impl Hypothesis {
    pub fn is_final(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without the terminal `<eos>`.
    pub fn labels(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamResult {
    pub best: Hypothesis,
    pub nbest: Vec<Hypothesis>,
}

struct Candidate {
    parent: usize,
    token: TokenId,
    att: f64,
    ctc: f64,
    lm: f64,
    score: f64,
    ctc_state: Option<CtcPrefixState>,
}

/// Ordering used for pruning: higher score first, ties broken by parent
/// index and then token id.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

fn combine(cfg: &DecodeConfig, att: f64, ctc: f64, lm: f64) -> f64 {
    let mut s = if cfg.lambda > 0.0 {
        (1.0 - cfg.lambda) * att + cfg.lambda * ctc
    } else {
        att
    };
    if cfg.gamma > 0.0 {
        s = shallow_combine(s, lm, cfg.gamma);
    }
    s
}

fn check_lm(model: &Seq2Seq, lm: Option<ShallowLm>, cfg: &DecodeConfig) -> Result<()> {
    if cfg.gamma > 0.0 {
        let lm = lm.ok_or_else(|| Error::Argument("gamma > 0 needs a language model".into()))?;
        if lm.lm.config.vocab_size != model.config.vocab_size {
            return Err(Error::Config("LM vocabulary differs from the model vocabulary".into()));
        }
    }
    Ok(())
}

/// Beam search over `feats: [T, f]`.
pub fn beam_search(
    model: &Seq2Seq,
    store: &ParamStore,
    lm: Option<ShallowLm>,
    cfg: &DecodeConfig,
    feats: &Tensor,
) -> Result<BeamResult> {
    cfg.validate()?;
    check_lm(model, lm, cfg)?;
    if feats.dims2().is_none_or(|(t, _)| t == 0) {
        return Err(Error::Argument("cannot decode an empty frame sequence".into()));
    }
    let enc = model.encode_values(store, feats)?;
    beam_search_encoded(model, store, lm, cfg, &enc)
}

/// Beam search over an already encoded utterance.
pub fn beam_search_encoded(
    model: &Seq2Seq,
    store: &ParamStore,
    lm: Option<ShallowLm>,
    cfg: &DecodeConfig,
    enc: &EncodedValues,
) -> Result<BeamResult> {
    cfg.validate()?;
    check_lm(model, lm, cfg)?;
    let frames = enc.frames();
    let use_ctc = cfg.lambda > 0.0;
    let use_lm = cfg.gamma > 0.0;
    let scorer = if use_ctc {
        Some(CtcPrefixScorer::new(enc.ctc_log_probs.clone(), BLANK, EOS)?)
    } else {
        None
    };
    let lm = if use_lm { lm } else { None };
    let max_len = cfg.max_len(frames);
    let chars: Vec<TokenId> = (EOS + 1..model.config.vocab_size).collect();

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        att_score: 0.0,
        ctc_score: 0.0,
        lm_score: 0.0,
        score: 0.0,
        dec_state: model.initial_step(frames),
        ctc_state: scorer.as_ref().map(CtcPrefixScorer::initial),
        lm_state: lm.map(|l| l.lm.initial_state()),
    }];
    let mut ended: Vec<Hypothesis> = Vec::new();

    for step in 0..=max_len {
        let mut tape = Tape::inference(store);
        let e = enc.on_tape(&mut tape);
        let mut next_states = Vec::with_capacity(live.len());
        let mut lm_next = Vec::with_capacity(live.len());
        let mut candidates = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let st = h.dec_state.on_tape(&mut tape);
            let out = model.step(&mut tape, &e, &st, false).map_err(|err| err.at_step(step))?;
            let logp = tape.data(out.log_probs).to_vec();
            next_states.push(out.next.read(&tape));
            let lm_logp = match (lm, &h.lm_state) {
                (Some(l), Some(s)) => {
                    let prev = h.tokens.last().copied().unwrap_or(SOS);
                    let (logits, _, next) = lm_step(prev, s, l.lm, l.store)?;
                    lm_next.push(Some(next));
                    Some(log_softmax_row(logits.data()))
                }
                _ => {
                    lm_next.push(None);
                    None
                }
            };
            let options: &[TokenId] = if step == max_len { &[EOS] } else { &chars };
            for &tok in options.iter().chain((step < max_len).then_some(&EOS)) {
                let att = h.att_score + logp[tok];
                debug_assert!(att <= h.att_score);
                let (ctc, ctc_state) = match (&scorer, &h.ctc_state) {
                    (Some(sc), Some(s)) => {
                        let (_, ns) = sc.extend(s, tok)?;
                        (ns.score, Some(ns))
                    }
                    _ => (0.0, None),
                };
                let lm_score = h.lm_score + lm_logp.as_ref().map_or(0.0, |l| l[tok]);
                let score = combine(cfg, att, ctc, lm_score);
                if !score.is_finite() {
                    continue;
                }
                candidates.push(Candidate {
                    parent: i,
                    token: tok,
                    att,
                    ctc,
                    lm: lm_score,
                    score,
                    ctc_state,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.beam);
        let mut next_live = Vec::with_capacity(candidates.len());
        for c in candidates {
            let parent = &live[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            let hyp = Hypothesis {
                tokens,
                att_score: c.att,
                ctc_score: c.ctc,
                lm_score: c.lm,
                score: c.score,
                dec_state: DecoderStep {
                    y_prev: c.token,
                    ..next_states[c.parent].clone()
                },
                ctc_state: c.ctc_state,
                lm_state: lm_next[c.parent].clone(),
            };
            if c.token == EOS {
                ended.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    // Stable sort keeps discovery order among equal scores.
    ended.sort_by(|a, b| b.score.total_cmp(&a.score));
    if ended.is_empty() {
        return Err(Error::Numeric("no hypothesis reached <eos> with a finite score".into()));
    }
    let nbest: Vec<Hypothesis> = ended.iter().take(cfg.nbest.max(1)).cloned().collect();
    Ok(BeamResult {
        best: ended.swap_remove(0),
        nbest,
    })
}

/// Attention-only greedy decoding; returns the characters without `<eos>`.
pub fn greedy(model: &Seq2Seq, store: &ParamStore, feats: &Tensor, max_len_ratio: f64) -> Result<Vec<TokenId>> {
    let enc = model.encode_values(store, feats)?;
    let frames = enc.frames();
    let max_len = ((max_len_ratio * frames as f64).ceil() as usize).max(1);
    let mut st = model.initial_step(frames);
    let mut out = Vec::new();
    for step in 0..=max_len {
        let mut tape = Tape::inference(store);
        let e = enc.on_tape(&mut tape);
        let ts = st.on_tape(&mut tape);
        let o = model.step(&mut tape, &e, &ts, false).map_err(|err| err.at_step(step))?;
        let lp = tape.data(o.log_probs);
        let tok = if step == max_len {
            EOS
        } else {
            (EOS..lp.len())
                .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
                .expect("nonempty vocabulary")
        };
        if tok == EOS {
            break;
        }
        out.push(tok);
        st = DecoderStep {
            y_prev: tok,
            ..o.next.read(&tape)
        };
    }
    Ok(out)
}
