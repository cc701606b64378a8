//! Connectionist temporal classification in log space.
//!
//! [`ctc_forward`] is the training loss; [`loss_and_grad`] adds the
//! forward-backward gradient used by the tape. [`CtcPrefixScorer`] computes
//! label-synchronous prefix probabilities for joint decoding.

use crate::error::{Error, Result};
use crate::tensor::{log_add, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn check_inputs(logp: &Tensor, labels: &[usize], blank: usize) -> Result<(usize, usize)> {
    let (t, k) = logp
        .dims2()
        .ok_or_else(|| Error::shape("ctc", logp.shape(), &[]))?;
    if blank >= k {
        return Err(Error::Argument(format!("blank {blank} outside {k} classes")));
    }
    for &l in labels {
        if l == blank {
            return Err(Error::Argument("labels must not contain the blank".into()));
        }
        if l >= k {
            return Err(Error::Argument(format!("label {l} outside {k} classes")));
        }
    }
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    let needed = labels.len() + repeats;
    if t < needed {
        return Err(Error::Infeasible {
            frames: t,
            labels: labels.len(),
        });
    }
    Ok((t, k))
}

fn extended(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Whether the transition `s-2 → s` is allowed (skipping a blank).
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn alphas(logp: &Tensor, ext: &[usize], blank: usize) -> Vec<f64> {
    let (t_len, k) = logp.dims2().unwrap();
    let s_len = ext.len();
    let lp = logp.data();
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = &lp[t * k..(t + 1) * k];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == NEG_INF { NEG_INF } else { a + row[ext[s]] };
        }
    }
    alpha
}

fn total_log_prob(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let last = &alpha[(t_len - 1) * s_len..];
    if s_len == 1 {
        last[0]
    } else {
        log_add(last[s_len - 1], last[s_len - 2])
    }
}

/// `−log Σ_alignments Π_t p_t(π_t)` for per-frame log probabilities
/// `log_probs: [T, K]`.
pub fn ctc_forward(log_probs: &Tensor, labels: &[usize], blank: usize) -> Result<f64> {
    let (t_len, _) = check_inputs(log_probs, labels, blank)?;
    let ext = extended(labels, blank);
    let alpha = alphas(log_probs, &ext, blank);
    let lp = total_log_prob(&alpha, t_len, ext.len());
    if !lp.is_finite() {
        return Err(Error::Numeric("CTC total probability underflowed".into()));
    }
    Ok(-lp)
}

/// Loss together with its gradient with respect to every `log_probs` entry.
pub fn loss_and_grad(log_probs: &Tensor, labels: &[usize], blank: usize) -> Result<(f64, Vec<f64>)> {
    let (t_len, k) = check_inputs(log_probs, labels, blank)?;
    let ext = extended(labels, blank);
    let s_len = ext.len();
    let alpha = alphas(log_probs, &ext, blank);
    let total = total_log_prob(&alpha, t_len, s_len);
    if !total.is_finite() {
        return Err(Error::Numeric("CTC total probability underflowed".into()));
    }
    let lp = log_probs.data();

    // beta[t][s]: log probability of finishing from state s at frame t,
    // excluding frame t's emission.
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let row = &lp[(t + 1) * k..(t + 2) * k];
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s] + row[ext[s]];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1] + row[ext[s + 1]]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                b = log_add(b, next[s + 2] + row[ext[s + 2]]);
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; t_len * k];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - total;
            if occ > NEG_INF {
                grad[t * k + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-total, grad))
}

/// Forward variables of one label prefix: log probability that frames
/// `0..=t` emit the prefix ending in a non-blank (`nonblank[t]`) or a blank
/// (`blank[t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    pub nonblank: Vec<f64>,
    pub blank: Vec<f64>,
    pub last: Option<usize>,
    /// Log prefix probability of this prefix.
    pub score: f64,
}

/// Prefix scoring against one utterance's CTC posteriors.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer {
    logp: Tensor,
    blank: usize,
    eos: usize,
}

impl CtcPrefixScorer {
    pub fn new(log_probs: Tensor, blank: usize, eos: usize) -> Result<Self> {
        let (_, k) = log_probs
            .dims2()
            .ok_or_else(|| Error::shape("ctc prefix", log_probs.shape(), &[]))?;
        if blank >= k || eos >= k || blank == eos {
            return Err(Error::Argument(format!("bad blank/eos ids {blank}/{eos} for {k} classes")));
        }
        Ok(CtcPrefixScorer { logp: log_probs, blank, eos })
    }

    pub fn frames(&self) -> usize {
        self.logp.shape()[0]
    }

    /// State of the empty prefix.
    pub fn initial(&self) -> CtcPrefixState {
        let (t_len, k) = self.logp.dims2().unwrap();
        let lp = self.logp.data();
        let mut blank = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += lp[t * k + self.blank];
            blank.push(acc);
        }
        CtcPrefixState {
            nonblank: vec![NEG_INF; t_len],
            blank,
            last: None,
            score: 0.0,
        }
    }

    /// Extends `prev` by `token`. Returns the change in log prefix score and
    /// the new state. Extending by the end symbol yields the full-sequence
    /// probability of `prev`.
    pub fn extend(&self, prev: &CtcPrefixState, token: usize) -> Result<(f64, CtcPrefixState)> {
        let (t_len, k) = self.logp.dims2().unwrap();
        if token == self.blank {
            return Err(Error::Argument("cannot extend a prefix by the blank".into()));
        }
        if token >= k {
            return Err(Error::Argument(format!("token {token} outside {k} classes")));
        }
        if token == self.eos {
            let full = log_add(prev.nonblank[t_len - 1], prev.blank[t_len - 1]);
            let mut next = prev.clone();
            next.score = full;
            return Ok((full - prev.score, next));
        }
        let lp = self.logp.data();
        let emit = |t: usize| lp[t * k + token];
        let phi = |t: usize| {
            if prev.last == Some(token) {
                prev.blank[t]
            } else {
                log_add(prev.blank[t], prev.nonblank[t])
            }
        };
        let mut nonblank = vec![NEG_INF; t_len];
        let mut blank = vec![NEG_INF; t_len];
        nonblank[0] = if prev.last.is_none() { emit(0) } else { NEG_INF };
        let mut psi = nonblank[0];
        for t in 1..t_len {
            let p = phi(t - 1);
            let nb = log_add(nonblank[t - 1], p);
            nonblank[t] = if nb == NEG_INF { NEG_INF } else { nb + emit(t) };
            let bb = log_add(blank[t - 1], nonblank[t - 1]);
            blank[t] = if bb == NEG_INF { NEG_INF } else { bb + lp[t * k + self.blank] };
            if p > NEG_INF {
                psi = log_add(psi, p + emit(t));
            }
        }
        let next = CtcPrefixState {
            nonblank,
            blank,
            last: Some(token),
            score: psi,
        };
        Ok((psi - prev.score, next))
    }

    /// Prefix score of a whole label sequence computed from scratch.
    pub fn score_prefix(&self, tokens: &[usize]) -> Result<f64> {
        let mut st = self.initial();
        for &t in tokens {
            st = self.extend(&st, t)?.1;
        }
        Ok(st.score)
    }
}

/// One incremental step of prefix scoring; see [`CtcPrefixScorer::extend`].
pub fn ctc_prefix_score(
    prefix_state: &CtcPrefixState,
    new_token: usize,
    frame_log_probs: &Tensor,
    blank: usize,
    eos: usize,
) -> Result<(f64, CtcPrefixState)> {
    CtcPrefixScorer::new(frame_log_probs.clone(), blank, eos)?.extend(prefix_state, new_token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{activation, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_log_probs(t: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        activation(Activation::LogSoftmax, &Tensor::matrix(t, k, raw).unwrap())
    }

    #[test]
    fn forced_single_frame() {
        let lp = Tensor::matrix(1, 2, vec![-1e300, 0.0]).unwrap();
        assert!(ctc_forward(&lp, &[1], 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_uniform_frames() {
        let h = 0.5f64.ln();
        let lp = Tensor::matrix(2, 2, vec![h, h, h, h]).unwrap();
        let loss = ctc_forward(&lp, &[1], 0).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_invalid() {
        let lp = random_log_probs(2, 3, 1);
        assert!(matches!(ctc_forward(&lp, &[1, 1], 0), Err(Error::Infeasible { .. })));
        assert!(ctc_forward(&lp, &[1, 2], 0).is_ok());
        assert!(matches!(ctc_forward(&lp, &[0], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn empty_label_sequence_is_all_blank() {
        let lp = random_log_probs(4, 3, 9);
        let expected: f64 = (0..4).map(|t| lp.row(t)[0]).sum();
        assert!((ctc_forward(&lp, &[], 0).unwrap() + expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lp = random_log_probs(5, 4, 3);
        let labels = [1, 2, 2];
        let (_, grad) = loss_and_grad(&lp, &labels, 0).unwrap();
        let fd = crate::gradcheck::finite_diff_grad(|x| ctc_forward(x, &labels, 0).unwrap(), &lp, 1e-6).unwrap();
        assert!(crate::gradcheck::relative_error(&grad, fd.data()) < 1e-7);
    }

    #[test]
    fn prefix_single_frame_forced() {
        // classes: blank, eos, a
        let lp = Tensor::matrix(1, 3, vec![-1e300, -1e300, 0.0]).unwrap();
        let scorer = CtcPrefixScorer::new(lp, 0, 1).unwrap();
        let (delta, _) = scorer.extend(&scorer.initial(), 2).unwrap();
        assert!(delta.abs() < 1e-12);
        assert!(scorer.extend(&scorer.initial(), 0).is_err());
    }

    /// Every length-`t` path over `k` classes with its log probability.
    fn paths(lp: &Tensor) -> Vec<(Vec<usize>, f64)> {
        let (t_len, k) = lp.dims2().unwrap();
        let mut out = vec![(Vec::new(), 0.0)];
        for t in 0..t_len {
            out = out
                .into_iter()
                .flat_map(|(p, s)| {
                    (0..k).map(move |c| {
                        let mut q = p.clone();
                        q.push(c);
                        (q, s + lp.row(t)[c])
                    })
                })
                .collect();
        }
        out
    }

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &c in path {
            if Some(c) != prev && c != blank {
                out.push(c);
            }
            prev = Some(c);
        }
        out
    }

    fn log_sum(xs: impl Iterator<Item = f64>) -> f64 {
        xs.fold(NEG_INF, log_add)
    }

    fn sequences(chars: &[usize], max_len: usize) -> Vec<Vec<usize>> {
        let mut all = vec![Vec::new()];
        let mut frontier = vec![Vec::new()];
        for _ in 0..max_len {
            frontier = frontier
                .iter()
                .flat_map(|s: &Vec<usize>| {
                    chars.iter().map(move |&c| {
                        let mut n = s.clone();
                        n.push(c);
                        n
                    })
                })
                .collect();
            all.extend(frontier.iter().cloned());
        }
        all
    }

    #[test]
    fn forward_equals_alignment_enumeration() {
        for k in 2..=3 {
            for t in 1..=6 {
                let lp = random_log_probs(t, k, (10 * k + t) as u64);
                let all = paths(&lp);
                let chars: Vec<usize> = (1..k).collect();
                for labels in sequences(&chars, 3) {
                    let brute = log_sum(all.iter().filter(|(p, _)| collapse(p, 0) == labels).map(|(_, s)| *s));
                    match ctc_forward(&lp, &labels, 0) {
                        Ok(loss) => assert!((-loss - brute).abs() < 1e-10, "T={t} {labels:?}"),
                        Err(Error::Infeasible { .. }) => assert_eq!(brute, NEG_INF),
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }

    #[test]
    fn prefix_scores_equal_alignment_enumeration() {
        // classes: blank, eos, then characters
        for k in 3..=4 {
            for t in 1..=5 {
                let lp = random_log_probs(t, k, (100 * k + t) as u64);
                let all = paths(&lp);
                let scorer = CtcPrefixScorer::new(lp.clone(), 0, 1).unwrap();
                let chars: Vec<usize> = (2..k).collect();
                for prefix in sequences(&chars, 3) {
                    let exact = log_sum(all.iter().filter(|(p, _)| collapse(p, 0) == prefix).map(|(_, s)| *s));
                    let starts = log_sum(
                        all.iter()
                            .filter(|(p, _)| collapse(p, 0).starts_with(&prefix))
                            .map(|(_, s)| *s),
                    );
                    let score = scorer.score_prefix(&prefix).unwrap();
                    let mut st = scorer.initial();
                    for &c in &prefix {
                        st = scorer.extend(&st, c).unwrap().1;
                    }
                    let full = scorer.extend(&st, 1).unwrap().1.score;
                    for (got, want) in [(score, starts), (full, exact)] {
                        if want == NEG_INF {
                            assert_eq!(got, NEG_INF, "T={t} {prefix:?}");
                        } else {
                            assert!((got - want).abs() < 1e-10, "T={t} {prefix:?}: {got} vs {want}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn full_sequence_mass_is_at_most_one() {
        let lp = random_log_probs(4, 4, 77);
        let scorer = CtcPrefixScorer::new(lp, 0, 1).unwrap();
        let mass: f64 = sequences(&[2, 3], 4)
            .iter()
            .map(|s| {
                let mut st = scorer.initial();
                for &c in s {
                    st = scorer.extend(&st, c).unwrap().1;
                }
                scorer.extend(&st, 1).unwrap().1.score.exp()
            })
            .sum();
        assert!(mass <= 1.0 + 1e-10, "{mass}");
    }
}
