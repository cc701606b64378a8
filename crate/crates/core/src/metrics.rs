//! Character and word error rates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorRates {
    pub char_errors: usize,
    pub chars: usize,
    pub word_errors: usize,
    pub words: usize,
}

impl ErrorRates {
    pub fn cer(&self) -> f64 {
        percent(self.char_errors, self.chars)
    }

    pub fn wer(&self) -> f64 {
        percent(self.word_errors, self.words)
    }

    pub fn add(&mut self, hyp: &str, reference: &str) {
        let hc: Vec<char> = hyp.chars().collect();
        let rc: Vec<char> = reference.chars().collect();
        self.char_errors += edit_distance(&hc, &rc);
        self.chars += rc.len();
        let hw: Vec<&str> = hyp.split_whitespace().collect();
        let rw: Vec<&str> = reference.split_whitespace().collect();
        self.word_errors += edit_distance(&hw, &rw);
        self.words += rw.len();
    }
}

fn percent(errors: usize, total: usize) -> f64 {
    match (errors, total) {
        (0, _) => 0.0,
        (_, 0) => 100.0,
        _ => 100.0 * errors as f64 / total as f64,
    }
}

/// Corpus-level CER and WER of `hyps` against `refs`, both keyed by
/// utterance id.
pub fn evaluate(hyps: &[(String, String)], refs: &[(String, String)]) -> Result<ErrorRates> {
    let hyp_map: BTreeMap<&str, &str> = hyps.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    if hyp_map.len() != hyps.len() {
        return Err(Error::Pairing("duplicate utterance id in hypotheses".into()));
    }
    let ref_map: BTreeMap<&str, &str> = refs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    if ref_map.len() != refs.len() {
        return Err(Error::Pairing("duplicate utterance id in references".into()));
    }
    if let Some(id) = hyp_map.keys().find(|k| !ref_map.contains_key(*k)) {
        return Err(Error::Pairing(format!("hypothesis `{id}` has no reference")));
    }
    let mut rates = ErrorRates::default();
    for (id, reference) in &ref_map {
        let hyp = hyp_map
            .get(id)
            .ok_or_else(|| Error::Pairing(format!("reference `{id}` has no hypothesis")))?;
        rates.add(hyp, reference);
    }
    Ok(rates)
}
