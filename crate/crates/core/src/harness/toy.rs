//! Synthetic speech-like task: a character bigram grammar and noisy
//! per-character feature prototypes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::params::name_hash;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskConfig {
    /// Output characters. A space, if present, never starts or ends a
    /// transcript and never follows itself.
    pub alphabet: String,
    pub feat_dim: usize,
    /// Inclusive range of frames emitted per character.
    pub frames_per_char: (usize, usize),
    pub noise_sigma: f64,
    /// Inclusive range of transcript lengths in characters.
    pub length: (usize, usize),
    /// Allowed successors per character in the generated grammar.
    pub branching: usize,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            alphabet: "abcdefg ".into(),
            feat_dim: 8,
            frames_per_char: (2, 4),
            noise_sigma: 0.5,
            length: (5, 15),
            branching: 3,
            seed: 1,
        }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let chars: Vec<char> = self.alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("toy alphabet is empty".into()));
        }
        if chars.iter().any(|c| c.is_control() || *c == '"') {
            return Err(Error::Config("toy alphabet holds a control or quote character".into()));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let (lo, hi) = self.frames_per_char;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid frames_per_char range {lo}..={hi}")));
        }
        let (lo, hi) = self.length;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid length range {lo}..={hi}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if self.branching == 0 {
            return Err(Error::Config("branching must be positive".into()));
        }
        Ok(())
    }

    pub fn chars(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("toy.alphabet", format!("\"{}\"", self.alphabet));
        kv.set("toy.feat_dim", self.feat_dim);
        kv.set("toy.frames_min", self.frames_per_char.0);
        kv.set("toy.frames_max", self.frames_per_char.1);
        kv.set("toy.noise_sigma", self.noise_sigma);
        kv.set("toy.length_min", self.length.0);
        kv.set("toy.length_max", self.length.1);
        kv.set("toy.branching", self.branching);
        kv.set("toy.seed", self.seed);
    }

    /// Reads the `toy.*` keys, falling back to defaults for missing ones.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = ToyTaskConfig::default();
        let alphabet = match kv.raw("toy.alphabet") {
            Some(raw) => raw
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .ok_or_else(|| Error::Config("toy.alphabet must be double-quoted".into()))?
                .to_string(),
            None => d.alphabet,
        };
        let cfg = ToyTaskConfig {
            alphabet,
            feat_dim: kv.get_or("toy.feat_dim", d.feat_dim)?,
            frames_per_char: (
                kv.get_or("toy.frames_min", d.frames_per_char.0)?,
                kv.get_or("toy.frames_max", d.frames_per_char.1)?,
            ),
            noise_sigma: kv.get_or("toy.noise_sigma", d.noise_sigma)?,
            length: (kv.get_or("toy.length_min", d.length.0)?, kv.get_or("toy.length_max", d.length.1)?),
            branching: kv.get_or("toy.branching", d.branching)?,
            seed: kv.get_or("toy.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Character bigram model over alphabet indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    chars: Vec<char>,
    start: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl Grammar {
    /// Weights need not be normalized; each row and the start vector must
    /// have positive mass.
    pub fn new(chars: Vec<char>, start: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = chars.len();
        if start.len() != n || rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("grammar must be {n}x{n} with {n} start weights")));
        }
        let bad = |w: &[f64]| w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0;
        if bad(&start) {
            return Err(Error::Config("grammar start weights have no mass".into()));
        }
        if let Some(i) = rows.iter().position(|r| bad(r)) {
            return Err(Error::Config(format!("grammar row for {:?} has no mass", chars[i])));
        }
        Ok(Grammar { chars, start, rows })
    }

    /// Each character gets `branching` successors with weights halving in a
    /// seeded random order; the space never follows itself or starts a line.
    pub fn generate(cfg: &ToyTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let chars = cfg.chars();
        let n = chars.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ name_hash("toy.grammar"));
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut succ: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            if succ.is_empty() {
                succ.push(i);
            }
            succ.shuffle(&mut rng);
            let mut row = vec![0.0; n];
            for (rank, &j) in succ.iter().take(cfg.branching).enumerate() {
                row[j] = 0.5f64.powi(rank as i32);
            }
            rows.push(row);
        }
        let start = chars.iter().map(|&c| if c == ' ' { 0.0 } else { 1.0 }).collect();
        Grammar::new(chars, start, rows)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Normalized transition probability from `a` to `b`.
    pub fn prob(&self, a: usize, b: usize) -> f64 {
        self.rows[a][b] / self.rows[a].iter().sum::<f64>()
    }

    /// Draws one transcript of exactly `len` characters.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Result<String> {
        let space = self.chars.iter().position(|&c| c == ' ');
        let mut out = String::with_capacity(len);
        let mut prev: Option<usize> = None;
        for pos in 0..len {
            let mut w = match prev {
                None => self.start.clone(),
                Some(p) => self.rows[p].clone(),
            };
            if pos + 1 == len {
                if let Some(s) = space {
                    w[s] = 0.0;
                }
            }
            let i = draw(&w, rng).ok_or_else(|| {
                Error::Config(format!(
                    "grammar cannot continue after {:?} at position {pos}",
                    prev.map(|p| self.chars[p])
                ))
            })?;
            out.push(self.chars[i]);
            prev = Some(i);
        }
        Ok(out)
    }
}

fn draw(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return Some(i);
            }
            u -= w;
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// One fixed standard-normal prototype per alphabet character.
pub fn prototypes(cfg: &ToyTaskConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ name_hash("toy.prototypes"));
    cfg.chars()
        .iter()
        .map(|_| (0..cfg.feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Seed of the feature noise for one utterance.
pub fn utt_seed(cfg: &ToyTaskConfig, utt_id: &str) -> u64 {
    cfg.seed ^ name_hash(utt_id)
}

/// Unnormalized `[T, f]` features: each character emits a seeded number of
/// frames in `frames_per_char`, each its prototype plus Gaussian noise.
pub fn synth_features(transcript: &str, cfg: &ToyTaskConfig, utt_seed: u64) -> Result<Tensor> {
    let chars = cfg.chars();
    let protos = prototypes(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
    let (lo, hi) = cfg.frames_per_char;
    let mut data = Vec::new();
    let mut frames = 0;
    for c in transcript.chars() {
        let i = chars
            .iter()
            .position(|&a| a == c)
            .ok_or_else(|| Error::Vocabulary(format!("character {c:?} not in toy alphabet")))?;
        let k = rng.gen_range(lo..=hi);
        for _ in 0..k {
            for &p in &protos[i] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(p + cfg.noise_sigma * noise);
            }
        }
        frames += k;
    }
    if frames == 0 {
        return Err(Error::Argument("empty transcript".into()));
    }
    Tensor::matrix(frames, cfg.feat_dim, data)
}

/// Per-dimension mean and standard deviation of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population moments over every frame; constant dimensions keep unit
    /// scale.
    pub fn fit(feats: &[Tensor]) -> Result<Self> {
        let dim = feats
            .first()
            .map(|t| t.shape()[1])
            .ok_or_else(|| Error::Argument("no features to normalize".into()))?;
        let mut sum = vec![0.0; dim];
        let mut n = 0usize;
        for t in feats {
            if t.shape()[1] != dim {
                return Err(Error::shape("feature stats", &[dim], &t.shape()[1..]));
            }
            for r in 0..t.shape()[0] {
                for (s, v) in sum.iter_mut().zip(t.row(r)) {
                    *s += v;
                }
            }
            n += t.shape()[0];
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; dim];
        for t in feats {
            for r in 0..t.shape()[0] {
                for ((s, v), m) in sq.iter_mut().zip(t.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureStats { mean, std })
    }

    pub fn apply(&self, feats: &Tensor) -> Result<Tensor> {
        let (t, f) = (feats.shape()[0], feats.shape()[1]);
        if f != self.mean.len() {
            return Err(Error::shape("normalize", &[self.mean.len()], &[f]));
        }
        let data = (0..t)
            .flat_map(|r| {
                feats
                    .row(r)
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::matrix(t, f, data)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        kv.set("stats.mean", join(&self.mean));
        kv.set("stats.std", join(&self.std));
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let parse = |key: &str| -> Result<Vec<f64>> {
            kv.list(key)
                .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?
                .iter()
                .map(|s| s.parse().map_err(|_| Error::Config(format!("invalid number `{s}` in `{key}`"))))
                .collect()
        };
        let (mean, std) = (parse("stats.mean")?, parse("stats.std")?);
        if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("inconsistent feature statistics".into()));
        }
        Ok(FeatureStats { mean, std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(k: usize) -> ToyTaskConfig {
        ToyTaskConfig {
            noise_sigma: 0.0,
            frames_per_char: (k, k),
            ..ToyTaskConfig::default()
        }
    }

    #[test]
    fn single_char_emits_k_frames() {
        let f = synth_features("a", &noiseless(2), 5).unwrap();
        assert_eq!(f.shape(), &[2, 8]);
    }

    #[test]
    fn noiseless_frames_are_prototypes() {
        let cfg = noiseless(3);
        let protos = prototypes(&cfg);
        let f = synth_features("cab", &cfg, 9).unwrap();
        for (i, c) in [2, 0, 1].iter().enumerate() {
            for r in 0..3 {
                assert_eq!(f.row(3 * i + r), protos[*c].as_slice());
            }
        }
    }

    #[test]
    fn nearest_prototype_decoding_is_exact_without_noise() {
        let cfg = noiseless(2);
        let grammar = Grammar::generate(&cfg).unwrap();
        let protos = prototypes(&cfg);
        let chars = cfg.chars();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 0..50 {
            let text = grammar.sample(5 + n % 11, &mut rng).unwrap();
            let f = synth_features(&text, &cfg, n as u64).unwrap();
            let decoded: String = (0..f.shape()[0])
                .step_by(2)
                .map(|r| {
                    let dist = |p: &Vec<f64>| f.row(r).iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let best = (0..protos.len())
                        .min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b])))
                        .unwrap();
                    chars[best]
                })
                .collect();
            assert_eq!(decoded, text);
        }
    }

    #[test]
    fn oov_and_empty_rejected() {
        let cfg = ToyTaskConfig::default();
        assert!(matches!(synth_features("az", &cfg, 0), Err(Error::Vocabulary(_))));
        assert!(matches!(synth_features("", &cfg, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn samples_respect_grammar() {
        let cfg = ToyTaskConfig::default();
        let g = Grammar::generate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 0..200 {
            let len = 5 + n % 11;
            let s = g.sample(len, &mut rng).unwrap();
            let idx: Vec<usize> = s.chars().map(|c| cfg.chars().iter().position(|&a| a == c).unwrap()).collect();
            assert_eq!(idx.len(), len);
            assert!(!s.starts_with(' ') && !s.ends_with(' ') && !s.contains("  "));
            for w in idx.windows(2) {
                assert!(g.prob(w[0], w[1]) > 0.0 && w[0] != w[1]);
            }
        }
    }

    #[test]
    fn degenerate_grammar_rejected() {
        let chars = vec!['a', 'b'];
        let err = Grammar::new(chars.clone(), vec![1.0, 1.0], vec![vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(Grammar::new(chars, vec![0.0, 0.0], vec![vec![1.0; 2]; 2]).is_err());
    }

    #[test]
    fn normalized_moments() {
        let cfg = ToyTaskConfig::default();
        let feats: Vec<Tensor> = (0..40)
            .map(|i| synth_features("abc gfe", &cfg, i).unwrap())
            .collect();
        let stats = FeatureStats::fit(&feats).unwrap();
        let normed: Vec<Tensor> = feats.iter().map(|f| stats.apply(f).unwrap()).collect();
        let again = FeatureStats::fit(&normed).unwrap();
        for (m, s) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-8);
            assert!((s * s - 1.0).abs() < 1e-6);
        }
        let mut kv = KeyValues::new();
        stats.write_kv(&mut kv);
        let kv = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(FeatureStats::from_kv(&kv).unwrap(), stats);
    }

    #[test]
    fn config_round_trips() {
        let cfg = ToyTaskConfig {
            noise_sigma: 1.25,
            seed: 77,
            ..ToyTaskConfig::default()
        };
        let mut kv = KeyValues::new();
        cfg.write_kv(&mut kv);
        let kv = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(ToyTaskConfig::from_kv(&kv).unwrap(), cfg);
    }
}
