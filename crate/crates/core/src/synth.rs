//! Deterministic multi-domain synthetic corpora.
//!
//! Every token has a prototype feature vector shared by all domains. A
//! domain style decides how long utterances are, which tokens are likely,
//! how frames are distorted, and whether untranscribed background tokens
//! are appended. Utterances are fully determined by `(seed, style)`, so a
//! corpus file only records seeds and targets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 16;
pub const VOCAB: usize = 32;
pub const DEFAULT_GLOBAL_SEED: u64 = 1234;

pub const YT_LIKE: &str = "yt-like";
pub const VS_LIKE: &str = "vs-like";
pub const DT_LIKE: &str = "dt-like";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    /// Row-major `F x F` matrix applied to every frame: `x' = A x + bias`.
    pub transform: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
    /// Inclusive frame count per transcribed token.
    pub frames_per_token: (usize, usize),
    /// Inclusive transcribed tokens per utterance.
    pub utterance_tokens: (usize, usize),
    /// Unnormalized unigram weights over the vocabulary.
    pub token_weights: Vec<f64>,
    pub background_prob: f64,
    /// Inclusive distractor tokens per background segment.
    pub background_tokens: (usize, usize),
    /// Amplitude of distractor prototypes relative to transcribed ones.
    pub background_gain: f64,
}

fn stream(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthogonal `exp(angle * K)` for a random unit-norm skew-symmetric `K`,
/// with per-axis gains drawn from `[1 / spread, spread]`.
fn random_transform(rng: &mut ChaCha8Rng, dim: usize, angle: f64, spread: f64) -> Vec<f64> {
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in i + 1..dim {
            let v = gaussian(rng);
            k[(i, j)] = v;
            k[(j, i)] = -v;
        }
    }
    let norm = k.norm() / (dim as f64).sqrt();
    let q = (k * (angle / norm.max(1e-12))).exp();
    let gains: Vec<f64> = (0..dim).map(|_| spread.powf(rng.random_range(-1.0..=1.0))).collect();
    let a = q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(gains));
    (0..dim * dim).map(|i| a[(i / dim, i % dim)]).collect()
}

impl DomainStyle {
    /// Long utterances, noisy, with quiet background speakers appended.
    pub fn yt_like() -> Self {
        Self {
            name: YT_LIKE.into(),
            transform: identity(FEATURE_DIM),
            bias: vec![0.0; FEATURE_DIM],
            noise_sigma: 0.8,
            frames_per_token: (2, 4),
            utterance_tokens: (6, 12),
            token_weights: vec![1.0; VOCAB],
            background_prob: 0.5,
            background_tokens: (2, 4),
            background_gain: 0.35,
        }
    }

    /// Short queries over a skewed vocabulary under a different channel.
    pub fn vs_like() -> Self {
        let mut rng = stream(&[b"style", VS_LIKE.as_bytes()]);
        let mut weights = vec![1.0; VOCAB];
        for w in weights.iter_mut().take(4) {
            *w = 5.0;
        }
        Self {
            name: VS_LIKE.into(),
            transform: random_transform(&mut rng, FEATURE_DIM, 0.65, 1.2),
            bias: (0..FEATURE_DIM).map(|_| 0.25 * gaussian(&mut rng)).collect(),
            noise_sigma: 0.6,
            frames_per_token: (2, 3),
            utterance_tokens: (2, 5),
            token_weights: weights,
            background_prob: 0.0,
            background_tokens: (1, 1),
            background_gain: 0.0,
        }
    }

    /// Clean, moderately long utterances under a mild channel.
    pub fn dt_like() -> Self {
        let mut rng = stream(&[b"style", DT_LIKE.as_bytes()]);
        Self {
            name: DT_LIKE.into(),
            transform: random_transform(&mut rng, FEATURE_DIM, 0.25, 1.1),
            bias: vec![0.0; FEATURE_DIM],
            noise_sigma: 0.1,
            frames_per_token: (3, 4),
            utterance_tokens: (4, 9),
            token_weights: vec![1.0; VOCAB],
            background_prob: 0.0,
            background_tokens: (1, 1),
            background_gain: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            YT_LIKE => Ok(Self::yt_like()),
            VS_LIKE => Ok(Self::vs_like()),
            DT_LIKE => Ok(Self::dt_like()),
            other => Err(Error::Config(format!("unknown domain style `{other}`"))),
        }
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::yt_like(), Self::vs_like(), Self::dt_like()]
    }

    pub fn feature_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn condition_number(&self) -> f64 {
        let f = self.feature_dim();
        let sv = DMatrix::from_row_slice(f, f, &self.transform).singular_values();
        sv.max() / sv.min()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_dim();
        let fail = |m: &str| Err(Error::Config(format!("style `{}`: {m}", self.name)));
        if self.transform.len() != f * f {
            return fail("transform must be F x F");
        }
        if !(self.condition_number() < 100.0) {
            return fail("transform condition number must be below 100");
        }
        if !(0.0..=1.0).contains(&self.background_prob) {
            return fail("background_prob outside [0, 1]");
        }
        for (lo, hi) in [self.frames_per_token, self.utterance_tokens, self.background_tokens] {
            if lo == 0 || lo > hi {
                return fail("length bounds must satisfy 1 <= min <= max");
            }
        }
        if self.token_weights.iter().any(|w| !(*w >= 0.0)) || self.token_weights.iter().sum::<f64>() <= 0.0 {
            return fail("token weights must be non-negative with positive mass");
        }
        if self.noise_sigma < 0.0 || self.background_gain < 0.0 {
            return fail("noise and gain must be non-negative");
        }
        Ok(())
    }

    /// Expected share of token draws landing on `tokens`.
    pub fn token_mass(&self, tokens: &[usize]) -> f64 {
        tokens.iter().map(|&t| self.token_weights[t]).sum::<f64>() / self.token_weights.iter().sum::<f64>()
    }
}

fn identity(f: usize) -> Vec<f64> {
    (0..f * f).map(|i| if i / f == i % f { 1.0 } else { 0.0 }).collect()
}

/// Per-token base vectors shared across domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    rows: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn new(global_seed: u64, vocab: usize, dim: usize) -> Self {
        let mut rng = stream(&[b"prototypes", &global_seed.to_le_bytes()]);
        let rows = (0..vocab).map(|_| (0..dim).map(|_| gaussian(&mut rng)).collect()).collect();
        Self { rows }
    }

    pub fn desk() -> Self {
        Self::new(DEFAULT_GLOBAL_SEED, VOCAB, FEATURE_DIM)
    }

    pub fn vocab(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.rows[token]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `[T x F]`.
    pub features: Tensor<f32>,
    pub targets: Vec<usize>,
    pub domain: String,
    pub seed: u64,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

fn draw_tokens(rng: &mut ChaCha8Rng, dist: &WeightedIndex<f64>, n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let t = dist.sample(rng);
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// Generates one utterance. Consecutive tokens never repeat, so segment
/// boundaries stay recoverable from the frames.
pub fn gen_utterance(seed: u64, style: &DomainStyle, prototypes: &Prototypes) -> Utterance {
    let mut rng = stream(&[b"utterance", style.name.as_bytes(), &seed.to_le_bytes()]);
    let f = style.feature_dim();
    let dist = WeightedIndex::new(&style.token_weights).expect("validated weights");
    let n = rng.random_range(style.utterance_tokens.0..=style.utterance_tokens.1);
    let targets = draw_tokens(&mut rng, &dist, n);
    let mut frames: Vec<Vec<f64>> = Vec::new();
    for &t in &targets {
        let reps = rng.random_range(style.frames_per_token.0..=style.frames_per_token.1);
        frames.extend(std::iter::repeat_n(prototypes.row(t).to_vec(), reps));
    }
    if rng.random_bool(style.background_prob) {
        let uniform = WeightedIndex::new(vec![1.0; prototypes.vocab()]).expect("non-empty vocabulary");
        let k = rng.random_range(style.background_tokens.0..=style.background_tokens.1);
        for t in draw_tokens(&mut rng, &uniform, k) {
            let reps = rng.random_range(style.frames_per_token.0..=style.frames_per_token.1);
            let quiet: Vec<f64> = prototypes.row(t).iter().map(|v| v * style.background_gain).collect();
            frames.extend(std::iter::repeat_n(quiet, reps));
        }
    }
    let mut data = Vec::with_capacity(frames.len() * f);
    for x in &frames {
        for r in 0..f {
            let row = &style.transform[r * f..(r + 1) * f];
            let mut v = style.bias[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if style.noise_sigma > 0.0 {
                v += style.noise_sigma * gaussian(&mut rng);
            }
            data.push(v as f32);
        }
    }
    let features = Tensor::new([frames.len(), f], data).expect("frame count matches");
    Utterance { features, targets, domain: style.name.clone(), seed }
}

/// Seeds of a split: disjoint ranges per split name.
pub fn split_seeds(split: &str, count: usize) -> Vec<u64> {
    let mut rng = stream(&[b"split", split.as_bytes()]);
    (0..count).map(|_| rng.random()).collect()
}

pub fn gen_split(split: &str, style: &DomainStyle, prototypes: &Prototypes, count: usize) -> Vec<Utterance> {
    let seeds = split_seeds(&format!("{split}/{}", style.name), count);
    seeds.into_iter().map(|s| gen_utterance(s, style, prototypes)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub count: usize,
    pub mean_length: f64,
    pub mean_frames: f64,
    pub token_histogram: Vec<usize>,
}

/// Per-domain aggregate statistics.
pub fn corpus_stats(utterances: &[Utterance]) -> BTreeMap<String, DomainStats> {
    let mut out: BTreeMap<String, DomainStats> = BTreeMap::new();
    for u in utterances {
        let s = out.entry(u.domain.clone()).or_default();
        s.count += 1;
        s.mean_length += u.targets.len() as f64;
        s.mean_frames += u.frames() as f64;
        for &t in &u.targets {
            if s.token_histogram.len() <= t {
                s.token_histogram.resize(t + 1, 0);
            }
            s.token_histogram[t] += 1;
        }
    }
    for s in out.values_mut() {
        s.mean_length /= s.count as f64;
        s.mean_frames /= s.count as f64;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub seed: u64,
    pub domain: String,
    pub targets: Vec<usize>,
}

/// Writes one JSON record per line.
pub fn save_split(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for u in utterances {
        let rec = CorpusRecord { seed: u.seed, domain: u.domain.clone(), targets: u.targets.clone() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a split and regenerates its features, checking that every record
/// reproduces its stored targets.
pub fn load_split(path: &Path, styles: &[DomainStyle], prototypes: &Prototypes) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)?;
        let style = styles
            .iter()
            .find(|s| s.name == rec.domain)
            .ok_or_else(|| Error::Corpus(format!("line {}: unknown domain `{}`", i + 1, rec.domain)))?;
        let u = gen_utterance(rec.seed, style, prototypes);
        if u.targets != rec.targets {
            return Err(Error::Corpus(format!("line {}: seed {} does not reproduce its targets", i + 1, rec.seed)));
        }
        out.push(u);
    }
    Ok(out)
}
