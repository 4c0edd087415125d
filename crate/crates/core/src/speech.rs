//! Synthetic "speech encoder" output: each character becomes a fixed random
//! codebook vector held for a few frames, plus Gaussian noise. Also the
//! k-frame concatenation that turns frames into projector inputs.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::is_plain_char;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const BUNDLED_SENTENCES: &str = include_str!("../data/sentences.txt");

#[derive(Debug, Error)]
pub enum SpeechError {
    #[error("character {0:?} is outside the synthesis alphabet")]
    UnknownChar(char),
    #[error("cannot synthesize an empty transcript")]
    EmptyText,
    #[error("utterance has {frames} frames, fewer than k = {k}")]
    TooShort { frames: usize, k: usize },
    #[error("downsampling rate must be at least 1")]
    ZeroRate,
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("need at least 10 lines, got {0}")]
    TooFewLines(usize),
    #[error("split proportions must be non-negative, sum to 1 and give non-empty dev/test splits: {0:?}")]
    Proportions([f64; 3]),
    #[error("dataset file line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SpeechError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub feature_dim: usize,
    pub frames_per_symbol_min: usize,
    pub frames_per_symbol_max: usize,
    pub noise_std: f64,
    pub codebook_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            frames_per_symbol_min: 3,
            frames_per_symbol_max: 8,
            noise_std: 0.05,
            codebook_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(SpeechError::Config("feature_dim must be at least 1".into()));
        }
        if self.frames_per_symbol_min == 0 || self.frames_per_symbol_min > self.frames_per_symbol_max {
            return Err(SpeechError::Config(format!(
                "need 1 <= frames_per_symbol_min <= frames_per_symbol_max, got {}..{}",
                self.frames_per_symbol_min, self.frames_per_symbol_max
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SpeechError::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// The fixed feature vector of one character, entries `N(0, 1)`.
    pub fn codebook_row(&self, c: char) -> Result<Vec<f32>> {
        if !is_plain_char(c) {
            return Err(SpeechError::UnknownChar(c));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.codebook_seed, &["codebook", &c.to_string()]));
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        Ok((0..self.feature_dim).map(|_| normal.sample(&mut rng)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub seed: u64,
    /// `[T×feature_dim]`
    pub frames: Tensor<f32>,
}

fn sample_durations(n: usize, rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<usize> {
    (0..n)
        .map(|_| rng.random_range(config.frames_per_symbol_min..=config.frames_per_symbol_max))
        .collect()
}

/// Per-character frame counts used by [`synthesize`] for `(text, seed)`.
pub fn durations(text: &str, seed: u64, config: &SynthConfig) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_durations(text.chars().count(), &mut rng, config)
}

pub fn synthesize(id: impl Into<String>, text: &str, seed: u64, config: &SynthConfig) -> Result<Utterance> {
    config.validate()?;
    if text.is_empty() {
        return Err(SpeechError::EmptyText);
    }
    let rows = text.chars().map(|c| config.codebook_row(c)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let durs = sample_durations(rows.len(), &mut rng, config);
    let total: usize = durs.iter().sum();
    let mut data = Vec::with_capacity(total * config.feature_dim);
    for (row, &dur) in rows.iter().zip(&durs) {
        for _ in 0..dur {
            data.extend_from_slice(row);
        }
    }
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0f64, config.noise_std).expect("finite noise");
        for x in data.iter_mut() {
            *x += normal.sample(&mut rng) as f32;
        }
    }
    Ok(Utterance {
        id: id.into(),
        text: text.to_string(),
        seed,
        frames: Tensor::new(vec![total, config.feature_dim], data).expect("frame count"),
    })
}

/// Concatenates each run of `k` consecutive frames into one row; the
/// trailing `T mod k` frames are dropped.
pub fn downsample(frames: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    if k == 0 {
        return Err(SpeechError::ZeroRate);
    }
    let (t, d) = (frames.rows(), frames.cols());
    if t < k {
        return Err(SpeechError::TooShort { frames: t, k });
    }
    let rows = t / k;
    // row-major layout makes the concatenation a plain prefix reshape
    let data = frames.data()[..rows * k * d].to_vec();
    Ok(Tensor::new(vec![rows, k * d], data).expect("prefix size"))
}

/// The character covering most frames of each downsampled row (earlier
/// character on ties). This is what an ideal speech projector could recover
/// from a row.
pub fn row_symbols(text: &str, durations: &[usize], k: usize) -> Vec<char> {
    let frame_chars: Vec<char> = text
        .chars()
        .zip(durations)
        .flat_map(|(c, &d)| std::iter::repeat_n(c, d))
        .collect();
    frame_chars
        .chunks_exact(k.max(1))
        .map(|chunk| {
            let mut best = (chunk[0], 0usize);
            let mut i = 0;
            while i < chunk.len() {
                let c = chunk[i];
                let run = chunk[i..].iter().take_while(|&&x| x == c).count();
                if run > best.1 {
                    best = (c, run);
                }
                i += run;
            }
            best.0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub proportions: [f64; 3],
    pub corpus_seed: u64,
}

/// The bundled sentence list, one per line.
pub fn bundled_sentences() -> Vec<String> {
    BUNDLED_SENTENCES.lines().filter(|l| !l.is_empty()).map(str::to_string).collect()
}

/// Seed of the utterance with the given id.
pub fn utterance_seed(corpus_seed: u64, id: &str) -> u64 {
    derive_seed(corpus_seed, &["utterance", id])
}

/// Shuffles `lines` with `corpus_seed` and partitions them by
/// `proportions` (train, dev, test). Line `i` gets id `utt{i:05}`.
pub fn make_dataset(lines: &[String], proportions: [f64; 3], corpus_seed: u64, config: &SynthConfig) -> Result<DatasetSplits> {
    if lines.len() < 10 {
        return Err(SpeechError::TooFewLines(lines.len()));
    }
    let n = lines.len();
    let sum: f64 = proportions.iter().sum();
    let n_dev = (proportions[1] * n as f64).round() as usize;
    let n_test = (proportions[2] * n as f64).round() as usize;
    if proportions.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 || n_dev == 0 || n_test == 0 || n_dev + n_test >= n
    {
        return Err(SpeechError::Proportions(proportions));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, &["shuffle"])));
    let make = |i: usize| {
        let id = format!("utt{i:05}");
        let seed = utterance_seed(corpus_seed, &id);
        synthesize(id, &lines[i], seed, config)
    };
    let n_train = n - n_dev - n_test;
    let train = order[..n_train].iter().map(|&i| make(i)).collect::<Result<_>>()?;
    let dev = order[n_train..n_train + n_dev].iter().map(|&i| make(i)).collect::<Result<_>>()?;
    let test = order[n_train + n_dev..].iter().map(|&i| make(i)).collect::<Result<_>>()?;
    Ok(DatasetSplits {
        train,
        dev,
        test,
        proportions,
        corpus_seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    id: String,
    text: String,
    seed: u64,
}

/// Writes one JSON record `{id, text, seed}` per line. Frames are not
/// stored; [`load_split`] regenerates them.
pub fn save_split(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in utterances {
        let rec = DatasetRecord {
            id: u.id.clone(),
            text: u.text.clone(),
            seed: u.seed,
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("plain record"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_split(path: &Path, config: &SynthConfig) -> Result<Vec<Utterance>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| SpeechError::Record {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(synthesize(rec.id, &rec.text, rec.seed, config)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_input() {
        let c = SynthConfig::default();
        assert!(matches!(synthesize("x", "", 1, &c), Err(SpeechError::EmptyText)));
        assert!(matches!(synthesize("x", "caf\u{e9}", 1, &c), Err(SpeechError::UnknownChar(_))));
        let bad = SynthConfig {
            frames_per_symbol_min: 5,
            frames_per_symbol_max: 4,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn row_symbols_pick_majority() {
        // frames: a a a b b | b c c c c | c
        assert_eq!(row_symbols("abc", &[3, 3, 5], 5), vec!['a', 'c']);
        // tie 2/2 (a a b b c) goes to the earlier character
        assert_eq!(row_symbols("abc", &[2, 2, 1], 5), vec!['a']);
    }

    #[test]
    fn bundled_corpus_is_large_enough() {
        let s = bundled_sentences();
        assert!(s.len() >= 500);
        assert!(s.iter().all(|l| l.chars().all(|c| c == ' ' || c.is_ascii_lowercase())));
    }
}
