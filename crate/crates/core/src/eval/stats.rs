use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("baseline WER must be positive, got {0}")]
    ZeroBaseline(f64),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("a paired test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("all paired differences are identical; the t statistic is undefined")]
    ZeroVariance,
}

/// `100·(vanilla − pp)/vanilla`; positive when `pp` improves.
pub fn relative_delta(wer_vanilla: f64, wer_pp: f64) -> Result<f64, StatsError> {
    if !(wer_vanilla > 0.0) {
        return Err(StatsError::ZeroBaseline(wer_vanilla));
    }
    Ok(100.0 * (wer_vanilla - wer_pp) / wer_vanilla)
}

/// Same formula as [`relative_delta`], for comparing two prompts.
pub fn relative_reduction(wer_a: f64, wer_b: f64) -> Result<f64, StatsError> {
    relative_delta(wer_a, wer_b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed.
    pub p: f64,
    pub n: usize,
}

/// Two-tailed Student t-test on the differences `a_i − b_i` with `n − 1`
/// degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(TTest {
        t,
        p: t_two_tailed_p(t, (n - 1) as f64),
        n,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom, through the
/// regularized incomplete beta function.
pub fn t_two_tailed_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); 0 for a single value.
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        n,
        min: v[0],
        median,
        max: v[n - 1],
        mean,
        std,
    })
}
