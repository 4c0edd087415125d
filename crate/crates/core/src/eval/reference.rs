//! Published per-prompt WERs (%) of a full-scale system on five corpora,
//! with and without a prompt projector. The statistics code is re-checked
//! against these numbers; they are inputs, not something the toy model can
//! reproduce.

use super::stats::{paired_t_test, relative_delta, relative_reduction, StatsError, TTest};

/// Prompt names of the paired rows, in order.
pub const PAIRED_PROMPTS: [&str; 9] = ["base", "1", "2", "3", "4", "5", "6", "7", "8"];

#[derive(Clone, Copy, Debug)]
pub struct ReferenceColumn {
    pub dataset: &'static str,
    /// WER with speech embeddings only (no prompt text).
    pub empty: f64,
    pub vanilla: [f64; 9],
    pub pp: [f64; 9],
    /// Relative improvements as printed next to the WERs.
    pub printed_delta: [f64; 9],
    /// Printed p-value of the vanilla vs projector comparison.
    pub printed_p: f64,
    /// Printed base → prompt-1 relative reduction, where one was given.
    pub printed_reduction: Option<f64>,
}

pub const REFERENCE: [ReferenceColumn; 5] = [
    ReferenceColumn {
        dataset: "CC",
        empty: 12.75,
        vanilla: [13.00, 11.91, 12.27, 11.81, 12.68, 12.71, 12.44, 12.30, 12.00],
        pp: [11.23, 11.58, 11.31, 11.25, 12.43, 11.23, 11.73, 11.48, 11.44],
        printed_delta: [11.3, 2.8, 7.8, 4.7, 2.0, 11.6, 5.7, 6.7, 4.7],
        printed_p: 0.00135,
        printed_reduction: Some(8.3),
    },
    ReferenceColumn {
        dataset: "CH",
        empty: 27.00,
        vanilla: [29.26, 25.26, 27.08, 25.83, 27.95, 25.77, 26.17, 26.69, 25.56],
        pp: [26.52, 24.84, 24.73, 25.90, 25.94, 25.62, 25.57, 25.60, 24.93],
        printed_delta: [7.2, 1.7, 8.7, -0.3, 7.2, 0.6, 2.3, 4.1, 2.5],
        printed_p: 0.0221,
        printed_reduction: Some(13.6),
    },
    ReferenceColumn {
        dataset: "AMI",
        empty: 13.88,
        vanilla: [13.86, 13.72, 13.36, 13.50, 13.83, 13.54, 13.37, 13.49, 13.42],
        pp: [13.42, 12.96, 12.78, 13.26, 12.80, 13.18, 12.77, 12.91, 12.74],
        printed_delta: [3.4, 5.5, 4.3, 1.8, 7.4, 2.7, 4.5, 4.3, 5.1],
        printed_p: 1e-5,
        printed_reduction: None,
    },
    ReferenceColumn {
        dataset: "LS-C",
        empty: 2.84,
        vanilla: [3.09, 2.88, 2.89, 2.72, 2.75, 2.80, 2.80, 2.95, 2.91],
        pp: [2.34, 2.39, 2.31, 2.31, 2.28, 2.29, 2.36, 2.31, 2.61],
        printed_delta: [24.3, 17.0, 20.1, 15.1, 17.1, 18.2, 15.7, 21.7, 10.3],
        printed_p: 3e-6,
        printed_reduction: Some(6.7),
    },
    ReferenceColumn {
        dataset: "LS-O",
        empty: 5.40,
        vanilla: [5.85, 5.59, 5.71, 5.30, 5.38, 5.42, 5.47, 5.37, 5.54],
        pp: [4.98, 4.89, 4.84, 4.92, 4.79, 5.15, 5.04, 5.06, 5.14],
        printed_delta: [14.9, 12.5, 15.2, 7.2, 11.0, 5.0, 7.9, 5.8, 7.2],
        printed_p: 2.74e-4,
        printed_reduction: Some(4.4),
    },
];

/// One re-derived Δ% next to the printed one.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaCheck {
    pub dataset: &'static str,
    pub prompt: &'static str,
    pub computed: f64,
    pub printed: f64,
    /// Whether the computed value rounds to the printed one (1 d.p.).
    pub consistent: bool,
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl ReferenceColumn {
    pub fn delta_checks(&self) -> Result<Vec<DeltaCheck>, StatsError> {
        (0..9)
            .map(|i| {
                let computed = relative_delta(self.vanilla[i], self.pp[i])?;
                Ok(DeltaCheck {
                    dataset: self.dataset,
                    prompt: PAIRED_PROMPTS[i],
                    computed,
                    printed: self.printed_delta[i],
                    consistent: (round1(computed) - self.printed_delta[i]).abs() < 1e-9,
                })
            })
            .collect()
    }

    /// Relative reduction from the base prompt to prompt 1 (vanilla).
    pub fn base_to_first_reduction(&self) -> Result<f64, StatsError> {
        relative_reduction(self.vanilla[0], self.vanilla[1])
    }

    pub fn paired_test(&self) -> Result<TTest, StatsError> {
        paired_t_test(&self.vanilla, &self.pp)
    }
}
