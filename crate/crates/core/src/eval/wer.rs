use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WerError {
    #[error("reference has no words")]
    EmptyReference,
}

/// Word edit count against a reference; the WER is `edits / ref_words`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerScore {
    pub edits: usize,
    pub ref_words: usize,
}

impl WerScore {
    pub fn percent(&self) -> f64 {
        100.0 * self.edits as f64 / self.ref_words as f64
    }

    /// Pools counts over utterances (corpus-level WER).
    pub fn merge(self, other: WerScore) -> WerScore {
        WerScore {
            edits: self.edits + other.edits,
            ref_words: self.ref_words + other.ref_words,
        }
    }
}

/// Lowercases and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Levenshtein distance with unit substitution, insertion and deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<WerScore, WerError> {
    let r = normalize(reference);
    if r.is_empty() {
        return Err(WerError::EmptyReference);
    }
    let h = normalize(hypothesis);
    Ok(WerScore {
        edits: edit_distance(&r, &h),
        ref_words: r.len(),
    })
}
