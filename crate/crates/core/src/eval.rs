//! Word error rate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Edit counts of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / N`.
    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_words as f64
    }

    /// Adds another report's counts (corpus-level WER).
    pub fn accumulate(&mut self, other: &WerReport) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_words += other.ref_words;
    }
}

/// Minimum-edit alignment with unit costs. Among equally short alignments
/// the backtrace prefers substitution, then insertion, then deletion.
pub fn wer<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> Result<WerReport> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = diag.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let mut r = WerReport { ref_words: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                if !same {
                    r.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            r.insertions += 1;
            j -= 1;
        } else {
            r.deletions += 1;
            i -= 1;
        }
    }
    Ok(r)
}

/// WER on whitespace-separated words.
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<WerReport> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}
