//! Optimal language-set selection.
//!
//! Candidates start as singletons and are merged in passes: each pass takes a
//! snapshot of the current sets ordered by their earliest candidate, and every
//! set not yet merged in this pass joins its nearest unmerged set when the
//! single-linkage distance is within the threshold. Passes stop once at most
//! `max_sets` sets remain or a pass merges nothing. Each final set then
//! contributes the member with the largest transfer contribution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biasprobe::{BiasError, BiasMatrix};
use crate::transfer::{TransferTable, DEFAULT_PIVOT};
use crate::Scalar;

pub const DEFAULT_MAX_SETS: usize = 3;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid selection config: {0}")]
    Config(String),
    #[error("language {0:?} is not in the bias matrix")]
    UnknownLanguage(String),
    #[error("language sets overlap on {0:?}")]
    Overlap(String),
    #[error("invalid candidates: {0}")]
    Candidates(String),
    #[error("no transfer contribution for {0:?}")]
    MissingScore(String),
    #[error(transparent)]
    Bias(#[from] BiasError),
}

pub type Result<T, E = SelectionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SelectionConfig<T> {
    /// Upper bound on the number of sets the merge loop aims for.
    pub max_sets: usize,
    /// Largest single-linkage distance at which two sets may merge.
    pub threshold: T,
    /// Excluded from clustering and selection.
    pub pivot: String,
}

impl<T: Scalar> SelectionConfig<T> {
    pub fn new(max_sets: usize, threshold: T, pivot: impl Into<String>) -> Result<Self> {
        let cfg = Self {
            max_sets,
            threshold,
            pivot: pivot.into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Threshold set to the mean off-diagonal bias of `bias`.
    pub fn auto_threshold(bias: &BiasMatrix<T>, max_sets: usize, pivot: impl Into<String>) -> Result<Self> {
        Self::new(max_sets, mean_offdiag(bias)?, pivot)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_sets < 1 {
            return Err(SelectionError::Config("max_sets must be >= 1".into()));
        }
        if !self.threshold.is_finite() || self.threshold < T::zero() {
            return Err(SelectionError::Config(format!(
                "threshold must be finite and >= 0, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for SelectionConfig<f64> {
    fn default() -> Self {
        Self {
            max_sets: DEFAULT_MAX_SETS,
            threshold: 0.0,
            pivot: DEFAULT_PIVOT.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Clustering<T> {
    pub sets: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores: Option<Vec<String>>,
    pub m: usize,
    pub d: T,
}

/// Mean bias over all distinct language pairs; the default threshold.
pub fn mean_offdiag<T: Scalar>(bias: &BiasMatrix<T>) -> Result<T> {
    Ok(bias.mean_offdiag()?)
}

fn indices<T: Scalar>(set: &[String], bias: &BiasMatrix<T>) -> Result<Vec<usize>> {
    set.iter()
        .map(|l| {
            bias.index_of(l)
                .ok_or_else(|| SelectionError::UnknownLanguage(l.clone()))
        })
        .collect()
}

fn linkage<T: Scalar>(a: &[usize], b: &[usize], bias: &BiasMatrix<T>) -> T {
    let mut best = T::infinity();
    for &i in a {
        for &j in b {
            best = best.min(bias.values[i][j]);
        }
    }
    best
}

/// Single-linkage distance: the smallest bias over `s x t`.
pub fn set_distance<T: Scalar>(s: &[String], t: &[String], bias: &BiasMatrix<T>) -> Result<T> {
    if s.is_empty() || t.is_empty() {
        return Err(SelectionError::Candidates("empty language set".into()));
    }
    if let Some(shared) = s.iter().find(|l| t.contains(l)) {
        return Err(SelectionError::Overlap(shared.clone()));
    }
    Ok(linkage(&indices(s, bias)?, &indices(t, bias)?, bias))
}

/// The set in `collection` (other than `s`) closest to `s`, if that distance
/// is at most `threshold`. Ties go to the set listed first, so callers should
/// order `collection` by candidate ordering.
pub fn nearest_set<'a, T: Scalar>(
    s: &[String],
    collection: &'a [Vec<String>],
    bias: &BiasMatrix<T>,
    threshold: T,
) -> Result<Option<&'a Vec<String>>> {
    let mut best: Option<(&Vec<String>, T)> = None;
    for t in collection {
        if t.as_slice() == s {
            continue;
        }
        let d = set_distance(s, t, bias)?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((t, d));
        }
    }
    Ok(best.filter(|&(_, d)| d <= threshold).map(|(t, _)| t))
}

struct Engine<'a, T> {
    bias: &'a BiasMatrix<T>,
    /// Bias-matrix index of each candidate.
    to_bias: Vec<usize>,
}

impl<T: Scalar> Engine<'_, T> {
    fn distance(&self, a: &[usize], b: &[usize]) -> T {
        let mut best = T::infinity();
        for &i in a {
            for &j in b {
                best = best.min(self.bias.values[self.to_bias[i]][self.to_bias[j]]);
            }
        }
        best
    }

    /// One merge pass. Returns the new sets and the number of merges.
    fn pass(&self, sets: &[Vec<usize>], threshold: T) -> (Vec<Vec<usize>>, usize) {
        let mut consumed = vec![false; sets.len()];
        let mut next = Vec::with_capacity(sets.len());
        let mut merges = 0;
        for i in 0..sets.len() {
            if consumed[i] {
                continue;
            }
            let mut best: Option<(usize, T)> = None;
            for j in 0..sets.len() {
                if j == i || consumed[j] {
                    continue;
                }
                let d = self.distance(&sets[i], &sets[j]);
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((j, d));
                }
            }
            if let Some((j, d)) = best {
                if d <= threshold {
                    consumed[i] = true;
                    consumed[j] = true;
                    let mut merged = [sets[i].as_slice(), sets[j].as_slice()].concat();
                    merged.sort_unstable();
                    next.push(merged);
                    merges += 1;
                }
            }
        }
        for (i, s) in sets.iter().enumerate() {
            if !consumed[i] {
                next.push(s.clone());
            }
        }
        next.sort_by_key(|s| s[0]);
        (next, merges)
    }
}

fn check_candidates<T: Scalar>(
    languages: &[String],
    bias: &BiasMatrix<T>,
    config: &SelectionConfig<T>,
) -> Result<Vec<usize>> {
    config.validate()?;
    if languages.is_empty() {
        return Err(SelectionError::Candidates("no candidate languages".into()));
    }
    for (i, l) in languages.iter().enumerate() {
        if *l == config.pivot {
            return Err(SelectionError::Candidates(format!(
                "pivot {l:?} cannot be a candidate"
            )));
        }
        if languages[..i].contains(l) {
            return Err(SelectionError::Candidates(format!("duplicate candidate {l:?}")));
        }
    }
    indices(languages, bias)
}

/// The sets before the first pass and after every pass that merged
/// something. The last entry is the final clustering.
pub fn merge_passes<T: Scalar>(
    languages: &[String],
    bias: &BiasMatrix<T>,
    config: &SelectionConfig<T>,
) -> Result<Vec<Vec<Vec<String>>>> {
    let to_bias = check_candidates(languages, bias, config)?;
    let engine = Engine { bias, to_bias };
    let named = |sets: &[Vec<usize>]| -> Vec<Vec<String>> {
        sets.iter()
            .map(|s| s.iter().map(|&i| languages[i].clone()).collect())
            .collect()
    };
    let mut sets: Vec<Vec<usize>> = (0..languages.len()).map(|i| vec![i]).collect();
    let mut history = vec![named(&sets)];
    while sets.len() > config.max_sets {
        let (next, merges) = engine.pass(&sets, config.threshold);
        if merges == 0 {
            break;
        }
        sets = next;
        history.push(named(&sets));
    }
    Ok(history)
}

/// Groups `languages` (in caller order, pivot excluded) into sets.
pub fn cluster<T: Scalar>(
    languages: &[String],
    bias: &BiasMatrix<T>,
    config: &SelectionConfig<T>,
) -> Result<Clustering<T>> {
    let sets = merge_passes(languages, bias, config)?
        .pop()
        .expect("history starts with the singletons");
    Ok(Clustering {
        sets,
        cores: None,
        m: config.max_sets,
        d: config.threshold,
    })
}

/// Clusters, then picks the member with the largest transfer contribution
/// from each set (ties go to the earlier candidate).
pub fn select_optimal<T: Scalar>(
    languages: &[String],
    bias: &BiasMatrix<T>,
    tc: &TransferTable<T>,
    config: &SelectionConfig<T>,
) -> Result<Clustering<T>> {
    let scores = languages
        .iter()
        .map(|l| tc.score(l).ok_or_else(|| SelectionError::MissingScore(l.clone())))
        .collect::<Result<Vec<T>>>()?;
    let mut clustering = cluster(languages, bias, config)?;
    let score_of = |l: &String| scores[languages.iter().position(|c| c == l).expect("member is a candidate")];
    let cores = clustering
        .sets
        .iter()
        .map(|set| {
            let mut best = &set[0];
            for l in &set[1..] {
                if score_of(l) > score_of(best) {
                    best = l;
                }
            }
            best.clone()
        })
        .collect();
    clustering.cores = Some(cores);
    Ok(clustering)
}
