//! Transfer contributions: how far fine-tuning on one language pulls the
//! other languages toward the pivot at the semantic layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biasprobe::BiasMatrix;
use crate::Scalar;

pub const DEFAULT_PIVOT: &str = "en";

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("language sets differ: base {base:?}, tuned {tuned:?}")]
    LanguageMismatch {
        base: Vec<String>,
        tuned: Vec<String>,
    },
    #[error("pivot language {0:?} is not in the bias matrix")]
    MissingPivot(String),
    #[error("pivot language {0:?} cannot have its own transfer score")]
    PivotScored(String),
    #[error("tuned matrix for {language:?}: {source}")]
    Language {
        language: String,
        #[source]
        source: Box<TransferError>,
    },
}

pub type Result<T, E = TransferError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TransferTable<T> {
    pub pivot: String,
    pub scores: BTreeMap<String, T>,
}

impl<T: Scalar> TransferTable<T> {
    pub fn score(&self, language: &str) -> Option<T> {
        self.scores.get(language).copied()
    }
}

fn same_language_set(a: &[String], b: &[String]) -> bool {
    a.len() == b.len() && a.iter().all(|l| b.contains(l))
}

/// Sum over every non-pivot language of `base[pivot][l] - tuned[pivot][l]`.
///
/// Positive values mean the tuned model sits closer to the pivot overall.
/// Only the pivot row of each matrix is read; languages are matched by code,
/// so the two matrices may order them differently.
pub fn transfer_contribution<T: Scalar>(
    base: &BiasMatrix<T>,
    tuned: &BiasMatrix<T>,
    pivot: &str,
) -> Result<T> {
    if !same_language_set(&base.languages, &tuned.languages) {
        return Err(TransferError::LanguageMismatch {
            base: base.languages.clone(),
            tuned: tuned.languages.clone(),
        });
    }
    let bp = base
        .index_of(pivot)
        .ok_or_else(|| TransferError::MissingPivot(pivot.to_string()))?;
    let tp = tuned.index_of(pivot).expect("same language set");
    let mut total = T::zero();
    for (bi, lang) in base.languages.iter().enumerate() {
        if bi == bp {
            continue;
        }
        let ti = tuned.index_of(lang).expect("same language set");
        total = total + (base.values[bp][bi] - tuned.values[tp][ti]);
    }
    Ok(total)
}

pub fn transfer_table<T: Scalar>(
    base: &BiasMatrix<T>,
    tuned_by_lang: &BTreeMap<String, BiasMatrix<T>>,
    pivot: &str,
) -> Result<TransferTable<T>> {
    let mut scores = BTreeMap::new();
    for (lang, tuned) in tuned_by_lang {
        if lang == pivot {
            return Err(TransferError::PivotScored(lang.clone()));
        }
        let tc = transfer_contribution(base, tuned, pivot).map_err(|e| TransferError::Language {
            language: lang.clone(),
            source: Box::new(e),
        })?;
        scores.insert(lang.clone(), tc);
    }
    Ok(TransferTable {
        pivot: pivot.to_string(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn en_de_zh(de: f64, zh: f64, de_zh: f64) -> BiasMatrix<f64> {
        BiasMatrix::from_pairs(
            14,
            &["en", "de", "zh"],
            &[("en", "de", de), ("en", "zh", zh), ("de", "zh", de_zh)],
        )
        .unwrap()
    }

    #[test]
    fn no_movement_is_zero() {
        let base = en_de_zh(1.0, 2.0, 1.5);
        assert_eq!(transfer_contribution(&base, &base, "en").unwrap(), 0.0);
    }

    #[test]
    fn hand_traced_movement() {
        let base = en_de_zh(1.0, 2.0, 1.5);
        let tuned = en_de_zh(0.5, 1.8, 9.0);
        let tc = transfer_contribution(&base, &tuned, "en").unwrap();
        assert!((tc - 0.7).abs() < 1e-12, "{tc}");
    }

    #[test]
    fn uniform_widening_over_eight_languages() {
        let langs = ["en", "fr", "de", "es", "zh", "ja", "ru", "th", "ar"];
        let mut base_pairs = Vec::new();
        let mut tuned_pairs = Vec::new();
        for (i, l) in langs.iter().enumerate().skip(1) {
            let v = 0.5 + i as f64 * 0.125;
            base_pairs.push(("en", *l, v));
            tuned_pairs.push(("en", *l, v + 0.1));
            for other in &langs[i + 1..] {
                base_pairs.push((*l, *other, 1.0));
                tuned_pairs.push((*l, *other, 1.0));
            }
        }
        let base = BiasMatrix::from_pairs(0, &langs, &base_pairs).unwrap();
        let tuned = BiasMatrix::from_pairs(0, &langs, &tuned_pairs).unwrap();
        let tc = transfer_contribution(&base, &tuned, "en").unwrap();
        assert!((tc + 0.8).abs() < 1e-12, "{tc}");
    }

    #[test]
    fn reordered_languages_match_by_code() {
        let base = en_de_zh(1.0, 2.0, 1.5);
        let tuned = BiasMatrix::from_pairs(
            14,
            &["zh", "en", "de"],
            &[("en", "de", 0.5), ("en", "zh", 1.8), ("de", "zh", 1.5)],
        )
        .unwrap();
        let tc = transfer_contribution(&base, &tuned, "en").unwrap();
        assert!((tc - 0.7).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let base = en_de_zh(1.0, 2.0, 1.5);
        let other = BiasMatrix::from_pairs(0, &["en", "de"], &[("en", "de", 1.0)]).unwrap();
        assert!(matches!(
            transfer_contribution(&base, &other, "en"),
            Err(TransferError::LanguageMismatch { .. })
        ));
        assert!(matches!(
            transfer_contribution(&base, &base, "fr"),
            Err(TransferError::MissingPivot(_))
        ));

        let mut map = BTreeMap::new();
        map.insert("de".to_string(), base.clone());
        map.insert("zh".to_string(), other);
        match transfer_table(&base, &map, "en") {
            Err(TransferError::Language { language, .. }) => assert_eq!(language, "zh"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn table_over_languages() {
        let base = en_de_zh(1.0, 2.0, 1.5);
        let mut map = BTreeMap::new();
        map.insert("de".to_string(), en_de_zh(0.5, 2.25, 1.5));
        map.insert("zh".to_string(), en_de_zh(1.25, 1.0, 1.5));
        let t = transfer_table(&base, &map, "en").unwrap();
        assert_eq!(t.score("de"), Some(0.25));
        assert_eq!(t.score("zh"), Some(0.75));
        assert!(!t.scores.contains_key("en"));

        let mut only = BTreeMap::new();
        only.insert("de".to_string(), base.clone());
        assert_eq!(transfer_table(&base, &only, "en").unwrap().score("de"), Some(0.0));

        let mut pivot = BTreeMap::new();
        pivot.insert("en".to_string(), base.clone());
        assert!(matches!(
            transfer_table(&base, &pivot, "en"),
            Err(TransferError::PivotScored(_))
        ));
    }

    #[test]
    fn table_json_shape() {
        let t = TransferTable {
            pivot: "en".to_string(),
            scores: BTreeMap::from([("de".to_string(), 0.5f64)]),
        };
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"pivot":"en","scores":{"de":0.5}}"#
        );
    }
}
