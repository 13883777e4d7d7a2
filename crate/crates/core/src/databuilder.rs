//! Fact-aware translation-instruction mixture.
//!
//! Translation items are English-centric (English source, non-English
//! target). English pretraining text is mixed in so that it forms a fixed
//! share `r` of the final dataset: with `n_t` translation items the plan asks
//! for `round(r / (1 - r) * n_t)` pretraining items.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{CorpusItem, CorpusKind, SOURCE_LANGUAGE};

pub const DEFAULT_PRETRAIN_RATIO: f64 = 0.10;
pub const DEFAULT_TEMPLATE: &str = "Translate the following text from {src} to {tgt}.\n{source_text}";
pub const MIN_ALIGNED_LANGUAGES: usize = 4;

const SLOTS: [&str; 3] = ["src", "tgt", "source_text"];

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("line {line}: factuality item has no alignment_group")]
    MissingAlignmentGroup { line: usize },
    #[error("no translation items available for {0:?}")]
    Unavailable(String),
    #[error("pretraining ratio must lie in [0, 1), got {0}")]
    Ratio(f64),
    #[error("template error: {0}")]
    Template(String),
    #[error("plan needs {needed} {kind} items for {language}, corpus has {available}")]
    Shortfall {
        kind: CorpusKind,
        language: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid corpus item: {0}")]
    Item(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BuildError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedGroup {
    pub alignment_group: String,
    /// Distinct languages the group covers, English included.
    pub languages: Vec<String>,
}

/// Groups that fail 4-way alignment. Empty means every group passes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub groups_checked: usize,
    pub flagged: Vec<FlaggedGroup>,
}

impl AlignmentReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Checks that every factuality alignment group spans at least four
/// languages counting English. Non-factuality items are ignored.
pub fn validate_alignment(items: &[CorpusItem]) -> Result<AlignmentReport> {
    let mut groups: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if item.kind != CorpusKind::Factuality {
            continue;
        }
        let group = item
            .alignment_group
            .as_deref()
            .ok_or(BuildError::MissingAlignmentGroup { line: i + 1 })?;
        let langs = groups
            .entry(group)
            .or_insert_with(|| BTreeSet::from([SOURCE_LANGUAGE]));
        if let Some(t) = item.target_lang.as_deref() {
            langs.insert(t);
        }
    }
    let flagged = groups
        .iter()
        .filter(|(_, langs)| langs.len() < MIN_ALIGNED_LANGUAGES)
        .map(|(g, langs)| FlaggedGroup {
            alignment_group: g.to_string(),
            languages: langs.iter().map(|l| l.to_string()).collect(),
        })
        .collect();
    Ok(AlignmentReport {
        groups_checked: groups.len(),
        flagged,
    })
}

/// Item counts per kind and target language.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub factuality: BTreeMap<String, usize>,
    pub common: BTreeMap<String, usize>,
    pub pretraining: usize,
}

impl CorpusSummary {
    pub fn from_items(items: &[CorpusItem]) -> Self {
        let mut s = Self::default();
        for item in items {
            let lang = item.target_lang.clone().unwrap_or_default();
            match item.kind {
                CorpusKind::Factuality => *s.factuality.entry(lang).or_default() += 1,
                CorpusKind::Common => *s.common.entry(lang).or_default() += 1,
                CorpusKind::Pretraining => s.pretraining += 1,
            }
        }
        s
    }

    pub fn available(&self, kind: CorpusKind, language: Option<&str>) -> usize {
        match (kind, language) {
            (CorpusKind::Pretraining, _) => self.pretraining,
            (CorpusKind::Factuality, Some(l)) => self.factuality.get(l).copied().unwrap_or(0),
            (CorpusKind::Common, Some(l)) => self.common.get(l).copied().unwrap_or(0),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub kind: CorpusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_lang: Option<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub entries: Vec<PlanEntry>,
    pub pretrain_ratio: f64,
    pub seed: u64,
}

impl AllocationPlan {
    pub fn translation_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_translation())
            .map(|e| e.count)
            .sum()
    }

    pub fn pretraining_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == CorpusKind::Pretraining)
            .map(|e| e.count)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn pretraining_share(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.pretraining_count() as f64 / n as f64,
        }
    }

    /// Replaces the derived pretraining count with an explicit one.
    pub fn with_pretraining_count(mut self, count: usize) -> Self {
        self.entries.retain(|e| e.kind != CorpusKind::Pretraining);
        self.entries.push(PlanEntry {
            kind: CorpusKind::Pretraining,
            target_lang: None,
            count,
        });
        self
    }
}

/// Pretraining items needed for a mixture share of `ratio` alongside
/// `translation` translation items.
pub fn pretraining_count(translation: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(BuildError::Ratio(ratio));
    }
    Ok((ratio / (1.0 - ratio) * translation as f64).round() as usize)
}

/// Takes every available factuality and common item for `languages` and adds
/// the pretraining items implied by `pretrain_ratio`.
pub fn build_allocation(
    available: &CorpusSummary,
    languages: &[String],
    pretrain_ratio: f64,
    seed: u64,
) -> Result<AllocationPlan> {
    let mut entries = Vec::new();
    for lang in languages {
        let fact = available.available(CorpusKind::Factuality, Some(lang));
        let common = available.available(CorpusKind::Common, Some(lang));
        if fact + common == 0 {
            return Err(BuildError::Unavailable(lang.clone()));
        }
        for (kind, count) in [(CorpusKind::Factuality, fact), (CorpusKind::Common, common)] {
            if count > 0 {
                entries.push(PlanEntry {
                    kind,
                    target_lang: Some(lang.clone()),
                    count,
                });
            }
        }
    }
    let translation: usize = entries.iter().map(|e| e.count).sum();
    let plan = AllocationPlan {
        entries,
        pretrain_ratio,
        seed,
    };
    Ok(plan.with_pretraining_count(pretraining_count(translation, pretrain_ratio)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// English name of a language code; unknown codes are returned unchanged.
pub fn exonym(code: &str) -> &str {
    match code {
        "en" => "English",
        "de" => "German",
        "fr" => "French",
        "es" => "Spanish",
        "zh" => "Chinese",
        "ja" => "Japanese",
        "ru" => "Russian",
        "th" => "Thai",
        "ar" => "Arabic",
        "it" => "Italian",
        "pt" => "Portuguese",
        "ko" => "Korean",
        "vi" => "Vietnamese",
        "hi" => "Hindi",
        "tr" => "Turkish",
        "nl" => "Dutch",
        "pl" => "Polish",
        "id" => "Indonesian",
        "sw" => "Swahili",
        "bn" => "Bengali",
        other => other,
    }
}

/// Checks that a template carries `{src}`, `{tgt}` and `{source_text}`.
pub fn check_template(template: &str) -> Result<()> {
    for slot in SLOTS {
        if !template.contains(&format!("{{{slot}}}")) {
            return Err(BuildError::Template(format!("missing slot {{{slot}}}")));
        }
    }
    Ok(())
}

/// Single left-to-right substitution, so slot-like text inside the values is
/// never expanded.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        rest = &rest[open..];
        for (name, value) in values {
            if let Some(after) = rest[1..].strip_prefix(name).and_then(|r| r.strip_prefix('}')) {
                out.push_str(value);
                rest = after;
                continue 'scan;
            }
        }
        out.push('{');
        rest = &rest[1..];
    }
    out.push_str(rest);
    out
}

pub fn render_instruction(item: &CorpusItem, template: &str) -> Result<InstructionExample> {
    check_template(template)?;
    item.validate().map_err(BuildError::Item)?;
    if item.kind == CorpusKind::Pretraining {
        return Ok(InstructionExample {
            instruction: String::new(),
            input: String::new(),
            output: item.source_text.clone(),
        });
    }
    let target = item.target_lang.as_deref().expect("validated translation item");
    let instruction = fill(
        template,
        &[
            ("src", exonym(&item.source_lang)),
            ("tgt", exonym(target)),
            ("source_text", &item.source_text),
        ],
    );
    Ok(InstructionExample {
        instruction,
        input: item.source_text.clone(),
        output: item.target_text.clone().expect("validated translation item"),
    })
}

/// Picks the first `count` matching corpus items (in corpus order) for every
/// plan entry.
pub fn select_items<'a>(plan: &AllocationPlan, corpus: &'a [CorpusItem]) -> Result<Vec<&'a CorpusItem>> {
    let mut chosen = Vec::with_capacity(plan.total());
    for entry in &plan.entries {
        let matching = corpus.iter().filter(|c| {
            c.kind == entry.kind
                && (entry.kind == CorpusKind::Pretraining || c.target_lang == entry.target_lang)
        });
        let before = chosen.len();
        chosen.extend(matching.take(entry.count));
        let got = chosen.len() - before;
        if got < entry.count {
            return Err(BuildError::Shortfall {
                kind: entry.kind,
                language: entry
                    .target_lang
                    .clone()
                    .unwrap_or_else(|| SOURCE_LANGUAGE.to_string()),
                needed: entry.count,
                available: got,
            });
        }
    }
    Ok(chosen)
}

/// Renders the planned items, shuffles them with a seeded Fisher-Yates pass
/// and writes them as JSONL. Returns the number of lines written.
pub fn emit_dataset<W: Write>(
    plan: &AllocationPlan,
    corpus: &[CorpusItem],
    template: &str,
    mut destination: W,
) -> Result<usize> {
    check_template(template)?;
    let items = select_items(plan, corpus)?;
    let mut examples = items
        .into_iter()
        .map(|item| render_instruction(item, template))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    examples.shuffle(&mut rng);
    for ex in &examples {
        serde_json::to_writer(&mut destination, ex)?;
        destination.write_all(b"\n")?;
    }
    destination.flush()?;
    Ok(examples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact(lang: &str, group: &str) -> CorpusItem {
        let mut item = CorpusItem::translation(CorpusKind::Factuality, lang, "src", "tgt");
        item.alignment_group = Some(group.to_string());
        item
    }

    #[test]
    fn alignment_four_way() {
        let pass = [fact("de", "g1"), fact("zh", "g1"), fact("ar", "g1")];
        assert!(validate_alignment(&pass).unwrap().passed());

        let short = [fact("de", "g2"), fact("zh", "g2"), fact("zh", "g2")];
        let report = validate_alignment(&short).unwrap();
        assert_eq!(report.flagged.len(), 1);
        assert_eq!(report.flagged[0].languages, ["de", "en", "zh"]);

        assert_eq!(validate_alignment(&[]).unwrap(), AlignmentReport::default());
        let mut missing = fact("de", "g");
        missing.alignment_group = None;
        assert!(matches!(
            validate_alignment(&[CorpusItem::pretraining("x"), missing]),
            Err(BuildError::MissingAlignmentGroup { line: 2 })
        ));
    }

    #[test]
    fn pretraining_share_algebra() {
        assert_eq!(pretraining_count(900, 0.10).unwrap(), 100);
        assert_eq!(pretraining_count(900, 0.0).unwrap(), 0);
        assert_eq!(pretraining_count(17980, 0.10).unwrap(), 1998);
        assert!(pretraining_count(10, 1.0).is_err());
        assert!(pretraining_count(10, -0.1).is_err());
    }

    #[test]
    fn allocation_takes_all_translation_items() {
        let summary = CorpusSummary {
            factuality: BTreeMap::from([("de".into(), 500), ("zh".into(), 300)]),
            common: BTreeMap::from([("de".into(), 100)]),
            pretraining: 1000,
        };
        let plan = build_allocation(&summary, &["de".into(), "zh".into()], 0.10, 7).unwrap();
        assert_eq!(plan.translation_count(), 900);
        assert_eq!(plan.pretraining_count(), 100);
        assert_eq!(plan.seed, 7);
        let zero = build_allocation(&summary, &["de".into()], 0.0, 7).unwrap();
        assert_eq!(zero.pretraining_count(), 0);
        assert!(matches!(
            build_allocation(&summary, &["ar".into()], 0.1, 0),
            Err(BuildError::Unavailable(l)) if l == "ar"
        ));
    }

    #[test]
    fn render_default_template() {
        let item = CorpusItem::translation(CorpusKind::Common, "de", "Good morning.", "Guten Morgen.");
        let ex = render_instruction(&item, DEFAULT_TEMPLATE).unwrap();
        assert_eq!(
            ex.instruction,
            "Translate the following text from English to German.\nGood morning."
        );
        assert_eq!(ex.input, "Good morning.");
        assert_eq!(ex.output, "Guten Morgen.");
    }

    #[test]
    fn render_does_not_expand_slots_inside_values() {
        let item = CorpusItem::translation(CorpusKind::Common, "zh", "a {tgt} b {", "c");
        let ex = render_instruction(&item, "{src}->{tgt}: {source_text} {other}").unwrap();
        assert_eq!(ex.instruction, "English->Chinese: a {tgt} b { {other}");
    }

    #[test]
    fn render_pretraining_passthrough() {
        let ex = render_instruction(&CorpusItem::pretraining("Plain text."), DEFAULT_TEMPLATE).unwrap();
        assert_eq!(ex.instruction, "");
        assert_eq!(ex.input, "");
        assert_eq!(ex.output, "Plain text.");
    }

    #[test]
    fn template_missing_slot() {
        let item = CorpusItem::translation(CorpusKind::Common, "de", "a", "b");
        assert!(matches!(
            render_instruction(&item, "Translate from {src}: {source_text}"),
            Err(BuildError::Template(_))
        ));
    }

    #[test]
    fn emit_small_plan_and_shortfall() {
        let corpus = vec![
            CorpusItem::translation(CorpusKind::Common, "de", "one", "eins"),
            CorpusItem::translation(CorpusKind::Common, "de", "two", "zwei"),
            CorpusItem::pretraining("text"),
        ];
        let plan = build_allocation(&CorpusSummary::from_items(&corpus), &["de".into()], 0.0, 1)
            .unwrap()
            .with_pretraining_count(1);
        let mut out = Vec::new();
        assert_eq!(emit_dataset(&plan, &corpus, DEFAULT_TEMPLATE, &mut out).unwrap(), 3);
        assert_eq!(out.iter().filter(|&&b| b == b'\n').count(), 3);

        let mut again = Vec::new();
        emit_dataset(&plan, &corpus, DEFAULT_TEMPLATE, &mut again).unwrap();
        assert_eq!(out, again);

        let greedy = plan.clone().with_pretraining_count(2);
        assert!(matches!(
            emit_dataset(&greedy, &corpus, DEFAULT_TEMPLATE, Vec::new()),
            Err(BuildError::Shortfall { kind: CorpusKind::Pretraining, needed: 2, available: 1, .. })
        ));
    }

    #[test]
    fn exonyms() {
        assert_eq!(exonym("ar"), "Arabic");
        assert_eq!(exonym("xx"), "xx");
    }
}
