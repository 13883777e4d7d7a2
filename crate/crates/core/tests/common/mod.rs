#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::path::Path;

use famss::biasprobe::BiasMatrix;
use famss::formats::{
    self, AnswerRole, CorpusItem, CorpusKind, HiddenStateDump, JudgeLabel, LogitRecord, ScoredAnswer,
};
use famss::transfer::TransferTable;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn codes(c: &[&str]) -> Vec<String> {
    c.iter().map(|s| s.to_string()).collect()
}

pub fn random_dump(rng: &mut ChaCha8Rng, layers: usize, langs: usize, samples: usize, dim: usize) -> HiddenStateDump {
    let languages = (0..langs).map(|i| format!("l{i}")).collect();
    let data = (0..layers * langs * samples * dim)
        .map(|_| rng.gen_range(-3.0f32..3.0))
        .collect();
    HiddenStateDump::new("random", layers, languages, samples, dim, data).unwrap()
}

/// Brute-force bias oracle: nested `[lang][sample][dim]` vectors, column
/// statistics gathered dimension-first, then the plain double loop.
pub fn oracle_bias(dump: &HiddenStateDump, layer: usize) -> Vec<Vec<f64>> {
    let (n, m, dim) = (dump.languages.len(), dump.samples, dump.dim);
    let mut h: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|l| (0..m).map(|s| dump.vector(layer, l, s).iter().map(|&v| v as f64).collect()).collect())
        .collect();
    let count = (n * m) as f64;
    for d in 0..dim {
        let column: Vec<f64> = h.iter().flat_map(|lang| lang.iter().map(move |row| row[d])).collect();
        let mean = column.iter().sum::<f64>() / count;
        let var = column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count;
        let std = var.sqrt();
        for lang in h.iter_mut() {
            for row in lang.iter_mut() {
                row[d] = if std < 1e-12 { row[d] - mean } else { (row[d] - mean) / std };
            }
        }
    }
    let mut out = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for s in 0..m {
                for d in 0..dim {
                    let diff = h[j][s][d] - h[k][s][d];
                    acc += diff * diff;
                }
            }
            out[j][k] = acc / m as f64;
        }
    }
    out
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-12
}

/// Candidate languages in benchmark order, with English as pivot in front.
pub const BENCH_LANGS: [&str; 9] = ["en", "fr", "de", "es", "zh", "ja", "ru", "th", "ar"];

/// Semantic-layer bias matrix with three blocks of similar languages:
/// {fr, de, es}, {zh, ja, th}, {ru, ar}. Within-block biases are well below
/// the mean off-diagonal bias, cross-block biases well above it.
pub fn nine_lang_bias() -> BiasMatrix<f64> {
    let within = [
        ("fr", "de", 0.42),
        ("de", "es", 0.45),
        ("fr", "es", 0.38),
        ("zh", "ja", 0.55),
        ("zh", "th", 0.62),
        ("ja", "th", 0.58),
        ("ru", "ar", 0.66),
    ];
    let english = [
        ("en", "fr", 0.48),
        ("en", "de", 0.50),
        ("en", "es", 0.52),
        ("en", "ru", 0.70),
        ("en", "zh", 0.85),
        ("en", "ja", 0.90),
        ("en", "th", 1.05),
        ("en", "ar", 1.10),
    ];
    let mut pairs: Vec<(&str, &str, f64)> = within.iter().chain(&english).copied().collect();
    let blocks: [&[&str]; 3] = [&["fr", "de", "es"], &["zh", "ja", "th"], &["ru", "ar"]];
    for (bi, a_block) in blocks.iter().enumerate() {
        for b_block in &blocks[bi + 1..] {
            for a in a_block.iter() {
                for b in b_block.iter() {
                    pairs.push((a, b, 1.0));
                }
            }
        }
    }
    BiasMatrix::from_pairs(14, &BENCH_LANGS, &pairs).unwrap()
}

/// Transfer contributions whose per-block maxima are de, zh and ar.
pub fn nine_lang_tc() -> TransferTable<f64> {
    let scores = [
        ("fr", 0.8),
        ("de", 1.4),
        ("es", 0.9),
        ("zh", 1.2),
        ("ja", 0.7),
        ("th", 0.5),
        ("ru", 0.6),
        ("ar", 1.1),
    ];
    TransferTable {
        pivot: "en".into(),
        scores: scores.iter().map(|(l, v)| (l.to_string(), *v)).collect::<BTreeMap<_, _>>(),
    }
}

pub fn candidates() -> Vec<String> {
    codes(&BENCH_LANGS[1..])
}

pub const GROUPS: [&[&str]; 3] = [&["en", "fr", "de", "es"], &["zh", "ja", "th"], &["ru", "ar"]];

fn group_of(lang: &str) -> usize {
    GROUPS.iter().position(|g| g.contains(&lang)).unwrap()
}

/// Language-specific strength per layer; smallest at layer 3.
pub const LANG_SCALE: [f32; 6] = [1.5, 1.2, 0.9, 0.6, 0.8, 1.1];
pub const SYNTH_SAMPLES: usize = 12;
pub const SYNTH_DIM: usize = 24;

/// Parallel-corpus dump for the nine benchmark languages. Each embedding is a
/// shared sentence vector (dims 12..) plus a layer-scaled language vector: a
/// group centroid (dims 0..3) and a per-language unit offset (dims 3..12).
/// `pull` moves languages toward English by the given fraction.
pub fn synthetic_dump(seed: u64, pull: &[(&str, f32)]) -> HiddenStateDump {
    let mut rng = rng(seed);
    let langs = codes(&BENCH_LANGS);
    let mut dump = HiddenStateDump::zeros("synthetic", LANG_SCALE.len(), langs.clone(), SYNTH_SAMPLES, SYNTH_DIM).unwrap();
    let sentences: Vec<Vec<f32>> = (0..SYNTH_SAMPLES)
        .map(|_| (12..SYNTH_DIM).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
        .collect();
    let lang_vec = |code: &str| {
        let li = BENCH_LANGS.iter().position(|l| *l == code).unwrap();
        let mut v = vec![0.0f32; 12];
        v[group_of(code)] = 4.0 / std::f32::consts::SQRT_2;
        v[3 + li] = 1.0;
        v
    };
    let en = lang_vec("en");
    for (layer, &scale) in LANG_SCALE.iter().enumerate() {
        for (li, code) in langs.iter().enumerate() {
            let mut lv = lang_vec(code);
            if let Some((_, s)) = pull.iter().find(|(l, _)| l == code) {
                for (x, e) in lv.iter_mut().zip(&en) {
                    *x += s * (e - *x);
                }
            }
            for s in 0..SYNTH_SAMPLES {
                let row = dump.vector_mut(layer, li, s);
                for d in 0..12 {
                    row[d] = scale * lv[d] + rng.gen_range(-0.05f32..0.05);
                }
                for d in 12..SYNTH_DIM {
                    row[d] = sentences[s][d - 12] + rng.gen_range(-0.05f32..0.05);
                }
            }
        }
    }
    dump.validate().unwrap();
    dump
}

/// Per-language pull strengths; the strongest in each block is de, zh, ar.
pub const PULLS: [(&str, f32); 8] = [
    ("fr", 0.3),
    ("de", 0.5),
    ("es", 0.2),
    ("zh", 0.3),
    ("ja", 0.2),
    ("th", 0.1),
    ("ru", 0.15),
    ("ar", 0.3),
];

pub fn write_dump(dump: &HiddenStateDump, path: &Path) {
    let f = std::fs::File::create(path).unwrap();
    formats::write_hsd(dump, std::io::BufWriter::new(f)).unwrap();
}

/// Factuality counts per language from the collected-data statistics table.
pub const FACTUALITY_AVAILABLE: [(&str, usize); 8] = [
    ("de", 4517),
    ("fr", 4235),
    ("es", 5253),
    ("ru", 5223),
    ("zh", 5137),
    ("ja", 4236),
    ("th", 4239),
    ("ar", 5335),
];
pub const COMMON_AVAILABLE: usize = 997;

/// Corpus with the collected-data statistics: factuality items per language,
/// 997 common items per language and `pretraining` English items.
pub fn stats_corpus(pretraining: usize) -> Vec<CorpusItem> {
    let mut items = Vec::new();
    for (lang, n) in FACTUALITY_AVAILABLE {
        for i in 0..n {
            let mut it = CorpusItem::translation(
                CorpusKind::Factuality,
                lang,
                format!("fact {i}"),
                format!("fact {i} in {lang}"),
            );
            it.alignment_group = Some(format!("g{i}"));
            it.topic = Some("history".into());
            items.push(it);
        }
        for i in 0..COMMON_AVAILABLE {
            items.push(CorpusItem::translation(
                CorpusKind::Common,
                lang,
                format!("common {i}"),
                format!("common {i} in {lang}"),
            ));
        }
    }
    for i in 0..pretraining {
        items.push(CorpusItem::pretraining(format!("article {i}")));
    }
    items
}

pub fn random_record(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> LogitRecord {
    let n_true = rng.gen_range(0..4);
    let n_false = rng.gen_range(1..5);
    let mut answers = Vec::new();
    let best_at = rng.gen_range(0..=n_true);
    for i in 0..=n_true {
        answers.push(ScoredAnswer {
            text: format!("true answer {i}"),
            role: if i == best_at { AnswerRole::Best } else { AnswerRole::True },
            logprob: rng.gen_range(lo..hi),
        });
    }
    for i in 0..n_false {
        // occasional exact ties exercise the strict comparisons
        let logprob = if i == 0 && rng.gen_bool(0.1) {
            answers[best_at].logprob
        } else {
            rng.gen_range(lo..hi)
        };
        answers.push(ScoredAnswer {
            text: format!("false answer {i}"),
            role: AnswerRole::False,
            logprob,
        });
    }
    let pos = rng.gen_range(0..answers.len());
    let last = answers.len() - 1;
    answers.swap(pos, last);
    LogitRecord {
        question_id: format!("q{}", rng.gen_range(0..1000)),
        language: BENCH_LANGS[rng.gen_range(0..BENCH_LANGS.len())].to_string(),
        answers,
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<JudgeLabel> {
    (0..n)
        .map(|i| JudgeLabel {
            question_id: format!("q{i}"),
            language: BENCH_LANGS[rng.gen_range(0..BENCH_LANGS.len())].to_string(),
            truthful: rng.gen_bool(0.6),
            informative: rng.gen_bool(0.7),
        })
        .collect()
}

pub fn random_corpus_item(rng: &mut ChaCha8Rng) -> CorpusItem {
    let text = |rng: &mut ChaCha8Rng| {
        let words = ["Paris", "\"quoted\"", "字", "العربية", "line\nbreak", "tab\t", "ß", "1.5e3"];
        (0..rng.gen_range(1..6))
            .map(|_| words[rng.gen_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    match rng.gen_range(0..3) {
        0 => CorpusItem::pretraining(text(rng)),
        k => {
            let kind = if k == 1 { CorpusKind::Factuality } else { CorpusKind::Common };
            let lang = BENCH_LANGS[rng.gen_range(1..BENCH_LANGS.len())];
            let mut it = CorpusItem::translation(kind, lang, text(rng), text(rng));
            if rng.gen_bool(0.5) {
                it.topic = Some("science".into());
            }
            if kind == CorpusKind::Factuality {
                it.alignment_group = Some(format!("g{}", rng.gen_range(0..50)));
            }
            it
        }
    }
}
