//! The `famss` command-line pipeline.
//!
//! Every subcommand reads an optional config file (`--config`, JSON or TOML
//! by extension) and lets individual flags override its values. Relative
//! paths inside a config file are resolved against the file's directory.
//! Results go to the output directory as JSON (plus text tables or CSV where
//! useful).
//!
//! Exit codes: 0 success, 1 domain error, 2 usage or input error. Failures
//! print a one-line JSON object on stderr.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biasprobe::{self, BiasCurve, BiasError, BiasMatrix};
use crate::databuilder::{self, BuildError, CorpusSummary, DEFAULT_PRETRAIN_RATIO, DEFAULT_TEMPLATE};
use crate::formats::{self, FormatError, HiddenStateDump};
use crate::metrics::{self, GenMode, McMode, MetricsError};
use crate::selection::{self, Clustering, SelectionConfig, SelectionError, DEFAULT_MAX_SETS};
use crate::transfer::{self, TransferError, TransferTable, DEFAULT_PIVOT};

pub const THREADS_ENV: &str = "FAMSS_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("input not found: {}", .0.display())]
    InputNotFound(PathBuf),
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            _ => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::InputNotFound(_) => "input_not_found",
            CliError::Input { .. } => "input",
            CliError::Domain(_) => "domain",
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

impl From<BiasError> for CliError {
    fn from(e: BiasError) -> Self {
        domain(e)
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        domain(e)
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Config(m) => CliError::Usage(format!("invalid selection config: {m}")),
            e => domain(e),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        domain(e)
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        domain(e)
    }
}

/// Distance threshold: a fixed value or the mean off-diagonal bias.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    #[default]
    Auto,
    Value(f64),
}

impl FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Threshold::Auto);
        }
        s.parse::<f64>()
            .map(Threshold::Value)
            .map_err(|_| format!("threshold must be a number or \"auto\", got {s:?}"))
    }
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Auto => s.serialize_str("auto"),
            Threshold::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Threshold::Value(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Pipeline configuration file. Every field is optional; flags override.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub hsd: Option<PathBuf>,
    #[serde(default)]
    pub tuned_hsd: BTreeMap<String, PathBuf>,
    pub bias: Option<PathBuf>,
    #[serde(default)]
    pub tuned_bias: BTreeMap<String, PathBuf>,
    pub curve: Option<PathBuf>,
    pub transfer: Option<PathBuf>,
    pub logits: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub clustering: Option<PathBuf>,
    pub template_file: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub pivot: Option<String>,
    pub layer: Option<usize>,
    pub candidates: Option<Vec<String>>,
    pub languages: Option<Vec<String>>,
    pub m: Option<usize>,
    pub d: Option<Threshold>,
    pub mc_mode: Option<McMode>,
    pub gen_mode: Option<GenMode>,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub pretraining_count: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str::<Self>(&text).map_err(|e| e.to_string()),
            _ => serde_json::from_str::<Self>(&text).map_err(|e| e.to_string()),
        };
        let mut cfg = parsed.map_err(|message| CliError::Usage(format!(
            "invalid config {}: {message}",
            path.display()
        )))?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for p in [
            &mut self.hsd,
            &mut self.bias,
            &mut self.curve,
            &mut self.transfer,
            &mut self.logits,
            &mut self.labels,
            &mut self.corpus,
            &mut self.clustering,
            &mut self.template_file,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.tuned_hsd.values_mut().for_each(fix);
        self.tuned_bias.values_mut().for_each(fix);
    }
}

#[derive(Debug, Parser)]
#[command(name = "famss", version, about = "Language-bias probing, language selection, truthfulness metrics and training-data building")]
pub struct Cli {
    /// Pipeline config file (.json or .toml).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: ./famss_out).
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DumpArgs {
    /// Hidden-state dump (FMHS).
    #[arg(long)]
    pub hsd: Option<PathBuf>,
    /// Layer index; defaults to the semantic layer of the dump.
    #[arg(long)]
    pub layer: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bias matrices for every layer plus the mean-bias curve.
    Probe(DumpArgs),
    /// Layer with the lowest mean bias.
    SemanticLayer {
        #[arg(long)]
        curve: Option<PathBuf>,
        #[command(flatten)]
        dump: DumpArgs,
    },
    /// Transfer contributions from base and per-language tuned dumps or matrices.
    Tc {
        #[command(flatten)]
        dump: DumpArgs,
        /// Base bias matrix JSON at the semantic layer (instead of --hsd).
        #[arg(long)]
        bias: Option<PathBuf>,
        /// LANG=PATH tuned dump, repeatable.
        #[arg(long = "tuned", value_parser = parse_assignment)]
        tuned: Vec<(String, PathBuf)>,
        /// LANG=PATH tuned bias matrix JSON, repeatable.
        #[arg(long = "tuned-bias", value_parser = parse_assignment)]
        tuned_bias: Vec<(String, PathBuf)>,
        #[arg(long)]
        pivot: Option<String>,
    },
    /// Language clustering and core-language selection.
    Select {
        #[command(flatten)]
        dump: DumpArgs,
        #[arg(long)]
        bias: Option<PathBuf>,
        #[arg(long)]
        transfer: Option<PathBuf>,
        #[arg(short = 'm', long = "max-sets")]
        m: Option<usize>,
        /// Distance threshold, or "auto" for the mean off-diagonal bias.
        #[arg(short = 'd', long = "threshold")]
        d: Option<Threshold>,
        #[arg(long)]
        pivot: Option<String>,
        /// Comma-separated candidate languages (default: all but the pivot).
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<String>>,
    },
    /// MC1/MC2/MC3 from logit records.
    EvalMc {
        #[arg(long)]
        logits: Option<PathBuf>,
        #[arg(long, value_parser = parse_mc_mode)]
        mode: Option<McMode>,
    },
    /// True/Info/True*Info from judge labels.
    EvalGen {
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_parser = parse_gen_mode)]
        mode: Option<GenMode>,
    },
    /// Translation-instruction training JSONL for the selected languages.
    BuildData {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Clustering JSON whose cores select the languages.
        #[arg(long)]
        clustering: Option<PathBuf>,
        /// Comma-separated target languages (overrides the clustering).
        #[arg(long, value_delimiter = ',')]
        languages: Option<Vec<String>>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "template-file")]
        template_file: Option<PathBuf>,
        /// Fixed number of pretraining items instead of the ratio-derived one.
        #[arg(long = "pretraining-count")]
        pretraining_count: Option<usize>,
    },
    /// Standardized embeddings of one layer as CSV.
    ExportEmbeddings(DumpArgs),
}

fn parse_assignment(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (lang, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected LANG=PATH, got {s:?}"))?;
    Ok((lang.to_string(), PathBuf::from(path)))
}

fn parse_mc_mode(s: &str) -> std::result::Result<McMode, String> {
    match s {
        "standard" => Ok(McMode::Standard),
        "paper_literal" | "paper-literal" => Ok(McMode::PaperLiteral),
        _ => Err(format!("unknown mc mode {s:?}")),
    }
}

fn parse_gen_mode(s: &str) -> std::result::Result<GenMode, String> {
    match s {
        "conjunction" => Ok(GenMode::Conjunction),
        "product" => Ok(GenMode::Product),
        _ => Err(format!("unknown gen mode {s:?}")),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::InputNotFound(path.to_path_buf())
    } else {
        CliError::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

fn format_error(path: &Path, e: FormatError) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_error(path, e))
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("no {what} given (flag or config)")))
}

fn read_dump(path: &Path) -> Result<HiddenStateDump> {
    formats::read_hsd(open(path)?).map_err(|e| format_error(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_matrix(path: &Path) -> Result<BiasMatrix<f64>> {
    let m: BiasMatrix<f64> = read_json(path)?;
    m.validate().map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(m)
}

struct Output {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Output {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let f = File::create(&path).map_err(|e| io_error(&path, e))?;
        self.written.push(path);
        Ok(BufWriter::new(f))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(domain)?;
        text.push('\n');
        self.text(name, &text)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| io_error(&path, e))
    }
}

/// What a successful run produced.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub stdout: String,
}

#[derive(Debug, Serialize)]
struct SemanticLayerOut {
    semantic_layer: usize,
    mean_bias: f64,
}

struct Ctx {
    cfg: PipelineConfig,
    out: Output,
    stdout: String,
}

impl Ctx {
    fn say(&mut self, line: impl AsRef<str>) {
        self.stdout.push_str(line.as_ref());
        self.stdout.push('\n');
    }

    fn pivot(&self, flag: &Option<String>) -> String {
        flag.clone()
            .or_else(|| self.cfg.pivot.clone())
            .unwrap_or_else(|| DEFAULT_PIVOT.to_string())
    }

    fn hsd_path(&self, args: &DumpArgs) -> Option<PathBuf> {
        args.hsd.clone().or_else(|| self.cfg.hsd.clone())
    }

    /// Explicit layer, else the semantic layer of `dump`.
    fn layer_for(&self, args: &DumpArgs, dump: &HiddenStateDump) -> Result<usize> {
        match args.layer.or(self.cfg.layer) {
            Some(l) => Ok(l),
            None => {
                let curve = biasprobe::mean_bias_curve(&biasprobe::probe_all_layers::<f64>(dump)?)?;
                Ok(biasprobe::semantic_layer(&curve)?)
            }
        }
    }

    fn semantic_bias(&self, bias_flag: &Option<PathBuf>, args: &DumpArgs) -> Result<BiasMatrix<f64>> {
        if let Some(path) = bias_flag.clone().or_else(|| self.cfg.bias.clone()) {
            return read_matrix(&path);
        }
        let path = self
            .hsd_path(args)
            .ok_or_else(|| CliError::Usage("need a bias matrix (--bias) or a dump (--hsd)".into()))?;
        let dump = read_dump(&path)?;
        let layer = self.layer_for(args, &dump)?;
        Ok(biasprobe::pairwise_bias(&dump, layer)?)
    }
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<Report> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("famss_out"));
    let mut ctx = Ctx {
        cfg,
        out: Output::new(dir)?,
        stdout: String::new(),
    };
    match cli.command {
        Command::Probe(args) => cmd_probe(&mut ctx, &args)?,
        Command::SemanticLayer { curve, dump } => cmd_semantic_layer(&mut ctx, curve, &dump)?,
        Command::Tc {
            dump,
            bias,
            tuned,
            tuned_bias,
            pivot,
        } => cmd_tc(&mut ctx, &dump, &bias, tuned, tuned_bias, &pivot)?,
        Command::Select {
            dump,
            bias,
            transfer,
            m,
            d,
            pivot,
            candidates,
        } => cmd_select(&mut ctx, &dump, &bias, transfer, m, d, &pivot, candidates)?,
        Command::EvalMc { logits, mode } => cmd_eval_mc(&mut ctx, logits, mode)?,
        Command::EvalGen { labels, mode } => cmd_eval_gen(&mut ctx, labels, mode)?,
        Command::BuildData {
            corpus,
            clustering,
            languages,
            ratio,
            seed,
            template_file,
            pretraining_count,
        } => cmd_build(
            &mut ctx,
            BuildArgs {
                corpus,
                clustering,
                languages,
                ratio,
                seed,
                template_file,
                pretraining_count,
            },
        )?,
        Command::ExportEmbeddings(args) => cmd_export(&mut ctx, &args)?,
    }
    Ok(Report {
        files: ctx.out.written,
        stdout: ctx.stdout,
    })
}

fn cmd_probe(ctx: &mut Ctx, args: &DumpArgs) -> Result<()> {
    let path = ctx.hsd_path(args);
    let dump = read_dump(required(&path, "hidden-state dump")?)?;
    let matrices = biasprobe::probe_all_layers::<f64>(&dump)?;
    let curve = biasprobe::mean_bias_curve(&matrices)?;
    for m in &matrices {
        ctx.out.json(&format!("bias_layer_{}.json", m.layer), m)?;
    }
    ctx.out.json("curve.json", &curve)?;
    let layer = biasprobe::semantic_layer(&curve)?;
    ctx.say(format!("layers: {}", matrices.len()));
    ctx.say(format!("semantic layer: {layer} (mean bias {})", curve.values[layer]));
    Ok(())
}

fn cmd_semantic_layer(ctx: &mut Ctx, curve_flag: Option<PathBuf>, args: &DumpArgs) -> Result<()> {
    let curve: BiasCurve<f64> = match curve_flag.or_else(|| ctx.cfg.curve.clone()) {
        Some(path) => read_json(&path)?,
        None => {
            let path = ctx.hsd_path(args);
            let dump = read_dump(required(&path, "curve or hidden-state dump")?)?;
            biasprobe::mean_bias_curve(&biasprobe::probe_all_layers::<f64>(&dump)?)?
        }
    };
    let layer = biasprobe::semantic_layer(&curve)?;
    ctx.out.json(
        "semantic_layer.json",
        &SemanticLayerOut {
            semantic_layer: layer,
            mean_bias: curve.values[layer],
        },
    )?;
    ctx.say(layer.to_string());
    Ok(())
}

fn cmd_tc(
    ctx: &mut Ctx,
    args: &DumpArgs,
    bias_flag: &Option<PathBuf>,
    tuned: Vec<(String, PathBuf)>,
    tuned_bias: Vec<(String, PathBuf)>,
    pivot: &Option<String>,
) -> Result<()> {
    let pivot = ctx.pivot(pivot);
    let mut tuned_dumps = ctx.cfg.tuned_hsd.clone();
    tuned_dumps.extend(tuned);
    let mut tuned_mats = ctx.cfg.tuned_bias.clone();
    tuned_mats.extend(tuned_bias);

    let base = ctx.semantic_bias(bias_flag, args)?;
    let layer = base.layer;
    let mut by_lang = BTreeMap::new();
    for (lang, path) in &tuned_mats {
        by_lang.insert(lang.clone(), read_matrix(path)?);
    }
    for (lang, path) in &tuned_dumps {
        if by_lang.contains_key(lang) {
            continue;
        }
        let dump = read_dump(path)?;
        by_lang.insert(lang.clone(), biasprobe::pairwise_bias(&dump, layer)?);
    }
    if by_lang.is_empty() {
        return Err(CliError::Usage("no tuned dumps or matrices given".into()));
    }
    let table = transfer::transfer_table(&base, &by_lang, &pivot)?;
    ctx.out.json("transfer.json", &table)?;
    for (lang, tc) in &table.scores {
        ctx.say(format!("{lang}\t{tc}"));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_select(
    ctx: &mut Ctx,
    args: &DumpArgs,
    bias_flag: &Option<PathBuf>,
    transfer_flag: Option<PathBuf>,
    m: Option<usize>,
    d: Option<Threshold>,
    pivot: &Option<String>,
    candidates: Option<Vec<String>>,
) -> Result<()> {
    let pivot = ctx.pivot(pivot);
    let m = m.or(ctx.cfg.m).unwrap_or(DEFAULT_MAX_SETS);
    if m < 1 {
        return Err(CliError::Usage("invalid selection config: m must be >= 1".into()));
    }
    let threshold = d.or(ctx.cfg.d).unwrap_or_default();
    let transfer_path = transfer_flag.or_else(|| ctx.cfg.transfer.clone());
    let tc: TransferTable<f64> = read_json(required(&transfer_path, "transfer table")?)?;

    let bias = ctx.semantic_bias(bias_flag, args)?;
    let config = match threshold {
        Threshold::Auto => {
            let cfg = SelectionConfig::auto_threshold(&bias, m, pivot.clone())?;
            ctx.say(format!("d = {} (auto: mean off-diagonal bias)", cfg.threshold));
            cfg
        }
        Threshold::Value(v) => SelectionConfig::new(m, v, pivot.clone())?,
    };
    let candidates = candidates
        .or_else(|| ctx.cfg.candidates.clone())
        .unwrap_or_else(|| bias.languages.iter().filter(|l| **l != pivot).cloned().collect());
    let clustering = selection::select_optimal(&candidates, &bias, &tc, &config)?;
    ctx.out.json("clustering.json", &clustering)?;
    for (set, core) in clustering.sets.iter().zip(clustering.cores.iter().flatten()) {
        ctx.say(format!("{{{}}} -> {core}", set.join(", ")));
    }
    Ok(())
}

fn cmd_eval_mc(ctx: &mut Ctx, logits: Option<PathBuf>, mode: Option<McMode>) -> Result<()> {
    let path = logits.or_else(|| ctx.cfg.logits.clone());
    let path = required(&path, "logit records")?;
    let records = formats::read_logit_records(open(path)?).map_err(|e| format_error(path, e))?;
    let mode = mode.or(ctx.cfg.mc_mode).unwrap_or_default();
    let report = metrics::aggregate_mc::<f64>(&records, mode)?;
    let table = report.to_table();
    ctx.out.json("mc_report.json", &report)?;
    ctx.out.text("mc_report.txt", &table)?;
    ctx.say(table.trim_end());
    Ok(())
}

fn cmd_eval_gen(ctx: &mut Ctx, labels: Option<PathBuf>, mode: Option<GenMode>) -> Result<()> {
    let path = labels.or_else(|| ctx.cfg.labels.clone());
    let path = required(&path, "judge labels")?;
    let labels = formats::read_judge_labels(open(path)?).map_err(|e| format_error(path, e))?;
    let mode = mode.or(ctx.cfg.gen_mode).unwrap_or_default();
    let report = metrics::aggregate_gen::<f64>(&labels, mode)?;
    let table = report.to_table();
    ctx.out.json("gen_report.json", &report)?;
    ctx.out.text("gen_report.txt", &table)?;
    ctx.say(table.trim_end());
    Ok(())
}

struct BuildArgs {
    corpus: Option<PathBuf>,
    clustering: Option<PathBuf>,
    languages: Option<Vec<String>>,
    ratio: Option<f64>,
    seed: Option<u64>,
    template_file: Option<PathBuf>,
    pretraining_count: Option<usize>,
}

fn cmd_build(ctx: &mut Ctx, args: BuildArgs) -> Result<()> {
    let corpus_path = args.corpus.or_else(|| ctx.cfg.corpus.clone());
    let corpus_path = required(&corpus_path, "corpus")?;
    let corpus = formats::read_corpus(open(corpus_path)?).map_err(|e| format_error(corpus_path, e))?;

    let languages = match args.languages.or_else(|| ctx.cfg.languages.clone()) {
        Some(l) => l,
        None => {
            let path = args.clustering.or_else(|| ctx.cfg.clustering.clone());
            let path = required(&path, "language list or clustering")?;
            let clustering: Clustering<f64> = read_json(path)?;
            clustering.cores.ok_or_else(|| CliError::Input {
                path: path.clone(),
                message: "clustering has no cores".into(),
            })?
        }
    };
    let template = match args.template_file.or_else(|| ctx.cfg.template_file.clone()) {
        Some(p) => fs::read_to_string(&p).map_err(|e| io_error(&p, e))?,
        None => DEFAULT_TEMPLATE.to_string(),
    };
    databuilder::check_template(&template).map_err(|e| CliError::Usage(e.to_string()))?;
    let ratio = args.ratio.or(ctx.cfg.ratio).unwrap_or(DEFAULT_PRETRAIN_RATIO);
    let seed = args.seed.or(ctx.cfg.seed).unwrap_or(0);

    let alignment = databuilder::validate_alignment(&corpus)?;
    let mut plan = databuilder::build_allocation(&CorpusSummary::from_items(&corpus), &languages, ratio, seed)?;
    if let Some(n) = args.pretraining_count.or(ctx.cfg.pretraining_count) {
        plan = plan.with_pretraining_count(n);
    }
    let path = ctx.out.path("dataset.jsonl");
    let mut w = ctx.out.create("dataset.jsonl")?;
    let written = databuilder::emit_dataset(&plan, &corpus, &template, &mut w)?;
    w.flush().map_err(|e| io_error(&path, e))?;
    drop(w);
    ctx.out.json("plan.json", &plan)?;
    ctx.out.json("alignment_report.json", &alignment)?;
    ctx.say(format!(
        "wrote {written} examples ({} pretraining, share {:.4})",
        plan.pretraining_count(),
        plan.pretraining_share()
    ));
    if !alignment.passed() {
        ctx.say(format!(
            "warning: {} alignment groups span fewer than {} languages",
            alignment.flagged.len(),
            databuilder::MIN_ALIGNED_LANGUAGES
        ));
    }
    Ok(())
}

fn cmd_export(ctx: &mut Ctx, args: &DumpArgs) -> Result<()> {
    let path = ctx.hsd_path(args);
    let dump = read_dump(required(&path, "hidden-state dump")?)?;
    let layer = ctx.layer_for(args, &dump)?;
    let name = format!("embeddings_layer_{layer}.csv");
    let w = ctx.out.create(&name)?;
    biasprobe::export_embeddings(&dump, layer, w)?;
    ctx.say(ctx.out.path(&name).display().to_string());
    Ok(())
}

/// Caps rayon's global pool at `FAMSS_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool that is already initialized (e.g. in tests) is left alone.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn report_error(e: &CliError, stderr: &mut impl Write) {
    let line = serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    });
    let _ = writeln!(stderr, "{line}");
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut impl Write, stderr: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = write!(stdout, "{e}");
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            report_error(&err, stderr);
            return err.exit_code();
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(report) => {
            let _ = stdout.write_all(report.stdout.as_bytes());
            0
        }
        Err(e) => {
            report_error(&e, stderr);
            e.exit_code()
        }
    }
}
