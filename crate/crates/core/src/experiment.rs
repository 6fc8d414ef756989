//! End-to-end runner: dataset generation, training, evaluation, ablation
//! and report rendering. Every emitted file carries the resolved config and
//! all derived seeds, so any output can be regenerated from itself.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::eval::{run_protocol, train_classifier_with_report, ClassifierConfig, ClassifierReport, EvalConfig, EvalReport, Metric, ModelGenerator, TestReport};
use crate::moe::{train as train_model, MmvaeModel, ModelCheckpoint, ModelConfig, MoeError, Objective, TrainConfig, TrainProvenance};
use crate::seed::{derive_seed, rng_from_seed};
use crate::taxonomy::{builtin_taxonomy, generate_dataset, load_taxonomy, GeneratorConfig, Level, PairedDataset, Taxonomy, TaxonomyVariant};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Validation(_))
    }
}

fn runtime(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_owned(), source }
}

/// A builtin variant name or a path to a taxonomy JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaxonomySource {
    Variant(TaxonomyVariant),
    File { path: PathBuf },
}

impl Default for TaxonomySource {
    fn default() -> Self {
        TaxonomySource::Variant(TaxonomyVariant::Base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every derived seed.
    pub seed: u64,
    pub taxonomy: TaxonomySource,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    /// Swap in the large model and feature dimensions.
    pub paper_scale: bool,
    pub output_dir: PathBuf,
    /// Wall-clock limit for `ablate`, in seconds.
    pub ablation_budget_secs: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            taxonomy: TaxonomySource::default(),
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                objective: Objective::CrossReconstruction,
                ..TrainConfig::default()
            },
            classifier: ClassifierConfig::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
            paper_scale: false,
            output_dir: PathBuf::from("out"),
            ablation_budget_secs: 45 * 60,
        }
    }
}

/// Every seed used by a run, all derived from the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub root: u64,
    pub generator: u64,
    pub label_embedding: u64,
    pub split: u64,
    pub model_init: u64,
    pub train: u64,
    pub classifier: u64,
    pub eval: u64,
}

impl SeedSet {
    pub fn derive(root: u64) -> Self {
        let generator = derive_seed(root, "generator");
        SeedSet {
            root,
            generator,
            label_embedding: derive_seed(generator, "label-embedding"),
            split: derive_seed(root, "split"),
            model_init: derive_seed(root, "model-init"),
            train: derive_seed(root, "train"),
            classifier: derive_seed(root, "classifier"),
            eval: derive_seed(root, "eval"),
        }
    }
}

/// Config after presets and seed derivation; what gets written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub seeds: SeedSet,
}

impl ExperimentConfig {
    /// Reads a config file, or recovers the config embedded in any emitted
    /// JSON or CSV output.
    pub fn from_path(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ExperimentError> {
        let trimmed = text.trim_start();
        if let Some(rest) = trimmed.strip_prefix("# provenance ") {
            let line = rest.lines().next().unwrap_or_default();
            return Self::from_provenance(line);
        }
        let value: Value = serde_json::from_str(text).map_err(|e| ExperimentError::Validation(format!("config is not valid JSON: {e}")))?;
        if let Some(p) = value.get("provenance") {
            return Self::from_provenance(&p.to_string());
        }
        serde_json::from_value(value).map_err(|e| ExperimentError::Validation(e.to_string()))
    }

    fn from_provenance(json: &str) -> Result<Self, ExperimentError> {
        let resolved: ResolvedConfig = serde_json::from_str(json).map_err(|e| ExperimentError::Validation(format!("bad provenance header: {e}")))?;
        Ok(resolved.config)
    }

    pub fn resolve(&self) -> Result<ResolvedConfig, ExperimentError> {
        let mut config = self.clone();
        if config.paper_scale {
            let levels = config.model.label_levels.clone();
            config.model = ModelConfig { label_levels: levels, ..ModelConfig::paper_scale() };
            config.generator.feature_dim = 2048;
            config.generator.embed_dim = 768;
        }
        let seeds = SeedSet::derive(config.seed);
        config.generator.seed = seeds.generator;
        config.train.seed = seeds.train;
        config.classifier.seed = seeds.classifier;
        config.eval.seed = seeds.eval;
        let validation = |e: &dyn std::fmt::Display| ExperimentError::Validation(e.to_string());
        config.generator.validate().map_err(|e| validation(&e))?;
        config.model.validate().map_err(|e| validation(&e))?;
        config.train.validate().map_err(|e| validation(&e))?;
        config.eval.relevance.validate().map_err(|e| validation(&e))?;
        let f = config.split.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(ExperimentError::Validation(format!("test_fraction must lie in (0, 1), got {f}")));
        }
        if config.eval.levels.is_empty() {
            return Err(ExperimentError::Validation("eval.levels must not be empty".into()));
        }
        for level in &config.eval.levels {
            if !config.model.label_levels.contains(level) {
                return Err(ExperimentError::Validation(format!("eval level {level} has no language VAE in model.label_levels")));
            }
        }
        if config.classifier.hidden.is_empty() || config.classifier.hidden.contains(&0) || config.classifier.batch_size == 0 {
            return Err(ExperimentError::Validation("classifier needs positive hidden widths and batch size".into()));
        }
        if !(config.classifier.learning_rate > 0.0 && config.classifier.learning_rate.is_finite()) {
            return Err(ExperimentError::Validation("classifier learning_rate must be positive".into()));
        }
        Ok(ResolvedConfig { config, seeds })
    }
}

impl ResolvedConfig {
    fn provenance_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    fn header(&self) -> Vec<String> {
        vec![format!("provenance {}", self.provenance_json())]
    }

    fn provenance_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn taxonomy(&self) -> Result<Taxonomy, ExperimentError> {
        match &self.config.taxonomy {
            TaxonomySource::Variant(v) => Ok(builtin_taxonomy(*v)),
            TaxonomySource::File { path } => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                load_taxonomy(&text).map_err(|e| ExperimentError::Validation(e.to_string()))
            }
        }
    }

    pub fn with_variant(&self, variant: TaxonomyVariant, output_dir: PathBuf) -> ResolvedConfig {
        let mut next = self.clone();
        next.config.taxonomy = TaxonomySource::Variant(variant);
        next.config.output_dir = output_dir;
        next
    }
}

/// Generated data with its seeded, per-subordinate stratified split.
pub struct Prepared {
    pub dataset: PairedDataset<f64>,
    pub train: PairedDataset<f64>,
    pub test: PairedDataset<f64>,
}

pub fn split_indices(dataset: &PairedDataset<f64>, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in dataset.taxonomy.at_level(Level::Subordinate) {
        let mut group: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.examples[i].labels.subordinate == u).collect();
        group.shuffle(&mut rng);
        let n_test = ((group.len() as f64) * test_fraction).round() as usize;
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn prepare(resolved: &ResolvedConfig) -> Result<Prepared, ExperimentError> {
    let taxonomy = resolved.taxonomy()?;
    let dataset: PairedDataset<f64> = generate_dataset(&taxonomy, &resolved.config.generator);
    let (train_idx, test_idx) = split_indices(&dataset, resolved.config.split.test_fraction, resolved.seeds.split);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(ExperimentError::Validation("split leaves an empty train or test set; raise samples_per_subordinate".into()));
    }
    Ok(Prepared {
        train: dataset.subset(&train_idx),
        test: dataset.subset(&test_idx),
        dataset,
    })
}

fn create_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, ExperimentError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub subordinate: usize,
    pub basic: usize,
    pub superordinate: usize,
    pub examples: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
}

/// Writes `dataset.csv`, `taxonomy.json` and `summary.json`.
pub fn cmd_gen_data(resolved: &ResolvedConfig) -> Result<DatasetSummary, ExperimentError> {
    let prepared = prepare(resolved)?;
    let out = resolved.out_dir();
    create_dir(out)?;
    let (sub, basic, sup) = prepared.dataset.taxonomy.counts();
    let summary = DatasetSummary {
        subordinate: sub,
        basic,
        superordinate: sup,
        examples: prepared.dataset.len(),
        train_examples: prepared.train.len(),
        test_examples: prepared.test.len(),
        feature_dim: prepared.dataset.feature_dim(),
        embed_dim: prepared.dataset.embed_dim(),
    };
    let path = out.join("dataset.csv");
    let mut w = create_file(&path)?;
    for line in resolved.header() {
        writeln!(w, "# {line}").map_err(io_err(&path))?;
    }
    prepared.dataset.write_csv(&mut w).map_err(runtime)?;
    w.flush().map_err(io_err(&path))?;
    write_json(
        &out.join("taxonomy.json"),
        &json!({ "provenance": resolved.provenance_value(), "taxonomy": prepared.dataset.taxonomy.to_document() }),
    )?;
    write_json(&out.join("summary.json"), &json!({ "provenance": resolved.provenance_value(), "summary": summary }))?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CheckpointFile {
    pub provenance: ResolvedConfig,
    pub model: ModelCheckpoint<f64>,
}

pub struct TrainOutcome {
    pub model: MmvaeModel<f64>,
    pub trace: Vec<f64>,
}

pub fn init_model(resolved: &ResolvedConfig, prepared: &Prepared) -> Result<MmvaeModel<f64>, ExperimentError> {
    MmvaeModel::init(
        &resolved.config.model,
        prepared.dataset.feature_dim(),
        prepared.dataset.embed_dim(),
        resolved.seeds.model_init,
    )
    .map_err(|e| ExperimentError::Validation(e.to_string()))
}

/// Trains on the train split; writes `checkpoint.json` and `trace.csv`.
pub fn cmd_train(resolved: &ResolvedConfig) -> Result<TrainOutcome, ExperimentError> {
    let prepared = prepare(resolved)?;
    let init = init_model(resolved, &prepared)?;
    let (model, trace) = train_model(&init, &prepared.train, &resolved.config.train).map_err(|e| match e {
        MoeError::Config(_) | MoeError::Model(_) => ExperimentError::Validation(e.to_string()),
        other => runtime(other),
    })?;
    let out = resolved.out_dir();
    create_dir(out)?;
    let ckpt = CheckpointFile {
        provenance: resolved.clone(),
        model: model.to_checkpoint(Some(TrainProvenance {
            train_config: resolved.config.train.clone(),
            steps_completed: trace.len(),
        })),
    };
    write_json(&out.join(CHECKPOINT_FILE), &ckpt)?;
    let path = out.join(TRACE_FILE);
    let mut w = create_file(&path)?;
    let mut text = String::new();
    for line in resolved.header() {
        let _ = writeln!(text, "# {line}");
    }
    text.push_str("step,negative_elbo\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(text, "{i},{v}");
    }
    w.write_all(text.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(TrainOutcome { model, trace })
}

pub fn load_checkpoint(path: &Path) -> Result<(ResolvedConfig, MmvaeModel<f64>), ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::Runtime(format!("checkpoint {} not found; run `train` first", path.display())));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| runtime(format!("corrupt checkpoint {}: {e}", path.display())))?;
    let model = MmvaeModel::from_checkpoint(&file.model).map_err(runtime)?;
    Ok((file.provenance, model))
}

/// Runs both cross-modal tests on a model against the configured split.
pub fn evaluate(resolved: &ResolvedConfig, prepared: &Prepared, model: &MmvaeModel<f64>) -> Result<(EvalReport, ClassifierReport), ExperimentError> {
    let (classifier, clf_report) = train_classifier_with_report(&prepared.train, Some(&prepared.test), &resolved.config.classifier).map_err(runtime)?;
    let generator = ModelGenerator::new(model, resolved.config.eval.latent_draw);
    let (understanding, naming) = run_protocol(&generator, &prepared.train, &prepared.test, &classifier, &resolved.config.eval).map_err(|e| match e {
        crate::eval::EvalError::Moe(MoeError::UnknownModality(_)) => ExperimentError::Validation(e.to_string()),
        other => runtime(other),
    })?;
    let report = EvalReport {
        understanding,
        naming,
        metadata: json!({ "provenance": resolved.provenance_value(), "classifier": clf_report }),
    };
    Ok((report, clf_report))
}

fn write_test_csv(resolved: &ResolvedConfig, path: &Path, report: &TestReport) -> Result<(), ExperimentError> {
    let mut w = create_file(path)?;
    report.write_csv(&mut w, &resolved.header()).map_err(runtime)?;
    w.flush().map_err(io_err(path))
}

/// Evaluates the checkpoint at `checkpoint` (default: the output directory's).
/// Writes `eval_report.json`, `understanding.csv` and `naming.csv`.
pub fn cmd_eval(resolved: &ResolvedConfig, checkpoint: Option<&Path>) -> Result<EvalReport, ExperimentError> {
    let default = resolved.out_dir().join(CHECKPOINT_FILE);
    let path = checkpoint.unwrap_or(&default);
    let (_, model) = load_checkpoint(path)?;
    let prepared = prepare(resolved)?;
    let (report, _) = evaluate(resolved, &prepared, &model)?;
    let out = resolved.out_dir();
    create_dir(out)?;
    write_json(&out.join(EVAL_REPORT_FILE), &json!({ "provenance": resolved.provenance_value(), "report": report }))?;
    write_test_csv(resolved, &out.join("understanding.csv"), &report.understanding)?;
    write_test_csv(resolved, &out.join("naming.csv"), &report.naming)?;
    Ok(report)
}

/// One row of the ablation table: a level's relevance in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: TaxonomyVariant,
    pub level: Level,
    pub ground_truth: bool,
    pub language_to_vision: f64,
    pub vision_to_language: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: TaxonomyVariant,
    pub subordinate_concepts: usize,
    pub report: EvalReport,
}

fn relevance_of(report: &TestReport, level: Level, ground_truth: bool) -> Result<f64, ExperimentError> {
    let row = report
        .get(level, Metric::Relevance)
        .ok_or_else(|| runtime(format!("no relevance row for {level}")))?;
    Ok(if ground_truth { row.baseline } else { row.value })
}

/// Level by {result, ground truth} rows, one pair of relevance columns.
pub fn ablation_rows(variant: TaxonomyVariant, report: &EvalReport, levels: &[Level]) -> Result<Vec<AblationRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &level in levels {
        for ground_truth in [false, true] {
            rows.push(AblationRow {
                variant,
                level,
                ground_truth,
                language_to_vision: relevance_of(&report.understanding, level, ground_truth)?,
                vision_to_language: relevance_of(&report.naming, level, ground_truth)?,
            });
        }
    }
    Ok(rows)
}

/// Train and evaluate every builtin variant under shared seeds, each in its
/// own subdirectory, then write the comparison table.
pub fn cmd_ablate(resolved: &ResolvedConfig) -> Result<(Vec<AblationResult>, Vec<AblationRow>), ExperimentError> {
    let start = Instant::now();
    let out = resolved.out_dir().to_owned();
    create_dir(&out)?;
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for variant in TaxonomyVariant::ALL {
        let sub = resolved.with_variant(variant, out.join(variant.as_str()));
        cmd_train(&sub)?;
        let report = cmd_eval(&sub, None)?;
        let (n_sub, _, _) = sub.taxonomy()?.counts();
        rows.extend(ablation_rows(variant, &report, &resolved.config.eval.levels)?);
        results.push(AblationResult { variant, subordinate_concepts: n_sub, report });
        let elapsed = start.elapsed().as_secs();
        if elapsed > resolved.config.ablation_budget_secs {
            return Err(runtime(format!(
                "ablation exceeded its {} s budget after {variant} ({elapsed} s)",
                resolved.config.ablation_budget_secs
            )));
        }
    }
    let path = out.join("ablation.csv");
    let mut text = String::new();
    for line in resolved.header() {
        let _ = writeln!(text, "# {line}");
    }
    text.push_str("variant,level,row,language_to_vision,vision_to_language\n");
    for r in &rows {
        let kind = if r.ground_truth { "ground_truth" } else { "result" };
        let _ = writeln!(text, "{},{},{kind},{},{}", r.variant, r.level, r.language_to_vision, r.vision_to_language);
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    write_json(
        &out.join(ABLATION_FILE),
        &json!({ "provenance": resolved.provenance_value(), "rows": rows, "variants": results }),
    )?;
    Ok((results, rows))
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn render_test(out: &mut String, title: &str, report: &TestReport) {
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(out, "| Level | Classifier Accuracy | Relevance Score |");
    let _ = writeln!(out, "|---|---|---|");
    let mut levels: Vec<Level> = report.rows.iter().map(|r| r.level).collect();
    levels.dedup();
    for level in levels {
        let acc = report.get(level, Metric::Accuracy);
        let rel = report.get(level, Metric::Relevance);
        if let (Some(a), Some(r)) = (acc, rel) {
            let name = capitalize(level.as_str());
            let _ = writeln!(out, "| {name} Level | {} | {:.4} |", pct(a.value), r.value);
            let _ = writeln!(out, "| {name} Level Ground Truth | {} | {:.4} |", pct(a.baseline), r.baseline);
        }
    }
    out.push('\n');
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Renders whatever reports exist in the output directory as Markdown,
/// writes `report.md` and returns the text.
pub fn cmd_report(resolved: &ResolvedConfig) -> Result<String, ExperimentError> {
    let out = resolved.out_dir();
    let eval_path = out.join(EVAL_REPORT_FILE);
    let ablation_path = out.join(ABLATION_FILE);
    let mut text = String::from("# Cross-modal evaluation\n\n");
    let mut found = false;
    if eval_path.exists() {
        let v: Value = serde_json::from_str(&fs::read_to_string(&eval_path).map_err(io_err(&eval_path))?).map_err(runtime)?;
        let report: EvalReport = serde_json::from_value(v["report"].clone()).map_err(runtime)?;
        render_test(&mut text, "Language understanding (language to vision)", &report.understanding);
        render_test(&mut text, "Language naming (vision to language)", &report.naming);
        let _ = writeln!(text, "Provenance: `{}`\n", v["provenance"]);
        found = true;
    }
    if ablation_path.exists() {
        let v: Value = serde_json::from_str(&fs::read_to_string(&ablation_path).map_err(io_err(&ablation_path))?).map_err(runtime)?;
        let rows: Vec<AblationRow> = serde_json::from_value(v["rows"].clone()).map_err(runtime)?;
        let _ = writeln!(text, "### Ablation (relevance)\n");
        let _ = writeln!(text, "| Variant | Level | Language-to-Vision | Vision-to-Language |");
        let _ = writeln!(text, "|---|---|---|---|");
        for r in &rows {
            let gt = if r.ground_truth { " Ground Truth" } else { "" };
            let _ = writeln!(
                text,
                "| {} | {} Level{gt} | {:.4} | {:.4} |",
                r.variant,
                capitalize(r.level.as_str()),
                r.language_to_vision,
                r.vision_to_language
            );
        }
        let _ = writeln!(text, "\nProvenance: `{}`\n", v["provenance"]);
        found = true;
    }
    if !found {
        return Err(runtime(format!("no {EVAL_REPORT_FILE} or {ABLATION_FILE} in {}; run `eval` or `ablate` first", out.display())));
    }
    let path = out.join("report.md");
    fs::write(&path, &text).map_err(io_err(&path))?;
    Ok(text)
}
