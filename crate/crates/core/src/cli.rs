//! The `non` command line: prepare, train, evaluate, search, analyze, report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{NonConfig, Operation, TrainConfig};
use crate::data::{self, DatasetSchema, EncodedTable, Preprocessor, RawRow};
use crate::error::{NonError, Result};
use crate::eval::{self, DEFAULT_SAMPLE_CAP};
use crate::model::{Checkpoint, FieldInfo, NonModel};
use crate::search::{self, SearchLine, SearchSpace, TrialConfig};
use crate::training;

pub const PREPROCESSOR_FILE: &str = "preprocessor.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const BEST_MODEL_FILE: &str = "best_model.json";
pub const SIMILARITY_FILE: &str = "similarity.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

#[derive(Debug, Parser)]
#[command(name = "non", version, about = "Network On Network for tabular binary classification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "non.toml")]
    pub config: PathBuf,
    /// Master seed; overrides `data.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory; overrides `data.artifacts`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON lines instead of text.
    #[arg(long, global = true)]
    pub json_lines: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the training file and fit the vocabulary and statistics.
    Prepare,
    /// Train a model with the configured hyperparameters.
    Train,
    /// Report AUC and log loss of a checkpoint on one split.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Checkpoint to evaluate; defaults to the trained model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Random hyperparameter search.
    Search {
        /// Restrict every trial to this operation set, e.g. `lr,dnn`.
        #[arg(long)]
        fix_operations: Option<String>,
        /// Number of trials; overrides `search.n_trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Field similarity before/after the field-wise networks and embedding export.
    Analyze {
        /// Checkpoint to analyze; defaults to the trained model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated fields to export; all categorical fields by default.
        #[arg(long)]
        fields: Option<String>,
        /// Values sampled per field.
        #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
        sample_cap: usize,
        /// Accept a checkpoint that was never trained.
        #[arg(long)]
        allow_untrained: bool,
    },
    /// Summarize search records.
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub schema: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: usize,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub artifacts: Option<PathBuf>,
}

fn default_threshold() -> usize {
    data::DEFAULT_THRESHOLD
}

fn default_valid_fraction() -> f64 {
    data::DEFAULT_VALID_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub n_trials: usize,
    /// 0 uses every available core.
    pub workers: usize,
    pub space: SearchSpace,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            n_trials: 60,
            workers: 0,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: NonConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub search: SearchSection,
}

impl RunConfig {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| NonError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.schema);
        cfg.data.test.as_mut().map(resolve);
        cfg.data.artifacts.as_mut().map(resolve);
        cfg.model.validate()?;
        cfg.training.validate()?;
        cfg.search.space.validate()?;
        if cfg.data.threshold == 0 {
            return Err(NonError::Config("data.threshold must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NonError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn hash(&self) -> String {
        data::hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn data_hash(&self) -> String {
        data::hex_digest(&serde_json::to_vec(&self.data).expect("config serializes"))
    }
}

/// Independent seeds for each subsystem, split off one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
    pub search: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds {
            split: search::mix_seed(master, 1),
            init: search::mix_seed(master, 2),
            shuffle: search::mix_seed(master, 3),
            search: search::mix_seed(master, 4),
        }
    }
}

/// Written by `prepare`: which training-file rows form each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub preprocessor_hash: String,
    pub train_rows: Vec<usize>,
    pub valid_rows: Vec<usize>,
}

struct Context {
    config: RunConfig,
    seed: u64,
    seeds: Seeds,
    out: PathBuf,
    json: bool,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, command: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(NonError::MissingArtifact { path: p, command })
        }
    }

    fn load_prepared(&self) -> Result<(Manifest, Preprocessor)> {
        let manifest_path = self.require(MANIFEST_FILE, "prepare")?;
        let pre = Preprocessor::load(&self.require(PREPROCESSOR_FILE, "prepare")?)?;
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.data_hash != self.config.data_hash() || manifest.seed != self.seed {
            return Err(NonError::MissingArtifact {
                path: manifest_path,
                command: "prepare",
            });
        }
        Ok((manifest, pre))
    }

    fn schema(&self) -> Result<DatasetSchema> {
        DatasetSchema::load(&self.config.data.schema)
    }

    fn train_rows(&self, schema: &DatasetSchema) -> Result<Vec<RawRow>> {
        data::read_file(&self.config.data.train, schema)
    }

    fn encoded_split(&self, manifest: &Manifest, pre: &Preprocessor, split: Split) -> Result<EncodedTable> {
        match split {
            Split::Train | Split::Valid => {
                let rows = self.train_rows(&pre.schema)?;
                let pick = if split == Split::Train { &manifest.train_rows } else { &manifest.valid_rows };
                let chosen: Vec<RawRow> = pick.iter().map(|i| rows[*i].clone()).collect();
                pre.encode(&chosen)
            }
            Split::Test => {
                let path = self
                    .config
                    .data
                    .test
                    .as_ref()
                    .ok_or_else(|| NonError::Config("no `data.test` file configured".into()))?;
                pre.encode(&data::read_file(path, &pre.schema)?)
            }
        }
    }

    fn emit<T: Serialize>(&self, record: &T, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string(record).expect("record serializes"));
        } else {
            println!("{}", human());
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| NonError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NonError::parse(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| NonError::io(path, e))
}

fn preprocessor_hash(pre: &Preprocessor) -> String {
    data::hex_digest(pre.to_json().as_bytes())
}

/// Process exit code for a command result: 0 success, 1 usage or
/// configuration error, 2 runtime failure.
pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 1,
        Err(_) => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(&cli.global.config)?;
    let seed = cli.global.seed.unwrap_or(config.data.seed);
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| config.data.artifacts.clone())
        .unwrap_or_else(|| cli.global.config.parent().unwrap_or(Path::new(".")).join("artifacts"));
    std::fs::create_dir_all(&out).map_err(|e| NonError::io(&out, e))?;
    let ctx = Context {
        config,
        seed,
        seeds: Seeds::new(seed),
        out,
        json: cli.global.json_lines,
    };
    match cli.command {
        Command::Prepare => prepare(&ctx),
        Command::Train => train(&ctx),
        Command::Evaluate { split, model } => evaluate(&ctx, split, model),
        Command::Search { fix_operations, trials } => run_search(&ctx, fix_operations, trials),
        Command::Analyze {
            model,
            fields,
            sample_cap,
            allow_untrained,
        } => analyze(&ctx, model, fields, sample_cap, allow_untrained),
        Command::Report => report(&ctx),
    }
}

fn prepare(ctx: &Context) -> Result<()> {
    let schema = ctx.schema()?;
    let rows = ctx.train_rows(&schema)?;
    let (train_rows, valid_rows) = data::split_indices(rows.len(), ctx.config.data.valid_fraction, ctx.seeds.split)?;
    let fit_rows: Vec<RawRow> = train_rows.iter().map(|i| rows[*i].clone()).collect();
    let pre = Preprocessor::fit(schema, &fit_rows, ctx.config.data.threshold)?;
    // encode everything once so malformed rows fail here, not mid-training
    pre.encode(&rows)?;
    pre.save(&ctx.path(PREPROCESSOR_FILE))?;
    let manifest = Manifest {
        config_hash: ctx.config.hash(),
        data_hash: ctx.config.data_hash(),
        seed: ctx.seed,
        preprocessor_hash: preprocessor_hash(&pre),
        train_rows,
        valid_rows,
    };
    write_text(
        &ctx.path(MANIFEST_FILE),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    #[derive(Serialize)]
    struct Prepared<'a> {
        train_rows: usize,
        valid_rows: usize,
        vocabulary: Vec<(&'a str, usize)>,
    }
    let record = Prepared {
        train_rows: manifest.train_rows.len(),
        valid_rows: manifest.valid_rows.len(),
        vocabulary: pre.vocabulary.fields.iter().map(|f| (f.name.as_str(), f.size())).collect(),
    };
    ctx.emit(&record, || {
        let mut s = format!(
            "prepared {} training and {} validation rows in {}",
            record.train_rows,
            record.valid_rows,
            ctx.out.display()
        );
        for (name, n) in &record.vocabulary {
            let _ = write!(s, "\n  {name}: {n} indices");
        }
        s
    });
    Ok(())
}

fn train(ctx: &Context) -> Result<()> {
    let (manifest, pre) = ctx.load_prepared()?;
    let train = ctx.encoded_split(&manifest, &pre, Split::Train)?;
    let valid = ctx.encoded_split(&manifest, &pre, Split::Valid)?;
    let mut model = NonModel::new(
        ctx.config.model.clone(),
        FieldInfo::from_preprocessor(&pre),
        pre.schema.hash(),
        ctx.seeds.init,
    )?;
    let mut metric_log = String::new();
    let report = training::fit(&mut model, &train, &valid, &ctx.config.training, ctx.seeds.shuffle, &mut |m| {
        metric_log.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        metric_log.push('\n');
        ctx.emit(m, || {
            format!(
                "epoch {:>3}  loss {:.4}  valid AUC {:.4}  alpha {:.4}  {:.1}s",
                m.epoch, m.train_loss, m.valid_auc, m.alpha, m.seconds
            )
        });
    })?;
    write_text(&ctx.path(METRICS_FILE), &metric_log)?;
    let ckpt = model.to_checkpoint(report.best_epoch, Some(manifest.preprocessor_hash.clone()));
    ckpt.save(&ctx.path(MODEL_FILE))?;
    ctx.emit(&report, || {
        format!(
            "best epoch {} with valid AUC {:.4}; {} parameters; saved {}",
            report.best_epoch,
            report.best_valid_auc,
            model.num_parameters(),
            ctx.path(MODEL_FILE).display()
        )
    });
    Ok(())
}

fn load_model(ctx: &Context, explicit: Option<PathBuf>, pre: &Preprocessor) -> Result<(Checkpoint, NonModel)> {
    let path = match explicit {
        Some(p) if p.exists() => p,
        Some(p) => return Err(NonError::MissingArtifact { path: p, command: "train" }),
        None => ctx.require(MODEL_FILE, "train")?,
    };
    let ckpt = Checkpoint::load(&path)?;
    ckpt.check_schema(&pre.schema.hash())?;
    let model = NonModel::from_checkpoint(&ckpt)?;
    Ok((ckpt, model))
}

fn evaluate(ctx: &Context, split: Split, model_path: Option<PathBuf>) -> Result<()> {
    let (manifest, pre) = ctx.load_prepared()?;
    let (_, model) = load_model(ctx, model_path, &pre)?;
    let table = ctx.encoded_split(&manifest, &pre, split)?;
    let m = training::evaluate(&model, &table, ctx.config.training.batch_size)?;
    #[derive(Serialize)]
    struct Evaluated {
        split: Split,
        #[serde(flatten)]
        metrics: training::EvalMetrics,
    }
    ctx.emit(&Evaluated { split, metrics: m }, || {
        format!("{} AUC {:.4}  log loss {:.4}  rows {}", split.name(), m.auc, m.loss, m.rows)
    });
    Ok(())
}

fn run_search(ctx: &Context, fix: Option<String>, trials: Option<usize>) -> Result<()> {
    let (manifest, pre) = ctx.load_prepared()?;
    let train = ctx.encoded_split(&manifest, &pre, Split::Train)?;
    let valid = ctx.encoded_split(&manifest, &pre, Split::Valid)?;
    let test = match ctx.config.data.test {
        Some(_) => Some(ctx.encoded_split(&manifest, &pre, Split::Test)?),
        None => None,
    };
    let mut space = ctx.config.search.space.clone();
    if let Some(list) = fix {
        space.fixed_operations = Some(Operation::parse_list(&list)?);
    }
    let base = TrialConfig {
        model: ctx.config.model.clone(),
        train: ctx.config.training.clone(),
    };
    let fields = FieldInfo::from_preprocessor(&pre);
    let schema_hash = pre.schema.hash();
    let data = search::SearchData {
        fields: &fields,
        schema_hash: &schema_hash,
        train: &train,
        valid: &valid,
        test: test.as_ref(),
    };
    let workers = match ctx.config.search.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let n_trials = trials.unwrap_or(ctx.config.search.n_trials);
    let json = ctx.json;
    let outcome = search::run_search(&space, &base, data, n_trials, workers, ctx.seeds.search, &|r| {
        if json {
            println!("{}", serde_json::to_string(&SearchLine::Trial(Box::new(r.clone()))).expect("record serializes"));
        } else {
            match (&r.error, r.valid_auc) {
                (Some(e), _) => eprintln!("trial {:>3} failed: {e}", r.trial),
                (None, Some(v)) => eprintln!(
                    "trial {:>3}  valid AUC {v:.4}  ops {}  {:.1}s",
                    r.trial,
                    ops_label(&r.config.model.operations.set),
                    r.seconds
                ),
                (None, None) => {}
            }
        }
    })?;
    write_text(&ctx.path(TRIALS_FILE), &outcome.to_json_lines())?;
    let best = &outcome.records[outcome.summary.best_trial];
    outcome
        .best_model
        .to_checkpoint(best.best_epoch, Some(manifest.preprocessor_hash.clone()))
        .save(&ctx.path(BEST_MODEL_FILE))?;
    let s = &outcome.summary;
    ctx.emit(&SearchLine::Summary(s.clone()), || {
        format!(
            "best trial {} of {} ({} failed): valid AUC {:.4}{}",
            s.best_trial,
            s.trials,
            s.failed,
            s.best_valid_auc,
            s.best_test_auc.map_or(String::new(), |t| format!(", test AUC {t:.4}"))
        )
    });
    Ok(())
}

fn ops_label(ops: &[Operation]) -> String {
    ops.iter().map(|o| o.name()).collect::<Vec<_>>().join(",")
}

fn analyze(
    ctx: &Context,
    model_path: Option<PathBuf>,
    fields: Option<String>,
    sample_cap: usize,
    allow_untrained: bool,
) -> Result<()> {
    let (_, pre) = ctx.load_prepared()?;
    let (ckpt, model) = load_model(ctx, model_path, &pre)?;
    if ckpt.trained_epochs == 0 && !allow_untrained {
        return Err(NonError::Config(
            "checkpoint is untrained; pass --allow-untrained to analyze it anyway".into(),
        ));
    }
    let report = eval::field_similarity(&model, sample_cap, ctx.seed)?;
    write_text(
        &ctx.path(SIMILARITY_FILE),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let names: Vec<String> = match fields {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => pre.schema.categorical().map(|f| f.name.clone()).collect(),
    };
    let rows = eval::export_embeddings(&model, Some(&pre.vocabulary), &names, sample_cap, ctx.seed)?;
    let path = ctx.path(EMBEDDINGS_FILE);
    let file = std::fs::File::create(&path).map_err(|e| NonError::io(&path, e))?;
    eval::write_embeddings(&rows, std::io::BufWriter::new(file))?;
    ctx.emit(&report, || {
        let mut s = String::from("field                 values   before     after");
        for f in &report.fields {
            let _ = write!(s, "\n{:<20} {:>7} {:>9.5} {:>9.5}", f.field, f.values, f.before, f.after);
        }
        for f in &report.skipped {
            let _ = write!(s, "\n{f:<20} skipped: fewer than two known values");
        }
        let _ = write!(
            s,
            "\nmicro average               {:>9.5} {:>9.5}\nmacro average               {:>9.5} {:>9.5}\nexported {} vectors to {}",
            report.micro_before,
            report.micro_after,
            report.macro_before,
            report.macro_after,
            rows.len(),
            path.display()
        );
        s
    });
    Ok(())
}

fn report(ctx: &Context) -> Result<()> {
    let path = ctx.require(TRIALS_FILE, "search")?;
    let text = std::fs::read_to_string(&path).map_err(|e| NonError::io(&path, e))?;
    let lines = search::parse_json_lines(&text)?;
    let mut records: Vec<&search::TrialRecord> = lines
        .iter()
        .filter_map(|l| match l {
            SearchLine::Trial(r) => Some(r.as_ref()),
            SearchLine::Summary(_) => None,
        })
        .collect();
    let summary = lines.iter().find_map(|l| match l {
        SearchLine::Summary(s) => Some(s),
        SearchLine::Trial(_) => None,
    });
    if ctx.json {
        for l in &lines {
            println!("{}", serde_json::to_string(l).expect("record serializes"));
        }
        return Ok(());
    }
    records.sort_by(|a, b| {
        b.valid_auc
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.valid_auc.unwrap_or(f64::NEG_INFINITY))
            .then(a.trial.cmp(&b.trial))
    });
    println!("trial  valid AUC  test AUC  epochs    d  dnn                 lr      operations");
    for r in &records {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let widths = r
            .config
            .model
            .operations
            .dnn_hidden
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        println!(
            "{:>5}  {:>9}  {:>8}  {:>6}  {:>3}  {:<18}  {:<6.4}  {}{}",
            r.trial,
            fmt(r.valid_auc),
            fmt(r.test_auc),
            r.epochs_run,
            r.config.model.embedding_dim,
            widths,
            r.config.train.learning_rate,
            ops_label(&r.config.model.operations.set),
            r.error.as_ref().map_or(String::new(), |e| format!("  FAILED: {e}"))
        );
    }
    if let Some(s) = summary {
        println!(
            "best trial {} with valid AUC {:.4}{}; {} of {} trials failed",
            s.best_trial,
            s.best_valid_auc,
            s.best_test_auc.map_or(String::new(), |t| format!(", test AUC {t:.4}")),
            s.failed,
            s.trials
        );
    }
    Ok(())
}
