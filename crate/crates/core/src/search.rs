//! Random hyperparameter search, including the operation-set dimension.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{NonConfig, Operation, TrainConfig};
use crate::data::EncodedTable;
use crate::error::{NonError, Result};
use crate::model::{FieldInfo, NonModel};
use crate::training::{self, FitReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
    pub embedding_dims: Vec<usize>,
    pub dnn_widths: Vec<usize>,
    pub dnn_max_depth: usize,
    /// Field-wise hidden widths as multiples of `d`.
    pub field_wise_multipliers: Vec<f64>,
    /// Upper bound on field-wise depth, counting the projection back to `d`.
    pub field_wise_max_depth: usize,
    /// When false every trial runs without field-wise networks.
    pub field_wise: bool,
    pub alpha: (f64, f64),
    pub l2: (f64, f64),
    /// Restricts every trial to this operation set.
    pub fixed_operations: Option<Vec<Operation>>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: (0.05, 0.5),
            embedding_dims: vec![8, 16, 32, 64, 128],
            dnn_widths: vec![64, 128, 256, 512, 1024, 2048],
            dnn_max_depth: 4,
            field_wise_multipliers: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            field_wise_max_depth: 4,
            field_wise: true,
            alpha: (0.1, 1.0),
            l2: (1e-5, 1e-4),
            fixed_operations: None,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), positive: bool) -> Result<()> {
    if !(lo <= hi && lo.is_finite() && hi.is_finite()) || (positive && lo <= 0.0) || lo < 0.0 {
        return Err(NonError::Config(format!("search range {name} = [{lo}, {hi}] is invalid")));
    }
    Ok(())
}

impl SearchSpace {
    pub fn validate(&mut self) -> Result<()> {
        check_range("learning_rate", self.learning_rate, true)?;
        check_range("alpha", self.alpha, false)?;
        check_range("l2", self.l2, false)?;
        if self.embedding_dims.is_empty() || self.embedding_dims.contains(&0) {
            return Err(NonError::Config("embedding_dims must be non-empty and positive".into()));
        }
        if self.dnn_widths.is_empty() || self.dnn_widths.contains(&0) || self.dnn_max_depth == 0 {
            return Err(NonError::Config("DNN widths and depth must be non-empty and positive".into()));
        }
        if self.field_wise
            && (self.field_wise_max_depth == 0
                || self.field_wise_multipliers.is_empty()
                || self.field_wise_multipliers.iter().any(|m| *m <= 0.0))
        {
            return Err(NonError::Config("field-wise multipliers and depth must be positive".into()));
        }
        if let Some(ops) = &mut self.fixed_operations {
            if !ops.contains(&Operation::Dnn) {
                ops.push(Operation::Dnn);
            }
            ops.sort();
            ops.dedup();
        }
        Ok(())
    }
}

/// A model and training configuration drawn from a [`SearchSpace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub model: NonConfig,
    pub train: TrainConfig,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..hi) }
}

/// Draws one configuration. Settings the space does not cover (refinement,
/// attention shape, fusion, aux switches, epochs, batch size) come from
/// `base`.
pub fn sample_config(space: &SearchSpace, base: &TrialConfig, rng: &mut ChaCha8Rng) -> TrialConfig {
    let mut model = base.model.clone();
    let mut train = base.train.clone();
    let (lo, hi) = space.learning_rate;
    train.learning_rate = if lo == hi { lo } else { rng.random_range(lo.ln()..hi.ln()).exp().clamp(lo, hi) };
    model.embedding_dim = *space.embedding_dims.choose(rng).expect("validated");
    let depth = rng.random_range(1..=space.dnn_max_depth);
    model.operations.dnn_hidden = (0..depth)
        .map(|_| *space.dnn_widths.choose(rng).expect("validated"))
        .collect();
    if space.field_wise {
        let depth = rng.random_range(1..=space.field_wise_max_depth);
        model.field_wise.enabled = true;
        model.field_wise.hidden = (1..depth)
            .map(|_| *space.field_wise_multipliers.choose(rng).expect("validated"))
            .collect();
        model.field_wise.groups.clear();
    } else {
        model.field_wise = crate::config::FieldWiseConfig::disabled();
    }
    train.loss.alpha = uniform(rng, space.alpha);
    train.loss.l2 = uniform(rng, space.l2);
    model.operations.set = match &space.fixed_operations {
        Some(ops) => ops.clone(),
        None => Operation::combinations()
            .choose(rng)
            .expect("seven combinations")
            .clone(),
    };
    TrialConfig { model, train }
}

/// Seed of trial `id` under `master`.
pub fn trial_seed(master: u64, id: usize) -> u64 {
    mix_seed(master, id as u64)
}

/// Derives an independent stream seed from `master` with one SplitMix64
/// finalizer step.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub config: TrialConfig,
    pub valid_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub num_parameters: usize,
    pub seconds: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn without_timing(&self) -> TrialRecord {
        TrialRecord {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub trials: usize,
    pub failed: usize,
    pub best_trial: usize,
    pub best_valid_auc: f64,
    pub best_test_auc: Option<f64>,
}

/// One line of a search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum SearchLine {
    Trial(Box<TrialRecord>),
    Summary(SearchSummary),
}

/// Encoded splits shared read-only by every trial.
#[derive(Clone, Copy, Debug)]
pub struct SearchData<'a> {
    pub fields: &'a [FieldInfo],
    pub schema_hash: &'a str,
    pub train: &'a EncodedTable,
    pub valid: &'a EncodedTable,
    pub test: Option<&'a EncodedTable>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Ordered by trial id.
    pub records: Vec<TrialRecord>,
    pub summary: SearchSummary,
    pub best_model: NonModel,
}

impl SearchOutcome {
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let lines = self
            .records
            .iter()
            .map(|r| SearchLine::Trial(Box::new(r.clone())))
            .chain(std::iter::once(SearchLine::Summary(self.summary.clone())));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_json_lines(text: &str) -> Result<Vec<SearchLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| NonError::Row { line: i + 1, message: e.to_string() }))
        .collect()
}

fn run_trial(data: &SearchData<'_>, config: &TrialConfig, seed: u64) -> Result<(FitReport, Option<f64>, NonModel)> {
    let mut model = NonModel::new(config.model.clone(), data.fields.to_vec(), data.schema_hash, seed)?;
    let report = training::fit(&mut model, data.train, data.valid, &config.train, seed, &mut |_| {})?;
    let test_auc = match data.test {
        Some(t) => Some(training::evaluate(&model, t, config.train.batch_size)?.auc),
        None => None,
    };
    Ok((report, test_auc, model))
}

/// Runs `n_trials` independent trials on up to `workers` threads. Each trial
/// samples its configuration and initializes its model from
/// [`trial_seed`]`(master_seed, id)`, so its record does not depend on
/// scheduling. The best trial maximizes validation AUC, with ties going to
/// the lower trial id. Failed trials are recorded; the search fails only if
/// every trial does.
pub fn run_search(
    space: &SearchSpace,
    base: &TrialConfig,
    data: SearchData<'_>,
    n_trials: usize,
    workers: usize,
    master_seed: u64,
    on_trial: &(dyn Fn(&TrialRecord) + Sync),
) -> Result<SearchOutcome> {
    let mut space = space.clone();
    space.validate()?;
    if n_trials == 0 {
        return Err(NonError::Config("n_trials must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| NonError::Config(format!("cannot start search workers: {e}")))?;
    let best: Mutex<Option<(f64, usize, NonModel)>> = Mutex::new(None);
    let records: Vec<TrialRecord> = pool.install(|| {
        (0..n_trials)
            .into_par_iter()
            .map(|id| {
                let seed = trial_seed(master_seed, id);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let config = sample_config(&space, base, &mut rng);
                let started = Instant::now();
                let outcome = run_trial(&data, &config, seed);
                let seconds = started.elapsed().as_secs_f64();
                let record = match outcome {
                    Ok((report, test_auc, model)) => {
                        let v = report.best_valid_auc;
                        let mut guard = best.lock().expect("best-model lock");
                        let better = match &*guard {
                            None => true,
                            Some((bv, bid, _)) => v > *bv || (v == *bv && id < *bid),
                        };
                        let num_parameters = model.num_parameters();
                        if better {
                            *guard = Some((v, id, model));
                        }
                        drop(guard);
                        TrialRecord {
                            trial: id,
                            seed,
                            config,
                            valid_auc: Some(v),
                            test_auc,
                            epochs_run: report.epochs_run(),
                            best_epoch: report.best_epoch,
                            num_parameters,
                            seconds,
                            error: None,
                        }
                    }
                    Err(e) => TrialRecord {
                        trial: id,
                        seed,
                        config,
                        valid_auc: None,
                        test_auc: None,
                        epochs_run: 0,
                        best_epoch: 0,
                        num_parameters: 0,
                        seconds,
                        error: Some(e.to_string()),
                    },
                };
                on_trial(&record);
                record
            })
            .collect()
    });

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let Some((best_valid_auc, best_trial, best_model)) = best.into_inner().expect("best-model lock") else {
        let mut modes: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &records {
            *modes.entry(r.error.as_deref().unwrap_or("")).or_default() += 1;
        }
        let summary = modes
            .iter()
            .map(|(m, n)| format!("{n}× {m}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(NonError::SearchFailed {
            trials: n_trials,
            summary,
        });
    };
    let summary = SearchSummary {
        trials: n_trials,
        failed,
        best_trial,
        best_valid_auc,
        best_test_auc: records[best_trial].test_auc,
    };
    Ok(SearchOutcome {
        records,
        summary,
        best_model,
    })
}
