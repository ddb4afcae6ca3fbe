//! Loss construction, Adagrad and the epoch loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, TrainConfig};
use crate::data::{Batch, EncodedTable, batch_iterator};
use crate::error::{NonError, Result};
use crate::eval;
use crate::model::{Forward, Mode, NonModel, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Batch-mean binary cross entropy of `sigmoid(logit)` against `labels`,
/// with both log arguments clamped below at `eps`.
pub fn bce(tape: &mut Tape, logit: Var, labels: &[f64], eps: f64) -> Result<Var> {
    let n = tape.shape(logit).iter().product::<usize>();
    if n != labels.len() {
        return Err(NonError::Contract(format!("{n} logits for {} labels", labels.len())));
    }
    let y = tape.constant(Tensor::new(tape.shape(logit).to_vec(), labels.to_vec())?);
    let not_y = tape.affine(y, -1.0, 1.0);
    let p = tape.sigmoid(logit);
    let q = tape.affine(p, -1.0, 1.0);
    let log_p = tape.ln_clamped(p, eps);
    let log_q = tape.ln_clamped(q, eps);
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll);
    Ok(tape.affine(mean, -1.0, 0.0))
}

/// `Σ ‖W‖²` over every [`ParamKind::Weight`] parameter, or `None` if the
/// model has none.
pub fn l2_penalty(tape: &mut Tape, store: &ParamStore, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (p, v) in store.iter().zip(vars) {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let sq = tape.mul(*v, *v)?;
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bce: Var,
    pub aux: Vec<Var>,
    pub l2: Option<Var>,
}

/// `bce + Σ_i α_i ρ^epoch aux_i + γ Σ ‖W‖²`, with `epoch` counted from 0.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    vars: &[Var],
    forward: &Forward,
    labels: &[f64],
    cfg: &LossConfig,
    epoch: usize,
) -> Result<LossTerms> {
    let main = bce(tape, forward.logit, labels, cfg.log_clamp)?;
    let mut total = main;
    let mut aux = Vec::with_capacity(forward.aux_logits.len());
    for (i, z) in forward.aux_logits.iter().enumerate() {
        let l = bce(tape, *z, labels, cfg.log_clamp)?;
        let alpha = cfg.alpha_at(i, epoch);
        if alpha != 0.0 {
            let scaled = tape.affine(l, alpha, 0.0);
            total = tape.add(total, scaled)?;
        }
        aux.push(l);
    }
    let l2 = if cfg.l2 != 0.0 {
        let l2 = l2_penalty(tape, store, vars)?;
        if let Some(l2) = l2 {
            let scaled = tape.affine(l2, cfg.l2, 0.0);
            total = tape.add(total, scaled)?;
        }
        l2
    } else {
        None
    };
    Ok(LossTerms {
        total,
        bce: main,
        aux,
        l2,
    })
}

/// Per-parameter Adagrad with zero-initialized accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub eps: f64,
    accumulators: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new(store: &ParamStore, learning_rate: f64, eps: f64) -> Self {
        Adagrad {
            learning_rate,
            eps,
            accumulators: store.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    /// `acc += g²; θ −= η g / (√acc + ε)`. Parameters with no gradient and
    /// zero gradient entries are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&[f64]>]) -> Result<()> {
        if grads.len() != self.accumulators.len() || store.len() != grads.len() {
            return Err(NonError::Contract("gradient list does not match parameters".into()));
        }
        let (lr, eps) = (self.learning_rate, self.eps);
        for ((p, acc), g) in store.iter_mut().zip(&mut self.accumulators).zip(grads) {
            let Some(g) = g else { continue };
            for ((theta, a), g) in p.tensor.values_mut().iter_mut().zip(acc.iter_mut()).zip(*g) {
                if *g != 0.0 {
                    *a += g * g;
                    *theta -= lr * g / (a.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Steps with the gradients recorded on `tape` for `vars`.
    pub fn step_from_tape(&mut self, store: &mut ParamStore, tape: &Tape, vars: &[Var]) -> Result<()> {
        let grads: Vec<Option<&[f64]>> = vars.iter().map(|v| tape.grad(*v)).collect();
        self.step(store, &grads)
    }
}

/// Metrics of one training epoch, numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bce: f64,
    pub valid_auc: f64,
    pub valid_loss: f64,
    /// Base auxiliary coefficient in effect, `α ρ^(epoch-1)`.
    pub alpha: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    pub stopped_early: bool,
}

impl FitReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> FitReport {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }
}

/// Patience-based stopping on a score that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`. Returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auc: f64,
    pub loss: f64,
    pub rows: usize,
}

/// Inference-mode probabilities for every row, computed in parallel chunks.
pub fn predict(model: &NonModel, table: &EncodedTable, batch_size: usize) -> Result<Vec<f64>> {
    let starts: Vec<usize> = (0..table.len()).step_by(batch_size.max(1)).collect();
    let chunks: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + batch_size).min(table.len())).collect();
            model.predict_proba(&table.gather(&idx))
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// AUC and mean cross entropy with auxiliary heads off.
pub fn evaluate(model: &NonModel, table: &EncodedTable, batch_size: usize) -> Result<EvalMetrics> {
    let probs = predict(model, table, batch_size)?;
    Ok(EvalMetrics {
        auc: eval::auc(&probs, &table.labels)?,
        loss: eval::log_loss(&probs, &table.labels, LossConfig::default().log_clamp),
        rows: table.len(),
    })
}

/// One forward/backward pass on `batch`; returns the tape, parameter vars
/// and loss terms.
pub fn loss_and_gradients(
    model: &NonModel,
    batch: &Batch,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<(Tape, Vec<Var>, LossTerms)> {
    let mut tape = Tape::new();
    let vars = model.params().register(&mut tape);
    let fwd = model.forward(&mut tape, &vars, batch, Mode::Train)?;
    let terms = total_loss(&mut tape, model.params(), &vars, &fwd, &batch.labels, cfg, epoch)?;
    tape.backward(terms.total)?;
    Ok((tape, vars, terms))
}

/// L2 norm of the total-loss gradient at the first hidden layer weight of
/// the across-field DNN.
pub fn first_hidden_grad_norm(model: &NonModel, batch: &Batch, cfg: &LossConfig) -> Result<f64> {
    let (tape, vars, _) = loss_and_gradients(model, batch, cfg, 0)?;
    let w = model.deep_params().layers[0].weight;
    let g = tape.grad(vars[w.index()]).unwrap_or(&[]);
    Ok(g.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Trains `model` in place. Every epoch shuffles `train`, steps Adagrad on
/// each mini-batch with auxiliary heads on, then scores `valid` with them
/// off. The parameters of the best validation epoch are restored at the
/// end. `on_epoch` sees each epoch's metrics as they are produced.
pub fn fit(
    model: &mut NonModel,
    train: &EncodedTable,
    valid: &EncodedTable,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(NonError::Data("training and validation sets must be non-empty".into()));
    }
    let mut opt = Adagrad::new(model.params(), cfg.learning_rate, cfg.adagrad_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut bce_sum = 0.0;
        let shuffle_seed: u64 = rng.random();
        for (b, batch) in batch_iterator(train, cfg.batch_size, true, shuffle_seed)?.enumerate() {
            let (tape, vars, terms) = loss_and_gradients(model, &batch, &cfg.loss, epoch)?;
            let loss = tape.scalar(terms.total);
            if !loss.is_finite() {
                return Err(NonError::NonFiniteLoss { epoch: epoch + 1, batch: b });
            }
            let rows = batch.size() as f64;
            loss_sum += loss * rows;
            bce_sum += tape.scalar(terms.bce) * rows;
            opt.step_from_tape(model.params_mut(), &tape, &vars)?;
        }
        let valid_metrics = evaluate(model, valid, cfg.batch_size)?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_bce: bce_sum / train.len() as f64,
            valid_auc: valid_metrics.auc,
            valid_loss: valid_metrics.loss,
            alpha: cfg.loss.alpha_at(0, epoch),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics);
        if stopper.observe(epoch + 1, metrics.valid_auc) {
            best_params = model.params().clone();
        }
        epochs.push(metrics);
        if stopper.should_stop() {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    *model.params_mut() = best_params;
    let (best_epoch, best_valid_auc) = stopper.best();
    Ok(FitReport {
        epochs,
        best_epoch,
        best_valid_auc,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NonConfig;
    use crate::data::FieldKind;
    use crate::model::FieldInfo;

    fn scalar_bce(logits: &[f64], labels: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
        let l = bce(&mut tape, z, labels, 1e-12).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn bce_cases() {
        assert!((scalar_bce(&[0.0], &[1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!(scalar_bce(&[40.0], &[1.0]) < 1e-15);
        let a = scalar_bce(&[1.5], &[1.0]);
        let b = scalar_bce(&[-1.5], &[0.0]);
        assert!((scalar_bce(&[1.5, -1.5], &[1.0, 0.0]) - (a + b) / 2.0).abs() < 1e-15);
        // clamp keeps a confidently wrong prediction finite
        assert!((scalar_bce(&[-1000.0], &[1.0]) + 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn adagrad_first_step_and_zero_grad() {
        let mut store_model = tiny_model(NonConfig::default());
        let store = store_model.params_mut();
        let mut opt = Adagrad::new(store, 0.1, 1e-10);
        let before: Vec<Vec<f64>> = store.iter().map(|p| p.tensor.values().to_vec()).collect();
        let grads: Vec<Vec<f64>> = store
            .iter()
            .enumerate()
            .map(|(i, p)| vec![if i == 0 { 0.5 } else { 0.0 }; p.tensor.len()])
            .collect();
        let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        opt.step(store, &refs).unwrap();
        for (i, (p, b)) in store.iter().zip(&before).enumerate() {
            for (x, y) in p.tensor.values().iter().zip(b) {
                if i == 0 {
                    assert!((y - x - 0.1 * 0.5 / (0.5 + 1e-10)).abs() < 1e-15);
                } else {
                    assert_eq!(x, y);
                }
            }
        }
        assert!(opt.accumulators()[1].iter().all(|a| *a == 0.0));
    }

    fn tiny_model(mut c: NonConfig) -> NonModel {
        c.embedding_dim = 3;
        c.operations.dnn_hidden = vec![4, 3];
        c.fusion.hidden = vec![4];
        let fields = vec![
            FieldInfo {
                name: "a".into(),
                kind: FieldKind::Categorical,
                vocab_size: 4,
            },
            FieldInfo {
                name: "x".into(),
                kind: FieldKind::Numerical,
                vocab_size: 0,
            },
        ];
        NonModel::new(c, fields, "h", 2).unwrap()
    }

    fn tiny_batch() -> Batch {
        let mut t = EncodedTable::empty(1, 1);
        t.push_row(&[1], &[0.3], 1.0);
        t.push_row(&[2], &[-1.0], 0.0);
        t.push_row(&[3], &[0.7], 1.0);
        t.push_row(&[0], &[0.0], 0.0);
        Batch(t)
    }

    #[test]
    fn total_loss_reduces_to_bce() {
        let model = tiny_model(NonConfig::default());
        let cfg = LossConfig {
            alpha: 0.0,
            l2: 0.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let vars = model.params().register(&mut tape);
        let batch = tiny_batch();
        let fwd = model.forward(&mut tape, &vars, &batch, Mode::Train).unwrap();
        let t = total_loss(&mut tape, model.params(), &vars, &fwd, &batch.labels, &cfg, 0).unwrap();
        assert_eq!(tape.scalar(t.total), tape.scalar(t.bce));
        assert_eq!(t.aux.len(), 3);
    }

    #[test]
    fn l2_of_zero_weights_is_zero() {
        let mut model = tiny_model(NonConfig::default());
        for p in model.params_mut().iter_mut() {
            if p.kind == ParamKind::Weight {
                p.tensor.values_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let vars = model.params().register(&mut tape);
        let l2 = l2_penalty(&mut tape, model.params(), &vars).unwrap().unwrap();
        assert_eq!(tape.scalar(l2), 0.0);
    }

    #[test]
    fn alpha_decay_schedule() {
        let cfg = LossConfig {
            alpha: 0.5,
            alpha_decay: 0.9,
            ..LossConfig::default()
        };
        assert!((cfg.alpha_at(0, 2) - 0.81 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut model = tiny_model(NonConfig::default());
        let batch = tiny_batch();
        let cfg = LossConfig::default();
        let (tape, vars, terms) = loss_and_gradients(&model, &batch, &cfg, 0).unwrap();
        let before = tape.scalar(terms.total);
        let mut opt = Adagrad::new(model.params(), 1e-3, 1e-10);
        opt.step_from_tape(model.params_mut(), &tape, &vars).unwrap();
        let (tape, _, terms) = loss_and_gradients(&model, &batch, &cfg, 0).unwrap();
        assert!(tape.scalar(terms.total) < before);
    }

    #[test]
    fn stopping_rule_on_worsening_scores() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (epoch, auc) in [(1, 0.8), (2, 0.7), (3, 0.6), (4, 0.5)] {
            s.observe(epoch, auc);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(s.best(), (1, 0.8));
    }
}
