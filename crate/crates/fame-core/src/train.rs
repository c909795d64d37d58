//! Training orchestration: epoch loop, probe-driven weight updates, plateau
//! scheduler, early stopping, trajectory logging, and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Split};
use crate::error::{Error, Result};
use crate::loss::{ins_class_weights, total_loss};
use crate::metrics::{eddi_overall, fairness_report, FairnessReport, PredictionSet};
use crate::model::{Batch, FusionMode, FusionState};
use crate::optim::AdamW;
use crate::tape::{ClassWeights, Tape};

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: FusionMode,
    /// Disparity-loss coefficient.
    pub lambda: f64,
    /// Modality weight-update rate.
    pub gamma: f64,
    /// Per-epoch cap on each modality weight increment.
    pub clip: f64,
    /// L1 coefficient on gate activations.
    pub l1_alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub threshold: f64,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: FusionMode::Fame,
            lambda: 0.8,
            gamma: 0.5,
            clip: 0.05,
            l1_alpha: 0.01,
            lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            patience: 5,
            max_epochs: 50,
            plateau_factor: 0.5,
            plateau_patience: 2,
            min_lr: 1e-7,
            seed: 7,
            threshold: 0.5,
            proj_dim: 256,
            hidden_dim: 512,
            dropout: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.gamma < 0.0 {
            return Err(Error::config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if self.clip <= 0.0 {
            return Err(Error::config(format!("clip {} must be > 0", self.clip)));
        }
        if self.l1_alpha < 0.0 {
            return Err(Error::config(format!("l1_alpha {} must be >= 0", self.l1_alpha)));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("plateau_factor", self.plateau_factor),
            ("min_lr", self.min_lr),
        ] {
            if v <= 0.0 {
                return Err(Error::config(format!("{name} {v} must be > 0")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0".to_string()));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1".to_string()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.proj_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("proj_dim and hidden_dim must be >= 1".to_string()));
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One completed epoch of the trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub weights: Vec<f64>,
    pub gates: Vec<f64>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_eddi: f64,
}

/// Per-epoch record of effective modality weights and mean gate activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTrajectory {
    pub modality_names: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
}

impl WeightTrajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for name in &self.modality_names {
            write!(out, ",w_{name}").unwrap();
        }
        for name in &self.modality_names {
            write!(out, ",gate_{name}").unwrap();
        }
        out.push_str(",train_loss,val_loss,val_eddi\n");
        for row in &self.rows {
            write!(out, "{}", row.epoch).unwrap();
            for w in &row.weights {
                write!(out, ",{w}").unwrap();
            }
            for g in &row.gates {
                write!(out, ",{g}").unwrap();
            }
            writeln!(out, ",{},{},{}", row.train_loss, row.val_loss, row.val_eddi).unwrap();
        }
        out
    }
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation loss.
    pub best: FusionState,
    /// State after the last completed epoch.
    pub final_state: FusionState,
    pub trajectory: WeightTrajectory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub class_weights: ClassWeights,
    /// Tasks whose training split was single-class.
    pub degenerate_tasks: Vec<usize>,
}

fn eval_loss_and_eddi(
    state: &FusionState,
    batch: &Batch,
    weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let fwd = state.forward(&mut tape, batch, None)?;
    let parts = total_loss(
        &mut tape,
        fwd.logits,
        fwd.gate_activation,
        &batch.targets,
        &batch.attrs,
        weights,
        cfg.lambda,
        cfg.l1_alpha,
    )?;
    let probs = tape.sigmoid(fwd.logits);
    let pred = prediction_set_from_probs(
        tape.value(probs).clone(),
        batch,
        cfg.threshold,
        state.task_count,
    )?;
    let (eddi, _) = eddi_overall(&pred)?;
    Ok((parts.total_value, eddi))
}

fn prediction_set_from_probs(
    probs: crate::tensor::Tensor2,
    batch: &Batch,
    threshold: f64,
    task_count: usize,
) -> Result<PredictionSet> {
    let names = crate::cohort::task_names(task_count);
    let scores: Vec<Vec<f64>> = (0..task_count)
        .map(|t| (0..batch.len()).map(|i| probs.get(i, t)).collect())
        .collect();
    let truth: Vec<Vec<bool>> = (0..task_count)
        .map(|t| (0..batch.len()).map(|i| batch.targets.get(i, t) == 1.0).collect())
        .collect();
    PredictionSet::from_scores(names, scores, truth, batch.attrs.clone(), threshold)
}

/// Run the full training loop and return the best checkpoint, the final
/// state, and the per-epoch trajectory. Deterministic given (cohort, split,
/// config).
pub fn train(cohort: &Cohort, split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train_ids.is_empty() || split.val_ids.is_empty() {
        return Err(Error::input("split has an empty train or validation set".to_string()));
    }

    let mut state = FusionState::init(
        &cohort.schema.modalities,
        cfg.proj_dim,
        cfg.hidden_dim,
        cohort.schema.task_count,
        cfg.mode,
        cfg.dropout,
        cfg.seed,
    )?;

    let train_batch = Batch::from_cohort(cohort, &split.train_ids)?;
    let val_batch = Batch::from_cohort(cohort, &split.val_ids)?;
    let (class_weights, degenerate_tasks) = ins_class_weights(&train_batch.targets);

    let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut lr = cfg.lr;
    let mut ids = split.train_ids.clone();

    let mut best: Option<FusionState> = None;
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_without_improvement = 0usize;
    let mut plateau_counter = 0usize;
    let mut rows = Vec::new();

    let n_train = ids.len();
    for epoch in 1..=cfg.max_epochs {
        ids.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in ids.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_cohort(cohort, chunk)?;
            let mut tape = Tape::new();
            let fwd = state.forward(&mut tape, &batch, Some(&mut rng))?;
            let parts = total_loss(
                &mut tape,
                fwd.logits,
                fwd.gate_activation,
                &batch.targets,
                &batch.attrs,
                &class_weights,
                cfg.lambda,
                cfg.l1_alpha,
            )?;
            if !parts.total_value.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx + 1 });
            }
            epoch_loss += parts.total_value * chunk.len() as f64;

            let grads = tape.backward(parts.total)?;
            for (pref, node) in &fwd.param_nodes {
                state.param_mut(*pref).accumulate(&grads[*node]);
            }
            let optimizer = cfg.optimizer(lr);
            let refs = state.trainable_refs();
            // split borrows: step each parameter in a fixed order
            for r in refs {
                optimizer.step(&mut [state.param_mut(r)]);
            }
        }
        let train_loss = epoch_loss / n_train as f64;

        if cfg.mode.updates_weights() {
            let eddi = state.probe_eddi(&train_batch, cfg.threshold)?;
            state.update_weights(&eddi, cfg.gamma, cfg.clip)?;
        }

        let (val_loss, val_eddi) = eval_loss_and_eddi(&state, &val_batch, &class_weights, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        state.epoch = epoch;

        rows.push(TrajectoryRow {
            epoch,
            weights: state.effective_weights(),
            gates: state.gate_block_means(),
            train_loss,
            val_loss,
            val_eddi,
        });

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best = Some(state.clone());
            epochs_without_improvement = 0;
            plateau_counter = 0;
        } else {
            epochs_without_improvement += 1;
            plateau_counter += 1;
            if plateau_counter >= cfg.plateau_patience {
                lr = (lr * cfg.plateau_factor).max(cfg.min_lr);
                plateau_counter = 0;
            }
            if epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }

    let epochs_run = state.epoch;
    let trajectory = WeightTrajectory {
        modality_names: cohort.schema.modalities.iter().map(|m| m.name.clone()).collect(),
        rows,
    };
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        final_state: state,
        trajectory,
        best_epoch,
        best_val_loss,
        epochs_run,
        class_weights,
        degenerate_tasks,
    })
}

/// Forward a state over the given ids in evaluation mode and compute the full
/// fairness report at the given threshold.
pub fn evaluate(
    state: &FusionState,
    cohort: &Cohort,
    ids: &[String],
    threshold: f64,
) -> Result<FairnessReport> {
    let pred = export_predictions(state, cohort, ids, threshold)?;
    fairness_report(&pred)
}

/// Evaluation-mode predictions over the given ids as a `PredictionSet`.
pub fn export_predictions(
    state: &FusionState,
    cohort: &Cohort,
    ids: &[String],
    threshold: f64,
) -> Result<PredictionSet> {
    if ids.is_empty() {
        return Err(Error::input("no ids to evaluate".to_string()));
    }
    let probs = state.predict_probabilities(cohort, ids)?;
    let index = cohort.id_index();
    let names = cohort.task_names();
    let t = cohort.schema.task_count;
    let scores: Vec<Vec<f64>> =
        (0..t).map(|task| (0..ids.len()).map(|i| probs.get(i, task)).collect()).collect();
    let mut truth = vec![Vec::with_capacity(ids.len()); t];
    let mut attrs = Vec::with_capacity(ids.len());
    for id in ids {
        let &rec_idx = index
            .get(id.as_str())
            .ok_or_else(|| Error::input(format!("id '{id}' not in cohort")))?;
        let rec = &cohort.records[rec_idx];
        for (task, row) in truth.iter_mut().enumerate() {
            row.push(rec.labels[task] == 1);
        }
        attrs.push(rec.attrs);
    }
    PredictionSet::from_scores(names, scores, truth, attrs, threshold)
}

/// Write a checkpoint: the full state round-trips exactly through JSON.
pub fn save_checkpoint(path: impl AsRef<Path>, state: &FusionState) -> Result<()> {
    let json = serde_json::to_string(state)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FusionState> {
    let json = std::fs::read_to_string(path.as_ref()).map_err(|e| {
        Error::input(format!("cannot read checkpoint {}: {e}", path.as_ref().display()))
    })?;
    Ok(serde_json::from_str(&json)?)
}
