//! SGD with momentum, linear warmup, and task-at-a-time training.

mod checkpoint;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::TaskDataset;
use crate::numcore::{keyed_rng, Parameter};
use crate::sakt::{DropoutKey, SaktConfig, SaktModel};
use crate::seqgen::{self, assign_folds, FoldAssignment, ProblemRegistry, TrainingInstance};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ProvenanceEntry, FORMAT_VERSION, MAGIC,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Restart the warmup counter at every task instead of continuing the global step.
    pub per_task_warmup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 0.001,
            lr_peak: 0.002,
            warmup_steps: 50,
            momentum: 0.99,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            shuffle: true,
            per_task_warmup: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
            return Err(Error::Parameter(format!(
                "need 0 < lr_start ({}) <= lr_peak ({})",
                self.lr_start, self.lr_peak
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum {} not in [0,1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear ramp from `lr_start` at step 0 to `lr_peak` at `warmup_steps`, flat afterwards.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        return cfg.lr_peak;
    }
    let frac = step as f64 / cfg.warmup_steps as f64;
    cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
}

/// `v <- mu*v + g; theta <- theta - lr*v`, then clears `g`.
///
/// All gradients are checked before any parameter moves.
pub fn sgd_momentum_step<'a>(
    params: impl IntoIterator<Item = (String, &'a mut Parameter)>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let params: Vec<(String, &mut Parameter)> = params.into_iter().collect();
    for (name, p) in &params {
        if p.grad.data().iter().any(|g| !g.is_finite()) {
            let max_abs = p
                .grad
                .data()
                .iter()
                .filter(|g| g.is_finite())
                .fold(0.0f64, |m, g| m.max(g.abs()));
            return Err(Error::NonFiniteGradient {
                name: name.clone(),
                max_abs: if max_abs == 0.0 { f64::INFINITY } else { max_abs },
            });
        }
    }
    for (_, p) in params {
        let Parameter {
            value,
            grad,
            velocity,
        } = p;
        for ((theta, v), g) in value
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut())
            .zip(grad.data_mut())
        {
            *v = momentum * *v + *g;
            *theta -= lr * *v;
            *g = 0.0;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepLog>,
    pub epoch_losses: Vec<f64>,
    pub input_digest: String,
    pub input_records: usize,
    /// Training instances with at least one scored position.
    pub instances: usize,
}

impl TrainHistory {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.lr).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "epoch", "loss", "lr"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                format!("{:.9}", s.loss),
                format!("{:.9}", s.lr),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Which fold of each task is held out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldSpec {
    pub k: usize,
    pub test_fold: usize,
    pub seed: u64,
}

impl Default for FoldSpec {
    fn default() -> Self {
        FoldSpec {
            k: 5,
            test_fold: 0,
            seed: 0,
        }
    }
}

/// Train/test user lists for one task under a fold spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSplit {
    pub assignment: FoldAssignment,
    pub train_users: Vec<String>,
    pub test_users: Vec<String>,
}

impl FoldSpec {
    pub fn split(&self, ds: &TaskDataset) -> Result<TaskSplit> {
        if self.test_fold >= self.k {
            return Err(Error::Parameter(format!(
                "test fold {} out of range for k={}",
                self.test_fold, self.k
            )));
        }
        let assignment = assign_folds(&ds.user_ids(), self.k, self.seed)?;
        let (test, train): (Vec<_>, Vec<_>) = assignment
            .folds
            .iter()
            .map(|(u, f)| (u.clone(), *f))
            .partition(|(_, f)| *f == self.test_fold);
        Ok(TaskSplit {
            train_users: train.into_iter().map(|(u, _)| u).collect(),
            test_users: test.into_iter().map(|(u, _)| u).collect(),
            assignment,
        })
    }
}

/// Hex SHA-256 over the sorted per-record digests of `users`' histories.
pub fn records_digest<'a>(parts: impl IntoIterator<Item = (&'a TaskDataset, &'a [String])>) -> (String, usize) {
    let mut digests = BTreeSet::new();
    for (ds, users) in parts {
        for u in users {
            if let Some(recs) = ds.users.get(u) {
                digests.extend(recs.iter().map(|r| r.digest()));
            }
        }
    }
    let mut h = Sha256::new();
    for d in &digests {
        h.update(d);
    }
    (hex::encode(h.finalize()), digests.len())
}

pub fn config_hash(model: &SaktConfig, train: &TrainConfig) -> String {
    let value = serde_json::json!({ "model": model, "train": train });
    let digest = Sha256::digest(value.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// Starting point of a training run.
#[derive(Clone, Debug)]
pub enum ModelSource {
    Fresh { config: SaktConfig, seed: u64 },
    Resume(Checkpoint),
}

/// One dataset's contribution to a training run.
pub struct TrainPart<'a> {
    pub dataset: &'a TaskDataset,
    pub train_users: &'a [String],
}

/// A trained model together with its handoff checkpoint metadata.
pub struct TrainOutcome {
    pub model: SaktModel,
    pub registry: ProblemRegistry,
    pub global_step: u64,
    pub provenance: Vec<ProvenanceEntry>,
    pub history: TrainHistory,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            self.registry.clone(),
            self.global_step,
            self.provenance.clone(),
        )
    }
}

/// Trains on the pooled training users of `parts`, recording `label` in provenance.
///
/// The registry is extended with the training users' problems (in part
/// order) before encoding; momentum starts from zero.
pub fn train_parts(
    source: ModelSource,
    parts: &[TrainPart<'_>],
    label: &str,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut registry, mut global_step, mut provenance) = match source {
        ModelSource::Fresh { config, seed } => {
            let model = SaktModel::init(&config, seed)?;
            let registry = ProblemRegistry::new(config.v_cap);
            (model, registry, 0, Vec::new())
        }
        ModelSource::Resume(ck) => {
            let model = ck.to_model()?;
            (model, ck.registry, ck.global_step, ck.provenance)
        }
    };
    if registry.v_cap() != model.config.v_cap {
        return Err(Error::Parameter("registry stride differs from model stride".into()));
    }
    model.reset_velocity();

    for part in parts {
        let ds = part.dataset;
        let problems = part
            .train_users
            .iter()
            .filter_map(|u| ds.users.get(u))
            .flatten()
            .map(|r| r.problem_id.as_str());
        registry.extend_with(problems)?;
    }

    let seq_len = model.config.max_seq_len;
    let v_cap = model.config.v_cap;
    let mut allowed = BTreeSet::new();
    let mut pool: Vec<TrainingInstance> = Vec::new();
    for part in parts {
        for u in part.train_users {
            allowed.insert(u.as_str());
            if let Some(recs) = part.dataset.users.get(u) {
                pool.extend(
                    seqgen::encode_user(recs, &registry, seq_len)
                        .iter()
                        .map(|s| seqgen::make_instances(s, v_cap))
                        .filter(|inst| inst.num_valid() > 0),
                );
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyTask(label.to_string()));
    }
    let (input_digest, input_records) =
        records_digest(parts.iter().map(|p| (p.dataset, p.train_users)));

    let mut history = TrainHistory {
        input_digest: input_digest.clone(),
        input_records,
        instances: pool.len(),
        ..TrainHistory::default()
    };
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut local_step = 0u64;
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut keyed_rng(cfg.seed, &[0x5417, epoch as u64]));
        }
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingInstance> = chunk.iter().map(|&i| pool[i].clone()).collect();
            if let Some(bad) = batch.iter().find(|b| !allowed.contains(b.user_id.as_str())) {
                return Err(Error::Isolation {
                    stage: 0,
                    detail: format!("user `{}` is not in the training folds", bad.user_id),
                });
            }
            let schedule_step = if cfg.per_task_warmup { local_step } else { global_step };
            let lr = lr_at_step(schedule_step, cfg);
            let loss = model.loss(
                &batch,
                Some(DropoutKey {
                    seed: cfg.seed,
                    step: global_step,
                }),
            )?;
            sgd_momentum_step(model.params_mut(), lr, cfg.momentum)?;
            history.steps.push(StepLog {
                step: global_step,
                epoch,
                loss,
                lr,
            });
            epoch_total += loss;
            epoch_batches += 1;
            global_step += 1;
            local_step += 1;
        }
        history.epoch_losses.push(epoch_total / epoch_batches as f64);
    }

    provenance.push(ProvenanceEntry {
        task: label.to_string(),
        config_hash: config_hash(&model.config, cfg),
        steps: local_step,
        input_digest,
        input_records,
    });
    Ok(TrainOutcome {
        model,
        registry,
        global_step,
        provenance,
        history,
    })
}

/// Trains on one task's training folds.
pub fn train_task(
    source: ModelSource,
    ds: &TaskDataset,
    folds: &FoldSpec,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    let split = folds.split(ds)?;
    let outcome = train_parts(
        source,
        &[TrainPart {
            dataset: ds,
            train_users: &split.train_users,
        }],
        &ds.school_id,
        cfg,
    )?;
    Ok((outcome.checkpoint(), outcome.history))
}
