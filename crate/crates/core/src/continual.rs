//! Experimental protocols: sequential scenarios, disjoint and joint
//! baselines, pairwise ablations and forgetting summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TaskDataset;
use crate::metrics::{evaluate, EvalReport};
use crate::sakt::{SaktConfig, SaktModel};
use crate::seqgen::ProblemRegistry;
use crate::train::{
    records_digest, train_parts, Checkpoint, FoldSpec, ModelSource, ProvenanceEntry, TaskSplit,
    TrainConfig, TrainHistory, TrainPart,
};

/// Settings shared by every protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub model: SaktConfig,
    pub train: TrainConfig,
    pub folds: FoldSpec,
    /// Seed for fresh model initialisation.
    pub init_seed: u64,
    /// Repeat the protocol with every fold held out in turn and average the reports.
    pub average_folds: bool,
    /// Keep a checkpoint per stage in scenario results.
    pub keep_checkpoints: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            model: SaktConfig::default(),
            train: TrainConfig::default(),
            folds: FoldSpec::default(),
            init_seed: 0,
            average_folds: false,
            keep_checkpoints: true,
        }
    }
}

impl ProtocolConfig {
    fn fresh(&self) -> ModelSource {
        ModelSource::Fresh {
            config: self.model.clone(),
            seed: self.init_seed,
        }
    }

    fn fold_runs(&self) -> Vec<FoldSpec> {
        if self.average_folds {
            (0..self.folds.k)
                .map(|f| FoldSpec {
                    test_fold: f,
                    ..self.folds.clone()
                })
                .collect()
        } else {
            vec![self.folds.clone()]
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub tasks: Vec<String>,
    /// Per-task training overrides; tasks not listed use the protocol's config.
    #[serde(default)]
    pub overrides: BTreeMap<String, TrainConfig>,
}

impl ScenarioSpec {
    pub fn new(tasks: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ScenarioSpec {
            tasks: tasks.into_iter().map(Into::into).collect(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Parameter("scenario needs at least one task".into()));
        }
        distinct(&self.tasks)
    }
}

fn distinct(tasks: &[String]) -> Result<()> {
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].contains(t) {
            return Err(Error::Parameter(format!("task `{t}` listed twice")));
        }
    }
    Ok(())
}

fn lookup<'a>(
    datasets: &'a BTreeMap<String, TaskDataset>,
    tasks: &[String],
) -> Result<Vec<&'a TaskDataset>> {
    let missing: Vec<String> = tasks
        .iter()
        .filter(|t| !datasets.contains_key(*t))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTask(missing));
    }
    Ok(tasks.iter().map(|t| &datasets[t]).collect())
}

/// One cell of a result matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// 1-based stage for scenarios; 1 for baselines.
    pub stage: usize,
    /// Tasks trained so far, joined with `>`.
    pub trained_through: String,
    pub task: String,
    pub report: EvalReport,
}

/// Record-level evidence that a stage trained on exactly its task's training folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationCheck {
    pub stage: usize,
    pub task: String,
    pub expected_digest: String,
    pub observed_digest: String,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub tasks: Vec<String>,
    /// Lower-triangular, ordered by stage then task.
    pub reports: Vec<CellReport>,
    #[serde(skip)]
    pub checkpoints: Vec<Checkpoint>,
    pub provenance: Vec<ProvenanceEntry>,
    pub histories: Vec<TrainHistory>,
    pub isolation: Vec<IsolationCheck>,
    /// Held-out folds the reports were computed on.
    pub test_folds: Vec<usize>,
}

impl ScenarioResult {
    pub fn get(&self, stage: usize, task: &str) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|c| c.stage == stage && c.task == task)
            .map(|c| &c.report)
    }

    pub fn to_csv(&self) -> Result<String> {
        cells_to_csv(&self.reports)
    }
}

/// CSV with a leading `stage` column followed by [`EvalReport::CSV_HEADER`].
pub fn cells_to_csv(cells: &[CellReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["stage"];
    header.extend(EvalReport::CSV_HEADER);
    w.write_record(&header)?;
    for c in cells {
        let mut row = vec![c.stage.to_string()];
        row.extend(c.report.csv_row(&c.task, &c.trained_through));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Digest of every record whose user is not in the held-out fold, computed
/// straight from the fold assignment rather than from the trainer's user list.
fn expected_training_digest(ds: &TaskDataset, split: &TaskSplit, test_fold: usize) -> (String, usize) {
    let users: Vec<String> = ds
        .users
        .keys()
        .filter(|u| split.assignment.fold_of(u) != Some(test_fold))
        .cloned()
        .collect();
    records_digest([(ds, users.as_slice())])
}

fn check_isolation(
    stage: usize,
    ds: &TaskDataset,
    split: &TaskSplit,
    folds: &FoldSpec,
    history: &TrainHistory,
) -> Result<IsolationCheck> {
    let (expected, records) = expected_training_digest(ds, split, folds.test_fold);
    if expected != history.input_digest || records != history.input_records {
        return Err(Error::Isolation {
            stage,
            detail: format!(
                "task `{}` trained on {} records ({}), expected {} ({})",
                ds.school_id, history.input_records, history.input_digest, records, expected
            ),
        });
    }
    if split.test_users.iter().any(|u| split.train_users.contains(u)) {
        return Err(Error::Isolation {
            stage,
            detail: format!("task `{}` has users in both train and test folds", ds.school_id),
        });
    }
    Ok(IsolationCheck {
        stage,
        task: ds.school_id.clone(),
        expected_digest: expected,
        observed_digest: history.input_digest.clone(),
        records,
    })
}

fn split_all(data: &[&TaskDataset], folds: &FoldSpec) -> Result<Vec<TaskSplit>> {
    data.iter()
        .enumerate()
        .map(|(i, ds)| folds.split(ds).map_err(|e| e.at_stage(i + 1, &ds.school_id)))
        .collect()
}

fn eval_at(
    stage: usize,
    model: &SaktModel,
    registry: &ProblemRegistry,
    ds: &TaskDataset,
    split: &TaskSplit,
) -> Result<EvalReport> {
    evaluate(model, registry, ds, &split.test_users).map_err(|e| e.at_stage(stage, &ds.school_id))
}

fn scenario_one_fold(
    spec: &ScenarioSpec,
    data: &[&TaskDataset],
    cfg: &ProtocolConfig,
    folds: &FoldSpec,
) -> Result<ScenarioResult> {
    let splits = split_all(data, folds)?;
    let mut result = ScenarioResult {
        tasks: spec.tasks.clone(),
        reports: Vec::new(),
        checkpoints: Vec::new(),
        provenance: Vec::new(),
        histories: Vec::new(),
        isolation: Vec::new(),
        test_folds: vec![folds.test_fold],
    };
    let mut source = cfg.fresh();
    for (i, (ds, split)) in data.iter().zip(&splits).enumerate() {
        let stage = i + 1;
        let task = &spec.tasks[i];
        let train_cfg = spec.overrides.get(task).unwrap_or(&cfg.train);
        let outcome = train_parts(
            source,
            &[TrainPart {
                dataset: ds,
                train_users: &split.train_users,
            }],
            task,
            train_cfg,
        )
        .map_err(|e| e.at_stage(stage, task))?;
        result
            .isolation
            .push(check_isolation(stage, ds, split, folds, &outcome.history)?);
        let trained_through = spec.tasks[..stage].join(">");
        for j in 0..stage {
            let report = eval_at(stage, &outcome.model, &outcome.registry, data[j], &splits[j])?;
            result.reports.push(CellReport {
                stage,
                trained_through: trained_through.clone(),
                task: spec.tasks[j].clone(),
                report,
            });
        }
        let ckpt = outcome.checkpoint();
        result.provenance = outcome.provenance;
        result.histories.push(outcome.history);
        if cfg.keep_checkpoints {
            result.checkpoints.push(ckpt.clone());
        }
        source = ModelSource::Resume(ckpt);
    }
    Ok(result)
}

fn average_cells(runs: &[Vec<CellReport>]) -> Vec<CellReport> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(idx, cell)| {
            let reports: Vec<EvalReport> = runs.iter().map(|r| r[idx].report.clone()).collect();
            CellReport {
                report: EvalReport::average(&reports).expect("at least one run"),
                ..cell.clone()
            }
        })
        .collect()
}

/// Trains the tasks in order, each stage starting from the previous stage's
/// checkpoint, and evaluates every task seen so far after each stage.
pub fn run_scenario(
    spec: &ScenarioSpec,
    datasets: &BTreeMap<String, TaskDataset>,
    cfg: &ProtocolConfig,
) -> Result<ScenarioResult> {
    spec.validate()?;
    let data = lookup(datasets, &spec.tasks)?;
    let mut runs = Vec::new();
    for folds in cfg.fold_runs() {
        runs.push(scenario_one_fold(spec, &data, cfg, &folds)?);
    }
    if runs.len() == 1 {
        return Ok(runs.pop().expect("one run"));
    }
    let cells: Vec<Vec<CellReport>> = runs.iter().map(|r| r.reports.clone()).collect();
    let mut merged = runs.remove(0);
    merged.reports = average_cells(&cells);
    for r in runs {
        merged.histories.extend(r.histories);
        merged.isolation.extend(r.isolation);
        merged.test_folds.extend(r.test_folds);
    }
    Ok(merged)
}

/// Train-task x eval-task matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub tasks: Vec<String>,
    /// Ordered by training task then evaluation task; `trained_through` holds the training task.
    pub cells: Vec<CellReport>,
}

impl CrossMatrix {
    pub fn get(&self, trained_on: &str, task: &str) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.trained_through == trained_on && c.task == task)
            .map(|c| &c.report)
    }

    pub fn to_csv(&self) -> Result<String> {
        cells_to_csv(&self.cells)
    }
}

/// One fresh model per task, each evaluated on every task.
pub fn run_disjoint(
    tasks: &[String],
    datasets: &BTreeMap<String, TaskDataset>,
    cfg: &ProtocolConfig,
) -> Result<CrossMatrix> {
    if tasks.is_empty() {
        return Err(Error::Parameter("need at least one task".into()));
    }
    distinct(tasks)?;
    let data = lookup(datasets, tasks)?;
    let mut runs = Vec::new();
    for folds in cfg.fold_runs() {
        let splits = split_all(&data, &folds)?;
        let mut cells = Vec::new();
        for (i, (ds, split)) in data.iter().zip(&splits).enumerate() {
            let outcome = train_parts(
                cfg.fresh(),
                &[TrainPart {
                    dataset: ds,
                    train_users: &split.train_users,
                }],
                &tasks[i],
                &cfg.train,
            )
            .map_err(|e| e.at_stage(1, &tasks[i]))?;
            check_isolation(1, ds, split, &folds, &outcome.history)?;
            for (j, eval_ds) in data.iter().enumerate() {
                cells.push(CellReport {
                    stage: 1,
                    trained_through: tasks[i].clone(),
                    task: tasks[j].clone(),
                    report: eval_at(1, &outcome.model, &outcome.registry, eval_ds, &splits[j])?,
                });
            }
        }
        runs.push(cells);
    }
    Ok(CrossMatrix {
        tasks: tasks.to_vec(),
        cells: average_cells(&runs),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointResult {
    pub tasks: Vec<String>,
    pub cells: Vec<CellReport>,
    /// Pooled training instances per run.
    pub instances: Vec<usize>,
}

impl JointResult {
    pub fn get(&self, task: &str) -> Option<&EvalReport> {
        self.cells.iter().find(|c| c.task == task).map(|c| &c.report)
    }

    pub fn to_csv(&self) -> Result<String> {
        cells_to_csv(&self.cells)
    }
}

pub const JOINT_LABEL: &str = "joint";

/// One model trained on the union of all tasks' training folds.
pub fn run_joint(
    tasks: &[String],
    datasets: &BTreeMap<String, TaskDataset>,
    cfg: &ProtocolConfig,
) -> Result<JointResult> {
    if tasks.is_empty() {
        return Err(Error::Parameter("need at least one task".into()));
    }
    distinct(tasks)?;
    let data = lookup(datasets, tasks)?;
    let mut runs = Vec::new();
    let mut instances = Vec::new();
    for folds in cfg.fold_runs() {
        let splits = split_all(&data, &folds)?;
        let parts: Vec<TrainPart> = data
            .iter()
            .zip(&splits)
            .map(|(ds, s)| TrainPart {
                dataset: ds,
                train_users: &s.train_users,
            })
            .collect();
        let outcome = train_parts(cfg.fresh(), &parts, JOINT_LABEL, &cfg.train)
            .map_err(|e| e.at_stage(1, JOINT_LABEL))?;
        instances.push(outcome.history.instances);
        let mut cells = Vec::new();
        for (j, ds) in data.iter().enumerate() {
            cells.push(CellReport {
                stage: 1,
                trained_through: JOINT_LABEL.to_string(),
                task: tasks[j].clone(),
                report: eval_at(1, &outcome.model, &outcome.registry, ds, &splits[j])?,
            });
        }
        runs.push(cells);
    }
    Ok(JointResult {
        tasks: tasks.to_vec(),
        cells: average_cells(&runs),
        instances,
    })
}

/// Metric change of one task between two evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub acc: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

impl MetricDelta {
    pub fn between(before: &EvalReport, after: &EvalReport) -> Self {
        let diff = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
        MetricDelta {
            acc: after.acc - before.acc,
            auroc: diff(after.auroc, before.auroc),
            auprc: diff(after.auprc, before.auprc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub first: String,
    pub second: String,
    pub scenario: ScenarioResult,
    /// Change on `first` from stage 1 to stage 2.
    pub delta: MetricDelta,
}

/// Two-stage scenarios for each `(first, second)` pair.
pub fn run_ablation(
    pairs: &[(String, String)],
    datasets: &BTreeMap<String, TaskDataset>,
    cfg: &ProtocolConfig,
) -> Result<Vec<PairResult>> {
    for (a, b) in pairs {
        if a == b {
            return Err(Error::Parameter(format!("ablation pair ({a},{b}) repeats a task")));
        }
    }
    pairs
        .iter()
        .map(|(a, b)| {
            let scenario = run_scenario(&ScenarioSpec::new([a, b]), datasets, cfg)?;
            let before = scenario.get(1, a).expect("stage 1 report");
            let after = scenario.get(2, a).expect("stage 2 report");
            let delta = MetricDelta::between(before, after);
            Ok(PairResult {
                first: a.clone(),
                second: b.clone(),
                scenario,
                delta,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    pub task: String,
    /// Stage at which the task was first evaluated.
    pub learned_at: usize,
    pub stage: usize,
    pub delta: MetricDelta,
}

/// For each task, metric changes at every later stage relative to the stage that trained it.
pub fn forgetting_summary(result: &ScenarioResult) -> Vec<ForgettingEntry> {
    let mut out = Vec::new();
    for (j, task) in result.tasks.iter().enumerate() {
        let learned_at = j + 1;
        let Some(base) = result.get(learned_at, task) else {
            continue;
        };
        for stage in learned_at + 1..=result.tasks.len() {
            if let Some(later) = result.get(stage, task) {
                out.push(ForgettingEntry {
                    task: task.clone(),
                    learned_at,
                    stage,
                    delta: MetricDelta::between(base, later),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, SyntheticSpec};
    use crate::metrics::Confusion;

    fn tiny() -> (BTreeMap<String, TaskDataset>, ProtocolConfig) {
        let spec = SyntheticSpec {
            num_schools: 3,
            users_per_school: 10,
            problems_per_school: 6,
            responses_per_user: 20,
            ..SyntheticSpec::default()
        };
        let cfg = ProtocolConfig {
            model: SaktConfig {
                d_model: 8,
                num_heads: 2,
                num_blocks: 1,
                max_seq_len: 8,
                dropout_rate: 0.1,
                v_cap: 64,
                ffn_hidden: 8,
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 16,
                ..TrainConfig::default()
            },
            ..ProtocolConfig::default()
        };
        (generate_synthetic(&spec).unwrap(), cfg)
    }

    fn report(acc: f64, auroc: Option<f64>) -> EvalReport {
        EvalReport {
            n: 10,
            acc,
            auroc,
            auprc: Some(0.5),
            confusion: Confusion::default(),
            positive_rate: 0.5,
            threshold: 0.5,
        }
    }

    #[test]
    fn three_task_scenario_is_triangular() {
        let (data, cfg) = tiny();
        let spec = ScenarioSpec::new(["syn1", "syn2", "syn3"]);
        let res = run_scenario(&spec, &data, &cfg).unwrap();
        let cells: Vec<(usize, &str)> =
            res.reports.iter().map(|c| (c.stage, c.task.as_str())).collect();
        assert_eq!(
            cells,
            [
                (1, "syn1"),
                (2, "syn1"),
                (2, "syn2"),
                (3, "syn1"),
                (3, "syn2"),
                (3, "syn3")
            ]
        );
        assert_eq!(res.checkpoints.len(), 3);
        assert_eq!(res.isolation.len(), 3);
        assert!(res.isolation.iter().all(|c| c.expected_digest == c.observed_digest));
        let tasks: Vec<&str> = res.provenance.iter().map(|p| p.task.as_str()).collect();
        assert_eq!(tasks, ["syn1", "syn2", "syn3"]);
        // registry only grows
        let sizes: Vec<usize> = res.checkpoints.iter().map(|c| c.registry.len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(res.to_csv().unwrap().lines().count(), 7);
    }

    #[test]
    fn scenario_errors() {
        let (data, cfg) = tiny();
        let err = run_scenario(&ScenarioSpec::new(["syn1", "nope"]), &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingTask(ref m) if m == &["nope".to_string()]));
        assert!(run_scenario(&ScenarioSpec::new(["syn1", "syn1"]), &data, &cfg).is_err());
        assert!(run_scenario(&ScenarioSpec::default(), &data, &cfg).is_err());
        let pair = [("syn1".to_string(), "syn1".to_string())];
        assert!(matches!(run_ablation(&pair, &data, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn empty_stage_carries_context() {
        let (mut data, cfg) = tiny();
        data.insert("empty".into(), TaskDataset::new("empty"));
        let err = run_scenario(&ScenarioSpec::new(["syn1", "empty"]), &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: 2, ref task, .. } if task == "empty"));
    }

    #[test]
    fn single_task_scenario_matches_disjoint_diagonal() {
        let (data, cfg) = tiny();
        let tasks = vec!["syn1".to_string(), "syn2".to_string()];
        let disjoint = run_disjoint(&tasks, &data, &cfg).unwrap();
        assert_eq!(disjoint.cells.len(), 4);
        for t in &tasks {
            let single = run_scenario(&ScenarioSpec::new([t]), &data, &cfg).unwrap();
            assert_eq!(single.get(1, t), disjoint.get(t, t));
        }
        let joint = run_joint(&tasks[..1], &data, &cfg).unwrap();
        assert_eq!(joint.get("syn1"), disjoint.get("syn1", "syn1"));
    }

    #[test]
    fn joint_pools_instances() {
        let (data, cfg) = tiny();
        let tasks = vec!["syn1".to_string(), "syn2".to_string(), "syn3".to_string()];
        let joint = run_joint(&tasks, &data, &cfg).unwrap();
        assert_eq!(joint.cells.len(), 3);
        let single: usize = tasks
            .iter()
            .map(|t| {
                let res = run_scenario(&ScenarioSpec::new([t]), &data, &cfg).unwrap();
                res.histories[0].instances
            })
            .sum();
        assert_eq!(joint.instances, vec![single]);
    }

    #[test]
    fn ablation_reports_stage_two_delta() {
        let (data, cfg) = tiny();
        let pairs = [("syn1".to_string(), "syn3".to_string())];
        let res = run_ablation(&pairs, &data, &cfg).unwrap();
        assert_eq!(res[0].scenario.reports.len(), 3);
        let before = res[0].scenario.get(1, "syn1").unwrap();
        let after = res[0].scenario.get(2, "syn1").unwrap();
        assert_eq!(res[0].delta.acc, after.acc - before.acc);
    }

    #[test]
    fn averaged_folds_cover_every_fold() {
        let (data, mut cfg) = tiny();
        cfg.average_folds = true;
        cfg.folds.k = 2;
        let res = run_scenario(&ScenarioSpec::new(["syn1", "syn2"]), &data, &cfg).unwrap();
        assert_eq!(res.test_folds, vec![0, 1]);
        assert_eq!(res.reports.len(), 3);
        // 10 users x 20 responses in chunks of 8, 8, 4: 7 + 7 + 3 scored positions each
        assert_eq!(res.reports[0].report.n, 170);
    }

    #[test]
    fn forgetting_by_hand() {
        let cell = |stage, task: &str, r| CellReport {
            stage,
            trained_through: String::new(),
            task: task.into(),
            report: r,
        };
        let res = ScenarioResult {
            tasks: vec!["a".into(), "b".into()],
            reports: vec![
                cell(1, "a", report(0.75, Some(0.6))),
                cell(2, "a", report(0.5, Some(0.7))),
                cell(2, "b", report(0.9, None)),
            ],
            checkpoints: vec![],
            provenance: vec![],
            histories: vec![],
            isolation: vec![],
            test_folds: vec![0],
        };
        let f = forgetting_summary(&res);
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].learned_at, f[0].stage), (1, 2));
        assert_eq!(f[0].delta.acc, -0.25);
        assert!((f[0].delta.auroc.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(f[0].delta.auprc, Some(0.0));

        let single = ScenarioResult {
            tasks: vec!["a".into()],
            reports: vec![res.reports[0].clone()],
            ..res
        };
        assert!(forgetting_summary(&single).is_empty());
    }
}
