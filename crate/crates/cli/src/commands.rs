use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ikt::continual::{
    forgetting_summary, run_ablation, run_disjoint, run_joint, run_scenario, CellReport,
    CrossMatrix, JointResult, PairResult, ScenarioResult, ScenarioSpec,
};
use ikt::drift::{analyze, knn_purity, mixing_table, DriftAnalysis};
use ikt::ingest::{dataset_stats, TaskDataset};
use ikt::metrics::{evaluate, EvalReport};
use ikt::train::{save_checkpoint, train_task, ModelSource};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{self, Loaded};
use crate::error::{CliError, CliResult};
use crate::svg;

/// Writes files under the output directory and remembers their digests.
pub struct Outputs {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl Outputs {
    pub fn new(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(CliError::file(root))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(CliError::file(parent))?;
        }
        std::fs::write(&path, bytes.as_ref()).map_err(CliError::file(&path))?;
        self.written
            .insert(rel.to_string(), hex::encode(Sha256::digest(bytes.as_ref())));
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text)
    }

    fn record_existing(&mut self, rel: &str) -> CliResult<()> {
        let digest = data::sha256_file(&self.root.join(rel))?;
        self.written.insert(rel.to_string(), digest);
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

fn finish(command: &str, cfg: &RunConfig, inputs: &[(String, String)], mut out: Outputs) -> CliResult<()> {
    let written = std::mem::take(&mut out.written);
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.effective_seed(),
        config_hash: cfg.config_hash(),
        config: cfg.experiment_json(),
        inputs: inputs.iter().cloned().collect(),
        outputs: &written,
    };
    out.json(&format!("manifest-{command}.json"), &manifest)?;
    Ok(())
}

fn tasks_for(cfg: &RunConfig, loaded: &Loaded) -> Vec<String> {
    if !cfg.scenario.is_empty() {
        cfg.scenario.clone()
    } else if !cfg.schools.is_empty() {
        cfg.schools.clone()
    } else {
        loaded.task_ids()
    }
}

fn metric_grid(cells: &[CellReport], rows: &[String], cols: &[String], by_row: impl Fn(&CellReport) -> &str) -> Vec<Vec<Option<f64>>> {
    rows.iter()
        .map(|r| {
            cols.iter()
                .map(|c| {
                    cells
                        .iter()
                        .find(|cell| by_row(cell) == r && &cell.task == c)
                        .and_then(|cell| cell.report.auroc)
                })
                .collect()
        })
        .collect()
}

fn stats_csv(datasets: &[&TaskDataset]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["school_id", "learners", "unique_problems", "responses"])
        .map_err(ikt::Error::from)?;
    for ds in datasets {
        let s = dataset_stats(ds);
        w.write_record([
            ds.school_id.clone(),
            s.num_learners.to_string(),
            s.num_unique_problems.to_string(),
            s.num_responses.to_string(),
        ])
        .map_err(ikt::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| ikt::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn ingest(cfg: &RunConfig) -> CliResult<()> {
    let loaded = data::load(cfg)?;
    let mut out = Outputs::new(&cfg.out)?;
    let all: Vec<&TaskDataset> = loaded.datasets.values().collect();
    for ds in &all {
        out.write(&format!("cache/{}.json", ds.school_id), ds.canonical_json()?)?;
    }
    out.write("stats.csv", stats_csv(&all)?)?;
    let mut skipped = String::from("line,reason\n");
    for s in &loaded.skipped {
        let _ = writeln!(skipped, "{},\"{}\"", s.line, s.reason.replace('"', "'"));
    }
    out.write("skipped.csv", skipped)?;
    eprintln!(
        "ingested {} schools, {} rows skipped",
        all.len(),
        loaded.skipped.len()
    );
    finish("ingest", cfg, &loaded.inputs, out)
}

pub fn stats(cfg: &RunConfig) -> CliResult<()> {
    let loaded = data::load(cfg)?;
    let selected = loaded.select(&tasks_for(cfg, &loaded))?;
    let text = stats_csv(&selected)?;
    print!("{text}");
    let mut out = Outputs::new(&cfg.out)?;
    out.write("stats.csv", text)?;
    finish("stats", cfg, &loaded.inputs, out)
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    task: String,
    global_step: u64,
    instances: usize,
    input_digest: String,
    input_records: usize,
    final_epoch_loss: Option<f64>,
    report: EvalReport,
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let loaded = data::load(cfg)?;
    let tasks = tasks_for(cfg, &loaded);
    let [task] = tasks.as_slice() else {
        return Err(CliError::Usage(format!(
            "train needs exactly one school, got {}",
            tasks.len()
        )));
    };
    let ds = loaded.select(std::slice::from_ref(task))?[0];
    let source = ModelSource::Fresh {
        config: cfg.model.clone(),
        seed: cfg.init_seed,
    };
    let (ckpt, history) = train_task(source, ds, &cfg.folds, &cfg.train)?;
    let split = cfg.folds.split(ds)?;
    let model = ckpt.to_model()?;
    let report = evaluate(&model, &ckpt.registry, ds, &split.test_users)?;

    let mut out = Outputs::new(&cfg.out)?;
    save_checkpoint(&ckpt, cfg.out.join("model.ckpt"))?;
    out.record_existing("model.ckpt")?;
    out.write("history.csv", history.to_csv()?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EvalReport::CSV_HEADER).map_err(ikt::Error::from)?;
    w.write_record(report.csv_row(task, task)).map_err(ikt::Error::from)?;
    out.write("eval.csv", w.into_inner().map_err(|e| ikt::Error::Io(e.into_error()))?)?;
    out.json(
        "eval.json",
        &TrainSummary {
            task: task.clone(),
            global_step: ckpt.global_step,
            instances: history.instances,
            input_digest: history.input_digest.clone(),
            input_records: history.input_records,
            final_epoch_loss: history.epoch_losses.last().copied(),
            report: report.clone(),
        },
    )?;
    eprintln!(
        "{task}: acc {:.4} auroc {}",
        report.acc,
        report.auroc.map_or("NA".into(), |v| format!("{v:.4}"))
    );
    finish("train", cfg, &loaded.inputs, out)
}

const METRICS: [(&str, &str, fn(&EvalReport) -> Option<f64>); 3] = [
    ("acc", "Accuracy", |r| Some(r.acc)),
    ("auroc", "AUROC", |r| r.auroc),
    ("auprc", "AUPRC", |r| r.auprc),
];

/// Bar chart per metric plus AUROC against stage, keyed by file name.
fn scenario_charts(result: &ScenarioResult) -> Vec<(String, String)> {
    let stages: Vec<String> = result.tasks.iter().map(|t| format!("after {t}")).collect();
    let grid = |f: fn(&EvalReport) -> Option<f64>| -> Vec<Vec<Option<f64>>> {
        (1..=result.tasks.len())
            .map(|s| result.tasks.iter().map(|t| result.get(s, t).and_then(f)).collect())
            .collect()
    };
    let mut charts: Vec<(String, String)> = METRICS
        .iter()
        .map(|(key, label, f)| {
            (
                format!("scenario_{key}.svg"),
                svg::grouped_bars(&format!("{label} per task after each stage"), label, &stages, &result.tasks, &grid(*f)),
            )
        })
        .collect();
    charts.push((
        "scenario_auroc_stages.svg".into(),
        svg::lines("AUROC per task across stages", "AUROC", &stages, &result.tasks, &grid(|r| r.auroc)),
    ));
    charts
}

fn forgetting_csv(result: &ScenarioResult) -> String {
    let mut s = String::from("task,learned_at,stage,delta_acc,delta_auroc,delta_auprc\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    for e in forgetting_summary(result) {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{},{}",
            e.task,
            e.learned_at,
            e.stage,
            e.delta.acc,
            opt(e.delta.auroc),
            opt(e.delta.auprc)
        );
    }
    s
}

pub fn scenario(cfg: &RunConfig) -> CliResult<()> {
    let loaded = data::load(cfg)?;
    let spec = ScenarioSpec::new(tasks_for(cfg, &loaded));
    let result = run_scenario(&spec, &loaded.datasets, &cfg.protocol())?;
    let mut out = Outputs::new(&cfg.out)?;
    out.write("scenario.csv", result.to_csv()?)?;
    out.json("scenario.json", &result)?;
    out.write("forgetting.csv", forgetting_csv(&result))?;
    for (name, chart) in scenario_charts(&result) {
        out.write(&name, chart)?;
    }
    for (i, h) in result.histories.iter().enumerate() {
        out.write(&format!("history/stage_{}.csv", i + 1), h.to_csv()?)?;
    }
    for (i, ckpt) in result.checkpoints.iter().enumerate() {
        let rel = format!("checkpoints/stage_{}.ckpt", i + 1);
        out.write(&rel, ckpt.to_bytes()?)?;
    }
    eprint!("{}", result.to_csv()?);
    finish("scenario", cfg, &loaded.inputs, out)
}

fn disjoint_chart(m: &CrossMatrix) -> String {
    let grid = metric_grid(&m.cells, &m.tasks, &m.tasks, |c| &c.trained_through);
    svg::heatmap("AUROC: trained on (rows) vs evaluated on (columns)", &m.tasks, &m.tasks, &grid)
}

pub fn disjoint(cfg: &RunConfig) -> CliResult<()> {
    let loaded = data::load(cfg)?;
    let tasks = tasks_for(cfg, &loaded);
    let result = run_disjoint(&tasks, &loaded.datasets, &cfg.protocol())?;
    let mut out = Outputs::new(&cfg.out)?;
    out.write("disjoint.csv", result.to_csv()?)?;
    out.json("disjoint.json", &result)?;
    out.write("disjoint_auroc.svg", disjoint_chart(&result))?;
    eprint!("{}", result.to_csv()?);
    finish("disjoint", cfg, &loaded.inputs, out)
}

fn joint_chart(j: &JointResult) -> String {
    let values = vec![j.tasks.iter().map(|t| j.get(t).and_then(|r| r.auroc)).collect()];
    svg::grouped_bars("Joint training AUROC", "AUROC", &["joint".to_string()], &j.tasks, &values)
}

pub fn joint(cfg: &RunConfig) -> CliResult<()> {
    let loaded = data::load(cfg)?;
    let tasks = tasks_for(cfg, &loaded);
    let result = run_joint(&tasks, &loaded.datasets, &cfg.protocol())?;
    let mut out = Outputs::new(&cfg.out)?;
    out.write("joint.csv", result.to_csv()?)?;
    out.json("joint.json", &result)?;
    out.write("joint_auroc.svg", joint_chart(&result))?;
    eprint!("{}", result.to_csv()?);
    finish("joint", cfg, &loaded.inputs, out)
}

fn ablation_csv(pairs: &[PairResult]) -> String {
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    let mut s = String::from(
        "first,second,auroc_before,auroc_after,delta_acc,delta_auroc,delta_auprc\n",
    );
    for p in pairs {
        let before = p.scenario.get(1, &p.first).and_then(|r| r.auroc);
        let after = p.scenario.get(2, &p.first).and_then(|r| r.auroc);
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{}",
            p.first,
            p.second,
            opt(before),
            opt(after),
            p.delta.acc,
            opt(p.delta.auroc),
            opt(p.delta.auprc)
        );
    }
    s
}

fn ablation_chart(pairs: &[PairResult]) -> String {
    let groups: Vec<String> = pairs.iter().map(|p| format!("{} > {}", p.first, p.second)).collect();
    let series = vec!["after first".to_string(), "after second".to_string()];
    let values: Vec<Vec<Option<f64>>> = pairs
        .iter()
        .map(|p| {
            vec![
                p.scenario.get(1, &p.first).and_then(|r| r.auroc),
                p.scenario.get(2, &p.first).and_then(|r| r.auroc),
            ]
        })
        .collect();
    svg::grouped_bars("AUROC on the first task of each pair", "AUROC", &groups, &series, &values)
}

pub fn ablation(cfg: &RunConfig) -> CliResult<()> {
    if cfg.pairs.is_empty() {
        return Err(CliError::Usage("ablation needs --pairs a:b[,c:d...]".into()));
    }
    let loaded = data::load(cfg)?;
    let result = run_ablation(&cfg.pairs, &loaded.datasets, &cfg.protocol())?;
    let mut out = Outputs::new(&cfg.out)?;
    let text = ablation_csv(&result);
    out.write("ablation.csv", &text)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["pair", "stage"];
    header.extend(EvalReport::CSV_HEADER);
    w.write_record(&header).map_err(ikt::Error::from)?;
    for p in &result {
        let pair = format!("{}:{}", p.first, p.second);
        for c in &p.scenario.reports {
            let mut row = vec![pair.clone(), c.stage.to_string()];
            row.extend(c.report.csv_row(&c.task, &c.trained_through));
            w.write_record(&row).map_err(ikt::Error::from)?;
        }
    }
    out.write("ablation_reports.csv", w.into_inner().map_err(|e| ikt::Error::Io(e.into_error()))?)?;
    out.json("ablation.json", &result)?;
    out.write("ablation_auroc.svg", ablation_chart(&result))?;
    eprint!("{text}");
    finish("ablation", cfg, &loaded.inputs, out)
}

#[derive(Serialize, Deserialize)]
struct TsneMeta {
    schools: Vec<String>,
    points: usize,
    neighbours: usize,
    purity: Option<f64>,
    mixing: Vec<(String, String, f64)>,
    explained_variance_ratio: Vec<f64>,
    final_kl: Option<f64>,
    converged_bandwidths: usize,
    warnings: Vec<String>,
}

fn tsne_chart(a: &DriftAnalysis) -> String {
    let pts: Vec<(f64, f64)> = (0..a.labels.len())
        .map(|i| {
            let r = a.embedding.points.row(i);
            (r[0], r[1])
        })
        .collect();
    svg::scatter("t-SNE of learner problem-attempt vectors", &pts, &a.schools())
}

pub fn tsne(cfg: &RunConfig) -> CliResult<()> {
    let loaded = data::load(cfg)?;
    let tasks = tasks_for(cfg, &loaded);
    let selected = loaded.select(&tasks)?;
    let analysis = analyze(&selected, &cfg.tsne)?;
    let labels = analysis.schools();
    let k = cfg.neighbours;
    let mixing: Vec<(String, String, f64)> = mixing_table(&analysis.embedding.points, &labels, k)?
        .into_iter()
        .map(|((a, b), v)| (a, b, v))
        .collect();
    let purity = knn_purity(&analysis.embedding.points, &labels, k).ok();
    let meta = TsneMeta {
        schools: tasks.clone(),
        points: labels.len(),
        neighbours: k,
        purity,
        mixing: mixing.clone(),
        explained_variance_ratio: analysis.explained_variance_ratio.clone(),
        final_kl: analysis.embedding.kl_trace.last().copied(),
        converged_bandwidths: analysis.embedding.bandwidths.converged.iter().filter(|c| **c).count(),
        warnings: analysis.warnings.clone(),
    };
    for w in &analysis.warnings {
        eprintln!("warning: {w}");
    }
    let mut out = Outputs::new(&cfg.out)?;
    out.write("tsne_points.csv", analysis.points_csv()?)?;
    out.write("tsne.svg", tsne_chart(&analysis))?;
    out.json("tsne_meta.json", &meta)?;
    let mut csv = String::from("school_a,school_b,mixing\n");
    for (a, b, v) in &mixing {
        let _ = writeln!(csv, "{a},{b},{v:.6}");
    }
    eprint!("{csv}");
    out.write("mixing.csv", csv)?;
    finish("tsne", cfg, &loaded.inputs, out)
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> CliResult<Option<T>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(CliError::file(&path))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn md_table(out: &mut String, cells: &[CellReport]) {
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    out.push_str("| trained through | task | acc | AUROC | AUPRC | n |\n|---|---|---|---|---|---|\n");
    for c in cells {
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} | {} | {} | {} |",
            c.trained_through,
            c.task,
            c.report.acc,
            opt(c.report.auroc),
            opt(c.report.auprc),
            c.report.n
        );
    }
    out.push('\n');
}

/// Collects whatever results exist in the output directory into `report.md`,
/// re-rendering charts from the JSON.
pub fn report(cfg: &RunConfig) -> CliResult<()> {
    let dir = cfg.out.as_path();
    let mut out = Outputs::new(dir)?;
    let mut md = String::from("# Results\n\n");
    let mut found = 0;

    if dir.join("stats.csv").exists() {
        let text = std::fs::read_to_string(dir.join("stats.csv")).map_err(CliError::file(dir))?;
        md.push_str("## Datasets\n\n");
        for (i, line) in text.lines().enumerate() {
            let _ = writeln!(md, "| {} |", line.replace(',', " | "));
            if i == 0 {
                md.push_str("|---|---|---|---|\n");
            }
        }
        md.push('\n');
        found += 1;
    }
    if let Some(r) = read_json::<ScenarioResult>(dir, "scenario.json")? {
        md.push_str("## Sequential scenario\n\n");
        md_table(&mut md, &r.reports);
        for (name, chart) in scenario_charts(&r) {
            let _ = writeln!(md, "![{name}]({name})\n");
            out.write(&name, chart)?;
        }
        found += 1;
    }
    if let Some(r) = read_json::<CrossMatrix>(dir, "disjoint.json")? {
        md.push_str("## Disjoint training\n\n");
        md_table(&mut md, &r.cells);
        md.push_str("![disjoint](disjoint_auroc.svg)\n\n");
        out.write("disjoint_auroc.svg", disjoint_chart(&r))?;
        found += 1;
    }
    if let Some(r) = read_json::<JointResult>(dir, "joint.json")? {
        md.push_str("## Joint training\n\n");
        md_table(&mut md, &r.cells);
        out.write("joint_auroc.svg", joint_chart(&r))?;
        found += 1;
    }
    if let Some(r) = read_json::<Vec<PairResult>>(dir, "ablation.json")? {
        md.push_str("## Pairwise ablation\n\n```\n");
        md.push_str(&ablation_csv(&r));
        md.push_str("```\n\n![ablation](ablation_auroc.svg)\n\n");
        out.write("ablation_auroc.svg", ablation_chart(&r))?;
        found += 1;
    }
    if let Some(m) = read_json::<TsneMeta>(dir, "tsne_meta.json")? {
        md.push_str("## Distribution drift\n\n");
        let _ = writeln!(md, "{} learners, {}-NN purity {}.\n", m.points, m.neighbours,
            m.purity.map_or("NA".into(), |p| format!("{p:.4}")));
        md.push_str("| school a | school b | mixing |\n|---|---|---|\n");
        for (a, b, v) in &m.mixing {
            let _ = writeln!(md, "| {a} | {b} | {v:.4} |");
        }
        md.push_str("\n![t-SNE](tsne.svg)\n\n");
        for w in &m.warnings {
            let _ = writeln!(md, "- warning: {w}");
        }
        found += 1;
    }
    if found == 0 {
        return Err(CliError::Usage(format!("no results found in {}", dir.display())));
    }
    out.write("report.md", md)?;
    finish("report", cfg, &[], out)
}
