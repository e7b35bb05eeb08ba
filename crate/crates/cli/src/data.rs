//! Loading task datasets from a raw CSV, an ingest cache or the generator.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ikt::ingest::{
    generate_synthetic, parse_records, partition_by_school, ParseOptions, SkippedRow, Strictness,
    TaskDataset,
};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub struct Loaded {
    pub datasets: BTreeMap<String, TaskDataset>,
    pub skipped: Vec<SkippedRow>,
    /// Input files and their sha256, in read order.
    pub inputs: Vec<(String, String)>,
}

impl Loaded {
    /// Datasets in the order given, or all of them sorted by id.
    pub fn select(&self, tasks: &[String]) -> CliResult<Vec<&TaskDataset>> {
        if tasks.is_empty() {
            return Ok(self.datasets.values().collect());
        }
        let missing: Vec<String> = tasks
            .iter()
            .filter(|t| !self.datasets.contains_key(*t))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ikt::Error::MissingTask(missing).into());
        }
        Ok(tasks.iter().map(|t| &self.datasets[t]).collect())
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.datasets.keys().cloned().collect()
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(CliError::file(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load(cfg: &RunConfig) -> CliResult<Loaded> {
    let mut loaded = match (&cfg.data, &cfg.synthetic) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "give either a data path or a synthetic spec, not both".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "no input: pass --data PATH or --synthetic".into(),
            ))
        }
        (None, Some(spec)) => Loaded {
            datasets: generate_synthetic(spec)?,
            skipped: Vec::new(),
            inputs: Vec::new(),
        },
        (Some(path), None) if path.is_dir() => load_cache(path, &cfg.schools)?,
        (Some(path), None) => load_csv(path, cfg)?,
    };
    if !cfg.schools.is_empty() {
        loaded.select(&cfg.schools)?;
        loaded.datasets.retain(|k, _| cfg.schools.contains(k));
    }
    Ok(loaded)
}

fn load_csv(path: &Path, cfg: &RunConfig) -> CliResult<Loaded> {
    let file = File::open(path).map_err(CliError::file(path))?;
    let options = ParseOptions {
        columns: cfg.columns.clone(),
        strictness: if cfg.lenient {
            Strictness::Lenient
        } else {
            Strictness::Strict
        },
        ..ParseOptions::default()
    };
    let outcome = parse_records(BufReader::new(file), &options)?;
    let schools: Vec<String> = if cfg.schools.is_empty() {
        let all: std::collections::BTreeSet<&str> =
            outcome.records.iter().map(|r| r.school_id.as_str()).collect();
        all.into_iter().map(String::from).collect()
    } else {
        cfg.schools.clone()
    };
    Ok(Loaded {
        datasets: partition_by_school(&outcome.records, &schools)?,
        skipped: outcome.skipped,
        inputs: vec![(path.display().to_string(), sha256_file(path)?)],
    })
}

fn cache_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(CliError::file(dir))? {
        let p = entry.map_err(CliError::file(dir))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn load_cache(dir: &Path, schools: &[String]) -> CliResult<Loaded> {
    let files = if schools.is_empty() {
        cache_files(dir)?
    } else {
        let files: Vec<PathBuf> = schools.iter().map(|s| dir.join(format!("{s}.json"))).collect();
        let missing: Vec<String> = schools
            .iter()
            .zip(&files)
            .filter(|(_, f)| !f.exists())
            .map(|(s, _)| s.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ikt::Error::MissingTask(missing).into());
        }
        files
    };
    if files.is_empty() {
        return Err(CliError::Usage(format!("no cached datasets in {}", dir.display())));
    }
    let mut loaded = Loaded {
        datasets: BTreeMap::new(),
        skipped: Vec::new(),
        inputs: Vec::new(),
    };
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(CliError::file(&f))?;
        let ds = TaskDataset::from_json(&text)?;
        loaded.inputs.push((f.display().to_string(), hex::encode(Sha256::digest(text.as_bytes()))));
        loaded.datasets.insert(ds.school_id.clone(), ds);
    }
    Ok(loaded)
}
