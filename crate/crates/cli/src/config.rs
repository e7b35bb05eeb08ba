//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use ikt::continual::ProtocolConfig;
use ikt::drift::TsneConfig;
use ikt::ingest::{ColumnMap, SyntheticSpec};
use ikt::sakt::SaktConfig;
use ikt::train::{FoldSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Raw CSV file or a cache directory written by `ingest`.
    pub data: Option<PathBuf>,
    /// Generate data instead of reading it.
    pub synthetic: Option<SyntheticSpec>,
    pub schools: Vec<String>,
    pub columns: ColumnMap,
    /// Skip malformed rows instead of failing.
    pub lenient: bool,
    /// When set, overrides every other seed.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub model: SaktConfig,
    pub train: TrainConfig,
    pub folds: FoldSpec,
    pub init_seed: u64,
    pub average_folds: bool,
    pub scenario: Vec<String>,
    pub pairs: Vec<(String, String)>,
    pub tsne: TsneConfig,
    /// Neighbourhood size for mixing and purity scores.
    pub neighbours: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            synthetic: None,
            schools: Vec::new(),
            columns: ColumnMap::default(),
            lenient: false,
            seed: None,
            out: PathBuf::from("out"),
            model: SaktConfig::default(),
            train: TrainConfig::default(),
            folds: FoldSpec::default(),
            init_seed: 0,
            average_folds: false,
            scenario: Vec::new(),
            pairs: Vec::new(),
            tsne: TsneConfig::default(),
            neighbours: 10,
        }
    }
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Raw interaction CSV or an ingest cache directory.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Use generated data (spec from the config file, else defaults).
    #[arg(long)]
    pub synthetic: bool,
    /// Comma-separated school ids.
    #[arg(long, value_delimiter = ',')]
    pub schools: Option<Vec<String>>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated task order.
    #[arg(long, value_delimiter = ',')]
    pub scenario: Option<Vec<String>>,
    /// Comma-separated `first:second` pairs.
    #[arg(long)]
    pub pairs: Option<String>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Held-out fold index.
    #[arg(long)]
    pub test_fold: Option<usize>,
    /// Run every fold as the held-out fold and average.
    #[arg(long)]
    pub average_folds: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub v_cap: Option<usize>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lenient: bool,
}

pub fn parse_pairs(s: &str) -> CliResult<Vec<(String, String)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| match p.split_once(':') {
            Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
                Ok((a.trim().to_string(), b.trim().to_string()))
            }
            _ => Err(CliError::Usage(format!("bad pair `{p}`, expected first:second"))),
        })
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(args: &CommonArgs) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &args.data {
            cfg.data = Some(d.clone());
        }
        if args.synthetic && cfg.synthetic.is_none() {
            cfg.synthetic = Some(SyntheticSpec::default());
        }
        if let Some(s) = &args.schools {
            cfg.schools = s.clone();
        }
        if let Some(v) = args.seq_len {
            cfg.model.max_seq_len = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = args.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = args.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = &args.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &args.scenario {
            cfg.scenario = v.clone();
        }
        if let Some(v) = &args.pairs {
            cfg.pairs = parse_pairs(v)?;
        }
        if let Some(v) = args.folds {
            cfg.folds.k = v;
        }
        if let Some(v) = args.test_fold {
            cfg.folds.test_fold = v;
        }
        cfg.average_folds |= args.average_folds;
        cfg.lenient |= args.lenient;
        if let Some(v) = args.d_model {
            cfg.model.d_model = v;
            cfg.model.ffn_hidden = v;
        }
        if let Some(v) = args.v_cap {
            cfg.model.v_cap = v;
        }
        if let Some(v) = args.perplexity {
            cfg.tsne.perplexity = v;
        }
        if let Some(v) = args.iterations {
            cfg.tsne.iterations = v;
        }
        if let Some(seed) = cfg.seed {
            cfg.apply_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.folds.seed = seed;
        self.init_seed = seed;
        self.tsne.seed = seed;
        if let Some(s) = &mut self.synthetic {
            s.seed = seed;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.folds.k < 2 || self.folds.test_fold >= self.folds.k {
            return Err(CliError::Usage(format!(
                "need k >= 2 folds and test fold < k (k={}, test fold={})",
                self.folds.k, self.folds.test_fold
            )));
        }
        if self.neighbours == 0 {
            return Err(CliError::Usage("neighbours must be positive".into()));
        }
        if let Some(d) = &self.data {
            if !d.exists() {
                return Err(CliError::Usage(format!("data path {} does not exist", d.display())));
            }
        }
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            folds: self.folds.clone(),
            init_seed: self.init_seed,
            average_folds: self.average_folds,
            keep_checkpoints: true,
        }
    }

    /// Everything that affects results; the output directory is left out.
    pub fn experiment_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
        }
        v
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.experiment_json().to_string().as_bytes()))
    }

    /// Effective master seed, for the manifest.
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "schools = [\"a\", \"b\"]\nseed = 4\n[train]\nepochs = 7\nbatch_size = 8\n[model]\nd_model = 16\nffn_hidden = 16\n",
        )
        .unwrap();
        let args = CommonArgs {
            config: Some(path),
            epochs: Some(3),
            ..CommonArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.num_heads, 8);
        assert_eq!(cfg.schools, ["a", "b"]);
        assert_eq!((cfg.train.seed, cfg.folds.seed, cfg.tsne.seed), (4, 4, 4));
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epochz = 3\n").unwrap();
        let args = CommonArgs {
            config: Some(path),
            ..CommonArgs::default()
        };
        let err = RunConfig::resolve(&args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn pairs_syntax() {
        assert_eq!(
            parse_pairs("1998:5049,5117:5049").unwrap(),
            [
                ("1998".to_string(), "5049".to_string()),
                ("5117".to_string(), "5049".to_string())
            ]
        );
        assert!(parse_pairs("1998-5049").is_err());
    }

    #[test]
    fn output_dir_does_not_change_hash() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            ..RunConfig::default()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig {
            init_seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(a.config_hash(), c.config_hash());
    }
}
