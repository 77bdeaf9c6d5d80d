//! Experiment and sweep-grid files (TOML, unknown keys rejected).

use std::fs;
use std::path::{Path, PathBuf};

use fairfl::data::{
    dirichlet_partition, gen_synthetic_classification, iid_partition, load_mnist, ClientShard, Dataset, MnistFiles,
    PartitionConfig, SplitFractions,
};
use fairfl::federation::{AlgorithmConfig, Federation};
use fairfl::metrics::Selection;
use fairfl::theory::QuadraticFederation;
use fairfl::{Error, ModelSpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Mnist,
    Synthetic,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    /// IDX directory for `mnist`, relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Stratified subset size (`mnist`) or pool size (`synthetic`).
    #[serde(default)]
    pub subset_size: Option<usize>,
    pub n_clients: usize,
    /// Dirichlet concentration; IID shuffle split when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub split: SplitFractions,
    /// Fixes data sampling and partition across run seeds.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub input_dim: Option<usize>,
    #[serde(default)]
    pub spread: Option<f64>,
    /// Parameter dimension of the `quadratic` source.
    #[serde(default)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MultinomialLogistic,
    Mlp,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub algorithm: AlgorithmConfig,
    pub run: RunConfig,
    /// Directory the config was read from; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::parse(&read(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| Error::Config(format!("dataset.{name} is required")));
        if d.n_clients == 0 {
            return Err(Error::Config("dataset.n_clients must be positive".into()));
        }
        if let Some(a) = d.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("dataset.alpha must be positive, got {a}")));
            }
        }
        d.split.validate()?;
        match d.source {
            Source::Mnist => {
                if d.path.is_none() {
                    return Err(Error::Config("dataset.path is required for mnist".into()));
                }
                need(d.subset_size, "subset_size")?;
            }
            Source::Synthetic => {
                need(d.subset_size, "subset_size")?;
                need(d.num_classes, "num_classes")?;
                need(d.input_dim, "input_dim")?;
            }
            Source::Quadratic => {
                need(d.dim, "dim")?;
            }
        }
        match (&d.source, &self.model.kind) {
            (Source::Quadratic, ModelKind::Quadratic) => {}
            (Source::Quadratic, _) | (_, ModelKind::Quadratic) => {
                return Err(Error::Config("the quadratic model goes with the quadratic source only".into()))
            }
            _ => {}
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden.unwrap_or(0) == 0 {
            return Err(Error::Config("model.hidden must be positive for mlp".into()));
        }
        if self.model.kind != ModelKind::Mlp && self.model.hidden.is_some() {
            return Err(Error::Config("model.hidden only applies to mlp".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        if self.run.workers == Some(0) {
            return Err(Error::Config("run.workers must be positive".into()));
        }
        self.algorithm.validate()
    }

    fn data_seed(&self, seed: u64) -> u64 {
        self.dataset.data_seed.unwrap_or(seed)
    }

    fn pool(&self, seed: u64) -> Result<Dataset> {
        let d = &self.dataset;
        let s = self.data_seed(seed);
        match d.source {
            Source::Mnist => {
                let dir = self.base_dir.join(d.path.as_ref().expect("validated"));
                load_mnist(&MnistFiles::in_dir(&dir), d.subset_size.expect("validated"), s)
            }
            Source::Synthetic => gen_synthetic_classification(
                d.subset_size.expect("validated"),
                d.num_classes.expect("validated"),
                d.input_dim.expect("validated"),
                d.spread.unwrap_or(1.0),
                s,
            ),
            Source::Quadratic => unreachable!("no example pool"),
        }
    }

    fn partition(&self, pool: &Dataset, seed: u64) -> Result<Vec<ClientShard>> {
        let d = &self.dataset;
        let s = self.data_seed(seed);
        match d.alpha {
            Some(alpha) => dirichlet_partition(
                pool,
                &PartitionConfig {
                    n_clients: d.n_clients,
                    alpha,
                    seed: s,
                    split: d.split,
                },
            ),
            None => iid_partition(pool, d.n_clients, &d.split, s),
        }
    }

    /// Federation for one run seed, plus the number of classes.
    pub fn federation(&self, seed: u64) -> Result<(Federation, usize)> {
        if self.dataset.source == Source::Quadratic {
            let q = QuadraticFederation::random(self.dataset.n_clients, self.dataset.dim.expect("validated"), self.data_seed(seed));
            return Ok((q.federation(), 0));
        }
        let pool = self.pool(seed)?;
        let shards = self.partition(&pool, seed)?;
        let input_dim = pool.examples[0].features.len();
        let num_classes = pool.num_classes;
        let spec = match self.model.kind {
            ModelKind::MultinomialLogistic => ModelSpec::MultinomialLogistic { input_dim, num_classes },
            ModelKind::Mlp => ModelSpec::Mlp {
                input_dim,
                hidden: self.model.hidden.expect("validated"),
                num_classes,
            },
            ModelKind::Quadratic => unreachable!("validated"),
        };
        Ok((Federation::new(spec, shards)?, num_classes))
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.run.out) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.base_dir.join(p),
            (None, None) => PathBuf::from("runs"),
        }
    }
}

/// Candidate values per axis; an absent axis keeps the config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub lr: Option<Vec<f64>>,
    /// Values of the method's fairness parameter.
    #[serde(default)]
    pub param: Option<Vec<f64>>,
    /// `0` means full batch.
    #[serde(default)]
    pub batch_size: Option<Vec<usize>>,
    #[serde(default)]
    pub rounds: Option<Vec<usize>>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<SweepGrid> {
        let grid: SweepGrid =
            toml::from_str(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("lr", self.lr.as_ref().map(Vec::len)),
            ("param", self.param.as_ref().map(Vec::len)),
            ("batch_size", self.batch_size.as_ref().map(Vec::len)),
            ("rounds", self.rounds.as_ref().map(Vec::len)),
        ];
        for (name, len) in axes {
            if len == Some(0) {
                return Err(Error::Config(format!("sweep axis `{name}` is empty")));
            }
        }
        Ok(())
    }

    /// Every combination, `lr` varying slowest.
    pub fn cells(&self, base: &AlgorithmConfig) -> Vec<AlgorithmConfig> {
        let lrs = self.lr.clone().unwrap_or_else(|| vec![base.lr]);
        let params = self.param.clone().unwrap_or_else(|| vec![base.param()]);
        let batches: Vec<Option<usize>> = match &self.batch_size {
            Some(b) => b.iter().map(|&s| (s > 0).then_some(s)).collect(),
            None => vec![base.batch_size],
        };
        let rounds = self.rounds.clone().unwrap_or_else(|| vec![base.rounds]);
        let mut out = Vec::new();
        for &lr in &lrs {
            for &p in &params {
                for &b in &batches {
                    for &t in &rounds {
                        let mut c = base.clone().with_param(p);
                        c.lr = lr;
                        c.batch_size = b;
                        c.rounds = t;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}
