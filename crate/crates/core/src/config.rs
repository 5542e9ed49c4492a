//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys take their defaults. Command-line flags are applied on top of the file
//! through [`ExperimentConfig::set`], so both sources share one parser.
//! [`ExperimentConfig::to_text`] writes the fully resolved configuration in a
//! form that parses back to an equal value. The output directory is not part
//! of the echo, so runs written to different places produce identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{self, Dataset, SeedPool, ShardSet, ToySpec};
use crate::engine::{Aggregation, Algorithm, RoundConfig};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seeds::{self, Stream};

/// Where synthesis starts from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    Random,
    Holdout,
    File(PathBuf),
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitMode::Random => f.write_str("random"),
            InitMode::Holdout => f.write_str("holdout"),
            InitMode::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(InitMode::Random),
            "holdout" => Ok(InitMode::Holdout),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(InitMode::File(PathBuf::from(p))),
                _ => Err(format!("unknown init_mode {s:?} (random | holdout | file:PATH)")),
            },
        }
    }
}

/// Training data source: two FIDB files, or a generated toy task.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub classes: usize,
    pub side: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub round: RoundConfig,
    pub init_mode: InitMode,
    /// Accepted and echoed; no computation reads it.
    pub gamma: f64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub toy: ToyTask,
    pub n_clients: usize,
    pub alpha: f64,
    /// Defaults to a stream derived from `master_seed`.
    pub partition_seed: Option<u64>,
    pub holdout_fraction: f64,
    pub hidden: Vec<usize>,
    pub out_dir: PathBuf,
    pub run_id: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            round: RoundConfig::default(),
            init_mode: InitMode::Holdout,
            gamma: 0.0,
            train_path: None,
            test_path: None,
            toy: ToyTask {
                classes: 4,
                side: 8,
                per_class: 200,
                test_per_class: 40,
                sigma: 0.6,
            },
            n_clients: 4,
            alpha: 0.01,
            partition_seed: None,
            holdout_fraction: 0.1,
            hidden: vec![64],
            out_dir: PathBuf::from("out"),
            run_id: "run".into(),
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str, line: Option<usize>) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(line, format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str, line: Option<usize>) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_val(key, v.trim(), line)).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Parse config text; `line` numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(i + 1), format!("expected `key = value`, got {line:?}")))?;
            cfg.set_at(k.trim(), v.trim(), Some(i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one key from its textual value, as a flag would.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_at(key, value, None)
    }

    fn set_at(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        let r = &mut self.round;
        let s = &mut r.synthesis;
        match key {
            "algorithm" => r.algorithm = parse_val::<Algorithm>(key, value, line)?,
            "rounds" => r.total_rounds = parse_val(key, value, line)?,
            "warmup_rounds" => r.warmup_rounds = parse_val(key, value, line)?,
            "local_epochs" => r.local_epochs = parse_val(key, value, line)?,
            "train_lr" => r.local_lr = parse_val(key, value, line)?,
            "batch_size" => r.batch_size = parse_val(key, value, line)?,
            "beta" => r.beta = parse_val(key, value, line)?,
            "mu" => r.mu = parse_val(key, value, line)?,
            "aggregation" => r.aggregation = parse_val::<Aggregation>(key, value, line)?,
            "master_seed" => r.master_seed = parse_val(key, value, line)?,
            "parallel" => r.parallel = parse_val(key, value, line)?,
            "track_forgetting" => r.track_forgetting = parse_val(key, value, line)?,
            "warm_start" => r.warm_start = parse_val(key, value, line)?,
            "admm_epochs" => s.admm_epochs = parse_val(key, value, line)?,
            "pixel_steps" => s.pixel_steps_per_epoch = parse_val(key, value, line)?,
            "synth_lr" => s.pixel_lr = parse_val(key, value, line)?,
            "rho" => s.rho = parse_val(key, value, line)?,
            "synth_batch_size" => s.batch_size = parse_val(key, value, line)?,
            "ce_only" => s.ce_only = parse_val(key, value, line)?,
            "balance_labels" => s.balance_labels = parse_val(key, value, line)?,
            "init_mode" => self.init_mode = parse_val(key, value, line)?,
            "gamma" => self.gamma = parse_val(key, value, line)?,
            "train_path" => self.train_path = parse_path(value),
            "test_path" => self.test_path = parse_path(value),
            "toy_classes" => self.toy.classes = parse_val(key, value, line)?,
            "toy_side" => self.toy.side = parse_val(key, value, line)?,
            "toy_per_class" => self.toy.per_class = parse_val(key, value, line)?,
            "toy_test_per_class" => self.toy.test_per_class = parse_val(key, value, line)?,
            "toy_sigma" => self.toy.sigma = parse_val(key, value, line)?,
            "n_clients" => self.n_clients = parse_val(key, value, line)?,
            "alpha" => self.alpha = parse_val(key, value, line)?,
            "partition_seed" => {
                self.partition_seed = match value {
                    "" | "auto" => None,
                    v => Some(parse_val(key, v, line)?),
                }
            }
            "holdout_fraction" => self.holdout_fraction = parse_val(key, value, line)?,
            "hidden" => self.hidden = parse_list(key, value, line)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "run_id" => self.run_id = value.to_string(),
            _ => return Err(Error::config(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        self.round.validate()?;
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1".into());
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must be in [0, 1), got {}", self.holdout_fraction));
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.train_path.is_some() != self.test_path.is_some() {
            return bad("train_path and test_path must be given together".into());
        }
        if self.train_path.is_none() {
            let t = &self.toy;
            if t.classes < 2 || t.side == 0 || t.per_class == 0 || t.test_per_class == 0 {
                return bad("toy task needs >= 2 classes and positive side and sample counts".into());
            }
            if !(t.sigma >= 0.0) || !t.sigma.is_finite() {
                return bad(format!("toy_sigma must be non-negative, got {}", t.sigma));
            }
        }
        if self.init_mode == InitMode::Holdout
            && self.round.algorithm == Algorithm::FedImpres
            && self.holdout_fraction == 0.0
        {
            return bad("init_mode = holdout needs holdout_fraction > 0".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad(format!("run_id {:?} is not a plain file name", self.run_id));
        }
        Ok(())
    }

    pub fn resolved_partition_seed(&self) -> u64 {
        self.partition_seed
            .unwrap_or_else(|| seeds::derive(self.round.master_seed, Stream::Partition, 0, 0))
    }

    /// Resolved configuration, one key per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let r = &self.round;
        let s = &r.synthesis;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("algorithm", &r.algorithm);
        kv("rounds", &r.total_rounds);
        kv("warmup_rounds", &r.warmup_rounds);
        kv("local_epochs", &r.local_epochs);
        kv("train_lr", &r.local_lr);
        kv("batch_size", &r.batch_size);
        kv("beta", &r.beta);
        kv("mu", &r.mu);
        kv("aggregation", &r.aggregation);
        kv("master_seed", &r.master_seed);
        kv("parallel", &r.parallel);
        kv("track_forgetting", &r.track_forgetting);
        kv("warm_start", &r.warm_start);
        kv("admm_epochs", &s.admm_epochs);
        kv("pixel_steps", &s.pixel_steps_per_epoch);
        kv("synth_lr", &s.pixel_lr);
        kv("rho", &s.rho);
        kv("synth_batch_size", &s.batch_size);
        kv("ce_only", &s.ce_only);
        kv("balance_labels", &s.balance_labels);
        kv("init_mode", &self.init_mode);
        kv("gamma", &self.gamma);
        kv("train_path", &path(&self.train_path));
        kv("test_path", &path(&self.test_path));
        kv("toy_classes", &self.toy.classes);
        kv("toy_side", &self.toy.side);
        kv("toy_per_class", &self.toy.per_class);
        kv("toy_test_per_class", &self.toy.test_per_class);
        kv("toy_sigma", &self.toy.sigma);
        kv("n_clients", &self.n_clients);
        kv("alpha", &self.alpha);
        kv("partition_seed", &self.resolved_partition_seed());
        kv("holdout_fraction", &self.holdout_fraction);
        kv("hidden", &hidden.join(","));
        kv("run_id", &self.run_id);
        out
    }

    /// Train and test sets from files or the toy generator.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        if let (Some(train), Some(test)) = (&self.train_path, &self.test_path) {
            return Ok((data::load_dataset(train)?, data::load_dataset(test)?));
        }
        let t = &self.toy;
        let m = self.round.master_seed;
        let mut spec = ToySpec::balanced(t.classes, t.side, t.per_class, t.sigma, 0);
        spec.prototype_seed = seeds::derive(m, Stream::ToyTrain, 0, 0);
        spec.sample_seed = seeds::derive(m, Stream::ToyTrain, 1, 0);
        let train = data::make_toy_task(&spec)?;
        spec.per_class = vec![t.test_per_class; t.classes];
        spec.sample_seed = seeds::derive(m, Stream::ToyTest, 0, 0);
        let test = data::make_toy_task(&spec)?;
        Ok((train, test))
    }

    /// Model architecture for inputs of `input_dim` features.
    pub fn model(&self, input_dim: usize, n_classes: usize) -> Result<Model> {
        let seed = seeds::derive(self.round.master_seed, Stream::ModelInit, 0, 0);
        Model::mlp(input_dim, &self.hidden, n_classes, seed)
    }

    /// Everything needed to start a federation.
    pub fn prepare(&self) -> Result<Setup> {
        self.validate()?;
        let (train, test) = self.datasets()?;
        if train.n_classes != test.n_classes || train.image_shape() != test.image_shape() {
            return Err(Error::Input("train and test sets disagree on classes or image shape".into()));
        }
        let m = self.round.master_seed;
        let (holdout, rest) = if self.holdout_fraction > 0.0 {
            data::holdout_split(train.len(), self.holdout_fraction, seeds::derive(m, Stream::Holdout, 0, 0))?
        } else {
            (Vec::new(), (0..train.len()).collect())
        };
        let shards = data::partition_indices(
            &train.labels,
            train.n_classes,
            &rest,
            self.n_clients,
            self.alpha,
            self.resolved_partition_seed(),
        )?;
        let pool = self.pool(&train, &holdout)?;
        let [c, h, w] = train.image_shape();
        let model = self.model(c * h * w, train.n_classes)?;
        Ok(Setup {
            train,
            test,
            holdout,
            shards,
            pool,
            model,
        })
    }

    fn pool(&self, train: &Dataset, holdout: &[usize]) -> Result<Option<SeedPool>> {
        let s = self.round.synthesis.batch_size;
        if self.round.algorithm != Algorithm::FedImpres {
            return Ok(None);
        }
        let pool = match &self.init_mode {
            InitMode::Random => {
                let seed = seeds::derive(self.round.master_seed, Stream::SynthesisPool, 0, 0);
                SeedPool::random(train.image_shape(), s, seed)?
            }
            InitMode::Holdout => SeedPool::from_dataset(&train.subset(holdout)?, s)?,
            InitMode::File(p) => SeedPool::from_file(p, s)?,
        };
        Ok(Some(pool))
    }
}

#[derive(Debug, Clone)]
pub struct Setup {
    pub train: Dataset,
    pub test: Dataset,
    /// Training-set indices withheld from every client.
    pub holdout: Vec<usize>,
    pub shards: ShardSet,
    pub pool: Option<SeedPool>,
    pub model: Model,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.round.synthesis.rho, 0.2);
        assert_eq!(c.round.local_lr, 0.01);
        assert_eq!(c.round.beta, 1.0);
        assert_eq!(c.round.synthesis.admm_epochs, 5);
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn negative_beta_fails_validation() {
        let c = ExperimentConfig::parse("beta = -1").unwrap();
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn flags_override_file() {
        let mut c = ExperimentConfig::parse("beta = 1\n").unwrap();
        c.set("beta", "0.5").unwrap();
        assert_eq!(c.round.beta, 0.5);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = ExperimentConfig::parse("# c\nrho = 0.3\nnope = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: Some(3), .. }), "{e}");
        let e = ExperimentConfig::parse("\n\nrounds = many").unwrap_err();
        assert!(matches!(e, Error::Config { line: Some(3), .. }), "{e}");
        let e = ExperimentConfig::parse("rounds 3").unwrap_err();
        assert!(matches!(e, Error::Config { line: Some(1), .. }), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::parse("algorithm = fedprox # baseline\nhidden = 16,8\ngamma = 0.01").unwrap();
        c.init_mode = InitMode::File("seeds.fidb".into());
        c.train_path = Some("a.fidb".into());
        c.test_path = Some("b.fidb".into());
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.partition_seed, Some(c.resolved_partition_seed()));
        assert_eq!(back.hidden, vec![16, 8]);
    }

    #[test]
    fn prepare_is_deterministic() {
        let mut c = ExperimentConfig::default();
        c.toy.per_class = 30;
        c.round.synthesis.batch_size = 8;
        let a = c.prepare().unwrap();
        let b = c.prepare().unwrap();
        assert_eq!(a.shards, b.shards);
        assert_eq!(a.model, b.model);
        assert_eq!(a.holdout.len(), 12);
        let mut seen: Vec<usize> = a.shards.shards.concat();
        seen.extend(&a.holdout);
        seen.sort();
        assert_eq!(seen, (0..a.train.len()).collect::<Vec<_>>());
    }
}
