use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedimpres::config::ExperimentConfig;
use fedimpres::data;
use fedimpres::engine::{run_experiment, Federation};
use fedimpres::error::{Error, Result};
use fedimpres::impression;
use fedimpres::metrics::{self, RecordFormat};
use fedimpres::{par, weights};

#[derive(Parser)]
#[command(name = "fedimpres", version, about = "Federated learning with server-side impression synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full experiment and write records, weights and the resolved config.
    Run(Common),
    /// Partition the training set and write one index file per client.
    Partition(Common),
    /// Synthesize one impression batch from a saved model.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Weights of the server model.
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a saved model on a FIDB file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long = "local-epochs")]
    local_epochs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let flags: [(&str, Option<String>); 9] = [
            ("master_seed", self.seed.map(|v| v.to_string())),
            ("algorithm", self.algorithm.clone()),
            ("beta", self.beta.map(|v| v.to_string())),
            ("rho", self.rho.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("n_clients", self.clients.map(|v| v.to_string())),
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("local_epochs", self.local_epochs.map(|v| v.to_string())),
            ("out_dir", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

fn run(cfg: &ExperimentConfig) -> Result<()> {
    let setup = cfg.prepare()?;
    let dir = out_dir(cfg)?;
    let mut fed = Federation::new(
        cfg.round.clone(),
        &setup.train,
        &setup.shards,
        setup.test,
        setup.pool,
        &setup.model,
    )?;
    let ex = run_experiment(&mut fed, setup.model)?;
    let alg = cfg.round.algorithm.to_string();
    for fmt in [RecordFormat::Csv, RecordFormat::Json] {
        metrics::write_records(&ex.records, dir.join(metrics::record_file_name(&cfg.run_id, &alg, fmt)), fmt)?;
    }
    if cfg.round.track_forgetting {
        let curve = metrics::forgetting_curve(&ex.records);
        write(&dir.join(format!("{}_{alg}_forgetting.csv", cfg.run_id)), curve.to_csv())?;
    }
    weights::save_model(&ex.global, dir.join(format!("{}_{alg}_weights.bin", cfg.run_id)))?;
    if let Some(last) = ex.records.last() {
        println!("{alg}: final test accuracy {:.4}, loss {:.4}", last.global_acc, last.global_loss);
    }
    Ok(())
}

fn partition(cfg: &ExperimentConfig) -> Result<()> {
    let setup = cfg.prepare()?;
    let dir = out_dir(cfg)?;
    let lines = |idx: &[usize]| idx.iter().map(|i| format!("{i}\n")).collect::<String>();
    for (i, shard) in setup.shards.shards.iter().enumerate() {
        write(&dir.join(format!("shard_{i}.txt")), lines(shard))?;
    }
    write(&dir.join("holdout.txt"), lines(&setup.holdout))?;
    for (i, row) in setup.shards.histogram(&setup.train.labels, setup.train.n_classes).iter().enumerate() {
        println!("client {i}: {row:?}");
    }
    Ok(())
}

fn synthesize(cfg: &ExperimentConfig, model_path: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    // a pool is only built for the synthesizing algorithm
    cfg.round.algorithm = fedimpres::engine::Algorithm::FedImpres;
    let setup = cfg.prepare()?;
    let server = weights::load_model(setup.model.layers().to_vec(), model_path)?;
    let pool = setup
        .pool
        .ok_or_else(|| Error::Validation("no synthesis seed pool configured".into()))?;
    let batch = impression::synthesize(&server, &pool, &cfg.round.synthesis)?;
    let dir = out_dir(&cfg)?;
    data::save_dataset(&batch.to_dataset()?, dir.join(format!("{}_impressions.fidb", cfg.run_id)))?;
    let first = batch.history.first().map_or(f64::NAN, |h| h.ce);
    let last = impression::ce_sum(&server, &batch.images, &batch.pseudo_labels)?;
    println!("impressions: {} images, ce {first:.6} -> {last:.6}", batch.len());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, model_path: &Path, data_path: &Path) -> Result<()> {
    let ds = data::load_dataset(data_path)?;
    let [c, h, w] = ds.image_shape();
    let layers = cfg.model(c * h * w, ds.n_classes)?.layers().to_vec();
    let model = weights::load_model(layers, model_path)?;
    let (acc, loss) = metrics::evaluate(&model, &ds)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "accuracy {acc}");
    let _ = writeln!(out, "loss {loss}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run(c) => run(&c.resolve()?),
        Cmd::Partition(c) => partition(&c.resolve()?),
        Cmd::Synthesize { common, model } => synthesize(&common.resolve()?, &model),
        Cmd::Eval { common, model, data } => eval(&common.resolve()?, &model, &data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    par::init_from_env();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
