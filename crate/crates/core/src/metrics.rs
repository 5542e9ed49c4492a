//! Accuracy, cross-client forgetting matrices, round records and their
//! CSV / JSON emission.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::loss::ce_per_sample;
use crate::nn::Model;
use crate::par;
use crate::tensor::argmax;

/// `entries[i][j]`: accuracy of client `i`'s model on client `j`'s shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAccuracyMatrix {
    pub entries: Vec<Vec<f64>>,
}

impl CrossAccuracyMatrix {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Mean of row `i` excluding the diagonal. A single-client matrix has no
    /// off-diagonal entries and reports its diagonal.
    pub fn off_diagonal_mean(&self, i: usize) -> f64 {
        let row = &self.entries[i];
        if row.len() == 1 {
            return row[0];
        }
        let s: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
        s / (row.len() - 1) as f64
    }

    /// Mean over all off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        (0..self.size()).map(|i| self.off_diagonal_mean(i)).sum::<f64>() / self.size() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub n_samples: usize,
    /// Local model on its own shard after training.
    pub local_loss: f64,
    pub local_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionStats {
    pub initial_ce: f64,
    pub final_ce: f64,
    pub final_penalty: f64,
    pub constraint_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub algorithm: String,
    pub clients: Vec<ClientRecord>,
    pub global_acc: f64,
    pub global_loss: f64,
    /// Cross accuracies of the local models at the end of local training.
    pub cross: Option<CrossAccuracyMatrix>,
    /// Cross accuracies sampled during local training, one matrix per local
    /// epoch boundary (index 0 is the broadcast model).
    pub probes: Vec<CrossAccuracyMatrix>,
    pub impression: Option<ImpressionStats>,
}

/// `(accuracy, mean cross-entropy)` of `model` on `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    // fixed-size chunks bound memory; per-sample terms are summed in order
    const CHUNK: usize = 512;
    let mut correct = 0usize;
    let mut loss = 0.0;
    let n = dataset.len();
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let x = dataset.images.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        let logits = model.forward(&x)?;
        for (r, &yi) in y.iter().enumerate() {
            if argmax(logits.row(r)) == yi {
                correct += 1;
            }
        }
        loss += ce_per_sample(&logits, &y)?.iter().sum::<f64>();
    }
    Ok((correct as f64 / n as f64, loss / n as f64))
}

pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    Ok(evaluate(model, dataset)?.0)
}

/// Every model against every shard.
pub fn cross_matrix(models: &[Model], shards: &[Dataset], parallel: bool) -> Result<CrossAccuracyMatrix> {
    if models.len() != shards.len() {
        return Err(Error::Input(format!(
            "{} models for {} evaluation shards",
            models.len(),
            shards.len()
        )));
    }
    let rows = par::map(models, parallel, |m| accuracy_row(m, shards));
    Ok(CrossAccuracyMatrix {
        entries: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// One model against every shard.
pub fn accuracy_row(model: &Model, shards: &[Dataset]) -> Result<Vec<f64>> {
    shards.iter().map(|s| accuracy(model, s)).collect()
}

/// Per-client series of mean off-diagonal accuracy over all probe points of
/// all records, in round then epoch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCurve {
    /// `(round, epoch)` of each sample point.
    pub points: Vec<(usize, usize)>,
    /// `series[client][point]`
    pub series: Vec<Vec<f64>>,
}

pub fn forgetting_curve(records: &[RoundRecord]) -> ForgettingCurve {
    let n = records
        .iter()
        .flat_map(|r| r.probes.first())
        .map(CrossAccuracyMatrix::size)
        .next()
        .unwrap_or(0);
    let mut points = Vec::new();
    let mut series = vec![Vec::new(); n];
    for r in records {
        for (e, m) in r.probes.iter().enumerate() {
            points.push((r.round, e));
            for (i, s) in series.iter_mut().enumerate() {
                s.push(m.off_diagonal_mean(i));
            }
        }
    }
    ForgettingCurve { points, series }
}

impl ForgettingCurve {
    /// Long form: `round,epoch,client,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,epoch,client,value\n");
        for (i, s) in self.series.iter().enumerate() {
            for ((round, epoch), v) in self.points.iter().zip(s) {
                let _ = writeln!(out, "{round},{epoch},{i},{v}");
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    Json,
}

impl std::str::FromStr for RecordFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Input(format!("unknown record format {other:?}"))),
        }
    }
}

/// Long-form CSV with columns `round,client,metric,value`.
///
/// Server-level metrics use `global` (evaluation) or `server` (synthesis) in
/// the client column.
pub fn records_to_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from("round,client,metric,value\n");
    for r in records {
        let round = r.round;
        let mut row = |client: &dyn std::fmt::Display, metric: &str, value: f64| {
            let _ = writeln!(out, "{round},{client},{metric},{value}");
        };
        for c in &r.clients {
            row(&c.client, "n_samples", c.n_samples as f64);
            row(&c.client, "local_loss", c.local_loss);
            row(&c.client, "local_acc", c.local_acc);
        }
        row(&"global", "test_acc", r.global_acc);
        row(&"global", "test_loss", r.global_loss);
        if let Some(m) = &r.cross {
            for (i, rowv) in m.entries.iter().enumerate() {
                for (j, v) in rowv.iter().enumerate() {
                    row(&i, &format!("cross_acc_{j}"), *v);
                }
            }
        }
        for (e, m) in r.probes.iter().enumerate() {
            for i in 0..m.size() {
                row(&i, &format!("probe_off_diag_e{e}"), m.off_diagonal_mean(i));
            }
        }
        if let Some(s) = &r.impression {
            row(&"server", "impression_initial_ce", s.initial_ce);
            row(&"server", "impression_final_ce", s.final_ce);
            row(&"server", "impression_final_penalty", s.final_penalty);
            row(&"server", "impression_constraint_norm", s.constraint_norm);
        }
    }
    out
}

pub fn records_to_json(records: &[RoundRecord]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(records)?;
    s.push('\n');
    Ok(s)
}

pub fn records_from_json(text: &str) -> Result<Vec<RoundRecord>> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_records(records: &[RoundRecord], path: impl AsRef<Path>, format: RecordFormat) -> Result<()> {
    let path = path.as_ref();
    let body = match format {
        RecordFormat::Csv => records_to_csv(records),
        RecordFormat::Json => records_to_json(records)?,
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// `{run_id}_{algorithm}.{ext}`
pub fn record_file_name(run_id: &str, algorithm: &str, format: RecordFormat) -> String {
    let ext = match format {
        RecordFormat::Csv => "csv",
        RecordFormat::Json => "json",
    };
    format!("{run_id}_{algorithm}.{ext}")
}
