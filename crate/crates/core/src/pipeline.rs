//! End-to-end protocol: split, normalize with training statistics, hide a
//! fraction of observed cells, train, then score imputation at the hidden
//! test cells and prediction on the test labels.

use log::warn;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::data::{baseline_impute, normalize, simulate_mar, split, Dataset, ImputeStrategy, NormStats};
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc, mae, mre};
use crate::model::{init_posterior, ModelConfig, Posterior};
use crate::train::{train, EpochLog, TrainConfig};
use crate::uncertainty::{
    decile_mae, eval_cells, imputation_distribution, mc_forward, per_feature_variability,
    variance_percentile_curve, EvalCells, FeatureVariability, Histogram, MCResult,
    ReliabilityCurve, RETAIN_PERCENTS,
};

/// Independent seed streams derived from the run seed.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const MAR_TRAIN: u64 = 2;
    pub const MAR_TEST: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const MC: u64 = 6;
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub test_fraction: f64,
    pub mar_rate: f64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            test_fraction: 0.2,
            mar_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
}

/// Splits `raw`, normalizes both parts with `norm` (fitted on the training
/// part when `None`) and hides `mar_rate` of each sample's observed cells.
pub fn prepare(raw: &Dataset, cfg: &ProtocolConfig, norm: Option<&NormStats>) -> Result<Prepared> {
    if raw.normalized {
        return Err(Error::Contract("protocol expects raw-scale data".into()));
    }
    let (train_raw, test_raw) = split(raw, cfg.test_fraction, derive_seed(cfg.seed, stream::SPLIT))?;
    let norm = match norm {
        Some(n) => n.clone(),
        None => NormStats::fit(&train_raw)?,
    };
    if norm.mean.len() != raw.features() {
        return Err(Error::Config(format!(
            "normalization stats cover {} features, data has {}",
            norm.mean.len(),
            raw.features()
        )));
    }
    let train = simulate_mar(
        &normalize(&train_raw, &norm)?,
        cfg.mar_rate,
        derive_seed(cfg.seed, stream::MAR_TRAIN),
    )?;
    let test = simulate_mar(
        &normalize(&test_raw, &norm)?,
        cfg.mar_rate,
        derive_seed(cfg.seed, stream::MAR_TEST),
    )?;
    Ok(Prepared { train, test, norm })
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Initializes and trains a model on `prepared.train`. `train_cfg.seed` is
/// overridden by a stream of `seed`.
pub fn fit(
    prepared: &Prepared,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<Fitted> {
    let init: Posterior<f64> = init_posterior(model, derive_seed(seed, stream::INIT))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, stream::TRAIN),
        ..train_cfg.clone()
    };
    let out = train(&prepared.train, model, &cfg, init)?;
    Ok(Fitted {
        checkpoint: Checkpoint {
            model: model.clone(),
            posterior: out.posterior,
            norm: prepared.norm.clone(),
            meta: TrainingMeta {
                epochs_run: out.log.len(),
                final_loss: out.final_loss,
                seed,
            },
            settings: Vec::new(),
        },
        log: out.log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRow {
    pub method: String,
    pub mae: Option<f64>,
    pub mre: Option<f64>,
}

/// Metrics on the test split. Imputation metrics are on the normalized
/// scale at the held-out cells; ranking metrics use the Monte-Carlo mean
/// probability.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: String,
    pub mae: Option<f64>,
    pub mre: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub n_eval_cells: usize,
    pub n_test_samples: usize,
    pub mc_samples: usize,
    pub baselines: Vec<BaselineRow>,
}

fn optional(what: &str, r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(msg)) | Err(Error::Degenerate(msg)) => {
            warn!("{what} undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn held_out(ds: &Dataset, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    ds.eval_mask
        .iter()
        .enumerate()
        .filter(|(_, &e)| e)
        .map(|(k, _)| (ds.eval_truth[k], grid[k]))
        .unzip()
}

pub fn baseline_rows(test: &Dataset) -> Result<Vec<BaselineRow>> {
    ImputeStrategy::ALL
        .iter()
        .map(|&s| {
            let grid = baseline_impute(test, s, None)?;
            let (truth, est) = held_out(test, &grid);
            Ok(BaselineRow {
                method: s.name().to_string(),
                mae: optional("baseline mae", mae(&truth, &est))?,
                mre: optional("baseline mre", mre(&truth, &est))?,
            })
        })
        .collect()
}

/// The model's imputation at every cell: observed values pass through,
/// unobserved cells take the Monte-Carlo mean.
pub fn completed_grid(ds: &Dataset, mc: &MCResult<f64>) -> Vec<f64> {
    let mut grid = ds.values.clone();
    for (&c, &v) in mc.cells.iter().zip(&mc.imputation_mean) {
        grid[c] = v;
    }
    grid
}

pub fn evaluate(
    model: &ModelConfig,
    posterior: &Posterior<f64>,
    test: &Dataset,
    mc_samples: usize,
    seed: u64,
) -> Result<(MetricReport, MCResult<f64>)> {
    let mc = mc_forward(model, posterior, test, mc_samples, derive_seed(seed, stream::MC))?;
    let grid = completed_grid(test, &mc);
    let (truth, est) = held_out(test, &grid);
    let report = MetricReport {
        method: if model.deterministic { "deterministic" } else { "bayesian" }.to_string(),
        mae: optional("mae", mae(&truth, &est))?,
        mre: optional("mre", mre(&truth, &est))?,
        auroc: optional("auroc", auroc(&test.labels, &mc.prediction_mean))?,
        auprc: optional("auprc", auprc(&test.labels, &mc.prediction_mean))?,
        n_eval_cells: truth.len(),
        n_test_samples: test.len(),
        mc_samples,
        baselines: baseline_rows(test)?,
    };
    Ok((report, mc))
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub cells: EvalCells,
    pub curve: ReliabilityCurve,
    pub deciles: Option<Vec<f64>>,
    pub per_feature: Vec<FeatureVariability>,
    /// Flat index of the cell whose draws are exported.
    pub distribution_cell: usize,
    pub distribution: Histogram,
}

/// Reliability analyses on held-out cells. The exported distribution is
/// for the held-out cell with the largest variance.
pub fn analyze(mc: &MCResult<f64>, test: &Dataset) -> Result<Analysis> {
    let cells = eval_cells(mc, test)?;
    let curve = variance_percentile_curve(&cells, &RETAIN_PERCENTS)?;
    let deciles = match decile_mae(&cells) {
        Ok(d) => Some(d),
        Err(Error::Degenerate(msg)) => {
            warn!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let per_feature = per_feature_variability(&cells, test)?;
    let pick = (0..cells.cells.len())
        .max_by(|&a, &b| cells.variance[a].total_cmp(&cells.variance[b]).then(b.cmp(&a)))
        .expect("eval cells are non-empty");
    let distribution_cell = cells.cells[pick];
    let distribution = imputation_distribution(mc, test, distribution_cell)?;
    Ok(Analysis {
        cells,
        curve,
        deciles,
        per_feature,
        distribution_cell,
        distribution,
    })
}
