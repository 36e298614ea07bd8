//! Monte-Carlo posterior sampling and the variance-based reliability
//! analyses.
//!
//! Draw `k` uses its own ChaCha stream `k` under the shared seed, so results
//! do not depend on how draws are scheduled across threads.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::mae;
use crate::model::{
    bind_constants, draw_noise, forward, means, realize, Batch, ModelConfig, ModelWeights,
    Posterior,
};
use crate::scalar::Scalar;

/// Samples per forward chunk; bounds tape memory for large datasets.
const CHUNK: usize = 256;

/// Per-draw imputations at every unobserved cell and per-sample
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MCResult<S> {
    pub draws: usize,
    /// Flat dataset indices of the unobserved cells, ascending.
    pub cells: Vec<usize>,
    /// `draws × cells`, draw-major.
    pub imputation_samples: Vec<S>,
    /// `draws × samples`, draw-major; sigmoid of the logit.
    pub prediction_samples: Vec<S>,
    pub imputation_mean: Vec<S>,
    pub prediction_mean: Vec<S>,
}

fn column_means<S: Scalar>(rows: &[S], width: usize, draws: usize) -> Vec<S> {
    let mut out = vec![S::zero(); width];
    for row in rows.chunks(width.max(1)).take(draws) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    let k = S::from_usize(draws).unwrap();
    out.iter_mut().for_each(|o| *o /= k);
    out
}

fn column_variances<S: Scalar>(rows: &[S], mean: &[S], draws: usize) -> Vec<S> {
    let width = mean.len();
    let mut out = vec![S::zero(); width];
    for row in rows.chunks(width.max(1)).take(draws) {
        for ((o, &x), &m) in out.iter_mut().zip(row).zip(mean) {
            let d = x - m;
            *o += d * d;
        }
    }
    let k1 = S::from_usize(draws - 1).unwrap();
    out.iter_mut().for_each(|o| *o /= k1);
    out
}

impl<S: Scalar> MCResult<S> {
    /// Assembles a result from per-draw rows.
    pub fn from_draws(
        cells: Vec<usize>,
        imputation_rows: Vec<Vec<S>>,
        prediction_rows: Vec<Vec<S>>,
    ) -> Result<Self> {
        let draws = imputation_rows.len();
        if draws == 0 || prediction_rows.len() != draws {
            return Err(Error::Contract("Monte-Carlo result needs at least one draw".into()));
        }
        let n = prediction_rows[0].len();
        if imputation_rows.iter().any(|r| r.len() != cells.len())
            || prediction_rows.iter().any(|r| r.len() != n)
        {
            return Err(Error::Dimension {
                op: "mc draws",
                lhs: vec![cells.len(), n],
                rhs: vec![imputation_rows[0].len(), prediction_rows[0].len()],
            });
        }
        let imputation_samples: Vec<S> = imputation_rows.concat();
        let prediction_samples: Vec<S> = prediction_rows.concat();
        Ok(MCResult {
            imputation_mean: column_means(&imputation_samples, cells.len(), draws),
            prediction_mean: column_means(&prediction_samples, n, draws),
            draws,
            cells,
            imputation_samples,
            prediction_samples,
        })
    }

    pub fn samples(&self) -> usize {
        self.prediction_mean.len()
    }

    /// Draws for one cell, by position in [`MCResult::cells`].
    pub fn cell_samples(&self, position: usize) -> Vec<S> {
        let w = self.cells.len();
        (0..self.draws)
            .map(|k| self.imputation_samples[k * w + position])
            .collect()
    }

    fn need_two(&self) -> Result<()> {
        if self.draws < 2 {
            return Err(Error::Contract(format!(
                "variance needs at least 2 Monte-Carlo draws, have {}",
                self.draws
            )));
        }
        Ok(())
    }

    /// Unbiased per-cell variance.
    pub fn imputation_variance(&self) -> Result<Vec<S>> {
        self.need_two()?;
        Ok(column_variances(
            &self.imputation_samples,
            &self.imputation_mean,
            self.draws,
        ))
    }

    /// Unbiased per-sample variance of the predicted probability.
    pub fn prediction_variance(&self) -> Result<Vec<S>> {
        self.need_two()?;
        Ok(column_variances(
            &self.prediction_samples,
            &self.prediction_mean,
            self.draws,
        ))
    }

    /// Position of a flat cell index within [`MCResult::cells`].
    pub fn position(&self, flat: usize) -> Option<usize> {
        self.cells.binary_search(&flat).ok()
    }
}

fn unobserved_cells(ds: &Dataset) -> Vec<usize> {
    ds.observed
        .iter()
        .enumerate()
        .filter(|(_, &o)| !o)
        .map(|(k, _)| k)
        .collect()
}

/// One forward of fixed weights over the whole dataset. Returns the
/// imputations at `cells` and per-sample probabilities.
pub fn forward_dataset<S: Scalar>(
    model: &ModelConfig,
    weights: &ModelWeights<Tensor<S>>,
    ds: &Dataset,
    cells: &[usize],
) -> Result<(Vec<S>, Vec<S>)> {
    let n = ds.len();
    let (t_len, m) = (ds.steps, ds.features());
    let mut grid = vec![S::zero(); n * t_len * m];
    let mut probs = Vec::with_capacity(n);
    let order: Vec<usize> = (0..n).collect();
    for chunk in order.chunks(CHUNK) {
        let batch = Batch::<S>::from_dataset(ds, chunk);
        let mut tape = Tape::new();
        let w = bind_constants(&mut tape, weights);
        let traj = forward(&mut tape, model, &w, &batch)?;
        for (row, res) in traj.results(&tape).into_iter().enumerate() {
            let i = chunk[row];
            let base = i * t_len * m;
            grid[base..base + t_len * m].copy_from_slice(&res.x_hat);
            probs.push(res.logit.sigmoid());
        }
    }
    if let Some(bad) = cells.iter().find(|&&c| !grid[c].is_finite()) {
        let (i, t, f) = ds.cell(*bad);
        return Err(Error::NonFinite(format!(
            "imputation of sample {i} step {t} feature {f}"
        )));
    }
    Ok((cells.iter().map(|&c| grid[c]).collect(), probs))
}

/// Runs `draws` forwards with weights from `post`. In deterministic mode
/// every draw uses the posterior means.
pub fn mc_forward<S: Scalar>(
    model: &ModelConfig,
    post: &Posterior<S>,
    ds: &Dataset,
    draws: usize,
    seed: u64,
) -> Result<MCResult<S>> {
    if draws == 0 {
        return Err(Error::Contract("Monte-Carlo sampling needs at least one draw".into()));
    }
    let weights: Vec<ModelWeights<Tensor<S>>> = (0..draws)
        .map(|k| {
            if model.deterministic {
                Ok(means(post))
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                realize(post, &draw_noise(post, &mut rng))
            }
        })
        .collect::<Result<_>>()?;
    mc_from_realized(model, &weights, ds)
}

/// Monte-Carlo result for explicitly supplied weight draws.
pub fn mc_from_realized<S: Scalar>(
    model: &ModelConfig,
    weights: &[ModelWeights<Tensor<S>>],
    ds: &Dataset,
) -> Result<MCResult<S>> {
    let cells = unobserved_cells(ds);
    let rows: Vec<(Vec<S>, Vec<S>)> = weights
        .par_iter()
        .map(|w| forward_dataset(model, w, ds, &cells))
        .collect::<Result<_>>()?;
    let (imp, pred): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    MCResult::from_draws(cells, imp, pred)
}

/// Per-cell truth, estimate and variance at the evaluation cells.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCells {
    pub cells: Vec<usize>,
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Gathers the held-out cells of `ds` from `mc`.
pub fn eval_cells<S: Scalar>(mc: &MCResult<S>, ds: &Dataset) -> Result<EvalCells> {
    let var = mc.imputation_variance()?;
    let mut out = EvalCells {
        cells: Vec::new(),
        truth: Vec::new(),
        estimate: Vec::new(),
        variance: Vec::new(),
    };
    for (pos, &c) in mc.cells.iter().enumerate() {
        if ds.eval_mask[c] {
            out.cells.push(c);
            out.truth.push(ds.eval_truth[c]);
            out.estimate.push(mc.imputation_mean[pos].to_f64_lossy());
            out.variance.push(var[pos].to_f64_lossy());
        }
    }
    if out.cells.is_empty() {
        return Err(Error::Degenerate(
            "no held-out cells with known truth to analyse".into(),
        ));
    }
    Ok(out)
}

/// Positions of `variance` sorted ascending, ties by position.
fn ascending_order(variance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..variance.len()).collect();
    order.sort_by(|&a, &b| variance[a].total_cmp(&variance[b]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityCurve {
    /// Percent of cells retained, ascending.
    pub retained_percent: Vec<u32>,
    pub retained: Vec<usize>,
    pub mae: Vec<f64>,
}

pub const RETAIN_PERCENTS: [u32; 6] = [50, 60, 70, 80, 90, 100];

/// MAE of the lowest-variance cells at each retention level. Retaining
/// `p` percent keeps `ceil(p·n/100)` cells.
pub fn variance_percentile_curve(cells: &EvalCells, percents: &[u32]) -> Result<ReliabilityCurve> {
    let n = cells.cells.len();
    if n == 0 {
        return Err(Error::Degenerate("reliability curve needs evaluation cells".into()));
    }
    let order = ascending_order(&cells.variance);
    let mut curve = ReliabilityCurve {
        retained_percent: Vec::new(),
        retained: Vec::new(),
        mae: Vec::new(),
    };
    for &p in percents {
        let keep = ((p as usize * n).div_ceil(100)).clamp(1, n);
        let truth: Vec<f64> = order[..keep].iter().map(|&i| cells.truth[i]).collect();
        let est: Vec<f64> = order[..keep].iter().map(|&i| cells.estimate[i]).collect();
        curve.retained_percent.push(p);
        curve.retained.push(keep);
        curve.mae.push(mae(&truth, &est)?);
    }
    Ok(curve)
}

/// MAE within each of ten equal-count variance bins, lowest first.
pub fn decile_mae(cells: &EvalCells) -> Result<Vec<f64>> {
    let n = cells.cells.len();
    if n < 10 {
        return Err(Error::Degenerate(format!(
            "variance deciles need at least 10 cells, have {n}"
        )));
    }
    let order = ascending_order(&cells.variance);
    (0..10)
        .map(|d| {
            let span = &order[d * n / 10..(d + 1) * n / 10];
            let truth: Vec<f64> = span.iter().map(|&i| cells.truth[i]).collect();
            let est: Vec<f64> = span.iter().map(|&i| cells.estimate[i]).collect();
            mae(&truth, &est)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVariability {
    pub feature: usize,
    pub name: String,
    pub cells: usize,
    pub mean_variance: f64,
    pub mae: f64,
}

/// Per-feature mean variance and MAE, sorted by mean variance. Features
/// without evaluation cells are left out.
pub fn per_feature_variability(cells: &EvalCells, ds: &Dataset) -> Result<Vec<FeatureVariability>> {
    let m = ds.features();
    let mut rows = Vec::new();
    for f in 0..m {
        let idx: Vec<usize> = (0..cells.cells.len())
            .filter(|&i| ds.cell(cells.cells[i]).2 == f)
            .collect();
        if idx.is_empty() {
            warn!("feature `{}` has no evaluation cells; row omitted", ds.feature_names[f]);
            continue;
        }
        let truth: Vec<f64> = idx.iter().map(|&i| cells.truth[i]).collect();
        let est: Vec<f64> = idx.iter().map(|&i| cells.estimate[i]).collect();
        let var_sum: f64 = idx.iter().map(|&i| cells.variance[i]).sum();
        rows.push(FeatureVariability {
            feature: f,
            name: ds.feature_names[f].clone(),
            cells: idx.len(),
            mean_variance: var_sum / idx.len() as f64,
            mae: mae(&truth, &est)?,
        });
    }
    rows.sort_by(|a, b| a.mean_variance.total_cmp(&b.mean_variance).then(a.feature.cmp(&b.feature)));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub samples: Vec<f64>,
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub truth: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Freedman-Diaconis histogram of `samples`; bin width `2·IQR·n^(-1/3)`.
/// A zero range or IQR gives a single bin.
pub fn histogram(samples: &[f64], truth: Option<f64>) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Degenerate("histogram of no samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let width = 2.0 * iqr / (samples.len() as f64).cbrt();
    let bins = if hi > lo && width > 0.0 {
        (((hi - lo) / width).ceil() as usize).clamp(1, 1000)
    } else {
        1
    };
    let step = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { hi } else { lo + step * b as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = if step > 0.0 {
            (((x - lo) / step) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Ok(Histogram {
        samples: samples.to_vec(),
        edges,
        counts,
        truth,
    })
}

/// Histogram of the draws at one unobserved cell, with truth when known.
pub fn imputation_distribution<S: Scalar>(
    mc: &MCResult<S>,
    ds: &Dataset,
    flat: usize,
) -> Result<Histogram> {
    let pos = mc.position(flat).ok_or_else(|| {
        Error::Contract(format!("cell {flat} is not an unobserved cell of the dataset"))
    })?;
    let samples: Vec<f64> = mc.cell_samples(pos).iter().map(|s| s.to_f64_lossy()).collect();
    let truth = if ds.eval_mask[flat] {
        Some(ds.eval_truth[flat])
    } else {
        ds.ground_truth.as_ref().map(|g| g[flat])
    };
    histogram(&samples, truth)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows of kind `sample` (draw, value), `bin` (lower, upper, count) and
/// optionally `truth` (value).
pub fn write_distribution_csv(h: &Histogram, cell: (usize, usize, usize), path: &Path) -> Result<()> {
    let (i, t, f) = cell;
    let mut s = String::from("kind,sample,step,feature,index,lower,upper,value\n");
    for (k, v) in h.samples.iter().enumerate() {
        writeln!(s, "sample,{i},{t},{f},{k},,,{v}").unwrap();
    }
    for (b, c) in h.counts.iter().enumerate() {
        writeln!(s, "bin,{i},{t},{f},{b},{},{},{c}", h.edges[b], h.edges[b + 1]).unwrap();
    }
    if let Some(v) = h.truth {
        writeln!(s, "truth,{i},{t},{f},,,,{v}").unwrap();
    }
    write(path, &s)
}

pub fn write_reliability_csv(curve: &ReliabilityCurve, path: &Path) -> Result<()> {
    let mut s = String::from("retained_percent,retained_cells,mae\n");
    for k in 0..curve.mae.len() {
        writeln!(
            s,
            "{},{},{}",
            curve.retained_percent[k], curve.retained[k], curve.mae[k]
        )
        .unwrap();
    }
    write(path, &s)
}

pub fn write_per_feature_csv(rows: &[FeatureVariability], path: &Path) -> Result<()> {
    let mut s = String::from("feature,name,cells,mean_variance,mae\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.feature, r.name, r.cells, r.mean_variance, r.mae).unwrap();
    }
    write(path, &s)
}
