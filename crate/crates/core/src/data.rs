//! Gridded time-series datasets: CSV ingestion, normalization, gap
//! bookkeeping, simulated missingness, splitting and a synthetic generator.
//!
//! Cells are stored flat in sample-major, then time, then feature order.
//! Unobserved cells hold `0.0` in `values`; after normalization that equals
//! the feature mean, so zero-fill and mean-fill coincide.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hourly grid length of the clinical benchmarks.
pub const DEFAULT_STEPS: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub steps: usize,
    /// N×T×M, zero where unobserved.
    pub values: Vec<f64>,
    /// Observation mask V: true = observed and visible to the model.
    pub observed: Vec<bool>,
    /// Steps since the previous observation, per feature.
    pub deltas: Vec<f64>,
    pub labels: Vec<u8>,
    /// Observed cells hidden from the model for imputation scoring.
    pub eval_mask: Vec<bool>,
    /// Original values at `eval_mask` cells, zero elsewhere.
    pub eval_truth: Vec<f64>,
    /// Complete grid without missingness, when known (synthetic data).
    pub ground_truth: Option<Vec<f64>>,
    pub normalized: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn cells_per_sample(&self) -> usize {
        self.steps * self.features()
    }

    #[inline]
    pub fn idx(&self, sample: usize, step: usize, feature: usize) -> usize {
        (sample * self.steps + step) * self.features() + feature
    }

    /// Inverse of [`Dataset::idx`].
    pub fn cell(&self, flat: usize) -> (usize, usize, usize) {
        let m = self.features();
        let per = self.cells_per_sample();
        (flat / per, (flat % per) / m, flat % m)
    }

    pub fn eval_cell_count(&self) -> usize {
        self.eval_mask.iter().filter(|&&e| e).count()
    }

    /// A new dataset holding the given samples, in the given order.
    pub fn subset(&self, samples: &[usize]) -> Dataset {
        let per = self.cells_per_sample();
        let gather_f = |src: &[f64]| -> Vec<f64> {
            samples
                .iter()
                .flat_map(|&i| src[i * per..(i + 1) * per].iter().copied())
                .collect()
        };
        let gather_b = |src: &[bool]| -> Vec<bool> {
            samples
                .iter()
                .flat_map(|&i| src[i * per..(i + 1) * per].iter().copied())
                .collect()
        };
        Dataset {
            sample_ids: samples.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            steps: self.steps,
            values: gather_f(&self.values),
            observed: gather_b(&self.observed),
            deltas: gather_f(&self.deltas),
            labels: samples.iter().map(|&i| self.labels[i]).collect(),
            eval_mask: gather_b(&self.eval_mask),
            eval_truth: gather_f(&self.eval_truth),
            ground_truth: self.ground_truth.as_deref().map(gather_f),
            normalized: self.normalized,
        }
    }

    /// Recomputes `deltas` from the current observation mask.
    pub fn recompute_deltas(&mut self, step_length: f64) {
        let (t_len, m) = (self.steps, self.features());
        let mut series = vec![false; t_len];
        for i in 0..self.len() {
            for f in 0..m {
                for (t, s) in series.iter_mut().enumerate() {
                    *s = self.observed[self.idx(i, t, f)];
                }
                for (t, d) in compute_deltas(&series, step_length).into_iter().enumerate() {
                    let k = self.idx(i, t, f);
                    self.deltas[k] = d;
                }
            }
        }
    }

    fn check_shape(&self) -> Result<()> {
        let cells = self.len() * self.cells_per_sample();
        let lens = [
            self.values.len(),
            self.observed.len(),
            self.deltas.len(),
            self.eval_mask.len(),
            self.eval_truth.len(),
        ];
        if lens.iter().any(|&l| l != cells) || self.labels.len() != self.len() {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: vec![self.len(), self.steps, self.features()],
                rhs: lens.to_vec(),
            });
        }
        Ok(())
    }
}

/// Gap recurrence for one feature: `δ¹ = 0`; `δᵗ = step + δᵗ⁻¹` after a
/// missing step, else `step`.
pub fn compute_deltas(observed: &[bool], step_length: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(observed.len());
    for t in 0..observed.len() {
        let d = if t == 0 {
            0.0
        } else if observed[t - 1] {
            step_length
        } else {
            step_length + out[t - 1]
        };
        out.push(d);
    }
    out
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a values CSV (`sample_id,hour,f1..fM`, empty = missing) and a
/// labels CSV (`sample_id,label`) onto a `steps`-long hourly grid.
///
/// Later rows for the same `(sample, hour)` overwrite earlier non-empty
/// cells. Samples appear in order of first occurrence.
pub fn load_csv(values_path: &Path, labels_path: &Path, steps: usize) -> Result<Dataset> {
    let text = read(values_path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(values_path, 1, "missing header row"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "hour" {
        return Err(parse_err(
            values_path,
            1,
            "header must be `sample_id,hour,<feature>...`",
        ));
    }
    let feature_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let m = feature_names.len();
    let per = steps * m;

    let mut order: HashMap<String, usize> = HashMap::new();
    let mut sample_ids = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut observed: Vec<bool> = Vec::new();

    for (ln, line) in lines {
        let line_no = ln + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != m + 2 {
            return Err(parse_err(
                values_path,
                line_no,
                format!("expected {} fields, found {}", m + 2, fields.len()),
            ));
        }
        let hour: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(values_path, line_no, format!("bad hour `{}`", fields[1])))?;
        if hour >= steps {
            return Err(parse_err(
                values_path,
                line_no,
                format!("hour {hour} outside [0, {steps})"),
            ));
        }
        let sample = *order.entry(fields[0].to_string()).or_insert_with(|| {
            sample_ids.push(fields[0].to_string());
            values.resize(values.len() + per, 0.0);
            observed.resize(observed.len() + per, false);
            sample_ids.len() - 1
        });
        for (f, raw) in fields[2..].iter().enumerate() {
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| {
                parse_err(values_path, line_no, format!("non-numeric cell `{raw}`"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(values_path, line_no, format!("non-finite cell `{raw}`")));
            }
            let k = (sample * steps + hour) * m + f;
            values[k] = v;
            observed[k] = true;
        }
    }

    let mut labels: Vec<Option<u8>> = vec![None; sample_ids.len()];
    let text = read(labels_path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "sample_id,label")) => {}
        _ => return Err(parse_err(labels_path, 1, "header must be `sample_id,label`")),
    }
    for (ln, line) in lines {
        let line_no = ln + 1;
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| parse_err(labels_path, line_no, "expected `sample_id,label`"))?;
        let &sample = order
            .get(id)
            .ok_or_else(|| parse_err(labels_path, line_no, format!("unknown sample_id `{id}`")))?;
        labels[sample] = Some(match label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    labels_path,
                    line_no,
                    format!("label must be 0 or 1, found `{other}`"),
                ))
            }
        });
    }
    let labels = labels
        .into_iter()
        .zip(&sample_ids)
        .map(|(l, id)| {
            l.ok_or_else(|| parse_err(labels_path, 0, format!("no label for sample `{id}`")))
        })
        .collect::<Result<Vec<u8>>>()?;

    let cells = values.len();
    let mut ds = Dataset {
        sample_ids,
        feature_names,
        steps,
        values,
        observed,
        deltas: vec![0.0; cells],
        labels,
        eval_mask: vec![false; cells],
        eval_truth: vec![0.0; cells],
        ground_truth: None,
        normalized: false,
    };
    ds.recompute_deltas(1.0);
    Ok(ds)
}

fn grid_csv(ds: &Dataset, values: &[f64], observed: Option<&[bool]>) -> String {
    let mut out = String::from("sample_id,hour");
    for name in &ds.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, id) in ds.sample_ids.iter().enumerate() {
        for t in 0..ds.steps {
            write!(out, "{id},{t}").unwrap();
            for f in 0..ds.features() {
                let k = ds.idx(i, t, f);
                out.push(',');
                if observed.is_none_or(|o| o[k]) {
                    write!(out, "{}", values[k]).unwrap();
                }
            }
            out.push('\n');
        }
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the canonical values CSV: one row per `(sample, hour)`.
pub fn save_values_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write(path, &grid_csv(ds, &ds.values, Some(&ds.observed)))
}

/// Writes a complete grid (no empty cells) with the dataset's layout.
pub fn save_grid_csv(ds: &Dataset, grid: &[f64], path: &Path) -> Result<()> {
    write(path, &grid_csv(ds, grid, None))
}

pub fn save_labels_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,label\n");
    for (id, l) in ds.sample_ids.iter().zip(&ds.labels) {
        writeln!(out, "{id},{l}").unwrap();
    }
    write(path, &out)
}

/// Per-feature mean and standard deviation over observed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(ds: &Dataset) -> Result<NormStats> {
        let m = ds.features();
        let mut count = vec![0usize; m];
        let mut sum = vec![0.0; m];
        for (k, &v) in ds.values.iter().enumerate() {
            if ds.observed[k] {
                count[k % m] += 1;
                sum[k % m] += v;
            }
        }
        let mean: Vec<f64> = (0..m).map(|f| sum[f] / count[f].max(1) as f64).collect();
        let mut ss = vec![0.0; m];
        for (k, &v) in ds.values.iter().enumerate() {
            if ds.observed[k] {
                let d = v - mean[k % m];
                ss[k % m] += d * d;
            }
        }
        let mut std = Vec::with_capacity(m);
        for f in 0..m {
            let s = (ss[f] / count[f].max(1) as f64).sqrt();
            if count[f] == 0 || !(s > 0.0) {
                return Err(Error::Degenerate(format!(
                    "feature `{}` has zero variance over observed training cells",
                    ds.feature_names[f]
                )));
            }
            std.push(s);
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize_value(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize_value(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

/// Z-scores observed cells, eval truths and any ground truth. Unobserved
/// cells stay at zero.
pub fn normalize(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if ds.normalized {
        return Err(Error::Contract("dataset is already normalized".into()));
    }
    let m = ds.features();
    if stats.mean.len() != m || stats.std.len() != m {
        return Err(Error::Dimension {
            op: "normalize",
            lhs: vec![m],
            rhs: vec![stats.mean.len()],
        });
    }
    if let Some(f) = stats.std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Degenerate(format!(
            "feature `{}` has zero standard deviation",
            ds.feature_names[f]
        )));
    }
    let mut out = ds.clone();
    for k in 0..out.values.len() {
        let f = k % m;
        if out.observed[k] {
            out.values[k] = stats.normalize_value(f, out.values[k]);
        }
        if out.eval_mask[k] {
            out.eval_truth[k] = stats.normalize_value(f, out.eval_truth[k]);
        }
    }
    if let Some(g) = out.ground_truth.as_mut() {
        for (k, v) in g.iter_mut().enumerate() {
            *v = stats.normalize_value(k % m, *v);
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Hides `⌊rate · #observed⌋` observed cells per sample for imputation
/// scoring: they move to `eval_mask`, leave `V`, and are zero-filled.
pub fn simulate_mar(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("MAR rate {rate} outside [0, 1)")));
    }
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = ds.cells_per_sample();
    for i in 0..ds.len() {
        let cells: Vec<usize> = (i * per..(i + 1) * per).filter(|&k| ds.observed[k]).collect();
        let mut hide = (rate * cells.len() as f64).floor() as usize;
        if hide > 0 && hide >= cells.len() {
            warn!(
                "sample `{}`: MAR rate would hide every observed cell; keeping one",
                ds.sample_ids[i]
            );
            hide = cells.len() - 1;
        }
        for j in index::sample(&mut rng, cells.len(), hide) {
            let k = cells[j];
            out.eval_mask[k] = true;
            out.eval_truth[k] = ds.values[k];
            out.observed[k] = false;
            out.values[k] = 0.0;
        }
    }
    out.recompute_deltas(1.0);
    Ok(out)
}

/// Label-stratified sample-level split with `round(fraction · N)` test
/// samples. Both halves keep the original sample order.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let n = ds.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let by_class: Vec<Vec<usize>> = (0..2u8)
        .map(|c| (0..n).filter(|&i| ds.labels[i] == c).collect())
        .collect();

    // largest-remainder apportionment of the test quota across classes
    let ideal: Vec<f64> = by_class
        .iter()
        .map(|c| test_fraction * c.len() as f64)
        .collect();
    let mut quota: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..2).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n_test.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(4) {
        if remaining == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; n];
    for (c, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..quota[c]] {
            is_test[i] = true;
        }
        if !members.is_empty() && (quota[c] == 0 || quota[c] == members.len()) {
            warn!("class {c} is absent from one side of the split");
        }
    }
    let test: Vec<usize> = (0..n).filter(|&i| is_test[i]).collect();
    let train: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Parameters of the seeded synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub steps: usize,
    pub features: usize,
    pub latent_dim: usize,
    pub missing_rate: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 600,
            steps: 24,
            features: 5,
            latent_dim: 3,
            missing_rate: 0.4,
            label_noise: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.steps == 0 || self.features == 0 || self.latent_dim == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        if !(self.label_noise >= 0.0) {
            return Err(Error::Config("label noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// AR(1) coefficient of the latent process.
pub const LATENT_AR: f64 = 0.9;
/// Scale of the label logit in units of the latent temporal mean.
const LABEL_GAIN: f64 = 3.0;

/// Draws a dataset from a latent AR(1) process observed through a fixed
/// random loading matrix, with labels driven by the latent temporal mean.
///
/// Feature `m` loads mainly on latent factor `m mod L`, so features sharing
/// that factor are strongly correlated. Observation noise grows with the
/// feature index, giving features distinct imputation difficulty. Raw values
/// carry per-feature offsets and scales; missingness is uniform at
/// `missing_rate`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n, t_len, m, l) = (cfg.samples, cfg.steps, cfg.features, cfg.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut loading = vec![0.0; m * l];
    for f in 0..m {
        for j in 0..l {
            loading[f * l + j] = 0.3 * normal(&mut rng);
        }
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        loading[f * l + f % l] = sign;
    }
    let noise: Vec<f64> = (0..m)
        .map(|f| 0.1 + 0.5 * f as f64 / (m.max(2) - 1) as f64)
        .collect();
    let offset: Vec<f64> = (0..m).map(|f| 10.0 * (f + 1) as f64).collect();
    let scale: Vec<f64> = (0..m).map(|f| 1.0 + f as f64).collect();
    let mut label_w: Vec<f64> = (0..l).map(|_| normal(&mut rng)).collect();
    let norm = label_w.iter().map(|w| w * w).sum::<f64>().sqrt().max(1e-12);
    label_w.iter_mut().for_each(|w| *w /= norm);

    let innovation = (1.0 - LATENT_AR * LATENT_AR).sqrt();
    let cells = n * t_len * m;
    let mut truth = vec![0.0; cells];
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; l];
    for i in 0..n {
        let mut z_sum = vec![0.0; l];
        for t in 0..t_len {
            for zj in z.iter_mut() {
                *zj = if t == 0 {
                    normal(&mut rng)
                } else {
                    LATENT_AR * *zj + innovation * normal(&mut rng)
                };
            }
            for (s, zj) in z_sum.iter_mut().zip(&z) {
                *s += zj;
            }
            for f in 0..m {
                let signal: f64 = (0..l).map(|j| loading[f * l + j] * z[j]).sum();
                let x = signal + noise[f] * normal(&mut rng);
                truth[(i * t_len + t) * m + f] = offset[f] + scale[f] * x;
            }
        }
        let mean_dot: f64 = z_sum
            .iter()
            .zip(&label_w)
            .map(|(s, w)| s / t_len as f64 * w)
            .sum();
        let logit = LABEL_GAIN * mean_dot + cfg.label_noise * normal(&mut rng);
        let p = 1.0 / (1.0 + (-logit).exp());
        labels.push(u8::from(rng.random::<f64>() < p));
    }

    let mut observed = vec![true; cells];
    let mut values = truth.clone();
    if cfg.missing_rate > 0.0 {
        for k in 0..cells {
            if rng.random::<f64>() < cfg.missing_rate {
                observed[k] = false;
                values[k] = 0.0;
            }
        }
    }

    let width = n.saturating_sub(1).to_string().len().max(4);
    let mut ds = Dataset {
        sample_ids: (0..n).map(|i| format!("s{i:0width$}")).collect(),
        feature_names: (1..=m).map(|f| format!("f{f}")).collect(),
        steps: t_len,
        values,
        observed,
        deltas: vec![0.0; cells],
        labels,
        eval_mask: vec![false; cells],
        eval_truth: vec![0.0; cells],
        ground_truth: Some(truth),
        normalized: false,
    };
    ds.recompute_deltas(1.0);
    ds.check_shape()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    Zero,
    Mean,
    ForwardFill,
}

impl ImputeStrategy {
    pub const ALL: [ImputeStrategy; 3] = [
        ImputeStrategy::Zero,
        ImputeStrategy::Mean,
        ImputeStrategy::ForwardFill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImputeStrategy::Zero => "zero",
            ImputeStrategy::Mean => "mean",
            ImputeStrategy::ForwardFill => "forward_fill",
        }
    }
}

/// Fills every unobserved cell (including `eval_mask` cells) and returns
/// the complete grid. Observed cells pass through.
///
/// `Mean` uses zero on normalized data and `stats.mean` otherwise.
/// `ForwardFill` carries the last observed value forward and falls back to
/// the feature mean before the first observation.
pub fn baseline_impute(
    ds: &Dataset,
    strategy: ImputeStrategy,
    stats: Option<&NormStats>,
) -> Result<Vec<f64>> {
    let m = ds.features();
    let means: Option<Vec<f64>> = if ds.normalized {
        Some(vec![0.0; m])
    } else {
        stats.map(|s| s.mean.clone())
    };
    let mean_of = |f: usize| -> Result<f64> {
        means.as_ref().map(|v| v[f]).ok_or_else(|| {
            Error::Contract("mean-based imputation of raw data needs normalization stats".into())
        })
    };
    let mut out = ds.values.clone();
    for i in 0..ds.len() {
        for f in 0..m {
            let mut last: Option<f64> = None;
            for t in 0..ds.steps {
                let k = ds.idx(i, t, f);
                if ds.observed[k] {
                    last = Some(ds.values[k]);
                    continue;
                }
                out[k] = match (strategy, last) {
                    (ImputeStrategy::Zero, _) => 0.0,
                    (ImputeStrategy::ForwardFill, Some(v)) => v,
                    _ => mean_of(f)?,
                };
            }
        }
    }
    Ok(out)
}

/// The conventional file names inside a dataset directory.
pub struct DatasetFiles {
    pub values: PathBuf,
    pub labels: PathBuf,
    pub ground_truth: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetFiles {
            values: dir.join("values.csv"),
            labels: dir.join("labels.csv"),
            ground_truth: dir.join("ground_truth.csv"),
        }
    }
}

/// Loads a dataset directory, attaching `ground_truth.csv` when present.
pub fn load_dir(dir: &Path, steps: usize) -> Result<Dataset> {
    let files = DatasetFiles::in_dir(dir);
    let mut ds = load_csv(&files.values, &files.labels, steps)?;
    if files.ground_truth.exists() {
        let truth = load_csv(&files.ground_truth, &files.labels, steps)?;
        if truth.sample_ids != ds.sample_ids || truth.feature_names != ds.feature_names {
            return Err(parse_err(
                &files.ground_truth,
                0,
                "ground truth layout differs from values",
            ));
        }
        if let Some(k) = truth.observed.iter().position(|&o| !o) {
            let (i, t, f) = ds.cell(k);
            return Err(parse_err(
                &files.ground_truth,
                0,
                format!("missing cell at sample {i}, hour {t}, feature {f}"),
            ));
        }
        ds.ground_truth = Some(truth.values);
    }
    Ok(ds)
}

/// Writes values, labels and (if known) ground truth into `dir`.
pub fn save_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    let files = DatasetFiles::in_dir(dir);
    save_values_csv(ds, &files.values)?;
    save_labels_csv(ds, &files.labels)?;
    if let Some(g) = &ds.ground_truth {
        save_grid_csv(ds, g, &files.ground_truth)?;
    }
    Ok(())
}
