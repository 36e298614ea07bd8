//! Losses, Adam and the minibatch Bayes-by-Backprop loop.
//!
//! The per-batch objective is
//! `kl_weight·KL + λ_imp·L_imp + λ_pred·c·L_pred` where `L_imp` is the
//! masked mean absolute imputation error averaged over samples, `L_pred` is
//! the mean binary cross-entropy, `c` is `prediction_nll_count` and
//! `kl_weight = 1 / batches_per_epoch`.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    bind_posterior, draw_noise, forward, Batch, ModelConfig, ModelWeights, Posterior, Trajectory,
};
use crate::scalar::Scalar;
use crate::variational::{kl_mc_terms, ScaleMixturePrior, SampledWeights};

/// Masked mean of `|x - x̂|` per sample, averaged over samples with at
/// least one observed cell. `x` and `v` are per-step `B×M` tensors.
pub fn loss_imputation<S: Scalar>(
    tape: &mut Tape<S>,
    x: &[Tensor<S>],
    x_hat: &[Var],
    v: &[Tensor<S>],
) -> Result<Var> {
    if x.len() != x_hat.len() || x.len() != v.len() {
        return Err(Error::Dimension {
            op: "loss_imputation",
            lhs: vec![x.len()],
            rhs: vec![x_hat.len(), v.len()],
        });
    }
    let Some(first) = v.first() else {
        warn!("imputation loss over an empty sequence is zero");
        return Ok(tape.constant_scalar(S::zero()));
    };
    let (rows, cols) = (first.rows(), first.cols());
    let mut counts = vec![S::zero(); rows];
    for vt in v {
        for (i, row) in vt.data().chunks(cols).enumerate() {
            counts[i] += row.iter().copied().sum::<S>();
        }
    }
    let active = counts.iter().filter(|&&c| c > S::zero()).count();
    if active == 0 {
        warn!("no observed cells in batch; imputation loss is zero");
        return Ok(tape.constant_scalar(S::zero()));
    }
    let per_sample: Vec<S> = counts
        .iter()
        .map(|&c| if c > S::zero() { S::one() / c } else { S::zero() })
        .collect();

    let mut total = tape.constant_scalar(S::zero());
    for ((xt, &xh), vt) in x.iter().zip(x_hat).zip(v) {
        let weights: Vec<S> = vt
            .data()
            .iter()
            .enumerate()
            .map(|(k, &m)| m * per_sample[k / cols])
            .collect();
        let wt = tape.constant(Tensor::new(vt.shape().to_vec(), weights)?);
        let xc = tape.constant(xt.clone());
        let diff = tape.sub(xc, xh)?;
        let residual = tape.abs(diff);
        let weighted = tape.mul(residual, wt)?;
        let s = tape.sum(weighted);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, S::one() / S::from_usize(active).unwrap()))
}

/// Mean of `softplus(z) - y·z`, the cross-entropy of `sigmoid(z)` against `y`.
pub fn loss_prediction<S: Scalar>(tape: &mut Tape<S>, logits: Var, y: &Tensor<S>) -> Result<Var> {
    if let Some(k) = y.data().iter().position(|&l| l != S::zero() && l != S::one()) {
        return Err(Error::Contract(format!("label {} at index {k} is not 0 or 1", y.data()[k])));
    }
    let sp = tape.softplus(logits);
    let yc = tape.constant(y.clone());
    let yz = tape.mul(yc, logits)?;
    let per = tape.sub(sp, yz)?;
    tape.mean(per)
}

/// Relative weights of the objective's terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub imputation: f64,
    pub prediction: f64,
    /// How many times the prediction likelihood enters the objective (1 or 2).
    pub prediction_nll_count: u32,
}

pub fn loss_total<S: Scalar>(
    tape: &mut Tape<S>,
    kl: Var,
    imputation: Var,
    prediction: Var,
    w: &LossWeights,
) -> Result<Var> {
    let k = tape.scale(kl, S::lit(w.kl));
    let i = tape.scale(imputation, S::lit(w.imputation));
    let p = tape.scale(prediction, S::lit(w.prediction * w.prediction_nll_count as f64));
    let ki = tape.add(k, i)?;
    tape.add(ki, p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor<S>> = shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [&mut Tensor<S>],
        grads: &[&Tensor<S>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                op: "adam",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        self.step += 1;
        let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
        let one = S::one();
        let c1 = one - b1.powi(self.step as i32);
        let c2 = one - b2.powi(self.step as i32);
        let (lr, eps) = (S::lit(cfg.learning_rate), S::lit(cfg.eps));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: S) -> S {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x * x)
        .sum::<S>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

/// How the KL term is spread over an epoch's minibatches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlWeighting {
    /// `1 / batches_per_epoch`: the KL enters once per epoch.
    #[default]
    PerBatch,
    /// `1 / training_samples`: the KL per sample, on the same footing as the
    /// per-sample averaged data terms.
    PerSample,
}

impl KlWeighting {
    pub fn name(self) -> &'static str {
        match self {
            KlWeighting::PerBatch => "per_batch",
            KlWeighting::PerSample => "per_sample",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_batch" => Ok(KlWeighting::PerBatch),
            "per_sample" => Ok(KlWeighting::PerSample),
            other => Err(Error::Config(format!(
                "unknown kl_weighting `{other}` (expected per_batch or per_sample)"
            ))),
        }
    }

    pub fn weight(self, samples: usize, batches: usize) -> f64 {
        match self {
            KlWeighting::PerBatch => 1.0 / batches as f64,
            KlWeighting::PerSample => 1.0 / samples as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_imputation: f64,
    pub lambda_prediction: f64,
    pub prediction_nll_count: u32,
    pub kl_weighting: KlWeighting,
    pub mc_train_samples: usize,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub prior: ScaleMixturePrior<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            adam: AdamConfig::default(),
            lambda_imputation: 1.0,
            lambda_prediction: 1.0,
            prediction_nll_count: 1,
            kl_weighting: KlWeighting::PerBatch,
            mc_train_samples: 1,
            grad_clip: Some(5.0),
            prior: ScaleMixturePrior::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.mc_train_samples == 0 {
            return bad("mc_train_samples must be at least 1");
        }
        if !(a.learning_rate > 0.0) || !(a.eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.lambda_imputation >= 0.0) || !(self.lambda_prediction >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !matches!(self.prediction_nll_count, 1 | 2) {
            return bad("prediction_nll_count must be 1 or 2");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        self.prior.validate()
    }

    fn prior_as<S: Scalar>(&self) -> ScaleMixturePrior<S> {
        ScaleMixturePrior {
            pi: S::lit(self.prior.pi),
            sigma1: S::lit(self.prior.sigma1),
            sigma2: S::lit(self.prior.sigma2),
        }
    }
}

/// Per-epoch means over batches of the terms entering the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub imputation: f64,
    pub prediction: f64,
    /// Unweighted KL estimate (zero in deterministic mode).
    pub kl: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,total,imputation,prediction,kl";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.total, self.imputation, self.prediction, self.kl
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub posterior: Posterior<S>,
    pub log: Vec<EpochLog>,
    /// Total loss of the last batch, NaN when no step was taken.
    pub final_loss: f64,
}

struct StepTerms<S> {
    total: S,
    imputation: S,
    prediction: S,
    kl: S,
}

/// The first non-finite value among `named`, for diagnostics.
fn first_non_finite<S: Scalar>(tape: &Tape<S>, named: &[(String, Var)]) -> Option<String> {
    named
        .iter()
        .find(|(_, v)| !tape.value(*v).is_finite())
        .map(|(n, _)| n.clone())
}

fn trajectory_names(traj: &Trajectory) -> Vec<(String, Var)> {
    let mut out = Vec::new();
    for (t, (&xh, &h)) in traj.x_hat.iter().zip(&traj.hidden).enumerate() {
        out.push((format!("imputation at step {t}"), xh));
        out.push((format!("hidden state at step {t}"), h));
    }
    out.push(("logits".to_string(), traj.logits));
    out
}

/// Builds and differentiates one batch objective. Returns gradients for
/// every `mu` and `rho` in parameter order.
fn batch_step<S: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    post: &Posterior<S>,
    batch: &Batch<S>,
    kl_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(StepTerms<S>, Vec<Tensor<S>>)> {
    let mut tape = Tape::new();
    let bound = bind_posterior(&mut tape, post);
    let draws = if model.deterministic { 1 } else { cfg.mc_train_samples };
    let prior = cfg.prior_as::<S>();
    let weights = LossWeights {
        kl: kl_weight,
        imputation: cfg.lambda_imputation,
        prediction: cfg.lambda_prediction,
        prediction_nll_count: cfg.prediction_nll_count,
    };

    let mut totals = Vec::with_capacity(draws);
    let mut sums = (S::zero(), S::zero(), S::zero());
    let mut watch: Vec<(String, Var)> = Vec::new();
    for _ in 0..draws {
        let (w, kl): (ModelWeights<Var>, Var) = if model.deterministic {
            (bound.map(|_, b| b.mu), tape.constant_scalar(S::zero()))
        } else {
            let noise = draw_noise(post, rng);
            let sampled = crate::model::sample_posterior(&mut tape, &bound, &noise)?;
            for (name, sw) in sampled.iter() {
                watch.push((format!("sampled weights `{name}`"), sw.w));
            }
            let groups: Vec<&SampledWeights<S>> = sampled.iter().map(|(_, s)| s).collect();
            let kl = kl_mc_terms(&mut tape, &groups, &prior)?;
            (sampled.map(|_, s| s.w), kl)
        };
        let traj = forward(&mut tape, model, &w, batch)?;
        let imp = loss_imputation(&mut tape, &batch.x, &traj.x_hat, &batch.v)?;
        let pred = loss_prediction(&mut tape, traj.logits, &batch.y)?;
        let total = loss_total(&mut tape, kl, imp, pred, &weights)?;
        watch.extend(trajectory_names(&traj));
        watch.push(("KL term".to_string(), kl));
        watch.push(("imputation loss".to_string(), imp));
        watch.push(("prediction loss".to_string(), pred));
        sums.0 += tape.value(imp).item();
        sums.1 += tape.value(pred).item();
        sums.2 += tape.value(kl).item();
        totals.push(total);
    }
    let mut loss = totals[0];
    for &t in &totals[1..] {
        loss = tape.add(loss, t)?;
    }
    let n = S::from_usize(draws).unwrap();
    let loss = tape.scale(loss, S::one() / n);
    let total = tape.value(loss).item();
    if !total.is_finite() {
        let culprit = first_non_finite(&tape, &watch).unwrap_or_else(|| "total loss".into());
        return Err(Error::NonFinite(format!("{culprit} (total loss {total})")));
    }
    let grads: Gradients<S> = tape.backward(loss)?;
    let mut out = Vec::with_capacity(2 * ModelWeights::<()>::NAMES.len());
    for (name, b) in bound.iter() {
        for (part, v) in [("mu", b.mu), ("rho", b.rho)] {
            let g = grads.wrt(v);
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}.{part}`")));
            }
            out.push(g.clone());
        }
    }
    Ok((
        StepTerms {
            total,
            imputation: sums.0 / n,
            prediction: sums.1 / n,
            kl: sums.2 / n,
        },
        out,
    ))
}

/// Minibatch training from `posterior`. `ds` must be normalized.
pub fn train<S: Scalar>(
    ds: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut posterior: Posterior<S>,
) -> Result<TrainOutcome<S>> {
    model.validate()?;
    cfg.validate()?;
    crate::model::check_posterior(model, &posterior)?;
    if !ds.normalized {
        return Err(Error::Contract("training data must be normalized".into()));
    }
    if ds.features() != model.features {
        return Err(Error::Config(format!(
            "dataset has {} features, model expects {}",
            ds.features(),
            model.features
        )));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            posterior,
            log,
            final_loss: f64::NAN,
        });
    }
    if ds.is_empty() {
        return Err(Error::Degenerate("training set is empty".into()));
    }

    let n = ds.len();
    let batches = n.div_ceil(cfg.batch_size);
    let kl_weight = cfg.kl_weighting.weight(n, batches);
    let shapes: Vec<&[usize]> = posterior
        .iter()
        .flat_map(|(_, vt)| [vt.mu.shape(), vt.rho.shape()])
        .collect();
    let mut adam = AdamState::<S>::new(&shapes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = [0.0f64; 4];
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::<S>::from_dataset(ds, chunk);
            let (terms, mut grads) =
                batch_step(model, cfg, &posterior, &batch, kl_weight, &mut noise_rng)
                    .map_err(|e| match e {
                        Error::NonFinite(msg) => {
                            Error::NonFinite(format!("epoch {epoch}: {msg}"))
                        }
                        other => other,
                    })?;
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, S::lit(c));
            }
            let mut params: Vec<&mut Tensor<S>> = posterior
                .iter_mut()
                .flat_map(|(_, vt)| [&mut vt.mu, &mut vt.rho])
                .collect();
            let grad_refs: Vec<&Tensor<S>> = grads.iter().collect();
            adam.step(&cfg.adam, &mut params, &grad_refs)?;
            final_loss = terms.total.to_f64_lossy();
            acc[0] += final_loss;
            acc[1] += terms.imputation.to_f64_lossy();
            acc[2] += terms.prediction.to_f64_lossy();
            acc[3] += terms.kl.to_f64_lossy();
        }
        let b = batches as f64;
        let entry = EpochLog {
            epoch,
            total: acc[0] / b,
            imputation: acc[1] / b,
            prediction: acc[2] / b,
            kl: acc[3] / b,
        };
        info!(
            "epoch {epoch}: total {:.5} imputation {:.5} prediction {:.5} kl {:.2}",
            entry.total, entry.imputation, entry.prediction, entry.kl
        );
        log.push(entry);
    }
    Ok(TrainOutcome {
        posterior,
        log,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::{generate_synthetic, normalize, NormStats, SynthConfig};
    use crate::model::{init_posterior, means};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn imputation_loss_arithmetic() {
        let mut tape = Tape::new();
        let xh = tape.leaf(t(&[1, 2], &[1.0, 5.0]));
        let l = loss_imputation(&mut tape, &[t(&[1, 2], &[2.0, 4.0])], &[xh], &[t(&[1, 2], &[1.0, 1.0])])
            .unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn imputation_loss_ignores_unobserved_cells() {
        let x = [t(&[2, 2], &[1.0, 0.0, 3.0, 0.0])];
        let v = [t(&[2, 2], &[1.0, 0.0, 1.0, 0.0])];
        let run = |gap: f64| {
            let mut tape = Tape::new();
            let xh = tape.leaf(t(&[2, 2], &[1.0, gap, 3.0, -gap]));
            let l = loss_imputation(&mut tape, &x, &[xh], &v).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).item().to_bits(), g.wrt(xh).clone())
        };
        let (a, ga) = run(0.0);
        let (b, gb) = run(123.0);
        assert_eq!(a, b);
        assert_eq!(a, 0.0f64.to_bits());
        assert_eq!(ga.data()[1], 0.0);
        assert_eq!(gb.data()[3], 0.0);
    }

    #[test]
    fn imputation_loss_all_missing_is_zero() {
        let mut tape = Tape::new();
        let xh = tape.leaf(t(&[1, 2], &[1.0, 5.0]));
        let l = loss_imputation(&mut tape, &[Tensor::zeros(vec![1, 2])], &[xh], &[Tensor::zeros(vec![1, 2])])
            .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn prediction_loss_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 1], &[0.0]));
        let l = loss_prediction(&mut tape, z, &t(&[1, 1], &[1.0])).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let z = tape.constant(t(&[1, 1], &[2.0]));
        let l = loss_prediction(&mut tape, z, &t(&[1, 1], &[0.0])).unwrap();
        assert!((tape.value(l).item() - 2.126928).abs() < 1e-6);
        let z = tape.constant(t(&[1, 1], &[50.0]));
        let l = loss_prediction(&mut tape, z, &t(&[1, 1], &[1.0])).unwrap();
        assert!(tape.value(l).item() < 1e-20);
        assert!(loss_prediction(&mut tape, z, &t(&[1, 1], &[0.5])).is_err());
    }

    #[test]
    fn total_is_weighted_sum_and_affine() {
        let w = LossWeights {
            kl: 0.25,
            imputation: 2.0,
            prediction: 3.0,
            prediction_nll_count: 2,
        };
        let mut tape = Tape::new();
        let kl = tape.constant_scalar(1.5);
        let imp = tape.constant_scalar(0.7);
        let pred = tape.constant_scalar(0.3);
        let total = loss_total(&mut tape, kl, imp, pred, &w).unwrap();
        let want: f64 = 0.25 * 1.5 + 2.0 * 0.7 + 3.0 * 2.0 * 0.3;
        assert!((tape.value(total).item() - want).abs() < 1e-12);

        let zero = LossWeights {
            kl: 0.0,
            imputation: 0.0,
            prediction: 0.0,
            prediction_nll_count: 1,
        };
        let z = tape.constant_scalar(0.0);
        let total = loss_total(&mut tape, z, imp, pred, &zero).unwrap();
        assert_eq!(tape.value(total).item(), 0.0);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let w = LossWeights {
            kl: 0.5,
            imputation: 1.0,
            prediction: 1.0,
            prediction_nll_count: 1,
        };
        let x = vec![t(&[2, 2], &[0.5, 0.0, -1.0, 2.0])];
        let v = vec![t(&[2, 2], &[1.0, 0.0, 1.0, 1.0])];
        let y = t(&[2, 1], &[1.0, 0.0]);
        let prior = ScaleMixturePrior::<f64>::default();
        let build = |tape: &mut Tape<f64>, leaves: &[Var]| -> Result<Var> {
            let sw = crate::variational::sample_weights(
                tape,
                crate::variational::BoundVariational { mu: leaves[2], rho: leaves[3] },
                t(&[3], &[0.3, -1.2, 0.8]),
            )?;
            let kl = kl_mc_terms(tape, &[&sw], &prior)?;
            let imp = loss_imputation(tape, &x, &[leaves[0]], &v)?;
            let pred = loss_prediction(tape, leaves[1], &y)?;
            loss_total(tape, kl, imp, pred, &w)
        };
        let leaves = [
            t(&[2, 2], &[0.1, 0.7, -0.4, 1.1]),
            t(&[2, 1], &[0.3, -0.9]),
            t(&[3], &[0.2, -0.1, 0.05]),
            t(&[3], &[-2.0, -3.0, -1.0]),
        ];
        let err = grad_check(build, &leaves, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_single_step_and_fixed_point() {
        let cfg = AdamConfig::default();
        let mut p = t(&[2], &[1.0, -1.0]);
        let mut st = AdamState::<f64>::new(&[&[2]]);
        st.step(&cfg, &mut [&mut p], &[&t(&[2], &[1.0, 0.0])]).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-2)).abs() < 1e-9);
        assert_eq!(p.data()[1], -1.0);

        let mut q = t(&[1], &[0.5]);
        let mut a = AdamState::<f64>::new(&[&[1]]);
        let mut b = a.clone();
        let mut q2 = q.clone();
        a.step(&cfg, &mut [&mut q], &[&t(&[1], &[0.3])]).unwrap();
        b.step(&cfg, &mut [&mut q2], &[&t(&[1], &[0.3])]).unwrap();
        assert_eq!(q, q2);
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![t(&[2], &[3.0, 0.0]), t(&[1], &[4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![t(&[1], &[0.5])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    fn tiny_data() -> Dataset {
        let raw = generate_synthetic(&SynthConfig {
            samples: 24,
            steps: 6,
            features: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        normalize(&raw, &NormStats::fit(&raw).unwrap()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = tiny_data();
        let model = ModelConfig::new(3, 4);
        let init = init_posterior::<f64>(&model, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&ds, &model, &cfg, init.clone()).unwrap();
        assert_eq!(out.posterior, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_deterministic_mode_keeps_rho() {
        let ds = tiny_data();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let model = ModelConfig::new(3, 4);
        let init = init_posterior::<f64>(&model, 1).unwrap();
        let a = train(&ds, &model, &cfg, init.clone()).unwrap();
        let b = train(&ds, &model, &cfg, init.clone()).unwrap();
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        assert_ne!(means(&a.posterior), means(&init));

        let det = ModelConfig {
            deterministic: true,
            ..model
        };
        let d = train(&ds, &det, &cfg, init.clone()).unwrap();
        for ((_, got), (_, start)) in d.posterior.iter().zip(init.iter()) {
            assert_eq!(got.rho, start.rho);
        }
        assert!(d.log.iter().all(|e| e.kl == 0.0));
    }

    #[test]
    fn training_rejects_raw_data() {
        let raw = generate_synthetic(&SynthConfig {
            samples: 4,
            steps: 3,
            features: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let model = ModelConfig::new(2, 2);
        let init = init_posterior::<f64>(&model, 0).unwrap();
        let err = train(&raw, &model, &TrainConfig::default(), init).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut ds = tiny_data();
        ds.values[0] = f64::NAN;
        let model = ModelConfig::new(3, 4);
        let init = init_posterior::<f64>(&model, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        match train(&ds, &model, &cfg, init) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("step 0"), "{msg}"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }
}
