//! The recurrent imputation and prediction network.
//!
//! Each step decays the previous hidden state by the observation gaps,
//! imputes every feature from the decayed state and the visible values,
//! merges imputations into the gaps and advances a tanh recurrence. The final
//! state and the per-feature temporal mean of the merged input feed a linear
//! output. Everything runs on a batch whose rows are samples, so a single
//! sample is the one-row case.
//!
//! Weight matrices are stored input-by-output (`y = x·W + b`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::variational::{
    draw_eps, sample_weights, BoundVariational, SampledWeights, VariationalTensor,
};

/// Recurrent cell used for the hidden update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CellKind {
    #[default]
    Tanh,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(CellKind::Tanh),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub features: usize,
    pub hidden: usize,
    pub impute_hidden: usize,
    pub cell: CellKind,
    /// Point weights at the posterior means; no sampling, no KL.
    pub deterministic: bool,
}

impl ModelConfig {
    /// `impute_hidden` defaults to `hidden`.
    pub fn new(features: usize, hidden: usize) -> Self {
        ModelConfig {
            features,
            hidden,
            impute_hidden: hidden,
            cell: CellKind::Tanh,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden == 0 || self.impute_hidden == 0 {
            return Err(Error::Config(format!(
                "features, hidden and impute_hidden must be at least 1 (got {}, {}, {})",
                self.features, self.hidden, self.impute_hidden
            )));
        }
        Ok(())
    }

    /// Shape and fan-in of every weight group.
    pub fn layout(&self) -> ModelWeights<(Vec<usize>, usize)> {
        let (m, h, g) = (self.features, self.hidden, self.impute_hidden);
        let recurrent_in = h + m;
        let impute_in = h + 2 * m;
        ModelWeights {
            hidden_hidden: (vec![h, h], recurrent_in),
            input_hidden: (vec![m, h], recurrent_in),
            hidden_bias: (vec![1, h], recurrent_in),
            impute_in: (vec![impute_in, g], impute_in),
            impute_in_bias: (vec![1, g], impute_in),
            impute_out: (vec![g, m], g),
            impute_out_bias: (vec![1, m], g),
            decay: (vec![m, h], m),
            decay_bias: (vec![1, h], m),
            output: (vec![h + m, 1], h + m),
            output_bias: (vec![1, 1], h + m),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, (s, _))| s.iter().product::<usize>())
            .sum()
    }
}

macro_rules! weight_groups {
    ($($field:ident),+ $(,)?) => {
        /// One slot per weight group, generic over what a slot holds
        /// (posterior parameters, concrete tensors, tape handles, ...).
        #[derive(Clone, Debug, PartialEq)]
        pub struct ModelWeights<W> {
            $(pub $field: W,)+
        }

        impl<W> ModelWeights<W> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn iter(&self) -> impl Iterator<Item = (&'static str, &W)> {
                [$((stringify!($field), &self.$field)),+].into_iter()
            }

            pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut W)> {
                [$((stringify!($field), &mut self.$field)),+].into_iter()
            }

            pub fn map<U>(&self, mut f: impl FnMut(&'static str, &W) -> U) -> ModelWeights<U> {
                ModelWeights { $($field: f(stringify!($field), &self.$field),)+ }
            }

            pub fn try_map<U, E>(
                &self,
                mut f: impl FnMut(&'static str, &W) -> Result<U, E>,
            ) -> Result<ModelWeights<U>, E> {
                Ok(ModelWeights { $($field: f(stringify!($field), &self.$field)?,)+ })
            }

            pub fn try_zip<U, V, E>(
                &self,
                other: &ModelWeights<U>,
                mut f: impl FnMut(&'static str, &W, &U) -> Result<V, E>,
            ) -> Result<ModelWeights<V>, E> {
                Ok(ModelWeights { $($field: f(stringify!($field), &self.$field, &other.$field)?,)+ })
            }

            /// Rebuilds from values in [`ModelWeights::NAMES`] order.
            pub fn from_vec(values: Vec<W>) -> Option<Self> {
                if values.len() != Self::NAMES.len() {
                    return None;
                }
                let mut it = values.into_iter();
                Some(ModelWeights { $($field: it.next()?,)+ })
            }

            pub fn into_vec(self) -> Vec<W> {
                vec![$(self.$field),+]
            }
        }
    };
}

weight_groups!(
    hidden_hidden,
    input_hidden,
    hidden_bias,
    impute_in,
    impute_in_bias,
    impute_out,
    impute_out_bias,
    decay,
    decay_bias,
    output,
    output_bias,
);

/// Variational posterior over every weight group.
pub type Posterior<S> = ModelWeights<VariationalTensor<S>>;

/// Fresh posterior: uniform means scaled by fan-in, `rho = -3`.
pub fn init_posterior<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Posterior<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(cfg
        .layout()
        .map(|_, (shape, fan_in)| VariationalTensor::init(shape.clone(), *fan_in, &mut rng)))
}

/// Checks that a posterior has the shapes `cfg` expects.
pub fn check_posterior<S: Scalar>(cfg: &ModelConfig, post: &Posterior<S>) -> Result<()> {
    let layout = cfg.layout();
    for ((name, vt), (_, (shape, _))) in post.iter().zip(layout.iter()) {
        if vt.shape() != shape.as_slice() || vt.rho.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "weight group `{name}` has shape {:?}, model expects {:?}",
                vt.shape(),
                shape
            )));
        }
    }
    Ok(())
}

pub fn bind_posterior<S: Scalar>(
    tape: &mut Tape<S>,
    post: &Posterior<S>,
) -> ModelWeights<BoundVariational> {
    post.map(|_, vt| vt.bind(tape))
}

/// Standard-normal noise for one draw of every group.
pub fn draw_noise<S: Scalar, R: Rng + ?Sized>(
    post: &Posterior<S>,
    rng: &mut R,
) -> ModelWeights<Tensor<S>> {
    post.map(|_, vt| draw_eps(vt.shape(), rng))
}

pub fn sample_posterior<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &ModelWeights<BoundVariational>,
    noise: &ModelWeights<Tensor<S>>,
) -> Result<ModelWeights<SampledWeights<S>>> {
    bound.try_zip(noise, |_, b, eps| sample_weights(tape, *b, eps.clone()))
}

/// Concrete weights for one noise draw, off the tape.
pub fn realize<S: Scalar>(
    post: &Posterior<S>,
    noise: &ModelWeights<Tensor<S>>,
) -> Result<ModelWeights<Tensor<S>>> {
    post.try_zip(noise, |_, vt, eps| Ok(vt.realize(eps)))
}

pub fn means<S: Scalar>(post: &Posterior<S>) -> ModelWeights<Tensor<S>> {
    post.map(|_, vt| vt.mu.clone())
}

/// Places fixed weights on the tape as constants.
pub fn bind_constants<S: Scalar>(
    tape: &mut Tape<S>,
    weights: &ModelWeights<Tensor<S>>,
) -> ModelWeights<Var> {
    weights.map(|_, w| tape.constant(w.clone()))
}

/// Model inputs for a set of samples, one `B×M` tensor per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    /// Values, zero where unobserved.
    pub x: Vec<Tensor<S>>,
    /// Observation mask in {0, 1}.
    pub v: Vec<Tensor<S>>,
    pub delta: Vec<Tensor<S>>,
    /// Labels, `B×1`.
    pub y: Tensor<S>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(
        x: Vec<Tensor<S>>,
        v: Vec<Tensor<S>>,
        delta: Vec<Tensor<S>>,
        y: Tensor<S>,
    ) -> Result<Self> {
        if x.len() != v.len() || x.len() != delta.len() {
            return Err(Error::Dimension {
                op: "batch steps",
                lhs: vec![x.len()],
                rhs: vec![v.len(), delta.len()],
            });
        }
        let rows = y.shape().first().copied().unwrap_or(0);
        if y.shape() != [rows, 1] {
            return Err(Error::Dimension {
                op: "batch labels",
                lhs: y.shape().to_vec(),
                rhs: vec![rows, 1],
            });
        }
        if let Some(first) = x.first() {
            let shape = first.shape();
            for t in x.iter().chain(&v).chain(&delta) {
                if t.shape() != shape || shape.len() != 2 || shape[0] != rows {
                    return Err(Error::Dimension {
                        op: "batch",
                        lhs: shape.to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(Batch { x, v, delta, y })
    }

    /// Gathers `samples` of `ds` in the given order.
    pub fn from_dataset(ds: &Dataset, samples: &[usize]) -> Self {
        let (b, m) = (samples.len(), ds.features());
        let grab = |t: usize, f: &dyn Fn(usize) -> f64| -> Tensor<S> {
            let mut data = Vec::with_capacity(b * m);
            for &i in samples {
                for j in 0..m {
                    data.push(S::lit(f(ds.idx(i, t, j))));
                }
            }
            Tensor::new(vec![b, m], data).expect("b×m cells")
        };
        let mut x = Vec::with_capacity(ds.steps);
        let mut v = Vec::with_capacity(ds.steps);
        let mut delta = Vec::with_capacity(ds.steps);
        for t in 0..ds.steps {
            x.push(grab(t, &|k| ds.values[k]));
            v.push(grab(t, &|k| if ds.observed[k] { 1.0 } else { 0.0 }));
            delta.push(grab(t, &|k| ds.deltas[k]));
        }
        let y = samples.iter().map(|&i| S::lit(ds.labels[i] as f64)).collect();
        Batch {
            x,
            v,
            delta,
            y: Tensor::new(vec![b, 1], y).expect("b labels"),
        }
    }

    pub fn rows(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.x.len()
    }
}

/// `input·w + ones·b`.
pub fn affine<S: Scalar>(tape: &mut Tape<S>, input: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(input, w)?;
    let rows = tape.shape(input)[0];
    let ones = tape.constant(Tensor::ones(vec![rows, 1]));
    let bias = tape.matmul(ones, b)?;
    tape.add(xw, bias)
}

/// `γ ⊙ h` with `γ = exp(-relu(δ·Wγ + bγ))`.
pub fn decay_hidden<S: Scalar>(
    tape: &mut Tape<S>,
    h_prev: Var,
    delta: &Tensor<S>,
    w: Var,
    b: Var,
) -> Result<Var> {
    if let Some(k) = delta.data().iter().position(|&d| !(d >= S::zero())) {
        return Err(Error::Contract(format!(
            "time gap {} at index {k} must be non-negative",
            delta.data()[k]
        )));
    }
    let d = tape.constant(delta.clone());
    let pre = affine(tape, d, w, b)?;
    let clamped = tape.relu(pre);
    let neg = tape.neg(clamped);
    let gamma = tape.exp(neg);
    tape.mul(gamma, h_prev)
}

/// Two-layer imputation map over `[h ; x⊙v ; v]`; predicts all M features.
///
/// Feature `d` is predicted with its own same-step value and mask bit set
/// to zero, so a fit on observed cells cannot be achieved by copying the
/// input. The map is evaluated once per feature on a stacked `(M·B)`-row
/// input and column `d` of block `d` is kept.
#[allow(clippy::too_many_arguments)]
pub fn impute_step<S: Scalar>(
    tape: &mut Tape<S>,
    h_decayed: Var,
    x: &Tensor<S>,
    v: &Tensor<S>,
    w_in: Var,
    b_in: Var,
    w_out: Var,
    b_out: Var,
) -> Result<Var> {
    if x.shape() != v.shape() || x.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "impute_step",
            lhs: x.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (rows, m) = (x.rows(), x.cols());
    let mut visible = Vec::with_capacity(m * rows * m);
    let mut mask = Vec::with_capacity(m * rows * m);
    let mut select = Vec::with_capacity(m * rows * m);
    for d in 0..m {
        for i in 0..rows {
            for j in 0..m {
                let k = i * m + j;
                let (xv, vv) = if j == d {
                    (S::zero(), S::zero())
                } else {
                    (x.data()[k] * v.data()[k], v.data()[k])
                };
                visible.push(xv);
                mask.push(vv);
                select.push(if j == d { S::one() } else { S::zero() });
            }
        }
    }
    let stacked = vec![m * rows, m];
    let xv = tape.constant(Tensor::new(stacked.clone(), visible)?);
    let vc = tape.constant(Tensor::new(stacked.clone(), mask)?);
    let sel = tape.constant(Tensor::new(stacked, select)?);
    let hs = tape.concat(&vec![h_decayed; m], 0)?;
    let input = tape.concat(&[hs, xv, vc], 1)?;
    let pre = affine(tape, input, w_in, b_in)?;
    let hidden = tape.tanh(pre);
    let out = affine(tape, hidden, w_out, b_out)?;
    let picked = tape.mul(out, sel)?;
    let mut x_hat = tape.slice(picked, 0, 0, rows)?;
    for d in 1..m {
        let block = tape.slice(picked, 0, d * rows, rows)?;
        x_hat = tape.add(x_hat, block)?;
    }
    Ok(x_hat)
}

/// `x̂ ⊙ (1 - v) + x ⊙ v`.
pub fn masked_combine<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    x_hat: Var,
    v: &Tensor<S>,
) -> Result<Var> {
    if let Some(k) = v
        .data()
        .iter()
        .position(|&e| e != S::zero() && e != S::one())
    {
        return Err(Error::Contract(format!(
            "mask entry {} at index {k} is not 0 or 1",
            v.data()[k]
        )));
    }
    let keep = tape.constant(v.clone());
    let fill = tape.constant(v.map(|e| S::one() - e));
    let imputed = tape.mul(x_hat, fill)?;
    let kept = tape.mul(x, keep)?;
    tape.add(imputed, kept)
}

/// `tanh(h·A + x̃·B + b)`.
pub fn rnn_step<S: Scalar>(
    tape: &mut Tape<S>,
    h_decayed: Var,
    x_tilde: Var,
    a: Var,
    b_in: Var,
    bias: Var,
) -> Result<Var> {
    let hh = tape.matmul(h_decayed, a)?;
    let pre = affine(tape, x_tilde, b_in, bias)?;
    let sum = tape.add(hh, pre)?;
    Ok(tape.tanh(sum))
}

/// Logit from `[h_T ; mean_t x̃]`.
pub fn predict_output<S: Scalar>(
    tape: &mut Tape<S>,
    x_tilde: &[Var],
    hidden: &[Var],
    w: Var,
    b: Var,
) -> Result<Var> {
    let (Some(&first), Some(&last)) = (x_tilde.first(), hidden.last()) else {
        return Err(Error::Degenerate("prediction needs at least one time step".into()));
    };
    let mut total = first;
    for &xt in &x_tilde[1..] {
        total = tape.add(total, xt)?;
    }
    let mean = tape.scale(total, S::one() / S::from_usize(x_tilde.len()).unwrap());
    let features = tape.concat(&[last, mean], 1)?;
    affine(tape, features, w, b)
}

/// Tape handles for one batched forward pass.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub x_hat: Vec<Var>,
    pub x_tilde: Vec<Var>,
    pub hidden: Vec<Var>,
    /// `B×1` pre-sigmoid predictions.
    pub logits: Var,
}

/// Runs the recurrence from `h⁰ = 0` over every step of `batch`.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    w: &ModelWeights<Var>,
    batch: &Batch<S>,
) -> Result<Trajectory> {
    let rows = batch.rows();
    if let Some(x) = batch.x.first() {
        if x.shape()[1] != cfg.features {
            return Err(Error::Dimension {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![rows, cfg.features],
            });
        }
    }
    let mut h = tape.constant(Tensor::zeros(vec![rows, cfg.hidden]));
    let steps = batch.steps();
    let mut traj = Trajectory {
        x_hat: Vec::with_capacity(steps),
        x_tilde: Vec::with_capacity(steps),
        hidden: Vec::with_capacity(steps),
        logits: h,
    };
    for t in 0..steps {
        let h_dec = decay_hidden(tape, h, &batch.delta[t], w.decay, w.decay_bias)?;
        let x_hat = impute_step(
            tape,
            h_dec,
            &batch.x[t],
            &batch.v[t],
            w.impute_in,
            w.impute_in_bias,
            w.impute_out,
            w.impute_out_bias,
        )?;
        let x = tape.constant(batch.x[t].clone());
        let x_tilde = masked_combine(tape, x, x_hat, &batch.v[t])?;
        h = match cfg.cell {
            CellKind::Tanh => {
                rnn_step(tape, h_dec, x_tilde, w.hidden_hidden, w.input_hidden, w.hidden_bias)?
            }
        };
        traj.x_hat.push(x_hat);
        traj.x_tilde.push(x_tilde);
        traj.hidden.push(h);
    }
    traj.logits = predict_output(tape, &traj.x_tilde, &traj.hidden, w.output, w.output_bias)?;
    Ok(traj)
}

/// One sample's forward pass, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult<S> {
    pub steps: usize,
    /// T×M imputations for every cell.
    pub x_hat: Vec<S>,
    /// T×M merged input.
    pub x_tilde: Vec<S>,
    /// T×H hidden trajectory.
    pub hidden: Vec<S>,
    pub logit: S,
}

impl Trajectory {
    /// Splits the batched values into per-sample results.
    pub fn results<S: Scalar>(&self, tape: &Tape<S>) -> Vec<ForwardResult<S>> {
        let rows = tape.shape(self.logits)[0];
        let gather = |vars: &[Var], i: usize| -> Vec<S> {
            let mut out = Vec::new();
            for &v in vars {
                let t = tape.value(v);
                let c = t.cols();
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            out
        };
        (0..rows)
            .map(|i| ForwardResult {
                steps: self.x_hat.len(),
                x_hat: gather(&self.x_hat, i),
                x_tilde: gather(&self.x_tilde, i),
                hidden: gather(&self.hidden, i),
                logit: tape.value(self.logits).data()[i],
            })
            .collect()
    }
}
