//! Factorized Gaussian weight posteriors trained by Bayes by Backprop.
//!
//! Each weight group is a [`VariationalTensor`] holding `(mu, rho)` with
//! `sigma = softplus(rho)`. A training step draws `w = mu + sigma ⊙ eps` on
//! the tape, so gradients of the loss reach both `mu` and `rho`. The
//! complexity cost is the single-draw Monte-Carlo estimate
//! `log q(w) - log p(w)` summed over every weight.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Initial spread parameter; `softplus(-3) ≈ 0.0486`.
pub const INITIAL_RHO: f64 = -3.0;

/// Gaussian posterior parameters for one weight group.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalTensor<S> {
    pub mu: Tensor<S>,
    pub rho: Tensor<S>,
}

impl<S: Scalar> VariationalTensor<S> {
    pub fn new(mu: Tensor<S>, rho: Tensor<S>) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::Dimension {
                op: "variational",
                lhs: mu.shape().to_vec(),
                rhs: rho.shape().to_vec(),
            });
        }
        Ok(VariationalTensor { mu, rho })
    }

    /// `mu ~ U(-1/√fan_in, 1/√fan_in)`, `rho = -3`.
    pub fn init<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        assert!(fan_in >= 1, "fan_in must be at least 1");
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let mu = (0..n)
            .map(|_| S::lit(rng.random_range(-bound..=bound)))
            .collect();
        VariationalTensor {
            mu: Tensor::new(shape.clone(), mu).expect("length matches shape"),
            rho: Tensor::from_elem(shape, S::lit(INITIAL_RHO)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor<S> {
        self.rho.map(S::softplus)
    }

    /// Concrete weights `mu + softplus(rho) ⊙ eps`, off the tape.
    pub fn realize(&self, eps: &Tensor<S>) -> Tensor<S> {
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.rho.data())
            .zip(eps.data())
            .map(|((&m, &r), &e)| m + r.softplus() * e)
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data).expect("shapes mirror mu")
    }

    /// Places `mu` and `rho` on the tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundVariational {
        BoundVariational {
            mu: tape.leaf(self.mu.clone()),
            rho: tape.leaf(self.rho.clone()),
        }
    }
}

/// Standard-normal draws shaped like a weight group.
pub fn draw_eps<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            S::lit(e)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Tape handles for a group's posterior parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundVariational {
    pub mu: Var,
    pub rho: Var,
}

/// One reparameterized draw, recorded on the tape.
#[derive(Clone, Debug)]
pub struct SampledWeights<S> {
    pub mu: Var,
    pub rho: Var,
    pub sigma: Var,
    pub eps: Tensor<S>,
    pub w: Var,
}

/// `w = mu + softplus(rho) ⊙ eps` with `eps` held as a constant.
pub fn sample_weights<S: Scalar>(
    tape: &mut Tape<S>,
    bound: BoundVariational,
    eps: Tensor<S>,
) -> Result<SampledWeights<S>> {
    let sigma = tape.softplus(bound.rho);
    let e = tape.constant(eps.clone());
    let spread = tape.mul(sigma, e)?;
    let w = tape.add(bound.mu, spread)?;
    Ok(SampledWeights {
        mu: bound.mu,
        rho: bound.rho,
        sigma,
        eps,
        w,
    })
}

fn half_ln_two_pi<S: Scalar>() -> S {
    S::lit(0.5) * (S::lit(2.0) * S::PI()).ln()
}

/// `Σ log N(w; mu, sigma²)` over the group.
pub fn log_q<S: Scalar>(tape: &mut Tape<S>, sw: &SampledWeights<S>) -> Result<Var> {
    let diff = tape.sub(sw.w, sw.mu)?;
    let log_sigma = tape.log(sw.sigma)?;
    let neg_log_sigma = tape.neg(log_sigma);
    let inv_sigma = tape.exp(neg_log_sigma);
    let z = tape.mul(diff, inv_sigma)?;
    let z2 = tape.mul(z, z)?;
    let quad = tape.scale(z2, S::lit(-0.5));
    let per_weight = tape.sub(quad, log_sigma)?;
    let s = tape.sum(per_weight);
    let n = S::from_usize(tape.value(sw.w).len()).unwrap();
    Ok(tape.offset(s, -n * half_ln_two_pi::<S>()))
}

/// Two-component zero-mean Gaussian mixture prior over weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleMixturePrior<S> {
    pub pi: S,
    pub sigma1: S,
    pub sigma2: S,
}

impl<S: Scalar> Default for ScaleMixturePrior<S> {
    fn default() -> Self {
        ScaleMixturePrior {
            pi: S::lit(0.5),
            sigma1: S::one(),
            sigma2: S::lit((-6.0f64).exp()),
        }
    }
}

impl<S: Scalar> ScaleMixturePrior<S> {
    pub fn new(pi: S, sigma1: S, sigma2: S) -> Result<Self> {
        let prior = ScaleMixturePrior { pi, sigma1, sigma2 };
        prior.validate()?;
        Ok(prior)
    }

    /// A single Gaussian `N(0, sigma²)`.
    pub fn gaussian(sigma: S) -> Self {
        ScaleMixturePrior {
            pi: S::one(),
            sigma1: sigma,
            sigma2: sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi >= S::zero() && self.pi <= S::one()) {
            return Err(Error::Config(format!("prior pi {} outside [0, 1]", self.pi)));
        }
        if !(self.sigma2 > S::zero() && self.sigma1 >= self.sigma2) {
            return Err(Error::Config(format!(
                "prior needs sigma1 >= sigma2 > 0, got {} and {}",
                self.sigma1, self.sigma2
            )));
        }
        Ok(())
    }

    /// Scalar log density, used by tests and diagnostics.
    pub fn log_density(&self, w: S) -> S {
        let comp = |weight: S, sigma: S| {
            weight.ln() - half_ln_two_pi::<S>() - sigma.ln() - w * w / (S::lit(2.0) * sigma * sigma)
        };
        let one = S::one();
        if self.pi == one {
            return comp(one, self.sigma1);
        }
        if self.pi == S::zero() {
            return comp(one, self.sigma2);
        }
        let a = comp(self.pi, self.sigma1);
        let b = comp(one - self.pi, self.sigma2);
        a + (b - a).softplus()
    }
}

/// Per-entry `log w_c - ½ln2π - ln σ_c - w²/(2σ_c²)` on the tape, where `w2 = w⊙w`.
fn component<S: Scalar>(tape: &mut Tape<S>, w2: Var, weight: S, sigma: S) -> Var {
    let k = -S::one() / (S::lit(2.0) * sigma * sigma);
    let c = weight.ln() - half_ln_two_pi::<S>() - sigma.ln();
    let q = tape.scale(w2, k);
    tape.offset(q, c)
}

/// `Σ log[pi·N(w;0,σ1²) + (1-pi)·N(w;0,σ2²)]`, via `a + softplus(b - a)`.
pub fn log_prior<S: Scalar>(tape: &mut Tape<S>, w: Var, prior: &ScaleMixturePrior<S>) -> Result<Var> {
    let w2 = tape.mul(w, w)?;
    let one = S::one();
    let per_weight = if prior.pi == one {
        component(tape, w2, one, prior.sigma1)
    } else if prior.pi == S::zero() {
        component(tape, w2, one, prior.sigma2)
    } else {
        let a = component(tape, w2, prior.pi, prior.sigma1);
        let b = component(tape, w2, one - prior.pi, prior.sigma2);
        let d = tape.sub(b, a)?;
        let sp = tape.softplus(d);
        tape.add(a, sp)?
    };
    Ok(tape.sum(per_weight))
}

/// Single-draw MC estimate of `KL[q || p]` summed over all groups.
pub fn kl_mc_terms<S: Scalar>(
    tape: &mut Tape<S>,
    groups: &[&SampledWeights<S>],
    prior: &ScaleMixturePrior<S>,
) -> Result<Var> {
    let mut total = tape.constant_scalar(S::zero());
    for sw in groups {
        let lq = log_q(tape, sw)?;
        let lp = log_prior(tape, sw.w, prior)?;
        let kl = tape.sub(lq, lp)?;
        total = tape.add(total, kl)?;
    }
    Ok(total)
}
