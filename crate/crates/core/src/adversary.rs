//! Per-factor discriminators over variable tuples.
//!
//! Each adversary scores the concatenated `(x_i, pa(x_i))` slot layout;
//! bottom-up samples are mapped onto the same slots, which is always possible
//! because the full joint assignment is available from either chain. The
//! sigmoid head learns the `p/(p+q)` convention; divergence estimators apply
//! the mixture corrections where they need them.

use crate::error::{TensorError, TrainError};
use crate::nn::{Activation, BoundMlp};
use crate::tape::Var;
use crate::{Mlp, Real, Rng, Tape};

#[cfg(test)]
use crate::Tensor;

/// Logit clamp: far-from-optimal discriminators would otherwise produce
/// unbounded log-ratios inside the model loss.
pub const LOGIT_CLAMP: Real = 30.0;

/// Which density ratio a discriminator output should be read as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioDirection {
    /// log D (the top-down chain's component against the mixture).
    POverM,
    /// log (1 - D) (the bottom-up component against the mixture).
    QOverM,
    /// log D / (1 - D) (the discriminator logit).
    POverQ,
    /// log (1 - D) / D.
    QOverP,
}

/// Discriminator for one factor's tuple, with its own parameters.
#[derive(Clone, Debug)]
pub struct LocalAdversary {
    /// Factor index in the generative graph (by child variable).
    pub factor: usize,
    /// Total input width of the `(x_i, pa(x_i))` tuple.
    pub in_dim: usize,
    pub net: Mlp,
}

impl LocalAdversary {
    /// Default architecture: two tanh hidden layers of 64 units, linear head
    /// (the sigmoid is applied after clamping).
    pub fn new(factor: usize, in_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut dims = vec![in_dim.max(1)];
        dims.extend_from_slice(if hidden.is_empty() { &[64, 64] } else { hidden });
        dims.push(1);
        LocalAdversary {
            factor,
            in_dim,
            net: Mlp::new(&dims, Activation::Tanh, Activation::Identity, rng),
        }
    }

    pub fn bind<'t>(&'t self, tape: &'t Tape) -> BoundAdversary<'t> {
        BoundAdversary {
            adv: self,
            net: self.net.bind(tape),
        }
    }
}

/// An adversary registered on a tape.
pub struct BoundAdversary<'t> {
    adv: &'t LocalAdversary,
    net: BoundMlp<'t, Real>,
}

impl<'t> BoundAdversary<'t> {
    pub fn param_vars(&self) -> Vec<Var<'t, Real>> {
        self.net.param_vars()
    }

    /// Factor index this adversary scores.
    pub fn factor(&self) -> usize {
        self.adv.factor
    }

    pub fn in_dim(&self) -> usize {
        self.adv.in_dim
    }

    /// Clamped logit of the discriminator, `[n, 1]`.
    pub fn logit(&self, tuple: Var<'t, Real>) -> Result<Var<'t, Real>, TensorError> {
        let got = tuple.value().last_dim();
        if got != self.adv.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "discriminate",
                lhs: tuple.value().shape().to_vec(),
                rhs: vec![self.adv.in_dim],
            });
        }
        self.net.forward(tuple)?.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    }

    /// Probability that the tuple came from the top-down (model) chain,
    /// strictly inside (0, 1).
    pub fn discriminate(&self, tuple: Var<'t, Real>) -> Result<Var<'t, Real>, TensorError> {
        self.logit(tuple)?.sigmoid()
    }

    /// Mean per-class negative log-likelihood: label 1 for top-down tuples,
    /// label 0 for bottom-up tuples, averaged within each class then summed.
    pub fn loss_loc_d(
        &self,
        top_down: Var<'t, Real>,
        bottom_up: Var<'t, Real>,
    ) -> Result<Var<'t, Real>, TrainError> {
        if top_down.value().lead() == 0 || bottom_up.value().lead() == 0 {
            return Err(TrainError::EmptyBatch("loss_locD"));
        }
        // -log D = softplus(-logit), -log(1-D) = softplus(logit)
        let td = self.logit(top_down)?.neg()?.softplus()?.mean()?;
        let bu = self.logit(bottom_up)?.softplus()?.mean()?;
        Ok(td.add(bu)?)
    }

    /// Log-ratio component of the requested direction, `[n, 1]`, computed on
    /// the clamped logit in softplus form so it stays finite.
    pub fn ratio_log(
        &self,
        tuple: Var<'t, Real>,
        direction: RatioDirection,
    ) -> Result<Var<'t, Real>, TensorError> {
        ratio_log_from_logit(self.logit(tuple)?, direction)
    }
}

/// Width of the `(x_i, pa(x_i))` tuple a factor's adversary scores.
pub fn tuple_width(graph: &crate::graph::ModelGraph, factor: usize) -> usize {
    let mut w = graph.var(factor).width();
    for &p in graph.parents(factor) {
        w += graph.var(p).width();
    }
    w
}

/// One discriminator per factor, sized to the factor's tuple.
pub fn make_local_adversaries(
    graph: &crate::graph::ModelGraph,
    hidden: &[usize],
    rng: &mut Rng,
) -> Vec<LocalAdversary> {
    (0..graph.num_vars())
        .map(|v| LocalAdversary::new(v, tuple_width(graph, v), hidden, rng))
        .collect()
}

/// Shared logit-to-log-ratio transform.
pub fn ratio_log_from_logit<'t>(
    logit: Var<'t, Real>,
    direction: RatioDirection,
) -> Result<Var<'t, Real>, TensorError> {
    match direction {
        RatioDirection::POverM => logit.neg()?.softplus()?.neg(), // log D
        RatioDirection::QOverM => logit.softplus()?.neg(),        // log (1-D)
        RatioDirection::POverQ => Ok(logit),
        RatioDirection::QOverP => logit.neg(),
    }
}

/// The closed-form optimum `D*(x) = p(x) / (p(x) + q(x))` built from
/// pointwise-evaluable densities; test oracle for trained discriminators.
pub struct AnalyticDiscriminator<P, Q> {
    pub p: P,
    pub q: Q,
}

impl<P: Fn(Real) -> Real, Q: Fn(Real) -> Real> AnalyticDiscriminator<P, Q> {
    pub fn new(p: P, q: Q) -> Self {
        AnalyticDiscriminator { p, q }
    }

    pub fn eval(&self, x: Real) -> Real {
        let pv = (self.p)(x);
        let qv = (self.q)(x);
        if pv + qv == 0.0 {
            0.5
        } else {
            pv / (pv + qv)
        }
    }

    pub fn logit(&self, x: Real) -> Real {
        let d = self.eval(x).clamp(1e-300, 1.0 - 1e-16);
        (d / (1.0 - d)).ln()
    }
}
