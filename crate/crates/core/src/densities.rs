//! Conditional distribution families attached to factors.
//!
//! Explicit families (diagonal Gaussian, Bernoulli, Categorical) provide exact
//! log-densities and, for the Gaussian, reparametrized sampling so gradients
//! flow to the parameters. Implicit samplers push parents and fresh noise
//! through a network and are never evaluated as densities; adversaries score
//! their samples instead.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{DensityError, TensorError};
use crate::nn::BoundMlp;
use crate::tape::{concat, Var};
use crate::{Mlp, Real, Rng, Tape, Tensor};

const LOG_2PI: Real = 1.8378770664093453;

/// Where a Gaussian mean comes from.
#[derive(Clone, Debug)]
pub enum MeanSource {
    /// Constant vector (root priors, fixed likelihood means).
    Const(Tensor),
    /// Mean equals the concatenated parent values (linear-Gaussian chains).
    Identity,
    /// Network over concatenated parents; output is the mean, or
    /// `[mean, log_std]` when the log-std head is [`StdSource::FromNet`].
    Net(Mlp),
}

/// Where a Gaussian log-std comes from.
#[derive(Clone, Debug)]
pub enum StdSource {
    /// Fixed scalar std, not trainable.
    Fixed(Real),
    /// Trainable per-dimension log-std vector.
    Param(Tensor),
    /// Second half of the mean network's output.
    FromNet,
}

/// Logit source for Bernoulli/Categorical factors.
#[derive(Clone, Debug)]
pub enum LogitSource {
    Const(Tensor),
    Net(Mlp),
}

/// Base noise distribution for implicit samplers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NoiseKind {
    Normal,
    Uniform,
}

/// Parameters of one conditional factor (generative or variational).
#[derive(Clone, Debug)]
pub enum FactorParams {
    Gaussian {
        dim: usize,
        mean: MeanSource,
        log_std: StdSource,
        trainable: bool,
    },
    Bernoulli {
        dim: usize,
        logits: LogitSource,
        trainable: bool,
    },
    Categorical {
        k: usize,
        logits: LogitSource,
        trainable: bool,
    },
    /// Noise-injection sampler `x = f_vf(parents, eps)`.
    Implicit {
        net: Mlp,
        out_dim: usize,
        noise_dim: usize,
        noise: NoiseKind,
        trainable: bool,
    },
}

impl FactorParams {
    pub fn out_width(&self) -> usize {
        match self {
            FactorParams::Gaussian { dim, .. } => *dim,
            FactorParams::Bernoulli { dim, .. } => *dim,
            FactorParams::Categorical { k, .. } => *k,
            FactorParams::Implicit { out_dim, .. } => *out_dim,
        }
    }

    pub fn trainable(&self) -> bool {
        match self {
            FactorParams::Gaussian { trainable, .. }
            | FactorParams::Bernoulli { trainable, .. }
            | FactorParams::Categorical { trainable, .. }
            | FactorParams::Implicit { trainable, .. } => *trainable,
        }
    }

    pub fn is_explicit(&self) -> bool {
        !matches!(self, FactorParams::Implicit { .. })
    }

    /// Discrete families give no pathwise gradient through their samples.
    pub fn is_discrete(&self) -> bool {
        matches!(self, FactorParams::Bernoulli { .. } | FactorParams::Categorical { .. })
    }

    /// Parameter tensors in a fixed order (for optimizers and checkpoints).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        match self {
            FactorParams::Gaussian { mean, log_std, .. } => {
                let mut out = Vec::new();
                match mean {
                    MeanSource::Const(t) => out.push(t),
                    MeanSource::Identity => {}
                    MeanSource::Net(m) => out.extend(m.params()),
                }
                if let StdSource::Param(t) = log_std {
                    out.push(t);
                }
                out
            }
            FactorParams::Bernoulli { logits, .. } | FactorParams::Categorical { logits, .. } => {
                match logits {
                    LogitSource::Const(t) => vec![t],
                    LogitSource::Net(m) => m.params(),
                }
            }
            FactorParams::Implicit { net, .. } => net.params(),
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FactorParams::Gaussian { mean, log_std, .. } => {
                let mut out: Vec<&mut Tensor> = Vec::new();
                match mean {
                    MeanSource::Const(t) => out.push(t),
                    MeanSource::Identity => {}
                    MeanSource::Net(m) => out.extend(m.params_mut()),
                }
                if let StdSource::Param(t) = log_std {
                    out.push(t);
                }
                out
            }
            FactorParams::Bernoulli { logits, .. } | FactorParams::Categorical { logits, .. } => {
                match logits {
                    LogitSource::Const(t) => vec![t],
                    LogitSource::Net(m) => m.params_mut(),
                }
            }
            FactorParams::Implicit { net, .. } => net.params_mut(),
        }
    }

    /// Register parameters on a tape for one forward/backward cycle.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> BoundFactor<'t> {
        let nets = match self {
            FactorParams::Gaussian { mean: MeanSource::Net(m), .. } => vec![m.bind(tape)],
            FactorParams::Bernoulli { logits: LogitSource::Net(m), .. } => vec![m.bind(tape)],
            FactorParams::Categorical { logits: LogitSource::Net(m), .. } => vec![m.bind(tape)],
            FactorParams::Implicit { net, .. } => vec![net.bind(tape)],
            _ => vec![],
        };
        let consts = match self {
            FactorParams::Gaussian { mean, log_std, .. } => {
                let mut out = Vec::new();
                if let MeanSource::Const(t) = mean {
                    out.push(tape.leaf(t.clone()));
                }
                if let StdSource::Param(t) = log_std {
                    out.push(tape.leaf(t.clone()));
                }
                out
            }
            FactorParams::Bernoulli { logits: LogitSource::Const(t), .. }
            | FactorParams::Categorical { logits: LogitSource::Const(t), .. } => {
                vec![tape.leaf(t.clone())]
            }
            _ => vec![],
        };
        BoundFactor {
            spec: self,
            tape,
            nets,
            consts,
        }
    }
}

/// A factor's parameters recorded on a tape.
pub struct BoundFactor<'t> {
    spec: &'t FactorParams,
    tape: &'t Tape,
    nets: Vec<BoundMlp<'t, Real>>,
    consts: Vec<Var<'t, Real>>,
}

/// Broadcast a rank-1 vector var to `[n, d]` rows.
fn broadcast_rows<'t>(tape: &'t Tape, v: Var<'t, Real>, n: usize) -> Result<Var<'t, Real>, TensorError> {
    let d = v.value().numel();
    let zeros = tape.leaf(Tensor::zeros(&[n, d]));
    zeros.add(v)
}

/// Row-wise sum over the last axis: `[n, d] -> [n, 1]` (matmul with ones).
pub fn row_sum<'t>(tape: &'t Tape, x: Var<'t, Real>) -> Result<Var<'t, Real>, TensorError> {
    let d = x.value().last_dim();
    let ones = tape.leaf(Tensor::full(&[d, 1], 1.0));
    x.matmul(ones)
}

/// Broadcast a `[n,1]` column over the last axis: `[n, 1] -> [n, d]`.
pub fn col_broadcast<'t>(tape: &'t Tape, x: Var<'t, Real>, d: usize) -> Result<Var<'t, Real>, TensorError> {
    let ones = tape.leaf(Tensor::full(&[1, d], 1.0));
    x.matmul(ones)
}

/// Row-stable log-sum-exp over the last axis, `[n, k] -> [n, 1]`.
fn log_sum_exp<'t>(tape: &'t Tape, logits: Var<'t, Real>) -> Result<Var<'t, Real>, TensorError> {
    let v = logits.value();
    let (n, k) = (v.lead(), v.last_dim());
    let mut maxes = Vec::with_capacity(n);
    for r in 0..n {
        let row = &v.data()[r * k..(r + 1) * k];
        maxes.push(row.iter().cloned().fold(Real::NEG_INFINITY, Real::max));
    }
    // The shift is a constant; the gradient of lse is unaffected by it.
    let c = tape.leaf(Tensor::new(vec![n, 1], maxes)?);
    let shifted = logits.sub(col_broadcast(tape, c, k)?)?;
    let s = row_sum(tape, shifted.exp()?)?;
    s.log()?.add(c)
}

impl<'t> BoundFactor<'t> {
    pub fn spec(&self) -> &FactorParams {
        self.spec
    }

    /// Parameter vars aligned with [`FactorParams::param_tensors`].
    pub fn param_vars(&self) -> Vec<Var<'t, Real>> {
        let mut out: Vec<Var<'t, Real>> = Vec::new();
        match self.spec {
            FactorParams::Gaussian { mean, log_std, .. } => {
                let mut consts = self.consts.iter();
                if matches!(mean, MeanSource::Const(_)) {
                    out.push(*consts.next().expect("const mean bound"));
                }
                if matches!(mean, MeanSource::Net(_)) {
                    out.extend(self.nets[0].param_vars());
                }
                if matches!(log_std, StdSource::Param(_)) {
                    out.push(*consts.next().expect("param log_std bound"));
                }
            }
            FactorParams::Bernoulli { logits, .. } | FactorParams::Categorical { logits, .. } => {
                match logits {
                    LogitSource::Const(_) => out.push(self.consts[0]),
                    LogitSource::Net(_) => out.extend(self.nets[0].param_vars()),
                }
            }
            FactorParams::Implicit { .. } => out.extend(self.nets[0].param_vars()),
        }
        out
    }

    fn parent_input(&self, parents: &[Var<'t, Real>]) -> Result<Option<Var<'t, Real>>, TensorError> {
        if parents.is_empty() {
            Ok(None)
        } else if parents.len() == 1 {
            Ok(Some(parents[0]))
        } else {
            Ok(Some(concat(parents)?))
        }
    }

    /// Gaussian natural parameters `(mean, log_std)` as `[n, d]` vars.
    fn gaussian_heads(
        &self,
        parents: &[Var<'t, Real>],
        n: usize,
    ) -> Result<(Var<'t, Real>, Var<'t, Real>), DensityError> {
        let (dim, mean_src, std_src) = match self.spec {
            FactorParams::Gaussian { dim, mean, log_std, .. } => (*dim, mean, log_std),
            _ => unreachable!("gaussian_heads on non-gaussian factor"),
        };
        let mut consts = self.consts.iter();
        let mean = match mean_src {
            MeanSource::Const(_) => {
                let v = *consts.next().expect("const mean bound");
                broadcast_rows(self.tape, v, n)?
            }
            MeanSource::Identity => self
                .parent_input(parents)?
                .ok_or_else(|| DensityError::OutOfSupport {
                    family: "gaussian",
                    detail: "identity mean requires parents".into(),
                })?,
            MeanSource::Net(_) => {
                let input = self.parent_input(parents)?.ok_or_else(|| DensityError::OutOfSupport {
                    family: "gaussian",
                    detail: "network mean requires parents".into(),
                })?;
                let out = self.nets[0].forward(input)?;
                if matches!(std_src, StdSource::FromNet) {
                    out.slice(0, dim)?
                } else {
                    out
                }
            }
        };
        let log_std = match std_src {
            StdSource::Fixed(s) => {
                if *s == 0.0 {
                    // degenerate scale: handled by caller as exact mean
                    self.tape.leaf(Tensor::full(&[n, dim], Real::NEG_INFINITY))
                } else {
                    self.tape.leaf(Tensor::full(&[n, dim], s.ln()))
                }
            }
            StdSource::Param(_) => {
                let v = *consts.next().expect("param log_std bound");
                broadcast_rows(self.tape, v, n)?
            }
            StdSource::FromNet => {
                let input = self.parent_input(parents)?.ok_or_else(|| DensityError::OutOfSupport {
                    family: "gaussian",
                    detail: "network log-std requires parents".into(),
                })?;
                self.nets[0].forward(input)?.slice(dim, dim)?
            }
        };
        Ok((mean, log_std))
    }

    fn logits(&self, parents: &[Var<'t, Real>], n: usize) -> Result<Var<'t, Real>, DensityError> {
        let src = match self.spec {
            FactorParams::Bernoulli { logits, .. } | FactorParams::Categorical { logits, .. } => logits,
            _ => unreachable!("logits on continuous factor"),
        };
        Ok(match src {
            LogitSource::Const(_) => broadcast_rows(self.tape, self.consts[0], n)?,
            LogitSource::Net(_) => {
                let input = self.parent_input(parents)?.ok_or_else(|| DensityError::OutOfSupport {
                    family: "discrete",
                    detail: "network logits require parents".into(),
                })?;
                self.nets[0].forward(input)?
            }
        })
    }

    /// Draw `n` samples given parent rows. Gaussian and implicit samples are
    /// reparametrized; discrete samples are constants drawn by inversion.
    pub fn sample(
        &self,
        parents: &[Var<'t, Real>],
        n: usize,
        rng: &mut Rng,
    ) -> Result<Var<'t, Real>, DensityError> {
        match self.spec {
            FactorParams::Gaussian { dim, .. } => {
                let eps: Vec<Real> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
                self.sample_gaussian_with_eps(parents, Tensor::new(vec![n, *dim], eps)?)
            }
            FactorParams::Bernoulli { dim, .. } => {
                let logits = self.logits(parents, n)?;
                let probs = logits.sigmoid()?.value();
                let mut draw = Vec::with_capacity(n * dim);
                for &p in probs.data() {
                    draw.push(if rng.gen::<Real>() < p { 1.0 } else { 0.0 });
                }
                Ok(self.tape.leaf(Tensor::new(vec![n, *dim], draw)?))
            }
            FactorParams::Categorical { k, .. } => {
                let logits = self.logits(parents, n)?;
                let lse = log_sum_exp(self.tape, logits)?;
                let probs = logits.sub(col_broadcast(self.tape, lse, *k)?)?.exp()?.value();
                let mut draw = vec![0.0; n * k];
                for r in 0..n {
                    let row = &probs.data()[r * k..(r + 1) * k];
                    let u: Real = rng.gen();
                    let mut acc = 0.0;
                    let mut hit = k - 1;
                    for (j, &p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            hit = j;
                            break;
                        }
                    }
                    draw[r * k + hit] = 1.0;
                }
                Ok(self.tape.leaf(Tensor::new(vec![n, *k], draw)?))
            }
            FactorParams::Implicit { noise_dim, noise, .. } => {
                let eps: Vec<Real> = (0..n * noise_dim)
                    .map(|_| match noise {
                        NoiseKind::Normal => rng.sample(StandardNormal),
                        NoiseKind::Uniform => rng.gen::<Real>() * 2.0 - 1.0,
                    })
                    .collect();
                self.sample_implicit_with_eps(parents, Tensor::new(vec![n, *noise_dim], eps)?)
            }
        }
    }

    /// Reparametrized Gaussian draw with caller-supplied noise.
    pub fn sample_gaussian_with_eps(
        &self,
        parents: &[Var<'t, Real>],
        eps: Tensor,
    ) -> Result<Var<'t, Real>, DensityError> {
        let n = eps.lead();
        let (mean, log_std) = self.gaussian_heads(parents, n)?;
        if let FactorParams::Gaussian { log_std: StdSource::Fixed(s), .. } = self.spec {
            if *s == 0.0 {
                return Ok(mean);
            }
        }
        let sigma = log_std.exp()?;
        let e = self.tape.leaf(eps);
        Ok(mean.add(sigma.mul(e)?)?)
    }

    /// Implicit draw with caller-supplied noise (common-random-number tests).
    pub fn sample_implicit_with_eps(
        &self,
        parents: &[Var<'t, Real>],
        eps: Tensor,
    ) -> Result<Var<'t, Real>, DensityError> {
        let e = self.tape.leaf(eps);
        let input = match self.parent_input(parents)? {
            Some(p) => concat(&[p, e])?,
            None => e,
        };
        Ok(self.nets[0].forward(input)?)
    }

    /// Exact per-sample log-density/log-mass, `[n, 1]`.
    pub fn log_prob(
        &self,
        value: Var<'t, Real>,
        parents: &[Var<'t, Real>],
    ) -> Result<Var<'t, Real>, DensityError> {
        let n = value.value().lead();
        match self.spec {
            FactorParams::Gaussian { .. } => {
                let (mean, log_std) = self.gaussian_heads(parents, n)?;
                if !log_std.value().all_finite() {
                    return Err(DensityError::OutOfSupport {
                        family: "gaussian",
                        detail: "log_prob undefined for zero-variance factor".into(),
                    });
                }
                let inv_sigma = log_std.neg()?.exp()?;
                let z = value.sub(mean)?.mul(inv_sigma)?;
                let per_dim = z
                    .square()?
                    .scale(-0.5)?
                    .sub(log_std)?
                    .affine(1.0, -0.5 * LOG_2PI)?;
                Ok(row_sum(self.tape, per_dim)?)
            }
            FactorParams::Bernoulli { .. } => {
                let v = value.value();
                if v.data().iter().any(|&x| x != 0.0 && x != 1.0) {
                    return Err(DensityError::OutOfSupport {
                        family: "bernoulli",
                        detail: "values must be exactly 0 or 1".into(),
                    });
                }
                let logits = self.logits(parents, n)?;
                let sp_pos = logits.softplus()?; // -log(1-p)
                let sp_neg = logits.neg()?.softplus()?; // -log p
                let one_minus = value.affine(-1.0, 1.0)?;
                let nll = value.mul(sp_neg)?.add(one_minus.mul(sp_pos)?)?;
                Ok(row_sum(self.tape, nll)?.neg()?)
            }
            FactorParams::Categorical { k, .. } => {
                let v = value.value();
                for r in 0..n {
                    let row = &v.data()[r * k..(r + 1) * k];
                    let ones = row.iter().filter(|&&x| x == 1.0).count();
                    if ones != 1 || row.iter().any(|&x| x != 0.0 && x != 1.0) {
                        return Err(DensityError::OutOfSupport {
                            family: "categorical",
                            detail: "values must be one-hot".into(),
                        });
                    }
                }
                let logits = self.logits(parents, n)?;
                let lse = log_sum_exp(self.tape, logits)?;
                let lsm = logits.sub(col_broadcast(self.tape, lse, *k)?)?;
                Ok(row_sum(self.tape, value.mul(lsm)?)?)
            }
            FactorParams::Implicit { .. } => Err(DensityError::ImplicitDensity),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;

    fn gaussian_const(mean: Real, std: Real) -> FactorParams {
        FactorParams::Gaussian {
            dim: 1,
            mean: MeanSource::Const(Tensor::new(vec![1], vec![mean]).unwrap()),
            log_std: StdSource::Fixed(std),
            trainable: false,
        }
    }

    #[test]
    fn standard_normal_log_prob_at_zero() {
        let tape = Tape::new();
        let f = gaussian_const(0.0, 1.0);
        let b = f.bind(&tape);
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let lp = b.log_prob(x, &[]).unwrap().value().item().unwrap();
        assert!((lp - (-0.9189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_half_log_prob() {
        let tape = Tape::new();
        let f = FactorParams::Bernoulli {
            dim: 1,
            logits: LogitSource::Const(Tensor::new(vec![1], vec![0.0]).unwrap()),
            trainable: false,
        };
        let b = f.bind(&tape);
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let lp = b.log_prob(x, &[]).unwrap().value().item().unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_rejects_non_binary() {
        let tape = Tape::new();
        let f = FactorParams::Bernoulli {
            dim: 1,
            logits: LogitSource::Const(Tensor::new(vec![1], vec![0.0]).unwrap()),
            trainable: false,
        };
        let b = f.bind(&tape);
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        assert!(matches!(b.log_prob(x, &[]), Err(DensityError::OutOfSupport { .. })));
    }

    #[test]
    fn one_hot_categorical_log_prob_zero() {
        let tape = Tape::new();
        // Extreme logits make the hot index essentially probability one.
        let f = FactorParams::Categorical {
            k: 3,
            logits: LogitSource::Const(Tensor::new(vec![3], vec![100.0, 0.0, 0.0]).unwrap()),
            trainable: false,
        };
        let b = f.bind(&tape);
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let lp = b.log_prob(x, &[]).unwrap().value().item().unwrap();
        assert!(lp.abs() < 1e-12);
    }

    #[test]
    fn degenerate_gaussian_sample_is_mean() {
        let tape = Tape::new();
        let f = gaussian_const(5.0, 0.0);
        let b = f.bind(&tape);
        let mut rng = Rng::seed_from_u64(0);
        let s = b.sample(&[], 3, &mut rng).unwrap().value();
        assert!(s.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn reparametrization_formula() {
        let tape = Tape::new();
        let f = gaussian_const(0.0, 2.0);
        let b = f.bind(&tape);
        let s = b
            .sample_gaussian_with_eps(&[], Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert!((s.value().item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pathwise_mean_gradient_is_one() {
        // d/dmu of the sample mean is exactly 1 through the reparametrization.
        let mut rng = Rng::seed_from_u64(42);
        let eps: Vec<Real> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        let tape = Tape::new();
        let f = FactorParams::Gaussian {
            dim: 1,
            mean: MeanSource::Const(Tensor::new(vec![1], vec![0.3]).unwrap()),
            log_std: StdSource::Fixed(1.0),
            trainable: true,
        };
        let b = f.bind(&tape);
        let s = b
            .sample_gaussian_with_eps(&[], Tensor::new(vec![1000, 1], eps).unwrap())
            .unwrap();
        let loss = s.mean().unwrap();
        let g = tape.backward(loss.id).unwrap();
        let gm = g.wrt(b.param_vars()[0]).item().unwrap();
        assert!((gm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn implicit_identity_passes_parents() {
        let tape = Tape::new();
        let mut net = Mlp::zeroed(&[3, 2], Activation::Identity, Activation::Identity);
        // weight = [I2; 0] so output copies the two parent coords, ignores eps
        net.weights[0] = Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 0., 0.]).unwrap();
        let f = FactorParams::Implicit {
            net,
            out_dim: 2,
            noise_dim: 1,
            noise: NoiseKind::Normal,
            trainable: true,
        };
        let b = f.bind(&tape);
        let parents = tape.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let mut rng = Rng::seed_from_u64(1);
        let s = b.sample(&[parents], 2, &mut rng).unwrap().value();
        assert_eq!(s.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn implicit_sampler_is_deterministic_in_eps() {
        let mut rng = Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let f = FactorParams::Implicit {
            net,
            out_dim: 2,
            noise_dim: 1,
            noise: NoiseKind::Normal,
            trainable: true,
        };
        let parents = Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let eps = Tensor::new(vec![2, 1], vec![0.7, -1.1]).unwrap();
        let run = || {
            let tape = Tape::new();
            let b = f.bind(&tape);
            let p = tape.leaf(parents.clone());
            b.sample_implicit_with_eps(&[p], eps.clone()).unwrap().value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn implicit_linear_covariance() {
        // f_vf = A*eps with no parents: empirical covariance approaches A A^T.
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.8]).unwrap();
        let mut net = Mlp::zeroed(&[2, 2], Activation::Identity, Activation::Identity);
        net.weights[0] = a.clone();
        let f = FactorParams::Implicit {
            net,
            out_dim: 2,
            noise_dim: 2,
            noise: NoiseKind::Normal,
            trainable: false,
        };
        let tape = Tape::new();
        let b = f.bind(&tape);
        let mut rng = Rng::seed_from_u64(11);
        let n = 100_000;
        let s = b.sample(&[], n, &mut rng).unwrap().value();
        // empirical covariance
        let mut mean = [0.0; 2];
        for r in 0..n {
            mean[0] += s.data()[2 * r];
            mean[1] += s.data()[2 * r + 1];
        }
        mean[0] /= n as Real;
        mean[1] /= n as Real;
        let mut cov = [0.0; 4];
        for r in 0..n {
            let d0 = s.data()[2 * r] - mean[0];
            let d1 = s.data()[2 * r + 1] - mean[1];
            cov[0] += d0 * d0;
            cov[1] += d0 * d1;
            cov[2] += d1 * d0;
            cov[3] += d1 * d1;
        }
        for c in cov.iter_mut() {
            *c /= n as Real;
        }
        // A A^T (row-major A: rows of A are output loadings? A maps eps [n,2] x W[2,2])
        // sample = eps * W, so cov = W^T W
        let w = a.data();
        let target = [
            w[0] * w[0] + w[2] * w[2],
            w[0] * w[1] + w[2] * w[3],
            w[1] * w[0] + w[3] * w[2],
            w[1] * w[1] + w[3] * w[3],
        ];
        let frob: Real = cov
            .iter()
            .zip(&target)
            .map(|(c, t)| (c - t) * (c - t))
            .sum::<Real>()
            .sqrt();
        assert!(frob < 0.05, "frobenius error {frob}");
    }
}
