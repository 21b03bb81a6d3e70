//! Toy datasets and minibatch plumbing.
//!
//! Three desk-scale data sources with known ground truth: a 1-D linear-Gaussian
//! chain (conjugate posterior available), a 2-D pinwheel for implicit models,
//! and 16-dimensional Bernoulli "mini-digits" drawn from a fixed two-layer
//! generative model so true parameters exist.

use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::densities::{FactorParams, LogitSource, MeanSource, StdSource};
use crate::error::{GraphError, TrainError};
use crate::graph::{ModelGraph, Role, Support, VariableDecl};
use crate::model::{ancestral_sample, GenerativeModel};
use crate::nn::Activation;
use crate::{Mlp, Real, Rng, Tape, Tensor};

/// A fixed table of observations, one `[n, width]` tensor per observed
/// variable, with optional per-datum observation masks.
#[derive(Clone, Debug)]
pub struct Dataset {
    observed: BTreeMap<usize, Tensor>,
    /// Per datum, one flag per entry of `observed_vars()` (ascending index
    /// order); `false` masks the value out for that datum.
    pub masks: Option<Vec<Vec<bool>>>,
    n: usize,
}

impl Dataset {
    /// Validate that all variables carry the same number of rows.
    pub fn new(observed: BTreeMap<usize, Tensor>) -> Result<Self, TrainError> {
        let mut n = None;
        for (v, t) in &observed {
            match n {
                None => n = Some(t.lead()),
                Some(m) if m != t.lead() => {
                    return Err(GraphError::Invalid(format!(
                        "dataset variable {v} has {} rows, expected {m}",
                        t.lead()
                    ))
                    .into())
                }
                _ => {}
            }
        }
        let n = n.ok_or(TrainError::Config("dataset has no observed variables".into()))?;
        Ok(Dataset {
            observed,
            masks: None,
            n,
        })
    }

    pub fn with_masks(mut self, masks: Vec<Vec<bool>>) -> Result<Self, TrainError> {
        if masks.len() != self.n {
            return Err(TrainError::Config(format!(
                "mask count {} does not match dataset rows {}",
                masks.len(),
                self.n
            )));
        }
        let width = self.observed.len();
        if let Some(bad) = masks.iter().position(|m| m.len() != width) {
            return Err(TrainError::Config(format!(
                "mask {bad} covers {} variables, expected {width}",
                masks[bad].len()
            )));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Observed variable indices, ascending.
    pub fn observed_vars(&self) -> Vec<usize> {
        self.observed.keys().copied().collect()
    }

    pub fn all(&self) -> &BTreeMap<usize, Tensor> {
        &self.observed
    }

    pub fn var(&self, v: usize) -> Option<&Tensor> {
        self.observed.get(&v)
    }

    /// Gather the given rows into a per-variable minibatch.
    pub fn batch(&self, idx: &[usize]) -> BTreeMap<usize, Tensor> {
        let mut out = BTreeMap::new();
        for (&v, t) in &self.observed {
            let d = t.last_dim();
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            out.insert(v, Tensor::new(vec![idx.len(), d], data).expect("shape/data agree"));
        }
        out
    }
}

/// Draw `k` row indices uniformly with replacement (resume-safe minibatching:
/// the only state is the RNG, which checkpoints round-trip).
pub fn draw_indices(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

/// Sample `n` joint draws from a generative model and keep the observed rows.
pub fn sample_observed(
    graph: &ModelGraph,
    gen: &GenerativeModel,
    n: usize,
    rng: &mut Rng,
) -> Result<BTreeMap<usize, Tensor>, TrainError> {
    let tape = Tape::new();
    let joint = ancestral_sample(&tape, graph, gen, n, rng)?;
    let mut out = BTreeMap::new();
    for v in graph.observed_vars() {
        out.insert(v, joint.value_of(v)?.value());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// 1-D linear-Gaussian chain
// ---------------------------------------------------------------------------

/// Prior variance of the linear-Gaussian latent.
pub const LINGAUSS_PRIOR_VAR: Real = 1.0;
/// Observation-noise variance of the linear-Gaussian likelihood.
pub const LINGAUSS_NOISE_VAR: Real = 0.25;

/// `z ~ N(0, 1); x | z ~ N(z, 0.25)`: the conjugate-oracle workhorse. The
/// generative factors are fixed (not trainable); only inference is learned.
pub fn lingauss_truth() -> (ModelGraph, GenerativeModel) {
    let graph = ModelGraph::new(
        vec![
            VariableDecl { name: "z".into(), dim: 1, role: Role::Latent, support: Support::Real },
            VariableDecl { name: "x".into(), dim: 1, role: Role::Observed, support: Support::Real },
        ],
        vec![("z".into(), vec![]), ("x".into(), vec!["z".into()])],
    )
    .expect("static graph is valid");
    let gen = GenerativeModel {
        factors: vec![
            FactorParams::Gaussian {
                dim: 1,
                mean: MeanSource::Const(Tensor::zeros(&[1])),
                log_std: StdSource::Fixed(LINGAUSS_PRIOR_VAR.sqrt()),
                trainable: false,
            },
            FactorParams::Gaussian {
                dim: 1,
                mean: MeanSource::Identity,
                log_std: StdSource::Fixed(LINGAUSS_NOISE_VAR.sqrt()),
                trainable: false,
            },
        ],
    };
    (graph, gen)
}

pub fn lingauss_dataset(n: usize, seed: u64) -> Dataset {
    let (graph, gen) = lingauss_truth();
    let mut rng = Rng::seed_from_u64(seed);
    let observed = sample_observed(&graph, &gen, n, &mut rng).expect("static model samples");
    Dataset::new(observed).expect("non-empty observation map")
}

// ---------------------------------------------------------------------------
// 2-D pinwheel
// ---------------------------------------------------------------------------

/// Five-arm pinwheel in the plane: Gaussian blobs sheared by a rotation that
/// grows with radius. Returns `[n, 2]` rows.
pub fn pinwheel_points(n: usize, seed: u64) -> Tensor {
    let arms = 5usize;
    let radial_std = 0.3;
    let tangential_std = 0.05;
    let rate = 0.25;
    let mut rng = Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 2);
    for i in 0..n {
        let arm = i % arms;
        let base = 2.0 * std::f64::consts::PI * arm as Real / arms as Real;
        let r: Real = 1.0 + radial_std * rng.sample::<Real, _>(StandardNormal);
        let t: Real = tangential_std * rng.sample::<Real, _>(StandardNormal);
        let angle = base + rate * r.exp();
        data.push(r * angle.cos() - t * angle.sin());
        data.push(r * angle.sin() + t * angle.cos());
    }
    Tensor::new(vec![n, 2], data).expect("shape/data agree")
}

/// Pinwheel dataset keyed to a graph's observed 2-D variable.
pub fn pinwheel_dataset(obs_var: usize, n: usize, seed: u64) -> Dataset {
    let observed: BTreeMap<usize, Tensor> = [(obs_var, pinwheel_points(n, seed))].into();
    Dataset::new(observed).expect("non-empty observation map")
}

// ---------------------------------------------------------------------------
// Bernoulli mini-digits
// ---------------------------------------------------------------------------

/// Fixed seed of the ground-truth mini-digits parameters; independent of any
/// dataset or training seed.
const MINI_DIGITS_PARAM_SEED: u64 = 0x6d69_6e69;

/// Ground-truth two-layer model behind the mini-digits data:
/// `z2 ~ N(0, I_2); z1 | z2 ~ N(tanh-net(z2), 0.4); x | z1 ~ Bernoulli(net(z1))`
/// with `x` a 16-dimensional binary vector (a 4x4 "digit").
pub fn mini_digits_truth() -> (ModelGraph, GenerativeModel) {
    let graph = mini_digits_graph();
    let mut rng = Rng::seed_from_u64(MINI_DIGITS_PARAM_SEED);
    let mean_net = Mlp::new(&[2, 8, 4], Activation::Tanh, Activation::Identity, &mut rng);
    let mut logit_net = Mlp::new(&[4, 16, 16], Activation::Tanh, Activation::Identity, &mut rng);
    // Spread the leaf logits so pixels are decisively on or off per latent.
    for w in &mut logit_net.weights {
        *w = w.map(|v| 3.0 * v);
    }
    let gen = GenerativeModel {
        factors: vec![
            FactorParams::Gaussian {
                dim: 2,
                mean: MeanSource::Const(Tensor::zeros(&[2])),
                log_std: StdSource::Fixed(1.0),
                trainable: false,
            },
            FactorParams::Gaussian {
                dim: 4,
                mean: MeanSource::Net(mean_net),
                log_std: StdSource::Fixed(0.4),
                trainable: true,
            },
            FactorParams::Bernoulli {
                dim: 16,
                logits: LogitSource::Net(logit_net),
                trainable: true,
            },
        ],
    };
    (graph, gen)
}

/// Graph shared by the ground-truth model and trained mini-digits models.
pub fn mini_digits_graph() -> ModelGraph {
    ModelGraph::new(
        vec![
            VariableDecl { name: "z2".into(), dim: 2, role: Role::Latent, support: Support::Real },
            VariableDecl { name: "z1".into(), dim: 4, role: Role::Latent, support: Support::Real },
            VariableDecl { name: "x".into(), dim: 16, role: Role::Observed, support: Support::Binary },
        ],
        vec![
            ("z2".into(), vec![]),
            ("z1".into(), vec!["z2".into()]),
            ("x".into(), vec!["z1".into()]),
        ],
    )
    .expect("static graph is valid")
}

pub fn mini_digits_dataset(n: usize, seed: u64) -> Dataset {
    let (graph, gen) = mini_digits_truth();
    let mut rng = Rng::seed_from_u64(seed);
    let observed = sample_observed(&graph, &gen, n, &mut rng).expect("static model samples");
    Dataset::new(observed).expect("non-empty observation map")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_rejects_ragged_rows() {
        let observed: BTreeMap<usize, Tensor> =
            [(0, Tensor::zeros(&[3, 1])), (1, Tensor::zeros(&[2, 1]))].into();
        assert!(Dataset::new(observed).is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let observed: BTreeMap<usize, Tensor> =
            [(1, Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap())].into();
        let d = Dataset::new(observed).unwrap();
        let b = d.batch(&[2, 0]);
        assert_eq!(b[&1].data(), &[5., 6., 1., 2.]);
    }

    #[test]
    fn mask_shape_validated() {
        let observed: BTreeMap<usize, Tensor> = [(0, Tensor::zeros(&[2, 1]))].into();
        let d = Dataset::new(observed).unwrap();
        assert!(d.clone().with_masks(vec![vec![true]]).is_err()); // wrong count
        assert!(d.clone().with_masks(vec![vec![true, true], vec![true, true]]).is_err());
        assert!(d.with_masks(vec![vec![true], vec![false]]).is_ok());
    }

    #[test]
    fn draw_indices_in_range_and_deterministic() {
        let run = || {
            let mut rng = Rng::seed_from_u64(3);
            draw_indices(&mut rng, 10, 100)
        };
        let a = run();
        assert!(a.iter().all(|&i| i < 10));
        assert_eq!(a, run());
    }

    #[test]
    fn lingauss_marginal_variance() {
        // Var(x) = prior var + noise var.
        let d = lingauss_dataset(100_000, 7);
        let x = d.var(1).unwrap();
        let n = x.numel() as Real;
        let mean = x.data().iter().sum::<Real>() / n;
        let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - (LINGAUSS_PRIOR_VAR + LINGAUSS_NOISE_VAR)).abs() < 0.03, "var {var}");
    }

    #[test]
    fn lingauss_dataset_is_seed_deterministic() {
        assert_eq!(lingauss_dataset(50, 11).var(1), lingauss_dataset(50, 11).var(1));
        assert_ne!(lingauss_dataset(50, 11).var(1), lingauss_dataset(50, 12).var(1));
    }

    #[test]
    fn pinwheel_radius_band() {
        let t = pinwheel_points(5000, 1);
        let mut mean_rad = 0.0;
        for r in 0..t.lead() {
            let (x, y) = (t.data()[2 * r], t.data()[2 * r + 1]);
            let rad = (x * x + y * y).sqrt();
            assert!(rad < 5.0, "radius {rad} outside the pinwheel band");
            mean_rad += rad;
        }
        mean_rad /= t.lead() as Real;
        assert!((mean_rad - 1.0).abs() < 0.2, "mean radius {mean_rad}");
    }

    #[test]
    fn pinwheel_covers_all_arms() {
        // Angular histogram: no empty octant means the arms wrap the circle.
        let t = pinwheel_points(2000, 2);
        let mut bins = [0usize; 8];
        for r in 0..t.lead() {
            let a = t.data()[2 * r + 1].atan2(t.data()[2 * r]);
            let idx = (((a + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * 8.0) as usize;
            bins[idx.min(7)] += 1;
        }
        assert!(bins.iter().all(|&c| c > 0), "bins {bins:?}");
    }

    #[test]
    fn mini_digits_rows_are_binary_and_varied() {
        let d = mini_digits_dataset(256, 5);
        let x = d.var(2).unwrap();
        assert_eq!(x.shape(), &[256, 16]);
        assert!(x.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // The latent structure must actually vary the pixels.
        let on_rate = x.data().iter().sum::<Real>() / x.numel() as Real;
        assert!(on_rate > 0.05 && on_rate < 0.95, "on-rate {on_rate}");
        let first = &x.data()[..16];
        assert!(
            (1..256).any(|r| &x.data()[16 * r..16 * (r + 1)] != first),
            "all rows identical"
        );
    }
}
