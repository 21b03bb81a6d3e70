//! Generative and inference models: factor parameters attached to a graph,
//! with top-down (ancestral) and bottom-up (inference) joint sampling.

use std::collections::BTreeMap;

use crate::densities::{BoundFactor, FactorParams};
use crate::error::{DensityError, GraphError, TrainError};
use crate::graph::{InverseFactorization, ModelGraph};
use crate::tape::Var;
use crate::{Real, Rng, Tape, Tensor};

/// Generative parameters: one factor per variable, aligned by variable index.
#[derive(Clone, Debug)]
pub struct GenerativeModel {
    pub factors: Vec<FactorParams>,
}

/// Inference parameters: one factor per latent, aligned with the inverse
/// factorization's processing order.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub inverse: InverseFactorization,
    pub factors: Vec<FactorParams>,
}

/// One factor evaluation kept around after sampling, so objectives can score
/// the drawn value and reach the factor's parameters.
pub struct DrawnFactor<'t> {
    /// Child variable index in the graph.
    pub var: usize,
    pub bound: BoundFactor<'t>,
    pub parents: Vec<Var<'t, Real>>,
    pub value: Var<'t, Real>,
}

/// A batch of joint assignments; `values[i]` is a `[n, width]` var.
pub struct SampledJoint<'t> {
    pub values: Vec<Option<Var<'t, Real>>>,
    pub draws: Vec<DrawnFactor<'t>>,
    pub n: usize,
}

impl std::fmt::Debug for SampledJoint<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SampledJoint")
            .field("n", &self.n)
            .field("vars", &self.values.iter().filter(|v| v.is_some()).count())
            .finish()
    }
}

impl<'t> SampledJoint<'t> {
    pub fn value_of(&self, var: usize) -> Result<Var<'t, Real>, GraphError> {
        self.values[var]
            .ok_or_else(|| GraphError::Invalid(format!("variable index {var} not sampled")))
    }

    pub fn draw_for(&self, var: usize) -> Option<&DrawnFactor<'t>> {
        self.draws.iter().find(|d| d.var == var)
    }
}

/// Top-down ancestral sampling: every variable drawn root-to-leaf in
/// topological order, including observation noise at the leaves.
pub fn ancestral_sample<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    model: &'t GenerativeModel,
    n: usize,
    rng: &mut Rng,
) -> Result<SampledJoint<'t>, TrainError> {
    let mut values: Vec<Option<Var<'t, Real>>> = vec![None; graph.num_vars()];
    let mut draws = Vec::new();
    for &v in graph.topo_order() {
        let bound = model.factors[v].bind(tape);
        let parents: Vec<Var<'t, Real>> = graph
            .parents(v)
            .iter()
            .map(|&p| values[p].expect("topological order"))
            .collect();
        let value = bound.sample(&parents, n, rng)?;
        values[v] = Some(value);
        draws.push(DrawnFactor {
            var: v,
            bound,
            parents,
            value,
        });
    }
    Ok(SampledJoint { values, draws, n })
}

/// Repeat each row of `t` `l` times (particle replication).
pub fn repeat_rows(t: &Tensor, l: usize) -> Tensor {
    let d = t.last_dim();
    let rows = t.lead();
    let mut data = Vec::with_capacity(rows * l * d);
    for r in 0..rows {
        for _ in 0..l {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
    }
    Tensor::new(vec![rows * l, d], data).expect("shape/data agree")
}

/// Bottom-up sampling through the inference networks: observed values are
/// passed through as constants, each latent is drawn from its q-factor in the
/// inverse processing order. `particles` replicates each datum before
/// sampling.
pub fn inference_sample<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    inference: &'t InferenceModel,
    observations: &BTreeMap<usize, Tensor>,
    particles: usize,
    rng: &mut Rng,
) -> Result<SampledJoint<'t>, TrainError> {
    let mut values: Vec<Option<Var<'t, Real>>> = vec![None; graph.num_vars()];
    let mut n = None;
    for &o in &inference.inverse.observed {
        let t = observations.get(&o).ok_or_else(|| {
            GraphError::MissingObservation(graph.var(o).name.clone())
        })?;
        let t = repeat_rows(t, particles);
        match n {
            None => n = Some(t.lead()),
            Some(m) => {
                if m != t.lead() {
                    return Err(GraphError::Invalid(format!(
                        "observation batches disagree: {} vs {} rows",
                        m,
                        t.lead()
                    ))
                    .into());
                }
            }
        }
        values[o] = Some(tape.leaf(t));
    }
    let n = n.unwrap_or(0);
    let mut draws = Vec::new();
    for (i, &latent) in inference.inverse.order.iter().enumerate() {
        let bound = inference.factors[i].bind(tape);
        let parents: Vec<Var<'t, Real>> = inference.inverse.cond_sets[i]
            .iter()
            .map(|&c| values[c].expect("inverse processing order is topological"))
            .collect();
        let value = if parents.is_empty() && n == 0 {
            return Err(GraphError::Invalid(
                "bottom-up sampling with no observations and no particle count".into(),
            )
            .into());
        } else {
            bound.sample(&parents, n, rng)?
        };
        values[latent] = Some(value);
        draws.push(DrawnFactor {
            var: latent,
            bound,
            parents,
            value,
        });
    }
    Ok(SampledJoint { values, draws, n })
}

/// Register every generative factor on the tape once, aligned by variable
/// index, so callers can both evaluate densities and reach the parameter vars.
pub fn bind_generative<'t>(tape: &'t Tape, model: &'t GenerativeModel) -> Vec<BoundFactor<'t>> {
    model.factors.iter().map(|f| f.bind(tape)).collect()
}

/// Sum of generative log-densities `log p(X)` over pre-bound factors for a
/// sampled joint whose values were drawn elsewhere (e.g. bottom-up). Returns a
/// `[n,1]` per-sample var. Fails for implicit factors.
pub fn joint_log_prob_bound<'t>(
    graph: &ModelGraph,
    bound: &[BoundFactor<'t>],
    joint: &SampledJoint<'t>,
) -> Result<Var<'t, Real>, TrainError> {
    let mut total: Option<Var<'t, Real>> = None;
    for &v in graph.topo_order() {
        let parents: Vec<Var<'t, Real>> = graph
            .parents(v)
            .iter()
            .map(|&p| joint.value_of(p))
            .collect::<Result<_, _>>()?;
        let lp = bound[v].log_prob(joint.value_of(v)?, &parents)?;
        total = Some(match total {
            None => lp,
            Some(t) => t.add(lp).map_err(DensityError::from)?,
        });
    }
    total.ok_or_else(|| GraphError::Invalid("empty graph".into()).into())
}

/// Convenience wrapper over [`joint_log_prob_bound`] that binds internally
/// (value-only use; the bindings are dropped).
pub fn joint_log_prob<'t>(
    graph: &ModelGraph,
    model: &'t GenerativeModel,
    joint: &SampledJoint<'t>,
) -> Result<Var<'t, Real>, TrainError> {
    let tape = joint
        .values
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| GraphError::Invalid("empty joint".into()))?
        .tape();
    let bound = bind_generative(tape, model);
    joint_log_prob_bound(graph, &bound, joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{LogitSource, MeanSource, StdSource};
    use crate::graph::{Role, Support, VariableDecl};
    use crate::nn::{Activation, Mlp};
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn chain_graph() -> ModelGraph {
        ModelGraph::new(
            vec![
                VariableDecl { name: "z2".into(), dim: 1, role: Role::Latent, support: Support::Real },
                VariableDecl { name: "z1".into(), dim: 1, role: Role::Latent, support: Support::Real },
                VariableDecl { name: "x".into(), dim: 1, role: Role::Observed, support: Support::Real },
            ],
            vec![
                ("z2".into(), vec![]),
                ("z1".into(), vec!["z2".into()]),
                ("x".into(), vec!["z1".into()]),
            ],
        )
        .unwrap()
    }

    fn gauss_const(mean: Real, std: Real) -> FactorParams {
        FactorParams::Gaussian {
            dim: 1,
            mean: MeanSource::Const(Tensor::new(vec![1], vec![mean]).unwrap()),
            log_std: StdSource::Fixed(std),
            trainable: false,
        }
    }

    fn gauss_identity(std: Real) -> FactorParams {
        FactorParams::Gaussian {
            dim: 1,
            mean: MeanSource::Identity,
            log_std: StdSource::Fixed(std),
            trainable: false,
        }
    }

    #[test]
    fn deterministic_factors_compose_means() {
        let g = chain_graph();
        let model = GenerativeModel {
            factors: vec![gauss_const(3.0, 0.0), gauss_identity(0.0), gauss_identity(0.0)],
        };
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(0);
        let s = ancestral_sample(&tape, &g, &model, 4, &mut rng).unwrap();
        let x = s.value_of(g.lookup("x").unwrap()).unwrap().value();
        assert!(x.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn root_normal_moments() {
        let g = ModelGraph::new(
            vec![VariableDecl { name: "z".into(), dim: 1, role: Role::Latent, support: Support::Real }],
            vec![("z".into(), vec![])],
        )
        .unwrap();
        let model = GenerativeModel { factors: vec![gauss_const(0.0, 1.0)] };
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(123);
        let s = ancestral_sample(&tape, &g, &model, 100_000, &mut rng).unwrap();
        let z = s.value_of(0).unwrap().value();
        let n = z.numel() as Real;
        let mean = z.data().iter().sum::<Real>() / n;
        let var = z.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn discrete_two_variable_total_variation() {
        // a ~ Ber(0.3); b | a ~ Ber(0.8 if a else 0.2): compare empirical joint
        // with the enumerated one.
        let g = ModelGraph::new(
            vec![
                VariableDecl { name: "a".into(), dim: 1, role: Role::Latent, support: Support::Binary },
                VariableDecl { name: "b".into(), dim: 1, role: Role::Observed, support: Support::Binary },
            ],
            vec![("a".into(), vec![]), ("b".into(), vec!["a".into()])],
        )
        .unwrap();
        let p_a = 0.3f64;
        let logit = |p: Real| (p / (1.0 - p)).ln();
        let mut net = Mlp::zeroed(&[1, 1], Activation::Identity, Activation::Identity);
        // logits(b|a) = w*a + c with w = logit(0.8)-logit(0.2), c = logit(0.2)
        net.weights[0] = Tensor::new(vec![1, 1], vec![logit(0.8) - logit(0.2)]).unwrap();
        net.biases[0] = Tensor::new(vec![1], vec![logit(0.2)]).unwrap();
        let model = GenerativeModel {
            factors: vec![
                FactorParams::Bernoulli {
                    dim: 1,
                    logits: LogitSource::Const(Tensor::new(vec![1], vec![logit(p_a)]).unwrap()),
                    trainable: false,
                },
                FactorParams::Bernoulli { dim: 1, logits: LogitSource::Net(net), trainable: false },
            ],
        };
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(77);
        let n = 100_000;
        let s = ancestral_sample(&tape, &g, &model, n, &mut rng).unwrap();
        let a = s.value_of(0).unwrap().value();
        let b = s.value_of(1).unwrap().value();
        let mut counts = [0.0f64; 4];
        for i in 0..n {
            let idx = (a.data()[i] as usize) * 2 + (b.data()[i] as usize);
            counts[idx] += 1.0;
        }
        let exact = [0.7 * 0.8, 0.7 * 0.2, 0.3 * 0.2, 0.3 * 0.8];
        let tv: f64 = counts
            .iter()
            .zip(&exact)
            .map(|(c, e)| (c / n as f64 - e).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn inference_passthrough_copies_parent() {
        let g = chain_graph();
        let obs: BTreeSet<usize> = [g.lookup("x").unwrap()].into();
        let inverse = crate::graph::derive_inverse_factorization(&g, &obs).unwrap();
        // q-factors that copy their single conditioning value exactly.
        let inference = InferenceModel {
            inverse,
            factors: vec![gauss_identity(0.0), gauss_identity(0.0)],
        };
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(0);
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let obs_map: BTreeMap<usize, Tensor> = [(g.lookup("x").unwrap(), x.clone())].into();
        let s = inference_sample(&tape, &g, &inference, &obs_map, 1, &mut rng).unwrap();
        assert_eq!(s.value_of(g.lookup("z1").unwrap()).unwrap().value(), x);
        assert_eq!(s.value_of(g.lookup("z2").unwrap()).unwrap().value(), x);
    }

    #[test]
    fn zero_particles_gives_empty_batch() {
        let g = chain_graph();
        let obs: BTreeSet<usize> = [g.lookup("x").unwrap()].into();
        let inverse = crate::graph::derive_inverse_factorization(&g, &obs).unwrap();
        let inference = InferenceModel {
            inverse,
            factors: vec![gauss_identity(1.0), gauss_identity(1.0)],
        };
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(0);
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let obs_map: BTreeMap<usize, Tensor> = [(g.lookup("x").unwrap(), x)].into();
        let s = inference_sample(&tape, &g, &inference, &obs_map, 0, &mut rng).unwrap();
        assert_eq!(s.n, 0);
    }

    #[test]
    fn missing_observation_is_named() {
        let g = chain_graph();
        let obs: BTreeSet<usize> = [g.lookup("x").unwrap()].into();
        let inverse = crate::graph::derive_inverse_factorization(&g, &obs).unwrap();
        let inference = InferenceModel {
            inverse,
            factors: vec![gauss_identity(1.0), gauss_identity(1.0)],
        };
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(0);
        let err = inference_sample(&tape, &g, &inference, &BTreeMap::new(), 1, &mut rng).unwrap_err();
        assert!(err.to_string().contains('x'), "{err}");
    }
}
