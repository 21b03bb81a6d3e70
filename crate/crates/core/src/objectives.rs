//! Training objectives: the GAN value, the per-factor local-JSD model loss,
//! the explicit ELBO, the two KL-adversarial objectives, the mixed-objective
//! equivalence check and the RBF-MMD evaluation metric.
//!
//! Conventions used throughout: discriminators output `D = p/(p+q)` where the
//! `p` side is the class labelled 1 during training; model losses treat the
//! discriminators as constants (their parameters receive no gradient from
//! these losses); Monte-Carlo means weight both chains equally with the 1/2
//! mixture factors written out.

use std::collections::BTreeMap;

use crate::adversary::{ratio_log_from_logit, BoundAdversary, RatioDirection};
use crate::error::{DensityError, TrainError};
use crate::graph::{InverseFactorization, ModelGraph};
use crate::densities::{BoundFactor, FactorParams};
use crate::model::{
    ancestral_sample, bind_generative, inference_sample, joint_log_prob_bound, repeat_rows,
    GenerativeModel, InferenceModel, SampledJoint,
};
use crate::oracle::JointTable;
use crate::tape::{concat, finite_diff_grad, Var};
use crate::{Real, Rng, Tape, Tensor};

/// Which objective drives a training run, and therefore which adversaries
/// exist and which parameter groups are updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveVariant {
    /// Plain adversarial game on the observed leaf; no inference networks.
    Gan,
    /// One discriminator over the full joint tuple.
    GlobalBiadv,
    /// Per-factor discriminators on `(x_i, pa(x_i))` tuples.
    AdmpJsdLoc,
    /// Reconstruction term plus an adversarial prior-matching term.
    AdmpKlTractable,
    /// Two discriminators, no density evaluations of the likelihood.
    AdmpKlIntractable,
    /// Explicit evidence lower bound; no adversaries.
    Elbo,
}

impl ObjectiveVariant {
    pub const ALL: [ObjectiveVariant; 6] = [
        ObjectiveVariant::Gan,
        ObjectiveVariant::GlobalBiadv,
        ObjectiveVariant::AdmpJsdLoc,
        ObjectiveVariant::AdmpKlTractable,
        ObjectiveVariant::AdmpKlIntractable,
        ObjectiveVariant::Elbo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveVariant::Gan => "gan",
            ObjectiveVariant::GlobalBiadv => "global-biadv",
            ObjectiveVariant::AdmpJsdLoc => "admp-jsd-loc",
            ObjectiveVariant::AdmpKlTractable => "admp-kl-tractable",
            ObjectiveVariant::AdmpKlIntractable => "admp-kl-intractable",
            ObjectiveVariant::Elbo => "elbo",
        }
    }

    /// Number of discriminators the variant's wiring requires.
    pub fn adversary_count(&self, graph: &ModelGraph) -> usize {
        match self {
            ObjectiveVariant::Gan | ObjectiveVariant::GlobalBiadv | ObjectiveVariant::AdmpKlTractable => 1,
            ObjectiveVariant::AdmpKlIntractable => 2,
            ObjectiveVariant::AdmpJsdLoc => graph.num_vars(),
            ObjectiveVariant::Elbo => 0,
        }
    }

    /// Whether inference (phi) parameters exist and are updated.
    pub fn updates_inference(&self) -> bool {
        !matches!(self, ObjectiveVariant::Gan)
    }

    pub fn uses_adversaries(&self) -> bool {
        !matches!(self, ObjectiveVariant::Elbo)
    }
}

impl std::fmt::Display for ObjectiveVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveVariant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        ObjectiveVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = ObjectiveVariant::ALL.iter().map(|v| v.name()).collect();
                TrainError::Config(format!("unknown variant '{s}'; one of: {}", names.join(", ")))
            })
    }
}

// ---------------------------------------------------------------------------
// Tuple layouts
// ---------------------------------------------------------------------------

/// `(x_i, pa(x_i))` tuple for one factor: child value first, then parents in
/// factor order, concatenated along the last axis.
pub fn factor_tuple<'t>(
    joint: &SampledJoint<'t>,
    graph: &ModelGraph,
    factor: usize,
) -> Result<Var<'t, Real>, TrainError> {
    let mut parts = vec![joint.value_of(factor)?];
    for &p in graph.parents(factor) {
        parts.push(joint.value_of(p)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(concat(&parts)?)
    }
}

/// All variables concatenated in ascending index order (global adversary).
pub fn joint_tuple<'t>(
    joint: &SampledJoint<'t>,
    graph: &ModelGraph,
) -> Result<Var<'t, Real>, TrainError> {
    let parts: Vec<Var<'t, Real>> = (0..graph.num_vars())
        .map(|v| joint.value_of(v))
        .collect::<Result<_, _>>()?;
    Ok(concat(&parts)?)
}

/// `(z, x)` tuple for prior-matching adversaries: latents in ascending index
/// order, then the treated-as-observed variables in ascending index order.
pub fn latent_obs_tuple<'t>(
    joint: &SampledJoint<'t>,
    inv: &InverseFactorization,
) -> Result<Var<'t, Real>, TrainError> {
    let mut latents: Vec<usize> = inv.order.clone();
    latents.sort_unstable();
    let mut parts = Vec::new();
    for &l in &latents {
        parts.push(joint.value_of(l)?);
    }
    for &o in &inv.observed {
        parts.push(joint.value_of(o)?);
    }
    Ok(concat(&parts)?)
}

/// Input width of the [`latent_obs_tuple`] layout.
pub fn latent_obs_width(graph: &ModelGraph, inv: &InverseFactorization) -> usize {
    inv.order
        .iter()
        .chain(inv.observed.iter())
        .map(|&v| graph.var(v).width())
        .sum()
}

// ---------------------------------------------------------------------------
// GAN value
// ---------------------------------------------------------------------------

/// Monte-Carlo GAN value `V = E_data[log D] + E_gen[log(1 - D)]` from
/// discriminator probabilities (test/oracle form; no gradients).
pub fn gan_value(d_on_data: &[Real], d_on_generated: &[Real]) -> Result<Real, TrainError> {
    if d_on_data.is_empty() || d_on_generated.is_empty() {
        return Err(TrainError::EmptyBatch("gan_value"));
    }
    let a: Real = d_on_data.iter().map(|&d| d.ln()).sum::<Real>() / d_on_data.len() as Real;
    let b: Real =
        d_on_generated.iter().map(|&d| (1.0 - d).ln()).sum::<Real>() / d_on_generated.len() as Real;
    Ok(a + b)
}

/// Differentiable GAN value from an adversary whose class-1 side is the data.
pub fn gan_value_var<'t>(
    adv: &BoundAdversary<'t>,
    data_tuple: Var<'t, Real>,
    gen_tuple: Var<'t, Real>,
) -> Result<Var<'t, Real>, TrainError> {
    if data_tuple.value().lead() == 0 || gen_tuple.value().lead() == 0 {
        return Err(TrainError::EmptyBatch("gan_value"));
    }
    let a = adv.ratio_log(data_tuple, RatioDirection::POverM)?.mean()?;
    let b = adv.ratio_log(gen_tuple, RatioDirection::QOverM)?.mean()?;
    Ok(a.add(b)?)
}

// ---------------------------------------------------------------------------
// Local-JSD model loss
// ---------------------------------------------------------------------------

/// Per-factor adversarial model loss over both chains:
/// `1/2 E_top-down[sum_i log D_i] + 1/2 E_bottom-up[sum_i log(1 - D_i)]`.
///
/// Gradients flow into generative parameters through reparametrized top-down
/// samples and into inference parameters through bottom-up samples; the
/// adversaries are treated as constants. Discrete top-down draws contribute a
/// score-function surrogate (their per-sample adversary total, batch-mean
/// baselined, times their log-mass); discrete bottom-up draws are rejected
/// because nothing recovers their gradient.
pub fn admp_jsd_model_loss<'t>(
    graph: &ModelGraph,
    top_down: &SampledJoint<'t>,
    bottom_up: &SampledJoint<'t>,
    adversaries: &[BoundAdversary<'t>],
) -> Result<Var<'t, Real>, TrainError> {
    if top_down.n == 0 || bottom_up.n == 0 {
        return Err(TrainError::EmptyBatch("admp_jsd_model_loss"));
    }
    for d in &bottom_up.draws {
        if d.bound.spec().is_discrete() {
            return Err(DensityError::DiscreteSampleGradient(graph.var(d.var).name.clone()).into());
        }
    }
    let mut td_sum: Option<Var<'t, Real>> = None;
    let mut bu_sum: Option<Var<'t, Real>> = None;
    for v in 0..graph.num_vars() {
        let adv = adversaries
            .iter()
            .find(|a| a.factor() == v)
            .ok_or_else(|| TrainError::MissingAdversary(graph.var(v).name.clone()))?;
        let s_td = adv.ratio_log(factor_tuple(top_down, graph, v)?, RatioDirection::POverM)?;
        let s_bu = adv.ratio_log(factor_tuple(bottom_up, graph, v)?, RatioDirection::QOverM)?;
        td_sum = Some(match td_sum {
            None => s_td,
            Some(t) => t.add(s_td)?,
        });
        bu_sum = Some(match bu_sum {
            None => s_bu,
            Some(t) => t.add(s_bu)?,
        });
    }
    let td_sum = td_sum.expect("non-empty graph");
    let bu_sum = bu_sum.expect("non-empty graph");
    let mut loss = td_sum.mean()?.scale(0.5)?.add(bu_sum.mean()?.scale(0.5)?)?;
    // Score-function surrogate for samples with no pathwise gradient.
    for draw in &top_down.draws {
        if draw.bound.spec().is_discrete() {
            let reward = td_sum.detach();
            let advantage = reward.sub(reward.mean()?)?;
            let lp = draw.bound.log_prob(draw.value, &draw.parents)?;
            loss = loss.add(advantage.mul(lp)?.mean()?.scale(0.5)?)?;
        }
    }
    Ok(loss)
}

/// Global-adversary variant of the model loss: one discriminator over the
/// full joint tuple, same 1/2-weighted two-chain structure.
pub fn global_model_loss<'t>(
    graph: &ModelGraph,
    top_down: &SampledJoint<'t>,
    bottom_up: &SampledJoint<'t>,
    adversary: &BoundAdversary<'t>,
) -> Result<Var<'t, Real>, TrainError> {
    if top_down.n == 0 || bottom_up.n == 0 {
        return Err(TrainError::EmptyBatch("global_model_loss"));
    }
    for d in &bottom_up.draws {
        if d.bound.spec().is_discrete() {
            return Err(DensityError::DiscreteSampleGradient(graph.var(d.var).name.clone()).into());
        }
    }
    let s_td = adversary.ratio_log(joint_tuple(top_down, graph)?, RatioDirection::POverM)?;
    let s_bu = adversary.ratio_log(joint_tuple(bottom_up, graph)?, RatioDirection::QOverM)?;
    let mut loss = s_td.mean()?.scale(0.5)?.add(s_bu.mean()?.scale(0.5)?)?;
    for draw in &top_down.draws {
        if draw.bound.spec().is_discrete() {
            let reward = s_td.detach();
            let advantage = reward.sub(reward.mean()?)?;
            let lp = draw.bound.log_prob(draw.value, &draw.parents)?;
            loss = loss.add(advantage.mul(lp)?.mean()?.scale(0.5)?)?;
        }
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Explicit ELBO
// ---------------------------------------------------------------------------

/// Evaluated ELBO with the tape bindings needed for parameter updates.
pub struct ElboEval<'t> {
    /// Monte-Carlo bound `E_q[log p(X) - log q(z|x)]`; higher is better.
    pub elbo: Var<'t, Real>,
    /// Generative factors bound on the tape, aligned by variable index.
    pub gen_bound: Vec<BoundFactor<'t>>,
    /// Inference chain; q-factor bindings live in its draws.
    pub bu: SampledJoint<'t>,
}

/// Monte-Carlo evidence lower bound with reparametrized gradients to both
/// parameter groups.
pub fn elbo_eval<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    gen: &'t GenerativeModel,
    inf: &'t InferenceModel,
    observations: &BTreeMap<usize, Tensor>,
    particles: usize,
    rng: &mut Rng,
) -> Result<ElboEval<'t>, TrainError> {
    for (v, f) in gen.factors.iter().enumerate() {
        if !f.is_explicit() {
            return Err(TrainError::VariantMismatch {
                variant: "elbo".into(),
                detail: format!(
                    "factor '{}' is an implicit sampler with no evaluable density; use a kl-adversarial variant",
                    graph.var(v).name
                ),
            });
        }
    }
    let bu = inference_sample(tape, graph, inf, observations, particles, rng)?;
    if bu.n == 0 {
        return Err(TrainError::EmptyBatch("elbo"));
    }
    let log_q = sampled_log_q(graph, &bu)?;
    let gen_bound = bind_generative(tape, gen);
    let log_p = joint_log_prob_bound(graph, &gen_bound, &bu)?;
    let per_sample = match log_q {
        Some(q) => log_p.sub(q)?,
        None => log_p,
    };
    Ok(ElboEval {
        elbo: per_sample.mean()?,
        gen_bound,
        bu,
    })
}

/// Value-only front-end for [`elbo_eval`].
pub fn elbo<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    gen: &'t GenerativeModel,
    inf: &'t InferenceModel,
    observations: &BTreeMap<usize, Tensor>,
    particles: usize,
    rng: &mut Rng,
) -> Result<Var<'t, Real>, TrainError> {
    Ok(elbo_eval(tape, graph, gen, inf, observations, particles, rng)?.elbo)
}

/// Sum of q-factor log-densities for the drawn latents, `[n,1]`; `None` when
/// there are no latents. Rejects discrete draws (no pathwise gradient).
fn sampled_log_q<'t>(
    graph: &ModelGraph,
    bu: &SampledJoint<'t>,
) -> Result<Option<Var<'t, Real>>, TrainError> {
    let mut total: Option<Var<'t, Real>> = None;
    for d in &bu.draws {
        if d.bound.spec().is_discrete() {
            return Err(DensityError::DiscreteSampleGradient(graph.var(d.var).name.clone()).into());
        }
        let lp = d.bound.log_prob(d.value, &d.parents)?;
        total = Some(match total {
            None => lp,
            Some(t) => t.add(lp)?,
        });
    }
    Ok(total)
}

/// Exact ELBO on an enumerated discrete model: `q` is a distribution over the
/// latent configurations (row-major over `latents` in the given order) for the
/// fixed observed assignment. Uses natural log.
pub fn elbo_enumerated(
    joint: &JointTable,
    latents: &[usize],
    observed: &[(usize, usize)],
    q: &[Real],
) -> Real {
    let cards: Vec<usize> = latents.iter().map(|&v| joint.cards[v]).collect();
    let configs: usize = cards.iter().product::<usize>().max(1);
    assert_eq!(q.len(), configs, "q table size must match latent configurations");
    let mut acc = 0.0;
    for cfg in 0..configs {
        if q[cfg] == 0.0 {
            continue;
        }
        let mut rem = cfg;
        let mut assignment: Vec<(usize, usize)> = observed.to_vec();
        for i in (0..latents.len()).rev() {
            assignment.push((latents[i], rem % cards[i]));
            rem /= cards[i];
        }
        let mut states = vec![0usize; joint.cards.len()];
        for &(v, s) in &assignment {
            states[v] = s;
        }
        let p = joint.probs[joint.encode(&states)];
        acc += q[cfg] * (p.ln() - q[cfg].ln());
    }
    acc
}

// ---------------------------------------------------------------------------
// KL-adversarial objectives
// ---------------------------------------------------------------------------

/// Evaluated pieces of the tractable-likelihood adversarial objective.
pub struct KlTractableEval<'t> {
    /// Loss to minimize: `-E_q[log p(x|z)] + E_q[log((1-D_z)/D_z)]`.
    pub loss: Var<'t, Real>,
    /// Mean reconstruction term `E_q[log p(x|z)]`.
    pub reconstruction: Var<'t, Real>,
    /// `(z, x)` tuple from the inference chain (class-0 side of D_z).
    pub q_tuple: Var<'t, Real>,
    /// Generative factors bound on the tape, aligned by variable index.
    pub gen_bound: Vec<BoundFactor<'t>>,
    /// Inference chain; q-factor bindings live in its draws.
    pub bu: SampledJoint<'t>,
}

/// Tractable-likelihood objective: explicit reconstruction plus an adversarial
/// prior-matching term. `D_z` discriminates prior draws paired with data
/// (class 1) from inference draws paired with the same data (class 0), so
/// `log((1-D_z)/D_z)` estimates `log(q(z|x)/p(z))`.
pub fn kl_tractable_eval<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    gen: &'t GenerativeModel,
    inf: &'t InferenceModel,
    adversary: &BoundAdversary<'t>,
    observations: &BTreeMap<usize, Tensor>,
    particles: usize,
    rng: &mut Rng,
) -> Result<KlTractableEval<'t>, TrainError> {
    for &o in &inf.inverse.observed {
        if !gen.factors[o].is_explicit() {
            return Err(TrainError::VariantMismatch {
                variant: "admp-kl-tractable".into(),
                detail: format!(
                    "likelihood factor '{}' is implicit; use admp-kl-intractable",
                    graph.var(o).name
                ),
            });
        }
    }
    let bu = inference_sample(tape, graph, inf, observations, particles, rng)?;
    if bu.n == 0 {
        return Err(TrainError::EmptyBatch("kl_tractable"));
    }
    sampled_log_q(graph, &bu)?; // reject discrete latent draws
    let gen_bound = bind_generative(tape, gen);
    let reconstruction = observed_log_lik(graph, &gen_bound, &bu)?.mean()?;
    let q_tuple = latent_obs_tuple(&bu, &inf.inverse)?;
    let ratio = adversary.ratio_log(q_tuple, RatioDirection::QOverP)?.mean()?;
    let loss = reconstruction.neg()?.add(ratio)?;
    Ok(KlTractableEval {
        loss,
        reconstruction,
        q_tuple,
        gen_bound,
        bu,
    })
}

/// Sum of observed-leaf log-likelihoods `log p(x_o | pa)` under the sampled
/// joint, `[n,1]`, over pre-bound generative factors.
fn observed_log_lik<'t>(
    graph: &ModelGraph,
    gen_bound: &[BoundFactor<'t>],
    joint: &SampledJoint<'t>,
) -> Result<Var<'t, Real>, TrainError> {
    let mut total: Option<Var<'t, Real>> = None;
    for v in graph.observed_vars() {
        let parents: Vec<Var<'t, Real>> = graph
            .parents(v)
            .iter()
            .map(|&p| joint.value_of(p))
            .collect::<Result<_, _>>()?;
        let lp = gen_bound[v].log_prob(joint.value_of(v)?, &parents)?;
        total = Some(match total {
            None => lp,
            Some(t) => t.add(lp)?,
        });
    }
    total.ok_or_else(|| TrainError::Config("model has no observed variables".into()))
}

/// Prior-side `(z, x)` tuple for training prior-matching adversaries: latents
/// drawn top-down from the generative prior, paired with the (replicated)
/// observed data.
pub fn prior_obs_tuple<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    gen: &'t GenerativeModel,
    inv: &InverseFactorization,
    observations: &BTreeMap<usize, Tensor>,
    particles: usize,
    rng: &mut Rng,
) -> Result<Var<'t, Real>, TrainError> {
    let mut obs_parts: Vec<Var<'t, Real>> = Vec::new();
    let mut n = None;
    for &o in &inv.observed {
        let t = observations
            .get(&o)
            .ok_or_else(|| crate::GraphError::MissingObservation(graph.var(o).name.clone()))?;
        let t = repeat_rows(t, particles);
        match n {
            None => n = Some(t.lead()),
            Some(m) if m != t.lead() => {
                return Err(crate::GraphError::Invalid(format!(
                    "observation batches disagree: {} vs {} rows",
                    m,
                    t.lead()
                ))
                .into())
            }
            _ => {}
        }
        obs_parts.push(tape.leaf(t));
    }
    let n = n.ok_or(TrainError::EmptyBatch("prior_obs_tuple"))?;
    let td = ancestral_sample(tape, graph, gen, n, rng)?;
    let mut latents: Vec<usize> = inv.order.clone();
    latents.sort_unstable();
    let mut parts: Vec<Var<'t, Real>> = Vec::new();
    for &l in &latents {
        parts.push(td.value_of(l)?);
    }
    parts.extend(obs_parts);
    Ok(concat(&parts)?)
}

/// Evaluated pieces of the intractable-likelihood two-adversary objective.
pub struct KlIntractableEval<'t> {
    /// The joint-KL estimate `E_q[log(D_z/(1-D_z)) + log(D_x/(1-D_x))]`; to be
    /// minimized. Both adversaries use class 1 = inference/data side here.
    pub kl_estimate: Var<'t, Real>,
    /// Generator guidance `E_recon[log((1-D_x)/D_x)]`: pathwise gradients into
    /// the likelihood parameters via reparametrized reconstructions.
    pub recon_guidance: Var<'t, Real>,
    /// `(z, x)` inference-side tuple (class 1 of D_z).
    pub z_tuple_q: Var<'t, Real>,
    /// `(x, z)` data-side tuple (class 1 of D_x).
    pub x_tuple_data: Var<'t, Real>,
    /// `(x, z)` reconstruction-side tuple (class 0 of D_x).
    pub x_tuple_recon: Var<'t, Real>,
    /// Generative factors bound on the tape, aligned by variable index.
    pub gen_bound: Vec<BoundFactor<'t>>,
    /// Inference chain; q-factor bindings live in its draws.
    pub bu: SampledJoint<'t>,
}

/// Intractable-likelihood objective. `D_z` carries flipped labels relative to
/// the tractable case (class 1 = inference draws), so its logit reads
/// `log(q/p)` directly; `D_x` discriminates `(x_data, z~q)` from
/// `(x~p(x|z), z~q)` tuples.
/// Largest discrete outcome space the reconstruction-guidance term sums
/// exactly; anything bigger uses the sampled score surrogate instead.
const RECON_ENUM_LIMIT: usize = 256;

/// Every value row a small discrete factor can take, or `None` when the
/// outcome space exceeds `limit` (or the factor is not discrete).
fn discrete_outcome_rows(factor: &FactorParams, limit: usize) -> Option<Vec<Vec<Real>>> {
    match factor {
        FactorParams::Bernoulli { dim, .. } => {
            let count = 1usize.checked_shl(*dim as u32)?;
            if count > limit {
                return None;
            }
            Some(
                (0..count)
                    .map(|c| (0..*dim).map(|b| ((c >> b) & 1) as Real).collect())
                    .collect(),
            )
        }
        FactorParams::Categorical { k, .. } => {
            if *k > limit {
                return None;
            }
            Some(
                (0..*k)
                    .map(|j| {
                        let mut row = vec![0.0; *k];
                        row[j] = 1.0;
                        row
                    })
                    .collect(),
            )
        }
        _ => None,
    }
}

pub fn kl_intractable_eval<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    gen: &'t GenerativeModel,
    inf: &'t InferenceModel,
    adv_z: &BoundAdversary<'t>,
    adv_x: &BoundAdversary<'t>,
    observations: &BTreeMap<usize, Tensor>,
    particles: usize,
    rng: &mut Rng,
) -> Result<KlIntractableEval<'t>, TrainError> {
    let bu = inference_sample(tape, graph, inf, observations, particles, rng)?;
    if bu.n == 0 {
        return Err(TrainError::EmptyBatch("kl_intractable"));
    }
    sampled_log_q(graph, &bu)?; // reject discrete latent draws
    let z_tuple_q = latent_obs_tuple(&bu, &inf.inverse)?;
    let gen_bound = bind_generative(tape, gen);

    // Reconstructions: redraw each observed leaf from the likelihood given the
    // inferred parents (reparametrized, so likelihood parameters get pathwise
    // gradients through recon_guidance).
    let mut latents: Vec<usize> = inf.inverse.order.clone();
    latents.sort_unstable();
    let mut data_parts = Vec::new();
    let mut recon_parts = Vec::new();
    let mut discrete_recons: Vec<(usize, usize, Var<'t, Real>, Vec<Var<'t, Real>>)> = Vec::new();
    for (slot, &o) in inf.inverse.observed.iter().enumerate() {
        let parents: Vec<Var<'t, Real>> = graph
            .parents(o)
            .iter()
            .map(|&p| bu.value_of(p))
            .collect::<Result<_, _>>()?;
        let recon = gen_bound[o].sample(&parents, bu.n, rng)?;
        if gen.factors[o].is_discrete() {
            discrete_recons.push((slot, o, recon, parents.clone()));
        }
        data_parts.push(bu.value_of(o)?);
        recon_parts.push(recon);
    }
    let latent_parts: Vec<Var<'t, Real>> = latents
        .iter()
        .map(|&l| bu.value_of(l))
        .collect::<Result<_, _>>()?;
    let mut x_data = data_parts;
    x_data.extend(latent_parts.iter().copied());
    let mut x_recon = recon_parts;
    x_recon.extend(latent_parts.iter().copied());
    let x_tuple_data = concat(&x_data)?;
    let x_tuple_recon = concat(&x_recon)?;

    let term_z = adv_z.ratio_log(z_tuple_q, RatioDirection::POverQ)?.mean()?;
    let term_x = adv_x.ratio_log(x_tuple_data, RatioDirection::POverQ)?.mean()?;
    let kl_estimate = term_z.add(term_x)?;
    let s_recon = adv_x.ratio_log(x_tuple_recon, RatioDirection::QOverP)?;
    // Discrete reconstructions carry no pathwise gradient. Small outcome
    // spaces are handled by exact expectation over the discrete leaves (smooth
    // in every parameter group); large ones fall back to the score-function
    // surrogate the sampled-chain losses use.
    let outcome_sets: Option<Vec<Vec<Vec<Real>>>> = discrete_recons
        .iter()
        .map(|(_, o, _, _)| discrete_outcome_rows(&gen.factors[*o], RECON_ENUM_LIMIT))
        .collect();
    let joint_size = outcome_sets.as_ref().and_then(|sets| {
        sets.iter().try_fold(1usize, |acc, s| {
            let t = acc.checked_mul(s.len())?;
            (t <= RECON_ENUM_LIMIT).then_some(t)
        })
    });
    let recon_guidance = if discrete_recons.is_empty() {
        s_recon.mean()?
    } else if let (Some(sets), Some(_)) = (&outcome_sets, joint_size) {
        let n = bu.n;
        let mut combo = vec![0usize; sets.len()];
        let mut acc: Option<Var<'t, Real>> = None;
        let mut done = false;
        while !done {
            let mut parts = x_recon.clone();
            let mut lp_total: Option<Var<'t, Real>> = None;
            for (d, (slot, o, _, parents)) in discrete_recons.iter().enumerate() {
                let row = &sets[d][combo[d]];
                let mut data = Vec::with_capacity(n * row.len());
                for _ in 0..n {
                    data.extend_from_slice(row);
                }
                let cand = tape.leaf(Tensor::new(vec![n, row.len()], data)?);
                parts[*slot] = cand;
                let lp = gen_bound[*o].log_prob(cand, parents)?;
                lp_total = Some(match lp_total {
                    Some(t) => t.add(lp)?,
                    None => lp,
                });
            }
            let weight = lp_total.expect("at least one discrete leaf").exp()?;
            let s = adv_x.ratio_log(concat(&parts)?, RatioDirection::QOverP)?;
            let term = weight.mul(s)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
            done = true;
            for d in 0..combo.len() {
                combo[d] += 1;
                if combo[d] < sets[d].len() {
                    done = false;
                    break;
                }
                combo[d] = 0;
            }
        }
        acc.expect("at least one outcome").mean()?
    } else {
        let mut guidance = s_recon.mean()?;
        for (_, o, recon, parents) in &discrete_recons {
            let reward = s_recon.detach();
            let advantage = reward.sub(reward.mean()?)?;
            let lp = gen_bound[*o].log_prob(*recon, parents)?;
            guidance = guidance.add(advantage.mul(lp)?.mean()?)?;
        }
        guidance
    };
    Ok(KlIntractableEval {
        kl_estimate,
        recon_guidance,
        z_tuple_q,
        x_tuple_data,
        x_tuple_recon,
        gen_bound,
        bu,
    })
}

// ---------------------------------------------------------------------------
// Mixed-objective equivalence
// ---------------------------------------------------------------------------

/// Result of comparing the explicit ELBO against the KL objective that swaps
/// the reconstruction term for a density-ratio term through the analytic
/// observation discriminator.
#[derive(Clone, Debug)]
pub struct MixedEquivalenceReport {
    pub l_elbo: Real,
    pub l_kl: Real,
    /// `l_elbo - l_kl`; equals the Monte-Carlo mean of `log q_data(x)`.
    pub difference: Real,
    /// Cosine similarity between finite-difference gradients of both losses
    /// with respect to the generative parameters, common random numbers.
    pub theta_grad_cosine: Real,
}

/// Evaluate both objectives on common random numbers and compare their
/// generative-parameter gradients by finite differences.
///
/// `log_data_marginal` is the log-density of the data distribution evaluated
/// on one concatenated observed row; it enters only through the analytic
/// discriminator `D_x = q(x)/(q(x) + p(x|z))` and carries no generative
/// parameters, so both gradients should align.
pub fn mixed_equivalence_check(
    graph: &ModelGraph,
    gen: &GenerativeModel,
    inf: &InferenceModel,
    observations: &BTreeMap<usize, Tensor>,
    particles: usize,
    log_data_marginal: &dyn Fn(&[Real]) -> Real,
    seed: u64,
) -> Result<MixedEquivalenceReport, TrainError> {
    use rand::SeedableRng;

    let eval_both = |g: &GenerativeModel| -> Result<(Real, Real), TrainError> {
        let mut rng = Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let bu = inference_sample(&tape, graph, inf, observations, particles, &mut rng)?;
        if bu.n == 0 {
            return Err(TrainError::EmptyBatch("mixed_equivalence_check"));
        }
        let log_q = sampled_log_q(graph, &bu)?
            .map(|v| v.value().data().to_vec())
            .unwrap_or_else(|| vec![0.0; bu.n]);
        let gen_bound = bind_generative(&tape, g);
        let lik = observed_log_lik(graph, &gen_bound, &bu)?.value().data().to_vec();
        let mut log_prior = vec![0.0; bu.n];
        for v in graph.latent_vars() {
            let parents: Vec<Var<Real>> = graph
                .parents(v)
                .iter()
                .map(|&p| bu.value_of(p))
                .collect::<Result<_, _>>()?;
            let lp = gen_bound[v].log_prob(bu.value_of(v)?, &parents)?;
            for (acc, &x) in log_prior.iter_mut().zip(lp.value().data()) {
                *acc += x;
            }
        }
        // Observed rows concatenated in ascending index order.
        let obs_vals: Vec<Tensor> = inf
            .inverse
            .observed
            .iter()
            .map(|&o| bu.value_of(o).map(|v| v.value()))
            .collect::<Result<_, _>>()?;
        let mut l_elbo = 0.0;
        let mut l_kl = 0.0;
        for i in 0..bu.n {
            let mut row = Vec::new();
            for t in &obs_vals {
                let d = t.last_dim();
                row.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            let log_qx = log_data_marginal(&row);
            // Analytic discriminator arithmetic in probability space.
            let qx = log_qx.exp();
            let pxz = lik[i].exp();
            let d = qx / (qx + pxz);
            let ratio = ((1.0 - d) / d).ln(); // log(p(x|z) / q_data(x))
            l_elbo += lik[i] + log_prior[i] - log_q[i];
            l_kl += ratio + log_prior[i] - log_q[i];
        }
        Ok((l_elbo / bu.n as Real, l_kl / bu.n as Real))
    };

    let (l_elbo, l_kl) = eval_both(gen)?;

    let with_params = |params: &[Tensor]| -> GenerativeModel {
        let mut g = gen.clone();
        let mut it = params.iter();
        for f in &mut g.factors {
            for dst in f.param_tensors_mut() {
                *dst = it.next().expect("parameter count fixed").clone();
            }
        }
        g
    };
    let mut flat: Vec<Tensor> = gen
        .factors
        .iter()
        .flat_map(|f| f.param_tensors().into_iter().cloned())
        .collect();
    let to_tensor_err = |e: TrainError| crate::TensorError::Domain {
        op: "mixed_equivalence_check",
        detail: e.to_string(),
    };
    let grad_elbo = finite_diff_grad(
        &mut flat,
        |p| eval_both(&with_params(p)).map(|r| r.0).map_err(to_tensor_err),
        1e-5,
    )?;
    let grad_kl = finite_diff_grad(
        &mut flat,
        |p| eval_both(&with_params(p)).map(|r| r.1).map_err(to_tensor_err),
        1e-5,
    )?;

    let flatten = |ts: &[Tensor]| -> Vec<Real> {
        ts.iter().flat_map(|t| t.data().iter().copied()).collect()
    };
    let a = flatten(&grad_elbo);
    let b = flatten(&grad_kl);
    let dot: Real = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: Real = a.iter().map(|x| x * x).sum::<Real>().sqrt();
    let nb: Real = b.iter().map(|x| x * x).sum::<Real>().sqrt();
    let theta_grad_cosine = if na < 1e-12 && nb < 1e-12 {
        1.0
    } else if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    };
    Ok(MixedEquivalenceReport {
        l_elbo,
        l_kl,
        difference: l_elbo - l_kl,
        theta_grad_cosine,
    })
}

// ---------------------------------------------------------------------------
// RBF-MMD
// ---------------------------------------------------------------------------

/// Unbiased squared maximum-mean-discrepancy estimate with a Gaussian kernel.
/// Bandwidth defaults to the median pairwise distance of the pooled samples.
/// Equal-sized sets use the paired U-statistic (exactly 0 on identical lists).
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: Option<Real>) -> Result<Real, TrainError> {
    let (n, m) = (a.lead(), b.lead());
    if n < 2 || m < 2 {
        return Err(TrainError::Config(format!(
            "mmd_rbf needs at least 2 samples per set, got {n} and {m}"
        )));
    }
    let d = a.last_dim();
    if b.last_dim() != d {
        return Err(crate::TensorError::ShapeMismatch {
            op: "mmd_rbf",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    let row = |t: &Tensor, i: usize| -> Vec<Real> { t.data()[i * d..(i + 1) * d].to_vec() };
    let sqdist = |x: &[Real], y: &[Real]| -> Real {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let sigma = match bandwidth {
        Some(s) => {
            if s <= 0.0 {
                return Err(TrainError::Config("mmd_rbf bandwidth must be positive".into()));
            }
            s
        }
        None => {
            let mut pooled: Vec<Vec<Real>> = (0..n).map(|i| row(a, i)).collect();
            pooled.extend((0..m).map(|i| row(b, i)));
            let mut dists = Vec::new();
            for i in 0..pooled.len() {
                for j in (i + 1)..pooled.len() {
                    dists.push(sqdist(&pooled[i], &pooled[j]).sqrt());
                }
            }
            dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
            let med = dists[dists.len() / 2];
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };
    let k = |x: &[Real], y: &[Real]| (-sqdist(x, y) / (2.0 * sigma * sigma)).exp();

    if n == m {
        // Paired U-statistic: each off-diagonal pair contributes
        // k(a_i,a_j) + k(b_i,b_j) - k(a_i,b_j) - k(b_i,a_j).
        let mut acc = 0.0;
        for i in 0..n {
            let (ai, bi) = (row(a, i), row(b, i));
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (aj, bj) = (row(a, j), row(b, j));
                acc += k(&ai, &aj) + k(&bi, &bj) - k(&ai, &bj) - k(&bi, &aj);
            }
        }
        return Ok(acc / (n * (n - 1)) as Real);
    }
    let mut within_a = 0.0;
    for i in 0..n {
        let ai = row(a, i);
        for j in 0..n {
            if i != j {
                within_a += k(&ai, &row(a, j));
            }
        }
    }
    let mut within_b = 0.0;
    for i in 0..m {
        let bi = row(b, i);
        for j in 0..m {
            if i != j {
                within_b += k(&bi, &row(b, j));
            }
        }
    }
    let mut cross = 0.0;
    for i in 0..n {
        let ai = row(a, i);
        for j in 0..m {
            cross += k(&ai, &row(b, j));
        }
    }
    Ok(within_a / (n * (n - 1)) as Real + within_b / (m * (m - 1)) as Real
        - 2.0 * cross / (n * m) as Real)
}

// ---------------------------------------------------------------------------

/// Monte-Carlo estimate of the two-chain local-JSD divergence with analytic
/// per-factor logits supplied by the caller: `1/2 E_td[sum_i log(2 D_i)] +
/// 1/2 E_bu[sum_i log(2 (1-D_i))]`. Test/diagnostic path mirroring the model
/// loss with the `log 2` mixture constants restored.
pub fn jsd_estimate_from_logits(
    td_logits: &[Vec<Real>],
    bu_logits: &[Vec<Real>],
) -> Result<Real, TrainError> {
    let tape: Tape = Tape::new();
    let mut total = 0.0;
    let ln2 = (2.0_f64).ln();
    for (td, bu) in td_logits.iter().zip(bu_logits) {
        if td.is_empty() || bu.is_empty() {
            return Err(TrainError::EmptyBatch("jsd_estimate_from_logits"));
        }
        let lt = tape.leaf(Tensor::new(vec![td.len(), 1], td.clone())?);
        let lb = tape.leaf(Tensor::new(vec![bu.len(), 1], bu.clone())?);
        let st = ratio_log_from_logit(lt, RatioDirection::POverM)?
            .mean()?
            .value()
            .item()?;
        let sb = ratio_log_from_logit(lb, RatioDirection::QOverM)?
            .mean()?
            .value()
            .item()?;
        total += 0.5 * (st + ln2) + 0.5 * (sb + ln2);
    }
    Ok(total)
}
