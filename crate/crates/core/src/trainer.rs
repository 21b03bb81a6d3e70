//! The adversarial message-passing training loop and its variants.
//!
//! One iteration draws a minibatch, fixes a noise seed, and cycles through the
//! variant's update units; each unit runs `n_D` adversary steps on its
//! discriminator loss, then one generative and one inference step on the
//! variant objective, in that order. Replaying the per-minibatch noise seed
//! re-pushes the same noise bag through the current parameters, so sequential
//! factor updates see a fixed sample while the parameters evolve. Determinism
//! contract: fixed seed and config reproduce the metrics stream bitwise.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use rand::{Rng as _, SeedableRng};

use crate::adversary::{BoundAdversary, LocalAdversary};
use crate::data::{draw_indices, Dataset};
use crate::error::{GraphError, TensorError, TrainError};
use crate::graph::{derive_inverse_factorization, InverseFactorization, ModelGraph};
use crate::model::{ancestral_sample, inference_sample, GenerativeModel, InferenceModel};
use crate::objectives::{
    admp_jsd_model_loss, elbo_eval, factor_tuple, global_model_loss, joint_tuple,
    kl_intractable_eval, kl_tractable_eval, latent_obs_tuple, latent_obs_width, prior_obs_tuple,
    ObjectiveVariant,
};
use crate::optim::{adam_step, AdamConfig};
use crate::tape::{concat, rel_err, Var};
use crate::{AdamState, Real, Rng, Tape, Tensor};

/// How per-datum observation masks are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Masks must be absent (or all-true); anything else is a config error.
    Complete,
    /// Data with any masked entry leave the bottom-up chain for that step;
    /// such data contribute only through the data-independent top-down terms.
    Drop,
}

impl std::str::FromStr for MaskPolicy {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "complete" => Ok(MaskPolicy::Complete),
            "drop" => Ok(MaskPolicy::Drop),
            other => Err(TrainError::Config(format!(
                "unknown mask policy '{other}'; one of: complete, drop"
            ))),
        }
    }
}

impl std::fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskPolicy::Complete => "complete",
            MaskPolicy::Drop => "drop",
        })
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub variant: ObjectiveVariant,
    /// Minibatch steps to run.
    pub iterations: u64,
    pub minibatch: usize,
    /// Bottom-up particles per datum.
    pub particles_l: usize,
    /// Top-down sample multiplier (top-down rows = minibatch * K).
    pub particles_k: usize,
    /// Adversary steps per update unit per iteration.
    pub n_d: usize,
    pub lr_theta: Real,
    pub lr_phi: Real,
    pub lr_xi: Real,
    /// Adam when true, plain SGD otherwise.
    pub adaptive: bool,
    pub seed: u64,
    /// Hidden-layer sizes of every discriminator.
    pub adversary_hidden: Vec<usize>,
    pub mask_policy: MaskPolicy,
    /// Metrics cadence in steps.
    pub metrics_every: u64,
}

impl TrainConfig {
    pub fn new(variant: ObjectiveVariant) -> Self {
        TrainConfig {
            variant,
            iterations: 1000,
            minibatch: 64,
            particles_l: 1,
            particles_k: 1,
            n_d: 1,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            lr_xi: 1e-3,
            adaptive: true,
            seed: 0,
            adversary_hidden: vec![64, 64],
            mask_policy: MaskPolicy::Complete,
            metrics_every: 100,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let need = |ok: bool, msg: &str| -> Result<(), TrainError> {
            if ok {
                Ok(())
            } else {
                Err(TrainError::Config(msg.into()))
            }
        };
        need(self.particles_l >= 1, "particles L must be >= 1")?;
        need(self.particles_k >= 1, "particles K must be >= 1")?;
        need(self.n_d >= 1, "adversary steps n_D must be >= 1")?;
        need(self.minibatch >= 1, "minibatch must be >= 1")?;
        need(self.metrics_every >= 1, "metrics cadence must be >= 1")?;
        need(
            self.lr_theta >= 0.0 && self.lr_phi >= 0.0 && self.lr_xi >= 0.0,
            "learning rates must be nonnegative",
        )
    }

    fn adam(&self, lr: Real) -> AdamConfig {
        if self.adaptive {
            AdamConfig::with_lr(lr)
        } else {
            AdamConfig::sgd(lr)
        }
    }
}

/// All mutable state of a run: the three parameter groups, their optimizer
/// moments, the step counter and the RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub gen: GenerativeModel,
    pub inf: InferenceModel,
    pub adversaries: Vec<LocalAdversary>,
    /// Optimizer state per generative factor, per parameter tensor.
    pub opt_theta: Vec<Vec<AdamState>>,
    /// Optimizer state per inference factor (inverse processing order).
    pub opt_phi: Vec<Vec<AdamState>>,
    /// Optimizer state per adversary.
    pub opt_xi: Vec<Vec<AdamState>>,
    pub step: u64,
    pub rng: Rng,
}

const ADVERSARY_INIT_SALT: u64 = 0x5e6f_1a2b;

impl TrainState {
    /// Fresh state: adversaries sized by the variant's wiring, optimizer
    /// moments zeroed, RNG seeded from the config.
    pub fn new(
        graph: &ModelGraph,
        gen: GenerativeModel,
        inf: InferenceModel,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut adv_rng = Rng::seed_from_u64(cfg.seed ^ ADVERSARY_INIT_SALT);
        let hidden = &cfg.adversary_hidden;
        let adversaries = match cfg.variant {
            ObjectiveVariant::AdmpJsdLoc => {
                crate::adversary::make_local_adversaries(graph, hidden, &mut adv_rng)
            }
            ObjectiveVariant::GlobalBiadv => {
                let w: usize = (0..graph.num_vars()).map(|v| graph.var(v).width()).sum();
                vec![LocalAdversary::new(0, w, hidden, &mut adv_rng)]
            }
            ObjectiveVariant::Gan => {
                let w: usize = graph.observed_vars().iter().map(|&v| graph.var(v).width()).sum();
                vec![LocalAdversary::new(0, w, hidden, &mut adv_rng)]
            }
            ObjectiveVariant::AdmpKlTractable => {
                let w = latent_obs_width(graph, &inf.inverse);
                vec![LocalAdversary::new(0, w, hidden, &mut adv_rng)]
            }
            ObjectiveVariant::AdmpKlIntractable => {
                let w = latent_obs_width(graph, &inf.inverse);
                vec![
                    LocalAdversary::new(0, w, hidden, &mut adv_rng),
                    LocalAdversary::new(1, w, hidden, &mut adv_rng),
                ]
            }
            ObjectiveVariant::Elbo => vec![],
        };
        debug_assert_eq!(adversaries.len(), cfg.variant.adversary_count(graph));
        let opt_theta = gen
            .factors
            .iter()
            .map(|f| f.param_tensors().iter().map(|t| AdamState::new(t.shape())).collect())
            .collect();
        let opt_phi = inf
            .factors
            .iter()
            .map(|f| f.param_tensors().iter().map(|t| AdamState::new(t.shape())).collect())
            .collect();
        let opt_xi = adversaries
            .iter()
            .map(|a| a.net.params().iter().map(|t| AdamState::new(t.shape())).collect())
            .collect();
        Ok(TrainState {
            gen,
            inf,
            adversaries,
            opt_theta,
            opt_phi,
            opt_xi,
            step: 0,
            rng: Rng::seed_from_u64(cfg.seed),
        })
    }

    /// Order- and bit-exact hash of one parameter group ("theta", "phi",
    /// "xi"); used to assert that a variant leaves excluded groups untouched.
    pub fn param_hash(&self, group: &str) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut feed = |tensors: Vec<&Tensor>| {
            for t in tensors {
                for &v in t.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        };
        match group {
            "theta" => {
                for f in &self.gen.factors {
                    feed(f.param_tensors());
                }
            }
            "phi" => {
                for f in &self.inf.factors {
                    feed(f.param_tensors());
                }
            }
            "xi" => {
                for a in &self.adversaries {
                    feed(a.net.params());
                }
            }
            other => panic!("unknown parameter group '{other}'"),
        }
        h.finish()
    }
}

// ---------------------------------------------------------------------------
// Observation masks
// ---------------------------------------------------------------------------

/// Lazily derived inverse factorizations per observation-mask pattern.
pub struct InverseCache {
    base: InverseFactorization,
    derived: HashMap<Vec<bool>, InverseFactorization>,
}

impl InverseCache {
    pub fn new(base: InverseFactorization) -> Self {
        InverseCache { base, derived: HashMap::new() }
    }

    pub fn base(&self) -> &InverseFactorization {
        &self.base
    }
}

/// Effective inverse factorization for one datum's mask (one flag per entry of
/// the base observed set, ascending). Masked variables are treated as latent;
/// an all-masked datum is rejected.
pub fn apply_mask<'c>(
    graph: &ModelGraph,
    cache: &'c mut InverseCache,
    mask: &[bool],
) -> Result<&'c InverseFactorization, TrainError> {
    if mask.len() != cache.base.observed.len() {
        return Err(TrainError::Config(format!(
            "mask covers {} variables, expected {}",
            mask.len(),
            cache.base.observed.len()
        )));
    }
    if mask.iter().all(|&m| m) {
        return Ok(&cache.base);
    }
    if mask.iter().all(|&m| !m) {
        return Err(GraphError::AllMasked.into());
    }
    if !cache.derived.contains_key(mask) {
        let observed = cache
            .base
            .observed
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        let inv = derive_inverse_factorization(graph, &observed)?;
        cache.derived.insert(mask.to_vec(), inv);
    }
    Ok(&cache.derived[mask])
}

// ---------------------------------------------------------------------------
// Update units
// ---------------------------------------------------------------------------

/// One entry of the per-iteration factor cycle: which adversaries get `n_D`
/// steps and which parameter groups get their single step afterwards.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateUnit {
    /// Name used in diagnostics (variable name, or "model" for variants whose
    /// objective is not per-factor).
    pub label: String,
    pub adversaries: Vec<usize>,
    /// Generative factor indices (graph variable indices).
    pub theta_factors: Vec<usize>,
    /// Inference factor indices (positions in the inverse processing order).
    pub phi_factors: Vec<usize>,
}

/// The factor cycle of one iteration.
pub fn update_units(
    variant: ObjectiveVariant,
    graph: &ModelGraph,
    inf: &InferenceModel,
) -> Vec<UpdateUnit> {
    match variant {
        ObjectiveVariant::AdmpJsdLoc => graph
            .topo_order()
            .iter()
            .map(|&v| UpdateUnit {
                label: graph.var(v).name.clone(),
                adversaries: vec![v],
                theta_factors: vec![v],
                phi_factors: inf
                    .inverse
                    .order
                    .iter()
                    .position(|&l| l == v)
                    .into_iter()
                    .collect(),
            })
            .collect(),
        _ => {
            let phi_factors = if variant.updates_inference() {
                (0..inf.factors.len()).collect()
            } else {
                Vec::new()
            };
            vec![UpdateUnit {
                label: "model".into(),
                adversaries: (0..variant.adversary_count(graph)).collect(),
                theta_factors: (0..graph.num_vars()).collect(),
                phi_factors,
            }]
        }
    }
}

// ---------------------------------------------------------------------------
// Per-variant passes
// ---------------------------------------------------------------------------

struct AdvPass<'t> {
    /// Per adversary index: its discriminator loss.
    losses: Vec<Var<'t, Real>>,
    /// Per adversary index: its parameter vars.
    xi_vars: Vec<Vec<Var<'t, Real>>>,
    /// Mean discriminator output on the class-1 side, per adversary label.
    disc_means: BTreeMap<String, Real>,
}

struct ModelPass<'t> {
    loss: Var<'t, Real>,
    /// Per generative factor (graph variable index): parameter vars.
    theta_vars: Vec<Vec<Var<'t, Real>>>,
    /// Per inference factor (inverse processing order): parameter vars.
    phi_vars: Vec<Vec<Var<'t, Real>>>,
    named: BTreeMap<String, Real>,
}

fn adversary_label(variant: ObjectiveVariant, graph: &ModelGraph, idx: usize) -> String {
    match variant {
        ObjectiveVariant::AdmpJsdLoc => graph.var(idx).name.clone(),
        ObjectiveVariant::AdmpKlIntractable => ["latent", "observation"][idx].to_string(),
        _ => "joint".to_string(),
    }
}

/// Concatenated observed data rows (class-1 side for data-driven adversaries).
fn data_tuple<'t>(
    tape: &'t Tape,
    vars: &[usize],
    obs: &BTreeMap<usize, Tensor>,
    graph: &ModelGraph,
) -> Result<Var<'t, Real>, TrainError> {
    let parts: Vec<Var<'t, Real>> = vars
        .iter()
        .map(|v| {
            obs.get(v)
                .map(|t| tape.leaf(t.clone()))
                .ok_or_else(|| GraphError::MissingObservation(graph.var(*v).name.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(concat(&parts)?)
}

fn mean_disc<'t>(adv: &BoundAdversary<'t>, tuple: Var<'t, Real>) -> Result<Real, TrainError> {
    Ok(adv.discriminate(tuple)?.mean()?.value().item()?)
}

/// Discriminator losses for every adversary of the variant, on fresh draws.
fn adversary_pass<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    gen: &'t GenerativeModel,
    inf: &'t InferenceModel,
    adversaries: &'t [LocalAdversary],
    cfg: &TrainConfig,
    obs: &BTreeMap<usize, Tensor>,
    rng: &mut Rng,
) -> Result<AdvPass<'t>, TrainError> {
    let bound: Vec<BoundAdversary<'t>> = adversaries.iter().map(|a| a.bind(tape)).collect();
    let xi_vars: Vec<Vec<Var<'t, Real>>> = bound.iter().map(|b| b.param_vars()).collect();
    let mut losses = Vec::new();
    let mut disc_means = BTreeMap::new();
    let label = |i: usize| adversary_label(cfg.variant, graph, i);
    let td_rows = cfg.minibatch * cfg.particles_k;
    match cfg.variant {
        ObjectiveVariant::AdmpJsdLoc => {
            let td = ancestral_sample(tape, graph, gen, td_rows, rng)?;
            let bu = inference_sample(tape, graph, inf, obs, cfg.particles_l, rng)?;
            for v in 0..graph.num_vars() {
                let t = factor_tuple(&td, graph, v)?;
                let b = factor_tuple(&bu, graph, v)?;
                losses.push(bound[v].loss_loc_d(t, b)?);
                disc_means.insert(label(v), mean_disc(&bound[v], t)?);
            }
        }
        ObjectiveVariant::GlobalBiadv => {
            let td = ancestral_sample(tape, graph, gen, td_rows, rng)?;
            let bu = inference_sample(tape, graph, inf, obs, cfg.particles_l, rng)?;
            let t = joint_tuple(&td, graph)?;
            losses.push(bound[0].loss_loc_d(t, joint_tuple(&bu, graph)?)?);
            disc_means.insert(label(0), mean_disc(&bound[0], t)?);
        }
        ObjectiveVariant::Gan => {
            let td = ancestral_sample(tape, graph, gen, td_rows, rng)?;
            let observed = graph.observed_vars();
            let gen_parts: Vec<Var<'t, Real>> = observed
                .iter()
                .map(|&v| td.value_of(v))
                .collect::<Result<_, _>>()?;
            let data = data_tuple(tape, &observed, obs, graph)?;
            losses.push(bound[0].loss_loc_d(data, concat(&gen_parts)?)?);
            disc_means.insert(label(0), mean_disc(&bound[0], data)?);
        }
        ObjectiveVariant::AdmpKlTractable => {
            let bu = inference_sample(tape, graph, inf, obs, cfg.particles_l, rng)?;
            let q_tuple = latent_obs_tuple(&bu, &inf.inverse)?;
            let prior = prior_obs_tuple(tape, graph, gen, &inf.inverse, obs, cfg.particles_k, rng)?;
            losses.push(bound[0].loss_loc_d(prior, q_tuple)?);
            disc_means.insert(label(0), mean_disc(&bound[0], prior)?);
        }
        ObjectiveVariant::AdmpKlIntractable => {
            let ev = kl_intractable_eval(
                tape,
                graph,
                gen,
                inf,
                &bound[0],
                &bound[1],
                obs,
                cfg.particles_l,
                rng,
            )?;
            let prior = prior_obs_tuple(tape, graph, gen, &inf.inverse, obs, cfg.particles_k, rng)?;
            // Flipped labels: class 1 is the inference/data side for both.
            losses.push(bound[0].loss_loc_d(ev.z_tuple_q, prior)?);
            losses.push(bound[1].loss_loc_d(ev.x_tuple_data, ev.x_tuple_recon)?);
            disc_means.insert(label(0), mean_disc(&bound[0], ev.z_tuple_q)?);
            disc_means.insert(label(1), mean_disc(&bound[1], ev.x_tuple_data)?);
        }
        ObjectiveVariant::Elbo => {}
    }
    Ok(AdvPass { losses, xi_vars, disc_means })
}

/// The variant objective with the parameter vars its gradients reach.
fn model_pass<'t>(
    tape: &'t Tape,
    graph: &ModelGraph,
    gen: &'t GenerativeModel,
    inf: &'t InferenceModel,
    adversaries: &'t [LocalAdversary],
    cfg: &TrainConfig,
    obs: &BTreeMap<usize, Tensor>,
    rng: &mut Rng,
) -> Result<ModelPass<'t>, TrainError> {
    let bound: Vec<BoundAdversary<'t>> = adversaries.iter().map(|a| a.bind(tape)).collect();
    let td_rows = cfg.minibatch * cfg.particles_k;
    let mut named = BTreeMap::new();
    let phi_from_bu = |bu: &crate::model::SampledJoint<'t>| -> Vec<Vec<Var<'t, Real>>> {
        bu.draws.iter().map(|d| d.bound.param_vars()).collect()
    };
    match cfg.variant {
        ObjectiveVariant::AdmpJsdLoc | ObjectiveVariant::GlobalBiadv => {
            let td = ancestral_sample(tape, graph, gen, td_rows, rng)?;
            let bu = inference_sample(tape, graph, inf, obs, cfg.particles_l, rng)?;
            let loss = if cfg.variant == ObjectiveVariant::AdmpJsdLoc {
                admp_jsd_model_loss(graph, &td, &bu, &bound)?
            } else {
                global_model_loss(graph, &td, &bu, &bound[0])?
            };
            named.insert("model".into(), loss.value().item()?);
            let theta_vars = (0..graph.num_vars())
                .map(|v| td.draw_for(v).expect("ancestral draws every factor").bound.param_vars())
                .collect();
            let phi_vars = phi_from_bu(&bu);
            Ok(ModelPass { loss, theta_vars, phi_vars, named })
        }
        ObjectiveVariant::Gan => {
            let td = ancestral_sample(tape, graph, gen, td_rows, rng)?;
            let observed = graph.observed_vars();
            let gen_parts: Vec<Var<'t, Real>> = observed
                .iter()
                .map(|&v| td.value_of(v))
                .collect::<Result<_, _>>()?;
            if td.n == 0 {
                return Err(TrainError::EmptyBatch("gan generator step"));
            }
            // Generator minimizes E_gen[log(1 - D)]: look like data to D.
            let loss = bound[0]
                .ratio_log(concat(&gen_parts)?, crate::adversary::RatioDirection::QOverM)?
                .mean()?;
            named.insert("generator".into(), loss.value().item()?);
            let theta_vars = (0..graph.num_vars())
                .map(|v| td.draw_for(v).expect("ancestral draws every factor").bound.param_vars())
                .collect();
            Ok(ModelPass { loss, theta_vars, phi_vars: Vec::new(), named })
        }
        ObjectiveVariant::AdmpKlTractable => {
            let ev = kl_tractable_eval(tape, graph, gen, inf, &bound[0], obs, cfg.particles_l, rng)?;
            named.insert("loss".into(), ev.loss.value().item()?);
            named.insert("reconstruction".into(), ev.reconstruction.value().item()?);
            let theta_vars = ev.gen_bound.iter().map(|b| b.param_vars()).collect();
            let phi_vars = phi_from_bu(&ev.bu);
            Ok(ModelPass { loss: ev.loss, theta_vars, phi_vars, named })
        }
        ObjectiveVariant::AdmpKlIntractable => {
            let ev = kl_intractable_eval(
                tape,
                graph,
                gen,
                inf,
                &bound[0],
                &bound[1],
                obs,
                cfg.particles_l,
                rng,
            )?;
            named.insert("kl_estimate".into(), ev.kl_estimate.value().item()?);
            named.insert("recon_guidance".into(), ev.recon_guidance.value().item()?);
            let loss = ev.kl_estimate.add(ev.recon_guidance)?;
            let theta_vars = ev.gen_bound.iter().map(|b| b.param_vars()).collect();
            let phi_vars = phi_from_bu(&ev.bu);
            Ok(ModelPass { loss, theta_vars, phi_vars, named })
        }
        ObjectiveVariant::Elbo => {
            let ev = elbo_eval(tape, graph, gen, inf, obs, cfg.particles_l, rng)?;
            named.insert("elbo".into(), ev.elbo.value().item()?);
            let loss = ev.elbo.neg()?;
            let theta_vars = ev.gen_bound.iter().map(|b| b.param_vars()).collect();
            let phi_vars = phi_from_bu(&ev.bu);
            Ok(ModelPass { loss, theta_vars, phi_vars, named })
        }
    }
}

// ---------------------------------------------------------------------------
// Updates
// ---------------------------------------------------------------------------

/// Turn a non-finite tensor failure into a named training abort.
fn nan_abort(e: TrainError, step: u64, factor: &str) -> TrainError {
    fn non_finite(e: &TrainError) -> Option<&'static str> {
        match e {
            TrainError::Tensor(TensorError::NonFinite { op }) => Some(op),
            TrainError::Density(crate::DensityError::Tensor(TensorError::NonFinite { op })) => {
                Some(op)
            }
            _ => None,
        }
    }
    match non_finite(&e) {
        Some(op) => TrainError::NanAbort {
            step,
            factor: factor.to_string(),
            source: TensorError::NonFinite { op },
        },
        None => e,
    }
}

/// Apply one optimizer step to a factor's parameters from collected gradients.
fn apply_group(
    step: u64,
    label: &str,
    tensors: Vec<&mut Tensor>,
    grads: &[Tensor],
    opt: &mut [AdamState],
    adam: &AdamConfig,
) -> Result<(), TrainError> {
    debug_assert_eq!(tensors.len(), grads.len());
    for ((t, g), st) in tensors.into_iter().zip(grads).zip(opt.iter_mut()) {
        if !g.all_finite() {
            return Err(TrainError::NanAbort {
                step,
                factor: label.to_string(),
                source: TensorError::NonFinite { op: "gradient" },
            });
        }
        adam_step(adam, t, g, st)?;
    }
    Ok(())
}

/// One entry of the factor cycle: `n_D` adversary steps on this unit's
/// discriminators, then one generative step and one inference step, in the
/// order ξ, θ, φ. `eps_seed` fixes the minibatch's noise bag: every pass
/// replays the same noise through the current parameters.
pub fn update_factor(
    graph: &ModelGraph,
    state: &mut TrainState,
    cfg: &TrainConfig,
    unit: &UpdateUnit,
    obs: &BTreeMap<usize, Tensor>,
    eps_seed: u64,
) -> Result<(), TrainError> {
    let step = state.step;
    // ξ: n_D discriminator steps.
    if !unit.adversaries.is_empty() && cfg.variant.uses_adversaries() {
        for _ in 0..cfg.n_d {
            let mut grads_out: Vec<(usize, Vec<Tensor>)> = Vec::new();
            {
                let tape = Tape::new();
                let mut rng = Rng::seed_from_u64(eps_seed);
                let pass = adversary_pass(
                    &tape,
                    graph,
                    &state.gen,
                    &state.inf,
                    &state.adversaries,
                    cfg,
                    obs,
                    &mut rng,
                )
                .map_err(|e| nan_abort(e, step, &unit.label))?;
                let mut total: Option<Var<Real>> = None;
                for &a in &unit.adversaries {
                    let l = pass.losses[a];
                    total = Some(match total {
                        None => l,
                        Some(t) => t.add(l).map_err(|e| nan_abort(e.into(), step, &unit.label))?,
                    });
                }
                let total = total.expect("unit has adversaries");
                let grads = tape
                    .backward(total.id)
                    .map_err(|e| nan_abort(e.into(), step, &unit.label))?;
                for &a in &unit.adversaries {
                    grads_out.push((a, pass.xi_vars[a].iter().map(|v| grads.wrt(*v)).collect()));
                }
            }
            let adam = cfg.adam(cfg.lr_xi);
            for (a, g) in grads_out {
                apply_group(
                    step,
                    &unit.label,
                    state.adversaries[a].net.params_mut(),
                    &g,
                    &mut state.opt_xi[a],
                    &adam,
                )?;
            }
        }
    }

    // θ, φ: one step each on the variant objective.
    if unit.theta_factors.is_empty() && unit.phi_factors.is_empty() {
        return Ok(());
    }
    let mut theta_grads: Vec<(usize, Vec<Tensor>)> = Vec::new();
    let mut phi_grads: Vec<(usize, Vec<Tensor>)> = Vec::new();
    {
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(eps_seed);
        let pass = model_pass(
            &tape,
            graph,
            &state.gen,
            &state.inf,
            &state.adversaries,
            cfg,
            obs,
            &mut rng,
        )
        .map_err(|e| nan_abort(e, step, &unit.label))?;
        let grads = tape
            .backward(pass.loss.id)
            .map_err(|e| nan_abort(e.into(), step, &unit.label))?;
        for &v in &unit.theta_factors {
            if state.gen.factors[v].trainable() {
                theta_grads.push((v, pass.theta_vars[v].iter().map(|p| grads.wrt(*p)).collect()));
            }
        }
        if cfg.variant.updates_inference() {
            for &i in &unit.phi_factors {
                if state.inf.factors[i].trainable() {
                    phi_grads.push((i, pass.phi_vars[i].iter().map(|p| grads.wrt(*p)).collect()));
                }
            }
        }
    }
    let adam_theta = cfg.adam(cfg.lr_theta);
    for (v, g) in theta_grads {
        let label = &graph.var(v).name;
        apply_group(
            step,
            label,
            state.gen.factors[v].param_tensors_mut(),
            &g,
            &mut state.opt_theta[v],
            &adam_theta,
        )?;
    }
    let adam_phi = cfg.adam(cfg.lr_phi);
    for (i, g) in phi_grads {
        let label = graph.var(state.inf.inverse.order[i]).name.clone();
        apply_group(
            step,
            &label,
            state.inf.factors[i].param_tensors_mut(),
            &g,
            &mut state.opt_phi[i],
            &adam_phi,
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// One metrics-stream record.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub variant: String,
    /// Discriminator losses (`adv/<name>`) and the variant objective pieces.
    pub losses: BTreeMap<String, Real>,
    /// Mean discriminator output on the class-1 side, per adversary.
    pub disc_mean: BTreeMap<String, Real>,
    /// Oracle divergences, when the model admits an oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<BTreeMap<String, Real>>,
}

const METRICS_SALT: u64 = 0x6d65_7472;

/// Evaluate the current losses without updating anything; the RNG derives from
/// the config seed and step, leaving the training stream untouched.
pub fn evaluate_metrics(
    graph: &ModelGraph,
    state: &TrainState,
    cfg: &TrainConfig,
    obs: &BTreeMap<usize, Tensor>,
) -> Result<MetricsRecord, TrainError> {
    let seed = cfg.seed ^ state.step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ METRICS_SALT;
    let mut losses = BTreeMap::new();
    let mut disc_mean = BTreeMap::new();
    if cfg.variant.uses_adversaries() {
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(seed);
        let pass = adversary_pass(
            &tape,
            graph,
            &state.gen,
            &state.inf,
            &state.adversaries,
            cfg,
            obs,
            &mut rng,
        )?;
        for (i, l) in pass.losses.iter().enumerate() {
            losses.insert(
                format!("adv/{}", adversary_label(cfg.variant, graph, i)),
                l.value().item()?,
            );
        }
        disc_mean = pass.disc_means;
    }
    {
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(seed);
        let pass = model_pass(
            &tape,
            graph,
            &state.gen,
            &state.inf,
            &state.adversaries,
            cfg,
            obs,
            &mut rng,
        )?;
        losses.extend(pass.named);
    }
    Ok(MetricsRecord {
        step: state.step,
        variant: cfg.variant.name().to_string(),
        losses,
        disc_mean,
        oracle: None,
    })
}

/// Extra oracle metrics computed on cadence steps; implementations must not
/// touch the training RNG.
pub type OracleMetrics<'a> = &'a dyn Fn(&ModelGraph, &TrainState) -> BTreeMap<String, Real>;

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// Run `cfg.iterations` minibatch steps, mutating `state` in place. Returns
/// the metrics records emitted on the cadence (also streamed to `sink`, when
/// given, as they appear). A record at step 0 is emitted only for fresh
/// states, so a resumed run continues the stream seamlessly.
pub fn admp_train(
    graph: &ModelGraph,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    oracle_metrics: Option<OracleMetrics>,
    mut sink: Option<&mut dyn FnMut(&MetricsRecord) -> std::io::Result<()>>,
) -> Result<Vec<MetricsRecord>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyBatch("admp_train"));
    }
    if cfg.mask_policy == MaskPolicy::Complete {
        if let Some(masks) = &data.masks {
            if masks.iter().any(|m| m.iter().any(|&f| !f)) {
                return Err(TrainError::Config(
                    "dataset has masked entries; use --mask-policy drop".into(),
                ));
            }
        }
    }
    let units = update_units(cfg.variant, graph, &state.inf);
    let mut records = Vec::new();
    let mut emit = |rec: MetricsRecord| -> Result<(), TrainError> {
        if let Some(s) = sink.as_deref_mut() {
            s(&rec)?;
        }
        records.push(rec);
        Ok(())
    };
    let full_obs = data.batch(&(0..data.len().min(256)).collect::<Vec<_>>());
    let with_oracle = |graph: &ModelGraph, state: &TrainState, mut rec: MetricsRecord| {
        if let Some(f) = oracle_metrics {
            rec.oracle = Some(f(graph, state));
        }
        rec
    };
    if state.step == 0 {
        let rec = evaluate_metrics(graph, state, cfg, &full_obs)
            .map_err(|e| nan_abort(e, state.step, "metrics"))?;
        emit(with_oracle(graph, state, rec))?;
    }
    for _ in 0..cfg.iterations {
        let idx = draw_indices(&mut state.rng, data.len(), cfg.minibatch);
        let idx = match (&data.masks, cfg.mask_policy) {
            (Some(masks), MaskPolicy::Drop) => {
                let kept: Vec<usize> =
                    idx.into_iter().filter(|&i| masks[i].iter().all(|&m| m)).collect();
                if kept.is_empty() {
                    return Err(TrainError::EmptyBatch("minibatch after mask drop"));
                }
                kept
            }
            _ => idx,
        };
        let obs = data.batch(&idx);
        let eps_seed = state.rng.gen::<u64>();
        for unit in &units {
            update_factor(graph, state, cfg, unit, &obs, eps_seed)?;
        }
        state.step += 1;
        if state.step % cfg.metrics_every == 0 {
            let rec = evaluate_metrics(graph, state, cfg, &full_obs)
                .map_err(|e| nan_abort(e, state.step, "metrics"))?;
            emit(with_oracle(graph, state, rec))?;
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// One row of a gradient-check report.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckRow {
    pub group: String,
    /// Scalar parameter count of the group.
    pub params: usize,
    /// Worst relative error between backward and central differences;
    /// `None` when the variant has no such group ("n/a").
    pub max_rel_err: Option<Real>,
}

/// Compare backward gradients against central finite differences on one frozen
/// batch, per parameter group. All evaluations replay the same noise seed.
pub fn gradcheck(
    graph: &ModelGraph,
    state: &TrainState,
    cfg: &TrainConfig,
    obs: &BTreeMap<usize, Tensor>,
    h: Real,
) -> Result<Vec<GradCheckRow>, TrainError> {
    gradcheck_impl(graph, state, cfg, obs, h, None)
}

/// Test hook: negates the backward gradient of the named group so the report
/// must flag it (negative control for the checking machinery itself).
pub fn gradcheck_with_flipped_group(
    graph: &ModelGraph,
    state: &TrainState,
    cfg: &TrainConfig,
    obs: &BTreeMap<usize, Tensor>,
    h: Real,
    flip: &str,
) -> Result<Vec<GradCheckRow>, TrainError> {
    gradcheck_impl(graph, state, cfg, obs, h, Some(flip))
}

fn max_rel_err(analytic: &[Tensor], fd: &[Tensor]) -> Real {
    let mut worst: Real = 0.0;
    for (a, b) in analytic.iter().zip(fd) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            worst = worst.max(rel_err(x, y));
        }
    }
    worst
}

fn to_domain(e: TrainError) -> TensorError {
    TensorError::Domain { op: "gradcheck", detail: e.to_string() }
}

fn gradcheck_impl(
    graph: &ModelGraph,
    state: &TrainState,
    cfg: &TrainConfig,
    obs: &BTreeMap<usize, Tensor>,
    h: Real,
    flip: Option<&str>,
) -> Result<Vec<GradCheckRow>, TrainError> {
    use crate::tape::finite_diff_grad;
    let eps_seed = cfg.seed;
    let sign = |group: &str| if flip == Some(group) { -1.0 } else { 1.0 };

    // Trainable tensor snapshots per group, flattened in update order.
    let theta_flat: Vec<Tensor> = state
        .gen
        .factors
        .iter()
        .filter(|f| f.trainable())
        .flat_map(|f| f.param_tensors().into_iter().cloned())
        .collect();
    let phi_flat: Vec<Tensor> = state
        .inf
        .factors
        .iter()
        .filter(|f| f.trainable())
        .flat_map(|f| f.param_tensors().into_iter().cloned())
        .collect();
    let xi_flat: Vec<Tensor> = state
        .adversaries
        .iter()
        .flat_map(|a| a.net.params().into_iter().cloned())
        .collect();
    let count = |ts: &[Tensor]| ts.iter().map(|t| t.numel()).sum::<usize>();

    let model_value = |gen: &GenerativeModel, inf: &InferenceModel| -> Result<Real, TrainError> {
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(eps_seed);
        let pass = model_pass(&tape, graph, gen, inf, &state.adversaries, cfg, obs, &mut rng)?;
        Ok(pass.loss.value().item()?)
    };
    let adv_value = |advs: &[LocalAdversary]| -> Result<Real, TrainError> {
        let tape = Tape::new();
        let mut rng = Rng::seed_from_u64(eps_seed);
        let pass =
            adversary_pass(&tape, graph, &state.gen, &state.inf, advs, cfg, obs, &mut rng)?;
        let mut total = 0.0;
        for l in &pass.losses {
            total += l.value().item()?;
        }
        Ok(total)
    };

    let mut rows = Vec::new();

    // θ group.
    if theta_flat.is_empty() {
        rows.push(GradCheckRow { group: "theta".into(), params: 0, max_rel_err: None });
    } else {
        let analytic = {
            let tape = Tape::new();
            let mut rng = Rng::seed_from_u64(eps_seed);
            let pass =
                model_pass(&tape, graph, &state.gen, &state.inf, &state.adversaries, cfg, obs, &mut rng)?;
            let grads = tape.backward(pass.loss.id)?;
            let s = sign("theta");
            let mut out = Vec::new();
            for (v, f) in state.gen.factors.iter().enumerate() {
                if f.trainable() {
                    out.extend(pass.theta_vars[v].iter().map(|p| grads.wrt(*p).map(|g| s * g)));
                }
            }
            out
        };
        let mut flat = theta_flat.clone();
        let fd = finite_diff_grad(
            &mut flat,
            |p| {
                let mut gen = state.gen.clone();
                let mut it = p.iter();
                for f in &mut gen.factors {
                    if f.trainable() {
                        for dst in f.param_tensors_mut() {
                            *dst = it.next().expect("fixed parameter count").clone();
                        }
                    }
                }
                model_value(&gen, &state.inf).map_err(to_domain)
            },
            h,
        )?;
        rows.push(GradCheckRow {
            group: "theta".into(),
            params: count(&theta_flat),
            max_rel_err: Some(max_rel_err(&analytic, &fd)),
        });
    }

    // φ group.
    if !cfg.variant.updates_inference() || phi_flat.is_empty() {
        rows.push(GradCheckRow { group: "phi".into(), params: 0, max_rel_err: None });
    } else {
        let analytic = {
            let tape = Tape::new();
            let mut rng = Rng::seed_from_u64(eps_seed);
            let pass =
                model_pass(&tape, graph, &state.gen, &state.inf, &state.adversaries, cfg, obs, &mut rng)?;
            let grads = tape.backward(pass.loss.id)?;
            let s = sign("phi");
            let mut out = Vec::new();
            for (i, f) in state.inf.factors.iter().enumerate() {
                if f.trainable() {
                    out.extend(pass.phi_vars[i].iter().map(|p| grads.wrt(*p).map(|g| s * g)));
                }
            }
            out
        };
        let mut flat = phi_flat.clone();
        let fd = finite_diff_grad(
            &mut flat,
            |p| {
                let mut inf = state.inf.clone();
                let mut it = p.iter();
                for f in &mut inf.factors {
                    if f.trainable() {
                        for dst in f.param_tensors_mut() {
                            *dst = it.next().expect("fixed parameter count").clone();
                        }
                    }
                }
                model_value(&state.gen, &inf).map_err(to_domain)
            },
            h,
        )?;
        rows.push(GradCheckRow {
            group: "phi".into(),
            params: count(&phi_flat),
            max_rel_err: Some(max_rel_err(&analytic, &fd)),
        });
    }

    // ξ group.
    if !cfg.variant.uses_adversaries() || xi_flat.is_empty() {
        rows.push(GradCheckRow { group: "xi".into(), params: 0, max_rel_err: None });
    } else {
        let analytic = {
            let tape = Tape::new();
            let mut rng = Rng::seed_from_u64(eps_seed);
            let pass = adversary_pass(
                &tape,
                graph,
                &state.gen,
                &state.inf,
                &state.adversaries,
                cfg,
                obs,
                &mut rng,
            )?;
            let mut total: Option<Var<Real>> = None;
            for l in &pass.losses {
                total = Some(match total {
                    None => *l,
                    Some(t) => t.add(*l)?,
                });
            }
            let grads = tape.backward(total.expect("adversaries exist").id)?;
            let s = sign("xi");
            let mut out = Vec::new();
            for vars in &pass.xi_vars {
                out.extend(vars.iter().map(|p| grads.wrt(*p).map(|g| s * g)));
            }
            out
        };
        let mut flat = xi_flat.clone();
        let fd = finite_diff_grad(
            &mut flat,
            |p| {
                let mut advs = state.adversaries.clone();
                let mut it = p.iter();
                for a in &mut advs {
                    for dst in a.net.params_mut() {
                        *dst = it.next().expect("fixed parameter count").clone();
                    }
                }
                adv_value(&advs).map_err(to_domain)
            },
            h,
        )?;
        rows.push(GradCheckRow {
            group: "xi".into(),
            params: count(&xi_flat),
            max_rel_err: Some(max_rel_err(&analytic, &fd)),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{lingauss_dataset, lingauss_truth, LINGAUSS_NOISE_VAR, LINGAUSS_PRIOR_VAR};
    use crate::densities::{FactorParams, MeanSource, StdSource};
    use crate::graph::{Role, Support, VariableDecl};
    use crate::nn::Activation;
    use crate::oracle::conjugate_gaussian_posterior;
    use crate::Mlp;
    use std::collections::BTreeSet;

    fn lingauss_setup(variant: ObjectiveVariant, seed: u64) -> (ModelGraph, TrainState, TrainConfig, Dataset) {
        let (graph, gen) = lingauss_truth();
        let obs: BTreeSet<usize> = [1].into();
        let inverse = derive_inverse_factorization(&graph, &obs).unwrap();
        let mut rng = Rng::seed_from_u64(seed ^ 0xabcd);
        let q_net = Mlp::new(&[1, 16, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let inf = InferenceModel {
            inverse,
            factors: vec![FactorParams::Gaussian {
                dim: 1,
                mean: MeanSource::Net(q_net),
                log_std: StdSource::Param(Tensor::zeros(&[1])),
                trainable: true,
            }],
        };
        let mut cfg = TrainConfig::new(variant);
        cfg.seed = seed;
        cfg.minibatch = 32;
        cfg.adversary_hidden = vec![32];
        let state = TrainState::new(&graph, gen, inf, &cfg).unwrap();
        let data = lingauss_dataset(512, seed ^ 0x77);
        (graph, state, cfg, data)
    }

    #[test]
    fn zero_iterations_leave_state_unchanged() {
        let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::Elbo, 1);
        cfg.iterations = 0;
        let before = (state.param_hash("theta"), state.param_hash("phi"), state.step);
        let recs = admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();
        assert_eq!(before, (state.param_hash("theta"), state.param_hash("phi"), state.step));
        assert_eq!(recs.len(), 1); // the step-0 record only
    }

    #[test]
    fn zero_learning_rates_keep_parameters() {
        let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::AdmpKlTractable, 2);
        cfg.iterations = 3;
        cfg.lr_theta = 0.0;
        cfg.lr_phi = 0.0;
        cfg.lr_xi = 0.0;
        let before = (
            state.param_hash("theta"),
            state.param_hash("phi"),
            state.param_hash("xi"),
        );
        admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();
        let after = (
            state.param_hash("theta"),
            state.param_hash("phi"),
            state.param_hash("xi"),
        );
        assert_eq!(before, after);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn metrics_stream_is_bitwise_deterministic() {
        let run = || {
            let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::AdmpJsdLoc, 5);
            cfg.iterations = 6;
            cfg.metrics_every = 2;
            let recs = admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();
            recs.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a.len(), 4); // step 0 plus steps 2, 4, 6
        assert_eq!(a, run());
    }

    #[test]
    fn gan_never_touches_phi_elbo_never_touches_xi() {
        let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::Gan, 3);
        cfg.iterations = 3;
        let phi_before = state.param_hash("phi");
        let theta_before = state.param_hash("theta");
        admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();
        assert_eq!(phi_before, state.param_hash("phi"));
        // The generative factors here are frozen truth, so theta is also
        // untouched despite the variant wanting updates.
        assert_eq!(theta_before, state.param_hash("theta"));

        let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::Elbo, 3);
        cfg.iterations = 3;
        assert!(state.adversaries.is_empty());
        let phi_before = state.param_hash("phi");
        admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();
        assert_eq!(state.param_hash("xi"), {
            let (_, s2, ..) = lingauss_setup(ObjectiveVariant::Elbo, 3);
            s2.param_hash("xi")
        });
        assert_ne!(phi_before, state.param_hash("phi"));
    }

    #[test]
    fn nan_abort_names_factor_and_step() {
        let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::Elbo, 4);
        cfg.iterations = 2;
        // Poison the prior mean so the first pass blows up.
        if let FactorParams::Gaussian { mean: MeanSource::Const(t), .. } = &mut state.gen.factors[0]
        {
            t.data_mut()[0] = Real::NAN;
        }
        let err = admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap_err();
        match err {
            TrainError::NanAbort { step, factor, .. } => {
                assert_eq!(step, 0);
                assert!(!factor.is_empty());
            }
            other => panic!("expected NanAbort, got {other}"),
        }
    }

    #[test]
    fn elbo_recovers_conjugate_posterior_quickly() {
        // Short smoke version of the posterior-recovery contract: after a few
        // hundred steps the q mean moves clearly toward the oracle.
        let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::Elbo, 6);
        cfg.iterations = 800;
        cfg.lr_phi = 1e-2;
        cfg.lr_theta = 0.0;
        admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();
        // Evaluate q(z|x) mean against the conjugate posterior on a small grid.
        let mut worst = 0.0f64;
        for &x in &[-1.0, 0.0, 1.0] {
            let (mu, _) =
                conjugate_gaussian_posterior(0.0, LINGAUSS_PRIOR_VAR, LINGAUSS_NOISE_VAR, x)
                    .unwrap();
            let tape = Tape::new();
            let b = state.inf.factors[0].bind(&tape);
            let xs = tape.leaf(Tensor::new(vec![1, 1], vec![x]).unwrap());
            let m = b
                .sample_gaussian_with_eps(&[xs], Tensor::zeros(&[1, 1]))
                .unwrap()
                .value()
                .item()
                .unwrap();
            worst = worst.max((m - mu).abs());
        }
        assert!(worst < 0.15, "worst posterior-mean error {worst}");
    }

    #[test]
    fn adversary_only_steps_approach_analytic_discriminator() {
        // Frozen theta/phi, n_D-heavy: the discriminator should approach the
        // optimum D = p/(p+q) on the joint tuple (short version; the full
        // tolerance is covered by the acceptance gate).
        let graph = ModelGraph::new(
            vec![VariableDecl {
                name: "x".into(),
                dim: 1,
                role: Role::Observed,
                support: Support::Real,
            }],
            vec![("x".into(), vec![])],
        )
        .unwrap();
        let gen = GenerativeModel {
            factors: vec![FactorParams::Gaussian {
                dim: 1,
                mean: MeanSource::Const(Tensor::zeros(&[1])),
                log_std: StdSource::Fixed(1.0),
                trainable: false,
            }],
        };
        let inverse = derive_inverse_factorization(&graph, &[0].into()).unwrap();
        let inf = InferenceModel { inverse, factors: vec![] };
        let mut cfg = TrainConfig::new(ObjectiveVariant::Gan);
        cfg.minibatch = 256;
        cfg.n_d = 50;
        cfg.iterations = 8;
        cfg.lr_theta = 0.0;
        cfg.lr_xi = 3e-3;
        cfg.adversary_hidden = vec![32];
        cfg.seed = 9;
        let mut state = TrainState::new(&graph, gen, inf, &cfg).unwrap();
        // Data from N(2, 1): the analytic optimum is a logistic in x.
        let mut rng = Rng::seed_from_u64(4242);
        use rand_distr::StandardNormal;
        let xs: Vec<Real> = (0..2048).map(|_| rng.sample::<Real, _>(StandardNormal) + 2.0).collect();
        let data =
            Dataset::new([(0usize, Tensor::new(vec![2048, 1], xs).unwrap())].into()).unwrap();
        admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();

        let pdf = |mu: Real, x: Real| (-0.5 * (x - mu) * (x - mu)).exp();
        let oracle = crate::adversary::AnalyticDiscriminator::new(
            move |x| pdf(2.0, x), // class 1 = data
            move |x| pdf(0.0, x),
        );
        let tape = Tape::new();
        let b = state.adversaries[0].bind(&tape);
        let grid: Vec<Real> = (0..25).map(|i| -1.0 + 4.0 * i as Real / 24.0).collect();
        let g = tape.leaf(Tensor::new(vec![grid.len(), 1], grid.clone()).unwrap());
        let d = b.discriminate(g).unwrap().value();
        let mad: Real = grid
            .iter()
            .zip(d.data())
            .map(|(&x, &dv)| (dv - oracle.eval(x)).abs())
            .sum::<Real>()
            / grid.len() as Real;
        assert!(mad < 0.1, "mean absolute deviation {mad}");
    }

    #[test]
    fn masks_complete_policy_rejects_partial_data() {
        let (graph, mut state, cfg, data) = lingauss_setup(ObjectiveVariant::Elbo, 7);
        let data = data.with_masks(
            (0..512).map(|i| vec![i % 2 == 0]).collect(),
        )
        .unwrap();
        let err = admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap_err();
        assert!(err.to_string().contains("mask"), "{err}");
    }

    #[test]
    fn masks_drop_policy_trains_on_observed_rows() {
        let (graph, mut state, mut cfg, data) = lingauss_setup(ObjectiveVariant::Elbo, 8);
        cfg.iterations = 2;
        cfg.mask_policy = MaskPolicy::Drop;
        let data = data.with_masks((0..512).map(|i| vec![i % 4 != 0]).collect()).unwrap();
        admp_train(&graph, &mut state, &cfg, &data, None, None).unwrap();
        assert_eq!(state.step, 2);
    }

    #[test]
    fn apply_mask_caches_and_validates() {
        // Two-leaf model: z -> x1, z -> x2.
        let graph = ModelGraph::new(
            vec![
                VariableDecl { name: "z".into(), dim: 1, role: Role::Latent, support: Support::Real },
                VariableDecl { name: "x1".into(), dim: 1, role: Role::Observed, support: Support::Real },
                VariableDecl { name: "x2".into(), dim: 1, role: Role::Observed, support: Support::Real },
            ],
            vec![
                ("z".into(), vec![]),
                ("x1".into(), vec!["z".into()]),
                ("x2".into(), vec!["z".into()]),
            ],
        )
        .unwrap();
        let base = derive_inverse_factorization(&graph, &[1, 2].into()).unwrap();
        let mut cache = InverseCache::new(base.clone());

        // Full mask: identity.
        let full = apply_mask(&graph, &mut cache, &[true, true]).unwrap();
        assert_eq!(full, &base);

        // One leaf masked: re-derived factorization passes the d-sep check.
        let partial = apply_mask(&graph, &mut cache, &[true, false]).unwrap().clone();
        assert_eq!(partial.observed, vec![1]);
        assert!(crate::graph::check_inverse(&graph, &partial).is_empty());
        // x2 became latent and needs a factor too.
        assert!(partial.order.contains(&2));

        // All masked: error.
        let err = apply_mask(&graph, &mut cache, &[false, false]).unwrap_err();
        assert!(err.to_string().contains("mask"), "{err}");

        // Cache hit returns the same derivation.
        let again = apply_mask(&graph, &mut cache, &[true, false]).unwrap();
        assert_eq!(again, &partial);
    }

    #[test]
    fn gradcheck_all_variants_on_lingauss() {
        for variant in ObjectiveVariant::ALL {
            let (graph, state, cfg, data) = lingauss_setup(variant, 11);
            let obs = data.batch(&(0..16).collect::<Vec<_>>());
            let rows = gradcheck(&graph, &state, &cfg, &obs, 1e-5).unwrap();
            assert_eq!(rows.len(), 3);
            for row in &rows {
                if let Some(err) = row.max_rel_err {
                    assert!(err < 1e-4, "{variant}: group {} rel err {err}", row.group);
                }
            }
            // Variant wiring shows up as n/a rows.
            let by_group: BTreeMap<&str, &GradCheckRow> =
                rows.iter().map(|r| (r.group.as_str(), r)).collect();
            // theta is frozen truth in this setup, so it reports n/a.
            assert!(by_group["theta"].max_rel_err.is_none());
            assert_eq!(by_group["phi"].max_rel_err.is_none(), !variant.updates_inference());
            assert_eq!(by_group["xi"].max_rel_err.is_none(), !variant.uses_adversaries());
        }
    }

    #[test]
    fn gradcheck_negative_control_fails_named_group() {
        let (graph, state, cfg, data) = lingauss_setup(ObjectiveVariant::Elbo, 12);
        let obs = data.batch(&(0..8).collect::<Vec<_>>());
        let rows = gradcheck_with_flipped_group(&graph, &state, &cfg, &obs, 1e-5, "phi").unwrap();
        let phi = rows.iter().find(|r| r.group == "phi").unwrap();
        assert!(phi.max_rel_err.unwrap() > 1e-2, "flip went unnoticed: {:?}", phi.max_rel_err);
    }

    #[test]
    fn update_reproducibility_is_bitwise() {
        let run = || {
            let (graph, mut state, cfg, data) = lingauss_setup(ObjectiveVariant::AdmpKlTractable, 13);
            let obs = data.batch(&(0..32).collect::<Vec<_>>());
            let units = update_units(cfg.variant, &graph, &state.inf);
            update_factor(&graph, &mut state, &cfg, &units[0], &obs, 999).unwrap();
            (state.param_hash("theta"), state.param_hash("phi"), state.param_hash("xi"))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exact_local_divergence_descends_monotonically() {
        // Binary chain a -> b, b observed. p fixed; q(a|b) parameterized by
        // logits. Analytic discriminators make the local objective the exact
        // sum of tuple JSDs, computed here by enumeration; small gradient
        // steps must descend monotonically to (near) zero.
        use crate::oracle::{div_loc_exact, enumerate, Cpt, EnumerableModel, JointTable};
        let graph = ModelGraph::new(
            vec![
                VariableDecl { name: "a".into(), dim: 1, role: Role::Latent, support: Support::Binary },
                VariableDecl { name: "b".into(), dim: 1, role: Role::Observed, support: Support::Binary },
            ],
            vec![("a".into(), vec![]), ("b".into(), vec!["a".into()])],
        )
        .unwrap();
        let p = EnumerableModel {
            graph: graph.clone(),
            tables: vec![
                Cpt { parent_card: vec![], k: 2, probs: vec![0.3, 0.7] },
                Cpt { parent_card: vec![2], k: 2, probs: vec![0.8, 0.2, 0.25, 0.75] },
            ],
        };
        let p_joint = enumerate(&p).unwrap();
        let p_b = p_joint.marginal(&[1]);

        // q(X) = p(b) * q(a|b); four logits parameterize q(a|b).
        let q_joint = |w: &[Real]| -> JointTable {
            let mut probs = vec![0.0; 4];
            for b in 0..2 {
                let (l0, l1) = (w[2 * b], w[2 * b + 1]);
                let m = l0.max(l1);
                let z = (l0 - m).exp() + (l1 - m).exp();
                for a in 0..2 {
                    let qa = (w[2 * b + a] - m).exp() / z;
                    probs[a * 2 + b] = p_b.probs[b] * qa;
                }
            }
            JointTable { cards: vec![2, 2], probs }
        };
        let div = |w: &[Real]| div_loc_exact(&graph, &p_joint, &q_joint(w));

        let mut w = vec![0.0; 4]; // uniform q(a|b)
        let mut last = div(&w);
        let first = last;
        let lr = 1e-3;
        let h = 1e-6;
        for _ in 0..40_000 {
            let mut g = vec![0.0; 4];
            for i in 0..4 {
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                g[i] = (div(&wp) - div(&wm)) / (2.0 * h);
            }
            // Larger effective steps via normalized gradient at fixed lr keep
            // the run short while staying in the monotone regime.
            for i in 0..4 {
                w[i] -= lr * g[i] / 1e-3_f64.max(g.iter().map(|x| x * x).sum::<Real>().sqrt());
            }
            let now = div(&w);
            assert!(now <= last + 1e-12, "divergence rose: {last} -> {now}");
            last = now;
            if now < 1e-3 {
                break;
            }
        }
        assert!(last < 1e-3, "final divergence {last} (started at {first})");
    }
}
