//! Experiment runner: train and evaluate adversarial message-passing models
//! described by plain-text model files.
//!
//! Exit codes: 0 success, 2 for model-file or configuration errors, 3 when
//! training aborts on a non-finite value, 1 for everything else.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use admp_core::checkpoint::{load_checkpoint, save_checkpoint};
use admp_core::data::Dataset;
use admp_core::graph::{derive_inverse_factorization, ModelGraph, Role};
use admp_core::modelspec::{BuiltModel, ModelSpec, OracleSpec};
use admp_core::objectives::ObjectiveVariant;
use admp_core::oracle::posterior_recovery_report;
use admp_core::trainer::{
    admp_train, gradcheck, MaskPolicy, MetricsRecord, TrainConfig, TrainState,
};
use admp_core::{Real, Rng, TrainError};

#[derive(Parser)]
#[command(name = "admp", version, about = "Adversarial message passing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and stream metrics to the output directory.
    Train(TrainArgs),
    /// Compare a trained inference model against the closed-form posterior.
    Eval(EvalArgs),
    /// Export the model graph and its inverse factorization.
    Graph(GraphArgs),
    /// Check backward gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train several variants and seeds and tabulate the outcomes.
    Compare(CompareArgs),
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Model file to load.
    #[arg(long)]
    spec: PathBuf,
    /// Training objective.
    #[arg(long)]
    variant: Option<String>,
    /// Minibatch steps to run.
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    minibatch: usize,
    /// Bottom-up particles per datum.
    #[arg(long = "particles-L", default_value_t = 1)]
    particles_l: usize,
    /// Top-down sample multiplier.
    #[arg(long = "particles-K", default_value_t = 1)]
    particles_k: usize,
    /// Adversary steps per update unit.
    #[arg(long = "nd", default_value_t = 1)]
    n_d: usize,
    #[arg(long = "lr-theta", default_value_t = 1e-3)]
    lr_theta: Real,
    #[arg(long = "lr-phi", default_value_t = 1e-3)]
    lr_phi: Real,
    #[arg(long = "lr-xi", default_value_t = 1e-3)]
    lr_xi: Real,
    /// Treat these variables as observed, overriding the model file
    /// (comma-separated names).
    #[arg(long, value_delimiter = ',')]
    observed: Option<Vec<String>>,
    /// How per-datum observation masks are treated (complete | drop).
    #[arg(long = "mask-policy", default_value = "complete")]
    mask_policy: String,
    /// Metrics cadence in steps.
    #[arg(long = "metrics-every", default_value_t = 100)]
    metrics_every: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Output directory (metrics.jsonl, manifest.json, report.json,
    /// metrics.csv, final.admp).
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Checkpoint to evaluate; a freshly initialized model when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for report.json and recovery.csv; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Posterior samples per grid point.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Treat these variables as observed, overriding the model file.
    #[arg(long, value_delimiter = ',')]
    observed: Option<Vec<String>>,
    /// Directory for graph.dot; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: Real,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Variants to run (comma-separated); all of them by default.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Seeds to run per variant.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    seeds: Vec<u64>,
    /// Output directory (per-cell subdirectories, report.json, compare.csv).
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

fn from_train_error(e: TrainError) -> Failure {
    let code = match &e {
        TrainError::NanAbort { .. } => 3,
        TrainError::Config(_) => 2,
        _ => 1,
    };
    fail(code, e.to_string())
}

fn load_spec(path: &Path) -> CliResult<ModelSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(1, format!("{}: {e}", path.display())))?;
    ModelSpec::parse(&text).map_err(|e| fail(2, format!("{}: {e}", path.display())))
}

fn parse_variant(s: &str) -> CliResult<ObjectiveVariant> {
    s.parse().map_err(|e: TrainError| fail(2, e.to_string()))
}

struct Prepared {
    spec: ModelSpec,
    built: BuiltModel,
    data: Dataset,
    cfg: TrainConfig,
}

fn prepare(common: &CommonOpts) -> CliResult<Prepared> {
    let spec = load_spec(&common.spec)?;
    let variant = parse_variant(
        common
            .variant
            .as_deref()
            .ok_or_else(|| fail(2, "--variant is required for this command"))?,
    )?;
    let mut cfg = TrainConfig::new(variant);
    cfg.iterations = common.iters;
    cfg.seed = common.seed;
    cfg.minibatch = common.minibatch;
    cfg.particles_l = common.particles_l;
    cfg.particles_k = common.particles_k;
    cfg.n_d = common.n_d;
    cfg.lr_theta = common.lr_theta;
    cfg.lr_phi = common.lr_phi;
    cfg.lr_xi = common.lr_xi;
    cfg.metrics_every = common.metrics_every;
    cfg.mask_policy = common
        .mask_policy
        .parse::<MaskPolicy>()
        .map_err(from_train_error)?;
    cfg.validate().map_err(from_train_error)?;
    let mut rng = Rng::seed_from_u64(cfg.seed ^ 0x6275_696c);
    let built = spec
        .build(common.observed.as_deref(), &mut rng)
        .map_err(from_train_error)?;
    let data = spec.dataset().map_err(from_train_error)?;
    Ok(Prepared { spec, built, data, cfg })
}

#[derive(serde::Serialize)]
struct RunManifest<'a> {
    spec_path: String,
    model: &'a Option<String>,
    config: &'a TrainConfig,
    out: String,
    build: &'static str,
}

/// Oracle metrics closure for conjugate scalar models: mean quadrature KL and
/// mean squared MMD of q against the exact posterior over a small grid.
fn conjugate_metrics(
    spec: &ModelSpec,
) -> Option<impl Fn(&ModelGraph, &TrainState) -> BTreeMap<String, Real>> {
    let (prior_mean, prior_var, noise_var) = match spec.oracle {
        Some(OracleSpec::Conjugate { prior_mean, prior_var, noise_var }) => {
            (prior_mean, prior_var, noise_var)
        }
        _ => return None,
    };
    Some(move |graph: &ModelGraph, state: &TrainState| {
        let grid = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let mut out = BTreeMap::new();
        if let Ok(rep) = posterior_recovery_report(
            graph,
            &state.inf,
            prior_mean,
            prior_var,
            noise_var,
            &grid,
            2000,
            0x6f72_61,
        ) {
            if let Some(kl) = rep.mean_kl {
                out.insert("mean_kl".to_string(), kl);
            }
            let mmd =
                rep.entries.iter().map(|e| e.mmd2).sum::<Real>() / rep.entries.len() as Real;
            out.insert("mean_mmd2".to_string(), mmd);
        }
        out
    })
}

fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> std::io::Result<()> {
    let mut keys: Vec<String> = Vec::new();
    for r in records {
        for k in r.losses.keys().chain(r.disc_mean.keys()) {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
        if let Some(o) = &r.oracle {
            for k in o.keys() {
                if !keys.contains(k) {
                    keys.push(k.clone());
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,{}", keys.join(","))?;
    for r in records {
        let mut row = vec![r.step.to_string()];
        for k in &keys {
            let v = r
                .losses
                .get(k)
                .or_else(|| r.disc_mean.get(k))
                .or_else(|| r.oracle.as_ref().and_then(|o| o.get(k)));
            row.push(v.map(|v| v.to_string()).unwrap_or_default());
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn run_training(
    prepared: &Prepared,
    spec_path: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult<Vec<MetricsRecord>> {
    let Prepared { spec, built, data, cfg } = prepared;
    std::fs::create_dir_all(out).map_err(|e| fail(1, format!("{}: {e}", out.display())))?;
    let manifest = RunManifest {
        spec_path: spec_path.display().to_string(),
        model: &spec.name,
        config: cfg,
        out: out.display().to_string(),
        build: env!("CARGO_PKG_VERSION"),
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
    .map_err(|e| fail(1, e.to_string()))?;

    let mut state = TrainState::new(&built.graph, built.gen.clone(), built.inf.clone(), cfg)
        .map_err(from_train_error)?;
    if let Some(ck) = resume {
        load_checkpoint(&mut state, &built.graph, ck).map_err(from_train_error)?;
    }

    let metrics_path = out.join("metrics.jsonl");
    let mut jsonl = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| fail(1, format!("{}: {e}", metrics_path.display())))?;
    let mut sink = |rec: &MetricsRecord| -> std::io::Result<()> {
        writeln!(jsonl, "{}", serde_json::to_string(rec).expect("record serializes"))
    };
    let oracle = conjugate_metrics(spec);
    let oracle_ref: Option<&dyn Fn(&ModelGraph, &TrainState) -> BTreeMap<String, Real>> =
        oracle.as_ref().map(|f| f as _);
    let records = admp_train(&built.graph, &mut state, cfg, data, oracle_ref, Some(&mut sink))
        .map_err(from_train_error)?;

    save_checkpoint(&state, &built.graph, out.join("final.admp")).map_err(from_train_error)?;
    write_metrics_csv(&out.join("metrics.csv"), &records).map_err(|e| fail(1, e.to_string()))?;
    let report = serde_json::json!({
        "variant": cfg.variant.name(),
        "steps": state.step,
        "final": records.last().map(|r| serde_json::to_value(r).unwrap()),
    });
    std::fs::write(out.join("report.json"), report.to_string() + "\n")
        .map_err(|e| fail(1, e.to_string()))?;
    Ok(records)
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let prepared = prepare(&args.common)?;
    let records = run_training(&prepared, &args.common.spec, &args.out, args.resume.as_deref())?;
    println!(
        "trained {} for {} steps; {} metrics records in {}",
        prepared.cfg.variant.name(),
        prepared.cfg.iterations,
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let prepared = prepare(&args.common)?;
    let (prior_mean, prior_var, noise_var) = match prepared.spec.oracle {
        Some(OracleSpec::Conjugate { prior_mean, prior_var, noise_var }) => {
            (prior_mean, prior_var, noise_var)
        }
        _ => {
            return Err(fail(
                2,
                "eval needs a model file with a conjugate oracle block",
            ))
        }
    };
    let built = &prepared.built;
    let mut state =
        TrainState::new(&built.graph, built.gen.clone(), built.inf.clone(), &prepared.cfg)
            .map_err(from_train_error)?;
    if let Some(ck) = &args.checkpoint {
        load_checkpoint(&mut state, &built.graph, ck).map_err(from_train_error)?;
    }
    let grid = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0];
    let report = posterior_recovery_report(
        &built.graph,
        &state.inf,
        prior_mean,
        prior_var,
        noise_var,
        &grid,
        args.samples,
        prepared.cfg.seed,
    )
    .map_err(from_train_error)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(out) => {
            std::fs::create_dir_all(out).map_err(|e| fail(1, e.to_string()))?;
            std::fs::write(out.join("report.json"), json + "\n")
                .map_err(|e| fail(1, e.to_string()))?;
            let mut csv = String::from(
                "observation,q_mean,q_std,oracle_mean,oracle_std,kl_q_posterior,mmd2\n",
            );
            for e in &report.entries {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    e.observation,
                    e.q_mean,
                    e.q_std,
                    e.oracle_mean,
                    e.oracle_std,
                    e.kl_q_posterior.map(|v| v.to_string()).unwrap_or_default(),
                    e.mmd2
                ));
            }
            std::fs::write(out.join("recovery.csv"), csv).map_err(|e| fail(1, e.to_string()))?;
            println!("wrote {}", out.join("report.json").display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn dot_export(graph: &ModelGraph) -> String {
    let mut out = String::from("digraph model {\n  rankdir=TB;\n");
    for v in 0..graph.num_vars() {
        let decl = graph.var(v);
        let shape = if decl.role == Role::Observed { "box" } else { "ellipse" };
        out.push_str(&format!(
            "  {} [shape={shape}, label=\"{} [{}]\"];\n",
            decl.name, decl.name, decl.dim
        ));
    }
    for v in 0..graph.num_vars() {
        for &p in graph.parents(v) {
            out.push_str(&format!("  {} -> {};\n", graph.var(p).name, graph.var(v).name));
        }
    }
    out.push_str("}\n");
    out
}

fn cmd_graph(args: &GraphArgs) -> CliResult<()> {
    let spec = load_spec(&args.spec)?;
    let graph = spec.graph().map_err(from_train_error)?;
    let observed: std::collections::BTreeSet<usize> = match &args.observed {
        Some(names) => names
            .iter()
            .filter(|n| !n.is_empty())
            .map(|n| graph.lookup(n).map_err(|e| fail(2, e.to_string())))
            .collect::<CliResult<_>>()?,
        None => graph.observed_vars().into_iter().collect(),
    };
    let dot = dot_export(&graph);
    match &args.out {
        Some(out) => {
            std::fs::create_dir_all(out).map_err(|e| fail(1, e.to_string()))?;
            std::fs::write(out.join("graph.dot"), &dot).map_err(|e| fail(1, e.to_string()))?;
            println!("wrote {}", out.join("graph.dot").display());
        }
        None => print!("{dot}"),
    }
    if observed.is_empty() {
        eprintln!("warning: no observed variables; there is no inverse factorization to derive");
        return Ok(());
    }
    let inv = derive_inverse_factorization(&graph, &observed)
        .map_err(|e| from_train_error(e.into()))?;
    println!("inverse factorization (processing order):");
    println!("{:<12} {}", "latent", "conditioning set");
    for &l in &inv.order {
        let cond = inv
            .cond_set_of(l)
            .map(|set| {
                set.iter().map(|&c| graph.var(c).name.clone()).collect::<Vec<_>>().join(" ")
            })
            .unwrap_or_default();
        println!("{:<12} {}", graph.var(l).name, cond);
    }
    if !inv.disconnected.is_empty() {
        let names: Vec<String> =
            inv.disconnected.iter().map(|&v| graph.var(v).name.clone()).collect();
        println!("disconnected from the observations: {}", names.join(" "));
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let prepared = prepare(&args.common)?;
    let built = &prepared.built;
    let state = TrainState::new(&built.graph, built.gen.clone(), built.inf.clone(), &prepared.cfg)
        .map_err(from_train_error)?;
    let take = prepared.data.len().min(prepared.cfg.minibatch.min(16));
    let obs = prepared.data.batch(&(0..take).collect::<Vec<_>>());
    let rows = gradcheck(&built.graph, &state, &prepared.cfg, &obs, args.h)
        .map_err(from_train_error)?;
    println!("{:<8} {:>8} {:>14}", "group", "params", "max rel err");
    let mut worst: Option<Real> = None;
    for row in &rows {
        let shown = match row.max_rel_err {
            Some(e) => {
                worst = Some(worst.map_or(e, |w: Real| w.max(e)));
                format!("{e:.3e}")
            }
            None => "n/a".to_string(),
        };
        println!("{:<8} {:>8} {:>14}", row.group, row.params, shown);
    }
    if let Some(w) = worst {
        if w >= 1e-4 {
            return Err(fail(1, format!("gradient check failed: max rel err {w:.3e} >= 1e-4")));
        }
    }
    Ok(())
}

#[derive(serde::Serialize, Clone)]
struct CompareCell {
    variant: String,
    seed: u64,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_losses: Option<BTreeMap<String, Real>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<BTreeMap<String, Real>>,
}

/// True when the variant's objective needs every generative density in closed
/// form, which an implicit factor cannot provide.
fn needs_explicit_likelihood(variant: ObjectiveVariant) -> bool {
    matches!(variant, ObjectiveVariant::Elbo | ObjectiveVariant::AdmpKlTractable)
}

fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let spec = load_spec(&args.common.spec)?;
    let has_implicit = {
        let mut rng = Rng::seed_from_u64(0);
        let built = spec
            .build(args.common.observed.as_deref(), &mut rng)
            .map_err(from_train_error)?;
        built.gen.factors.iter().any(|f| !f.is_explicit())
    };
    let variants: Vec<ObjectiveVariant> = match &args.variants {
        Some(names) => names
            .iter()
            .map(|n| parse_variant(n))
            .collect::<CliResult<_>>()?,
        None => ObjectiveVariant::ALL.to_vec(),
    };
    std::fs::create_dir_all(&args.out).map_err(|e| fail(1, e.to_string()))?;

    let threads: usize = std::env::var("ADMP_THREADS")
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| fail(2, format!("ADMP_THREADS must be a positive integer, got '{v}'")))
        })
        .transpose()?
        .unwrap_or(4)
        .max(1);

    // Work queue of (variant, seed) cells, drained by capped worker threads.
    let jobs: Vec<(ObjectiveVariant, u64)> = variants
        .iter()
        .flat_map(|&v| args.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let queue = std::sync::Mutex::new(jobs.into_iter());
    let results = std::sync::Mutex::new(Vec::<CompareCell>::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().next();
                let Some((variant, seed)) = job else { break };
                let cell = run_compare_cell(args, variant, seed, has_implicit);
                results.lock().unwrap().push(cell);
            });
        }
    });
    let mut cells = results.into_inner().unwrap();
    cells.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));

    let json = serde_json::to_string_pretty(&cells).expect("cells serialize");
    std::fs::write(args.out.join("report.json"), json + "\n")
        .map_err(|e| fail(1, e.to_string()))?;
    let mut csv = String::from("variant,seed,status,key,value\n");
    for c in &cells {
        let rows: Vec<(&str, Real)> = c
            .final_losses
            .iter()
            .flatten()
            .chain(c.oracle.iter().flatten())
            .map(|(k, &v)| (k.as_str(), v))
            .collect();
        if rows.is_empty() {
            csv.push_str(&format!("{},{},{},,\n", c.variant, c.seed, c.status));
        }
        for (k, v) in rows {
            csv.push_str(&format!("{},{},{},{},{}\n", c.variant, c.seed, c.status, k, v));
        }
    }
    std::fs::write(args.out.join("compare.csv"), csv).map_err(|e| fail(1, e.to_string()))?;
    for c in &cells {
        println!("{:<20} seed {:<3} {}", c.variant, c.seed, c.status);
    }
    Ok(())
}

fn run_compare_cell(
    args: &CompareArgs,
    variant: ObjectiveVariant,
    seed: u64,
    has_implicit: bool,
) -> CompareCell {
    let base = CompareCell {
        variant: variant.name().to_string(),
        seed,
        status: String::new(),
        final_losses: None,
        oracle: None,
    };
    if has_implicit && needs_explicit_likelihood(variant) {
        return CompareCell {
            status: "skipped: objective needs an explicit likelihood".into(),
            ..base
        };
    }
    let mut common = args.common.clone();
    common.variant = Some(variant.name().to_string());
    common.seed = seed;
    let prepared = match prepare(&common) {
        Ok(p) => p,
        Err(e) => return CompareCell { status: format!("failed: {}", e.msg), ..base },
    };
    let out = args.out.join(format!("{}-s{}", variant.name(), seed));
    match run_training(&prepared, &common.spec, &out, None) {
        Ok(records) => {
            let last = records.last();
            CompareCell {
                status: "ok".into(),
                final_losses: last.map(|r| r.losses.clone()),
                oracle: last.and_then(|r| r.oracle.clone()),
                ..base
            }
        }
        Err(e) => CompareCell { status: format!("failed: {}", e.msg), ..base },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
