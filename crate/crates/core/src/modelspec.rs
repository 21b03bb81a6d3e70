//! Line-oriented model specifications: parse, serialize and build runnable
//! models.
//!
//! A spec is a sequence of blocks. A block starts with an unindented header
//! line (`model`, `var`, `factor`, `inverse`, `oracle`, `data`) and continues
//! with indented `key value...` lines; `#` starts a comment. Errors carry the
//! line and column of the offending token. Parsing then serializing then
//! parsing again yields a structurally identical spec.
//!
//! ```text
//! var z
//!   role latent
//! var x
//!   role observed
//! factor z
//!   family gaussian
//!   mean const 0
//!   std fixed 1
//! factor x <- z
//!   family gaussian
//!   mean identity
//!   std fixed 0.5
//! ```

use std::collections::{BTreeMap, BTreeSet};

use crate::data::{
    lingauss_dataset, mini_digits_dataset, pinwheel_dataset, sample_observed, Dataset,
};
use crate::densities::{FactorParams, LogitSource, MeanSource, NoiseKind, StdSource};
use crate::error::TrainError;
use crate::graph::{
    check_inverse, derive_inverse_factorization, ModelGraph, Role, Support, VariableDecl,
};
use crate::model::{GenerativeModel, InferenceModel};
use crate::nn::Activation;
use crate::{Mlp, Real, Rng, Tensor};

/// Parse error anchored to a source position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}, column {col}: {msg}")]
pub struct SpecError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl From<SpecError> for TrainError {
    fn from(e: SpecError) -> Self {
        TrainError::Config(e.to_string())
    }
}

/// Where a Gaussian mean comes from, declaratively.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanSpec {
    Const(Vec<Real>),
    Identity,
    /// Hidden-layer sizes of a tanh network over the parents.
    Net(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StdSpec {
    Fixed(Real),
    Param(Vec<Real>),
    /// Log-std read from the second half of the mean network's output.
    Net,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogitsSpec {
    Const(Vec<Real>),
    Net(Vec<usize>),
}

/// Declarative distribution family of one factor.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilySpec {
    Gaussian { mean: MeanSpec, std: StdSpec },
    Bernoulli { logits: LogitsSpec },
    Categorical { logits: LogitsSpec },
    Implicit { hidden: Vec<usize>, noise_dim: usize, noise: NoiseKind },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorBlock {
    pub child: String,
    pub parents: Vec<String>,
    pub family: FamilySpec,
    pub trainable: bool,
}

/// Override for one latent's inference factor: its conditioning set and/or its
/// family (the default is a tanh-net Gaussian over the derived set).
#[derive(Debug, Clone, PartialEq)]
pub struct InverseBlock {
    pub latent: String,
    pub given: Option<Vec<String>>,
    pub family: Option<FamilySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleSpec {
    /// 1-D conjugate Gaussian posterior for `z ~ N(m0, v0); x|z ~ N(z, v)`.
    Conjugate { prior_mean: Real, prior_var: Real, noise_var: Real },
    /// Model is small and discrete; exact enumeration applies.
    Enumerable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    /// Sample the spec's own generative model (built with the data seed).
    Model,
    Lingauss,
    Pinwheel,
    MiniDigits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub n: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec { source: DataSource::Model, n: 1024, seed: 0 }
    }
}

/// A parsed model specification.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub name: Option<String>,
    pub vars: Vec<VariableDecl>,
    pub factors: Vec<FactorBlock>,
    pub inverses: Vec<InverseBlock>,
    pub oracle: Option<OracleSpec>,
    pub data: Option<DataSpec>,
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// A tokenized line: 1-based line number and `(1-based column, token)` pairs.
struct Line<'a> {
    no: usize,
    toks: Vec<(usize, &'a str)>,
}

fn tokenize(no: usize, text: &str) -> Line<'_> {
    let body = match text.find('#') {
        Some(i) => &text[..i],
        None => text,
    };
    let mut toks = Vec::new();
    let mut col = 0;
    for (i, c) in body.char_indices() {
        if !c.is_whitespace() {
            if col == 0 || body[..i].ends_with(char::is_whitespace) {
                col = i + 1;
                toks.push((col, &body[i..i + 1]));
            } else {
                let last = toks.last_mut().expect("inside a token");
                let start = last.0 - 1;
                last.1 = &body[start..i + 1];
            }
        }
    }
    Line { no, toks }
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> SpecError {
    SpecError { line, col, msg: msg.into() }
}

impl<'a> Line<'a> {
    fn key(&self) -> &'a str {
        self.toks[0].1
    }

    fn rest(&self) -> &[(usize, &'a str)] {
        &self.toks[1..]
    }

    fn one(&self, what: &str) -> Result<&'a str, SpecError> {
        match self.rest() {
            [(_, v)] => Ok(v),
            [] => Err(err(self.no, self.toks[0].0, format!("'{}' needs {what}", self.key()))),
            [_, (c, t), ..] => Err(err(self.no, *c, format!("unexpected token '{t}'"))),
        }
    }

    fn floats(&self, skip: usize) -> Result<Vec<Real>, SpecError> {
        let vals = &self.rest()[skip..];
        if vals.is_empty() {
            return Err(err(self.no, self.toks[0].0, "expected one or more numbers"));
        }
        vals.iter()
            .map(|(c, t)| t.parse::<Real>().map_err(|_| err(self.no, *c, format!("'{t}' is not a number"))))
            .collect()
    }

    fn usizes(&self, skip: usize) -> Result<Vec<usize>, SpecError> {
        self.rest()[skip..]
            .iter()
            .map(|(c, t)| t.parse::<usize>().map_err(|_| err(self.no, *c, format!("'{t}' is not a size"))))
            .collect()
    }
}

fn parse_usize(l: &Line, what: &str) -> Result<usize, SpecError> {
    let v = l.one(what)?;
    v.parse()
        .map_err(|_| err(l.no, l.rest()[0].0, format!("'{v}' is not a size")))
}

fn parse_float(l: &Line, what: &str) -> Result<Real, SpecError> {
    let v = l.one(what)?;
    v.parse()
        .map_err(|_| err(l.no, l.rest()[0].0, format!("'{v}' is not a number")))
}

/// Parse the family-description keys shared by `factor` and `inverse` blocks.
#[derive(Default)]
struct FamilyKeys {
    family: Option<(usize, String)>,
    mean: Option<MeanSpec>,
    std: Option<StdSpec>,
    logits: Option<LogitsSpec>,
    net: Option<Vec<usize>>,
    noise_dim: Option<usize>,
    noise: Option<NoiseKind>,
}

impl FamilyKeys {
    /// Returns true when the key was consumed.
    fn take(&mut self, l: &Line) -> Result<bool, SpecError> {
        let dup = |l: &Line| err(l.no, l.toks[0].0, format!("duplicate key '{}'", l.key()));
        match l.key() {
            "family" => {
                if self.family.is_some() {
                    return Err(dup(l));
                }
                self.family = Some((l.no, l.one("a family name")?.to_string()));
            }
            "mean" => {
                if self.mean.is_some() {
                    return Err(dup(l));
                }
                let (c, kind) = l.rest().first().copied().ok_or_else(|| {
                    err(l.no, l.toks[0].0, "'mean' needs const|identity|net")
                })?;
                self.mean = Some(match kind {
                    "const" => MeanSpec::Const(l.floats(1)?),
                    "identity" => MeanSpec::Identity,
                    "net" => MeanSpec::Net(l.usizes(1)?),
                    other => return Err(err(l.no, c, format!("unknown mean source '{other}'"))),
                });
            }
            "std" => {
                if self.std.is_some() {
                    return Err(dup(l));
                }
                let (c, kind) = l.rest().first().copied().ok_or_else(|| {
                    err(l.no, l.toks[0].0, "'std' needs fixed|param|net")
                })?;
                self.std = Some(match kind {
                    "fixed" => {
                        let v = l.floats(1)?;
                        if v.len() != 1 {
                            return Err(err(l.no, c, "'std fixed' takes one number"));
                        }
                        StdSpec::Fixed(v[0])
                    }
                    "param" => StdSpec::Param(l.floats(1)?),
                    "net" => StdSpec::Net,
                    other => return Err(err(l.no, c, format!("unknown std source '{other}'"))),
                });
            }
            "logits" => {
                if self.logits.is_some() {
                    return Err(dup(l));
                }
                let (c, kind) = l.rest().first().copied().ok_or_else(|| {
                    err(l.no, l.toks[0].0, "'logits' needs const|net")
                })?;
                self.logits = Some(match kind {
                    "const" => LogitsSpec::Const(l.floats(1)?),
                    "net" => LogitsSpec::Net(l.usizes(1)?),
                    other => return Err(err(l.no, c, format!("unknown logits source '{other}'"))),
                });
            }
            "net" => {
                if self.net.is_some() {
                    return Err(dup(l));
                }
                self.net = Some(l.usizes(0)?);
            }
            "noise-dim" => {
                if self.noise_dim.is_some() {
                    return Err(dup(l));
                }
                self.noise_dim = Some(parse_usize(l, "a size")?);
            }
            "noise" => {
                if self.noise.is_some() {
                    return Err(dup(l));
                }
                self.noise = Some(match l.one("normal|uniform")? {
                    "normal" => NoiseKind::Normal,
                    "uniform" => NoiseKind::Uniform,
                    other => {
                        return Err(err(l.no, l.rest()[0].0, format!("unknown noise kind '{other}'")))
                    }
                });
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn finish(self, line: usize, col: usize) -> Result<FamilySpec, SpecError> {
        let (fline, fam) = self
            .family
            .ok_or_else(|| err(line, col, "block needs a 'family' line"))?;
        let forbid = |cond: bool, what: &str| -> Result<(), SpecError> {
            if cond {
                Err(err(fline, 1, format!("'{what}' does not apply to family '{fam}'")))
            } else {
                Ok(())
            }
        };
        Ok(match fam.as_str() {
            "gaussian" => {
                forbid(self.logits.is_some(), "logits")?;
                forbid(self.net.is_some(), "net")?;
                forbid(self.noise_dim.is_some(), "noise-dim")?;
                FamilySpec::Gaussian {
                    mean: self.mean.ok_or_else(|| err(fline, 1, "gaussian needs a 'mean' line"))?,
                    std: self.std.ok_or_else(|| err(fline, 1, "gaussian needs a 'std' line"))?,
                }
            }
            "bernoulli" | "categorical" => {
                forbid(self.mean.is_some(), "mean")?;
                forbid(self.std.is_some(), "std")?;
                forbid(self.net.is_some(), "net")?;
                let logits = self
                    .logits
                    .ok_or_else(|| err(fline, 1, format!("{fam} needs a 'logits' line")))?;
                if fam == "bernoulli" {
                    FamilySpec::Bernoulli { logits }
                } else {
                    FamilySpec::Categorical { logits }
                }
            }
            "implicit" => {
                forbid(self.mean.is_some(), "mean")?;
                forbid(self.std.is_some(), "std")?;
                forbid(self.logits.is_some(), "logits")?;
                FamilySpec::Implicit {
                    hidden: self.net.ok_or_else(|| err(fline, 1, "implicit needs a 'net' line"))?,
                    noise_dim: self
                        .noise_dim
                        .ok_or_else(|| err(fline, 1, "implicit needs a 'noise-dim' line"))?,
                    noise: self.noise.unwrap_or(NoiseKind::Normal),
                }
            }
            other => return Err(err(fline, 1, format!("unknown family '{other}'"))),
        })
    }
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<ModelSpec, SpecError> {
        let mut spec = ModelSpec::default();
        let lines: Vec<Line> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| {
                let body = l.split('#').next().unwrap_or("");
                !body.trim().is_empty()
            })
            .map(|(no, l)| tokenize(no, l))
            .collect();

        let mut i = 0;
        while i < lines.len() {
            let header = &lines[i];
            let (hcol, _) = header.toks[0];
            if hcol != 1 {
                return Err(err(header.no, hcol, "expected an unindented block header"));
            }
            // Collect the block's indented continuation lines.
            let mut body = Vec::new();
            i += 1;
            while i < lines.len() && lines[i].toks[0].0 > 1 {
                body.push(&lines[i]);
                i += 1;
            }
            match header.key() {
                "model" => {
                    if spec.name.is_some() {
                        return Err(err(header.no, 1, "duplicate 'model' block"));
                    }
                    spec.name = Some(header.one("a name")?.to_string());
                    if let Some(l) = body.first() {
                        return Err(err(l.no, l.toks[0].0, "'model' takes no body"));
                    }
                }
                "var" => spec.vars.push(parse_var(header, &body)?),
                "factor" => spec.factors.push(parse_factor(header, &body)?),
                "inverse" => spec.inverses.push(parse_inverse(header, &body)?),
                "oracle" => {
                    if spec.oracle.is_some() {
                        return Err(err(header.no, 1, "duplicate 'oracle' block"));
                    }
                    spec.oracle = Some(parse_oracle(header, &body)?);
                }
                "data" => {
                    if spec.data.is_some() {
                        return Err(err(header.no, 1, "duplicate 'data' block"));
                    }
                    spec.data = Some(parse_data(header, &body)?);
                }
                other => return Err(err(header.no, 1, format!("unknown block '{other}'"))),
            }
        }
        Ok(spec)
    }
}

fn parse_var(header: &Line, body: &[&Line]) -> Result<VariableDecl, SpecError> {
    let name = header.one("a variable name")?.to_string();
    let mut dim = None;
    let mut role = None;
    let mut support = None;
    for l in body {
        match l.key() {
            "dim" => {
                if dim.replace(parse_usize(l, "a size")?).is_some() {
                    return Err(err(l.no, l.toks[0].0, "duplicate key 'dim'"));
                }
            }
            "role" => {
                let r = match l.one("latent|observed")? {
                    "latent" => Role::Latent,
                    "observed" => Role::Observed,
                    other => {
                        return Err(err(l.no, l.rest()[0].0, format!("unknown role '{other}'")))
                    }
                };
                if role.replace(r).is_some() {
                    return Err(err(l.no, l.toks[0].0, "duplicate key 'role'"));
                }
            }
            "support" => {
                let (c, kind) = l.rest().first().copied().ok_or_else(|| {
                    err(l.no, l.toks[0].0, "'support' needs real|binary|categorical")
                })?;
                let s = match kind {
                    "real" => Support::Real,
                    "binary" => Support::Binary,
                    "categorical" => {
                        let ks = l.usizes(1)?;
                        match ks.as_slice() {
                            [k] if *k >= 2 => Support::Categorical(*k),
                            _ => return Err(err(l.no, c, "'categorical' needs one cardinality >= 2")),
                        }
                    }
                    other => return Err(err(l.no, c, format!("unknown support '{other}'"))),
                };
                if support.replace(s).is_some() {
                    return Err(err(l.no, l.toks[0].0, "duplicate key 'support'"));
                }
            }
            other => return Err(err(l.no, l.toks[0].0, format!("unknown var key '{other}'"))),
        }
    }
    Ok(VariableDecl {
        name,
        dim: dim.unwrap_or(1),
        role: role.unwrap_or(Role::Latent),
        support: support.unwrap_or(Support::Real),
    })
}

/// Header form: `factor child` or `factor child <- parent parent ...`.
fn parse_factor_header(header: &Line) -> Result<(String, Vec<String>), SpecError> {
    let rest = header.rest();
    let (_, child) = rest
        .first()
        .ok_or_else(|| err(header.no, header.toks[0].0, "'factor' needs a child variable"))?;
    let parents = match rest.get(1) {
        None => Vec::new(),
        Some((c, arrow)) => {
            if *arrow != "<-" {
                return Err(err(header.no, *c, format!("expected '<-', got '{arrow}'")));
            }
            if rest.len() == 2 {
                return Err(err(header.no, *c, "'<-' needs at least one parent"));
            }
            rest[2..].iter().map(|(_, p)| p.to_string()).collect()
        }
    };
    Ok((child.to_string(), parents))
}

fn parse_factor(header: &Line, body: &[&Line]) -> Result<FactorBlock, SpecError> {
    let (child, parents) = parse_factor_header(header)?;
    let mut keys = FamilyKeys::default();
    let mut trainable = None;
    for l in body {
        if keys.take(l)? {
            continue;
        }
        match l.key() {
            "trainable" => {
                let v = match l.one("true|false")? {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(err(l.no, l.rest()[0].0, format!("'{other}' is not a boolean")))
                    }
                };
                if trainable.replace(v).is_some() {
                    return Err(err(l.no, l.toks[0].0, "duplicate key 'trainable'"));
                }
            }
            other => return Err(err(l.no, l.toks[0].0, format!("unknown factor key '{other}'"))),
        }
    }
    Ok(FactorBlock {
        child,
        parents,
        family: keys.finish(header.no, 1)?,
        trainable: trainable.unwrap_or(true),
    })
}

fn parse_inverse(header: &Line, body: &[&Line]) -> Result<InverseBlock, SpecError> {
    let latent = header.one("a latent variable name")?.to_string();
    let mut keys = FamilyKeys::default();
    let mut given = None;
    for l in body {
        if l.key() == "given" {
            let g: Vec<String> = l.rest().iter().map(|(_, t)| t.to_string()).collect();
            if given.replace(g).is_some() {
                return Err(err(l.no, l.toks[0].0, "duplicate key 'given'"));
            }
            continue;
        }
        if !keys.take(l)? {
            return Err(err(l.no, l.toks[0].0, format!("unknown inverse key '{}'", l.key())));
        }
    }
    let family = if keys.family.is_some() {
        Some(keys.finish(header.no, 1)?)
    } else {
        None
    };
    Ok(InverseBlock { latent, given, family })
}

fn parse_oracle(header: &Line, body: &[&Line]) -> Result<OracleSpec, SpecError> {
    match header.one("conjugate|enumerable")? {
        "enumerable" => {
            if let Some(l) = body.first() {
                return Err(err(l.no, l.toks[0].0, "'oracle enumerable' takes no body"));
            }
            Ok(OracleSpec::Enumerable)
        }
        "conjugate" => {
            let mut prior_mean = None;
            let mut prior_var = None;
            let mut noise_var = None;
            for l in body {
                let slot = match l.key() {
                    "prior-mean" => &mut prior_mean,
                    "prior-var" => &mut prior_var,
                    "noise-var" => &mut noise_var,
                    other => {
                        return Err(err(l.no, l.toks[0].0, format!("unknown oracle key '{other}'")))
                    }
                };
                if slot.replace(parse_float(l, "a number")?).is_some() {
                    return Err(err(l.no, l.toks[0].0, format!("duplicate key '{}'", l.key())));
                }
            }
            Ok(OracleSpec::Conjugate {
                prior_mean: prior_mean.unwrap_or(0.0),
                prior_var: prior_var
                    .ok_or_else(|| err(header.no, 1, "'oracle conjugate' needs 'prior-var'"))?,
                noise_var: noise_var
                    .ok_or_else(|| err(header.no, 1, "'oracle conjugate' needs 'noise-var'"))?,
            })
        }
        other => Err(err(header.no, header.rest()[0].0, format!("unknown oracle '{other}'"))),
    }
}

fn parse_data(header: &Line, body: &[&Line]) -> Result<DataSpec, SpecError> {
    let source = match header.one("model|lingauss|pinwheel|mini-digits")? {
        "model" => DataSource::Model,
        "lingauss" => DataSource::Lingauss,
        "pinwheel" => DataSource::Pinwheel,
        "mini-digits" => DataSource::MiniDigits,
        other => {
            return Err(err(header.no, header.rest()[0].0, format!("unknown data source '{other}'")))
        }
    };
    let mut n = None;
    let mut seed = None;
    for l in body {
        match l.key() {
            "n" => {
                if n.replace(parse_usize(l, "a count")?).is_some() {
                    return Err(err(l.no, l.toks[0].0, "duplicate key 'n'"));
                }
            }
            "seed" => {
                let v = l.one("a seed")?;
                let s = v
                    .parse::<u64>()
                    .map_err(|_| err(l.no, l.rest()[0].0, format!("'{v}' is not a seed")))?;
                if seed.replace(s).is_some() {
                    return Err(err(l.no, l.toks[0].0, "duplicate key 'seed'"));
                }
            }
            other => return Err(err(l.no, l.toks[0].0, format!("unknown data key '{other}'"))),
        }
    }
    let d = DataSpec::default();
    Ok(DataSpec {
        source,
        n: n.unwrap_or(d.n),
        seed: seed.unwrap_or(d.seed),
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn floats(v: &[Real]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn sizes(v: &[usize]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn push_family(out: &mut String, f: &FamilySpec) {
    match f {
        FamilySpec::Gaussian { mean, std } => {
            out.push_str("  family gaussian\n");
            match mean {
                MeanSpec::Const(v) => out.push_str(&format!("  mean const {}\n", floats(v))),
                MeanSpec::Identity => out.push_str("  mean identity\n"),
                MeanSpec::Net(h) => out.push_str(&format!("  mean net {}\n", sizes(h))),
            }
            match std {
                StdSpec::Fixed(s) => out.push_str(&format!("  std fixed {s}\n")),
                StdSpec::Param(v) => out.push_str(&format!("  std param {}\n", floats(v))),
                StdSpec::Net => out.push_str("  std net\n"),
            }
        }
        FamilySpec::Bernoulli { logits } | FamilySpec::Categorical { logits } => {
            out.push_str(if matches!(f, FamilySpec::Bernoulli { .. }) {
                "  family bernoulli\n"
            } else {
                "  family categorical\n"
            });
            match logits {
                LogitsSpec::Const(v) => out.push_str(&format!("  logits const {}\n", floats(v))),
                LogitsSpec::Net(h) => out.push_str(&format!("  logits net {}\n", sizes(h))),
            }
        }
        FamilySpec::Implicit { hidden, noise_dim, noise } => {
            out.push_str("  family implicit\n");
            out.push_str(&format!("  net {}\n", sizes(hidden)));
            out.push_str(&format!("  noise-dim {noise_dim}\n"));
            out.push_str(&format!(
                "  noise {}\n",
                match noise {
                    NoiseKind::Normal => "normal",
                    NoiseKind::Uniform => "uniform",
                }
            ));
        }
    }
}

impl ModelSpec {
    /// Canonical text form; `parse(to_text(s)) == s` structurally.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(name) = &self.name {
            out.push_str(&format!("model {name}\n\n"));
        }
        for v in &self.vars {
            out.push_str(&format!("var {}\n  dim {}\n  role {}\n  support {}\n", v.name, v.dim,
                match v.role {
                    Role::Latent => "latent",
                    Role::Observed => "observed",
                },
                match v.support {
                    Support::Real => "real".to_string(),
                    Support::Binary => "binary".to_string(),
                    Support::Categorical(k) => format!("categorical {k}"),
                }));
        }
        out.push('\n');
        for f in &self.factors {
            if f.parents.is_empty() {
                out.push_str(&format!("factor {}\n", f.child));
            } else {
                out.push_str(&format!("factor {} <- {}\n", f.child, f.parents.join(" ")));
            }
            push_family(&mut out, &f.family);
            out.push_str(&format!("  trainable {}\n", f.trainable));
        }
        for inv in &self.inverses {
            out.push_str(&format!("\ninverse {}\n", inv.latent));
            if let Some(g) = &inv.given {
                out.push_str(&format!("  given {}\n", g.join(" ")));
            }
            if let Some(f) = &inv.family {
                push_family(&mut out, f);
            }
        }
        match &self.oracle {
            Some(OracleSpec::Conjugate { prior_mean, prior_var, noise_var }) => {
                out.push_str(&format!(
                    "\noracle conjugate\n  prior-mean {prior_mean}\n  prior-var {prior_var}\n  noise-var {noise_var}\n"
                ));
            }
            Some(OracleSpec::Enumerable) => out.push_str("\noracle enumerable\n"),
            None => {}
        }
        if let Some(d) = &self.data {
            let source = match d.source {
                DataSource::Model => "model",
                DataSource::Lingauss => "lingauss",
                DataSource::Pinwheel => "pinwheel",
                DataSource::MiniDigits => "mini-digits",
            };
            out.push_str(&format!("\ndata {source}\n  n {}\n  seed {}\n", d.n, d.seed));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Building runnable models
// ---------------------------------------------------------------------------

/// A spec instantiated into a runnable generative/inference pair.
#[derive(Debug)]
pub struct BuiltModel {
    pub graph: ModelGraph,
    pub gen: GenerativeModel,
    pub inf: InferenceModel,
}

impl ModelSpec {
    /// Validate the structural part of the spec into a graph.
    pub fn graph(&self) -> Result<ModelGraph, TrainError> {
        let factors: Vec<(String, Vec<String>)> = self
            .factors
            .iter()
            .map(|f| (f.child.clone(), f.parents.clone()))
            .collect();
        Ok(ModelGraph::new(self.vars.clone(), factors)?)
    }

    /// Instantiate generative and inference models. Network weights draw from
    /// `rng`; `observed_override` replaces the role-derived observed set.
    pub fn build(
        &self,
        observed_override: Option<&[String]>,
        rng: &mut Rng,
    ) -> Result<BuiltModel, TrainError> {
        let graph = self.graph()?;
        let mut gen_factors = Vec::with_capacity(graph.num_vars());
        for v in 0..graph.num_vars() {
            let block = self
                .factors
                .iter()
                .find(|f| graph.lookup(&f.child).map(|c| c == v).unwrap_or(false))
                .expect("graph construction requires one factor per variable");
            let parent_width: usize = graph.parents(v).iter().map(|&p| graph.var(p).width()).sum();
            gen_factors.push(build_factor(
                &graph.var(v).name,
                graph.var(v),
                parent_width,
                &block.family,
                block.trainable,
                rng,
            )?);
        }
        let gen = GenerativeModel { factors: gen_factors };

        let observed: BTreeSet<usize> = match observed_override {
            Some(names) => names
                .iter()
                .map(|n| graph.lookup(n))
                .collect::<Result<_, _>>()?,
            None => graph.observed_vars().into_iter().collect(),
        };
        let mut inverse = derive_inverse_factorization(&graph, &observed)?;
        // Apply conditioning-set overrides, then re-verify the factorization.
        let mut overridden = false;
        for inv in &self.inverses {
            if let Some(given) = &inv.given {
                let l = graph.lookup(&inv.latent)?;
                let pos = inverse.order.iter().position(|&o| o == l).ok_or_else(|| {
                    TrainError::Config(format!("inverse override for non-latent '{}'", inv.latent))
                })?;
                let mut cond: Vec<usize> = given
                    .iter()
                    .map(|n| graph.lookup(n))
                    .collect::<Result<_, _>>()?;
                cond.sort_by_key(|&c| graph.topo_index(c));
                inverse.cond_sets[pos] = cond;
                overridden = true;
            }
        }
        if overridden {
            let bad = check_inverse(&graph, &inverse);
            if !bad.is_empty() {
                let names: Vec<&str> = bad.iter().map(|&b| graph.var(b).name.as_str()).collect();
                return Err(TrainError::Config(format!(
                    "inverse override leaves latents not d-separated: {}",
                    names.join(", ")
                )));
            }
        }

        let mut inf_factors = Vec::with_capacity(inverse.order.len());
        for (i, &l) in inverse.order.iter().enumerate() {
            let cond_width: usize = inverse.cond_sets[i]
                .iter()
                .map(|&c| graph.var(c).width())
                .sum();
            let var = graph.var(l);
            let family = self
                .inverses
                .iter()
                .find(|b| b.latent == var.name)
                .and_then(|b| b.family.clone())
                .unwrap_or_else(|| default_inverse_family(var, cond_width));
            inf_factors.push(build_factor(&var.name, var, cond_width, &family, true, rng)?);
        }
        let inf = InferenceModel { inverse, factors: inf_factors };
        Ok(BuiltModel { graph, gen, inf })
    }

    /// Materialize the spec's dataset (defaults to sampling the model itself).
    pub fn dataset(&self) -> Result<Dataset, TrainError> {
        let d = self.data.clone().unwrap_or_default();
        let graph = self.graph()?;
        let single_obs = |want_width: usize, what: &str| -> Result<usize, TrainError> {
            let obs = graph.observed_vars();
            match obs.as_slice() {
                [o] if graph.var(*o).width() == want_width => Ok(*o),
                _ => Err(TrainError::Config(format!(
                    "data source '{what}' needs exactly one observed variable of width {want_width}"
                ))),
            }
        };
        match d.source {
            DataSource::Lingauss => {
                let o = single_obs(1, "lingauss")?;
                let raw = lingauss_dataset(d.n, d.seed);
                let obs: BTreeMap<usize, Tensor> =
                    [(o, raw.all().values().next().expect("one variable").clone())].into();
                Dataset::new(obs)
            }
            DataSource::Pinwheel => {
                let o = single_obs(2, "pinwheel")?;
                Ok(pinwheel_dataset(o, d.n, d.seed))
            }
            DataSource::MiniDigits => {
                let o = single_obs(16, "mini-digits")?;
                let raw = mini_digits_dataset(d.n, d.seed);
                let obs: BTreeMap<usize, Tensor> =
                    [(o, raw.all().values().next().expect("one variable").clone())].into();
                Dataset::new(obs)
            }
            DataSource::Model => {
                let mut rng = Rng::seed_from_u64(d.seed);
                let built = self.build(None, &mut rng)?;
                let obs = sample_observed(&built.graph, &built.gen, d.n, &mut rng)?;
                Dataset::new(obs)
            }
        }
    }
}

use rand::SeedableRng;

/// Default inference family: tanh-net Gaussian (or net logits for discrete
/// latents) over the conditioning tuple, one hidden layer of 32 units.
fn default_inverse_family(var: &VariableDecl, cond_width: usize) -> FamilySpec {
    let hidden = vec![32];
    match var.support {
        Support::Real => FamilySpec::Gaussian {
            mean: if cond_width == 0 {
                MeanSpec::Const(vec![0.0; var.width()])
            } else {
                MeanSpec::Net(hidden)
            },
            std: StdSpec::Param(vec![0.0; var.width()]),
        },
        Support::Binary => FamilySpec::Bernoulli {
            logits: if cond_width == 0 {
                LogitsSpec::Const(vec![0.0; var.width()])
            } else {
                LogitsSpec::Net(hidden)
            },
        },
        Support::Categorical(k) => FamilySpec::Categorical {
            logits: if cond_width == 0 {
                LogitsSpec::Const(vec![0.0; k])
            } else {
                LogitsSpec::Net(hidden)
            },
        },
    }
}

fn net_dims(in_dim: usize, hidden: &[usize], out_dim: usize) -> Vec<usize> {
    let mut dims = vec![in_dim];
    dims.extend_from_slice(hidden);
    dims.push(out_dim);
    dims
}

fn build_factor(
    name: &str,
    var: &VariableDecl,
    parent_width: usize,
    family: &FamilySpec,
    trainable: bool,
    rng: &mut Rng,
) -> Result<FactorParams, TrainError> {
    let width = var.width();
    let bad = |detail: String| TrainError::Config(format!("factor '{name}': {detail}"));
    let need_parents = |what: &str| -> Result<(), TrainError> {
        if parent_width == 0 {
            Err(bad(format!("{what} requires parents or a conditioning set")))
        } else {
            Ok(())
        }
    };
    match family {
        FamilySpec::Gaussian { mean, std } => {
            if var.support != Support::Real {
                return Err(bad("gaussian family needs real support".into()));
            }
            let out_dim = if matches!(std, StdSpec::Net) { 2 * width } else { width };
            let mean_src = match mean {
                MeanSpec::Const(v) => {
                    if v.len() != width {
                        return Err(bad(format!("mean has {} entries, needs {width}", v.len())));
                    }
                    MeanSource::Const(Tensor::new(vec![width], v.clone())?)
                }
                MeanSpec::Identity => {
                    if parent_width != width {
                        return Err(bad(format!(
                            "identity mean needs parent width {width}, got {parent_width}"
                        )));
                    }
                    MeanSource::Identity
                }
                MeanSpec::Net(h) => {
                    need_parents("a network mean")?;
                    MeanSource::Net(Mlp::new(
                        &net_dims(parent_width, h, out_dim),
                        Activation::Tanh,
                        Activation::Identity,
                        rng,
                    ))
                }
            };
            let std_src = match std {
                StdSpec::Fixed(s) => {
                    if *s < 0.0 {
                        return Err(bad(format!("fixed std must be nonnegative, got {s}")));
                    }
                    StdSource::Fixed(*s)
                }
                StdSpec::Param(v) => {
                    let init = match v.len() {
                        1 => vec![v[0]; width],
                        n if n == width => v.clone(),
                        n => return Err(bad(format!("std param has {n} entries, needs {width}"))),
                    };
                    StdSource::Param(Tensor::new(vec![width], init)?)
                }
                StdSpec::Net => {
                    if !matches!(mean, MeanSpec::Net(_)) {
                        return Err(bad("'std net' requires a network mean".into()));
                    }
                    StdSource::FromNet
                }
            };
            Ok(FactorParams::Gaussian { dim: width, mean: mean_src, log_std: std_src, trainable })
        }
        FamilySpec::Bernoulli { logits } => {
            if var.support != Support::Binary {
                return Err(bad("bernoulli family needs binary support".into()));
            }
            Ok(FactorParams::Bernoulli {
                dim: width,
                logits: build_logits(name, logits, parent_width, width, rng)?,
                trainable,
            })
        }
        FamilySpec::Categorical { logits } => {
            let k = match var.support {
                Support::Categorical(k) => k,
                _ => return Err(bad("categorical family needs categorical support".into())),
            };
            Ok(FactorParams::Categorical {
                k,
                logits: build_logits(name, logits, parent_width, k, rng)?,
                trainable,
            })
        }
        FamilySpec::Implicit { hidden, noise_dim, noise } => {
            if var.support != Support::Real {
                return Err(bad("implicit family needs real support".into()));
            }
            if *noise_dim == 0 {
                return Err(bad("implicit family needs noise-dim >= 1".into()));
            }
            Ok(FactorParams::Implicit {
                net: Mlp::new(
                    &net_dims(parent_width + noise_dim, hidden, width),
                    Activation::Tanh,
                    Activation::Identity,
                    rng,
                ),
                out_dim: width,
                noise_dim: *noise_dim,
                noise: *noise,
                trainable,
            })
        }
    }
}

fn build_logits(
    name: &str,
    logits: &LogitsSpec,
    parent_width: usize,
    out: usize,
    rng: &mut Rng,
) -> Result<LogitSource, TrainError> {
    match logits {
        LogitsSpec::Const(v) => {
            if v.len() != out {
                return Err(TrainError::Config(format!(
                    "factor '{name}': logits have {} entries, need {out}",
                    v.len()
                )));
            }
            Ok(LogitSource::Const(Tensor::new(vec![out], v.clone())?))
        }
        LogitsSpec::Net(h) => {
            if parent_width == 0 {
                return Err(TrainError::Config(format!(
                    "factor '{name}': network logits require parents or a conditioning set"
                )));
            }
            Ok(LogitSource::Net(Mlp::new(
                &net_dims(parent_width, h, out),
                Activation::Tanh,
                Activation::Identity,
                rng,
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINGAUSS: &str = "\
model lingauss

var z
  role latent
var x
  role observed

factor z
  family gaussian
  mean const 0
  std fixed 1
  trainable false
factor x <- z
  family gaussian
  mean identity
  std fixed 0.5
  trainable false

oracle conjugate
  prior-var 1
  noise-var 0.25

data model
  n 512
  seed 3
";

    #[test]
    fn parses_lingauss() {
        let s = ModelSpec::parse(LINGAUSS).unwrap();
        assert_eq!(s.name.as_deref(), Some("lingauss"));
        assert_eq!(s.vars.len(), 2);
        assert_eq!(s.factors[1].parents, vec!["z".to_string()]);
        assert!(matches!(
            s.oracle,
            Some(OracleSpec::Conjugate { prior_mean, prior_var, noise_var })
                if prior_mean == 0.0 && prior_var == 1.0 && noise_var == 0.25
        ));
        assert_eq!(s.data.as_ref().unwrap().n, 512);
    }

    #[test]
    fn round_trip_structural_equality() {
        let s = ModelSpec::parse(LINGAUSS).unwrap();
        let again = ModelSpec::parse(&s.to_text()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn round_trip_with_all_block_kinds() {
        let text = "\
var z
  dim 2
var c
  support categorical 3
var b
  role observed
  support binary
  dim 4
var y
  role observed
  dim 2

factor z
  family gaussian
  mean const 0 0.25
  std param -0.5 -0.5
factor c <- z
  family categorical
  logits net 8
factor b <- c
  family bernoulli
  logits net 16 8
factor y <- z
  family implicit
  net 12
  noise-dim 3
  noise uniform

inverse z
  given b y
  family gaussian
  mean net 6
  std net

oracle enumerable

data pinwheel
  n 64
";
        let s = ModelSpec::parse(text).unwrap();
        let again = ModelSpec::parse(&s.to_text()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn error_positions_are_anchored() {
        let e = ModelSpec::parse("var z\n  dim two\n").unwrap_err();
        assert_eq!((e.line, e.col), (2, 7));
        assert!(e.to_string().contains("'two'"), "{e}");

        let e = ModelSpec::parse("blob z\n").unwrap_err();
        assert_eq!((e.line, e.col), (1, 1));

        let e = ModelSpec::parse("var z\n  color red\n").unwrap_err();
        assert_eq!((e.line, e.col), (2, 3));
    }

    #[test]
    fn duplicate_keys_rejected() {
        let e = ModelSpec::parse("var z\n  dim 1\n  dim 2\n").unwrap_err();
        assert!(e.to_string().contains("duplicate"), "{e}");
        let e = ModelSpec::parse(&format!("{LINGAUSS}\ndata model\n")).unwrap_err();
        assert!(e.to_string().contains("duplicate 'data'"), "{e}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let s = ModelSpec::parse("# header\n\nvar z  # trailing\n  dim 3 # note\n").unwrap();
        assert_eq!(s.vars[0].dim, 3);
    }

    #[test]
    fn family_key_cross_validation() {
        let e = ModelSpec::parse("factor z\n  family gaussian\n  logits const 0\n  mean const 0\n  std fixed 1\n")
            .unwrap_err();
        assert!(e.to_string().contains("does not apply"), "{e}");
        let e = ModelSpec::parse("factor z\n  family gaussian\n  mean const 0\n").unwrap_err();
        assert!(e.to_string().contains("'std'"), "{e}");
    }

    #[test]
    fn build_lingauss_and_default_inverse() {
        let s = ModelSpec::parse(LINGAUSS).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let b = s.build(None, &mut rng).unwrap();
        assert_eq!(b.graph.num_vars(), 2);
        assert_eq!(b.inf.inverse.describe(&b.graph), "q(z|x)");
        assert!(matches!(
            &b.inf.factors[0],
            FactorParams::Gaussian { mean: MeanSource::Net(_), log_std: StdSource::Param(_), .. }
        ));
        assert!(!b.gen.factors[0].trainable());
    }

    #[test]
    fn build_validates_widths() {
        let text = "\
var z
  dim 2
factor z
  family gaussian
  mean const 0
  std fixed 1
";
        let e = ModelSpec::parse(text)
            .unwrap()
            .build(None, &mut Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(e.to_string().contains("needs 2"), "{e}");
    }

    #[test]
    fn bad_inverse_override_rejected() {
        // Conditioning z2 on nothing leaves it dependent on x through z1.
        let text = "\
var z2
var z1
var x
  role observed
factor z2
  family gaussian
  mean const 0
  std fixed 1
factor z1 <- z2
  family gaussian
  mean identity
  std fixed 1
factor x <- z1
  family gaussian
  mean identity
  std fixed 1
inverse z2
  given
";
        let e = ModelSpec::parse(text)
            .unwrap()
            .build(None, &mut Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(e.to_string().contains("z2"), "{e}");
    }

    #[test]
    fn good_inverse_override_accepted() {
        let text = "\
var z2
var z1
var x
  role observed
factor z2
  family gaussian
  mean const 0
  std fixed 1
factor z1 <- z2
  family gaussian
  mean identity
  std fixed 1
factor x <- z1
  family gaussian
  mean identity
  std fixed 1
inverse z2
  given z1 x
";
        let b = ModelSpec::parse(text)
            .unwrap()
            .build(None, &mut Rng::seed_from_u64(0))
            .unwrap();
        let z2 = b.graph.lookup("z2").unwrap();
        let cond = b.inf.inverse.cond_set_of(z2).unwrap();
        assert_eq!(cond.len(), 2);
    }

    #[test]
    fn dataset_from_model_source() {
        let s = ModelSpec::parse(LINGAUSS).unwrap();
        let d = s.dataset().unwrap();
        assert_eq!(d.len(), 512);
        let x = d.var(1).unwrap();
        assert_eq!(x.shape(), &[512, 1]);
        // Seeded: twice the same spec, twice the same data.
        assert_eq!(s.dataset().unwrap().var(1), Some(x));
    }

    #[test]
    fn dataset_source_width_validated() {
        let mut s = ModelSpec::parse(LINGAUSS).unwrap();
        s.data = Some(DataSpec { source: DataSource::Pinwheel, n: 16, seed: 0 });
        assert!(s.dataset().is_err()); // x is 1-D, pinwheel is 2-D
    }

    #[test]
    fn observed_override_changes_inverse() {
        let s = ModelSpec::parse(LINGAUSS).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let b = s.build(Some(&["z".to_string()]), &mut rng).unwrap();
        assert_eq!(b.inf.inverse.describe(&b.graph), "q(x|z)");
    }
}
