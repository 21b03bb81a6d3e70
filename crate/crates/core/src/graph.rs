//! Directed acyclic generative models and their inverse factorizations.
//!
//! A [`ModelGraph`] holds the factorization p(X) = prod_i p(x_i | pa(x_i)).
//! [`derive_inverse_factorization`] builds the matching inference structure
//! q(X) = prod_i q(x_i | ipa(x_i)), choosing each conditioning set from the
//! Markov blanket so the variable is d-separated from the rest of the
//! evidence, verified against the d-separation check.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::error::GraphError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Role {
    Observed,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Support {
    Real,
    Binary,
    Categorical(usize),
}

impl Support {
    pub fn is_discrete(&self) -> bool {
        !matches!(self, Support::Real)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub dim: usize,
    pub role: Role,
    pub support: Support,
}

impl VariableDecl {
    /// Width of the variable's tensor representation (one-hot for categorical).
    pub fn width(&self) -> usize {
        match self.support {
            Support::Categorical(k) => k,
            _ => self.dim,
        }
    }
}

/// Structural part of a factor; the distribution family and parameters live in
/// [`crate::densities`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FactorDecl {
    pub child: usize,
    pub parents: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    vars: Vec<VariableDecl>,
    factors: Vec<FactorDecl>,
    index: HashMap<String, usize>,
    topo: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl ModelGraph {
    /// Build and validate: unique names, declared parents, exactly one factor
    /// per variable, acyclicity.
    pub fn new(
        vars: Vec<VariableDecl>,
        factors_by_name: Vec<(String, Vec<String>)>,
    ) -> Result<Self, GraphError> {
        let mut index = HashMap::new();
        for (i, v) in vars.iter().enumerate() {
            if index.insert(v.name.clone(), i).is_some() {
                return Err(GraphError::DuplicateVariable(v.name.clone()));
            }
        }
        let lookup = |name: &str| -> Result<usize, GraphError> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| GraphError::UnknownVariable(name.to_string()))
        };
        let mut factors: Vec<Option<FactorDecl>> = vec![None; vars.len()];
        for (child, parents) in &factors_by_name {
            let c = lookup(child)?;
            if factors[c].is_some() {
                return Err(GraphError::DuplicateFactor(child.clone()));
            }
            let ps = parents
                .iter()
                .map(|p| lookup(p))
                .collect::<Result<Vec<_>, _>>()?;
            if ps.contains(&c) {
                return Err(GraphError::Cycle(vec![child.clone(), child.clone()]));
            }
            factors[c] = Some(FactorDecl { child: c, parents: ps });
        }
        let factors: Vec<FactorDecl> = factors
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.ok_or_else(|| GraphError::MissingFactor(vars[i].name.clone())))
            .collect::<Result<_, _>>()?;

        let mut children = vec![Vec::new(); vars.len()];
        for f in &factors {
            for &p in &f.parents {
                children[p].push(f.child);
            }
        }
        let topo = toposort(&vars, &factors)?;
        Ok(ModelGraph {
            vars,
            factors,
            index,
            topo,
            children,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn var(&self, i: usize) -> &VariableDecl {
        &self.vars[i]
    }

    pub fn vars(&self) -> &[VariableDecl] {
        &self.vars
    }

    pub fn factor(&self, i: usize) -> &FactorDecl {
        &self.factors[i]
    }

    pub fn lookup(&self, name: &str) -> Result<usize, GraphError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownVariable(name.to_string()))
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.factors[i].parents
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// Variable indices in a topological order consistent with all edges.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Position of each variable within the topological order.
    pub fn topo_index(&self, var: usize) -> usize {
        self.topo.iter().position(|&v| v == var).expect("var in topo order")
    }

    /// Parents, children and co-parents.
    pub fn markov_blanket(&self, var: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        out.extend(self.parents(var).iter().copied());
        for &c in self.children(var) {
            out.insert(c);
            out.extend(self.parents(c).iter().copied().filter(|&p| p != var));
        }
        out
    }

    pub fn observed_vars(&self) -> Vec<usize> {
        (0..self.vars.len())
            .filter(|&i| self.vars[i].role == Role::Observed)
            .collect()
    }

    pub fn latent_vars(&self) -> Vec<usize> {
        (0..self.vars.len())
            .filter(|&i| self.vars[i].role == Role::Latent)
            .collect()
    }

    /// d-separation via Bayes-ball reachability: `a` and `b` are d-separated
    /// given `z` iff no active trail connects them.
    pub fn d_separated(&self, a: usize, b: usize, z: &BTreeSet<usize>) -> bool {
        if a == b {
            return false;
        }
        // Ancestors of the conditioning set (for collider activation).
        let mut anc = vec![false; self.vars.len()];
        let mut queue: VecDeque<usize> = z.iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            if anc[v] {
                continue;
            }
            anc[v] = true;
            for &p in self.parents(v) {
                queue.push_back(p);
            }
        }
        // State: (node, came_from_child). Start from `a` as if entering from a
        // virtual child, which permits leaving through both edges.
        let mut visited = vec![[false; 2]; self.vars.len()];
        let mut stack = vec![(a, true)];
        while let Some((v, from_child)) = stack.pop() {
            let dir = from_child as usize;
            if visited[v][dir] {
                continue;
            }
            visited[v][dir] = true;
            let in_z = z.contains(&v);
            if !in_z && v == b {
                return false;
            }
            if from_child {
                if !in_z {
                    // pass through: up to parents, down to children
                    for &p in self.parents(v) {
                        stack.push((p, true));
                    }
                    for &c in self.children(v) {
                        stack.push((c, false));
                    }
                }
            } else {
                if !in_z {
                    for &c in self.children(v) {
                        stack.push((c, false));
                    }
                }
                if anc[v] {
                    // collider opened by conditioning on v or a descendant
                    for &p in self.parents(v) {
                        stack.push((p, true));
                    }
                }
            }
        }
        true
    }

    /// Named-variable front-end for [`Self::d_separated`].
    pub fn d_separated_named(
        &self,
        a: &str,
        b: &str,
        z: &[&str],
    ) -> Result<bool, GraphError> {
        let ai = self.lookup(a)?;
        let bi = self.lookup(b)?;
        if ai == bi {
            return Err(GraphError::Invalid(format!("d_separated: a == b == '{a}'")));
        }
        let zs = z
            .iter()
            .map(|n| self.lookup(n))
            .collect::<Result<BTreeSet<_>, _>>()?;
        Ok(self.d_separated(ai, bi, &zs))
    }
}

fn toposort(vars: &[VariableDecl], factors: &[FactorDecl]) -> Result<Vec<usize>, GraphError> {
    let n = vars.len();
    let mut indeg = vec![0usize; n];
    for f in factors {
        indeg[f.child] = f.parents.len();
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    ready.sort();
    let mut order = Vec::with_capacity(n);
    let mut queue: VecDeque<usize> = ready.into();
    let mut children = vec![Vec::new(); n];
    for f in factors {
        for &p in &f.parents {
            children[p].push(f.child);
        }
    }
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() != n {
        // Recover one concrete cycle for the error message.
        let in_cycle: Vec<usize> = (0..n).filter(|i| !order.contains(i)).collect();
        let mut cycle = Vec::new();
        let mut cur = in_cycle[0];
        loop {
            cycle.push(vars[cur].name.clone());
            cur = *factors[cur]
                .parents
                .iter()
                .find(|p| in_cycle.contains(p))
                .expect("cycle member has a cyclic parent");
            if vars[cur].name == cycle[0] {
                cycle.push(vars[cur].name.clone());
                break;
            }
        }
        return Err(GraphError::Cycle(cycle));
    }
    Ok(order)
}

/// Per-latent conditioning sets of the inference factorization, in processing
/// order (reverse-topological over latents).
#[derive(Clone, Debug, PartialEq)]
pub struct InverseFactorization {
    /// Latent variable indices in processing order.
    pub order: Vec<usize>,
    /// Conditioning set (ipa) per entry of `order`, as variable indices in
    /// ascending topological order.
    pub cond_sets: Vec<Vec<usize>>,
    /// Variables treated as observed for this factorization.
    pub observed: Vec<usize>,
    /// Latents with no directed path to any observed variable.
    pub disconnected: Vec<usize>,
}

impl InverseFactorization {
    pub fn cond_set_of(&self, latent: usize) -> Option<&[usize]> {
        self.order
            .iter()
            .position(|&l| l == latent)
            .map(|i| self.cond_sets[i].as_slice())
    }

    /// Human-readable q-factorization, e.g. `q(z1|x) q(z2|z1)`.
    pub fn describe(&self, graph: &ModelGraph) -> String {
        let mut parts = Vec::new();
        for (i, &l) in self.order.iter().enumerate() {
            let conds: Vec<&str> = self.cond_sets[i]
                .iter()
                .map(|&c| graph.var(c).name.as_str())
                .collect();
            if conds.is_empty() {
                parts.push(format!("q({})", graph.var(l).name));
            } else {
                parts.push(format!("q({}|{})", graph.var(l).name, conds.join(",")));
            }
        }
        parts.join(" ")
    }
}

/// Derive the inverse factorization for the given observed set.
///
/// Latents are processed in reverse topological order. For each one, the
/// conditioning set starts from the Markov blanket restricted to available
/// variables (observed plus already-processed latents), is widened to the full
/// available set when the blanket does not block, and is then greedily
/// minimized with deterministic tie-breaking by topological index.
pub fn derive_inverse_factorization(
    graph: &ModelGraph,
    observed: &BTreeSet<usize>,
) -> Result<InverseFactorization, GraphError> {
    for &o in observed {
        if o >= graph.num_vars() {
            return Err(GraphError::Invalid(format!("observed index {o} out of range")));
        }
    }
    let latents: Vec<usize> = graph
        .topo_order()
        .iter()
        .rev()
        .copied()
        .filter(|v| !observed.contains(v))
        .collect();

    // Latents with no directed path to evidence get a warning entry.
    let mut reaches = vec![false; graph.num_vars()];
    for &v in graph.topo_order().iter().rev() {
        if observed.contains(&v) {
            reaches[v] = true;
        } else {
            reaches[v] = graph.children(v).iter().any(|&c| reaches[c]);
        }
    }
    let disconnected: Vec<usize> = latents.iter().copied().filter(|&l| !reaches[l]).collect();

    let mut order = Vec::new();
    let mut cond_sets = Vec::new();
    let mut processed: BTreeSet<usize> = BTreeSet::new();

    for &latent in &latents {
        let available: BTreeSet<usize> = observed.union(&processed).copied().collect();
        let separated = |cond: &BTreeSet<usize>| -> bool {
            available
                .iter()
                .filter(|t| !cond.contains(t))
                .all(|&t| graph.d_separated(latent, t, cond))
        };
        let blanket: BTreeSet<usize> = graph
            .markov_blanket(latent)
            .intersection(&available)
            .copied()
            .collect();
        let mut cond = if separated(&blanket) {
            blanket
        } else {
            available.clone()
        };
        // Greedy minimization, removal attempts in ascending topological index.
        let mut candidates: Vec<usize> = cond.iter().copied().collect();
        candidates.sort_by_key(|&v| graph.topo_index(v));
        for c in candidates {
            let mut trial = cond.clone();
            trial.remove(&c);
            if separated(&trial) {
                cond = trial;
            }
        }
        let mut cond: Vec<usize> = cond.into_iter().collect();
        cond.sort_by_key(|&v| graph.topo_index(v));
        order.push(latent);
        cond_sets.push(cond);
        processed.insert(latent);
    }

    Ok(InverseFactorization {
        order,
        cond_sets,
        observed: observed.iter().copied().collect(),
        disconnected,
    })
}

/// Check an inverse factorization (derived or user-overridden) against the
/// d-separation criterion. Returns the latents that fail.
pub fn check_inverse(graph: &ModelGraph, inv: &InverseFactorization) -> Vec<usize> {
    let observed: BTreeSet<usize> = inv.observed.iter().copied().collect();
    let mut processed: BTreeSet<usize> = BTreeSet::new();
    let mut bad = Vec::new();
    for (i, &latent) in inv.order.iter().enumerate() {
        let cond: BTreeSet<usize> = inv.cond_sets[i].iter().copied().collect();
        let targets: BTreeSet<usize> = observed.union(&processed).copied().collect();
        let ok = targets
            .iter()
            .filter(|t| !cond.contains(t))
            .all(|&t| graph.d_separated(latent, t, &cond));
        if !ok {
            bad.push(latent);
        }
        processed.insert(latent);
    }
    bad
}
