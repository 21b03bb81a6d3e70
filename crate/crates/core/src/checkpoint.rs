//! Binary checkpoint container for training state.
//!
//! Layout (all integers little-endian):
//! magic `ADMP`, format version (u32), step counter (u64), RNG state
//! (32-byte seed, stream word position as u128, stream id as u64), then a
//! u32 entry count followed by length-prefixed named f64 arrays: u32 name
//! length, UTF-8 name, u64 element count, elements. Entry names identify
//! parameters (`theta/<var>/<k>`, `phi/<latent>/<k>`, `xi/<index>/<k>`) and
//! optimizer moments (same names suffixed `.m`, `.v`, `.t`). Loading
//! restores into a state built from the same model spec and config; any
//! missing, unknown or mis-sized entry is a structured error.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;

use crate::error::TrainError;
use crate::graph::ModelGraph;
use crate::trainer::TrainState;
use crate::{Real, Rng, Tensor};

const MAGIC: &[u8; 4] = b"ADMP";
const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

/// Entry names and parameter/optimizer tensors of a state, in a fixed order.
fn collect_entries(state: &TrainState, graph: &ModelGraph) -> Vec<(String, Vec<Real>)> {
    let mut out = Vec::new();
    let mut push_group =
        |prefix: &str, name: &str, tensors: Vec<&Tensor>, opt: &[crate::AdamState]| {
            for (k, t) in tensors.iter().enumerate() {
                out.push((format!("{prefix}/{name}/{k}"), t.data().to_vec()));
                out.push((format!("{prefix}/{name}/{k}.m"), opt[k].m.data().to_vec()));
                out.push((format!("{prefix}/{name}/{k}.v"), opt[k].v.data().to_vec()));
                out.push((format!("{prefix}/{name}/{k}.t"), vec![opt[k].t as Real]));
            }
        };
    for (v, f) in state.gen.factors.iter().enumerate() {
        push_group("theta", &graph.var(v).name, f.param_tensors(), &state.opt_theta[v]);
    }
    for (i, f) in state.inf.factors.iter().enumerate() {
        let name = &graph.var(state.inf.inverse.order[i]).name;
        push_group("phi", name, f.param_tensors(), &state.opt_phi[i]);
    }
    for (a, adv) in state.adversaries.iter().enumerate() {
        push_group("xi", &a.to_string(), adv.net.params(), &state.opt_xi[a]);
    }
    out
}

/// Serialize a state to the container format.
pub fn write_checkpoint(state: &TrainState, graph: &ModelGraph) -> Vec<u8> {
    let entries = collect_entries(state, graph);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(state.rng.get_seed().as_slice());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    buf.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, data) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, TrainError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

/// Restore a state from the container format. `state` must come from the same
/// model and config that produced the checkpoint; its parameter, optimizer and
/// RNG contents are overwritten.
pub fn read_checkpoint(
    state: &mut TrainState,
    graph: &ModelGraph,
    bytes: &[u8],
) -> Result<(), TrainError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic: not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let stream = r.u64()?;
    let count = r.u32()? as usize;
    let mut entries: BTreeMap<String, Vec<Real>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("entry name is not UTF-8"))?
            .to_string();
        let n = r.u64()? as usize;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.insert(name.clone(), data).is_some() {
            return Err(bad(format!("duplicate entry '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes after entries", bytes.len() - r.pos)));
    }

    let expected = collect_entries(state, graph);
    let mut missing = Vec::new();
    for (name, tmpl) in &expected {
        match entries.get(name) {
            None => missing.push(name.clone()),
            Some(data) if data.len() != tmpl.len() => {
                return Err(bad(format!(
                    "entry '{name}' has {} elements, expected {}",
                    data.len(),
                    tmpl.len()
                )));
            }
            Some(_) => {}
        }
    }
    if !missing.is_empty() {
        return Err(bad(format!("missing entries: {}", missing.join(", "))));
    }
    let known: std::collections::BTreeSet<&str> =
        expected.iter().map(|(n, _)| n.as_str()).collect();
    let unknown: Vec<&str> =
        entries.keys().map(String::as_str).filter(|n| !known.contains(n)).collect();
    if !unknown.is_empty() {
        return Err(bad(format!("unknown entries: {}", unknown.join(", "))));
    }

    // All structure checks passed; write into the state.
    let fill = |t: &mut Tensor, data: &[Real]| t.data_mut().copy_from_slice(data);
    let apply_group = |prefix: &str,
                           name: &str,
                           tensors: Vec<&mut Tensor>,
                           opt: &mut [crate::AdamState]|
     -> Result<(), TrainError> {
        for (k, t) in tensors.into_iter().enumerate() {
            fill(t, &entries[&format!("{prefix}/{name}/{k}")]);
            fill(&mut opt[k].m, &entries[&format!("{prefix}/{name}/{k}.m")]);
            fill(&mut opt[k].v, &entries[&format!("{prefix}/{name}/{k}.v")]);
            let t_val = entries[&format!("{prefix}/{name}/{k}.t")][0];
            opt[k].t = t_val as u64;
        }
        Ok(())
    };
    for (v, f) in state.gen.factors.iter_mut().enumerate() {
        apply_group("theta", &graph.var(v).name, f.param_tensors_mut(), &mut state.opt_theta[v])?;
    }
    let order = state.inf.inverse.order.clone();
    for (i, f) in state.inf.factors.iter_mut().enumerate() {
        let name = graph.var(order[i]).name.clone();
        apply_group("phi", &name, f.param_tensors_mut(), &mut state.opt_phi[i])?;
    }
    for (a, adv) in state.adversaries.iter_mut().enumerate() {
        apply_group("xi", &a.to_string(), adv.net.params_mut(), &mut state.opt_xi[a])?;
    }
    state.step = step;
    state.rng = Rng::from_seed(seed);
    state.rng.set_word_pos(word_pos);
    state.rng.set_stream(stream);
    Ok(())
}

/// Write a checkpoint file.
pub fn save_checkpoint(
    state: &TrainState,
    graph: &ModelGraph,
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    std::fs::write(path, write_checkpoint(state, graph))?;
    Ok(())
}

/// Read a checkpoint file into a compatibly shaped state.
pub fn load_checkpoint(
    state: &mut TrainState,
    graph: &ModelGraph,
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(state, graph, &bytes)
}
