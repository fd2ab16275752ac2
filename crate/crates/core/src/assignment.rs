//! Prototype assignment, instance affinity graph, and the soft modularity loss.
//!
//! For prototypes `C` (K×d) and instances `P` (M×d) the assignment is
//! `S = max(0, cos(C, P))`. The instance graph is `A = max(0, cos(P, P))`
//! with a zeroed diagonal (unless self-loops are kept), degrees `d = A·1`,
//! edge mass `2e = Σ d`, and the null-model-corrected weights
//! `W = A − d·dᵀ / 2e`. The loss is
//! `−(α·Tr(W·SpᵀSp) + β·Tr(W·SgᵀSg)) / 2e`, zero when `2e = 0`.

use crate::error::{Error, Result};
use crate::numkit::{Tape, Tensor, Var};

/// Everything the modularity loss needs from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AssignmentBundle {
    pub s_p: Var,
    pub s_g: Var,
    pub affinity: Var,
    /// `None` when the graph carries no edge mass.
    pub weight_w: Option<Var>,
    pub degree: Var,
    pub edge_mass_2e: Var,
}

/// Affinity graph with its degree vector (M×1) and total edge mass (1×1).
#[derive(Clone, Copy, Debug)]
pub struct AffinityGraph {
    pub affinity: Var,
    pub degree: Var,
    pub edge_mass_2e: Var,
}

/// `max(0, cos(prototypes, instances))`, K×M.
pub fn assign(tape: &mut Tape, prototypes: Var, instances: Var) -> Result<Var> {
    let cos = tape.cosine_rows(prototypes, instances)?;
    Ok(tape.relu(cos))
}

/// Degrees and edge mass of an existing affinity matrix.
pub fn graph_from_affinity(tape: &mut Tape, affinity: Var) -> AffinityGraph {
    let degree = tape.row_sums(affinity);
    let edge_mass_2e = tape.sum(degree);
    AffinityGraph {
        affinity,
        degree,
        edge_mass_2e,
    }
}

pub fn affinity_graph(
    tape: &mut Tape,
    instances: Var,
    keep_self_loops: bool,
) -> Result<AffinityGraph> {
    let m = tape.shape(instances).0;
    if m < 2 {
        return Err(Error::DegenerateGraph(m));
    }
    let cos = tape.cosine_rows(instances, instances)?;
    let mut a = tape.relu(cos);
    if !keep_self_loops {
        let mut mask = Tensor::ones(m, m);
        for i in 0..m {
            mask.set(i, i, 0.0);
        }
        let mask = tape.constant(mask);
        a = tape.mul(a, mask)?;
    }
    Ok(graph_from_affinity(tape, a))
}

/// `W = A − d·dᵀ / 2e`. Fails with [`Error::EmptyGraph`] when `2e = 0`.
pub fn modularity_weight(tape: &mut Tape, graph: &AffinityGraph) -> Result<Var> {
    if tape.value(graph.edge_mass_2e).item() <= 0.0 {
        return Err(Error::EmptyGraph);
    }
    let dt = tape.transpose(graph.degree);
    let ddt = tape.matmul(graph.degree, dt)?;
    let null = tape.div_scalar(ddt, graph.edge_mass_2e)?;
    tape.sub(graph.affinity, null)
}

pub fn build_bundle(
    tape: &mut Tape,
    path_prototypes: Var,
    gene_prototypes: Var,
    instances: Var,
    keep_self_loops: bool,
) -> Result<AssignmentBundle> {
    let s_p = assign(tape, path_prototypes, instances)?;
    let s_g = assign(tape, gene_prototypes, instances)?;
    let graph = affinity_graph(tape, instances, keep_self_loops)?;
    let weight_w = match modularity_weight(tape, &graph) {
        Ok(w) => Some(w),
        Err(Error::EmptyGraph) => None,
        Err(e) => return Err(e),
    };
    Ok(AssignmentBundle {
        s_p,
        s_g,
        affinity: graph.affinity,
        weight_w,
        degree: graph.degree,
        edge_mass_2e: graph.edge_mass_2e,
    })
}

/// `Tr(W·SᵀS)` computed as `Σ (S·W) ⊙ S`.
fn trace_term(tape: &mut Tape, w: Var, s: Var) -> Result<Var> {
    let sw = tape.matmul(s, w)?;
    let prod = tape.mul(sw, s)?;
    Ok(tape.sum(prod))
}

pub fn modularity_loss(
    tape: &mut Tape,
    bundle: &AssignmentBundle,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let Some(w) = bundle.weight_w else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut terms = Vec::with_capacity(2);
    if alpha != 0.0 {
        let t = trace_term(tape, w, bundle.s_p)?;
        terms.push(tape.scale(t, alpha));
    }
    if beta != 0.0 {
        let t = trace_term(tape, w, bundle.s_g)?;
        terms.push(tape.scale(t, beta));
    }
    let total = match terms.as_slice() {
        [] => return Ok(tape.constant(Tensor::scalar(0.0))),
        [one] => *one,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!(),
    };
    let normalized = tape.div_scalar(total, bundle.edge_mass_2e)?;
    Ok(tape.scale(normalized, -1.0))
}
