//! Release-gate suites: finite-difference gradient checks for every op and
//! the full model, and brute-force oracles for modularity and the metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assignment::{affinity_graph, modularity_loss, modularity_weight, AssignmentBundle};
use crate::error::{Error, Result};
use crate::fusion::Task;
use crate::harness::{Model, RunConfig};
use crate::losses::{cross_entropy, nll_survival, total_loss, SurvivalTarget};
use crate::metrics::{binary_auc, concordance_counts, time_dependent_auc_raw};
use crate::numkit::{GradChecker, GradReport, OpKind, ParamStore, Tape, Tensor, Var};

pub const GRAD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 5;
/// Relu inputs must sit at least this many steps away from zero.
pub const KINK_MARGIN: f64 = 10.0;
const MAX_REDRAWS: usize = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::normal(rows, cols, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(0.5..2.0)).collect(),
    )
    .expect("shape")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry gets a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

/// Gradient check of a single op on random inputs drawn from `seed`.
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (a_t, b_t) = match kind {
        OpKind::MatMul => (rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 2)),
        OpKind::Cosine => (rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 2, 4)),
        OpKind::DivScalar => (rand_tensor(&mut rng, 3, 4), positive(&mut rng, 1, 1)),
        OpKind::Log => (positive(&mut rng, 3, 4), rand_tensor(&mut rng, 1, 4)),
        OpKind::LayerNorm => (rand_tensor(&mut rng, 3, 4), positive(&mut rng, 1, 4)),
        OpKind::Relu => {
            let floor = KINK_MARGIN * GRAD_STEP;
            let a = rand_tensor(&mut rng, 3, 4).map(|x| {
                if x.abs() < floor {
                    floor.copysign(x)
                } else {
                    x
                }
            });
            (a, rand_tensor(&mut rng, 3, 4))
        }
        _ => (rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 3, 4)),
    };
    let a = store.add("a", a_t);
    let b = store.add("b", b_t);
    let c = store.add("c", rand_tensor(&mut rng, 1, 4));
    let r_seed: u64 = rng.gen();
    let checker = GradChecker::new(GRAD_STEP, OP_TOLERANCE)?.with_fault(fault);
    checker.check(kind.name(), &store, |tape, s| {
        let (av, bv, cv) = (tape.param(s, a), tape.param(s, b), tape.param(s, c));
        let out = match kind {
            OpKind::MatMul => tape.matmul(av, bv)?,
            OpKind::Add => tape.add(av, bv)?,
            OpKind::Sub => tape.sub(av, bv)?,
            OpKind::Mul => tape.mul(av, bv)?,
            OpKind::Scale => tape.scale(av, 1.7),
            OpKind::AddScalar => tape.add_scalar(av, 0.3),
            OpKind::DivScalar => tape.div_scalar(av, bv)?,
            OpKind::Transpose => tape.transpose(av),
            OpKind::ConcatRows => tape.concat_rows(&[av, bv])?,
            OpKind::ConcatCols => tape.concat_cols(&[av, bv])?,
            OpKind::SliceRows => tape.slice_rows(av, 1, 2)?,
            OpKind::SliceCols => tape.slice_cols(av, 1, 2)?,
            OpKind::MeanRows => tape.mean_rows(av),
            OpKind::Sum => tape.sum(av),
            OpKind::RowSums => tape.row_sums(av),
            OpKind::Softmax => tape.softmax_rows(av),
            OpKind::LogSoftmax => tape.log_softmax_rows(av),
            OpKind::Cosine => tape.cosine_rows(av, bv)?,
            OpKind::Relu => tape.relu(av),
            OpKind::Sigmoid => tape.sigmoid(av),
            OpKind::Log => tape.log(av),
            OpKind::LayerNorm => tape.layer_norm_rows(av, bv, cv)?,
            OpKind::Leaf => av,
        };
        let (rows, cols) = tape.shape(out);
        let r = Tensor::normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(r_seed));
        weighted_sum(tape, out, &r)
    })
}

/// Worst-case report per op over [`SEEDS`] seeds.
pub fn op_suite(fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&kind| {
            let mut worst: Option<GradReport> = None;
            for seed in 0..SEEDS {
                let r = check_op(kind, seed, fault)?;
                if worst
                    .as_ref()
                    .is_none_or(|w| r.max_rel_err > w.max_rel_err)
                {
                    worst = Some(r);
                }
            }
            Ok(worst.expect("at least one seed"))
        })
        .collect()
}

/// Small configuration used for whole-model gradient checks.
pub fn small_model_config(task: Task) -> RunConfig {
    RunConfig {
        d: 8,
        prototypes: 3,
        gene_groups: 2,
        registers: 1,
        ..RunConfig::for_task(task)
    }
}

/// Gradient check of the complete training loss (task objective plus
/// γ·modularity) with respect to every model parameter.
pub fn check_full_model(task: Task, seed: u64, fault: Option<OpKind>) -> Result<GradReport> {
    let config = small_model_config(task).resolved()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gene_width = 5;
    let outputs = if task.is_diagnosis() { 3 } else { 4 };
    // Redraw until every relu input clears its kink by KINK_MARGIN steps.
    let mut attempts = 0;
    let (model, patches, groups) = loop {
        let model = Model::init(&config, gene_width, outputs, &mut rng);
        let patches = Tensor::normal(6, config.d, 1.0, &mut rng);
        let groups = Tensor::normal(config.gene_groups, gene_width, 1.0, &mut rng);
        let mut tape = Tape::new();
        model.forward_with(&mut tape, &model.store, &patches, &groups, &config)?;
        if tape.relu_margin() >= KINK_MARGIN * GRAD_STEP {
            break (model, patches, groups);
        }
        attempts += 1;
        if attempts == MAX_REDRAWS {
            return Err(Error::Contract(format!(
                "no kink-free draw for seed {seed} after {MAX_REDRAWS} attempts"
            )));
        }
    };
    let label = rng.gen_range(0..outputs);
    let target = SurvivalTarget {
        time: 1.0,
        censored: rng.gen_bool(0.5),
        bin: label,
    };
    let checker = GradChecker::new(GRAD_STEP, MODEL_TOLERANCE)?.with_fault(fault);
    checker.check(&format!("full_model_{task}"), &model.store, |tape, s| {
        let fwd = model.forward_with(tape, s, &patches, &groups, &config)?;
        let objective = if task.is_diagnosis() {
            cross_entropy(tape, fwd.logits, label)?
        } else {
            nll_survival(tape, fwd.logits, &target, config.uncensored_weight)?
        };
        match fwd.modularity {
            Some(m) => total_loss(tape, objective, m, config.gamma),
            None => Ok(objective),
        }
    })
}

pub fn model_suite(fault: Option<OpKind>) -> Result<Vec<GradReport>> {
    Task::ALL
        .iter()
        .map(|&task| {
            let mut worst: Option<GradReport> = None;
            for seed in 0..SEEDS {
                let r = check_full_model(task, seed, fault)?;
                if worst
                    .as_ref()
                    .is_none_or(|w| r.max_rel_err > w.max_rel_err)
                {
                    worst = Some(r);
                }
            }
            Ok(worst.expect("at least one seed"))
        })
        .collect()
}

/// Outcome of one brute-force equivalence suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    fn new(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max_abs_err = errors.iter().copied().fold(0.0, f64::max);
        let finite = errors.iter().all(|e| e.is_finite());
        Self {
            name: name.to_string(),
            cases: errors.len(),
            max_abs_err,
            tolerance,
            pass: finite && max_abs_err <= tolerance,
        }
    }
}

/// Newman's same-community sum `Σ_{c_i = c_j} (A_ij − k_i k_j / 2e)` with
/// `A = relu(cos)` over instance rows and a zeroed diagonal, by plain loops.
pub fn newman_same_community_sum(instances: &Tensor, community: &[usize]) -> f64 {
    let a = relu_cosine_affinity(instances);
    let m = a.len();
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let two_e: f64 = k.iter().sum();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if community[i] == community[j] {
                total += a[i][j] - k[i] * k[j] / two_e;
            }
        }
    }
    total
}

fn newman_edge_mass(instances: &Tensor) -> f64 {
    relu_cosine_affinity(instances).iter().flatten().sum()
}

fn relu_cosine_affinity(instances: &Tensor) -> Vec<Vec<f64>> {
    let m = instances.rows();
    let norm = |i: usize| {
        instances
            .row(i)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-12)
    };
    let mut a = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let dot: f64 = instances
                    .row(i)
                    .iter()
                    .zip(instances.row(j))
                    .map(|(x, y)| x * y)
                    .sum();
                a[i][j] = (dot / (norm(i) * norm(j))).max(0.0);
            }
        }
    }
    a
}

fn modularity_oracle_errors(cases: u64) -> Result<Vec<f64>> {
    let mut errors = Vec::new();
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let m = rng.gen_range(2..=6);
        let k = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=5);
        // Redraw until the relu-cosine graph has at least one edge.
        let instances = loop {
            let x = Tensor::normal(m, d, 1.0, &mut rng);
            if newman_edge_mass(&x) > 0.0 {
                break x;
            }
        };
        let community: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let mut s = Tensor::zeros(k, m);
        for (i, &c) in community.iter().enumerate() {
            s.set(c, i, 1.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(instances.clone());
        let graph = affinity_graph(&mut tape, x, false)?;
        let two_e = tape.value(graph.edge_mass_2e).item();
        let w = modularity_weight(&mut tape, &graph)?;
        let s_p = tape.constant(s);
        let s_g = tape.constant(Tensor::zeros(1, m));
        let bundle = AssignmentBundle {
            s_p,
            s_g,
            affinity: graph.affinity,
            weight_w: Some(w),
            degree: graph.degree,
            edge_mass_2e: graph.edge_mass_2e,
        };
        let loss = modularity_loss(&mut tape, &bundle, 1.0, 0.0)?;
        let got = -two_e * tape.value(loss).item();
        errors.push((got - newman_same_community_sum(&instances, &community)).abs());
    }
    Ok(errors)
}

/// The 3-node path `0–1–2` with unit weights, communities {0,1} and {2}:
/// modularity loss is exactly 0.125.
pub fn three_path_loss() -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0],
    ])?);
    let graph = crate::assignment::graph_from_affinity(&mut tape, a);
    let w = modularity_weight(&mut tape, &graph)?;
    let s_p = tape.constant(Tensor::from_rows(&[
        vec![1.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ])?);
    let s_g = tape.constant(Tensor::zeros(1, 3));
    let bundle = AssignmentBundle {
        s_p,
        s_g,
        affinity: graph.affinity,
        weight_w: Some(w),
        degree: graph.degree,
        edge_mass_2e: graph.edge_mass_2e,
    };
    let loss = modularity_loss(&mut tape, &bundle, 1.0, 0.0)?;
    Ok(tape.value(loss).item())
}

fn pair_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1;
                twice += match scores[i].partial_cmp(&scores[j]) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn auc_oracle_errors(cases: u64) -> Vec<f64> {
    (0..cases)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let n = rng.gen_range(2..=50);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            positive[0] = true;
            positive[1] = false;
            match binary_auc(&scores, &positive) {
                Ok(a) => (a - pair_auc(&scores, &positive)).abs(),
                Err(_) => f64::INFINITY,
            }
        })
        .collect()
}

fn survival_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<SurvivalTarget>) {
    let risks = (0..n).map(|_| rng.gen_range(0..8) as f64).collect();
    let targets = (0..n)
        .map(|_| SurvivalTarget {
            time: rng.gen_range(1..20) as f64,
            censored: rng.gen_bool(0.3),
            bin: 0,
        })
        .collect();
    (risks, targets)
}

fn cindex_oracle_errors(cases: u64) -> Vec<f64> {
    let mut errors = Vec::new();
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let n = rng.gen_range(2..=50);
        let (risks, targets) = survival_case(&mut rng, n);
        let (mut twice, mut pairs) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if !targets[i].censored && targets[i].time < targets[j].time {
                    pairs += 1;
                    twice += if risks[i] > risks[j] {
                        2
                    } else if risks[i] == risks[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        let got = concordance_counts(&risks, &targets).index().ok();
        let expect = (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64);
        errors.push(match (got, expect) {
            (Some(g), Some(e)) => (g - e).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        });
    }
    errors
}

fn td_auc_oracle_errors(cases: u64) -> Vec<f64> {
    let mut errors = Vec::new();
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let n = rng.gen_range(10..=50);
        let (risks, targets) = survival_case(&mut rng, n);
        let times = [4.0, 8.5, 13.0];
        let (points, skipped) = time_dependent_auc_raw(&risks, &targets, &times);
        let mut worst: f64 = 0.0;
        let mut seen = 0;
        for &t in &times {
            let mut scores = Vec::new();
            let mut positive = Vec::new();
            for (r, s) in risks.iter().zip(&targets) {
                if !s.censored && s.time <= t {
                    scores.push(*r);
                    positive.push(true);
                } else if s.time > t {
                    scores.push(*r);
                    positive.push(false);
                }
            }
            let has_both = positive.iter().any(|&p| p) && positive.iter().any(|&p| !p);
            match points.iter().find(|p| p.time == t) {
                Some(p) if has_both => {
                    worst = worst.max((p.auc - pair_auc(&scores, &positive)).abs());
                    seen += 1;
                }
                None if !has_both => {
                    if !skipped.contains(&t) {
                        worst = f64::INFINITY;
                    }
                    seen += 1;
                }
                _ => worst = f64::INFINITY,
            }
        }
        if seen != times.len() {
            worst = f64::INFINITY;
        }
        errors.push(worst);
    }
    errors
}

fn survival_spot_errors() -> Result<Vec<f64>> {
    let mut errors = Vec::new();
    for censored in [false, true] {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(1, 1));
        let target = SurvivalTarget {
            time: 1.0,
            censored,
            bin: 0,
        };
        let loss = nll_survival(&mut tape, logits, &target, 0.0)?;
        errors.push((tape.value(loss).item() - std::f64::consts::LN_2).abs());
    }
    Ok(errors)
}

/// Every oracle suite: modularity (20 graphs, 1e-9), the 3-path example
/// (exact), ROC-AUC (50 instances, exact), C-index (50, exact),
/// time-dependent AUC (20, exact), and the single-bin survival values at
/// h = 0.5 (ln 2 = 0.693147..., 1e-9).
pub fn oracle_suite() -> Result<Vec<OracleReport>> {
    let path = three_path_loss()?;
    Ok(vec![
        OracleReport::new("modularity_newman", &modularity_oracle_errors(20)?, 1e-9),
        OracleReport::new("modularity_three_path", &[(path - 0.125).abs()], 0.0),
        OracleReport::new("roc_auc_pairs", &auc_oracle_errors(50), 0.0),
        OracleReport::new("concordance_pairs", &cindex_oracle_errors(50), 0.0),
        OracleReport::new("td_auc_case_control", &td_auc_oracle_errors(20), 0.0),
        OracleReport::new("survival_single_bin", &survival_spot_errors()?, 1e-9),
    ])
}
