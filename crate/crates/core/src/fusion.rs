//! Register tokens, the unified multimodal decoder, task heads, and the
//! two-way cross-attention ("bi-fusion") replacement used for ablation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attend, self_attention_stack, CrossAttentionParams, SelfAttentionBlockParams,
};
use crate::error::{Error, Result};
use crate::numkit::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Grading,
    Classification,
    Survival,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Grading, Task::Classification, Task::Survival];

    pub fn name(self) -> &'static str {
        match self {
            Task::Grading => "grading",
            Task::Classification => "classification",
            Task::Survival => "survival",
        }
    }

    pub fn is_diagnosis(self) -> bool {
        !matches!(self, Task::Survival)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Linear map from a pooled row to task logits (no bias).
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task: Task,
    pub weight: ParamId,
}

impl TaskHead {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        task: Task,
        in_width: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_width as f64).sqrt();
        Self {
            task,
            weight: store.add(
                format!("head.{task}"),
                Tensor::uniform(in_width, outputs, bound, rng),
            ),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.matmul(pooled, w)
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    /// `None` when the register count is zero.
    pub registers: Option<ParamId>,
    pub decoder_layers: Vec<SelfAttentionBlockParams>,
    pub head: TaskHead,
}

impl FusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        registers: usize,
        decoder_layers: usize,
        heads: usize,
        task: Task,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let registers = (registers > 0)
            .then(|| store.add("fusion.registers", Tensor::normal(registers, d, std, rng)));
        Self {
            registers,
            decoder_layers: (0..decoder_layers)
                .map(|l| {
                    SelfAttentionBlockParams::init(store, &format!("fusion.dec{l}"), d, heads, rng)
                })
                .collect(),
            head: TaskHead::init(store, task, 2 * d, outputs, rng),
        }
    }

    pub fn register_count(&self, store: &ParamStore) -> usize {
        self.registers.map_or(0, |r| store.get(r).rows())
    }
}

#[derive(Clone, Debug)]
pub struct BiFusionParams {
    pub path_from_gene: CrossAttentionParams,
    pub gene_from_path: CrossAttentionParams,
}

impl BiFusionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            path_from_gene: CrossAttentionParams::init(store, "bifusion.p2g", d, heads, rng),
            gene_from_path: CrossAttentionParams::init(store, "bifusion.g2p", d, heads, rng),
        }
    }
}

/// Row layout of the unified sequence `[path tokens; registers; gene tokens]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub prototypes: usize,
    pub registers: usize,
    pub groups: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.prototypes + 1 + self.registers + self.groups + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn path_cls_row(&self) -> usize {
        0
    }

    pub fn gene_cls_row(&self) -> usize {
        self.prototypes + 1 + self.registers
    }
}

/// `[path_tokens; R; gene_tokens]`, or the plain two-block concatenation
/// when there are no registers.
pub fn concat_with_registers(
    tape: &mut Tape,
    store: &ParamStore,
    path_tokens: Var,
    gene_tokens: Var,
    registers: Option<ParamId>,
) -> Result<Var> {
    match registers {
        Some(r) => {
            let rv = tape.param(store, r);
            tape.concat_rows(&[path_tokens, rv, gene_tokens])
        }
        None => tape.concat_rows(&[path_tokens, gene_tokens]),
    }
}

pub fn decode_unified(
    tape: &mut Tape,
    store: &ParamStore,
    unified: Var,
    layers: &[SelfAttentionBlockParams],
) -> Result<Var> {
    self_attention_stack(tape, store, unified, layers)
}

/// The two class-token rows of the decoded sequence as one 1×2d row.
pub fn pool_class_tokens(tape: &mut Tape, decoded: Var, layout: TokenLayout) -> Result<Var> {
    let rows = tape.shape(decoded).0;
    if rows != layout.len() {
        return Err(Error::Contract(format!(
            "decoded sequence has {rows} rows, layout expects {}",
            layout.len()
        )));
    }
    let p = tape.slice_rows(decoded, layout.path_cls_row(), 1)?;
    let g = tape.slice_rows(decoded, layout.gene_cls_row(), 1)?;
    tape.concat_cols(&[p, g])
}

/// Pools the decoded class tokens and applies the task head.
pub fn pool_and_head(
    tape: &mut Tape,
    store: &ParamStore,
    decoded: Var,
    layout: TokenLayout,
    head: &TaskHead,
) -> Result<Var> {
    let pooled = pool_class_tokens(tape, decoded, layout)?;
    head.apply(tape, store, pooled)
}

/// Two-way cross-attention: pathology tokens attend to genomic tokens and
/// vice versa; the two updated class-token rows are concatenated (1×2d).
pub fn bi_fusion(
    tape: &mut Tape,
    store: &ParamStore,
    path_tokens: Var,
    gene_tokens: Var,
    params: &BiFusionParams,
) -> Result<Var> {
    let p = cross_attend(
        tape,
        store,
        path_tokens,
        gene_tokens,
        &params.path_from_gene,
    )?;
    let g = cross_attend(
        tape,
        store,
        gene_tokens,
        path_tokens,
        &params.gene_from_path,
    )?;
    let pc = tape.slice_rows(p, 0, 1)?;
    let gc = tape.slice_rows(g, 0, 1)?;
    tape.concat_cols(&[pc, gc])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::grad_check;

    #[test]
    fn unified_sequence_shapes_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let fusion = FusionParams::init(&mut store, 32, 4, 2, 1, Task::Grading, 3, &mut rng);
        let mut tape = Tape::new();
        let path = tape.constant(Tensor::full(17, 32, 1.0));
        let gene = tape.constant(Tensor::full(7, 32, 2.0));
        let u = concat_with_registers(&mut tape, &store, path, gene, fusion.registers).unwrap();
        assert_eq!(tape.shape(u), (28, 32));
        let layout = TokenLayout {
            prototypes: 16,
            registers: 4,
            groups: 6,
        };
        assert_eq!(layout.len(), 28);
        assert_eq!(tape.value(u).row(layout.path_cls_row()), &[1.0; 32]);
        assert_eq!(tape.value(u).row(layout.gene_cls_row()), &[2.0; 32]);
        assert_eq!(
            tape.value(u).row(17),
            store.get(fusion.registers.unwrap()).row(0)
        );

        let plain = concat_with_registers(&mut tape, &store, path, gene, None).unwrap();
        assert_eq!(tape.shape(plain), (24, 32));
    }

    #[test]
    fn decode_zero_layers_is_identity_and_shapes_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let fusion = FusionParams::init(&mut store, 8, 2, 2, 1, Task::Survival, 4, &mut rng);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::normal(9, 8, 1.0, &mut rng));
        assert_eq!(decode_unified(&mut tape, &store, u, &[]).unwrap(), u);
        let out = decode_unified(&mut tape, &store, u, &fusion.decoder_layers).unwrap();
        assert_eq!(tape.shape(out), (9, 8));
    }

    #[test]
    fn head_output_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (task, outputs) in [(Task::Grading, 3), (Task::Survival, 4)] {
            let mut store = ParamStore::new();
            let fusion = FusionParams::init(&mut store, 4, 1, 1, 1, task, outputs, &mut rng);
            let layout = TokenLayout {
                prototypes: 2,
                registers: 1,
                groups: 2,
            };
            let mut tape = Tape::new();
            let dec = tape.constant(Tensor::normal(layout.len(), 4, 1.0, &mut rng));
            let logits = pool_and_head(&mut tape, &store, dec, layout, &fusion.head).unwrap();
            assert_eq!(tape.shape(logits), (1, outputs));
        }
    }

    #[test]
    fn zero_tokens_and_zero_head_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let fusion = FusionParams::init(&mut store, 4, 0, 1, 1, Task::Grading, 3, &mut rng);
        *store.get_mut(fusion.head.weight) = Tensor::zeros(8, 3);
        let layout = TokenLayout {
            prototypes: 2,
            registers: 0,
            groups: 2,
        };
        let mut tape = Tape::new();
        let dec = tape.constant(Tensor::zeros(layout.len(), 4));
        let logits = pool_and_head(&mut tape, &store, dec, layout, &fusion.head).unwrap();
        assert_eq!(tape.value(logits), &Tensor::zeros(1, 3));
    }

    #[test]
    fn head_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = TaskHead::init(&mut store, Task::Grading, 6, 3, &mut rng);
        let pooled = Tensor::normal(1, 6, 1.0, &mut rng);
        let upstream = Tensor::normal(1, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = tape.constant(pooled.clone());
        let logits = head.apply(&mut tape, &store, pv).unwrap();
        let up = tape.constant(upstream.clone());
        let weighted = tape.mul(logits, up).unwrap();
        let loss = tape.sum(weighted);
        let g = tape.backward(loss, &store).unwrap();
        let outer = pooled.transpose().matmul(&upstream).unwrap();
        assert!(g.get(head.weight).max_abs_diff(&outer) < 1e-15);
    }

    #[test]
    fn marker_token_lands_in_pooled_vector() {
        // With no decoder layers the decoder is the identity, so sentinel class
        // tokens must appear verbatim in the pooled row for any I and N.
        for (k, i, n) in [(3, 0, 2), (3, 4, 2), (5, 2, 6)] {
            let layout = TokenLayout {
                prototypes: k,
                registers: i,
                groups: n,
            };
            let mut tape = Tape::new();
            let mut path = Tensor::zeros(k + 1, 2);
            path.row_mut(0).copy_from_slice(&[7.0, -7.0]);
            let mut gene = Tensor::zeros(n + 1, 2);
            gene.row_mut(0).copy_from_slice(&[9.0, -9.0]);
            let mut store = ParamStore::new();
            let regs = (i > 0).then(|| store.add("r", Tensor::full(i, 2, 0.5)));
            let (pv, gv) = (tape.constant(path), tape.constant(gene));
            let u = concat_with_registers(&mut tape, &store, pv, gv, regs).unwrap();
            let dec = decode_unified(&mut tape, &store, u, &[]).unwrap();
            let pooled = pool_class_tokens(&mut tape, dec, layout).unwrap();
            assert_eq!(tape.value(pooled).data(), &[7.0, -7.0, 9.0, -9.0]);
        }
    }

    #[test]
    fn registers_influence_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let fusion = FusionParams::init(&mut store, 8, 3, 2, 1, Task::Grading, 3, &mut rng);
        let layout = TokenLayout {
            prototypes: 4,
            registers: 3,
            groups: 2,
        };
        let path = Tensor::normal(5, 8, 1.0, &mut rng);
        let gene = Tensor::normal(3, 8, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (pv, gv) = (tape.constant(path), tape.constant(gene));
        let u = concat_with_registers(&mut tape, &store, pv, gv, fusion.registers).unwrap();
        let dec = decode_unified(&mut tape, &store, u, &fusion.decoder_layers).unwrap();
        let logits = pool_and_head(&mut tape, &store, dec, layout, &fusion.head).unwrap();
        let loss = tape.sum(logits);
        let g = tape.backward(loss, &store).unwrap();
        assert!(g.get(fusion.registers.unwrap()).norm() > 0.0);
    }

    #[test]
    fn decoder_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let fusion = FusionParams::init(&mut store, 4, 1, 1, 1, Task::Grading, 3, &mut rng);
        let u = store.add("u", Tensor::normal(4, 4, 1.0, &mut rng));
        let report = grad_check("decode_unified", &store, 1e-5, 1e-4, |t, s| {
            let uv = t.param(s, u);
            let dec = decode_unified(t, s, uv, &fusion.decoder_layers)?;
            let sq = t.mul(dec, dec)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn bi_fusion_zero_values_pass_class_tokens_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let params = BiFusionParams::init(&mut store, 4, 1, &mut rng);
        *store.get_mut(params.path_from_gene.w_v) = Tensor::zeros(4, 4);
        *store.get_mut(params.gene_from_path.w_v) = Tensor::zeros(4, 4);
        let path = Tensor::normal(3, 4, 1.0, &mut rng);
        let gene = Tensor::normal(5, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (pv, gv) = (tape.constant(path.clone()), tape.constant(gene.clone()));
        let pooled = bi_fusion(&mut tape, &store, pv, gv, &params).unwrap();
        assert_eq!(tape.shape(pooled), (1, 8));
        let expected =
            Tensor::concat_cols(&[&path.slice_rows(0, 1), &gene.slice_rows(0, 1)]).unwrap();
        assert_eq!(tape.value(pooled), &expected);
    }

    #[test]
    fn task_parsing() {
        assert_eq!("survival".parse::<Task>().unwrap(), Task::Survival);
        assert!("staging".parse::<Task>().is_err());
    }
}
