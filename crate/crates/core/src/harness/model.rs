//! Model assembly per variant and the per-sample forward pass.

use rand::Rng;

use super::config::{RunConfig, Variant};
use crate::assignment::{build_bundle, modularity_loss};
use crate::encoders::{
    encode_genomic, encode_pathology, GenomicEncoderParams, PathologyEncoderParams,
};
use crate::error::{Error, Result};
use crate::fusion::{
    bi_fusion, concat_with_registers, decode_unified, pool_and_head, BiFusionParams, FusionParams,
    TaskHead, TokenLayout,
};
use crate::numkit::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Fuser {
    Unified(FusionParams),
    Bi {
        params: BiFusionParams,
        head: TaskHead,
    },
    Concat(TaskHead),
    Add(TaskHead),
    PathOnly(TaskHead),
    GeneOnly(TaskHead),
}

impl Fuser {
    pub fn head(&self) -> &TaskHead {
        match self {
            Fuser::Unified(f) => &f.head,
            Fuser::Bi { head, .. }
            | Fuser::Concat(head)
            | Fuser::Add(head)
            | Fuser::PathOnly(head)
            | Fuser::GeneOnly(head) => head,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub path: Option<PathologyEncoderParams>,
    pub gene: Option<GenomicEncoderParams>,
    pub fuser: Fuser,
    pub prototypes: usize,
    pub gene_groups: usize,
    pub outputs: usize,
}

/// Graph outputs for one sample.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Present when the variant uses modularity, γ > 0, and the bag has
    /// at least two patches.
    pub modularity: Option<Var>,
}

impl Model {
    /// `gene_width` is d_g; `outputs` is the class or bin count.
    pub fn init<R: Rng + ?Sized>(
        config: &RunConfig,
        gene_width: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let d = config.d;
        let v = config.variant;
        let path = v.uses_pathology().then(|| {
            PathologyEncoderParams::init(
                &mut store,
                d,
                config.prototypes,
                config.cross_layers,
                config.path_self_layers,
                config.heads,
                rng,
            )
        });
        let gene = v.uses_genomics().then(|| {
            GenomicEncoderParams::init(
                &mut store,
                d,
                gene_width,
                config.gene_groups,
                config.gene_self_layers,
                config.heads,
                rng,
            )
        });
        let task = config.task;
        let fuser = match v {
            Variant::Full | Variant::NoModularity | Variant::NoRegisters => {
                Fuser::Unified(FusionParams::init(
                    &mut store,
                    d,
                    config.registers,
                    config.decoder_layers,
                    config.heads,
                    task,
                    outputs,
                    rng,
                ))
            }
            Variant::Bifusion => Fuser::Bi {
                params: BiFusionParams::init(&mut store, d, config.heads, rng),
                head: TaskHead::init(&mut store, task, 2 * d, outputs, rng),
            },
            Variant::Concat => Fuser::Concat(TaskHead::init(&mut store, task, 2 * d, outputs, rng)),
            Variant::Add => Fuser::Add(TaskHead::init(&mut store, task, d, outputs, rng)),
            Variant::PathOnly => Fuser::PathOnly(TaskHead::init(&mut store, task, d, outputs, rng)),
            Variant::GeneOnly => Fuser::GeneOnly(TaskHead::init(&mut store, task, d, outputs, rng)),
        };
        Self {
            store,
            path,
            gene,
            fuser,
            prototypes: config.prototypes,
            gene_groups: config.gene_groups,
            outputs,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        patches: &Tensor,
        groups: &Tensor,
        config: &RunConfig,
    ) -> Result<Forward> {
        self.forward_with(tape, &self.store, patches, groups, config)
    }

    /// Forward pass reading weights from `store` (which must share this
    /// model's layout), so gradient checks can perturb a copy.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patches: &Tensor,
        groups: &Tensor,
        config: &RunConfig,
    ) -> Result<Forward> {
        let x = tape.constant(patches.clone());
        let g = tape.constant(groups.clone());
        let path = match &self.path {
            Some(p) => Some(encode_pathology(tape, store, x, p)?),
            None => None,
        };
        let gene = match &self.gene {
            Some(p) => Some(encode_genomic(tape, store, g, p)?),
            None => None,
        };

        let want_modularity = config.variant.uses_modularity() && config.gamma != 0.0;
        let modularity = match (&path, &gene) {
            (Some(pe), Some(ge)) if want_modularity && patches.rows() >= 2 => {
                let bundle = build_bundle(
                    tape,
                    pe.prototypes,
                    ge.prototypes,
                    x,
                    config.keep_self_loops,
                )?;
                Some(modularity_loss(tape, &bundle, config.alpha, config.beta)?)
            }
            _ => None,
        };

        let cls = |tape: &mut Tape, tokens: Var| tape.slice_rows(tokens, 0, 1);
        let logits = match (&self.fuser, path, gene) {
            (Fuser::Unified(f), Some(pe), Some(ge)) => {
                let unified =
                    concat_with_registers(tape, store, pe.tokens, ge.tokens, f.registers)?;
                let decoded = decode_unified(tape, store, unified, &f.decoder_layers)?;
                let layout = TokenLayout {
                    prototypes: self.prototypes,
                    registers: f.registers.map_or(0, |r| store.get(r).rows()),
                    groups: self.gene_groups,
                };
                pool_and_head(tape, store, decoded, layout, &f.head)?
            }
            (Fuser::Bi { params, head }, Some(pe), Some(ge)) => {
                let pooled = bi_fusion(tape, store, pe.tokens, ge.tokens, params)?;
                head.apply(tape, store, pooled)?
            }
            (Fuser::Concat(head), Some(pe), Some(ge)) => {
                let (a, b) = (cls(tape, pe.tokens)?, cls(tape, ge.tokens)?);
                let pooled = tape.concat_cols(&[a, b])?;
                head.apply(tape, store, pooled)?
            }
            (Fuser::Add(head), Some(pe), Some(ge)) => {
                let (a, b) = (cls(tape, pe.tokens)?, cls(tape, ge.tokens)?);
                let pooled = tape.add(a, b)?;
                head.apply(tape, store, pooled)?
            }
            (Fuser::PathOnly(head), Some(pe), _) => {
                let pooled = cls(tape, pe.tokens)?;
                head.apply(tape, store, pooled)?
            }
            (Fuser::GeneOnly(head), _, Some(ge)) => {
                let pooled = cls(tape, ge.tokens)?;
                head.apply(tape, store, pooled)?
            }
            _ => return Err(Error::Contract("fuser does not match encoders".into())),
        };
        Ok(Forward { logits, modularity })
    }
}
