//! Unimodal encoders: prototype-query pathology encoder and gene-group encoder.

use rand::Rng;

use crate::attention::{
    cross_attend, self_attention_stack, CrossAttentionParams, SelfAttentionBlockParams,
};
use crate::error::{Error, Result};
use crate::numkit::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PathologyEncoderParams {
    pub init_prototypes: ParamId,
    pub cls_token: ParamId,
    pub cross_layers: Vec<CrossAttentionParams>,
    pub self_layers: Vec<SelfAttentionBlockParams>,
}

impl PathologyEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        prototypes: usize,
        cross_layers: usize,
        self_layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            init_prototypes: store.add(
                "path.init_prototypes",
                Tensor::normal(prototypes, d, std, rng),
            ),
            cls_token: store.add("path.cls", Tensor::normal(1, d, std, rng)),
            cross_layers: (0..cross_layers)
                .map(|l| {
                    CrossAttentionParams::init(store, &format!("path.cross{l}"), d, heads, rng)
                })
                .collect(),
            self_layers: (0..self_layers)
                .map(|l| {
                    SelfAttentionBlockParams::init(store, &format!("path.self{l}"), d, heads, rng)
                })
                .collect(),
        }
    }
}

/// Per-group two-layer perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct GroupMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct GenomicEncoderParams {
    pub group_mlps: Vec<GroupMlp>,
    pub gene_cls_token: ParamId,
    pub self_layers: Vec<SelfAttentionBlockParams>,
}

impl GenomicEncoderParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        group_width: usize,
        groups: usize,
        self_layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let b_in = 1.0 / (group_width as f64).sqrt();
        let b_hid = 1.0 / (d as f64).sqrt();
        let group_mlps = (0..groups)
            .map(|n| GroupMlp {
                w1: store.add(
                    format!("gene.mlp{n}.w1"),
                    Tensor::uniform(group_width, d, b_in, rng),
                ),
                b1: store.add(format!("gene.mlp{n}.b1"), Tensor::zeros(1, d)),
                w2: store.add(format!("gene.mlp{n}.w2"), Tensor::uniform(d, d, b_hid, rng)),
                b2: store.add(format!("gene.mlp{n}.b2"), Tensor::zeros(1, d)),
            })
            .collect();
        Self {
            group_mlps,
            gene_cls_token: store.add("gene.cls", Tensor::normal(1, d, b_hid, rng)),
            self_layers: (0..self_layers)
                .map(|l| {
                    SelfAttentionBlockParams::init(store, &format!("gene.self{l}"), d, heads, rng)
                })
                .collect(),
        }
    }
}

/// Encoder output: the token sequence (class token at row 0) plus the
/// prototype rows used for assignment.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub tokens: Var,
    pub prototypes: Var,
}

/// Cross-attention rounds from the learnable initial prototypes, then the
/// class token is prepended and the self-attention stack applied.
/// `tokens` is `(K+1)×d`, `prototypes` is the `K×d` post-cross-attention set.
pub fn encode_pathology(
    tape: &mut Tape,
    store: &ParamStore,
    patches: Var,
    params: &PathologyEncoderParams,
) -> Result<Encoded> {
    if tape.shape(patches).0 == 0 {
        return Err(Error::Contract("pathology bag has no patches".into()));
    }
    let mut c = tape.param(store, params.init_prototypes);
    for layer in &params.cross_layers {
        c = cross_attend(tape, store, c, patches, layer)?;
    }
    let cls = tape.param(store, params.cls_token);
    let seq = tape.concat_rows(&[cls, c])?;
    let tokens = self_attention_stack(tape, store, seq, &params.self_layers)?;
    Ok(Encoded {
        tokens,
        prototypes: c,
    })
}

/// Embeds group `n` with its own perceptron, prepends the gene class token,
/// and applies the self-attention stack. `prototypes` are the embedded rows
/// before self-attention.
pub fn encode_genomic(
    tape: &mut Tape,
    store: &ParamStore,
    groups: Var,
    params: &GenomicEncoderParams,
) -> Result<Encoded> {
    let (n, width) = tape.shape(groups);
    if n == 0 || n != params.group_mlps.len() {
        return Err(Error::Dimension {
            op: "encode_genomic",
            left: (n, width),
            right: (params.group_mlps.len(), width),
        });
    }
    let mut embedded = Vec::with_capacity(n);
    for (i, mlp) in params.group_mlps.iter().enumerate() {
        let x = tape.slice_rows(groups, i, 1)?;
        let (w1, b1) = (tape.param(store, mlp.w1), tape.param(store, mlp.b1));
        let (w2, b2) = (tape.param(store, mlp.w2), tape.param(store, mlp.b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        embedded.push(tape.add(h, b2)?);
    }
    let prototypes = tape.concat_rows(&embedded)?;
    let cls = tape.param(store, params.gene_cls_token);
    let seq = tape.concat_rows(&[cls, prototypes])?;
    let tokens = self_attention_stack(tape, store, seq, &params.self_layers)?;
    Ok(Encoded { tokens, prototypes })
}
