//! Residual prototype cross-attention and pre-norm self-attention blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{ParamId, ParamStore, Tape, Tensor, Var};

/// Query/key/value projections for [`cross_attend`].
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
}

impl CrossAttentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            w_q: store.add(format!("{name}.w_q"), Tensor::uniform(d, d, bound, rng)),
            w_k: store.add(format!("{name}.w_k"), Tensor::uniform(d, d, bound, rng)),
            w_v: store.add(format!("{name}.w_v"), Tensor::uniform(d, d, bound, rng)),
            heads,
        }
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_w2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub heads: usize,
}

impl SelfAttentionBlockParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        let b4 = 1.0 / ((4 * d) as f64).sqrt();
        Self {
            w_q: store.add(format!("{name}.w_q"), Tensor::uniform(d, d, b, rng)),
            w_k: store.add(format!("{name}.w_k"), Tensor::uniform(d, d, b, rng)),
            w_v: store.add(format!("{name}.w_v"), Tensor::uniform(d, d, b, rng)),
            w_o: store.add(format!("{name}.w_o"), Tensor::uniform(d, d, b, rng)),
            ffn_w1: store.add(format!("{name}.ffn_w1"), Tensor::uniform(d, 4 * d, b, rng)),
            ffn_w2: store.add(format!("{name}.ffn_w2"), Tensor::uniform(4 * d, d, b4, rng)),
            ln1_gain: store.add(format!("{name}.ln1_gain"), Tensor::ones(1, d)),
            ln1_bias: store.add(format!("{name}.ln1_bias"), Tensor::zeros(1, d)),
            ln2_gain: store.add(format!("{name}.ln2_gain"), Tensor::ones(1, d)),
            ln2_bias: store.add(format!("{name}.ln2_bias"), Tensor::zeros(1, d)),
            heads,
        }
    }
}

/// Scaled dot-product attention of queries over keys/values, split into
/// `heads` column groups. Each head scales by `1/sqrt(head width)`.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(q).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible into {heads} heads"
        )));
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// One residual cross-attention round:
/// `C = C_prev + softmax(C_prev·W_q·(P·W_k)ᵀ / sqrt(d)) · (P·W_v)`.
pub fn cross_attend(
    tape: &mut Tape,
    store: &ParamStore,
    c_prev: Var,
    p: Var,
    params: &CrossAttentionParams,
) -> Result<Var> {
    let (cs, ps) = (tape.shape(c_prev), tape.shape(p));
    if cs.1 != ps.1 {
        return Err(Error::Dimension {
            op: "cross_attend",
            left: cs,
            right: ps,
        });
    }
    let wq = tape.param(store, params.w_q);
    let wk = tape.param(store, params.w_k);
    let wv = tape.param(store, params.w_v);
    let q = tape.matmul(c_prev, wq)?;
    let k = tape.matmul(p, wk)?;
    let v = tape.matmul(p, wv)?;
    let update = attend(tape, q, k, v, params.heads)?;
    tape.add(c_prev, update)
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(·))` with a relu FFN of width 4d.
pub fn self_attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &SelfAttentionBlockParams,
) -> Result<Var> {
    let d = store.get(params.w_q).rows();
    let (rows, cols) = tape.shape(x);
    if cols != d {
        return Err(Error::Dimension {
            op: "self_attention_block",
            left: (rows, cols),
            right: (d, d),
        });
    }
    let p = |tape: &mut Tape, id| tape.param(store, id);

    let (g1, b1) = (p(tape, params.ln1_gain), p(tape, params.ln1_bias));
    let h = tape.layer_norm_rows(x, g1, b1)?;
    let (wq, wk, wv, wo) = (
        p(tape, params.w_q),
        p(tape, params.w_k),
        p(tape, params.w_v),
        p(tape, params.w_o),
    );
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let a = attend(tape, q, k, v, params.heads)?;
    let a = tape.matmul(a, wo)?;
    let x1 = tape.add(x, a)?;

    let (g2, b2) = (p(tape, params.ln2_gain), p(tape, params.ln2_bias));
    let h2 = tape.layer_norm_rows(x1, g2, b2)?;
    let (w1, w2) = (p(tape, params.ffn_w1), p(tape, params.ffn_w2));
    let f = tape.matmul(h2, w1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, w2)?;
    tape.add(x1, f)
}

/// Applies blocks in order; an empty slice is the identity.
pub fn self_attention_stack(
    tape: &mut Tape,
    store: &ParamStore,
    mut x: Var,
    blocks: &[SelfAttentionBlockParams],
) -> Result<Var> {
    for block in blocks {
        x = self_attention_block(tape, store, x, block)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numkit::grad_check;

    fn identity_cross(store: &mut ParamStore, d: usize) -> CrossAttentionParams {
        CrossAttentionParams {
            w_q: store.add("q", Tensor::identity(d)),
            w_k: store.add("k", Tensor::identity(d)),
            w_v: store.add("v", Tensor::identity(d)),
            heads: 1,
        }
    }

    #[test]
    fn cross_attend_hand_example() {
        // Oracle: scores [1/sqrt2, 0], weights = [e^s, 1] / (e^s + 1).
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let w1 = 1.0 / (s.exp() + 1.0);
        assert!((w0 - 0.669761).abs() < 1e-6);

        let mut store = ParamStore::new();
        let params = identity_cross(&mut store, 2);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let out = cross_attend(&mut tape, &store, c, p, &params).unwrap();
        let out = tape.value(out);
        assert!((out.get(0, 0) - (1.0 + w0)).abs() < 1e-15);
        assert!((out.get(0, 1) - w1).abs() < 1e-15);
    }

    #[test]
    fn cross_attend_identical_values_average_to_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let params = CrossAttentionParams::init(&mut store, "x", 4, 1, &mut rng);
        let v = Tensor::normal(1, 4, 1.0, &mut rng);
        let bag = Tensor::concat_rows(&[&v, &v, &v, &v, &v]).unwrap();
        let c0 = Tensor::normal(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let cv = tape.constant(c0.clone());
        let pv = tape.constant(bag);
        let out = cross_attend(&mut tape, &store, cv, pv, &params).unwrap();
        let vw = v.matmul(store.get(params.w_v)).unwrap();
        for r in 0..3 {
            for j in 0..4 {
                let upd = tape.value(out).get(r, j) - c0.get(r, j);
                assert!((upd - vw.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attend_zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let params = CrossAttentionParams::init(&mut store, "x", 6, 2, &mut rng);
        *store.get_mut(params.w_v) = Tensor::zeros(6, 6);
        let c0 = Tensor::normal(3, 6, 1.0, &mut rng);
        let mut tape = Tape::new();
        let cv = tape.constant(c0.clone());
        let pv = tape.constant(Tensor::normal(9, 6, 1.0, &mut rng));
        let out = cross_attend(&mut tape, &store, cv, pv, &params).unwrap();
        assert_eq!(tape.value(out), &c0);
    }

    #[test]
    fn cross_attend_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let params = CrossAttentionParams::init(&mut store, "x", 8, 1, &mut rng);
        let c0 = Tensor::normal(4, 8, 1.0, &mut rng);
        let bag = Tensor::normal(20, 8, 1.0, &mut rng);
        let run = |bag: Tensor| {
            let mut tape = Tape::new();
            let cv = tape.constant(c0.clone());
            let pv = tape.constant(bag);
            let out = cross_attend(&mut tape, &store, cv, pv, &params).unwrap();
            tape.value(out).clone()
        };
        let base = run(bag.clone());
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..20).collect();
            perm.shuffle(&mut rng);
            assert!(run(bag.permute_rows(&perm)).max_abs_diff(&base) <= 1e-12);
        }
        assert_eq!(base.shape(), (4, 8));
    }

    #[test]
    fn cross_attend_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let params = CrossAttentionParams::init(&mut store, "x", 4, 1, &mut rng);
        let mut tape = Tape::new();
        let cv = tape.constant(Tensor::zeros(2, 4));
        let pv = tape.constant(Tensor::zeros(3, 5));
        assert!(matches!(
            cross_attend(&mut tape, &store, cv, pv, &params),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn block_singleton_reduces_to_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let params = SelfAttentionBlockParams::init(&mut store, "b", 4, 1, &mut rng);
        *store.get_mut(params.ffn_w2) = Tensor::zeros(16, 4);
        let x = Tensor::normal(1, 4, 1.0, &mut rng);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self_attention_block(&mut tape, &store, xv, &params).unwrap();

        let mut oracle = Tape::new();
        let xo = oracle.constant(x.clone());
        let g = oracle.constant(Tensor::ones(1, 4));
        let b = oracle.constant(Tensor::zeros(1, 4));
        let ln = oracle.layer_norm_rows(xo, g, b).unwrap();
        let ln = oracle.value(ln);
        let expected = ln
            .matmul(store.get(params.w_v))
            .unwrap()
            .matmul(store.get(params.w_o))
            .unwrap()
            .zip_map(&x, |a, r| a + r);
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let params = SelfAttentionBlockParams::init(&mut store, "b", 8, 2, &mut rng);
        let x = Tensor::normal(7, 8, 1.0, &mut rng);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = self_attention_block(&mut tape, &store, xv, &params).unwrap();
            tape.value(out).clone()
        };
        let base = run(x.clone());
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let permuted = run(x.permute_rows(&perm));
        assert!(permuted.max_abs_diff(&base.permute_rows(&perm)) <= 1e-10);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let params = SelfAttentionBlockParams::init(&mut store, "b", 4, 1, &mut rng);
        let x = store.add("x", Tensor::normal(3, 4, 1.0, &mut rng));
        let report = grad_check("self_attention_block", &store, 1e-5, 1e-4, |tape, s| {
            let xv = tape.param(s, x);
            let out = self_attention_block(tape, s, xv, &params)?;
            Ok(tape.sum(out))
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let x = tape.constant(Tensor::ones(3, 2));
        assert_eq!(self_attention_stack(&mut tape, &store, x, &[]).unwrap(), x);
    }
}
