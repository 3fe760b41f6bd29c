//! Self-attention layers: the quadratic softmax baseline and the attentive
//! graph filter (AGF).
//!
//! The baseline computes `softmax(X Wq (X Wk)^T / sqrt(d)) X Wv`, which
//! materializes an n x n attention matrix. AGF instead generates singular
//! vectors and per-token filtered singular values directly,
//!
//! ```text
//! U  = softmax(X W_U)            n x d   (rows sum to 1)
//! s  = sigmoid(X W_Sigma)        n x d   (entries in (0,1))
//! f  = sum_k theta_k T_k(s)      n x d   (token-specific filter response)
//! Vt = softmax((X W_V)^T)        d x n   (rows sum to 1)
//! out = (U ⊙ f) (Vt (X W_val))
//! ```
//!
//! contracted right-to-left so the cost is O(n d^2) and no n x n
//! intermediate ever exists. `agf_materialize_h` builds the explicit n x n
//! filter matrix for analysis and for checking the efficient path against
//! the definition.

use crate::poly::{apply_filter, basis_stack, BasisSpec};
use crate::tensor::{Tape, TensorError, TensorId, TensorResult};

/// Query/key/value weights for the softmax baseline, bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct VanillaParams {
    pub w_qry: TensorId,
    pub w_key: TensorId,
    pub w_val: TensorId,
}

/// AGF weights bound to a tape. `theta` is a 1 x (K+1) coefficient tensor
/// paired with `basis`.
#[derive(Debug, Clone, Copy)]
pub struct AgfParams {
    pub w_u: TensorId,
    pub w_sigma: TensorId,
    pub w_v: TensorId,
    pub w_val: TensorId,
    pub theta: TensorId,
    pub basis: BasisSpec,
}

/// The generated singular system of one AGF application.
#[derive(Debug, Clone, Copy)]
pub struct Singulars {
    /// n x d left vectors, each row a distribution over features.
    pub u: TensorId,
    /// n x d token-specific filtered singular values.
    pub filtered: TensorId,
    /// d x n right vectors, each row a distribution over tokens.
    pub vt: TensorId,
    /// n x d raw sigmoid singular values, before filtering.
    pub raw: TensorId,
}

/// The row-stochastic attention matrix of the baseline (n x n). Exposed so
/// the spectral probes can analyze it directly.
pub fn vanilla_attention_matrix(
    tape: &mut Tape,
    x: TensorId,
    p: &VanillaParams,
) -> TensorResult<TensorId> {
    let d = tape.shape(x)[1];
    let q = tape.matmul(x, p.w_qry)?;
    // Scale the n x d query block instead of the n x n score matrix: the
    // same product mathematically, one fewer quadratic intermediate.
    let q_scaled = tape.scale(q, 1.0 / (d as f64).sqrt())?;
    let k = tape.matmul(x, p.w_key)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q_scaled, kt)?;
    tape.softmax(scores)
}

/// Baseline self-attention: `softmax(X Wq (X Wk)^T / sqrt(d)) X Wv`.
pub fn vanilla_sa(tape: &mut Tape, x: TensorId, p: &VanillaParams) -> TensorResult<TensorId> {
    let attn = vanilla_attention_matrix(tape, x, p)?;
    let v = tape.matmul(x, p.w_val)?;
    tape.matmul(attn, v)
}

/// Generate U, filtered singular values, and V^T from the input.
pub fn agf_singulars(tape: &mut Tape, x: TensorId, p: &AgfParams) -> TensorResult<Singulars> {
    let theta_shape = tape.shape(p.theta).to_vec();
    if theta_shape != [1, p.basis.coeff_len()] {
        return Err(TensorError::ShapeMismatch {
            op: "agf_singulars",
            detail: format!(
                "theta shape {theta_shape:?} does not match basis order {} (+1)",
                p.basis.max_order
            ),
        });
    }
    let xu = tape.matmul(x, p.w_u)?;
    let u = tape.softmax(xu)?;
    let xs = tape.matmul(x, p.w_sigma)?;
    let raw = tape.sigmoid(xs)?;
    let stack = basis_stack(tape, &p.basis, raw)?;
    let filtered = apply_filter(tape, p.theta, stack, raw)?;
    let xv = tape.matmul(x, p.w_v)?;
    let xvt = tape.transpose(xv)?;
    let vt = tape.softmax(xvt)?;
    Ok(Singulars {
        u,
        filtered,
        vt,
        raw,
    })
}

fn agf_contract(
    tape: &mut Tape,
    sing: &Singulars,
    x: TensorId,
    p: &AgfParams,
) -> TensorResult<TensorId> {
    // Right-to-left: (d x n)(n x d) first, then the row-filtered left factor.
    let xval = tape.matmul(x, p.w_val)?;
    let ctx = tape.matmul(sing.vt, xval)?;
    let uf = tape.mul(sing.u, sing.filtered)?;
    tape.matmul(uf, ctx)
}

/// AGF forward pass with linear cost in the token count.
pub fn agf_forward(tape: &mut Tape, x: TensorId, p: &AgfParams) -> TensorResult<TensorId> {
    let sing = agf_singulars(tape, x, p)?;
    agf_contract(tape, &sing, x, p)
}

/// Forward pass that also returns the orthogonality penalty of the
/// generated singular vectors.
pub fn agf_forward_with_ortho(
    tape: &mut Tape,
    x: TensorId,
    p: &AgfParams,
) -> TensorResult<(TensorId, TensorId)> {
    let sing = agf_singulars(tape, x, p)?;
    let out = agf_contract(tape, &sing, x, p)?;
    let ortho = ortho_loss(tape, sing.u, sing.vt)?;
    Ok((out, ortho))
}

/// Materialize the explicit n x n filter matrix H with H[i, :] =
/// (U[i, :] ⊙ f[i, :]) V^T. Quadratic; analysis and testing only.
pub fn agf_materialize_h(tape: &mut Tape, x: TensorId, p: &AgfParams) -> TensorResult<TensorId> {
    let sing = agf_singulars(tape, x, p)?;
    let uf = tape.mul(sing.u, sing.filtered)?;
    tape.matmul(uf, sing.vt)
}

/// Orthogonality penalty `(|U^T U - I| + |Vt Vt^T - I|) / n^2` with
/// Frobenius norms; both Gram matrices are d x d.
pub fn ortho_loss(tape: &mut Tape, u: TensorId, vt: TensorId) -> TensorResult<TensorId> {
    let n = tape.shape(u)[0];
    let d = tape.shape(u)[1];
    if tape.shape(vt) != [d, n] {
        return Err(TensorError::ShapeMismatch {
            op: "ortho_loss",
            detail: format!(
                "expected V^T of shape {:?}, got {:?}",
                [d, n],
                tape.shape(vt)
            ),
        });
    }
    let eye = tape.identity(d)?;

    let ut = tape.transpose(u)?;
    let gram_u = tape.matmul(ut, u)?;
    let du = tape.sub(gram_u, eye)?;
    let nu = tape.frobenius_norm(du)?;

    let v = tape.transpose(vt)?;
    let gram_v = tape.matmul(vt, v)?;
    let dv = tape.sub(gram_v, eye)?;
    let nv = tape.frobenius_norm(dv)?;

    let total = tape.add(nu, nv)?;
    tape.scale(total, 1.0 / (n as f64 * n as f64))
}

/// Attention parameters of one block, all heads bound to a tape.
#[derive(Debug, Clone)]
pub enum AttentionParams {
    Vanilla(Vec<VanillaParams>),
    Agf(Vec<AgfParams>),
}

/// One pre-norm transformer block bound to a tape: attention (either
/// variant, one parameter set per head), a d -> 4d -> d feed-forward, and
/// two layer norms.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
}

/// Split into per-head column groups, run each head, concatenate. Returns
/// the n x d mixed output and the summed per-head orthogonality penalty
/// (exactly zero for the baseline variant).
pub fn multi_head_attention(
    tape: &mut Tape,
    x: TensorId,
    attention: &AttentionParams,
) -> TensorResult<(TensorId, TensorId)> {
    let d = tape.shape(x)[1];
    let heads = match attention {
        AttentionParams::Vanilla(hs) => hs.len(),
        AttentionParams::Agf(hs) => hs.len(),
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("{d} columns cannot split into {heads} heads"),
        });
    }
    let dh = d / heads;
    let mut outputs = Vec::with_capacity(heads);
    let mut ortho = tape.scalar_const(0.0)?;
    for h in 0..heads {
        let xh = tape.slice_cols(x, h * dh, dh)?;
        match attention {
            AttentionParams::Vanilla(hs) => {
                outputs.push(vanilla_sa(tape, xh, &hs[h])?);
            }
            AttentionParams::Agf(hs) => {
                let (out, o) = agf_forward_with_ortho(tape, xh, &hs[h])?;
                outputs.push(out);
                ortho = tape.add(ortho, o)?;
            }
        }
    }
    let out = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    Ok((out, ortho))
}

/// Pre-norm residual block: `x + Attn(LN(x))` then `x + FFN(LN(x))`.
/// Returns the block output and its orthogonality penalty.
pub fn block_forward(
    tape: &mut Tape,
    x: TensorId,
    p: &BlockParams,
) -> TensorResult<(TensorId, TensorId)> {
    let normed = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta)?;
    let (attn_out, ortho) = multi_head_attention(tape, normed, &p.attention)?;
    let x2 = tape.add(x, attn_out)?;

    let normed2 = tape.layer_norm(x2, p.ln2_gamma, p.ln2_beta)?;
    let h1 = tape.matmul(normed2, p.ffn_w1)?;
    let h1b = tape.add_row(h1, p.ffn_b1)?;
    let act = tape.gelu(h1b)?;
    let h2 = tape.matmul(act, p.ffn_w2)?;
    let h2b = tape.add_row(h2, p.ffn_b2)?;
    let out = tape.add(x2, h2b)?;
    Ok((out, ortho))
}
