//! Multi-head scaled dot-product attention blocks.
//!
//! A block computes `Z = Attn(xq·Wq, xkv·Wk, xkv·Wv)` followed by
//! `Z + MLP(LayerNorm(Z))`. There is no output projection after the heads
//! are concatenated. Queries and keys can be split into equal-sized groups
//! that only attend within themselves: the asset-level cross-attention uses
//! one group per asset (one query, `M` keys), the market-level
//! self-attention a single group.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, LayerNormTape, Linear, Mlp, MlpTape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

/// Intermediate values of one block forward pass.
#[derive(Debug, Clone)]
pub struct BlockTape {
    q: Array2<f64>,
    k: Arc<Array2<f64>>,
    v: Arc<Array2<f64>>,
    /// `probs[g * heads + h]` is the `qg×kg` probability matrix of group `g`, head `h`.
    pub probs: Vec<Array2<f64>>,
    ln: LayerNormTape,
    ln_out: Array2<f64>,
    mlp: MlpTape,
    groups: usize,
    heads: usize,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

impl AttentionBlock {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let square = |rng: &mut R| Linear::init(dim, dim, rng).w;
        Self {
            w_q: square(rng),
            w_k: square(rng),
            w_v: square(rng),
            norm: LayerNorm::new(dim),
            mlp: Mlp::init(dim, hidden, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w_q: Array2::zeros((dim, dim)),
            w_k: Array2::zeros((dim, dim)),
            w_v: Array2::zeros((dim, dim)),
            norm: LayerNorm::zeros(dim),
            mlp: Mlp::zeros(dim, hidden),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    /// Projected keys and values for a fixed key/value source; lets callers
    /// reuse them across many queries.
    pub fn project_kv(&self, xkv: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        (xkv.dot(&self.w_k), xkv.dot(&self.w_v))
    }

    pub fn forward(&self, xq: ArrayView2<'_, f64>, xkv: ArrayView2<'_, f64>, heads: usize, groups: usize) -> (Array2<f64>, BlockTape) {
        let (k, v) = self.project_kv(xkv);
        self.forward_projected(xq, Arc::new(k), Arc::new(v), heads, groups)
    }

    pub fn forward_projected(
        &self,
        xq: ArrayView2<'_, f64>,
        k: Arc<Array2<f64>>,
        v: Arc<Array2<f64>>,
        heads: usize,
        groups: usize,
    ) -> (Array2<f64>, BlockTape) {
        let d = self.dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = xq.dot(&self.w_q);
        let qg = q.nrows() / groups;
        let kg = k.nrows() / groups;
        let mut z = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(groups * heads);
        for g in 0..groups {
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qs = q.slice(s![g * qg..(g + 1) * qg, c0..c1]);
                let ks = k.slice(s![g * kg..(g + 1) * kg, c0..c1]);
                let vs = v.slice(s![g * kg..(g + 1) * kg, c0..c1]);
                let mut p = qs.dot(&ks.t());
                p.mapv_inplace(|x| x * scale);
                softmax_rows(&mut p);
                z.slice_mut(s![g * qg..(g + 1) * qg, c0..c1]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let (ln_out, ln) = self.norm.forward(z.view());
        let (m, mlp) = self.mlp.forward(ln_out.view());
        let out = &z + &m;
        (
            out,
            BlockTape {
                q,
                k,
                v,
                probs,
                ln,
                ln_out,
                mlp,
                groups,
                heads,
            },
        )
    }

    /// Backward pass. `d_probs`, when given, adds a gradient on the
    /// probability matrices (same indexing as [`BlockTape::probs`]).
    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(
        &self,
        xq: ArrayView2<'_, f64>,
        xkv: ArrayView2<'_, f64>,
        tape: &BlockTape,
        d_out: ArrayView2<'_, f64>,
        d_probs: Option<&[Array2<f64>]>,
        grad: &mut AttentionBlock,
    ) -> (Array2<f64>, Array2<f64>) {
        let (dxq, dk, dv) = self.backward_projected(xq, tape, d_out, d_probs, grad);
        ndarray::linalg::general_mat_mul(1.0, &xkv.t(), &dk, 1.0, &mut grad.w_k);
        ndarray::linalg::general_mat_mul(1.0, &xkv.t(), &dv, 1.0, &mut grad.w_v);
        let mut dxkv = dk.dot(&self.w_k.t());
        ndarray::linalg::general_mat_mul(1.0, &dv, &self.w_v.t(), 1.0, &mut dxkv);
        (dxq, dxkv)
    }

    /// Backward up to the projected keys/values: returns `(dxq, dK, dV)`.
    pub fn backward_projected(
        &self,
        xq: ArrayView2<'_, f64>,
        tape: &BlockTape,
        d_out: ArrayView2<'_, f64>,
        d_probs: Option<&[Array2<f64>]>,
        grad: &mut AttentionBlock,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let d = self.dim();
        let heads = tape.heads;
        let groups = tape.groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_ln = self.mlp.backward(tape.ln_out.view(), &tape.mlp, d_out, &mut grad.mlp);
        let mut dz = self.norm.backward(&tape.ln, d_ln.view(), &mut grad.norm);
        dz += &d_out;

        let qg = tape.q.nrows() / groups;
        let kg = tape.k.nrows() / groups;
        let mut dq = Array2::zeros(tape.q.raw_dim());
        let mut dk = Array2::zeros(tape.k.raw_dim());
        let mut dv = Array2::zeros(tape.v.raw_dim());
        for g in 0..groups {
            let (q0, q1) = (g * qg, (g + 1) * qg);
            let (k0, k1) = (g * kg, (g + 1) * kg);
            for h in 0..heads {
                let idx = g * heads + h;
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let p = &tape.probs[idx];
                let dzs = dz.slice(s![q0..q1, c0..c1]);
                let vs = tape.v.slice(s![k0..k1, c0..c1]);
                let ks = tape.k.slice(s![k0..k1, c0..c1]);
                let qs = tape.q.slice(s![q0..q1, c0..c1]);
                let mut dp = dzs.dot(&vs.t());
                if let Some(extra) = d_probs {
                    dp += &extra[idx];
                }
                dv.slice_mut(s![k0..k1, c0..c1]).assign(&p.t().dot(&dzs));
                // softmax backward, row by row
                let mut ds = dp;
                for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = dsr.dot(&pr);
                    for (x, pv) in dsr.iter_mut().zip(pr.iter()) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                dq.slice_mut(s![q0..q1, c0..c1]).assign(&ds.dot(&ks));
                dk.slice_mut(s![k0..k1, c0..c1]).assign(&ds.t().dot(&qs));
            }
        }
        ndarray::linalg::general_mat_mul(1.0, &xq.t(), &dq, 1.0, &mut grad.w_q);
        let dxq = dq.dot(&self.w_q.t());
        (dxq, dk, dv)
    }
}
