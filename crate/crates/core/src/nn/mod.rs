//! Hierarchical attention denoiser.
//!
//! Stage 1 runs one cross-attention per asset: the query embeds the noisy
//! target entry together with the diffusion-step embedding, keys and values
//! embed that asset's own history window (return plus covariates). No
//! information crosses assets in this stage. Stage 2 stacks the asset
//! latents with one embedding per systematic covariate and applies
//! self-attention over all of them; the first `N` output rows are decoded to
//! the noise estimate. The head-reduced asset-to-asset block of the stage-2
//! attention probabilities is returned alongside for correlation guidance.

pub mod attention;
pub mod layers;

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use attention::{AttentionBlock, BlockTape};
use layers::Linear;

/// How the per-head stage-2 probabilities are reduced to one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMap {
    #[default]
    Mean,
    FirstHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n_assets: usize,
    pub n_sys: usize,
    pub window: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub step_embed_dim: usize,
    pub z_dim: usize,
    pub window_pos: bool,
    pub attention_map: AttentionMap,
    pub cross_depth: usize,
    pub self_depth: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_assets: 12,
            n_sys: 8,
            window: 63,
            hidden: 128,
            heads: 4,
            mlp_hidden: 512,
            step_embed_dim: 32,
            z_dim: 10,
            window_pos: true,
            attention_map: AttentionMap::Mean,
            cross_depth: 1,
            self_depth: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_assets", self.n_assets),
            ("window", self.window),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("step_embed_dim", self.step_embed_dim),
            ("cross_depth", self.cross_depth),
            ("self_depth", self.self_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("hidden {} not divisible by heads {}", self.hidden, self.heads),
            ));
        }
        if self.step_embed_dim % 2 != 0 {
            return Err(Error::config("model.step_embed_dim", "must be even"));
        }
        if self.window_pos && self.hidden % 2 != 0 {
            return Err(Error::config("model.hidden", "must be even with window_pos"));
        }
        Ok(())
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let block = 3 * d * d + 2 * d + (d * self.mlp_hidden + self.mlp_hidden) + (self.mlp_hidden * d + d);
        (1 + self.step_embed_dim) * d
            + d
            + (1 + self.z_dim) * d
            + d
            + self.window * d
            + d
            + self.n_sys * d
            + (self.cross_depth + self.self_depth) * block
            + d
            + 1
    }
}

/// Sinusoidal embedding: `[sin(p/10000^(2i/dim)), cos(p/10000^(2i/dim))]` interleaved.
pub fn sinusoidal(position: f64, dim: usize) -> Result<Array1<f64>> {
    if dim % 2 != 0 {
        return Err(Error::config("step_embed_dim", format!("embedding dimension {dim} is odd")));
    }
    let mut out = Array1::zeros(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (position / freq).sin();
        out[2 * i + 1] = (position / freq).cos();
    }
    Ok(out)
}

pub fn step_embedding(tau: usize, dim: usize) -> Result<Array1<f64>> {
    sinusoidal(tau as f64, dim)
}

fn window_table(window: usize, dim: usize) -> Array2<f64> {
    let mut t = Array2::zeros((window, dim));
    for m in 0..window {
        t.row_mut(m)
            .assign(&sinusoidal((m + 1) as f64, dim).expect("even dim checked by config"));
    }
    t
}

/// Conditioning window for one forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// `M×N` standardized returns.
    pub hist: Array2<f64>,
    /// `M×N×Z` normalized asset covariates.
    pub asset_covs: Array3<f64>,
    /// `M×N_y` normalized systematic covariates.
    pub sys: Array2<f64>,
}

impl ConditioningBundle {
    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        let (m, n) = (cfg.window, cfg.n_assets);
        if self.hist.dim() != (m, n) {
            return Err(Error::Context(format!("hist shape {:?}, expected {:?}", self.hist.dim(), (m, n))));
        }
        if self.asset_covs.dim() != (m, n, cfg.z_dim) {
            return Err(Error::Context(format!(
                "asset covariate shape {:?}, expected {:?}",
                self.asset_covs.dim(),
                (m, n, cfg.z_dim)
            )));
        }
        if self.sys.dim() != (m, cfg.n_sys) {
            return Err(Error::Context(format!(
                "systematic covariate shape {:?}, expected {:?}",
                self.sys.dim(),
                (m, cfg.n_sys)
            )));
        }
        let all_finite = self
            .hist
            .iter()
            .chain(self.asset_covs.iter())
            .chain(self.sys.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Context("undefined entry in conditioning window".into()));
        }
        Ok(())
    }
}

/// Every learnable weight of the denoiser. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub query_embed: Linear,
    pub context_embed: Linear,
    pub sys_embed: Linear,
    pub sys_identity: Array2<f64>,
    pub cross: Vec<AttentionBlock>,
    pub self_blocks: Vec<AttentionBlock>,
    pub decoder: Linear,
}

impl DenoiserParams {
    /// Uniform `±1/√fan_in` initialization; layer norms start at identity.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let query_embed = Linear::init(1 + config.step_embed_dim, d, &mut rng);
        let context_embed = Linear::init(1 + config.z_dim, d, &mut rng);
        let sys_embed = Linear::init(config.window, d, &mut rng);
        let bound = 1.0 / (d as f64).sqrt();
        let sys_identity = Array2::from_shape_simple_fn((config.n_sys, d), || {
            rand::Rng::gen_range(&mut rng, -bound..bound)
        });
        let cross = (0..config.cross_depth)
            .map(|_| AttentionBlock::init(d, config.mlp_hidden, &mut rng))
            .collect();
        let self_blocks = (0..config.self_depth)
            .map(|_| AttentionBlock::init(d, config.mlp_hidden, &mut rng))
            .collect();
        let decoder = Linear::init(d, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            query_embed,
            context_embed,
            sys_embed,
            sys_identity,
            cross,
            self_blocks,
            decoder,
        })
    }

    /// All-zero parameters of the same shapes (used for gradients).
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let d = c.hidden;
        Self {
            config: c.clone(),
            query_embed: Linear::zeros(1 + c.step_embed_dim, d),
            context_embed: Linear::zeros(1 + c.z_dim, d),
            sys_embed: Linear::zeros(c.window, d),
            sys_identity: Array2::zeros((c.n_sys, d)),
            cross: (0..c.cross_depth).map(|_| AttentionBlock::zeros(d, c.mlp_hidden)).collect(),
            self_blocks: (0..c.self_depth).map(|_| AttentionBlock::zeros(d, c.mlp_hidden)).collect(),
            decoder: Linear::zeros(d, 1),
        }
    }

    /// Names of the tensors in [`Self::slices`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "query_embed.w",
            "query_embed.b",
            "context_embed.w",
            "context_embed.b",
            "sys_embed.w",
            "sys_embed.b",
            "sys_identity",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let block = ["w_q", "w_k", "w_v", "norm.gain", "norm.bias", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b"];
        for (prefix, n) in [("cross", self.cross.len()), ("self", self.self_blocks.len())] {
            for i in 0..n {
                names.extend(block.iter().map(|b| format!("{prefix}.{i}.{b}")));
            }
        }
        names.push("decoder.w".into());
        names.push("decoder.b".into());
        names
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![
            self.query_embed.w.shape().to_vec(),
            self.query_embed.b.shape().to_vec(),
            self.context_embed.w.shape().to_vec(),
            self.context_embed.b.shape().to_vec(),
            self.sys_embed.w.shape().to_vec(),
            self.sys_embed.b.shape().to_vec(),
            self.sys_identity.shape().to_vec(),
        ];
        for b in self.cross.iter().chain(&self.self_blocks) {
            out.extend([
                b.w_q.shape().to_vec(),
                b.w_k.shape().to_vec(),
                b.w_v.shape().to_vec(),
                b.norm.gain.shape().to_vec(),
                b.norm.bias.shape().to_vec(),
                b.mlp.fc1.w.shape().to_vec(),
                b.mlp.fc1.b.shape().to_vec(),
                b.mlp.fc2.w.shape().to_vec(),
                b.mlp.fc2.b.shape().to_vec(),
            ]);
        }
        out.push(self.decoder.w.shape().to_vec());
        out.push(self.decoder.b.shape().to_vec());
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        fn sl<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let mut out = vec![
            sl(&self.query_embed.w),
            sl(&self.query_embed.b),
            sl(&self.context_embed.w),
            sl(&self.context_embed.b),
            sl(&self.sys_embed.w),
            sl(&self.sys_embed.b),
            sl(&self.sys_identity),
        ];
        for b in self.cross.iter().chain(&self.self_blocks) {
            out.extend([
                sl(&b.w_q),
                sl(&b.w_k),
                sl(&b.w_v),
                sl(&b.norm.gain),
                sl(&b.norm.bias),
                sl(&b.mlp.fc1.w),
                sl(&b.mlp.fc1.b),
                sl(&b.mlp.fc2.w),
                sl(&b.mlp.fc2.b),
            ]);
        }
        out.push(sl(&self.decoder.w));
        out.push(sl(&self.decoder.b));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        fn sl<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![
            sl(&mut self.query_embed.w),
            sl(&mut self.query_embed.b),
            sl(&mut self.context_embed.w),
            sl(&mut self.context_embed.b),
            sl(&mut self.sys_embed.w),
            sl(&mut self.sys_embed.b),
            sl(&mut self.sys_identity),
        ];
        for b in self.cross.iter_mut().chain(self.self_blocks.iter_mut()) {
            out.extend([
                sl(&mut b.w_q),
                sl(&mut b.w_k),
                sl(&mut b.w_v),
                sl(&mut b.norm.gain),
                sl(&mut b.norm.bias),
                sl(&mut b.mlp.fc1.w),
                sl(&mut b.mlp.fc1.b),
                sl(&mut b.mlp.fc2.w),
                sl(&mut b.mlp.fc2.b),
            ]);
        }
        out.push(sl(&mut self.decoder.w));
        out.push(sl(&mut self.decoder.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Flattened copy of every parameter in declared order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), flat.len()));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &DenoiserParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= f);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn window_pos(&self) -> Option<Array2<f64>> {
        self.config
            .window_pos
            .then(|| window_table(self.config.window, self.config.hidden))
    }

    /// Precomputes everything that depends only on the conditioning window.
    pub fn encode_context(&self, ctx: &ConditioningBundle) -> Result<EncodedContext> {
        let c = &self.config;
        ctx.validate(c)?;
        let (m, n, z) = (c.window, c.n_assets, c.z_dim);
        let mut cin = Array2::zeros((n * m, 1 + z));
        for i in 0..n {
            for t in 0..m {
                let mut row = cin.row_mut(i * m + t);
                row[0] = ctx.hist[[t, i]];
                for k in 0..z {
                    row[1 + k] = ctx.asset_covs[[t, i, k]];
                }
            }
        }
        let mut e = self.context_embed.forward(cin.view());
        if let Some(pos) = self.window_pos() {
            for i in 0..n {
                let mut blk = e.slice_mut(s![i * m..(i + 1) * m, ..]);
                blk += &pos;
            }
        }
        let kv = self
            .cross
            .iter()
            .map(|b| {
                let (k, v) = b.project_kv(e.view());
                (Arc::new(k), Arc::new(v))
            })
            .collect();
        let yt = ctx.sys.t().to_owned();
        let mut hs = self.sys_embed.forward(yt.view());
        hs += &self.sys_identity;
        Ok(EncodedContext { cin, e, kv, yt, hs })
    }

    /// Noise estimate and asset-to-asset attention for one noisy target.
    pub fn forward(&self, x_tau: &[f64], tau: usize, ctx: &ConditioningBundle) -> Result<(Vec<f64>, Array2<f64>)> {
        let enc = self.encode_context(ctx)?;
        let out = self.forward_encoded(&enc, x_tau, tau)?;
        Ok((out.eps_hat, out.attention))
    }

    pub fn forward_encoded(&self, enc: &EncodedContext, x_tau: &[f64], tau: usize) -> Result<ForwardPass> {
        let c = &self.config;
        let n = c.n_assets;
        if x_tau.len() != n {
            return Err(Error::Context(format!("x_tau has {} entries, expected {n}", x_tau.len())));
        }
        if x_tau.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite noisy target".into()));
        }
        let emb = step_embedding(tau, c.step_embed_dim)?;
        let mut qin = Array2::zeros((n, 1 + c.step_embed_dim));
        for i in 0..n {
            qin[[i, 0]] = x_tau[i];
            qin.slice_mut(s![i, 1..]).assign(&emb);
        }
        let q0 = self.query_embed.forward(qin.view());

        let mut cross_tapes = Vec::with_capacity(self.cross.len());
        let mut cross_inputs = Vec::with_capacity(self.cross.len());
        let mut h = q0;
        for (b, (k, v)) in self.cross.iter().zip(&enc.kv) {
            let (out, tape) = b.forward_projected(h.view(), Arc::clone(k), Arc::clone(v), c.heads, n);
            cross_inputs.push(h);
            cross_tapes.push(tape);
            h = out;
        }
        let asset_latents = h.clone();

        let mut hh = ndarray::concatenate![Axis(0), h, enc.hs];
        let mut self_tapes = Vec::with_capacity(self.self_blocks.len());
        let mut self_inputs = Vec::with_capacity(self.self_blocks.len());
        for b in &self.self_blocks {
            let (out, tape) = b.forward(hh.view(), hh.view(), c.heads, 1);
            self_inputs.push(hh);
            self_tapes.push(tape);
            hh = out;
        }
        let last = self_tapes.last().expect("self_depth >= 1");
        let attention = reduce_heads(&last.probs, n, c.attention_map);
        let dec = self.decoder.forward(hh.slice(s![..n, ..]));
        let eps_hat = dec.column(0).to_vec();
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite noise estimate".into()));
        }
        Ok(ForwardPass {
            eps_hat,
            attention,
            tape: Tape {
                qin,
                cross_inputs,
                cross_tapes,
                asset_latents,
                self_inputs,
                self_tapes,
                out: hh,
            },
        })
    }

    /// Noise estimates for `B` noisy targets sharing one context (`x` is
    /// `B×N`). Row `b` equals the `forward_encoded` output for `x` row `b`.
    pub fn predict_noise_batch(&self, enc: &EncodedContext, x: ArrayView2<'_, f64>, tau: usize) -> Result<Array2<f64>> {
        let c = &self.config;
        let (n, ny) = (c.n_assets, c.n_sys);
        let b = x.nrows();
        if x.ncols() != n {
            return Err(Error::Context(format!("x_tau has {} columns, expected {n}", x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite noisy target".into()));
        }
        let emb = step_embedding(tau, c.step_embed_dim)?;
        // Stage 1 rows are asset-major so each asset's queries form one group.
        let mut qin = Array2::zeros((n * b, 1 + c.step_embed_dim));
        for i in 0..n {
            for r in 0..b {
                let mut row = qin.row_mut(i * b + r);
                row[0] = x[[r, i]];
                row.slice_mut(s![1..]).assign(&emb);
            }
        }
        let mut h = self.query_embed.forward(qin.view());
        for (blk, (k, v)) in self.cross.iter().zip(&enc.kv) {
            h = blk.forward_projected(h.view(), Arc::clone(k), Arc::clone(v), c.heads, n).0;
        }
        // Stage 2 rows are chain-major: each chain's assets then its sys rows.
        let tokens = n + ny;
        let mut hh = Array2::zeros((b * tokens, c.hidden));
        for r in 0..b {
            for i in 0..n {
                hh.row_mut(r * tokens + i).assign(&h.row(i * b + r));
            }
            hh.slice_mut(s![r * tokens + n..(r + 1) * tokens, ..]).assign(&enc.hs);
        }
        for blk in &self.self_blocks {
            hh = blk.forward(hh.view(), hh.view(), c.heads, b).0;
        }
        let dec = self.decoder.forward(hh.view());
        let mut eps = Array2::zeros((b, n));
        for r in 0..b {
            for i in 0..n {
                eps[[r, i]] = dec[[r * tokens + i, 0]];
            }
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite noise estimate".into()));
        }
        Ok(eps)
    }

    /// Accumulates `dL/dθ` into `grad` given `dL/dε̂` and `dL/dA`.
    pub fn backward(
        &self,
        enc: &EncodedContext,
        pass: &ForwardPass,
        d_eps: &[f64],
        d_attention: Option<&Array2<f64>>,
        grad: &mut DenoiserParams,
    ) {
        let c = &self.config;
        let n = c.n_assets;
        let tape = &pass.tape;
        let d_dec = Array2::from_shape_vec((n, 1), d_eps.to_vec()).expect("n×1");
        let d_rows = self
            .decoder
            .backward(tape.out.slice(s![..n, ..]), d_dec.view(), &mut grad.decoder);
        let mut dh = Array2::zeros(tape.out.raw_dim());
        dh.slice_mut(s![..n, ..]).assign(&d_rows);

        let depth = self.self_blocks.len();
        for bi in (0..depth).rev() {
            let b = &self.self_blocks[bi];
            let x = tape.self_inputs[bi].view();
            let extra = if bi == depth - 1 {
                d_attention.map(|da| expand_heads(da, &tape.self_tapes[bi].probs, c.attention_map))
            } else {
                None
            };
            let (dq, dkv) = b.backward(x, x, &tape.self_tapes[bi], dh.view(), extra.as_deref(), &mut grad.self_blocks[bi]);
            dh = dq + dkv;
        }
        let d_hs = dh.slice(s![n.., ..]);
        grad.sys_identity += &d_hs;
        self.sys_embed.accumulate(enc.yt.view(), d_hs, &mut grad.sys_embed);

        let mut dq = dh.slice(s![..n, ..]).to_owned();
        let mut de = Array2::zeros(enc.e.raw_dim());
        for bi in (0..self.cross.len()).rev() {
            let b = &self.cross[bi];
            let (dxq, dk, dv) = b.backward_projected(
                tape.cross_inputs[bi].view(),
                &tape.cross_tapes[bi],
                dq.view(),
                None,
                &mut grad.cross[bi],
            );
            ndarray::linalg::general_mat_mul(1.0, &enc.e.t(), &dk, 1.0, &mut grad.cross[bi].w_k);
            ndarray::linalg::general_mat_mul(1.0, &enc.e.t(), &dv, 1.0, &mut grad.cross[bi].w_v);
            ndarray::linalg::general_mat_mul(1.0, &dk, &b.w_k.t(), 1.0, &mut de);
            ndarray::linalg::general_mat_mul(1.0, &dv, &b.w_v.t(), 1.0, &mut de);
            dq = dxq;
        }
        self.query_embed.accumulate(tape.qin.view(), dq.view(), &mut grad.query_embed);
        self.context_embed.accumulate(enc.cin.view(), de.view(), &mut grad.context_embed);
    }
}

/// `N×N` asset block of the stage-2 probabilities, reduced across heads.
fn reduce_heads(probs: &[Array2<f64>], n: usize, map: AttentionMap) -> Array2<f64> {
    match map {
        AttentionMap::FirstHead => probs[0].slice(s![..n, ..n]).to_owned(),
        AttentionMap::Mean => {
            let mut a = Array2::zeros((n, n));
            for p in probs {
                a += &p.slice(s![..n, ..n]);
            }
            a / probs.len() as f64
        }
    }
}

fn expand_heads(da: &Array2<f64>, probs: &[Array2<f64>], map: AttentionMap) -> Vec<Array2<f64>> {
    let n = da.nrows();
    let heads = probs.len();
    probs
        .iter()
        .enumerate()
        .map(|(h, p)| {
            let mut g = Array2::zeros(p.raw_dim());
            let w = match map {
                AttentionMap::Mean => 1.0 / heads as f64,
                AttentionMap::FirstHead if h == 0 => 1.0,
                AttentionMap::FirstHead => 0.0,
            };
            if w != 0.0 {
                g.slice_mut(s![..n, ..n]).assign(&(da * w));
            }
            g
        })
        .collect()
}

/// Context-only quantities shared by every query on the same window.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    cin: Array2<f64>,
    e: Array2<f64>,
    kv: Vec<(Arc<Array2<f64>>, Arc<Array2<f64>>)>,
    yt: Array2<f64>,
    hs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Tape {
    qin: Array2<f64>,
    cross_inputs: Vec<Array2<f64>>,
    cross_tapes: Vec<BlockTape>,
    asset_latents: Array2<f64>,
    self_inputs: Vec<Array2<f64>>,
    self_tapes: Vec<BlockTape>,
    out: Array2<f64>,
}

impl Tape {
    /// Stage-1 output `h_1..h_N` (`N×D`).
    pub fn asset_latents(&self) -> &Array2<f64> {
        &self.asset_latents
    }

    /// Full stage-2 probability matrices of the last self-attention block, one per head.
    pub fn self_attention_probs(&self) -> &[Array2<f64>] {
        &self.self_tapes.last().expect("self_depth >= 1").probs
    }

    /// Stage-1 probability rows (one `1×M` matrix per asset and head).
    pub fn cross_attention_probs(&self) -> &[Array2<f64>] {
        &self.cross_tapes.last().expect("cross_depth >= 1").probs
    }

    /// Stage-2 output rows (`(N+N_y)×D`).
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub eps_hat: Vec<f64>,
    pub attention: Array2<f64>,
    pub tape: Tape,
}
