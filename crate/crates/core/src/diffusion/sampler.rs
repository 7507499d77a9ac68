//! Ensemble generation by running independent DDIM chains.

use std::ops::Range;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{ddim_sigma, ddim_step, DdimPlan, NoiseSchedule};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::nn::{ConditioningBundle, DenoiserParams};

/// Seed material for a family of chains. Chain `k` reads its own ChaCha
/// stream, so a chain's draws do not depend on how many chains run or in
/// which order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainSeeds {
    pub base: u64,
    pub key: u64,
}

impl ChainSeeds {
    pub fn new(base: u64, key: u64) -> Self {
        Self { base, key }
    }

    pub fn rng(&self, chain: usize) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.base.to_le_bytes());
        seed[8..16].copy_from_slice(&self.key.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(chain as u64);
        rng
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs one chain from `x^T ~ N(0, I)` through the plan.
pub fn sample_chain(
    params: &DenoiserParams,
    enc: &crate::nn::EncodedContext,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = params.config.n_assets;
    let mut x = normal_vec(rng, n);
    for (tau, tau_prev) in plan.transitions() {
        let eps_hat = params.forward_encoded(enc, &x, tau)?.eps_hat;
        let noise = if ddim_sigma(sched, tau, tau_prev, plan.eta) > 0.0 {
            normal_vec(rng, n)
        } else {
            Vec::new()
        };
        x = ddim_step(&x, &eps_hat, tau, tau_prev, plan.eta, sched, &noise)?;
    }
    Ok(x)
}

/// Chains advanced together through one batched network call per step.
const CHAIN_CHUNK: usize = 16;

/// Runs chains `range` jointly; row `j` equals `sample_chain` for chain
/// `range.start + j`, since every chain keeps its own random stream.
pub fn sample_chains(
    params: &DenoiserParams,
    enc: &crate::nn::EncodedContext,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    seeds: ChainSeeds,
    range: Range<usize>,
) -> Result<Array2<f64>> {
    let n = params.config.n_assets;
    let mut rngs: Vec<ChaCha8Rng> = range.clone().map(|c| seeds.rng(c)).collect();
    let mut x = Array2::zeros((range.len(), n));
    for (mut row, rng) in x.rows_mut().into_iter().zip(&mut rngs) {
        row.assign(&Array1::from(normal_vec(rng, n)));
    }
    for (tau, tau_prev) in plan.transitions() {
        let eps = params.predict_noise_batch(enc, x.view(), tau)?;
        let stochastic = ddim_sigma(sched, tau, tau_prev, plan.eta) > 0.0;
        for (r, rng) in rngs.iter_mut().enumerate() {
            let noise = if stochastic { normal_vec(rng, n) } else { Vec::new() };
            let next = ddim_step(
                &x.row(r).to_vec(),
                &eps.row(r).to_vec(),
                tau,
                tau_prev,
                plan.eta,
                sched,
                &noise,
            )?;
            x.row_mut(r).assign(&Array1::from(next));
        }
    }
    Ok(x)
}

/// `K×N` forecast samples for one conditioning window. With `target_norm`
/// the samples are mapped back from standardized to return units.
pub fn generate_ensemble(
    params: &DenoiserParams,
    ctx: &ConditioningBundle,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    k: usize,
    seeds: ChainSeeds,
    target_norm: Option<&Normalizer>,
) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(Error::config("sampling.k", "need at least one sample"));
    }
    if plan.steps[0] > sched.steps() {
        return Err(Error::Schedule(format!(
            "plan starts at {} but the schedule has {} steps",
            plan.steps[0],
            sched.steps()
        )));
    }
    let n = params.config.n_assets;
    if let Some(norm) = target_norm {
        if norm.dim() != n {
            return Err(Error::shape(n, norm.dim()));
        }
    }
    let enc = params.encode_context(ctx)?;
    let chunks: Vec<Range<usize>> = (0..k)
        .step_by(CHAIN_CHUNK)
        .map(|c0| c0..(c0 + CHAIN_CHUNK).min(k))
        .collect();
    let blocks: Vec<Array2<f64>> = chunks
        .into_par_iter()
        .map(|r| sample_chains(params, &enc, sched, plan, seeds, r))
        .collect::<Result<_>>()?;
    let mut out = ndarray::concatenate(Axis(0), &blocks.iter().map(|b| b.view()).collect::<Vec<_>>())
        .expect("chunks share the asset dimension");
    if let Some(norm) = target_norm {
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * norm.std[j] + norm.mean[j];
            }
        }
    }
    Ok(out)
}
