//! Training loop: denoising MSE plus the correlation-guidance term, AdamW
//! with warmup and cosine decay, gradient clipping and validation-based
//! checkpoint selection.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, generate_ensemble, ChainSeeds, DdimPlan, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::correlation_guidance_loss_grad;
use crate::nn::DenoiserParams;
use crate::pipeline::{Dataset, TrainSample};
use crate::scoring::energy_score;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub warmup: usize,
    pub lambda_corr: f64,
    /// Diffusion step count `T`.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Set from the run-level seed, not read from the `[train]` section.
    #[serde(skip)]
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    /// Validation energy score cadence; 0 disables.
    pub val_every: usize,
    pub val_samples: usize,
    pub val_ddim_steps: usize,
    /// Upper bound on validation dates scored per evaluation.
    pub val_max_dates: usize,
    pub checkpoint_every: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch: 1024,
            lr_max: 1e-4,
            warmup: 1000,
            lambda_corr: 0.05,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            log_every: 1,
            val_every: 5000,
            val_samples: 16,
            val_ddim_steps: 50,
            val_max_dates: 250,
            checkpoint_every: 5000,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.warmup >= self.steps {
            return Err(Error::config(
                "train.warmup",
                format!("warmup {} must be below steps {}", self.warmup, self.steps),
            ));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config("train.lr_max", "must be positive"));
        }
        if !(self.lambda_corr >= 0.0 && self.lambda_corr.is_finite()) {
            return Err(Error::config("train.lambda_corr", "must be nonnegative"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay", "must be nonnegative"));
        }
        for (name, b) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be positive"));
        }
        if self.val_every > 0 && self.val_samples < 1 {
            return Err(Error::config("train.val_samples", "must be positive"));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

/// Linear warmup to `lr_max`, then cosine decay to 0 at `steps`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup && cfg.warmup > 0 {
        return cfg.lr_max * step as f64 / cfg.warmup as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = (step.saturating_sub(cfg.warmup) as f64 / span).min(1.0);
    cfg.lr_max * 0.5 * (1.0 + (PI * progress).cos())
}

/// Uniform with-replacement draw of `batch` samples.
pub fn sample_training_batch<R: Rng>(dataset: &Dataset, batch: usize, rng: &mut R) -> Result<Vec<TrainSample>> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    (0..batch)
        .map(|_| dataset.get(rng.gen_range(0..dataset.len())))
        .collect()
}

/// Diffusion step and noise for one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub tau: usize,
    pub eps: Vec<f64>,
}

pub fn draw_noise<R: Rng>(count: usize, n: usize, total_steps: usize, rng: &mut R) -> Vec<NoiseDraw> {
    (0..count)
        .map(|_| NoiseDraw {
            tau: rng.gen_range(1..=total_steps),
            eps: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect()
}

/// Batch loss with its two components and the parameter gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub mse: f64,
    pub l_corr: f64,
    pub grad: DenoiserParams,
}

/// Combines per-element terms: element-mean squared error over `B·N`
/// entries plus `λ` times the batch mean of the guidance loss.
pub fn combine_loss(sq_err: &[f64], l_corr: &[f64], n_assets: usize, lambda: f64) -> (f64, f64, f64) {
    let b = sq_err.len() as f64;
    let mse = sq_err.iter().sum::<f64>() / (b * n_assets as f64);
    let lc = l_corr.iter().sum::<f64>() / b;
    (mse + lambda * lc, mse, lc)
}

struct ElementOut {
    sq_err: f64,
    l_corr: f64,
}

fn element(
    params: &DenoiserParams,
    sample: &TrainSample,
    draw: &NoiseDraw,
    sched: &NoiseSchedule,
    lambda: f64,
    batch: usize,
    grad: &mut DenoiserParams,
) -> Result<ElementOut> {
    let n = params.config.n_assets;
    let x_tau = forward_diffuse(&sample.x0, draw.tau, &draw.eps, sched)?;
    let enc = params.encode_context(&sample.ctx)?;
    let pass = params.forward_encoded(&enc, &x_tau, draw.tau)?;
    let sq_err: f64 = pass.eps_hat.iter().zip(&draw.eps).map(|(a, b)| (a - b).powi(2)).sum();
    let (l_corr, d_lc) = correlation_guidance_loss_grad(pass.attention.view(), &sample.target)?;
    let scale = 2.0 / (batch * n) as f64;
    let d_eps: Vec<f64> = pass.eps_hat.iter().zip(&draw.eps).map(|(a, b)| scale * (a - b)).collect();
    let d_att: Option<Array2<f64>> = (lambda > 0.0).then(|| d_lc * (lambda / batch as f64));
    params.backward(&enc, &pass, &d_eps, d_att.as_ref(), grad);
    Ok(ElementOut { sq_err, l_corr })
}

/// Elements per sequential accumulation chunk in deterministic mode.
const CHUNK: usize = 8;

/// Total loss and gradient over a batch with pre-drawn `(τ, ε)`.
///
/// Deterministic mode accumulates fixed-size chunks and sums the chunk
/// gradients in order, so the result does not depend on thread scheduling.
pub fn compute_total_loss(
    params: &DenoiserParams,
    batch: &[TrainSample],
    draws: &[NoiseDraw],
    sched: &NoiseSchedule,
    lambda: f64,
    deterministic: bool,
) -> Result<LossOutput> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::shape(batch.len(), draws.len()));
    }
    let b = batch.len();
    let items: Vec<(&TrainSample, &NoiseDraw)> = batch.iter().zip(draws).collect();
    let run_chunk = |chunk: &[(&TrainSample, &NoiseDraw)]| -> Result<(DenoiserParams, Vec<(f64, f64)>)> {
        let mut g = params.zeros_like();
        let mut terms = Vec::with_capacity(chunk.len());
        for (s, d) in chunk {
            let e = element(params, s, d, sched, lambda, b, &mut g)?;
            terms.push((e.sq_err, e.l_corr));
        }
        Ok((g, terms))
    };
    let (grad, terms) = if deterministic {
        let parts: Vec<_> = items.par_chunks(CHUNK).map(run_chunk).collect::<Result<_>>()?;
        let mut it = parts.into_iter();
        let (mut grad, mut terms) = it.next().expect("nonempty batch");
        for (g, t) in it {
            grad.add_assign(&g);
            terms.extend(t);
        }
        (grad, terms)
    } else {
        items
            .par_chunks(CHUNK)
            .map(run_chunk)
            .try_reduce_with(|(mut ga, mut ta), (gb, tb)| {
                ga.add_assign(&gb);
                ta.extend(tb);
                Ok((ga, ta))
            })
            .expect("nonempty batch")?
    };
    let sq: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let lc: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let (total, mse, l_corr) = combine_loss(&sq, &lc, params.config.n_assets, lambda);
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss (mse {mse}, l_corr {l_corr})")));
    }
    Ok(LossOutput {
        total,
        mse,
        l_corr,
        grad,
    })
}

/// Decoupled-weight-decay Adam state over the flattened parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(size: usize) -> Self {
        Self {
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grad: &DenoiserParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut off = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grad.slices()) {
            let m = &mut self.m[off..off + p.len()];
            let v = &mut self.v[off..off + p.len()];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                p[i] -= lr * (update + cfg.weight_decay * p[i]);
            }
            off += p.len();
        }
    }
}

/// Scales `grad` in place so its global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grad: &mut DenoiserParams, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub mse: f64,
    pub l_corr: f64,
    pub total: f64,
    pub val_es: Option<f64>,
}

/// Everything needed to resume or reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: DenoiserParams,
    pub optimizer: AdamW,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: TrainState,
    /// Parameters with the lowest validation energy score, if validation ran.
    pub best: Option<(usize, DenoiserParams, f64)>,
    pub log: Vec<LogRow>,
}

/// Mean energy score of small standardized-space ensembles over a dataset.
pub fn validation_energy_score(
    params: &DenoiserParams,
    val: &Dataset,
    sched: &NoiseSchedule,
    plan: &DdimPlan,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data("validation dataset is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..val.len() {
        let s = val.get(i)?;
        let ens = generate_ensemble(params, &s.ctx, sched, plan, k, ChainSeeds::new(seed, s.t_index as u64), None)?;
        total += energy_score(ens.view(), &s.x0)?;
    }
    Ok(total / val.len() as f64)
}

/// Hooks invoked during training.
pub trait TrainObserver {
    fn on_log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Runs `cfg.steps` optimizer updates starting from `init`.
pub fn train(
    init: DenoiserParams,
    dataset: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let size = init.param_count();
    let mut state = TrainState {
        step: 0,
        params: init,
        optimizer: AdamW::new(size),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = state.params.config.n_assets;
    let val = val.map(|v| v.thinned(cfg.val_max_dates));
    let val_plan = DdimPlan::evenly_spaced(cfg.diffusion_steps, cfg.val_ddim_steps.max(1), 0.0)?;
    let mut best: Option<(usize, DenoiserParams, f64)> = None;
    let mut log = Vec::new();

    for step in 1..=cfg.steps {
        let batch = sample_training_batch(dataset, cfg.batch, &mut rng)?;
        let draws = draw_noise(batch.len(), n, cfg.diffusion_steps, &mut rng);
        let mut out = compute_total_loss(&state.params, &batch, &draws, &sched, cfg.lambda_corr, cfg.deterministic)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        clip_grad_norm(&mut out.grad, cfg.grad_clip);
        let lr = lr_at_step(step, cfg);
        state.optimizer.step(&mut state.params, &out.grad, lr, cfg);
        state.step = step;

        let mut val_es = None;
        if let Some(v) = &val {
            if cfg.val_every > 0 && (step % cfg.val_every == 0 || step == cfg.steps) {
                let es = validation_energy_score(&state.params, v, &sched, &val_plan, cfg.val_samples, cfg.seed)?;
                if best.as_ref().is_none_or(|b| es < b.2) {
                    best = Some((step, state.params.clone(), es));
                }
                val_es = Some(es);
            }
        }
        if step % cfg.log_every == 0 || step == cfg.steps || val_es.is_some() {
            let row = LogRow {
                step,
                lr,
                mse: out.mse,
                l_corr: out.l_corr,
                total: out.total,
                val_es,
            };
            observer.on_log(&row)?;
            log.push(row);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(TrainOutcome { last: state, best, log })
}

/// Writes the training log as CSV.
pub fn write_log<W: std::io::Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record(["step", "lr", "mse", "l_corr", "total", "val_es"]).map_err(io)?;
    for r in rows {
        wr.write_record([
            r.step.to_string(),
            format!("{:e}", r.lr),
            format!("{:e}", r.mse),
            format!("{:e}", r.l_corr),
            format!("{:e}", r.total),
            r.val_es.map(|v| format!("{v:e}")).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lr_schedule_points() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup: 100,
            lr_max: 2e-3,
            ..Default::default()
        };
        assert_eq!(lr_at_step(100, &cfg), 2e-3);
        assert_eq!(lr_at_step(50, &cfg), 1e-3);
        assert_abs_diff_eq!(lr_at_step(1000, &cfg), 0.0, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at_step(550, &cfg), 1e-3, epsilon = 1e-15);
    }

    #[test]
    fn combine_loss_terms() {
        let (total, mse, lc) = combine_loss(&[0.0, 0.0], &[-0.5, -1.0], 3, 0.0);
        assert_eq!((total, mse), (0.0, 0.0));
        assert_eq!(lc, -0.75);
        let (total, mse, _) = combine_loss(&[3.0, 6.0], &[-1.0, -1.0], 3, 0.5);
        assert_eq!(mse, 1.5);
        assert_eq!(total, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            steps: 10,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let zero = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_ok());
    }

    #[test]
    fn tau_draws_cover_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = draw_noise(2000, 2, 5, &mut rng);
        assert!(d.iter().all(|x| (1..=5).contains(&x.tau) && x.eps.len() == 2));
        for t in 1..=5 {
            assert!(d.iter().any(|x| x.tau == t));
        }
    }
}
