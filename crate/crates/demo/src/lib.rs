//! Browser bindings for three small explorations of the `diffport` core:
//! the noise schedule and DDIM plan, covariance shrinkage with its target
//! correlation, and the two portfolio solvers on a Gaussian ensemble.
//!
//! Each export is a thin wrapper over a plain function so the logic can be
//! tested natively.

use diffport::diffusion::{ddim_sigma, DdimPlan, NoiseSchedule};
use diffport::guidance::{
    covariance_to_correlation, ledoit_wolf_shrink, sample_covariance, Intensity, ShrinkageTarget,
};
use diffport::portfolio::{cholesky, estimate_moments, solve_gop, solve_mvp};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ScheduleView {
    /// `ᾱ_τ` for `τ = 0..=T`.
    pub alpha_bar: Vec<f64>,
    /// Plan steps from `T` down to 0.
    pub plan: Vec<usize>,
    /// Noise scale of each plan transition.
    pub sigma: Vec<f64>,
}

pub fn schedule_view(steps: usize, beta_start: f64, beta_end: f64, ddim_steps: usize, eta: f64) -> diffport::Result<ScheduleView> {
    let sched = NoiseSchedule::linear(steps, beta_start, beta_end)?;
    let plan = DdimPlan::evenly_spaced(steps, ddim_steps, eta)?;
    let sigma = plan.transitions().map(|(t, p)| ddim_sigma(&sched, t, p, eta)).collect();
    Ok(ScheduleView {
        alpha_bar: (0..=steps).map(|t| sched.alpha_bar(t)).collect(),
        plan: plan.steps,
        sigma,
    })
}

#[derive(Debug, Serialize)]
pub struct ShrinkView {
    pub delta: f64,
    pub sample_corr: Vec<Vec<f64>>,
    pub target_corr: Vec<Vec<f64>>,
    pub train_corr: Vec<Vec<f64>>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Two-block population covariance with within-block correlation `rho`.
fn block_covariance(n: usize, rho: f64, vol: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        let same = (i < n / 2) == (j < n / 2);
        vol * vol * if i == j { 1.0 } else if same { rho } else { 0.0 }
    })
}

/// Draws an `m`-day window from a block-correlated market, then shrinks its
/// sample covariance toward the population matrix. `delta < 0` selects the
/// analytic intensity.
pub fn shrink_view(n: usize, m: usize, rho: f64, delta: f64, seed: u64) -> diffport::Result<ShrinkView> {
    let train = block_covariance(n, rho, 0.01);
    let l = cholesky(&train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_simple_fn((m, n), || StandardNormal.sample(&mut rng));
    let window = z.dot(&l.t());
    let intensity = if delta < 0.0 { Intensity::Analytic } else { Intensity::Fixed(delta) };
    let target = ShrinkageTarget::new(train.clone(), intensity)?;
    let sample = sample_covariance(window.view())?;
    let shrunk = ledoit_wolf_shrink(sample.view(), &target, window.view())?;
    Ok(ShrinkView {
        delta: shrunk.delta,
        sample_corr: rows(&covariance_to_correlation(sample.view())?.matrix),
        target_corr: rows(&covariance_to_correlation(shrunk.cov.view())?.matrix),
        train_corr: rows(&covariance_to_correlation(train.view())?.matrix),
    })
}

#[derive(Debug, Serialize)]
pub struct PortfolioView {
    pub mvp: Vec<f64>,
    pub mvp_fallback: bool,
    pub gop: Vec<f64>,
}

/// MVP and GOP weights for `k` Gaussian scenarios with daily means `mu`,
/// volatilities `vol` and a common pairwise correlation `rho`.
pub fn portfolio_view(mu: &[f64], vol: &[f64], rho: f64, k: usize, seed: u64) -> diffport::Result<PortfolioView> {
    let n = mu.len();
    if vol.len() != n {
        return Err(diffport::Error::Data(format!("{n} means but {} volatilities", vol.len())));
    }
    let cov = Array2::from_shape_fn((n, n), |(i, j)| vol[i] * vol[j] * if i == j { 1.0 } else { rho });
    let l = cholesky(&cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_simple_fn((k, n), || StandardNormal.sample(&mut rng));
    let samples = z.dot(&l.t()) + &Array1::from(mu.to_vec());
    let mvp = solve_mvp(&estimate_moments(samples.view())?)?;
    let gop = solve_gop(samples.view())?;
    Ok(PortfolioView {
        mvp: mvp.weights.w,
        mvp_fallback: mvp.fallback,
        gop: gop.w,
    })
}

fn to_js<T: Serialize>(r: diffport::Result<T>) -> Result<JsValue, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_wasm_bindgen::to_value(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn schedule(steps: usize, beta_start: f64, beta_end: f64, ddim_steps: usize, eta: f64) -> Result<JsValue, JsError> {
    to_js(schedule_view(steps, beta_start, beta_end, ddim_steps, eta))
}

#[wasm_bindgen]
pub fn shrink(n: usize, m: usize, rho: f64, delta: f64, seed: u64) -> Result<JsValue, JsError> {
    to_js(shrink_view(n, m, rho, delta, seed))
}

#[wasm_bindgen]
pub fn portfolios(mu: Vec<f64>, vol: Vec<f64>, rho: f64, k: usize, seed: u64) -> Result<JsValue, JsError> {
    to_js(portfolio_view(&mu, &vol, rho, k, seed))
}
