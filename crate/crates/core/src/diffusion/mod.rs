//! Noise schedule, forward corruption and the DDIM reverse update.
//!
//! Steps are 1-based: `tau ∈ 1..=T`. Step 0 is the clean-data terminal with
//! `ᾱ_0 = 1`, which makes the last DDIM update return the `x̂0` estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod sampler;
pub use sampler::{generate_ensemble, sample_chain, ChainSeeds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("need at least one diffusion step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "require 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self {
            beta,
            alpha,
            alpha_bar,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.beta[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha[tau - 1]
    }

    /// `ᾱ_τ`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.alpha_bar[tau - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.steps() {
            return Err(Error::Step(format!("step {tau} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ_τ·x0 + √(1−ᾱ_τ)·ε`.
pub fn forward_diffuse(x0: &[f64], tau: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(tau)?;
    if x0.len() != eps.len() {
        return Err(Error::shape(x0.len(), eps.len()));
    }
    let ab = sched.alpha_bar(tau);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

/// DDIM noise scale for the transition `tau → tau_prev`.
pub fn ddim_sigma(sched: &NoiseSchedule, tau: usize, tau_prev: usize, eta: f64) -> f64 {
    debug_assert!(tau_prev < tau);
    let ab = sched.alpha_bar(tau);
    let ab_prev = sched.alpha_bar(tau_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// Decreasing DDIM step sequence ending at the terminal step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdimPlan {
    pub steps: Vec<usize>,
    pub eta: f64,
}

impl DdimPlan {
    pub fn new(steps: Vec<usize>, eta: f64, total: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Schedule(format!("eta {eta} outside [0, 1]")));
        }
        if steps.len() < 2 || steps[0] > total || steps.last() != Some(&0) {
            return Err(Error::Schedule(
                "plan must start at or below T and end at step 0".into(),
            ));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Schedule("plan steps must be strictly decreasing".into()));
        }
        Ok(Self { steps, eta })
    }

    /// `n` transitions from `T` down to 0, evenly spaced in step index.
    pub fn evenly_spaced(total: usize, n: usize, eta: f64) -> Result<Self> {
        if n == 0 || total == 0 {
            return Err(Error::Schedule("need at least one DDIM step".into()));
        }
        let n = n.min(total);
        let mut steps: Vec<usize> = (0..=n)
            .map(|i| (total as f64 * (1.0 - i as f64 / n as f64)).round() as usize)
            .collect();
        steps.dedup();
        Self::new(steps, eta, total)
    }

    /// Every step `T, T−1, …, 1, 0`.
    pub fn full(total: usize, eta: f64) -> Result<Self> {
        Self::new((0..=total).rev().collect(), eta, total)
    }

    /// `(tau, tau_prev)` pairs in sampling order.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.windows(2).map(|w| (w[0], w[1]))
    }
}

/// One DDIM update from `tau` to `tau_prev`; `eps_prime` is only read when
/// the noise scale is nonzero.
pub fn ddim_step(
    x_tau: &[f64],
    eps_hat: &[f64],
    tau: usize,
    tau_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    eps_prime: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(tau)?;
    if tau_prev >= tau {
        return Err(Error::Step(format!("tau_prev {tau_prev} must be below tau {tau}")));
    }
    if x_tau.len() != eps_hat.len() {
        return Err(Error::shape(x_tau.len(), eps_hat.len()));
    }
    let ab = sched.alpha_bar(tau);
    let ab_prev = sched.alpha_bar(tau_prev);
    let sigma = ddim_sigma(sched, tau, tau_prev, eta);
    let dir2 = 1.0 - ab_prev - sigma * sigma;
    if dir2 < -1e-15 {
        return Err(Error::Numeric(format!("negative DDIM direction variance {dir2}")));
    }
    let dir = dir2.max(0.0).sqrt();
    let (sab, snab) = (ab.sqrt(), (1.0 - ab).sqrt());
    let sab_prev = ab_prev.sqrt();
    if sigma > 0.0 && eps_prime.len() != x_tau.len() {
        return Err(Error::shape(x_tau.len(), eps_prime.len()));
    }
    Ok(x_tau
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let x0_hat = (x - snab * e) / sab;
            let noise = if sigma > 0.0 { sigma * eps_prime[i] } else { 0.0 };
            sab_prev * x0_hat + dir * e + noise
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_abs_diff_eq!(s.beta(1000), 0.02, epsilon = 1e-17);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar(2), 0.63, epsilon = 1e-15);
    }

    #[test]
    fn schedule_bounds() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    fn sched_with(abar: &[f64]) -> NoiseSchedule {
        let mut beta = Vec::new();
        let mut prev = 1.0;
        for a in abar {
            beta.push(1.0 - a / prev);
            prev = *a;
        }
        NoiseSchedule::from_betas(beta)
    }

    #[test]
    fn forward_cases() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        assert_eq!(forward_diffuse(&[0.0, 0.0], 3, &[0.0, 0.0], &s).unwrap(), vec![0.0, 0.0]);
        let x = forward_diffuse(&[2.0, -1.0], 5, &[0.0, 0.0], &s).unwrap();
        assert_eq!(x[0], s.alpha_bar(5).sqrt() * 2.0);
        let s = sched_with(&[0.64]);
        let x = forward_diffuse(&[1.0, 0.0], 1, &[0.0, 1.0], &s).unwrap();
        assert_abs_diff_eq!(x[0], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.6, epsilon = 1e-15);
        assert!(matches!(forward_diffuse(&[1.0], 2, &[0.0], &s), Err(Error::Step(_))));
        assert!(matches!(forward_diffuse(&[1.0], 0, &[0.0], &s), Err(Error::Step(_))));
    }

    #[test]
    fn sigma_cases() {
        let s = sched_with(&[0.5, 0.25]);
        assert_eq!(ddim_sigma(&s, 2, 1, 0.0), 0.0);
        assert_eq!(ddim_sigma(&s, 2, 0, 1.0), 0.0);
        assert_abs_diff_eq!(ddim_sigma(&s, 2, 1, 1.0), (1.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        let lo = ddim_sigma(&s, 2, 1, 0.3);
        let hi = ddim_sigma(&s, 2, 1, 0.7);
        assert!(lo < hi);
    }

    #[test]
    fn exact_epsilon_inverts() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = [0.3, -1.2, 2.5];
        let eps = [0.5, 1.5, -0.7];
        let xt = forward_diffuse(&x0, 700, &eps, &s).unwrap();
        let back = ddim_step(&xt, &eps, 700, 0, 0.0, &s, &[]).unwrap();
        for (a, b) in back.iter().zip(x0) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_noise_trajectory() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let x0 = [1.0, -2.0];
        let xt: Vec<f64> = x0.iter().map(|v| s.alpha_bar(80).sqrt() * v).collect();
        let out = ddim_step(&xt, &[0.0, 0.0], 80, 40, 0.0, &s, &[]).unwrap();
        for (a, b) in out.iter().zip(x0) {
            assert_abs_diff_eq!(*a, s.alpha_bar(40).sqrt() * b, epsilon = 1e-14);
        }
    }

    #[test]
    fn eta_one_matches_ddpm_posterior() {
        // DDPM posterior q(x_{T-1} | x_T, x0) vs Monte Carlo DDIM with eta = 1
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let t = 1000;
        let x0 = 1.5;
        let eps = 0.8;
        let xt = forward_diffuse(&[x0], t, &[eps], &s).unwrap()[0];
        let (ab, ab_prev, beta) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
        let mean = ab_prev.sqrt() * beta / (1.0 - ab) * x0
            + s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt;
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..draws {
            let e: f64 = StandardNormal.sample(&mut rng);
            let v = ddim_step(&[xt], &[eps], t, t - 1, 1.0, &s, &[e]).unwrap()[0];
            sum += v;
            sum2 += v * v;
        }
        let m = sum / draws as f64;
        let v = sum2 / draws as f64 - m * m;
        assert!(((m - mean) / mean).abs() < 0.01, "mean {m} vs {mean}");
        assert!(((v - var) / var).abs() < 0.01, "var {v} vs {var}");
    }

    #[test]
    fn plans() {
        let p = DdimPlan::evenly_spaced(1000, 50, 0.0).unwrap();
        assert_eq!(p.steps.len(), 51);
        assert_eq!(p.steps[0], 1000);
        assert_eq!(p.steps[1], 980);
        assert_eq!(*p.steps.last().unwrap(), 0);
        assert_eq!(p.transitions().count(), 50);
        let p = DdimPlan::evenly_spaced(3, 10, 0.5).unwrap();
        assert_eq!(p.steps, vec![3, 2, 1, 0]);
        assert!(DdimPlan::new(vec![5, 5, 0], 0.0, 10).is_err());
        assert!(DdimPlan::new(vec![11, 0], 0.0, 10).is_err());
        assert!(DdimPlan::new(vec![10, 0], 1.5, 10).is_err());
        assert_eq!(DdimPlan::full(4, 1.0).unwrap().steps, vec![4, 3, 2, 1, 0]);
    }
}
