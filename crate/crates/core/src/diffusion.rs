//! Noise schedules and the diffusion updates shared by both denoisers.
//!
//! Schedules are held in f64. Timesteps are 1-based (`1..=T`); `t = 0` only
//! appears as the final DDIM target, where `alpha_bar_0 := 1`.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use cmdlab_autograd::Real;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `sigma_t^2` linear from `beta_min` to `beta_max`.
    Linear,
    /// Linear, then `sqrt(alpha_bar)` shifted and rescaled so that
    /// `alpha_bar_1` is unchanged and `alpha_bar_T = 0` (`sigma_T = 1`).
    TerminalOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind, self.beta_min, self.beta_max)
    }
}

/// `sigma_t`, `alpha_t = 1 - sigma_t^2` and `alpha_bar_t = prod_{i<=t} alpha_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigma: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(constraint("T", "must be at least 1"));
    }
    if !(beta_min > 0.0 && beta_min <= 1.0) {
        return Err(constraint("beta_min", &format!("{beta_min} not in (0, 1]")));
    }
    if !(beta_max >= beta_min && beta_max <= 1.0) {
        return Err(constraint("beta_max", &format!("{beta_max} not in [beta_min, 1]")));
    }
    let var: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + i as f64 * (beta_max - beta_min) / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = var.iter().map(|v| 1.0 - v).collect();
    let mut alpha_bar = cumulative_product(&alpha);
    let sched = match kind {
        ScheduleKind::Linear => NoiseSchedule {
            sigma: var.iter().map(|v| v.sqrt()).collect(),
            alpha,
            alpha_bar,
        },
        ScheduleKind::TerminalOne if steps == 1 => NoiseSchedule {
            sigma: vec![1.0],
            alpha: vec![0.0],
            alpha_bar: vec![0.0],
        },
        ScheduleKind::TerminalOne => {
            let s: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
            let (first, last) = (s[0], s[steps - 1]);
            for (ab, &si) in alpha_bar.iter_mut().zip(&s) {
                let rescaled = (si - last) * first / (first - last);
                *ab = rescaled * rescaled;
            }
            alpha_bar[steps - 1] = 0.0;
            let alpha: Vec<f64> = (0..steps)
                .map(|i| if i == 0 { alpha_bar[0] } else { alpha_bar[i] / alpha_bar[i - 1] })
                .collect();
            let mut sigma: Vec<f64> = alpha.iter().map(|a| (1.0 - a).sqrt()).collect();
            sigma[steps - 1] = 1.0;
            NoiseSchedule { sigma, alpha, alpha_bar }
        }
    };
    sched.validate()?;
    Ok(sched)
}

fn cumulative_product(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .scan(1.0, |acc, &x| {
            *acc *= x;
            Some(*acc)
        })
        .collect()
}

fn constraint(param: &str, reason: &str) -> Error {
    Error::Constraint {
        param: param.to_string(),
        reason: reason.to_string(),
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Monotone sigma in (0, 1], exact `alpha = 1 - sigma^2`, strictly
    /// decreasing `alpha_bar` in [0, 1).
    pub fn validate(&self) -> Result<()> {
        let n = self.steps();
        if self.alpha.len() != n || self.alpha_bar.len() != n {
            return Err(Error::Invariant("schedule arrays differ in length".into()));
        }
        for i in 0..n {
            let (s, a, ab) = (self.sigma[i], self.alpha[i], self.alpha_bar[i]);
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Invariant(format!("sigma_{} = {s} outside (0, 1]", i + 1)));
            }
            if (a - (1.0 - s * s)).abs() > 1e-12 {
                return Err(Error::Invariant(format!("alpha_{} != 1 - sigma^2", i + 1)));
            }
            if !(0.0..1.0).contains(&ab) {
                return Err(Error::Invariant(format!("alpha_bar_{} = {ab} outside [0, 1)", i + 1)));
            }
            if i > 0 && s < self.sigma[i - 1] {
                return Err(Error::Invariant(format!("sigma decreases at t = {}", i + 1)));
            }
            if i > 0 && ab >= self.alpha_bar[i - 1] {
                return Err(Error::Invariant(format!("alpha_bar not decreasing at t = {}", i + 1)));
            }
        }
        Ok(())
    }
}

fn same_shape<F: Real>(op: &'static str, a: &ArrayD<F>, b: &ArrayD<F>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<F: Real>(x0: &ArrayD<F>, t: usize, eps: &ArrayD<F>, sched: &NoiseSchedule) -> Result<ArrayD<F>> {
    sched.check_t(t)?;
    same_shape("forward_diffuse", x0, eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Mean squared error between predicted and true noise, accumulated in f64.
pub fn eps_objective<F: Real>(eps_pred: &ArrayD<F>, eps: &ArrayD<F>) -> Result<f64> {
    same_shape("eps_objective", eps_pred, eps)?;
    let total: f64 = eps_pred
        .iter()
        .zip(eps)
        .map(|(&p, &e)| {
            let d = (p - e).to_f64_lossy();
            d * d
        })
        .sum();
    Ok(total / eps.len().max(1) as f64)
}

/// Ancestral step `(x_t - sigma_t^2 / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t) + sigma_t noise`.
/// Callers pass zero noise at `t = 1`.
pub fn ddpm_step<F: Real>(
    x_t: &ArrayD<F>,
    eps_pred: &ArrayD<F>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    sched.check_t(t)?;
    same_shape("ddpm_step", x_t, eps_pred)?;
    same_shape("ddpm_step", x_t, noise)?;
    let (sigma, alpha, ab) = (sched.sigma(t), sched.alpha(t), sched.alpha_bar(t));
    if alpha <= 0.0 || ab >= 1.0 {
        return Err(Error::Numerical(format!("ddpm_step undefined at t = {t} (alpha_t = {alpha})")));
    }
    let inv_sqrt_alpha = F::of(1.0 / alpha.sqrt());
    let coef = F::of(sigma * sigma / (1.0 - ab).sqrt());
    let s = F::of(sigma);
    let mut out = Zip::from(x_t).and(eps_pred).map_collect(|&x, &e| inv_sqrt_alpha * (x - coef * e));
    out.zip_mut_with(noise, |o, &n| *o += s * n);
    Ok(out)
}

/// Clean-sample estimate `(x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn predict_x0<F: Real>(x_t: &ArrayD<F>, eps_pred: &ArrayD<F>, t: usize, sched: &NoiseSchedule) -> Result<ArrayD<F>> {
    sched.check_t(t)?;
    same_shape("predict_x0", x_t, eps_pred)?;
    let ab = sched.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::Numerical(format!("x0 estimate undefined at t = {t} (alpha_bar_t = 0)")));
    }
    let (k, inv) = (F::of((1.0 - ab).sqrt()), F::of(1.0 / ab.sqrt()));
    Ok(Zip::from(x_t).and(eps_pred).map_collect(|&x, &e| (x - k * e) * inv))
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev < t`.
pub fn ddim_step<F: Real>(
    x_t: &ArrayD<F>,
    eps_pred: &ArrayD<F>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    if t_prev >= t {
        return Err(Error::Ordering { t, t_prev });
    }
    let x0 = predict_x0(x_t, eps_pred, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let (a, b) = (F::of(ab_prev.sqrt()), F::of((1.0 - ab_prev).sqrt()));
    Ok(Zip::from(&x0).and(eps_pred).map_collect(|&x, &e| a * x + b * e))
}

/// DDIM update with stochasticity `eta`; reduces to [`ddim_step`] at `eta = 0`.
pub fn ddim_step_eta<F: Real>(
    x_t: &ArrayD<F>,
    eps_pred: &ArrayD<F>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    if eta == 0.0 {
        return ddim_step(x_t, eps_pred, t, t_prev, sched);
    }
    if t_prev >= t {
        return Err(Error::Ordering { t, t_prev });
    }
    same_shape("ddim_step_eta", x_t, noise)?;
    let x0 = predict_x0(x_t, eps_pred, t, sched)?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (a, b, s) = (F::of(ab_prev.sqrt()), F::of(dir), F::of(sigma));
    let mut out = Zip::from(&x0).and(eps_pred).map_collect(|&x, &e| a * x + b * e);
    out.zip_mut_with(noise, |o, &n| *o += s * n);
    Ok(out)
}

/// Classifier-free guidance `(1 + w) eps_cond - w eps_uncond`, evaluated as
/// `eps_cond + w (eps_cond - eps_uncond)` so equal inputs pass through exactly.
pub fn cfg_combine<F: Real>(eps_cond: &ArrayD<F>, eps_uncond: &ArrayD<F>, w: f64) -> Result<ArrayD<F>> {
    same_shape("cfg_combine", eps_cond, eps_uncond)?;
    if !(w >= 0.0) {
        return Err(constraint("guidance_w", &format!("{w} is negative")));
    }
    let w = F::of(w);
    Ok(Zip::from(eps_cond).and(eps_uncond).map_collect(|&c, &u| c + w * (c - u)))
}
