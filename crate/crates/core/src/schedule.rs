//! Noise schedules, the v-parameterization, and inference timestep spacing.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`. Index `t = 0` is accepted by the
//! coefficient accessors and means "clean" (`a = 1`, `s = 0`), which is what
//! the sampler's final step targets.
//!
//! Coefficient tables are kept in 64-bit regardless of the tensor precision.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_terminal_snr: bool,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            zero_terminal_snr: true,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let sched = build_linear_schedule(self.timesteps, self.beta_start, self.beta_end)?;
        if self.zero_terminal_snr {
            enforce_zero_terminal_snr(&sched)
        } else {
            Ok(sched)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    a: Vec<f64>,
    s: Vec<f64>,
    zsnr_applied: bool,
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.a.len()
    }

    pub fn zsnr_applied(&self) -> bool {
        self.zsnr_applied
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    /// Signal coefficient `aₜ = √ᾱₜ`; `a(0) = 1`.
    pub fn a(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.a[t - 1]
        }
    }

    /// Noise coefficient `sₜ = √(1 − ᾱₜ)`; `s(0) = 0`.
    pub fn s(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.s[t - 1]
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        let (a, s) = (self.a(t), self.s(t));
        a * a / (s * s)
    }

    pub fn a_table(&self) -> &[f64] {
        &self.a
    }

    pub fn s_table(&self) -> &[f64] {
        &self.s
    }

    fn coeffs(&self, t: usize) -> Result<(Real, Real)> {
        self.check(t)?;
        Ok((self.a(t) as Real, self.s(t) as Real))
    }

    /// `xₜ = aₜ·x₀ + sₜ·ε`.
    pub fn q_sample(&self, x0: &[Real], eps: &[Real], t: usize) -> Result<Vec<Real>> {
        let (a, s) = self.coeffs(t)?;
        combine(x0, a, eps, s)
    }

    /// `v = aₜ·ε − sₜ·x₀`.
    pub fn v_from(&self, x0: &[Real], eps: &[Real], t: usize) -> Result<Vec<Real>> {
        let (a, s) = self.coeffs(t)?;
        combine(eps, a, x0, -s)
    }

    /// `x̂₀ = aₜ·xₜ − sₜ·v`.
    pub fn x0_from_v(&self, x_t: &[Real], v: &[Real], t: usize) -> Result<Vec<Real>> {
        let (a, s) = self.coeffs(t)?;
        combine(x_t, a, v, -s)
    }

    /// `ε̂ = sₜ·xₜ + aₜ·v`.
    pub fn eps_from_v(&self, x_t: &[Real], v: &[Real], t: usize) -> Result<Vec<Real>> {
        let (a, s) = self.coeffs(t)?;
        combine(x_t, s, v, a)
    }
}

fn combine(x: &[Real], cx: Real, y: &[Real], cy: Real) -> Result<Vec<Real>> {
    if x.len() != y.len() {
        return Err(dim_err!("operand lengths {} vs {}", x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(&p, &q)| cx * p + cy * q).collect())
}

/// Linear β schedule: `βₜ` evenly spaced from `beta_start` to `beta_end`.
pub fn build_linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(config_err!("schedule needs T ≥ 2, got {t_max}"));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(config_err!(
            "need 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]"
        ));
    }
    let mut alpha_bar = 1.0;
    let mut a = Vec::with_capacity(t_max);
    let mut s = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let beta = beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64;
        alpha_bar *= 1.0 - beta;
        a.push(f64::sqrt(alpha_bar));
        s.push(f64::sqrt(1.0 - alpha_bar));
    }
    Ok(NoiseSchedule {
        a,
        s,
        zsnr_applied: false,
    })
}

/// Affinely rescales `a` so that `a_T = 0` exactly while `a₁` is unchanged.
pub fn enforce_zero_terminal_snr(sched: &NoiseSchedule) -> Result<NoiseSchedule> {
    let a1 = sched.a[0];
    let at = *sched.a.last().expect("schedule has T ≥ 2 entries");
    if !(a1 > at && at >= 0.0) {
        return Err(config_err!("cannot rescale: a₁ = {a1}, a_T = {at}"));
    }
    let k = a1 / (a1 - at);
    let mut a: Vec<f64> = sched.a.iter().map(|&v| (v - at) * k).collect();
    let last = a.len() - 1;
    a[last] = 0.0;
    a[0] = a1;
    let s = a.iter().map(|&v| f64::sqrt(1.0 - v * v)).collect();
    Ok(NoiseSchedule {
        a,
        s,
        zsnr_applied: true,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Trailing,
    Leading,
    Linspace,
}

/// `tᵢ = round(T − i·T/K)` for `i = 0..K`, so the first step is `T` itself.
pub fn trailing_timesteps(t_max: usize, k: usize) -> Result<Vec<usize>> {
    timesteps(t_max, k, Spacing::Trailing)
}

/// Descending inference timesteps for the given spacing rule.
pub fn timesteps(t_max: usize, k: usize, spacing: Spacing) -> Result<Vec<usize>> {
    if k == 0 || k > t_max {
        return Err(config_err!("need 1 ≤ K ≤ T, got K = {k}, T = {t_max}"));
    }
    let (tf, kf) = (t_max as f64, k as f64);
    let ts: Vec<usize> = match spacing {
        Spacing::Trailing => (0..k)
            .map(|i| (tf - i as f64 * tf / kf).round() as usize)
            .collect(),
        Spacing::Leading => (0..k)
            .rev()
            .map(|i| (i * (t_max / k)) + 1)
            .collect(),
        Spacing::Linspace => (0..k)
            .rev()
            .map(|i| {
                if k == 1 {
                    t_max
                } else {
                    (1.0 + i as f64 * (tf - 1.0) / (kf - 1.0)).round() as usize
                }
            })
            .collect(),
    };
    debug_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    Ok(ts)
}
