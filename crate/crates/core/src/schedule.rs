//! Deterministic DDIM sampling schedule.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{MftfError, Result};
use crate::model::Latent;

/// Noise schedule parameters of the latent-diffusion v1 family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps_offset: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            steps_offset: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DdimSchedule {
    params: ScheduleParams,
    alphas_cumprod: Vec<f64>,
    timesteps: Vec<usize>,
    ratio: usize,
}

impl DdimSchedule {
    /// `steps` inference steps over the default schedule.
    pub fn new(steps: usize) -> Result<Self> {
        Self::with_params(steps, ScheduleParams::default())
    }

    pub fn with_params(steps: usize, params: ScheduleParams) -> Result<Self> {
        if steps == 0 || steps > params.train_steps {
            return Err(MftfError::Schedule(format!(
                "{steps} inference steps invalid for {} training steps",
                params.train_steps
            )));
        }
        // scaled-linear betas: linear in sqrt(beta)
        let n = params.train_steps;
        let (s0, s1) = (params.beta_start.sqrt(), params.beta_end.sqrt());
        let mut acc = 1.0f64;
        let alphas_cumprod = (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                let beta = (s0 + (s1 - s0) * frac).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        let ratio = n / steps;
        let timesteps: Vec<usize> = (0..steps)
            .map(|i| (steps - 1 - i) * ratio + params.steps_offset)
            .collect();
        if timesteps[0] >= n {
            return Err(MftfError::Schedule(format!(
                "{steps} inference steps with offset {} overrun {n} training steps",
                params.steps_offset
            )));
        }
        Ok(Self {
            params,
            alphas_cumprod,
            timesteps,
            ratio,
        })
    }

    /// Timesteps from noisiest to cleanest.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// `ᾱ_t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or_else(|| {
            MftfError::Schedule(format!(
                "timestep {t} outside schedule of {} training steps",
                self.params.train_steps
            ))
        })
    }

    /// `ᾱ` of the step after `t`; one past the end of the schedule.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        match t.checked_sub(self.ratio) {
            Some(prev) => self.alpha_bar(prev),
            None => Ok(1.0),
        }
    }

    /// One deterministic DDIM update from timestep `t`.
    pub fn step(&self, z: &Latent, epsilon: &Latent, t: usize) -> Result<Latent> {
        let a_t = self.alpha_bar(t)?;
        let a_prev = self.alpha_bar_prev(t)?;
        ddim_update(z, epsilon, a_t, a_prev)
    }
}

/// [`DdimSchedule::step`] as a free function.
pub fn ddim_step(z: &Latent, epsilon: &Latent, t: usize, schedule: &DdimSchedule) -> Result<Latent> {
    schedule.step(z, epsilon, t)
}

/// `x0 = (z - √(1-ᾱ_t) ε) / √ᾱ_t`.
pub fn predict_x0(z: &Latent, epsilon: &Latent, alpha_t: f64) -> Result<Latent> {
    check_alpha(alpha_t)?;
    check_shapes(z, epsilon)?;
    let (sa, sb) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    Ok(Zip::from(z)
        .and(epsilon)
        .map_collect(|&z, &e| ((f64::from(z) - sb * f64::from(e)) / sa) as f32))
}

/// `z_prev = √ᾱ_prev x0 + √(1-ᾱ_prev) ε`.
pub fn ddim_update(z: &Latent, epsilon: &Latent, alpha_t: f64, alpha_prev: f64) -> Result<Latent> {
    check_alpha(alpha_t)?;
    check_alpha(alpha_prev)?;
    check_shapes(z, epsilon)?;
    let (sa, sb) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    let (pa, pb) = (alpha_prev.sqrt(), (1.0 - alpha_prev).sqrt());
    Ok(Zip::from(z).and(epsilon).map_collect(|&z, &e| {
        let e = f64::from(e);
        let x0 = (f64::from(z) - sb * e) / sa;
        (pa * x0 + pb * e) as f32
    }))
}

fn check_alpha(a: f64) -> Result<()> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(MftfError::Schedule(format!("alpha_bar {a} outside (0, 1]")));
    }
    Ok(())
}

fn check_shapes(z: &Latent, e: &Latent) -> Result<()> {
    if z.shape() != e.shape() {
        return Err(MftfError::shape(format!(
            "latent {:?} and noise {:?} differ in shape",
            z.shape(),
            e.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn thirty_step_timesteps() {
        let s = DdimSchedule::new(30).unwrap();
        assert_eq!(s.timesteps()[0], 958);
        assert_eq!(*s.timesteps().last().unwrap(), 1);
        assert!(s.timesteps().windows(2).all(|w| w[0] - w[1] == 33));
    }

    #[test]
    fn alpha_bar_is_decreasing_in_unit_interval() {
        let s = DdimSchedule::new(50).unwrap();
        let a: Vec<f64> = (0..1000).map(|t| s.alpha_bar(t).unwrap()).collect();
        assert!(a.windows(2).all(|w| w[1] < w[0]));
        assert!(a[0] < 1.0 && a[999] > 0.0);
        // reference value of the v1 schedule at t = 999
        assert!((a[999] - 0.0046).abs() < 2e-4);
    }

    #[test]
    fn final_step_returns_predicted_x0() {
        let s = DdimSchedule::new(30).unwrap();
        let z = Array3::from_shape_fn((2, 3, 3), |(a, b, c)| (a as f32 - b as f32) * 0.3 + c as f32 * 0.1);
        let e = Array3::from_shape_fn((2, 3, 3), |(a, b, c)| ((a + b + c) as f32).sin());
        let t = *s.timesteps().last().unwrap();
        let x0 = predict_x0(&z, &e, s.alpha_bar(t).unwrap()).unwrap();
        assert_eq!(s.step(&z, &e, t).unwrap(), x0);
    }

    #[test]
    fn rejects_bad_alpha_and_steps() {
        let z = Array3::zeros((1, 1, 1));
        assert!(matches!(ddim_update(&z, &z, 0.0, 0.5), Err(MftfError::Schedule(_))));
        assert!(matches!(ddim_update(&z, &z, 0.5, 1.5), Err(MftfError::Schedule(_))));
        assert!(DdimSchedule::new(0).is_err());
        assert!(DdimSchedule::new(1000).is_err());
        let s = DdimSchedule::new(10).unwrap();
        assert!(s.step(&z, &z, 1000).is_err());
    }
}
