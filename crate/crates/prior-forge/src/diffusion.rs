//! Noise schedules, the forward diffusion process, classifier-free-guidance
//! combination and the deterministic (eta = 0) DDIM update in the
//! x0-prediction parameterization.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_CLIP: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Cumulative signal coefficients for a diffusion process of `T` steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    /// alpha_bar[0..=T], alpha_bar[0] = 1, strictly decreasing.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} out of range 0..={}", self.timesteps)))
    }

    fn from_betas(kind: ScheduleKind, betas: &[f64]) -> Self {
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for beta in betas {
            acc *= 1.0 - beta.min(BETA_CLIP);
            alpha_bar.push(acc);
        }
        NoiseSchedule { kind, timesteps: betas.len(), alpha_bar }
    }
}

/// Cosine schedule with offset `s`, per-step beta clipped at 0.999.
pub fn make_cosine_schedule(timesteps: usize, s: f64) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    let f = |t: f64| {
        let x = ((t / timesteps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let betas: Vec<f64> = (1..=timesteps)
        .map(|t| {
            let ratio = f(t as f64) / f((t - 1) as f64);
            (1.0 - ratio).min(BETA_CLIP)
        })
        .collect();
    let mut sched = NoiseSchedule::from_betas(ScheduleKind::Cosine, &betas);
    // keep the exact normalized form where the clip is inactive
    for t in 0..=timesteps {
        let exact = f(t as f64) / f0;
        if (sched.alpha_bar[t] - exact).abs() < 1e-12 {
            sched.alpha_bar[t] = exact;
        }
    }
    Ok(sched)
}

/// Linear beta schedule; the decoder-style convention (1000 steps, 1e-4..0.02).
pub fn make_linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "invalid beta range {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(ScheduleKind::Linear, &betas))
}

/// z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps.
pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    z0: &Array1<f32>,
    t: usize,
    eps: &Array1<f32>,
) -> Result<Array1<f32>> {
    let ab = schedule.alpha_bar(t)?;
    let signal = ab.sqrt() as f32;
    let noise = (1.0 - ab).sqrt() as f32;
    Ok(z0 * signal + eps * noise)
}

/// pred_uncond + scale * (pred_cond - pred_uncond).
pub fn cfg_combine(pred_uncond: &Array1<f32>, pred_cond: &Array1<f32>, scale: f32) -> Array1<f32> {
    pred_uncond + &((pred_cond - pred_uncond) * scale)
}

/// Evenly spaced descending DDIM timesteps; the last transition targets t=0.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > timesteps {
        return Err(Error::invalid(format!(
            "steps {steps} outside 1..={timesteps}"
        )));
    }
    Ok((0..steps).map(|i| (steps - i) * timesteps / steps).collect())
}

/// Deterministic DDIM update consuming an x0 prediction.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Array1<f32>,
    z0_hat: &Array1<f32>,
    t: usize,
    t_prev: usize,
) -> Result<Array1<f32>> {
    if t <= t_prev {
        return Err(Error::invalid(format!("ddim step requires t > t_prev ({t} <= {t_prev})")));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let sig_t = ab_t.sqrt() as f32;
    let noi_t = (1.0 - ab_t).sqrt() as f32;
    if noi_t == 0.0 {
        return Err(Error::numeric("degenerate schedule: alpha_bar[t] = 1 for t > 0"));
    }
    let eps_hat = (z_t - &(z0_hat * sig_t)) / noi_t;
    Ok(z0_hat * (ab_prev.sqrt() as f32) + &(eps_hat * ((1.0 - ab_prev).sqrt() as f32)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{gaussian_vector, rng_from_seed};
    use rand::Rng;

    #[test]
    fn cosine_schedule_shape() {
        let s = make_cosine_schedule(1000, 0.008).unwrap();
        assert_eq!(s.alpha_bar.len(), 1001);
        assert_eq!(s.alpha_bar[0], 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1], "not decreasing at {t}");
            assert!(s.alpha_bar[t] > 0.0);
        }
        assert!(s.alpha_bar[1000] < 1e-4);
    }

    #[test]
    fn cosine_rejects_zero_steps() {
        assert!(make_cosine_schedule(0, 0.008).is_err());
    }

    #[test]
    fn linear_schedule_defaults() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        // direct product oracle
        let mut acc = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            acc *= 1.0 - beta;
        }
        assert!((s.alpha_bar[1000] - acc).abs() < 1e-12);
        assert!((s.alpha_bar[1000] - 4.0e-5).abs() < 1e-5);
    }

    #[test]
    fn linear_rejects_bad_betas() {
        assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.5).is_err());
        assert!(make_linear_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_endpoints() {
        let s = make_cosine_schedule(100, 0.008).unwrap();
        let mut rng = rng_from_seed(5);
        let z0 = gaussian_vector(&mut rng, 8);
        let eps = gaussian_vector(&mut rng, 8);
        let zt = forward_diffuse(&s, &z0, 0, &eps).unwrap();
        assert_eq!(zt, z0);
        let zero = Array1::zeros(8);
        let zt = forward_diffuse(&s, &z0, 40, &zero).unwrap();
        let scale = s.alpha_bar[40].sqrt() as f32;
        for i in 0..8 {
            assert!((zt[i] - z0[i] * scale).abs() < 1e-7);
        }
        assert!(forward_diffuse(&s, &z0, 101, &eps).is_err());
    }

    #[test]
    fn forward_diffuse_second_moment() {
        // E||z_t||^2 = ab ||z0||^2 + (1-ab) d over eps draws
        let s = make_cosine_schedule(100, 0.008).unwrap();
        let mut rng = rng_from_seed(9);
        let d = 16;
        let z0 = gaussian_vector(&mut rng, d);
        let t = 60;
        let n = 10_000;
        let mut acc = 0.0f64;
        for _ in 0..n {
            let eps = gaussian_vector(&mut rng, d);
            let zt = forward_diffuse(&s, &z0, t, &eps).unwrap();
            acc += zt.iter().map(|x| (*x as f64).powi(2)).sum::<f64>();
        }
        let got = acc / n as f64;
        let z0sq = z0.iter().map(|x| (*x as f64).powi(2)).sum::<f64>();
        let want = s.alpha_bar[t] * z0sq + (1.0 - s.alpha_bar[t]) * d as f64;
        assert!((got - want).abs() / want < 0.05, "got {got}, want {want}");
    }

    #[test]
    fn cfg_identities() {
        let u = Array1::from(vec![1.0f32, 2.0, 3.0]);
        let c = Array1::from(vec![0.0f32, 1.0, -1.0]);
        assert_eq!(cfg_combine(&u, &c, 1.0), c);
        assert_eq!(cfg_combine(&u, &c, 0.0), u);
        let zero = Array1::zeros(3);
        let v = Array1::from(vec![0.5f32, -0.5, 2.0]);
        let got = cfg_combine(&zero, &v, 2.0);
        for i in 0..3 {
            assert!((got[i] - 2.0 * v[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn cfg_affine_in_scale() {
        let mut rng = rng_from_seed(2);
        let u = gaussian_vector(&mut rng, 6);
        let c = gaussian_vector(&mut rng, 6);
        let a = cfg_combine(&u, &c, 0.0);
        let b = cfg_combine(&u, &c, 1.0);
        let m = cfg_combine(&u, &c, 2.0);
        // outputs for scales {0,1,2} are collinear: m - b == b - a
        for i in 0..6 {
            assert!(((m[i] - b[i]) - (b[i] - a[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn ddim_timestep_grids() {
        assert_eq!(ddim_timesteps(10, 2).unwrap(), vec![10, 5]);
        let g = ddim_timesteps(1000, 100).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 1000);
        for w in g.windows(2) {
            assert_eq!(w[0] - w[1], 10);
        }
        let full = ddim_timesteps(8, 8).unwrap();
        assert_eq!(full, vec![8, 7, 6, 5, 4, 3, 2, 1]);
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_consistency_identity() {
        // with z0_hat = z0 the update maps forward_diffuse(t) to forward_diffuse(t_prev)
        let s = make_cosine_schedule(1000, 0.008).unwrap();
        let mut rng = rng_from_seed(21);
        for _ in 0..1000 {
            let z0 = gaussian_vector(&mut rng, 8);
            let eps = gaussian_vector(&mut rng, 8);
            let t = rng.gen_range(2..=1000);
            let t_prev = rng.gen_range(0..t);
            let zt = forward_diffuse(&s, &z0, t, &eps).unwrap();
            let got = ddim_step(&s, &zt, &z0, t, t_prev).unwrap();
            let want = forward_diffuse(&s, &z0, t_prev, &eps).unwrap();
            for i in 0..8 {
                assert!((got[i] - want[i]).abs() < 1e-4, "t={t} t_prev={t_prev}");
            }
        }
    }

    #[test]
    fn ddim_terminal_step_returns_z0() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = rng_from_seed(3);
        let z0 = gaussian_vector(&mut rng, 8);
        let eps = gaussian_vector(&mut rng, 8);
        let zt = forward_diffuse(&s, &z0, 37, &eps).unwrap();
        let got = ddim_step(&s, &zt, &z0, 37, 0).unwrap();
        for i in 0..8 {
            assert!((got[i] - z0[i]).abs() < 1e-5);
        }
        assert!(ddim_step(&s, &zt, &z0, 5, 5).is_err());
    }

    #[test]
    fn constant_denoiser_converges_to_mu() {
        let s = make_cosine_schedule(200, 0.008).unwrap();
        let mut rng = rng_from_seed(17);
        let mu = gaussian_vector(&mut rng, 8);
        let mut z = gaussian_vector(&mut rng, 8);
        let grid = ddim_timesteps(200, 20).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let t_prev = if i + 1 < grid.len() { grid[i + 1] } else { 0 };
            z = ddim_step(&s, &z, &mu, t, t_prev).unwrap();
        }
        for i in 0..8 {
            assert!((z[i] - mu[i]).abs() < 1e-5);
        }
    }
}
