//! Diffusion noise schedules.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Cumulative signal fractions `alpha_bar[t]` for `t in 0..steps`, strictly
/// decreasing, all in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Self {
        assert!(steps >= 1, "a schedule needs at least one step");
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (0..steps)
                    .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = ((scale * 1e-4).min(MAX_BETA), (scale * 0.02).min(MAX_BETA));
                (0..steps)
                    .map(|t| {
                        if steps == 1 {
                            hi
                        } else {
                            lo + (hi - lo) * t as f64 / (steps - 1) as f64
                        }
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        DiffusionSchedule { kind, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `alpha_bar[t-1]`, with `alpha_bar[-1] = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar(t) / self.alpha_bar_prev(t)
    }

    /// Mean coefficients `(c_x0, c_xt)` and variance of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_prev(t);
        let beta = self.beta(t);
        let alpha = 1.0 - beta;
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        (c_x0, c_xt, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_and_in_range() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in [1, 2, 8, 64, 1000] {
                let s = DiffusionSchedule::new(kind, steps);
                assert_eq!(s.steps(), steps);
                assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0), "{kind:?} {steps}");
                assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            }
        }
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 64);
        assert!(s.alpha_bar(0) > 0.99);
        assert!(s.alpha_bar(63) < 1e-2);
    }

    #[test]
    fn posterior_at_first_step_is_clean() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 16);
        let (c0, ct, var) = s.posterior(0);
        assert!((c0 - 1.0).abs() < 1e-12 && ct.abs() < 1e-12 && var.abs() < 1e-12);
    }
}
