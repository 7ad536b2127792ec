//! Learning-rate schedules: constant, linear warmup into a constant plateau,
//! and linear warmup into a cosine decay that reaches zero at the last step.

use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant {
        max_lr: f64,
        total_steps: usize,
    },
    /// Linear ramp from 0 to `max_lr` over `warmup_fraction * total_steps`
    /// steps, then flat.
    WarmupConstant {
        max_lr: f64,
        warmup_fraction: f64,
        total_steps: usize,
    },
    /// Linear ramp, then cosine decay to 0 at `total_steps`.
    WarmupCosine {
        max_lr: f64,
        warmup_fraction: f64,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn total_steps(&self) -> usize {
        match *self {
            LrSchedule::Constant { total_steps, .. }
            | LrSchedule::WarmupConstant { total_steps, .. }
            | LrSchedule::WarmupCosine { total_steps, .. } => total_steps,
        }
    }

    /// Learning rate at `step` (0-based, must be `< total_steps`).
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step >= total {
            return Err(CoreError::OutOfRange {
                context: "lr_at",
                index: step,
                limit: total,
            });
        }
        let lr = match *self {
            LrSchedule::Constant { max_lr, .. } => max_lr,
            LrSchedule::WarmupConstant {
                max_lr,
                warmup_fraction,
                total_steps,
            } => {
                let warm = warmup_steps(warmup_fraction, total_steps);
                if step < warm {
                    max_lr * step as f64 / warm as f64
                } else {
                    max_lr
                }
            }
            LrSchedule::WarmupCosine {
                max_lr,
                warmup_fraction,
                total_steps,
            } => {
                let warm = warmup_steps(warmup_fraction, total_steps);
                if step < warm {
                    max_lr * step as f64 / warm as f64
                } else {
                    let span = (total_steps - warm) as f64;
                    let t = (step - warm) as f64 / span;
                    max_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
                }
            }
        };
        debug_assert!(lr >= 0.0);
        Ok(lr)
    }
}

fn warmup_steps(fraction: f64, total: usize) -> usize {
    let w = libm::round(fraction * total as f64) as usize;
    w.max(1).min(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_constant() {
        let s = LrSchedule::Constant {
            max_lr: 0.005,
            total_steps: 100,
        };
        for step in 0..100 {
            assert_eq!(s.lr_at(step).unwrap(), 0.005);
        }
        assert!(s.lr_at(100).is_err());
    }

    #[test]
    fn warmup_hits_max_at_boundary() {
        let s = LrSchedule::WarmupCosine {
            max_lr: 1.0,
            warmup_fraction: 0.05,
            total_steps: 1000,
        };
        // 5% of 1000 = step 50 is exactly the end of warmup
        assert!((s.lr_at(50).unwrap() - 1.0).abs() < 1e-12);
        assert!(s.lr_at(49).unwrap() < 1.0);
    }

    #[test]
    fn cosine_midpoint_is_half_max() {
        let s = LrSchedule::WarmupCosine {
            max_lr: 0.8,
            warmup_fraction: 0.0,
            total_steps: 2001,
        };
        // warmup clamps to 1 step; decay spans steps 1..2001, midpoint at 1001
        let mid = s.lr_at(1001).unwrap();
        assert!((mid - 0.4).abs() < 1e-12, "mid {mid}");
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = LrSchedule::WarmupConstant {
            max_lr: 2.0,
            warmup_fraction: 0.1,
            total_steps: 100,
        };
        let before = s.lr_at(9).unwrap();
        let at = s.lr_at(10).unwrap();
        assert!(at >= before);
        assert!((at - 2.0).abs() < 1e-12);
    }
}
