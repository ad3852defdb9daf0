use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaSchedule {
    #[default]
    Linear,
    Cosine,
}

/// Codebook fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f32,
    pub lambda: f32,
    pub beta_high: f32,
    pub beta_low: f32,
    pub steps: usize,
    /// Leading fraction of steps that optimize the task term alone.
    pub warmup_frac: f32,
    pub temperature: f32,
    pub batch: usize,
    pub seed: u64,
    pub schedule: BetaSchedule,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            lambda: 1e-2,
            beta_high: 20.0,
            beta_low: 2.0,
            steps: 5000,
            warmup_frac: 0.1,
            temperature: 1.0,
            batch: 1,
            seed: 0,
            schedule: BetaSchedule::Linear,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.beta_high >= self.beta_low && self.beta_low > 0.0) {
            return bad(format!(
                "need beta_high >= beta_low > 0, got {} / {}",
                self.beta_high, self.beta_low
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.lr > 0.0) || self.lambda < 0.0 {
            return bad(format!("lr {} / lambda {} invalid", self.lr, self.lambda));
        }
        if self.batch != 1 {
            return bad(format!(
                "batch size {} unsupported; samples are drawn one at a time",
                self.batch
            ));
        }
        Ok(())
    }

    /// Number of leading steps without the rounding regularizer.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac as f64 * self.steps as f64).floor() as usize
    }

    pub fn in_warmup(&self, t: usize) -> bool {
        t <= self.warmup_steps()
    }

    /// Regularizer weight at step `t`: 0 during warm-up, `lambda` after.
    pub fn lambda_at(&self, t: usize) -> f64 {
        if self.in_warmup(t) {
            0.0
        } else {
            self.lambda as f64
        }
    }
}

/// Sharpness exponent at step `t` in `1..=steps`: held at `beta_high`
/// through warm-up, then annealed to `beta_low` at the final step.
pub fn anneal_beta(t: usize, cfg: &FinetuneConfig) -> Result<f32> {
    if t == 0 || t > cfg.steps {
        return Err(Error::StepOutOfRange {
            step: t,
            total: cfg.steps,
        });
    }
    let warm = cfg.warmup_steps();
    if t <= warm {
        return Ok(cfg.beta_high);
    }
    let start = warm + 1;
    let span = cfg.steps - start;
    let frac = if span == 0 {
        1.0
    } else {
        (t - start) as f64 / span as f64
    };
    let (hi, lo) = (cfg.beta_high as f64, cfg.beta_low as f64);
    let beta = match cfg.schedule {
        BetaSchedule::Linear => hi + (lo - hi) * frac,
        BetaSchedule::Cosine => lo + (hi - lo) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    };
    Ok(beta as f32)
}
