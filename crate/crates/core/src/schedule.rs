//! Noise schedules and the mix-up weight `λₜ = 1 − ᾱₜ`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Horizon `T`.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

/// Per-step tables for a fixed horizon `T`.
///
/// `beta`, `alpha` are indexed `1..=T` (stored at `t − 1`); `alpha_bar` and
/// `lambda` are indexed `0..=T` with `ᾱ₀ = 1` and `λ₀ = 0`. Sampling is
/// deterministic, so there is no per-step variance table.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    lambda: Vec<f64>,
}

/// Cosine offset `s` from the improved-DDPM schedule.
const COSINE_OFFSET: f64 = 0.008;

pub fn build_schedule(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "beta bounds must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: usize| {
                let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t) / f(t - 1)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * a);
    }
    let lambda = alpha_bar.iter().map(|ab| 1.0 - ab).collect();
    let schedule = NoiseSchedule {
        config: ScheduleConfig {
            kind,
            steps,
            beta_min,
            beta_max,
        },
        beta,
        alpha,
        alpha_bar,
        lambda,
    };
    schedule.validate()?;
    Ok(schedule)
}

impl NoiseSchedule {
    fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("beta outside (0, 1)"));
        }
        if self.alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Degenerate("alpha_bar is not strictly decreasing".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn kind(&self) -> ScheduleKind {
        self.config.kind
    }

    /// Horizon `T`.
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [{lo}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `βₜ` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.beta[t - 1])
    }

    /// `αₜ = 1 − βₜ` for `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.alpha[t - 1])
    }

    /// `ᾱₜ` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn lambda_table(&self) -> &[f64] {
        &self.lambda
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }
}

/// Mix-up weight `λₜ = 1 − ᾱₜ`; zero at `t = 0`.
pub fn lambda_at(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.check_step(t, 0)?;
    Ok(schedule.lambda[t])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn boundaries() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = build_schedule(kind, 50, 1e-4, 0.5).unwrap();
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            assert_eq!(lambda_at(&s, 0).unwrap(), 0.0);
            assert_eq!(lambda_at(&s, 50).unwrap(), 1.0 - s.alpha_bar(50).unwrap());
        }
    }

    #[test]
    fn first_step_alpha_bar() {
        assert_eq!(reference().alpha_bar(1).unwrap(), 0.9999);
    }

    #[test]
    fn final_alpha_bar_matches_product_oracle() {
        // 40-digit product of (1 - beta_i), computed independently.
        const GOLDEN: f64 = 4.035829765375683e-5;
        let s = reference();
        let got = s.alpha_bar(1000).unwrap();
        assert!((got - GOLDEN).abs() / GOLDEN < 1e-11, "{got}");
        assert!((lambda_at(&s, 1000).unwrap() - (1.0 - GOLDEN)).abs() < 1e-15);
    }

    #[test]
    fn default_desk_schedule_values() {
        // Same 40-digit product oracle for T = 200.
        let s = ScheduleConfig::default().build().unwrap();
        assert!((s.alpha_bar(200).unwrap() - 0.13218275425061779).abs() < 1e-13);
        assert!((s.alpha_bar(190).unwrap() - 0.16103507307185525).abs() < 1e-13);
    }

    #[test]
    fn ratio_recovers_alpha() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = build_schedule(kind, 200, 1e-4, 0.999).unwrap();
            for t in 1..=200 {
                let r = s.alpha_bar(t).unwrap() / s.alpha_bar(t - 1).unwrap();
                assert!((r - s.alpha(t).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(build_schedule(ScheduleKind::Linear, 1, 1e-4, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
        assert!(lambda_at(&reference(), 1001).is_err());
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let s = ScheduleConfig::default();
        let text = serde_json::to_string(&s).unwrap();
        let back: ScheduleConfig = serde_json::from_str(&text).unwrap();
        let (a, b) = (s.build().unwrap(), back.build().unwrap());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.alpha_bar_table()), bits(b.alpha_bar_table()));
        assert_eq!(bits(a.lambda_table()), bits(b.lambda_table()));
    }

    proptest! {
        #[test]
        fn lambda_strictly_increasing(t in 0usize..999) {
            let s = reference();
            prop_assert!(lambda_at(&s, t + 1).unwrap() > lambda_at(&s, t).unwrap());
        }

        #[test]
        fn any_valid_schedule_satisfies_invariants(
            steps in 2usize..300,
            lo in 1e-5f64..0.05,
            span in 0.0f64..0.5,
            cosine in any::<bool>(),
        ) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = build_schedule(kind, steps, lo, lo + span).unwrap();
            prop_assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                let b = s.beta(t).unwrap();
                prop_assert!(b > 0.0 && b < 1.0);
            }
        }
    }
}
