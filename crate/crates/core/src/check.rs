//! Self-check of the closed-form oracle: coefficient identity, jump
//! composition and full rollout, each against a fixed tolerance.

use crate::diffusion::{
    ddim_step, make_mix_state, oracle_coefficients, oracle_coefficients_gamma, oracle_epsilon, oracle_identity_residual,
    oracle_rollout,
};
use crate::error::Result;
use crate::rng::{derive_seed, normal_tensor, rng_from, stream};
use crate::scenegen::{scene_for_index, SceneConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use rand::Rng;
use serde::Serialize;

pub const IDENTITY_TOL: f64 = 1e-10;
pub const COMPOSITION_TOL: f64 = 1e-9;
pub const ROLLOUT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleCheckConfig {
    pub identity_draws: usize,
    pub composition_draws: usize,
    pub rollout_scenes: usize,
    /// Relative perturbation of the `B` coefficient. Nonzero only to prove
    /// the check can fail.
    pub corrupt_b: f64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            identity_draws: 200,
            composition_draws: 20,
            rollout_scenes: 3,
            corrupt_b: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    /// `(t, draw seed)` of the worst draw.
    pub worst: (usize, u64),
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheckReport {
    pub schedule: ScheduleKind,
    pub horizon: usize,
    pub suites: Vec<SuiteResult>,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

fn track(suite: &mut SuiteResult, err: f64, t: usize, seed: u64) {
    // NaN counts as a failure.
    if !(err <= suite.max_error) {
        suite.max_error = err;
        suite.worst = (t, seed);
    }
}

fn suite(name: &'static str, tolerance: f64) -> SuiteResult {
    SuiteResult {
        name,
        max_error: 0.0,
        tolerance,
        worst: (0, 0),
    }
}

pub fn oracle_check(
    seed: u64,
    scene: &SceneConfig,
    schedule: &NoiseSchedule,
    cfg: &OracleCheckConfig,
) -> Result<OracleCheckReport> {
    let base = derive_seed(seed, &[stream::SCENE]);
    let horizon = schedule.steps();
    let draw = |suite_tag: u64, i: usize| {
        let s = derive_seed(seed, &[stream::EVAL, suite_tag, i as u64]);
        (s, rng_from(s))
    };

    let mut identity = suite("coefficient identity", IDENTITY_TOL);
    for i in 0..cfg.identity_draws {
        let (s, mut rng) = draw(1, i);
        let pair = scene_for_index(base, i as u64, scene)?;
        let t = rng.random_range(1..=horizon);
        let eps = normal_tensor::<f64>(&mut rng, pair.x0_ori.shape());
        let star = oracle_epsilon(&pair, t, 1, &eps, schedule)?;
        let state = make_mix_state(&pair, t, &eps, schedule)?;
        let mut k = oracle_coefficients(t, schedule)?;
        k.b *= 1.0 + cfg.corrupt_b;
        let res = oracle_identity_residual(&k, &star, &state.x_t_mix, &pair.x0_obj, &eps)?;
        track(&mut identity, res.max_abs() / star.scale(k.g).max_abs(), t, s);
    }

    let mut composition = suite("jump composition", COMPOSITION_TOL);
    for i in 0..cfg.composition_draws {
        let (s, mut rng) = draw(2, i);
        let pair = scene_for_index(base, i as u64, scene)?;
        let t = rng.random_range(2..=horizon);
        let eps = normal_tensor::<f64>(&mut rng, pair.x0_ori.shape());
        oracle_coefficients_gamma(t, 2, schedule)?;
        let x = make_mix_state(&pair, t, &eps, schedule)?.x_t_mix;
        let direct = ddim_step(&x, &oracle_epsilon(&pair, t, 2, &eps, schedule)?, t, t - 2, schedule)?;
        let mid = ddim_step(&x, &oracle_epsilon(&pair, t, 1, &eps, schedule)?, t, t - 1, schedule)?;
        let two = ddim_step(&mid, &oracle_epsilon(&pair, t - 1, 1, &eps, schedule)?, t - 1, t - 2, schedule)?;
        track(&mut composition, direct.max_abs_diff(&two)?, t, s);
    }

    let mut rollout = suite("full rollout", ROLLOUT_TOL);
    for i in 0..cfg.rollout_scenes {
        let (s, mut rng) = draw(3, i);
        let pair = scene_for_index(base, i as u64, scene)?;
        let eps = normal_tensor::<f64>(&mut rng, pair.x0_ori.shape());
        let out = oracle_rollout(&pair, &eps, schedule)?;
        track(&mut rollout, out.max_abs_diff(&pair.x0_ori)?, horizon, s);
    }

    Ok(OracleCheckReport {
        schedule: schedule.kind(),
        horizon,
        suites: vec![identity, composition, rollout],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    #[test]
    fn default_check_passes_and_corruption_fails() {
        let s = ScheduleConfig::default().build().unwrap();
        let scene = SceneConfig::default();
        let cfg = OracleCheckConfig { identity_draws: 30, composition_draws: 5, rollout_scenes: 1, corrupt_b: 0.0 };
        let ok = oracle_check(1, &scene, &s, &cfg).unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.horizon, 200);
        let bad = oracle_check(1, &scene, &s, &OracleCheckConfig { corrupt_b: 1e-3, ..cfg }).unwrap();
        assert!(!bad.passed());
        assert!(!bad.suites[0].passed() && bad.suites[1].passed());
        assert!(bad.suites[0].worst.0 >= 1);
        assert_eq!(ok, oracle_check(1, &scene, &s, &cfg).unwrap());
    }
}
