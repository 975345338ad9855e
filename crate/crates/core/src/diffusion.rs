//! Forward process, mix-up states, the deterministic DDIM step and the
//! closed-form oracle denoiser that makes DDIM follow the mix chain exactly.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::scenegen::ScenePair;
use crate::schedule::{lambda_at, NoiseSchedule};
use serde::Serialize;

/// Magnitude below which an oracle denominator counts as zero.
pub const ORACLE_G_FLOOR: f64 = 1e-14;

fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// `(1 − λ)·x_ori + λ·x_obj`. Pixels where the two images agree are copied
/// so the blend is exact there.
pub fn mix_image<T: Scalar>(x_ori: &Tensor<T>, x_obj: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mix weight {lambda} outside [0, 1]")));
    }
    let (keep, take) = (lit::<T>(1.0 - lambda), lit::<T>(lambda));
    x_ori.zip_map(x_obj, "mix_image", |a, b| if a == b { a } else { keep * a + take * b })
}

/// `√ᾱₜ·x0 + √(1−ᾱₜ)·ε`.
pub fn forward_noise<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = schedule.alpha_bar(t)?;
    x0.axpby(lit(ab.sqrt()), eps, lit((1.0 - ab).sqrt()))
}

/// One point on the mix chain of a scene pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MixState<T: Scalar = f64> {
    pub t: usize,
    pub lambda: f64,
    pub x_tilde_mix: Tensor<T>,
    pub x_t_mix: Tensor<T>,
    pub eps: Tensor<T>,
    /// Seed of the source scene pair.
    pub pair_ref: u64,
}

impl<T: Scalar> MixState<T> {
    /// Recomputes `x_t_mix` from the stored blend and noise.
    pub fn recompute(&self, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
        forward_noise(&self.x_tilde_mix, self.t, &self.eps, schedule)
    }
}

/// Mix state with an explicit blend weight. `make_mix_state` uses `λₜ`;
/// the frozen-weight ablation passes a constant.
pub fn mix_state_with_lambda<T: Scalar>(
    x_ori: &Tensor<T>,
    x_obj: &Tensor<T>,
    t: usize,
    lambda: f64,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<MixState<T>> {
    let x_tilde_mix = mix_image(x_ori, x_obj, lambda)?;
    let x_t_mix = forward_noise(&x_tilde_mix, t, eps, schedule)?;
    Ok(MixState {
        t,
        lambda,
        x_tilde_mix,
        x_t_mix,
        eps: eps.clone(),
        pair_ref: 0,
    })
}

pub fn make_mix_state(pair: &ScenePair, t: usize, eps: &Tensor<f64>, schedule: &NoiseSchedule) -> Result<MixState<f64>> {
    let lambda = lambda_at(schedule, t)?;
    let mut state = mix_state_with_lambda(&pair.x0_ori, &pair.x0_obj, t, lambda, eps, schedule)?;
    state.pair_ref = pair.seed();
    Ok(state)
}

/// Coefficients `(c_x, c_eps)` of the deterministic step
/// `x_prev = c_x·x_t + c_eps·ε̂` from `t` to `t_prev`.
pub fn ddim_coefficients(t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let (ab_t, ab_p) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
    let c_x = (ab_p / ab_t).sqrt();
    let c_eps = (1.0 - ab_p).sqrt() - c_x * (1.0 - ab_t).sqrt();
    Ok((c_x, c_eps))
}

/// Deterministic DDIM update (`σ = 0`).
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let (ab_t, ab_p) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
    let (sa_t, sa_p) = (lit::<T>(ab_t.sqrt()), lit::<T>(ab_p.sqrt()));
    let (sb_t, sb_p) = (lit::<T>((1.0 - ab_t).sqrt()), lit::<T>((1.0 - ab_p).sqrt()));
    x_t.zip_map(eps_hat, "ddim_step", |x, e| sa_p * ((x - sb_t * e) / sa_t) + sb_p * e)
}

/// `G·ε* = A·x_t + B·x_obj + C·ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleCoefficients {
    pub g: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Single-step coefficients at `t`.
pub fn oracle_coefficients(t: usize, schedule: &NoiseSchedule) -> Result<OracleCoefficients> {
    oracle_coefficients_gamma(t, 1, schedule)
}

/// Coefficients for a jump from `t` to `t − γ`, where the per-step `αₜ` is
/// replaced by the ratio `r = ᾱₜ / ᾱ_{t−γ}`. For `γ = 1` they reduce to the
/// single-step formulas.
pub fn oracle_coefficients_gamma(t: usize, gamma: usize, schedule: &NoiseSchedule) -> Result<OracleCoefficients> {
    if gamma == 0 || gamma > t {
        return Err(Error::invalid(format!("jump {gamma} must lie in [1, {t}]")));
    }
    let ab = schedule.alpha_bar(t)?;
    let r = if gamma == 1 {
        schedule.alpha(t)?
    } else {
        ab / schedule.alpha_bar(t - gamma)?
    };
    let root = (r - ab).max(0.0).sqrt();
    let coeffs = OracleCoefficients {
        g: root - (1.0 - ab).sqrt(),
        a: 1.0 / r - 1.0,
        b: ab.sqrt() * (r - 1.0) / r,
        c: root - (1.0 - ab).sqrt() / r,
    };
    if coeffs.g.abs() < ORACLE_G_FLOOR {
        return Err(Error::Degenerate(format!(
            "oracle denominator G = {:e} at t = {t}, gamma = {gamma}",
            coeffs.g
        )));
    }
    Ok(coeffs)
}

/// Checks `|G|` over every step of a schedule.
pub fn check_oracle_schedule(schedule: &NoiseSchedule) -> Result<()> {
    for t in 1..=schedule.steps() {
        oracle_coefficients(t, schedule)?;
    }
    Ok(())
}

/// The noise prediction that makes one DDIM jump from `x_t_mix` land on the
/// mix state at `t − γ` with the same `ε`. Solved directly from the DDIM map
/// rather than through the G/A/B/C coefficients.
pub fn oracle_epsilon(
    pair: &ScenePair,
    t: usize,
    gamma: usize,
    eps: &Tensor<f64>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f64>> {
    if gamma == 0 || gamma > t {
        return Err(Error::invalid(format!("jump {gamma} must lie in [1, {t}]")));
    }
    let now = make_mix_state(pair, t, eps, schedule)?;
    let target = make_mix_state(pair, t - gamma, eps, schedule)?;
    solve_epsilon(&now.x_t_mix, &target.x_t_mix, t, t - gamma, schedule)
}

/// Inverts the DDIM map: the `ε̂` for which `ddim_step(x_t, ε̂, t, t_prev)`
/// equals `target`.
pub fn solve_epsilon<T: Scalar>(
    x_t: &Tensor<T>,
    target: &Tensor<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (c_x, c_eps) = ddim_coefficients(t, t_prev, schedule)?;
    if c_eps.abs() < ORACLE_G_FLOOR {
        return Err(Error::Degenerate(format!(
            "oracle denominator vanishes between t = {t} and {t_prev}"
        )));
    }
    let (cx, inv) = (lit::<T>(c_x), lit::<T>(1.0 / c_eps));
    target.zip_map(x_t, "solve_epsilon", |y, x| (y - cx * x) * inv)
}

/// Oracle denoiser for an arbitrary state `x_t` given both ground-truth
/// images. The noise is inferred by treating `x_t` as a point on the mix
/// chain, and the returned prediction is the single-step oracle at `t`.
/// Used for analytic end-to-end sampling, where large jumps with this
/// prediction are only approximately on the chain.
pub fn oracle_denoiser<T: Scalar>(
    x_t: &Tensor<T>,
    x_ori: &Tensor<T>,
    x_obj: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(Error::invalid("oracle denoiser needs t >= 1"));
    }
    let ab = schedule.alpha_bar(t)?;
    let tilde = mix_image(x_ori, x_obj, lambda_at(schedule, t)?)?;
    let inferred = x_t.axpby(lit(1.0 / (1.0 - ab).sqrt()), &tilde, lit(-(ab / (1.0 - ab)).sqrt()))?;
    let k = oracle_coefficients(t, schedule)?;
    let terms = x_t.axpby(lit(k.a), x_obj, lit(k.b))?;
    terms.axpby(lit(1.0 / k.g), &inferred, lit(k.c / k.g))
}

/// Residual `G·ε* − (A·x_t + B·x_obj + C·ε)` for one draw.
pub fn oracle_identity_residual(
    coeffs: &OracleCoefficients,
    eps_star: &Tensor<f64>,
    x_t_mix: &Tensor<f64>,
    x_obj: &Tensor<f64>,
    eps: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let lhs = eps_star.scale(coeffs.g);
    let rhs = x_t_mix.axpby(coeffs.a, x_obj, coeffs.b)?.axpby(1.0, eps, coeffs.c)?;
    lhs.sub(&rhs)
}

/// Oracle rollout from `T` to 0 along the mix chain of `pair`, one step at a
/// time. Returns the final state.
pub fn oracle_rollout(pair: &ScenePair, eps: &Tensor<f64>, schedule: &NoiseSchedule) -> Result<Tensor<f64>> {
    let big_t = schedule.steps();
    let mut x = make_mix_state(pair, big_t, eps, schedule)?.x_t_mix;
    for t in (1..=big_t).rev() {
        let k = oracle_coefficients(t, schedule)?;
        let eps_star = x
            .axpby(k.a / k.g, &pair.x0_obj, k.b / k.g)?
            .axpby(1.0, eps, k.c / k.g)?;
        x = ddim_step(&x, &eps_star, t, t - 1, schedule)?;
    }
    Ok(x)
}
