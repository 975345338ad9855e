//! Erase inference: strength-controlled noising of the input, a descending
//! DDIM grid with background re-imposition, and an analytic oracle denoiser.

use crate::diffusion::{ddim_step, forward_noise, oracle_denoiser};
use crate::error::{Error, Result};
use crate::model::{Conditioning, DenoiserModel};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, normal_tensor, rng_from, stream};
use crate::scenegen::{masked_image, Mask, ScenePair};
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// Fraction of the horizon the input is noised to.
    pub strength: f64,
    pub sra: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            strength: 0.95,
            sra: true,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Config(format!("strength {} outside (0, 1]", self.strength)));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in a single `C×H×W` state.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &Tensor<f64>, t: usize, mask: &Mask, masked: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// A trained network. SRA follows the model's own flag.
pub struct ModelDenoiser<'a>(pub &'a DenoiserModel<f32>);

impl Denoiser for ModelDenoiser<'_> {
    fn predict(&self, x_t: &Tensor<f64>, t: usize, mask: &Mask, masked: &Tensor<f64>) -> Result<Tensor<f64>> {
        let x = x_t.cast::<f32>().reshape(&[1, x_t.shape()[0], x_t.shape()[1], x_t.shape()[2]])?;
        let cond = Conditioning {
            masks: vec![mask.clone()],
            masked_image: masked.cast::<f32>().reshape(x.shape())?,
        };
        let out = self.0.predict_eps(&x, &cond, &[t])?;
        out.cast::<f64>().reshape(x_t.shape())
    }
}

/// Closed-form oracle for one scene pair.
pub struct OracleDenoiser<'a> {
    pub pair: &'a ScenePair,
    pub schedule: &'a NoiseSchedule,
}

impl Denoiser for OracleDenoiser<'_> {
    fn predict(&self, x_t: &Tensor<f64>, t: usize, _: &Mask, _: &Tensor<f64>) -> Result<Tensor<f64>> {
        oracle_denoiser(x_t, &self.pair.x0_ori, &self.pair.x0_obj, t, self.schedule)
    }
}

/// Always predicts zero noise.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict(&self, x_t: &Tensor<f64>, _: usize, _: &Mask, _: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Final image, clamped to `[0, 1]`.
    pub image: Tensor<f64>,
    /// Timesteps of the trajectory, descending from `t_start` to 0.
    pub timesteps: Vec<usize>,
    /// States at each grid point, unclamped; the last one is before clamping.
    pub trajectory: Vec<Tensor<f64>>,
}

/// `steps + 1` evenly spaced integer timesteps from `t_start` down to 0.
pub fn step_grid(t_start: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || t_start < steps {
        return Err(Error::Degenerate(format!(
            "{steps} steps do not fit below t_start = {t_start}"
        )));
    }
    let mut grid: Vec<usize> = (0..=steps)
        .map(|i| ((t_start * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect();
    grid.dedup();
    debug_assert_eq!(grid.len(), steps + 1);
    Ok(grid)
}

pub fn start_step(strength: f64, horizon: usize) -> usize {
    (strength * horizon as f64).round() as usize
}

/// Erases the masked region of `input` (the scene with the object).
pub fn erase_sample(
    denoiser: &dyn Denoiser,
    input: &Tensor<f64>,
    mask: &Mask,
    cfg: &SampleConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if mask.is_full() {
        return Err(Error::Degenerate("mask covers the whole image".into()));
    }
    if input.rank() != 3 || input.shape()[1] != mask.height() || input.shape()[2] != mask.width() {
        return Err(Error::shape(
            "erase_sample",
            format!("input {:?} vs mask {}x{}", input.shape(), mask.height(), mask.width()),
        ));
    }
    if input.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("input pixels must lie in [0, 1]"));
    }
    let t_start = start_step(cfg.strength, schedule.steps());
    let grid = step_grid(t_start, cfg.steps)?;

    let eps = normal_tensor::<f64>(&mut rng_from(derive_seed(cfg.seed, &[stream::SAMPLE])), input.shape());
    let masked = masked_image(input, mask);
    let (h, w) = (mask.height(), mask.width());
    let hole: Vec<bool> = (0..input.numel()).map(|i| mask.get((i / w) % h, i % w)).collect();
    let reimpose = |x: &mut Tensor<f64>, t: usize| -> Result<()> {
        let known = forward_noise(input, t, &eps, schedule)?;
        for ((v, k), &inside) in x.data_mut().iter_mut().zip(known.data()).zip(&hole) {
            if !inside {
                *v = *k;
            }
        }
        Ok(())
    };

    let mut x = forward_noise(input, t_start, &eps, schedule)?;
    let mut trajectory = vec![x.clone()];
    for pair in grid.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps_hat = denoiser.predict(&x, t, mask, &masked)?;
        x = ddim_step(&x, &eps_hat, t, t_prev, schedule)?;
        reimpose(&mut x, t_prev)?;
        x.check_finite("sampler state")?;
        trajectory.push(x.clone());
    }
    Ok(SampleOutput {
        image: x.map(|v| v.clamp(0.0, 1.0)),
        timesteps: grid,
        trajectory,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageRun {
    pub strength: f64,
    pub output: SampleOutput,
}

/// Erases the pair's object at each strength, starting from the scene with
/// the object.
pub fn leakage_probe(
    denoiser: &dyn Denoiser,
    pair: &ScenePair,
    strengths: &[f64],
    base: &SampleConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<LeakageRun>> {
    strengths
        .iter()
        .map(|&strength| {
            let cfg = SampleConfig { strength, ..*base };
            Ok(LeakageRun {
                strength,
                output: erase_sample(denoiser, &pair.x0_obj, &pair.mask, &cfg, schedule)?,
            })
        })
        .collect()
}
