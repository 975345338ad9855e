//! Training regimes: the chain-rectifying objective on mix-up chains, the
//! standard noise-prediction objective with random or background-only
//! masks, and the frozen-blend ablation.

use crate::diffusion::{ddim_coefficients, forward_noise, mix_state_with_lambda};
use crate::error::{Error, Result};
use crate::model::{build_denoiser, load_checkpoint, save_checkpoint, Checkpoint, Conditioning, DenoiserConfig, DenoiserModel};
use crate::numerics::{adam_step, AdamParams, AdamState, Scalar, Tape, Tensor, Var};
use crate::rng::{derive_seed, normal_tensor, rng_from, stream, EngineRng};
use crate::scenegen::{
    background_constrained_mask, masked_image, random_mask, scene_for_index, AreaBounds, Mask, MaskKind, MaskSpec,
    SceneConfig, ScenePair,
};
use crate::schedule::{lambda_at, NoiseSchedule, ScheduleConfig};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Chain-rectifying objective on mix-up chains.
    Cro,
    /// Noise prediction with random-family masks.
    Standard,
    /// Noise prediction with masks kept off every object.
    StandardBg,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cro => "cro",
            Objective::Standard => "standard",
            Objective::StandardBg => "standard_bg",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cro" => Ok(Objective::Cro),
            "standard" => Ok(Objective::Standard),
            "standard_bg" => Ok(Objective::StandardBg),
            other => Err(Error::invalid(format!(
                "unknown objective {other:?} (expected cro, standard or standard_bg)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Largest jump between the two chain states of one example.
    pub gamma_m: usize,
    /// `false` freezes the blend weight at `lambda_const` (for `t ≥ 1`).
    pub mixup: bool,
    pub lambda_const: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamParams,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Cro,
            gamma_m: 100,
            mixup: true,
            lambda_const: 1.0,
            batch_size: 16,
            steps: 3000,
            adam: AdamParams {
                lr: 2e-3,
                ..AdamParams::default()
            },
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.gamma_m == 0 || self.gamma_m >= horizon {
            return Err(Error::Config(format!(
                "gamma_m must satisfy 1 <= gamma_m < T = {horizon}, got {}",
                self.gamma_m
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_const) {
            return Err(Error::Config(format!("lambda_const {} outside [0, 1]", self.lambda_const)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
    pub t: Vec<usize>,
    pub gamma: Vec<usize>,
    pub seconds: f64,
    pub nan: bool,
}

pub const LOG_HEADER: &str = "step,loss,t,gamma,nan_flag,seconds";

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "{},{:e},{},{},{},{:.3}",
            self.step,
            self.loss,
            join(&self.t),
            join(&self.gamma),
            u8::from(self.nan),
            self.seconds
        )
    }
}

/// `t ~ U{1..T}`, then `γ ~ U{1..min(γ_m, t)}`.
pub fn draw_t_gamma(rng: &mut EngineRng, horizon: usize, gamma_m: usize) -> (usize, usize) {
    let t = rng.random_range(1..=horizon);
    let gamma = rng.random_range(1..=gamma_m.min(t));
    (t, gamma)
}

/// How the blend weight follows the timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlendMode {
    /// `λₜ = 1 − ᾱₜ`.
    Schedule,
    /// Constant for `t ≥ 1`; `λ₀ = 0` is kept so the chain still ends on the
    /// background image.
    Frozen(f64),
}

impl BlendMode {
    pub fn lambda(self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        match self {
            BlendMode::Schedule => lambda_at(schedule, t),
            BlendMode::Frozen(_) if t == 0 => Ok(0.0),
            BlendMode::Frozen(l) => Ok(l),
        }
    }
}

/// A prepared chain-rectifying batch. The loss is
/// `mean ‖target − (c_x·x_t + c_eps·ε̂)‖²`.
#[derive(Clone, Debug)]
pub struct CroBatch<T: Scalar> {
    pub x_t: Tensor<T>,
    pub target: Tensor<T>,
    pub c_x: Vec<T>,
    pub c_eps: Vec<T>,
    pub t: Vec<usize>,
    pub gamma: Vec<usize>,
    pub eps: Tensor<T>,
    pub cond: Conditioning<T>,
}

impl<T: Scalar> CroBatch<T> {
    pub fn cast<U: Scalar>(&self) -> CroBatch<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        CroBatch {
            x_t: self.x_t.cast(),
            target: self.target.cast(),
            c_x: c(&self.c_x),
            c_eps: c(&self.c_eps),
            t: self.t.clone(),
            gamma: self.gamma.clone(),
            eps: self.eps.cast(),
            cond: Conditioning {
                masks: self.cond.masks.clone(),
                masked_image: self.cond.masked_image.cast(),
            },
        }
    }
}

fn background_condition(pairs: &[ScenePair], masks: &[Mask]) -> Result<Tensor<f64>> {
    let imgs: Vec<Tensor<f64>> = pairs.iter().zip(masks).map(|(p, m)| masked_image(&p.x0_ori, m)).collect();
    Tensor::stack(&imgs)
}

/// Draws `(t, γ, ε)` per pair and builds both chain states with a shared `ε`.
/// The conditioning mask is each pair's object mask.
pub fn cro_batch(
    pairs: &[ScenePair],
    schedule: &NoiseSchedule,
    gamma_m: usize,
    blend: BlendMode,
    rng: &mut EngineRng,
) -> Result<CroBatch<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut xs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut epss = Vec::with_capacity(pairs.len());
    let (mut c_x, mut c_eps, mut ts, mut gammas) = (vec![], vec![], vec![], vec![]);
    for p in pairs {
        let (t, gamma) = draw_t_gamma(rng, schedule.steps(), gamma_m);
        let eps = normal_tensor::<f64>(rng, p.x0_ori.shape());
        let now = mix_state_with_lambda(&p.x0_ori, &p.x0_obj, t, blend.lambda(schedule, t)?, &eps, schedule)?;
        let prev = mix_state_with_lambda(
            &p.x0_ori,
            &p.x0_obj,
            t - gamma,
            blend.lambda(schedule, t - gamma)?,
            &eps,
            schedule,
        )?;
        let (cx, ce) = ddim_coefficients(t, t - gamma, schedule)?;
        xs.push(now.x_t_mix);
        targets.push(prev.x_t_mix);
        epss.push(eps);
        c_x.push(cx);
        c_eps.push(ce);
        ts.push(t);
        gammas.push(gamma);
    }
    let masks: Vec<Mask> = pairs.iter().map(|p| p.mask.clone()).collect();
    Ok(CroBatch {
        x_t: Tensor::stack(&xs)?,
        target: Tensor::stack(&targets)?,
        c_x,
        c_eps,
        t: ts,
        gamma: gammas,
        eps: Tensor::stack(&epss)?,
        cond: Conditioning {
            masked_image: background_condition(pairs, &masks)?,
            masks,
        },
    })
}

/// Chain-rectifying loss for a given noise prediction on the tape.
pub fn cro_loss<T: Scalar>(tape: &mut Tape<T>, eps_hat: Var, batch: &CroBatch<T>) -> Result<Var> {
    let x = tape.constant(batch.x_t.clone());
    let target = tape.constant(batch.target.clone());
    let kept = tape.scale_leading(x, &batch.c_x)?;
    let pushed = tape.scale_leading(eps_hat, &batch.c_eps)?;
    let pred = tape.add(kept, pushed)?;
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// A prepared noise-prediction batch.
#[derive(Clone, Debug)]
pub struct StandardBatch<T: Scalar> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: Vec<usize>,
    pub cond: Conditioning<T>,
}

impl<T: Scalar> StandardBatch<T> {
    pub fn cast<U: Scalar>(&self) -> StandardBatch<U> {
        StandardBatch {
            x_t: self.x_t.cast(),
            eps: self.eps.cast(),
            t: self.t.clone(),
            cond: Conditioning {
                masks: self.cond.masks.clone(),
                masked_image: self.cond.masked_image.cast(),
            },
        }
    }
}

/// Where the conditioning masks of the standard objective come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Random,
    BackgroundOnly,
}

const MASK_DRAWS: usize = 8;

fn draw_mask(pair: &ScenePair, source: MaskSource, bounds: AreaBounds, retries: usize, rng: &mut EngineRng) -> Result<Mask> {
    let size = pair.mask.height();
    let mut last = None;
    for _ in 0..MASK_DRAWS {
        let kind = MaskKind::ALL[rng.random_range(0..MaskKind::ALL.len())];
        let seed: u64 = rng.random();
        let drawn = match source {
            MaskSource::Random => MaskSpec::random(kind, seed, size, bounds).and_then(|s| random_mask(&s, size, size)),
            MaskSource::BackgroundOnly => background_constrained_mask(pair, kind, seed, bounds, retries),
        };
        match drawn {
            Ok(m) => return Ok(m),
            Err(e @ Error::Placement(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

pub fn standard_batch(
    pairs: &[ScenePair],
    schedule: &NoiseSchedule,
    source: MaskSource,
    scene: &SceneConfig,
    rng: &mut EngineRng,
) -> Result<StandardBatch<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (mut xs, mut epss, mut ts, mut masks) = (vec![], vec![], vec![], vec![]);
    for p in pairs {
        let t = rng.random_range(1..=schedule.steps());
        let eps = normal_tensor::<f64>(rng, p.x0_ori.shape());
        xs.push(forward_noise(&p.x0_ori, t, &eps, schedule)?);
        masks.push(draw_mask(p, source, scene.area_bounds(), scene.placement_retries, rng)?);
        epss.push(eps);
        ts.push(t);
    }
    Ok(StandardBatch {
        x_t: Tensor::stack(&xs)?,
        eps: Tensor::stack(&epss)?,
        t: ts,
        cond: Conditioning {
            masked_image: background_condition(pairs, &masks)?,
            masks,
        },
    })
}

pub fn standard_loss<T: Scalar>(tape: &mut Tape<T>, eps_hat: Var, batch: &StandardBatch<T>) -> Result<Var> {
    let eps = tape.constant(batch.eps.clone());
    let diff = tape.sub(eps, eps_hat)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Result of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub t: Vec<usize>,
    pub gamma: Vec<usize>,
    /// Loss or gradient was non-finite; the update was skipped.
    pub nan: bool,
}

fn optimise<T: Scalar>(
    model: &mut DenoiserModel<T>,
    opt: &mut AdamState<T>,
    build: impl FnOnce(&mut Tape<T>, &[Var], &DenoiserModel<T>) -> Result<Var>,
) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let loss = build(&mut tape, &vars, model)?;
    let value = tape.value(loss).item()?.to_f64_lossy();
    if !value.is_finite() {
        return Ok((value, true));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor<T>> = vars.iter().map(|v| tape.grad(*v).expect("parameter gradient").clone()).collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok((value, true));
    }
    adam_step(model.params_mut(), &grads, opt)?;
    Ok((value, false))
}

fn cro_like_step<T: Scalar>(
    model: &mut DenoiserModel<T>,
    pairs: &[ScenePair],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    blend: BlendMode,
    opt: &mut AdamState<T>,
    rng: &mut EngineRng,
) -> Result<StepOutcome> {
    let batch = cro_batch(pairs, schedule, cfg.gamma_m, blend, rng)?.cast::<T>();
    let (loss, nan) = optimise(model, opt, |tape, vars, m| {
        let x = tape.constant(batch.x_t.clone());
        let eps_hat = m.forward(tape, vars, x, &batch.cond, &batch.t)?;
        cro_loss(tape, eps_hat, &batch)
    })?;
    Ok(StepOutcome {
        loss,
        t: batch.t,
        gamma: batch.gamma,
        nan,
    })
}

/// One chain-rectifying update.
pub fn cro_step<T: Scalar>(
    model: &mut DenoiserModel<T>,
    pairs: &[ScenePair],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    opt: &mut AdamState<T>,
    rng: &mut EngineRng,
) -> Result<StepOutcome> {
    cro_like_step(model, pairs, schedule, cfg, BlendMode::Schedule, opt, rng)
}

/// The chain-rectifying update with the blend weight frozen at
/// `cfg.lambda_const`.
pub fn no_mixup_step<T: Scalar>(
    model: &mut DenoiserModel<T>,
    pairs: &[ScenePair],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    opt: &mut AdamState<T>,
    rng: &mut EngineRng,
) -> Result<StepOutcome> {
    if cfg.mixup {
        return Err(Error::invalid("no_mixup_step needs mixup = false"));
    }
    cro_like_step(model, pairs, schedule, cfg, BlendMode::Frozen(cfg.lambda_const), opt, rng)
}

/// One noise-prediction update.
pub fn standard_step<T: Scalar>(
    model: &mut DenoiserModel<T>,
    pairs: &[ScenePair],
    schedule: &NoiseSchedule,
    source: MaskSource,
    scene: &SceneConfig,
    opt: &mut AdamState<T>,
    rng: &mut EngineRng,
) -> Result<StepOutcome> {
    let batch = standard_batch(pairs, schedule, source, scene, rng)?.cast::<T>();
    let (loss, nan) = optimise(model, opt, |tape, vars, m| {
        let x = tape.constant(batch.x_t.clone());
        let eps_hat = m.forward(tape, vars, x, &batch.cond, &batch.t)?;
        standard_loss(tape, eps_hat, &batch)
    })?;
    Ok(StepOutcome {
        loss,
        gamma: vec![0; batch.t.len()],
        t: batch.t,
        nan,
    })
}

/// Everything a training run needs.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub seed: u64,
    pub scene: SceneConfig,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    /// Stored in checkpoint headers for provenance.
    pub run_config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

impl TrainSummary {
    pub fn nan_count(&self) -> usize {
        self.records.iter().filter(|r| r.nan).count()
    }
}

/// Training scenes for one step, generated in parallel from per-sample seeds.
pub fn training_scenes(seed: u64, step: u64, batch: usize, scene: &SceneConfig) -> Result<Vec<ScenePair>> {
    let base = derive_seed(seed, &[stream::SCENE]);
    (0..batch as u64)
        .into_par_iter()
        .map(|i| scene_for_index(base, step * batch as u64 + i, scene))
        .collect()
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Runs the configured objective to `train.steps`, writing periodic and
/// final checkpoints plus a CSV log into `out_dir`. With `resume`, training
/// continues from the stored weights and optimiser moments and appends to
/// the log.
pub fn train_run(setup: &TrainSetup, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let schedule = setup.schedule.build()?;
    setup.scene.validate()?;
    setup.train.validate(schedule.steps())?;
    if setup.scene.image_size != setup.model.image_size || setup.scene.channels != setup.model.image_channels {
        return Err(Error::Config("scene and model image geometry disagree".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = &setup.train;

    let (mut model, mut opt) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&setup.model))?;
            if ck.header.config_hash != setup.config_hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was written by config {}, this run is {}",
                    ck.header.config_hash, setup.config_hash
                )));
            }
            let model = ck.model()?;
            let opt = ck
                .adam
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimiser state to resume from".into()))?;
            (model, opt)
        }
        None => {
            let model = build_denoiser::<f32>(&setup.model, setup.seed)?;
            let opt = AdamState::for_params(cfg.adam, model.params());
            (model, opt)
        }
    };

    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = if resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&log_path)
    } else {
        std::fs::File::create(&log_path).and_then(|mut f| writeln!(f, "{LOG_HEADER}").map(|_| f))
    }
    .map_err(|e| Error::io(&log_path, e))?;

    let source = match cfg.objective {
        Objective::StandardBg => MaskSource::BackgroundOnly,
        _ => MaskSource::Random,
    };
    let started = Instant::now();
    let mut records = Vec::new();
    let save = |model: &DenoiserModel<f32>, opt: &AdamState<f32>, path: &Path| {
        let ck = Checkpoint::new(model, setup.seed, setup.config_hash.clone(), setup.run_config.clone(), Some(opt.clone()));
        save_checkpoint(path, &ck)
    };

    // The optimiser step counter doubles as the data cursor, so a resumed
    // run sees exactly the batches an uninterrupted one would.
    let mut step = opt.step;
    while step < cfg.steps {
        let pairs = training_scenes(setup.seed, step, cfg.batch_size, &setup.scene)?;
        let mut rng = rng_from(derive_seed(setup.seed, &[stream::TRAIN, step]));
        let outcome = match (cfg.objective, cfg.mixup) {
            (Objective::Cro, true) => cro_step(&mut model, &pairs, &schedule, cfg, &mut opt, &mut rng)?,
            (Objective::Cro, false) => no_mixup_step(&mut model, &pairs, &schedule, cfg, &mut opt, &mut rng)?,
            _ => standard_step(&mut model, &pairs, &schedule, source, &setup.scene, &mut opt, &mut rng)?,
        };
        if outcome.nan {
            // Skipped updates still advance the data cursor.
            opt.step += 1;
        }
        step += 1;
        let rec = TrainLogRecord {
            step,
            loss: outcome.loss,
            t: outcome.t,
            gamma: outcome.gamma,
            seconds: started.elapsed().as_secs_f64(),
            nan: outcome.nan,
        };
        writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save(&model, &opt, &out_dir.join(checkpoint_name(step)))?;
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save(&model, &opt, &final_checkpoint)?;
    Ok(TrainSummary {
        final_checkpoint,
        log_path,
        records,
    })
}
