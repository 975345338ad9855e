//! `eradiff`: scene synthesis, training, erase sampling, evaluation,
//! ablation and the oracle self-check.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
//! configuration error.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eradiff_core::check::{oracle_check, OracleCheckConfig};
use eradiff_core::config::RunConfig;
use eradiff_core::eval::{
    ablation_csv, ablation_run, evaluate_model, file_digest, held_out_scenes, AblationMode, EvalReport, Variant,
};
use eradiff_core::imageio::{image_grid, mask_image, read_png, write_png};
use eradiff_core::model::{load_checkpoint, DenoiserModel};
use eradiff_core::rng::{derive_seed, stream};
use eradiff_core::sampler::{erase_sample, Denoiser, ModelDenoiser, OracleDenoiser, SampleConfig};
use eradiff_core::scenegen::{held_out_scene, masked_image, scene_for_index, Mask};
use eradiff_core::train::{train_run, Objective};
use eradiff_core::{Error, Tensor};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "eradiff", version, about = "Desk-scale erase diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write scene pairs as PNG triplets with JSON sidecars.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of scenes.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Train a denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        /// Training steps.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        sra: Option<Switch>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Erase the object from one scene.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Trained weights. Required unless --oracle is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out scene index used when no --input is given.
        #[arg(long, default_value_t = 0)]
        scene: u64,
        /// Input image (PNG); needs --mask.
        #[arg(long, requires = "mask")]
        input: Option<PathBuf>,
        /// Erase mask (PNG, white = erase).
        #[arg(long, requires = "input")]
        mask: Option<PathBuf>,
        /// Use the closed-form oracle instead of a network.
        #[arg(long, conflicts_with_all = ["checkpoint", "input"])]
        oracle: bool,
    },
    /// Score a checkpoint on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out scenes (default from config).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train and score every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reuse checkpoints already in the output directory.
        #[arg(long)]
        load: bool,
    },
    /// Verify the closed-form oracle.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_b: f64,
    },
}

#[derive(Args, Clone)]
struct Sampling {
    #[arg(long)]
    strength: Option<f64>,
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sra: Option<Switch>,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Exit 1 after a check reported failure.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn validated(cfg: RunConfig) -> anyhow::Result<RunConfig> {
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn apply_sampling(cfg: &mut RunConfig, s: &Sampling) {
    if let Some(v) = s.strength {
        cfg.sample.strength = v;
    }
    if let Some(v) = s.steps {
        cfg.sample.steps = v;
    }
    if let Some(v) = s.sra {
        cfg.sample.sra = v == Switch::On;
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_model(path: &Path, cfg: &RunConfig) -> anyhow::Result<(DenoiserModel<f32>, String)> {
    let ck = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
    if ck.header.model.image_size != cfg.scene.image_size {
        bail!(Usage(format!(
            "checkpoint expects {}px images, config has {}px",
            ck.header.model.image_size, cfg.scene.image_size
        )));
    }
    Ok((ck.model()?, file_digest(path)?))
}

fn cmd_synth(common: &Common, n: usize) -> anyhow::Result<()> {
    let cfg = validated(load_config(common)?)?;
    let hash = cfg.hash();
    create_dir(&cfg.out)?;
    let base = derive_seed(cfg.seed, &[stream::SCENE]);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let pair = scene_for_index(base, i, &cfg.scene)?;
        let stem = format!("scene_{i:05}");
        let files = [
            (format!("{stem}_ori.png"), pair.x0_ori.clone()),
            (format!("{stem}_obj.png"), pair.x0_obj.clone()),
            (format!("{stem}_mask.png"), mask_image(&pair.mask, 1)),
        ];
        for (name, img) in &files {
            write_png(&cfg.out.join(name), img)?;
        }
        let sidecar = format!("{stem}.json");
        write_json(
            &cfg.out.join(&sidecar),
            &json!({
                "index": i,
                "seed": pair.seed(),
                "config_hash": hash,
                "mask_area": pair.mask.area(),
                "transform": pair.transform_log,
            }),
        )?;
        entries.push(json!({
            "index": i,
            "seed": pair.seed(),
            "ori": files[0].0,
            "obj": files[1].0,
            "mask": files[2].0,
            "meta": sidecar,
        }));
    }
    write_json(
        &cfg.out.join("manifest.json"),
        &json!({ "config_hash": hash, "seed": cfg.seed, "count": n, "scenes": entries }),
    )?;
    println!("wrote {n} scenes to {}", cfg.out.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    objective: Option<Objective>,
    steps: Option<u64>,
    sra: Option<Switch>,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(o) = objective {
        cfg.train.objective = o;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(s) = sra {
        cfg.model.sra = s == Switch::On;
        cfg.sample.sra = cfg.model.sra;
    }
    let cfg = validated(cfg)?;
    create_dir(&cfg.out)?;
    std::fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    let summary = train_run(&cfg.train_setup(), &cfg.out, resume)?;
    let last = summary.records.last();
    println!(
        "objective {} steps {} final loss {} nan steps {} config {}",
        cfg.train.objective,
        cfg.train.steps,
        last.map_or("n/a".into(), |r| format!("{:.4e}", r.loss)),
        summary.nan_count(),
        cfg.hash()
    );
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    common: &Common,
    sampling: &Sampling,
    checkpoint: Option<&Path>,
    scene: u64,
    input: Option<&Path>,
    mask: Option<&Path>,
    oracle: bool,
) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    apply_sampling(&mut cfg, sampling);
    let cfg = validated(cfg)?;
    let schedule = cfg.schedule.build()?;
    let sample = SampleConfig { seed: derive_seed(cfg.seed, &[stream::SAMPLE]), ..cfg.sample };

    let (image, erase, pair) = match (input, mask) {
        (Some(i), Some(m)) => {
            let img = read_png(i)?;
            let plane = read_png(m)?;
            let (h, w) = (plane.shape()[1], plane.shape()[2]);
            let bits = plane.data()[..h * w].iter().map(|v| *v > 0.5).collect();
            (img, Mask::from_bits(h, w, bits)?, None)
        }
        _ => {
            let p = held_out_scene(scene, &cfg.scene)?;
            (p.x0_obj.clone(), p.mask.clone(), Some(p))
        }
    };
    let (output, checkpoint_id) = if oracle {
        let pair = pair.as_ref().ok_or_else(|| Usage("--oracle needs a generated scene".into()))?;
        let den = OracleDenoiser { pair, schedule: &schedule };
        (erase_sample(&den, &image, &erase, &sample, &schedule)?, "oracle".to_string())
    } else {
        let path = checkpoint.ok_or_else(|| Usage("sample needs --checkpoint or --oracle".into()))?;
        let (mut model, id) = load_model(path, &cfg)?;
        model.set_sra(sample.sra);
        let den: &dyn Denoiser = &ModelDenoiser(&model);
        (erase_sample(den, &image, &erase, &sample, &schedule)?, id)
    };

    create_dir(&cfg.out)?;
    write_png(&cfg.out.join("output.png"), &output.image)?;
    write_png(&cfg.out.join("input.png"), &image)?;
    write_png(&cfg.out.join("mask.png"), &mask_image(&erase, 1))?;
    let traj_dir = cfg.out.join("trajectory");
    create_dir(&traj_dir)?;
    let mut frames = Vec::new();
    for (k, (state, t)) in output.trajectory.iter().zip(&output.timesteps).enumerate() {
        let name = format!("trajectory/{k:03}_t{t:03}.png");
        // States are noisy; show them mapped from [-1, 2] to [0, 1].
        write_png(&cfg.out.join(&name), &state.map(|v| (v + 1.0) / 3.0))?;
        frames.push(json!({ "index": k, "t": t, "file": name }));
    }
    let mut manifest = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "checkpoint": checkpoint_id,
        "strength": sample.strength,
        "steps": sample.steps,
        "sra": sample.sra,
        "output": "output.png",
        "trajectory": frames,
    });
    if let Some(p) = &pair {
        let (bg, obj) = eradiff_core::eval::hole_errors(&output.image, p)?;
        manifest["scene"] = json!({ "index": scene, "seed": p.seed(), "mse_background": bg, "mse_object": obj });
    }
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    println!("wrote {}", cfg.out.join("output.png").display());
    Ok(())
}

fn cmd_eval(common: &Common, sampling: &Sampling, checkpoint: &Path, scenes: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    apply_sampling(&mut cfg, sampling);
    if let Some(n) = scenes {
        cfg.eval.scenes = n;
    }
    let cfg = validated(cfg)?;
    let schedule = cfg.schedule.build()?;
    let (model, id) = load_model(checkpoint, &cfg)?;
    let pairs = held_out_scenes(cfg.eval.scenes, &cfg.scene)?;
    let (records, outputs) = evaluate_model(&model, &pairs, &cfg.sample, &schedule)?;
    let report = EvalReport::from_records(id, cfg.hash(), &cfg.sample, records);
    create_dir(&cfg.out)?;
    std::fs::write(cfg.out.join("eval.csv"), report.to_csv())?;
    let rows: Vec<Vec<Tensor<f64>>> = pairs
        .iter()
        .zip(&outputs)
        .take(8)
        .map(|(p, o)| vec![p.x0_obj.clone(), mask_image(&p.mask, 3), masked_image(&p.x0_obj, &p.mask), o.clone(), p.x0_ori.clone()])
        .collect();
    write_png(&cfg.out.join("grid.png"), &image_grid(&rows)?)?;
    println!(
        "scenes {} elimination_rate {:.4} mean_psnr {:.3} strength {} steps {} sra {}",
        report.n_scenes, report.elimination_rate, report.mean_psnr, cfg.sample.strength, cfg.sample.steps, cfg.sample.sra
    );
    Ok(())
}

fn cmd_ablate(common: &Common, load: bool) -> anyhow::Result<()> {
    let cfg = validated(load_config(common)?)?;
    let mode = if load { AblationMode::Load } else { AblationMode::Train };
    let rows = ablation_run(&cfg, &cfg.out, &Variant::ALL, mode)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

fn cmd_oracle_check(common: &Common, draws: usize, corrupt_b: f64) -> anyhow::Result<()> {
    let cfg = validated(load_config(common)?)?;
    let schedule = cfg.schedule.build()?;
    let check = OracleCheckConfig { identity_draws: draws, corrupt_b, ..OracleCheckConfig::default() };
    let report = oracle_check(cfg.seed, &cfg.scene, &schedule, &check)?;
    println!("schedule {:?} T {}", report.schedule, report.horizon);
    for s in &report.suites {
        println!(
            "{:<22} max error {:.3e} (tolerance {:.0e}) {}",
            s.name,
            s.max_error,
            s.tolerance,
            if s.passed() { "ok" } else { "FAIL" }
        );
        if !s.passed() {
            println!("  worst draw: t = {} seed = {}", s.worst.0, s.worst.1);
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(anyhow!(CheckFailed))
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ERADIFF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Usage(format!("ERADIFF_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth { common, n } => cmd_synth(common, *n),
        Command::Train { common, objective, steps, sra, checkpoint } => {
            cmd_train(common, *objective, *steps, *sra, checkpoint.as_deref())
        }
        Command::Sample { common, sampling, checkpoint, scene, input, mask, oracle } => cmd_sample(
            common,
            sampling,
            checkpoint.as_deref(),
            *scene,
            input.as_deref(),
            mask.as_deref(),
            *oracle,
        ),
        Command::Eval { common, sampling, checkpoint, scenes } => cmd_eval(common, sampling, checkpoint, *scenes),
        Command::Ablate { common, load } => cmd_ablate(common, *load),
        Command::OracleCheck { common, draws, corrupt_b } => cmd_oracle_check(common, *draws, *corrupt_b),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<CheckFailed>() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.is::<Usage>()
                || matches!(
                    e.downcast_ref::<Error>(),
                    Some(Error::Config(_)) | Some(Error::InvalidArgument(_))
                );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
