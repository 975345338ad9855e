//! The conditioned noise predictor: a small conv encoder–decoder with one
//! attention block at the bottleneck, optionally self-rectifying.

mod attention;
mod checkpoint;

pub use attention::{attention_on_tape, extended_mask, sra_attention, AttentionResult, ExtendedMask, SRA_FILL};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::rng::{derive_seed, rng_from, standard_normal, stream};
use crate::scenegen::Mask;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Channels at full resolution; doubled at each downsampling.
    pub base_channels: usize,
    /// Number of stride-2 downsamplings.
    pub depth: usize,
    /// Side of the token grid seen by the attention block.
    pub attention_resolution: usize,
    pub time_embed_dim: usize,
    pub sra: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            base_channels: 16,
            depth: 2,
            attention_resolution: 8,
            time_embed_dim: 32,
            sra: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("denoiser depth must be at least 1".into()));
        }
        if self.image_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time embedding size must be even and >= 2".into()));
        }
        let factor = 1usize
            .checked_shl(self.depth as u32)
            .filter(|f| *f <= self.image_size)
            .ok_or_else(|| Error::Config(format!("depth {} is too deep for {}px images", self.depth, self.image_size)))?;
        if self.image_size % factor != 0 || self.image_size / factor != self.attention_resolution {
            return Err(Error::Config(format!(
                "attention resolution {} is not reachable: {}px halved {} times",
                self.attention_resolution, self.image_size, self.depth
            )));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.image_channels + 1
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Conv { cin: usize, cout: usize, out_scale: bool },
    Norm { c: usize },
    Linear { cin: usize, cout: usize },
}

/// Layer order shared by initialisation, forward pass and checkpoints.
fn plan(cfg: &DenoiserConfig) -> Vec<(String, Layer)> {
    let mut p = Vec::new();
    let c0 = cfg.channels_at(0);
    p.push((
        "in".to_string(),
        Layer::Conv {
            cin: cfg.input_channels(),
            cout: c0,
            out_scale: false,
        },
    ));
    for l in 0..cfg.depth {
        let (c, cn) = (cfg.channels_at(l), cfg.channels_at(l + 1));
        p.push((format!("enc{l}.conv"), Layer::Conv { cin: c, cout: c, out_scale: false }));
        p.push((format!("enc{l}.norm"), Layer::Norm { c }));
        p.push((format!("enc{l}.down"), Layer::Conv { cin: c, cout: cn, out_scale: false }));
    }
    let cb = cfg.channels_at(cfg.depth);
    p.push(("mid.conv".into(), Layer::Conv { cin: cb, cout: cb, out_scale: false }));
    p.push(("mid.norm".into(), Layer::Norm { c: cb }));
    p.push(("time.0".into(), Layer::Linear { cin: cfg.time_embed_dim, cout: cb }));
    p.push(("time.1".into(), Layer::Linear { cin: cb, cout: cb }));
    for name in ["attn.q", "attn.k", "attn.v", "attn.out"] {
        p.push((name.into(), Layer::Linear { cin: cb, cout: cb }));
    }
    for l in (0..cfg.depth).rev() {
        let (c, cn) = (cfg.channels_at(l), cfg.channels_at(l + 1));
        p.push((format!("dec{l}.conv"), Layer::Conv { cin: c + cn, cout: c, out_scale: false }));
        p.push((format!("dec{l}.norm"), Layer::Norm { c }));
    }
    p.push((
        "out".into(),
        Layer::Conv {
            cin: c0,
            cout: cfg.image_channels,
            out_scale: true,
        },
    ));
    p
}

/// Name and shape of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

fn param_infos(cfg: &DenoiserConfig) -> Vec<ParamInfo> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| out.push(ParamInfo { name, shape });
    for (name, layer) in plan(cfg) {
        match layer {
            Layer::Conv { cin, cout, .. } => {
                add(format!("{name}.weight"), vec![cout, cin, 3, 3]);
                add(format!("{name}.bias"), vec![cout]);
            }
            Layer::Norm { c } => {
                add(format!("{name}.gamma"), vec![c]);
                add(format!("{name}.beta"), vec![c]);
            }
            Layer::Linear { cin, cout } => {
                add(format!("{name}.weight"), vec![cin, cout]);
                add(format!("{name}.bias"), vec![cout]);
            }
        }
    }
    out
}

/// Output-layer weights start this much smaller than the fan-in rule so the
/// initial prediction is close to zero.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T: Scalar = f32> {
    config: DenoiserConfig,
    infos: Vec<ParamInfo>,
    params: Vec<Tensor<T>>,
}

/// Seeded initialisation. Weights are drawn in `f64` and rounded, so `f32`
/// and `f64` models built from the same seed agree to `f32` precision.
pub fn build_denoiser<T: Scalar>(config: &DenoiserConfig, seed: u64) -> Result<DenoiserModel<T>> {
    config.validate()?;
    let mut rng = rng_from(derive_seed(seed, &[stream::INIT]));
    let infos = param_infos(config);
    let mut params = Vec::with_capacity(infos.len());
    let mut it = infos.iter();
    for (_, layer) in plan(config) {
        let (w_info, b_info) = (it.next().unwrap(), it.next().unwrap());
        let (w, b) = match layer {
            Layer::Conv { cin, out_scale, .. } => {
                let fan_in = (cin * 9) as f64;
                let std = if out_scale {
                    OUTPUT_INIT_SCALE / fan_in.sqrt()
                } else {
                    (2.0 / fan_in).sqrt()
                };
                (
                    Tensor::from_fn(&w_info.shape, |_| T::from_f64_lossy(std * standard_normal(&mut rng))),
                    Tensor::zeros(&b_info.shape),
                )
            }
            Layer::Norm { .. } => (Tensor::ones(&w_info.shape), Tensor::zeros(&b_info.shape)),
            Layer::Linear { cin, .. } => {
                let std = 1.0 / (cin as f64).sqrt();
                (
                    Tensor::from_fn(&w_info.shape, |_| T::from_f64_lossy(std * standard_normal(&mut rng))),
                    Tensor::zeros(&b_info.shape),
                )
            }
        };
        params.push(w);
        params.push(b);
    }
    Ok(DenoiserModel {
        config: *config,
        infos,
        params,
    })
}

/// `[x_t | mask | masked_image]` along channels for an `N×C×H×W` batch.
pub fn condition_input<T: Scalar>(x_t: &Tensor<T>, masks: &[Mask], masked_image: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x_t.shape()[..] else {
        return Err(Error::shape("condition_input", format!("x_t {:?} is not N×C×H×W", x_t.shape())));
    };
    x_t.expect_same_shape(masked_image, "condition_input")?;
    if masks.len() != n || masks.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::shape(
            "condition_input",
            format!("{} masks for a batch of {n} at {h}×{w}", masks.len()),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (2 * c + 1) * plane);
    for (i, m) in masks.iter().enumerate() {
        data.extend_from_slice(&x_t.data()[i * c * plane..(i + 1) * c * plane]);
        data.extend(m.bits().iter().map(|&b| if b { T::one() } else { T::zero() }));
        data.extend_from_slice(&masked_image.data()[i * c * plane..(i + 1) * c * plane]);
    }
    Tensor::new(vec![n, 2 * c + 1, h, w], data)
}

/// Sinusoidal features of the timestep, `N×dim`.
pub fn timestep_embedding<T: Scalar>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t as f64 * f).sin(), (t as f64 * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::from_f64_lossy));
    }
    Tensor::new(vec![steps.len(), dim], data).expect("embedding shape")
}

/// Conditioning shared by every noise prediction on a batch.
#[derive(Clone, Debug)]
pub struct Conditioning<T: Scalar> {
    pub masks: Vec<Mask>,
    /// `N×C×H×W`, zero inside each hole.
    pub masked_image: Tensor<T>,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn sra_enabled(&self) -> bool {
        self.config.sra
    }

    pub fn set_sra(&mut self, on: bool) {
        self.config.sra = on;
    }

    /// Replaces every parameter, checking shapes.
    pub fn load_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("load_params", format!("{} tensors for {}", params.len(), self.params.len())));
        }
        for (p, info) in params.iter().zip(&self.infos) {
            if p.shape() != info.shape.as_slice() {
                return Err(Error::shape("load_params", format!("{} is {:?}, expected {:?}", info.name, p.shape(), info.shape)));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Puts every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    fn token_masks(&self, masks: &[Mask]) -> Result<Vec<bool>> {
        let r = self.config.attention_resolution;
        let mut blocked = Vec::with_capacity(masks.len() * r.pow(4));
        for m in masks {
            blocked.extend(extended_mask(m, r, r)?.blocked());
        }
        Ok(blocked)
    }

    /// Noise prediction on the tape for an `N×C×H×W` batch at per-sample
    /// timesteps.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x_t: Var,
        cond: &Conditioning<T>,
        steps: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(x_t).to_vec();
        let want = [cfg.image_channels, cfg.image_size, cfg.image_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape("predict_eps", format!("x_t {shape:?} for images {want:?}")));
        }
        let n = shape[0];
        if steps.len() != n || steps.contains(&0) {
            return Err(Error::invalid(format!("{} timesteps (all >= 1) needed for a batch of {n}", steps.len())));
        }
        if cond.masks.iter().any(|m| m.is_full()) {
            return Err(Error::Degenerate("mask covers the whole image".into()));
        }
        // Validated even without attention masking: the contract is the same.
        let blocked = self.token_masks(&cond.masks)?;
        if params.len() != self.params.len() {
            return Err(Error::shape("predict_eps", "parameter list does not match the model"));
        }

        let mask_plane: Vec<Tensor<T>> = cond.masks.iter().map(|m| m.to_tensor()).collect();
        let mask_t = Tensor::stack(&mask_plane)?;
        let mask_v = tape.constant(mask_t);
        let masked_v = tape.constant(cond.masked_image.clone());
        let input = tape.concat_channels(&[x_t, mask_v, masked_v])?;

        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter plan is consistent");
        let conv = |tape: &mut Tape<T>, x: Var, w: Var, b: Var, stride: usize| tape.conv2d(x, w, Some(b), stride, 1);

        let (w, b) = (next(), next());
        let mut h = conv(tape, input, w, b, 1)?;
        h = tape.silu(h);
        let mut skips = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let (w, b) = (next(), next());
            h = conv(tape, h, w, b, 1)?;
            let (g, be) = (next(), next());
            h = tape.group_norm_lite(h, g, be)?;
            h = tape.silu(h);
            skips.push(h);
            let (w, b) = (next(), next());
            h = conv(tape, h, w, b, 2)?;
            h = tape.silu(h);
        }

        let (w, b) = (next(), next());
        h = conv(tape, h, w, b, 1)?;
        let (g, be) = (next(), next());
        h = tape.group_norm_lite(h, g, be)?;
        let temb = tape.constant(timestep_embedding(steps, cfg.time_embed_dim));
        let (w, b) = (next(), next());
        let e = tape.linear(temb, w, Some(b))?;
        let e = tape.silu(e);
        let (w, b) = (next(), next());
        let e = tape.linear(e, w, Some(b))?;
        h = tape.add_channel_bias(h, e)?;
        h = tape.silu(h);

        let cb = cfg.channels_at(cfg.depth);
        let r = cfg.attention_resolution;
        let flat = tape.reshape(h, &[n, cb, r * r])?;
        let tokens = tape.transpose(flat)?;
        let (wq, bq) = (next(), next());
        let q = tape.linear(tokens, wq, Some(bq))?;
        let (wk, bk) = (next(), next());
        let k = tape.linear(tokens, wk, Some(bk))?;
        let (wv, bv) = (next(), next());
        let v = tape.linear(tokens, wv, Some(bv))?;
        let attn = attention_on_tape(tape, q, k, v, cfg.sra.then_some(blocked.as_slice()))?;
        let (wo, bo) = (next(), next());
        let o = tape.linear(attn, wo, Some(bo))?;
        let o = tape.transpose(o)?;
        let o = tape.reshape(o, &[n, cb, r, r])?;
        h = tape.add(h, o)?;

        for skip in skips.into_iter().rev() {
            h = tape.upsample2x(h)?;
            h = tape.concat_channels(&[h, skip])?;
            let (w, b) = (next(), next());
            h = conv(tape, h, w, b, 1)?;
            let (g, be) = (next(), next());
            h = tape.group_norm_lite(h, g, be)?;
            h = tape.silu(h);
        }
        let (w, b) = (next(), next());
        conv(tape, h, w, b, 1)
    }

    /// Inference-only prediction for a batch.
    pub fn predict_eps(&self, x_t: &Tensor<T>, cond: &Conditioning<T>, steps: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, &params, x, cond, steps)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config,
            infos: self.infos.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }
}

/// Single-image convenience wrapper: `x_t` and `masked_image` are `C×H×W`.
pub fn predict_eps<T: Scalar>(
    model: &DenoiserModel<T>,
    x_t: &Tensor<T>,
    mask: &Mask,
    masked_image: &Tensor<T>,
    t: usize,
) -> Result<Tensor<T>> {
    let x = Tensor::stack(std::slice::from_ref(x_t))?;
    let cond = Conditioning {
        masks: vec![mask.clone()],
        masked_image: Tensor::stack(std::slice::from_ref(masked_image))?,
    };
    let out = model.predict_eps(&x, &cond, &[t])?;
    out.reshape(x_t.shape())
}

#[cfg(test)]
mod tests;
