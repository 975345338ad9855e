//! Procedural object/background scene pairs and random mask families.
//!
//! A scene starts from a smooth procedural background with one source
//! object on it (`x0_ori`). The source object is cut out, scaled, rotated
//! and pasted onto a free background region, giving `x0_obj`. The erase mask
//! is exactly the pasted footprint, so outside it the two images agree
//! bit-for-bit.

mod masks;
mod shapes;

pub use masks::{random_mask, AreaBounds, Mask, MaskKind, MaskShape, MaskSpec};
pub use shapes::{transform_object, ObjectSprite, ShapeKind};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, rng_from, stream, EngineRng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub mask_area_min: f64,
    pub mask_area_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub object_diameter_min: usize,
    pub object_diameter_max: usize,
    pub placement_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            mask_area_min: 0.02,
            mask_area_max: 0.35,
            scale_min: 0.5,
            scale_max: 1.2,
            object_diameter_min: 11,
            object_diameter_max: 14,
            placement_retries: 20,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid(format!(
                "image size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("scene needs at least one channel"));
        }
        if !(0.0 <= self.mask_area_min && self.mask_area_min < self.mask_area_max && self.mask_area_max <= 1.0) {
            return Err(Error::invalid("mask area bounds must satisfy 0 <= min < max <= 1"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(Error::invalid("scale bounds must satisfy 0 < min <= max"));
        }
        if self.object_diameter_min < 3
            || self.object_diameter_min > self.object_diameter_max
            || self.object_diameter_max >= self.image_size
        {
            return Err(Error::invalid("object diameter bounds do not fit the image"));
        }
        Ok(())
    }

    pub fn area_bounds(&self) -> AreaBounds {
        AreaBounds {
            min: self.mask_area_min,
            max: self.mask_area_max,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Provenance of a generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    pub seed: u64,
    pub shape: ShapeKind,
    pub object_diameter: usize,
    pub scale: f64,
    pub rotation_deg: f64,
    /// Top-left corner `(y, x)` of the source object in `x0_ori`.
    pub source_offset: (usize, usize),
    /// Top-left corner `(y, x)` of the pasted copy in `x0_obj`.
    pub paste_offset: (usize, usize),
}

/// `x0_ori`, `x0_obj` (both `C×H×W` in `[0, 1]`) and the erase mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub x0_ori: Tensor<f64>,
    pub x0_obj: Tensor<f64>,
    /// Footprint of the pasted object (1 = hole).
    pub mask: Mask,
    /// Footprint of the source object, present in both images.
    pub source_mask: Mask,
    pub transform_log: TransformLog,
}

impl ScenePair {
    pub fn seed(&self) -> u64 {
        self.transform_log.seed
    }
}

/// Zeroes every channel inside the hole.
pub fn masked_image<T: crate::Scalar>(image: &Tensor<T>, mask: &Mask) -> Tensor<T> {
    let plane = mask.height() * mask.width();
    let mut out = image.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        for (v, &hole) in chunk.iter_mut().zip(mask.bits()) {
            if hole {
                *v = T::zero();
            }
        }
    }
    out
}

/// Everything needed to render a scene deterministically.
#[derive(Clone, Debug)]
pub struct SceneRecipe {
    pub background: Tensor<f64>,
    pub sprite: ObjectSprite,
    pub log: TransformLog,
}

fn smooth_background(rng: &mut EngineRng, cfg: &SceneConfig) -> Tensor<f64> {
    let n = cfg.image_size;
    let grid = 4;
    let c0: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(0.25..0.75)).collect();
    let c1: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(0.25..0.75)).collect();
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (sa, ca) = angle.sin_cos();
    let lattice: Vec<f64> = (0..cfg.channels * (grid + 1) * (grid + 1))
        .map(|_| rng.random_range(-0.08..0.08))
        .collect();
    let half = (n as f64 - 1.0) / 2.0;
    let mut data = vec![0.0; cfg.channels * n * n];
    for ch in 0..cfg.channels {
        let lat = &lattice[ch * (grid + 1) * (grid + 1)..];
        for y in 0..n {
            for x in 0..n {
                let proj = ((y as f64 - half) * sa + (x as f64 - half) * ca) / (2.0 * half) + 0.5;
                let t = proj.clamp(0.0, 1.0);
                let gy = y as f64 / (n - 1) as f64 * grid as f64;
                let gx = x as f64 / (n - 1) as f64 * grid as f64;
                let (iy, ix) = ((gy as usize).min(grid - 1), (gx as usize).min(grid - 1));
                let (fy, fx) = (gy - iy as f64, gx - ix as f64);
                let at = |a: usize, b: usize| lat[a * (grid + 1) + b];
                let noise = (1.0 - fy) * ((1.0 - fx) * at(iy, ix) + fx * at(iy, ix + 1))
                    + fy * ((1.0 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
                let v = (1.0 - t) * c0[ch] + t * c1[ch] + noise;
                data[(ch * n + y) * n + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![cfg.channels, n, n], data).expect("background shape")
}

fn footprint_at(sprite: &ObjectSprite, offset: (usize, usize), size: usize) -> Result<Mask> {
    if offset.0 + sprite.height > size || offset.1 + sprite.width > size {
        return Err(Error::Placement(format!(
            "{}×{} object at {offset:?} exceeds {size}×{size}",
            sprite.height, sprite.width
        )));
    }
    let mut m = Mask::empty(size, size);
    for y in 0..sprite.height {
        for x in 0..sprite.width {
            if sprite.covers(y, x) {
                m.set(offset.0 + y, offset.1 + x, true);
            }
        }
    }
    Ok(m)
}

fn paste(image: &mut Tensor<f64>, sprite: &ObjectSprite, offset: (usize, usize)) {
    let n = image.shape()[1];
    let w = image.shape()[2];
    let data = image.data_mut();
    for c in 0..sprite.channels {
        for y in 0..sprite.height {
            for x in 0..sprite.width {
                if sprite.covers(y, x) {
                    data[(c * n + offset.0 + y) * w + offset.1 + x] = sprite.texel(c, y, x);
                }
            }
        }
    }
}

/// Renders a pair from explicit transform parameters. No placement rules
/// are enforced here beyond staying in bounds.
pub fn render_scene(recipe: &SceneRecipe) -> Result<ScenePair> {
    let size = recipe.background.shape()[1];
    let log = &recipe.log;
    let source_mask = footprint_at(&recipe.sprite, log.source_offset, size)?;
    let mut x0_ori = recipe.background.clone();
    paste(&mut x0_ori, &recipe.sprite, log.source_offset);

    let moved = transform_object(&recipe.sprite, log.scale, log.rotation_deg)?;
    let mask = footprint_at(&moved, log.paste_offset, size)?;
    let mut x0_obj = x0_ori.clone();
    paste(&mut x0_obj, &moved, log.paste_offset);
    Ok(ScenePair {
        x0_ori,
        x0_obj,
        mask,
        source_mask,
        transform_log: log.clone(),
    })
}

/// Generates the scene pair for `seed`; a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, &[stream::SCENE]));
    let n = cfg.image_size;
    let background = smooth_background(&mut rng, cfg);

    let kind = [ShapeKind::Disc, ShapeKind::Polygon, ShapeKind::Blob][rng.random_range(0..3)];
    let diameter = rng.random_range(cfg.object_diameter_min..=cfg.object_diameter_max);
    let sprite = shapes::random_sprite(&mut rng, kind, diameter, cfg.channels);
    let source_offset = (rng.random_range(0..=n - diameter), rng.random_range(0..=n - diameter));
    let source_mask = footprint_at(&sprite, source_offset, n)?;

    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let rotation_deg = rng.random_range(0.0..360.0);
    let moved = transform_object(&sprite, scale, rotation_deg)?;
    let mut paste_offset = None;
    for _ in 0..cfg.placement_retries {
        if moved.height > n || moved.width > n {
            break;
        }
        let off = (rng.random_range(0..=n - moved.height), rng.random_range(0..=n - moved.width));
        if footprint_at(&moved, off, n)?.overlap(&source_mask)? == 0 {
            paste_offset = Some(off);
            break;
        }
    }
    let paste_offset = paste_offset.ok_or_else(|| {
        Error::Placement(format!(
            "seed {seed}: no free background spot for a {}×{} object after {} tries",
            moved.height, moved.width, cfg.placement_retries
        ))
    })?;

    let pair = render_scene(&SceneRecipe {
        background,
        sprite,
        log: TransformLog {
            seed,
            shape: kind,
            object_diameter: diameter,
            scale,
            rotation_deg,
            source_offset,
            paste_offset,
        },
    })?;
    let f = pair.mask.fraction();
    if f < cfg.mask_area_min || f > cfg.mask_area_max {
        return Err(Error::Placement(format!(
            "seed {seed}: mask area {f:.3} outside [{}, {}]",
            cfg.mask_area_min, cfg.mask_area_max
        )));
    }
    Ok(pair)
}

/// Maximum number of seed bumps [`scene_for_index`] tries.
const SCENE_ATTEMPTS: u64 = 64;

/// The first successfully generated scene among derived seeds of
/// `(base, index)`. Used wherever a stream of valid scenes is needed.
pub fn scene_for_index(base: u64, index: u64, cfg: &SceneConfig) -> Result<ScenePair> {
    let mut last = None;
    for attempt in 0..SCENE_ATTEMPTS {
        let seed = derive_seed(base, &[index, attempt]) >> 1;
        match generate_scene(seed, cfg) {
            Ok(pair) => return Ok(pair),
            Err(e @ Error::Placement(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Seeds with the top bit set are reserved for held-out evaluation scenes;
/// [`scene_for_index`] only produces seeds with it clear.
pub const HELD_OUT_SEED_BIT: u64 = 1 << 63;

pub fn held_out_scene(index: u64, cfg: &SceneConfig) -> Result<ScenePair> {
    let mut last = None;
    for attempt in 0..SCENE_ATTEMPTS {
        let seed = HELD_OUT_SEED_BIT | (index * SCENE_ATTEMPTS + attempt);
        match generate_scene(seed, cfg) {
            Ok(pair) => return Ok(pair),
            Err(e @ Error::Placement(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Draws a `kind` mask that avoids both object footprints of `pair`,
/// retrying with fresh geometry up to `retries` times. With an empty erase
/// mask the first draw is returned.
pub fn background_constrained_mask(
    pair: &ScenePair,
    kind: MaskKind,
    seed: u64,
    bounds: AreaBounds,
    retries: usize,
) -> Result<Mask> {
    let (h, w) = (pair.mask.height(), pair.mask.width());
    if pair.mask.is_full() {
        return Err(Error::invalid("scene mask covers the whole image"));
    }
    let occupied = pair.mask.union(&pair.source_mask)?;
    for attempt in 0..retries as u64 {
        let spec = MaskSpec::random(kind, derive_seed(seed, &[attempt]), h, bounds)?;
        let m = random_mask(&spec, h, w)?;
        if pair.mask.is_empty() || m.overlap(&occupied)? == 0 {
            return Ok(m);
        }
        if let Some(moved) = shift_clear_of(&m, &occupied, derive_seed(seed, &[attempt, 1])) {
            return Ok(moved);
        }
    }
    Err(Error::Placement(format!(
        "no background-only {kind} mask after {retries} tries"
    )))
}

/// Tries every in-bounds translation of `m` in a seeded order and returns
/// the first one that misses `occupied`.
fn shift_clear_of(m: &Mask, occupied: &Mask, seed: u64) -> Option<Mask> {
    let (h, w) = (m.height(), m.width());
    let cells: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| m.get(y, x))
        .collect();
    let (y0, y1) = cells.iter().fold((h, 0), |(lo, hi), &(y, _)| (lo.min(y), hi.max(y)));
    let (x0, x1) = cells.iter().fold((w, 0), |(lo, hi), &(_, x)| (lo.min(x), hi.max(x)));
    let mut origins: Vec<(usize, usize)> = (0..h - (y1 - y0))
        .flat_map(|y| (0..w - (x1 - x0)).map(move |x| (y, x)))
        .collect();
    origins.shuffle(&mut rng_from(seed));
    origins.into_iter().find_map(|(oy, ox)| {
        let mut out = Mask::empty(h, w);
        for &(y, x) in &cells {
            let (ty, tx) = (y - y0 + oy, x - x0 + ox);
            if occupied.get(ty, tx) {
                return None;
            }
            out.set(ty, tx, true);
        }
        Some(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn pairs_agree_outside_the_mask() {
        for i in 0..100 {
            let p = scene_for_index(5, i, &cfg()).unwrap();
            let a = masked_image(&p.x0_ori, &p.mask);
            let b = masked_image(&p.x0_obj, &p.mask);
            assert_eq!(a, b);
            assert!(p.x0_ori.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(p.x0_obj.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let f = p.mask.fraction();
            assert!((0.02..=0.35).contains(&f), "area {f}");
            assert_eq!(p.mask.overlap(&p.source_mask).unwrap(), 0);
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_scene(1234, &cfg());
        let b = generate_scene(1234, &cfg());
        match (a, b) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
            _ => panic!("outcomes differ"),
        }
    }

    #[test]
    fn identity_paste_on_source_reproduces_the_original() {
        let p = scene_for_index(1, 0, &cfg()).unwrap();
        let mut rng = rng_from(derive_seed(p.seed(), &[stream::SCENE]));
        let background = smooth_background(&mut rng, &cfg());
        let mut log = p.transform_log.clone();
        log.scale = 1.0;
        log.rotation_deg = 0.0;
        log.paste_offset = log.source_offset;
        let sprite = shapes::random_sprite(
            &mut rng_from(7),
            ShapeKind::Blob,
            log.object_diameter,
            3,
        );
        let same = render_scene(&SceneRecipe {
            background,
            sprite,
            log,
        })
        .unwrap();
        assert_eq!(same.x0_obj, same.x0_ori);
        assert_eq!(same.mask, same.source_mask);
    }

    #[test]
    fn scale_factors_cover_the_range_uniformly() {
        let mut scales: Vec<f64> = (0..1000)
            .map(|i| scene_for_index(99, i, &cfg()).unwrap().transform_log.scale)
            .collect();
        scales.sort_by(f64::total_cmp);
        let n = scales.len() as f64;
        let d = scales
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let cdf = (s - 0.5) / 0.7;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov critical value at alpha = 0.01.
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
        let rot_ok = (0..200).all(|i| {
            let r = scene_for_index(99, i, &cfg()).unwrap().transform_log.rotation_deg;
            (0.0..360.0).contains(&r)
        });
        assert!(rot_ok);
    }

    #[test]
    fn background_masks_avoid_objects() {
        let bounds = AreaBounds::default();
        let mut total = 0.0;
        for i in 0..100 {
            let p = scene_for_index(3, i, &cfg()).unwrap();
            let kind = MaskKind::ALL[i as usize % 4];
            let m = background_constrained_mask(&p, kind, i, bounds, 20).unwrap();
            assert_eq!(m.overlap(&p.mask).unwrap(), 0);
            assert_eq!(m.overlap(&p.source_mask).unwrap(), 0);
            total += m.fraction();
        }
        let mean = total / 100.0;
        assert!(mean >= bounds.min && mean <= bounds.max, "mean area {mean}");
    }

    #[test]
    fn empty_object_mask_is_unconstrained() {
        let mut p = scene_for_index(3, 0, &cfg()).unwrap();
        p.mask = Mask::empty(32, 32);
        let m = background_constrained_mask(&p, MaskKind::Rectangle, 5, AreaBounds::default(), 20).unwrap();
        let spec = MaskSpec::random(MaskKind::Rectangle, derive_seed(5, &[0]), 32, AreaBounds::default()).unwrap();
        assert_eq!(m, random_mask(&spec, 32, 32).unwrap());
    }

    #[test]
    fn held_out_seeds_are_disjoint_from_training_seeds() {
        for i in 0..50 {
            assert_eq!(scene_for_index(11, i, &cfg()).unwrap().seed() & HELD_OUT_SEED_BIT, 0);
            assert_ne!(held_out_scene(i, &cfg()).unwrap().seed() & HELD_OUT_SEED_BIT, 0);
        }
    }

    #[test]
    fn tiny_images_rejected() {
        let bad = SceneConfig {
            image_size: 8,
            ..cfg()
        };
        assert!(generate_scene(0, &bad).is_err());
    }
}
