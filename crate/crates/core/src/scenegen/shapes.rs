use crate::error::{Error, Result};
use crate::rng::EngineRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Polygon,
    Blob,
}

/// A cut-out object: a binary footprint plus per-channel texture on a local
/// `height×width` canvas. Texture outside the footprint is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSprite {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub footprint: Vec<bool>,
    /// `channels×height×width`.
    pub texture: Vec<f64>,
}

impl ObjectSprite {
    pub fn area(&self) -> usize {
        self.footprint.iter().filter(|b| **b).count()
    }

    pub fn covers(&self, y: usize, x: usize) -> bool {
        self.footprint[y * self.width + x]
    }

    pub fn texel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.texture[(c * self.height + y) * self.width + x]
    }

    /// Binary disc of the given diameter with a flat texture.
    pub fn disc(diameter: usize, channels: usize, value: f64) -> Self {
        let r = diameter as f64 / 2.0;
        let c = (diameter as f64 - 1.0) / 2.0;
        let footprint = (0..diameter * diameter)
            .map(|i| {
                let (y, x) = ((i / diameter) as f64, (i % diameter) as f64);
                (y - c).powi(2) + (x - c).powi(2) <= r * r
            })
            .collect();
        Self {
            height: diameter,
            width: diameter,
            channels,
            footprint,
            texture: vec![value; channels * diameter * diameter],
        }
    }
}

/// Object colours are saturated and striped so they read as foreground
/// against the muted procedural backgrounds.
pub(crate) fn random_sprite(rng: &mut EngineRng, kind: ShapeKind, diameter: usize, channels: usize) -> ObjectSprite {
    let d = diameter;
    let c = (d as f64 - 1.0) / 2.0;
    let r = d as f64 / 2.0;
    let footprint: Vec<bool> = match kind {
        ShapeKind::Disc => ObjectSprite::disc(d, 1, 0.0).footprint,
        ShapeKind::Polygon => {
            let n = rng.random_range(3..=6);
            let phase: f64 = rng.random_range(0.0..TAU);
            let verts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let a = phase + TAU * i as f64 / n as f64 + rng.random_range(-0.25..0.25);
                    let rad = r * rng.random_range(0.8..1.0);
                    (c + rad * a.sin(), c + rad * a.cos())
                })
                .collect();
            (0..d * d)
                .map(|i| point_in_polygon(((i / d) as f64, (i % d) as f64), &verts))
                .collect()
        }
        ShapeKind::Blob => {
            let k1 = rng.random_range(2..=4) as f64;
            let k2 = rng.random_range(3..=5) as f64;
            let (a1, a2): (f64, f64) = (rng.random_range(0.05..0.2), rng.random_range(0.0..0.1));
            let (p1, p2): (f64, f64) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            (0..d * d)
                .map(|i| {
                    let (dy, dx) = ((i / d) as f64 - c, (i % d) as f64 - c);
                    let theta = dy.atan2(dx);
                    let limit = r * (1.0 - a1 - a2) * (1.0 + a1 * (k1 * theta + p1).sin() + a2 * (k2 * theta + p2).sin());
                    (dy * dy + dx * dx).sqrt() <= limit.max(1.0) + 0.5
                })
                .collect()
        }
    };

    let hue: f64 = rng.random_range(0.0..1.0);
    let base = saturated_color(hue, channels);
    let stripe_angle: f64 = rng.random_range(0.0..PI);
    let period: f64 = rng.random_range(3.0..5.0);
    let shade: f64 = rng.random_range(0.45..0.7);
    let (sa, ca) = stripe_angle.sin_cos();
    let mut texture = vec![0.0; channels * d * d];
    for y in 0..d {
        for x in 0..d {
            let u = (y as f64 * sa + x as f64 * ca) / period;
            let dark = u.rem_euclid(1.0) < 0.5;
            if !footprint[y * d + x] {
                continue;
            }
            for ch in 0..channels {
                let v = if dark { base[ch] * shade } else { base[ch] };
                texture[(ch * d + y) * d + x] = v;
            }
        }
    }
    ObjectSprite {
        height: d,
        width: d,
        channels,
        footprint,
        texture,
    }
}

fn saturated_color(hue: f64, channels: usize) -> Vec<f64> {
    if channels != 3 {
        return (0..channels)
            .map(|c| if (hue * channels as f64) as usize == c { 0.95 } else { 0.05 })
            .collect();
    }
    // HSV with S = 0.9, V = 0.95.
    let h6 = hue * 6.0;
    let f = h6 - h6.floor();
    let (v, s) = (0.95, 0.9);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize % 6 {
        0 => vec![v, t, p],
        1 => vec![q, v, p],
        2 => vec![p, v, t],
        3 => vec![p, q, v],
        4 => vec![t, p, v],
        _ => vec![v, p, q],
    }
}

fn point_in_polygon((py, px): (f64, f64), verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (yi, xi) = verts[i];
        let (yj, xj) = verts[(i + n - 1) % n];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

/// Trig values within this distance of 0 or ±1 are snapped so quarter-turn
/// rotations resample exactly.
const TRIG_SNAP: f64 = 1e-12;

fn snap(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < TRIG_SNAP {
            return target;
        }
    }
    v
}

/// Scales then rotates (clockwise in image coordinates for positive
/// degrees) about the canvas centre with nearest-neighbour sampling. The
/// output canvas is the bounding box of the transformed input canvas.
pub fn transform_object(sprite: &ObjectSprite, scale: f64, rotation_deg: f64) -> Result<ObjectSprite> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    let theta = rotation_deg.to_radians();
    let (sin, cos) = (snap(theta.sin()), snap(theta.cos()));
    let (h, w) = (sprite.height as f64, sprite.width as f64);
    let extent = |a: f64| ((a - 1e-9).ceil().max(1.0)) as usize;
    let out_h = extent(scale * (h * cos.abs() + w * sin.abs()));
    let out_w = extent(scale * (w * cos.abs() + h * sin.abs()));
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let (oy, ox) = ((out_h as f64 - 1.0) / 2.0, (out_w as f64 - 1.0) / 2.0);

    let ch = sprite.channels;
    let mut footprint = vec![false; out_h * out_w];
    let mut texture = vec![0.0; ch * out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (dy, dx) = (y as f64 - oy, x as f64 - ox);
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            let (ry, rx) = (sy.round(), sx.round());
            if ry < 0.0 || rx < 0.0 || ry >= h || rx >= w {
                continue;
            }
            let (iy, ix) = (ry as usize, rx as usize);
            if !sprite.covers(iy, ix) {
                continue;
            }
            footprint[y * out_w + x] = true;
            for c in 0..ch {
                texture[(c * out_h + y) * out_w + x] = sprite.texel(c, iy, ix);
            }
        }
    }
    let out = ObjectSprite {
        height: out_h,
        width: out_w,
        channels: ch,
        footprint,
        texture,
    };
    if out.area() == 0 {
        return Err(Error::Degenerate(format!(
            "object vanished under scale {scale}, rotation {rotation_deg}"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn sample(seed: u64, kind: ShapeKind) -> ObjectSprite {
        random_sprite(&mut rng_from(seed), kind, 11, 3)
    }

    #[test]
    fn identity_transform_is_exact() {
        for kind in [ShapeKind::Disc, ShapeKind::Polygon, ShapeKind::Blob] {
            let s = sample(4, kind);
            assert_eq!(transform_object(&s, 1.0, 0.0).unwrap(), s);
        }
    }

    #[test]
    fn half_turn_twice_restores_footprint() {
        for seed in 0..20 {
            for kind in [ShapeKind::Polygon, ShapeKind::Blob] {
                let s = sample(seed, kind);
                let once = transform_object(&s, 1.0, 180.0).unwrap();
                let twice = transform_object(&once, 1.0, 180.0).unwrap();
                assert_eq!(twice.footprint, s.footprint, "seed {seed}");
                assert_eq!(twice.texture, s.texture);
            }
        }
    }

    #[test]
    fn doubling_quadruples_area() {
        let disc = ObjectSprite::disc(10, 1, 1.0);
        let big = transform_object(&disc, 2.0, 0.0).unwrap();
        let ratio = big.area() as f64 / disc.area() as f64;
        assert!((ratio - 4.0).abs() / 4.0 < 0.1, "ratio {ratio}");
    }

    #[test]
    fn vanishing_object_is_an_error() {
        let mut s = ObjectSprite::disc(3, 1, 1.0);
        s.footprint = vec![false; 9];
        s.footprint[0] = true;
        assert!(matches!(transform_object(&s, 0.2, 45.0), Err(Error::Degenerate(_))));
        assert!(transform_object(&s, 0.0, 0.0).is_err());
    }

    #[test]
    fn footprints_are_nonempty() {
        for seed in 0..50 {
            for kind in [ShapeKind::Disc, ShapeKind::Polygon, ShapeKind::Blob] {
                assert!(sample(seed, kind).area() >= 15);
            }
        }
    }
}
