use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng::{derive_seed, rng_from, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

/// Binary `H×W` mask; `true` marks the hole (the region to erase).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{} bits for {height}×{width}", bits.len()),
            ));
        }
        Ok(Self { height, width, bits })
    }

    /// Reads a `1×H×W` or `H×W` tensor whose entries must be exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(Error::shape("mask", format!("tensor {s:?} is not 1×H×W"))),
        };
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == T::one() {
                bits.push(true);
            } else if v == T::zero() {
                bits.push(false);
            } else {
                return Err(Error::invalid(format!("mask value {v} is not binary")));
            }
        }
        Self::from_bits(h, w, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.area() as f64 / self.bits.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.same_dims(other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn overlap(&self, other: &Mask) -> Result<usize> {
        self.same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    fn same_dims(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                "mask",
                format!(
                    "{}×{} vs {}×{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        Ok(())
    }

    /// `1×H×W` tensor with 1 in the hole.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width],
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask tensor shape matches bit count")
    }

    /// Max-pools to `h×w`: a cell is a hole if any covered pixel is.
    pub fn downsample_max(&self, h: usize, w: usize) -> Result<Mask> {
        if h == 0 || w == 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::invalid(format!(
                "{h}×{w} does not divide mask resolution {}×{}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let mut out = Mask::empty(h, w);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / fy, x / fx, true);
                }
            }
        }
        Ok(out)
    }

    /// Number of 4-connected hole components.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.bits.len()];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (y, x) = (i / self.width, i % self.width);
                let mut visit = |ny: usize, nx: usize| {
                    let j = ny * self.width + nx;
                    if self.bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < self.height {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < self.width {
                    visit(y, x + 1);
                }
            }
        }
        count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Rectangle,
    Ellipse,
    Irregular,
    Combined,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::Rectangle,
        MaskKind::Ellipse,
        MaskKind::Irregular,
        MaskKind::Combined,
    ];
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Rectangle => "rectangle",
            MaskKind::Ellipse => "ellipse",
            MaskKind::Irregular => "irregular",
            MaskKind::Combined => "combined",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mask kind {s:?}")))
    }
}

/// Geometry of one mask family member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskShape {
    Rectangle {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
    /// Random-walk brush: one continuous walk of `strokes × steps` moves of
    /// `step_len` pixels, stamping a disc of `radius` at every position.
    Irregular {
        start_y: f64,
        start_x: f64,
        strokes: usize,
        steps: usize,
        step_len: f64,
        radius: f64,
    },
    Combined {
        parts: Vec<MaskSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub shape: MaskShape,
    /// Drives the brush directions of irregular masks.
    pub seed: u64,
}

/// Area bounds for randomly drawn masks, as fractions of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for AreaBounds {
    fn default() -> Self {
        Self {
            min: 0.02,
            max: 0.35,
        }
    }
}

/// Geometry draws that land outside the area bounds are redrawn up to this
/// many times.
const GEOMETRY_DRAWS: u64 = 64;

impl MaskSpec {
    pub fn kind(&self) -> MaskKind {
        match self.shape {
            MaskShape::Rectangle { .. } => MaskKind::Rectangle,
            MaskShape::Ellipse { .. } => MaskKind::Ellipse,
            MaskShape::Irregular { .. } => MaskKind::Irregular,
            MaskShape::Combined { .. } => MaskKind::Combined,
        }
    }

    /// Draws random geometry of `kind` for a `size×size` image whose rendered
    /// area lies inside `bounds`.
    pub fn random(kind: MaskKind, seed: u64, size: usize, bounds: AreaBounds) -> Result<Self> {
        for attempt in 0..GEOMETRY_DRAWS {
            let spec = Self::draw(kind, derive_seed(seed, &[stream::MASK, attempt]), size);
            let mask = random_mask(&spec, size, size)?;
            let f = mask.fraction();
            if !mask.is_empty() && f >= bounds.min && f <= bounds.max {
                return Ok(spec);
            }
        }
        Err(Error::Degenerate(format!(
            "no {kind} mask within area bounds [{}, {}] after {GEOMETRY_DRAWS} draws",
            bounds.min, bounds.max
        )))
    }

    fn draw(kind: MaskKind, seed: u64, size: usize) -> Self {
        let mut rng = rng_from(seed);
        let s = size as f64;
        let shape = match kind {
            MaskKind::Rectangle => {
                let height = rng.random_range((0.15 * s) as usize..=(0.55 * s) as usize).max(1);
                let width = rng.random_range((0.15 * s) as usize..=(0.55 * s) as usize).max(1);
                MaskShape::Rectangle {
                    top: rng.random_range(0..=size - height),
                    left: rng.random_range(0..=size - width),
                    height,
                    width,
                }
            }
            MaskKind::Ellipse => {
                let ry = rng.random_range(0.08 * s..0.3 * s);
                let rx = rng.random_range(0.08 * s..0.3 * s);
                MaskShape::Ellipse {
                    cy: rng.random_range(ry..s - ry),
                    cx: rng.random_range(rx..s - rx),
                    ry,
                    rx,
                }
            }
            MaskKind::Irregular => {
                let radius = rng.random_range(1.6..2.8);
                MaskShape::Irregular {
                    start_y: rng.random_range(0.2 * s..0.8 * s),
                    start_x: rng.random_range(0.2 * s..0.8 * s),
                    strokes: rng.random_range(2..=4),
                    steps: rng.random_range(3..=6),
                    step_len: rng.random_range(1.0..radius),
                    radius,
                }
            }
            MaskKind::Combined => {
                let n = rng.random_range(2..=3);
                let parts = (0..n)
                    .map(|i| {
                        let sub = [MaskKind::Rectangle, MaskKind::Ellipse, MaskKind::Irregular]
                            [rng.random_range(0..3)];
                        let mut part = Self::draw(sub, derive_seed(seed, &[i]), size);
                        shrink(&mut part.shape, 0.7);
                        part
                    })
                    .collect();
                MaskShape::Combined { parts }
            }
        };
        MaskSpec { shape, seed }
    }
}

fn shrink(shape: &mut MaskShape, f: f64) {
    match shape {
        MaskShape::Rectangle { height, width, .. } => {
            *height = ((*height as f64 * f) as usize).max(1);
            *width = ((*width as f64 * f) as usize).max(1);
        }
        MaskShape::Ellipse { ry, rx, .. } => {
            *ry *= f;
            *rx *= f;
        }
        MaskShape::Irregular { steps, .. } => *steps = ((*steps as f64 * f).ceil() as usize).max(1),
        MaskShape::Combined { .. } => {}
    }
}

fn stamp_disc(mask: &mut Mask, cy: f64, cx: f64, r: f64) {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let y0 = (cy - r).floor() as isize;
    let x0 = (cx - r).floor() as isize;
    for y in y0..=(cy + r).ceil() as isize {
        for x in x0..=(cx + r).ceil() as isize {
            if y < 0 || x < 0 || y >= h || x >= w {
                continue;
            }
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r * r {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
}

/// Renders a mask spec on an `height×width` canvas.
pub fn random_mask(spec: &MaskSpec, height: usize, width: usize) -> Result<Mask> {
    let mut mask = Mask::empty(height, width);
    match &spec.shape {
        MaskShape::Rectangle {
            top,
            left,
            height: rh,
            width: rw,
        } => {
            for y in *top..(top + rh).min(height) {
                for x in *left..(left + rw).min(width) {
                    mask.set(y, x, true);
                }
            }
        }
        MaskShape::Ellipse { cy, cx, ry, rx } => {
            if !(*ry > 0.0 && *rx > 0.0) {
                return Err(Error::Degenerate(format!("ellipse radii {ry}×{rx}")));
            }
            for y in 0..height {
                for x in 0..width {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    if dy * dy + dx * dx <= 1.0 {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        MaskShape::Irregular {
            start_y,
            start_x,
            strokes,
            steps,
            step_len,
            radius,
        } => {
            if !(*radius >= 1.0) || *step_len > *radius {
                return Err(Error::invalid(format!(
                    "brush radius {radius} must be >= 1 and >= step length {step_len}"
                )));
            }
            let mut rng = rng_from(spec.seed);
            let (mut y, mut x) = (*start_y, *start_x);
            stamp_disc(&mut mask, y, x, *radius);
            let (hi_y, hi_x) = (height as f64 - 1.0, width as f64 - 1.0);
            for _ in 0..*strokes {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                for _ in 0..*steps {
                    let jitter: f64 = rng.random_range(-0.4..0.4);
                    y = (y + step_len * (angle + jitter).sin()).clamp(0.0, hi_y);
                    x = (x + step_len * (angle + jitter).cos()).clamp(0.0, hi_x);
                    stamp_disc(&mut mask, y, x, *radius);
                }
            }
        }
        MaskShape::Combined { parts } => {
            for part in parts {
                mask = mask.union(&random_mask(part, height, width)?)?;
            }
        }
    }
    if mask.is_empty() {
        return Err(Error::Degenerate(format!("{} mask rendered empty", spec.kind())));
    }
    Ok(mask)
}
