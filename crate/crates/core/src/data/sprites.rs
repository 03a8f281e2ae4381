//! Procedural sprites: identity is a shape and a palette, nuisance is a
//! translation, rotation and scale drawn fresh for every image.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LabeledImageDataset;
use crate::error::{io_err, Error, Result};
use crate::image_io::{write_image, ImageFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross, ShapeKind::Ring];

    /// Whether local point `(u, v)` (unit base radius, `v` up) is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Disc => r2 <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.85,
            ShapeKind::Triangle => v >= -0.5 && v <= 1.0 - 3f64.sqrt() * u.abs(),
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Ring => (0.3025..=1.0).contains(&r2),
        }
    }

    /// Distance from the centre to the farthest covered point.
    fn extent(self) -> f64 {
        match self {
            ShapeKind::Square => 0.85 * 2f64.sqrt(),
            ShapeKind::Cross => 1.09f64.sqrt(),
            _ => 1.0,
        }
    }
}

/// (primary, marker) colours. The marker dot makes rotation visible.
const PALETTES: [([f32; 3], [f32; 3]); 8] = [
    ([0.95, 0.20, 0.20], [1.00, 1.00, 0.60]),
    ([0.20, 0.75, 0.25], [0.10, 0.10, 0.40]),
    ([0.25, 0.40, 0.95], [1.00, 0.85, 0.20]),
    ([0.95, 0.85, 0.15], [0.60, 0.05, 0.45]),
    ([0.70, 0.30, 0.90], [0.70, 1.00, 0.70]),
    ([0.15, 0.85, 0.85], [0.55, 0.10, 0.05]),
    ([0.95, 0.55, 0.10], [0.05, 0.25, 0.10]),
    ([0.85, 0.85, 0.85], [0.90, 0.10, 0.10]),
];

/// Grey levels used instead of the palettes for single-channel output.
const GREYS: [(f32, f32); 8] = [
    (1.00, 0.30),
    (0.45, 1.00),
    (0.80, 0.10),
    (0.60, 0.95),
    (0.90, 0.55),
    (0.35, 0.75),
    (0.70, 0.20),
    (0.55, 0.05),
];

/// Base shape radius as a fraction of half the canvas.
const BASE_RADIUS: f64 = 0.36;
const MARKER_CENTRE: f64 = 0.62;
const MARKER_RADIUS: f64 = 0.24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpriteConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    /// 1 (grey) or 3 (RGB).
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Largest centre offset per axis, as a fraction of the canvas side.
    #[serde(default = "default_translation")]
    pub max_translation: f64,
    #[serde(default = "default_rotation")]
    pub max_rotation_deg: f64,
    #[serde(default = "default_scale")]
    pub scale_range: [f64; 2],
    /// When false every image of an identity is rendered in canonical pose.
    #[serde(default = "default_true")]
    pub vary_nuisance: bool,
}

fn default_size() -> usize {
    64
}
fn default_channels() -> usize {
    3
}
fn default_translation() -> f64 {
    0.25
}
fn default_rotation() -> f64 {
    45.0
}
fn default_scale() -> [f64; 2] {
    [0.7, 1.2]
}
fn default_true() -> bool {
    true
}

impl ToySpriteConfig {
    pub const MAX_IDENTITIES: usize = ShapeKind::ALL.len() * PALETTES.len();

    pub fn new(num_identities: usize, images_per_identity: usize, image_size: usize) -> Self {
        Self {
            num_identities,
            images_per_identity,
            image_size,
            channels: default_channels(),
            max_translation: default_translation(),
            max_rotation_deg: default_rotation(),
            scale_range: default_scale(),
            vary_nuisance: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_identities == 0 || self.num_identities > Self::MAX_IDENTITIES {
            return bad(format!("num_identities must be in 1..={}, got {}", Self::MAX_IDENTITIES, self.num_identities));
        }
        if self.images_per_identity == 0 {
            return bad("images_per_identity must be >= 1".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size must be >= 8, got {}", self.image_size));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if !(0.0..=0.5).contains(&self.max_translation) {
            return bad(format!("max_translation must lie in [0, 0.5], got {}", self.max_translation));
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return bad(format!("max_rotation_deg must lie in [0, 180], got {}", self.max_rotation_deg));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale_range must satisfy 0 < min <= max, got {:?}", self.scale_range));
        }
        Ok(())
    }
}

/// Fixed factors of one identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpriteIdentity {
    pub id: usize,
    pub shape: ShapeKind,
    pub palette: usize,
}

/// Identity factors depend only on `(seed, id)`. Shape and palette both cycle
/// with the id (palettes through a seeded permutation); 5 and 8 are coprime,
/// so all 40 combinations are distinct and small sets still vary in colour.
pub fn sprite_identity(seed: u64, id: usize) -> SpriteIdentity {
    let mut order: Vec<usize> = (0..PALETTES.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    SpriteIdentity {
        id,
        shape: ShapeKind::ALL[id % ShapeKind::ALL.len()],
        palette: order[id % PALETTES.len()],
    }
}

#[derive(Debug, Clone)]
pub struct SpriteSet {
    pub dataset: LabeledImageDataset,
    pub identities: Vec<SpriteIdentity>,
    /// Images whose sampled offset was pulled back to keep the shape on the canvas.
    pub clamped: usize,
}

struct Pose {
    tx: f64,
    ty: f64,
    angle: f64,
    scale: f64,
}

/// Renders `num_identities * images_per_identity` images, identity-major;
/// the label of each image is its identity id.
pub fn generate_toy_sprites(config: &ToySpriteConfig, seed: u64) -> Result<SpriteSet> {
    config.validate()?;
    let identities: Vec<SpriteIdentity> = (0..config.num_identities).map(|id| sprite_identity(seed, id)).collect();
    let n = config.num_identities * config.images_per_identity;
    let rendered: Vec<(Vec<f32>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let ident = identities[i / config.images_per_identity];
            let (pose, clamped) = sample_pose(config, ident.shape, &mut rng);
            (render(config, ident, &pose), clamped)
        })
        .collect();
    let clamped = rendered.iter().filter(|r| r.1).count();
    let pixels = rendered.into_iter().flat_map(|r| r.0).collect();
    let labels = (0..n).map(|i| (i / config.images_per_identity) as u32).collect();
    let dataset = LabeledImageDataset::new(config.channels, config.image_size, config.image_size, pixels, labels)?;
    Ok(SpriteSet { dataset, identities, clamped })
}

fn sample_pose(config: &ToySpriteConfig, shape: ShapeKind, rng: &mut impl Rng) -> (Pose, bool) {
    if !config.vary_nuisance {
        return (Pose { tx: 0.0, ty: 0.0, angle: 0.0, scale: 1.0 }, false);
    }
    // canvas spans [-1, 1], so a fraction f of the side is 2f in these units
    let t = 2.0 * config.max_translation;
    let mut tx = if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 };
    let mut ty = if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 };
    let a = config.max_rotation_deg * PI / 180.0;
    let angle = if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let [lo, hi] = config.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let limit = (1.0 - shape.extent() * BASE_RADIUS * scale).max(0.0);
    let mut clamped = false;
    for c in [&mut tx, &mut ty] {
        if c.abs() > limit {
            *c = c.clamp(-limit, limit);
            clamped = true;
        }
    }
    (Pose { tx, ty, angle, scale }, clamped)
}

fn render(config: &ToySpriteConfig, ident: SpriteIdentity, pose: &Pose) -> Vec<f32> {
    let size = config.image_size;
    let (primary, marker): ([f32; 3], [f32; 3]) = if config.channels == 3 {
        PALETTES[ident.palette]
    } else {
        let (p, m) = GREYS[ident.palette];
        ([p; 3], [m; 3])
    };
    let (sin, cos) = pose.angle.sin_cos();
    let radius = BASE_RADIUS * pose.scale;
    let plane = size * size;
    let mut out = vec![0f32; config.channels * plane];
    const SUB: usize = 2;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0f32; 3];
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = ((px as f64 + (sx as f64 + 0.5) / SUB as f64) / size as f64) * 2.0 - 1.0;
                    let y = 1.0 - ((py as f64 + (sy as f64 + 0.5) / SUB as f64) / size as f64) * 2.0;
                    let (dx, dy) = (x - pose.tx, y - pose.ty);
                    // undo the rotation, then the scale
                    let u = (cos * dx + sin * dy) / radius;
                    let v = (-sin * dx + cos * dy) / radius;
                    let colour = if u * u + (v - MARKER_CENTRE).powi(2) <= MARKER_RADIUS * MARKER_RADIUS {
                        Some(marker)
                    } else if ident.shape.contains(u, v) {
                        Some(primary)
                    } else {
                        None
                    };
                    if let Some(c) = colour {
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
            }
            for c in 0..config.channels {
                out[c * plane + py * size + px] = (acc[c] / (SUB * SUB) as f32).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Writes `images/<index>.<pgm|png>` and `labels.csv` (one `index,label` line
/// per image) under `dir`. Returns the number of images written.
pub fn write_toy_sprites(dataset: &LabeledImageDataset, dir: &Path) -> Result<usize> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let format = ImageFormat::for_channels(dataset.channels());
    let width = dataset.len().max(1).to_string().len();
    let mut manifest = Vec::new();
    for i in 0..dataset.len() {
        let path = images.join(format!("{i:0width$}.{}", format.extension()));
        write_image(&path, dataset.channels(), dataset.height(), dataset.width(), dataset.image(i), format)?;
        writeln!(manifest, "{i},{}", dataset.label(i)).expect("write to Vec");
    }
    let path = dir.join("labels.csv");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(dataset.len())
}
