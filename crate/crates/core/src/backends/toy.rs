//! Deterministic, differentiable toy world with planted semantics.
//!
//! The image is split into four fixed zones. The top half holds three
//! property zones side by side (backdrop tint, emblem disc, stripes); the
//! bottom half is a texture zone. Each planted attribute drives one property
//! through `p = sigmoid(gain * mean(planted channels))`; all remaining
//! editable channels mix cosine patterns in the texture zone. Two
//! non-editable channels carry the camera pose, which shifts the emblem and
//! the stripe phase; the other non-editable channels are inert.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BackendKind, BackendManifest, DifferentiableGenerator, GeneratorBackend, Latent, RegionSegmenter};
use crate::error::{Error, Result};
use crate::image::{Image, RegionMask};
use crate::qmm::{AttributeSpec, DescriptorGroup, DifferentiableScorer, ImageTextScorer};
use crate::stylespace::StyleCode;

pub const TOY_TEMPLATE: &str = "a toy image with {}";
pub const TOY_MODEL_ID: &str = "toy-world-v1";

const TINT_LO: [f64; 3] = [0.9, 0.3, 0.2];
const TINT_HI: [f64; 3] = [0.2, 0.4, 0.9];
const EMBLEM_BASE: f64 = 0.1;
const EMBLEM_FG: [f64; 3] = [0.85, 0.75, 0.2];
const STRIPE_BASE: f64 = 0.15;
const STRIPE_AMP: f64 = 0.35;
const TEXTURE_AMP: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    /// Uniform backdrop color, red at `p = 0` to blue at `p = 1`.
    Tint,
    /// Radius of a soft-edged disc.
    Emblem,
    /// Strength of horizontal stripes.
    Stripes,
}

impl PropertyKind {
    pub fn region(self) -> &'static str {
        match self {
            PropertyKind::Tint => "backdrop",
            PropertyKind::Emblem => "emblem",
            PropertyKind::Stripes => "stripes",
        }
    }
}

pub const TOY_REGIONS: [&str; 4] = ["backdrop", "emblem", "stripes", "texture"];

/// One attribute planted in the toy world: the property it drives, the
/// channels whose mean drives it, and the canonical property value of each
/// descriptor phrase (read by the toy scorer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedProperty {
    pub attribute: String,
    pub kind: PropertyKind,
    pub channels: Vec<usize>,
    pub probes: BTreeMap<String, f64>,
    /// Texture channels whose pattern the toy scorer also picks up when it
    /// judges this property, mimicking a scorer that is not blind to the
    /// background.
    #[serde(default)]
    pub leak_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorld {
    pub n_channels: usize,
    /// Side length of the square image; must be a multiple of 8.
    pub image_size: usize,
    pub non_editable: Vec<usize>,
    /// Non-editable channels carrying yaw and pitch.
    pub pose_channels: [usize; 2],
    pub properties: Vec<PlantedProperty>,
    pub property_gain: f64,
    pub texture_gain: f64,
    pub edge_softness: f64,
    pub scorer_sharpness: f64,
    /// Weight of the leak-channel texture cue in the scorer's estimate.
    #[serde(default)]
    pub scorer_leak: f64,
}

impl Default for ToyWorld {
    fn default() -> Self {
        let probes = |names: [&str; 5]| {
            names
                .iter()
                .zip([0.0, 0.5, 1.0, 0.2, 0.8])
                .map(|(n, v)| (n.to_string(), v))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            n_channels: 32,
            image_size: 64,
            non_editable: vec![7, 15, 23, 31],
            pose_channels: [7, 15],
            properties: vec![
                PlantedProperty {
                    attribute: "tint".into(),
                    kind: PropertyKind::Tint,
                    channels: vec![2, 11, 19, 24],
                    leak_channels: vec![1, 8, 16],
                    probes: probes([
                        "red backdrop",
                        "violet backdrop",
                        "blue backdrop",
                        "warm backdrop",
                        "cool backdrop",
                    ]),
                },
                PlantedProperty {
                    attribute: "emblem".into(),
                    kind: PropertyKind::Emblem,
                    channels: vec![5, 13, 21, 27],
                    leak_channels: vec![3, 10, 18],
                    probes: probes([
                        "small emblem",
                        "medium emblem",
                        "large emblem",
                        "tiny dot",
                        "big disc",
                    ]),
                },
                PlantedProperty {
                    attribute: "stripes".into(),
                    kind: PropertyKind::Stripes,
                    channels: vec![0, 9, 17, 29],
                    leak_channels: vec![4, 12, 20],
                    probes: probes([
                        "faint stripes",
                        "moderate stripes",
                        "bold stripes",
                        "low contrast",
                        "high contrast",
                    ]),
                },
            ],
            property_gain: 2.0,
            texture_gain: 4.0,
            edge_softness: 0.75,
            scorer_sharpness: 12.0,
            scorer_leak: 0.01,
        }
    }
}

/// Attribute specs matching [`ToyWorld::default`]: two descriptor groups
/// each, the property zone as alterable region, `k = 4`, `d = 1`.
pub fn default_toy_attributes() -> Vec<AttributeSpec> {
    let spec = |name: &str, region: &str, a: [&str; 3], b: [&str; 2]| {
        let g = |p: &[&str]| {
            DescriptorGroup::new(p.iter().map(|s| s.to_string()).collect(), TOY_TEMPLATE)
                .expect("static toy phrases")
        };
        AttributeSpec::new(name, vec![g(&a), g(&b)], region, 4, 1.0).expect("static toy spec")
    };
    vec![
        spec(
            "tint",
            "backdrop",
            ["red backdrop", "violet backdrop", "blue backdrop"],
            ["warm backdrop", "cool backdrop"],
        ),
        spec(
            "emblem",
            "emblem",
            ["small emblem", "medium emblem", "large emblem"],
            ["tiny dot", "big disc"],
        ),
        spec(
            "stripes",
            "stripes",
            ["faint stripes", "moderate stripes", "bold stripes"],
            ["low contrast", "high contrast"],
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (y, x)))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub backdrop: Rect,
    pub emblem: Rect,
    pub stripes: Rect,
    pub texture: Rect,
}

impl Layout {
    fn new(size: usize) -> Self {
        let top = size / 2;
        let (c1, c2) = (size / 3, 2 * size / 3);
        Self {
            backdrop: Rect { y0: 0, y1: top, x0: 0, x1: c1 },
            emblem: Rect { y0: 0, y1: top, x0: c1, x1: c2 },
            stripes: Rect { y0: 0, y1: top, x0: c2, x1: size },
            texture: Rect { y0: top, y1: size, x0: 0, x1: size },
        }
    }

    pub fn zone(&self, kind: PropertyKind) -> Rect {
        match kind {
            PropertyKind::Tint => self.backdrop,
            PropertyKind::Emblem => self.emblem,
            PropertyKind::Stripes => self.stripes,
        }
    }

    fn zones(&self) -> [Rect; 4] {
        [self.backdrop, self.emblem, self.stripes, self.texture]
    }
}

#[derive(Debug, Clone, Copy)]
struct EmblemGeometry {
    r_min: f64,
    r_max: f64,
    pose_amp: f64,
}

impl EmblemGeometry {
    fn new(zone: Rect) -> Self {
        let w = zone.width().min(zone.height()) as f64;
        Self {
            r_min: 0.15 * w,
            r_max: 0.4 * w,
            pose_amp: 0.05 * w,
        }
    }
}

/// Cosine pattern of the `j`-th texture channel over the texture zone, in
/// pixel iteration order. Distinct channels (up to 16) get distinct
/// frequency pairs, so the patterns are mutually orthogonal.
fn texture_patterns(zone: Rect, count: usize) -> Vec<Vec<f64>> {
    let (w, h) = (zone.width() as f64, zone.height() as f64);
    (0..count)
        .map(|j| {
            let fx = (1 + j % 4) as f64;
            let fy = (1 + (j / 4) % 4) as f64;
            let phase = 0.9 * j as f64;
            zone.pixels()
                .map(|(y, x)| {
                    let (u, v) = ((x - zone.x0) as f64 + 0.5, (y - zone.y0) as f64 + 0.5);
                    (2.0 * PI * (fx * u / w + fy * v / h) + phase).cos()
                })
                .collect()
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ToyWorld {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::invalid("toy world needs at least one channel"));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "toy image size must be a multiple of 8 and at least 16, got {}",
                self.image_size
            )));
        }
        for (name, v) in [
            ("property_gain", self.property_gain),
            ("texture_gain", self.texture_gain),
            ("edge_softness", self.edge_softness),
            ("scorer_sharpness", self.scorer_sharpness),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("toy {name} must be positive, got {v}")));
            }
        }
        let in_range = |c: usize| {
            if c < self.n_channels {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "toy channel {c} out of range for {} channels",
                    self.n_channels
                )))
            }
        };
        for &c in &self.non_editable {
            in_range(c)?;
        }
        for &c in &self.pose_channels {
            in_range(c)?;
            if !self.non_editable.contains(&c) {
                return Err(Error::invalid(format!("pose channel {c} must be non-editable")));
            }
        }
        if self.pose_channels[0] == self.pose_channels[1] {
            return Err(Error::invalid("pose channels must differ"));
        }
        let mut owner: HashMap<usize, &str> = HashMap::new();
        for (i, prop) in self.properties.iter().enumerate() {
            if self.properties[..i].iter().any(|p| p.kind == prop.kind) {
                return Err(Error::invalid(format!(
                    "property {:?} planted more than once",
                    prop.kind
                )));
            }
            if self.properties[..i].iter().any(|p| p.attribute == prop.attribute) {
                return Err(Error::invalid(format!(
                    "attribute `{}` planted more than once",
                    prop.attribute
                )));
            }
            if prop.channels.is_empty() {
                return Err(Error::invalid(format!(
                    "attribute `{}` has no planted channels",
                    prop.attribute
                )));
            }
            for &c in &prop.channels {
                in_range(c)?;
                if self.non_editable.contains(&c) {
                    return Err(Error::invalid(format!(
                        "planted channel {c} of `{}` is non-editable",
                        prop.attribute
                    )));
                }
                if let Some(other) = owner.insert(c, &prop.attribute) {
                    return Err(Error::invalid(format!(
                        "channel {c} planted for both `{other}` and `{}`",
                        prop.attribute
                    )));
                }
            }
            if prop.probes.values().any(|v| !v.is_finite()) {
                return Err(Error::invalid("probe values must be finite"));
            }
        }
        if !(self.scorer_leak.is_finite() && self.scorer_leak >= 0.0) {
            return Err(Error::invalid(format!(
                "toy scorer_leak must be non-negative, got {}",
                self.scorer_leak
            )));
        }
        let texture = self.texture_channels();
        let mut leak_owner: HashMap<usize, &str> = HashMap::new();
        for prop in &self.properties {
            for &c in &prop.leak_channels {
                if !texture.contains(&c) {
                    return Err(Error::invalid(format!(
                        "leak channel {c} of `{}` is not a texture channel",
                        prop.attribute
                    )));
                }
                if let Some(other) = leak_owner.insert(c, &prop.attribute) {
                    return Err(Error::invalid(format!(
                        "leak channel {c} shared by `{other}` and `{}`",
                        prop.attribute
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn editable_flags(&self) -> Vec<bool> {
        let mut flags = vec![true; self.n_channels];
        for &c in &self.non_editable {
            flags[c] = false;
        }
        flags
    }

    /// Editable channels not planted for any attribute; they drive the texture.
    pub fn texture_channels(&self) -> Vec<usize> {
        let flags = self.editable_flags();
        (0..self.n_channels)
            .filter(|&c| flags[c] && !self.properties.iter().any(|p| p.channels.contains(&c)))
            .collect()
    }

    pub fn planted(&self, attribute: &str) -> Option<&PlantedProperty> {
        self.properties.iter().find(|p| p.attribute == attribute)
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.properties.iter().map(|p| p.attribute.clone()).collect()
    }

    pub fn manifest(&self, model_id: &str) -> BackendManifest {
        BackendManifest {
            kind: BackendKind::Toy,
            model_id: model_id.to_string(),
            n_channels: self.n_channels,
            non_editable: self.non_editable.clone(),
            image_size: [self.image_size, self.image_size],
            regions: TOY_REGIONS.iter().map(|s| s.to_string()).collect(),
            endpoint: None,
            latent_dim: Some(self.n_channels),
            toy: Some(self.clone()),
        }
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(self.image_size)
    }

    /// Property value in `(0, 1)` driven by the planted channels.
    pub fn property_value(&self, prop: &PlantedProperty, style: &[f64]) -> f64 {
        let u = prop.channels.iter().map(|&c| style[c]).sum::<f64>() / prop.channels.len() as f64;
        sigmoid(self.property_gain * u)
    }
}

/// Toy generator: renders `3 x S x S` images from style codes.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    world: ToyWorld,
    manifest: BackendManifest,
    editable: Vec<bool>,
    layout: Layout,
    texture_channels: Vec<usize>,
    /// One cosine pattern per texture channel over the texture zone.
    patterns: Vec<Vec<f64>>,
}

impl ToyGenerator {
    pub fn new(world: ToyWorld) -> Result<Self> {
        Self::with_model_id(world, TOY_MODEL_ID)
    }

    pub fn with_model_id(world: ToyWorld, model_id: &str) -> Result<Self> {
        world.validate()?;
        let layout = world.layout();
        let texture_channels = world.texture_channels();
        let patterns = texture_patterns(layout.texture, texture_channels.len());
        Ok(Self {
            manifest: world.manifest(model_id),
            editable: world.editable_flags(),
            layout,
            texture_channels,
            patterns,
            world,
        })
    }

    pub fn world(&self) -> &ToyWorld {
        &self.world
    }

    fn check_len(&self, style: &StyleCode) -> Result<()> {
        if style.len() != self.world.n_channels {
            return Err(Error::invalid(format!(
                "style code has {} channels, toy world has {}",
                style.len(),
                self.world.n_channels
            )));
        }
        Ok(())
    }

    fn property(&self, kind: PropertyKind) -> Option<&PlantedProperty> {
        self.world.properties.iter().find(|p| p.kind == kind)
    }

    fn pose(&self, s: &[f64]) -> (f64, f64) {
        (s[self.world.pose_channels[0]], s[self.world.pose_channels[1]])
    }

    fn texture_scale(&self) -> f64 {
        self.world.texture_gain / (self.texture_channels.len().max(1) as f64).sqrt()
    }

    fn emblem_center(&self, geom: &EmblemGeometry, yaw: f64, pitch: f64) -> (f64, f64) {
        let z = self.layout.emblem;
        (
            z.x0 as f64 + z.width() as f64 / 2.0 + geom.pose_amp * yaw,
            z.y0 as f64 + z.height() as f64 / 2.0 + geom.pose_amp * pitch,
        )
    }

    fn stripe_angle(&self, y: usize, yaw: f64) -> f64 {
        let z = self.layout.stripes;
        let period = z.height() as f64 / 4.0;
        2.0 * PI * ((y - z.y0) as f64 + 0.5) / period + PI * yaw
    }

    fn p_of(&self, kind: PropertyKind, s: &[f64]) -> f64 {
        self.property(kind)
            .map_or(0.5, |prop| self.world.property_value(prop, s))
    }

    fn render(&self, s: &[f64]) -> Image {
        let size = self.world.image_size;
        let mut img = Image::zeros(3, size, size);
        let (yaw, pitch) = self.pose(s);

        let p = self.p_of(PropertyKind::Tint, s);
        for (y, x) in self.layout.backdrop.pixels() {
            for c in 0..3 {
                img.set(c, y, x, TINT_LO[c] + (TINT_HI[c] - TINT_LO[c]) * p);
            }
        }

        let p = self.p_of(PropertyKind::Emblem, s);
        let geom = EmblemGeometry::new(self.layout.emblem);
        let r = geom.r_min + (geom.r_max - geom.r_min) * p;
        let (cx, cy) = self.emblem_center(&geom, yaw, pitch);
        for (y, x) in self.layout.emblem.pixels() {
            let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
            let v = sigmoid((r - d) / self.world.edge_softness);
            for c in 0..3 {
                img.set(c, y, x, EMBLEM_BASE + EMBLEM_FG[c] * v);
            }
        }

        let p = self.p_of(PropertyKind::Stripes, s);
        for (y, x) in self.layout.stripes.pixels() {
            let g = STRIPE_BASE + STRIPE_AMP * p * (1.0 + self.stripe_angle(y, yaw).sin());
            img.set(0, y, x, g);
            img.set(1, y, x, g);
            img.set(2, y, x, 0.6 * g + 0.3);
        }

        let scale = self.texture_scale();
        for (k, (y, x)) in self.layout.texture.pixels().enumerate() {
            let h: f64 = self
                .texture_channels
                .iter()
                .zip(&self.patterns)
                .map(|(&c, pat)| s[c] * pat[k])
                .sum::<f64>()
                * scale;
            let g = 0.5 + TEXTURE_AMP * h.tanh();
            img.set(0, y, x, g);
            img.set(1, y, x, 0.8 * g + 0.1);
            img.set(2, y, x, 0.6 * g + 0.2);
        }
        img
    }

    fn add_property_grad(&self, kind: PropertyKind, s: &[f64], dp: f64, out: &mut [f64]) {
        if let Some(prop) = self.property(kind) {
            let p = self.world.property_value(prop, s);
            let g = dp * self.world.property_gain * p * (1.0 - p) / prop.channels.len() as f64;
            for &c in &prop.channels {
                out[c] += g;
            }
        }
    }

    fn vjp(&self, s: &[f64], grad: &Image) -> Vec<f64> {
        let mut out = vec![0.0; s.len()];
        let (yaw, pitch) = self.pose(s);
        let (pc_yaw, pc_pitch) = (self.world.pose_channels[0], self.world.pose_channels[1]);

        let mut dp = 0.0;
        for (y, x) in self.layout.backdrop.pixels() {
            for c in 0..3 {
                dp += grad.get(c, y, x) * (TINT_HI[c] - TINT_LO[c]);
            }
        }
        self.add_property_grad(PropertyKind::Tint, s, dp, &mut out);

        let p = self.p_of(PropertyKind::Emblem, s);
        let geom = EmblemGeometry::new(self.layout.emblem);
        let r = geom.r_min + (geom.r_max - geom.r_min) * p;
        let (cx, cy) = self.emblem_center(&geom, yaw, pitch);
        let (mut dr, mut dcx, mut dcy) = (0.0, 0.0, 0.0);
        for (y, x) in self.layout.emblem.pixels() {
            let (ex, ey) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let d = ex.hypot(ey);
            let v = sigmoid((r - d) / self.world.edge_softness);
            let dv = v * (1.0 - v) / self.world.edge_softness;
            let gpix: f64 = (0..3).map(|c| grad.get(c, y, x) * EMBLEM_FG[c]).sum();
            dr += gpix * dv;
            if d > 0.0 {
                // d(d)/d(cx) = -ex / d
                dcx += gpix * dv * ex / d;
                dcy += gpix * dv * ey / d;
            }
        }
        self.add_property_grad(PropertyKind::Emblem, s, dr * (geom.r_max - geom.r_min), &mut out);
        out[pc_yaw] += dcx * geom.pose_amp;
        out[pc_pitch] += dcy * geom.pose_amp;

        let p = self.p_of(PropertyKind::Stripes, s);
        let (mut dp, mut dyaw) = (0.0, 0.0);
        for (y, x) in self.layout.stripes.pixels() {
            let gg = grad.get(0, y, x) + grad.get(1, y, x) + 0.6 * grad.get(2, y, x);
            let theta = self.stripe_angle(y, yaw);
            dp += gg * STRIPE_AMP * (1.0 + theta.sin());
            dyaw += gg * STRIPE_AMP * p * theta.cos() * PI;
        }
        self.add_property_grad(PropertyKind::Stripes, s, dp, &mut out);
        out[pc_yaw] += dyaw;

        let scale = self.texture_scale();
        let mut dh = Vec::with_capacity(self.layout.texture.area());
        for (k, (y, x)) in self.layout.texture.pixels().enumerate() {
            let h: f64 = self
                .texture_channels
                .iter()
                .zip(&self.patterns)
                .map(|(&c, pat)| s[c] * pat[k])
                .sum::<f64>()
                * scale;
            let gg = grad.get(0, y, x) + 0.8 * grad.get(1, y, x) + 0.6 * grad.get(2, y, x);
            let t = h.tanh();
            dh.push(gg * TEXTURE_AMP * (1.0 - t * t) * scale);
        }
        for (&c, pat) in self.texture_channels.iter().zip(&self.patterns) {
            out[c] += pat.iter().zip(&dh).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }
}

impl GeneratorBackend for ToyGenerator {
    fn manifest(&self) -> &BackendManifest {
        &self.manifest
    }

    fn editable(&self) -> &[bool] {
        &self.editable
    }

    fn sample_latent(&self, seed: u64) -> Result<Latent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..self.world.n_channels)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pose = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(Latent { z, pose })
    }

    fn to_style(&self, latent: &Latent) -> Result<StyleCode> {
        if latent.z.len() != self.world.n_channels || latent.pose.len() != 2 {
            return Err(Error::invalid(format!(
                "toy latent needs z of length {} and 2 pose values",
                self.world.n_channels
            )));
        }
        let mut values = latent.z.clone();
        values[self.world.pose_channels[0]] = latent.pose[0];
        values[self.world.pose_channels[1]] = latent.pose[1];
        StyleCode::new(values, self.editable.clone())
    }

    fn synthesize(&self, style: &StyleCode) -> Result<Image> {
        self.check_len(style)?;
        Ok(self.render(style.values()))
    }

    fn as_differentiable(&self) -> Option<&dyn DifferentiableGenerator> {
        Some(self)
    }
}

impl DifferentiableGenerator for ToyGenerator {
    fn synthesize_vjp(&self, style: &StyleCode, grad_image: &Image) -> Result<Vec<f64>> {
        self.check_len(style)?;
        let size = self.world.image_size;
        if grad_image.shape() != (3, size, size) {
            return Err(Error::invalid(format!(
                "gradient image shape {:?} does not match toy output (3, {size}, {size})",
                grad_image.shape()
            )));
        }
        Ok(self.vjp(style.values(), grad_image))
    }
}

/// Fixed-layout segmenter: the four toy zones exactly tile the image.
#[derive(Debug, Clone)]
pub struct ToySegmenter {
    regions: Vec<String>,
    size: usize,
    layout: Layout,
}

impl ToySegmenter {
    pub fn new(world: ToyWorld) -> Result<Self> {
        world.validate()?;
        Ok(Self {
            regions: TOY_REGIONS.iter().map(|s| s.to_string()).collect(),
            size: world.image_size,
            layout: world.layout(),
        })
    }
}

impl RegionSegmenter for ToySegmenter {
    fn regions(&self) -> &[String] {
        &self.regions
    }

    fn segment(&self, image: &Image) -> Result<Vec<RegionMask>> {
        if (image.height(), image.width()) != (self.size, self.size) {
            return Err(Error::invalid(format!(
                "toy segmenter expects {0}x{0} images, got {1}x{2}",
                self.size,
                image.height(),
                image.width()
            )));
        }
        Ok(self
            .layout
            .zones()
            .iter()
            .map(|zone| {
                let mut bits = vec![false; self.size * self.size];
                for (y, x) in zone.pixels() {
                    bits[y * self.size + x] = true;
                }
                RegionMask::new(self.size, self.size, bits).expect("sized")
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    kind: PropertyKind,
    value: f64,
}

/// Analytic scorer for toy images.
///
/// Each templated phrase is tied to a property and a canonical value. The
/// property is re-estimated from the red channel of its zone, plus
/// `scorer_leak` times the projection of the texture zone onto the
/// property's leak-channel patterns (`q`); the phrase score is
/// `-sharpness * (q - value)^2`.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    world: ToyWorld,
    layout: Layout,
    probes: HashMap<String, Probe>,
    /// Per property: `d q / d(red texture pixel)`, in texture pixel order.
    leaks: HashMap<PropertyKind, Vec<f64>>,
}

impl ToyScorer {
    pub fn new(world: ToyWorld, specs: &[AttributeSpec]) -> Result<Self> {
        world.validate()?;
        let mut probes = HashMap::new();
        for spec in specs {
            let prop = world.planted(&spec.name).ok_or_else(|| {
                Error::invalid(format!("attribute `{}` is not planted in the toy world", spec.name))
            })?;
            for group in &spec.groups {
                for (phrase, prompt) in group.phrases().iter().zip(group.prompts()) {
                    let value = *prop.probes.get(phrase).ok_or_else(|| {
                        Error::invalid(format!(
                            "toy world has no canonical value for phrase `{phrase}` of `{}`",
                            spec.name
                        ))
                    })?;
                    probes.insert(prompt, Probe { kind: prop.kind, value });
                }
            }
        }
        let layout = world.layout();
        let texture = world.texture_channels();
        let patterns = texture_patterns(layout.texture, texture.len());
        // normalized so the cue moves by about `scorer_leak` per unit of a
        // leak channel while the texture stays out of saturation
        let scale = world.texture_gain / (texture.len().max(1) as f64).sqrt();
        let norm = world.scorer_leak * 2.0 / (scale * TEXTURE_AMP * layout.texture.area() as f64);
        let mut leaks = HashMap::new();
        for prop in &world.properties {
            if prop.leak_channels.is_empty() || world.scorer_leak == 0.0 {
                continue;
            }
            let mut psi = vec![0.0; layout.texture.area()];
            for c in &prop.leak_channels {
                let j = texture.iter().position(|t| t == c).expect("validated");
                for (v, p) in psi.iter_mut().zip(&patterns[j]) {
                    *v += norm * p;
                }
            }
            leaks.insert(prop.kind, psi);
        }
        Ok(Self {
            layout,
            world,
            probes,
            leaks,
        })
    }

    fn probe(&self, prompt: &str) -> Result<Probe> {
        self.probes
            .get(prompt)
            .copied()
            .ok_or_else(|| Error::invalid(format!("toy scorer does not know prompt `{prompt}`")))
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let size = self.world.image_size;
        if image.shape() != (3, size, size) {
            return Err(Error::invalid(format!(
                "toy scorer expects (3, {size}, {size}) images, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    fn red_mean(image: &Image, zone: Rect) -> f64 {
        zone.pixels().map(|(y, x)| image.get(0, y, x)).sum::<f64>() / zone.area() as f64
    }

    /// Zone part of the estimate and its `d / d(red pixel)` (uniform over the zone).
    fn zone_estimate(&self, image: &Image, kind: PropertyKind) -> (f64, f64) {
        let zone = self.layout.zone(kind);
        let n = zone.area() as f64;
        let mean = Self::red_mean(image, zone);
        match kind {
            PropertyKind::Tint => {
                let span = TINT_HI[0] - TINT_LO[0];
                ((mean - TINT_LO[0]) / span, 1.0 / (span * n))
            }
            PropertyKind::Stripes => {
                ((mean - STRIPE_BASE) / STRIPE_AMP, 1.0 / (STRIPE_AMP * n))
            }
            PropertyKind::Emblem => {
                let geom = EmblemGeometry::new(zone);
                let coverage = ((mean - EMBLEM_BASE) / EMBLEM_FG[0]).max(1e-12);
                let radius = (coverage * n / PI).sqrt();
                let span = geom.r_max - geom.r_min;
                let dq_dcov = (n / PI) / (2.0 * radius) / span;
                ((radius - geom.r_min) / span, dq_dcov / (EMBLEM_FG[0] * n))
            }
        }
    }

    fn estimate(&self, image: &Image, kind: PropertyKind) -> f64 {
        let (q, _) = self.zone_estimate(image, kind);
        match self.leaks.get(&kind) {
            Some(psi) => {
                q + self
                    .layout
                    .texture
                    .pixels()
                    .zip(psi)
                    .map(|((y, x), w)| (image.get(0, y, x) - 0.5) * w)
                    .sum::<f64>()
            }
            None => q,
        }
    }

    /// Adds `g * d q / d image` into `out`.
    fn add_estimate_grad(&self, image: &Image, kind: PropertyKind, g: f64, out: &mut Image) {
        let (_, dq) = self.zone_estimate(image, kind);
        for (y, x) in self.layout.zone(kind).pixels() {
            out.set(0, y, x, out.get(0, y, x) + g * dq);
        }
        if let Some(psi) = self.leaks.get(&kind) {
            for ((y, x), w) in self.layout.texture.pixels().zip(psi) {
                out.set(0, y, x, out.get(0, y, x) + g * w);
            }
        }
    }

    /// The scorer's property estimate for a toy image.
    pub fn property_estimate(&self, image: &Image, kind: PropertyKind) -> Result<f64> {
        self.check_image(image)?;
        Ok(self.estimate(image, kind))
    }
}

impl ImageTextScorer for ToyScorer {
    fn name(&self) -> &str {
        "toy-scorer"
    }

    fn score(&self, image: &Image, prompts: &[String]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let mut cache: HashMap<PropertyKind, f64> = HashMap::new();
        prompts
            .iter()
            .map(|prompt| {
                let probe = self.probe(prompt)?;
                let q = *cache
                    .entry(probe.kind)
                    .or_insert_with(|| self.estimate(image, probe.kind));
                Ok(-self.world.scorer_sharpness * (q - probe.value).powi(2))
            })
            .collect()
    }

    fn as_differentiable(&self) -> Option<&dyn DifferentiableScorer> {
        Some(self)
    }
}

impl DifferentiableScorer for ToyScorer {
    fn score_vjp(&self, image: &Image, prompts: &[String], grad_scores: &[f64]) -> Result<Image> {
        self.check_image(image)?;
        if grad_scores.len() != prompts.len() {
            return Err(Error::invalid("one score gradient per prompt required"));
        }
        let mut dq: HashMap<PropertyKind, f64> = HashMap::new();
        for (prompt, &g) in prompts.iter().zip(grad_scores) {
            let probe = self.probe(prompt)?;
            let q = self.estimate(image, probe.kind);
            *dq.entry(probe.kind).or_default() +=
                g * -2.0 * self.world.scorer_sharpness * (q - probe.value);
        }
        let (c, h, w) = image.shape();
        let mut out = Image::zeros(c, h, w);
        for (kind, g) in dq {
            self.add_estimate_grad(image, kind, g, &mut out);
        }
        Ok(out)
    }
}
