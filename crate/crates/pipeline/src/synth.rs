//! Synthetic survey frames with class-specific textures.
//!
//! Every class has its own mean hue, stripe pattern and blob density, so
//! classes are separable by construction. Each sub-area adds a brightness
//! offset shared by all of its frames to imitate site-to-site shift.

use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use patchgrid_core::ingest::build_manifest;
use patchgrid_core::{ImageBuffer, Manifest, Rng, Taxonomy, TaxonomyMode};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    pub saturation: f64,
    pub value: f64,
    /// Per-frame hue jitter, degrees (uniform, symmetric).
    pub hue_jitter: f64,
    /// Amplitude of the stripe modulation of the value channel.
    pub stripe_contrast: f64,
    /// Value added inside blobs.
    pub blob_contrast: f64,
    /// Standard deviation of per-pixel value noise.
    pub noise: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { saturation: 0.55, value: 0.55, hue_jitter: 8.0, stripe_contrast: 0.12, blob_contrast: 0.15, noise: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub taxonomy: TaxonomyMode,
    pub sub_areas: usize,
    pub images_per_sub_area: usize,
    pub width: u32,
    pub height: u32,
    /// Sub-area brightness offsets are drawn from U(-shift, shift).
    pub brightness_shift: f64,
    pub texture: TextureParams,
    /// Class whose odd-numbered frames come from a second, visually
    /// distinct sub-population.
    pub split_class: Option<usize>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            taxonomy: TaxonomyMode::Four,
            sub_areas: 10,
            images_per_sub_area: 5,
            width: 256,
            height: 160,
            brightness_shift: 0.0,
            texture: TextureParams::default(),
            split_class: None,
            seed: 0,
        }
    }
}

/// Per-class texture layout.
#[derive(Clone, Copy, Debug)]
struct ClassLook {
    hue: f64,
    /// Cycles per pixel; 0 disables stripes.
    stripe_frequency: f64,
    /// Stripe direction, degrees from the x axis.
    stripe_angle: f64,
    /// Blobs per 1000 pixels.
    blob_density: f64,
    blob_radius: f64,
}

fn class_look(index: usize, count: usize) -> ClassLook {
    let hue = 360.0 * index as f64 / count as f64 + 30.0;
    let (stripe_frequency, stripe_angle, blob_density, blob_radius) = match index {
        0 => (0.22, 80.0, 0.0, 0.0),
        1 => (0.11, 45.0, 0.6, 2.0),
        2 => (0.0, 0.0, 2.5, 4.0),
        3 => (0.0, 0.0, 0.3, 1.5),
        _ => (0.03, 0.0, 0.0, 0.0),
    };
    ClassLook { hue, stripe_frequency, stripe_angle, blob_density, blob_radius }
}

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let classes = Taxonomy::new(self.taxonomy).len();
        if self.sub_areas == 0 || self.images_per_sub_area == 0 {
            return Err(PipelineError::Config("sub_areas and images_per_sub_area must be positive".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(PipelineError::Config("frames must be at least 8x8".into()));
        }
        if !(0.0..=1.0).contains(&self.brightness_shift) {
            return Err(PipelineError::Config("brightness_shift must be in [0, 1]".into()));
        }
        if self.split_class.is_some_and(|c| c >= classes) {
            return Err(PipelineError::Config("split_class out of range".into()));
        }
        Ok(())
    }

    pub fn sub_area_name(index: usize) -> String {
        format!("site{index:02}")
    }

    /// Brightness offset of every sub-area.
    pub fn offsets(&self) -> Vec<f64> {
        let stream = Rng::seeded(self.seed).child(1);
        (0..self.sub_areas)
            .map(|a| stream.child(a as u64).uniform_in(-self.brightness_shift, self.brightness_shift))
            .collect()
    }

    /// Renders one frame.
    pub fn frame(&self, class: usize, sub_area: usize, image: usize) -> ImageBuffer {
        let classes = Taxonomy::new(self.taxonomy).len();
        let mut look = class_look(class, classes);
        if self.split_class == Some(class) && image % 2 == 1 {
            look.hue += 40.0;
            look.stripe_angle += 90.0;
            look.stripe_frequency = if look.stripe_frequency > 0.0 { look.stripe_frequency * 0.5 } else { 0.08 };
        }
        let offset = self.offsets()[sub_area];
        let t = self.texture;
        let mut rng = Rng::seeded(self.seed).child(2).child(class as u64).child(sub_area as u64).child(image as u64);
        let hue = look.hue + rng.uniform_in(-t.hue_jitter, t.hue_jitter);
        let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
        let angle = (look.stripe_angle + rng.uniform_in(-10.0, 10.0)).to_radians();
        let (w, h) = (self.width as f64, self.height as f64);
        let blobs: Vec<(f64, f64, f64)> = (0..(look.blob_density * w * h / 1000.0).round() as usize)
            .map(|_| {
                let r = look.blob_radius * rng.uniform_in(0.7, 1.3);
                (rng.uniform_in(0.0, w), rng.uniform_in(0.0, h), r * r)
            })
            .collect();
        // blob mask via per-blob bounding boxes
        let mut bump = vec![0.0f64; (self.width * self.height) as usize];
        for &(cx, cy, r2) in &blobs {
            let r = r2.sqrt();
            let (x0, x1) = ((cx - r).floor().max(0.0) as u32, (cx + r).ceil().min(w - 1.0) as u32);
            let (y0, y1) = ((cy - r).floor().max(0.0) as u32, (cy + r).ceil().min(h - 1.0) as u32);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r2 {
                        bump[(y * self.width + x) as usize] = t.blob_contrast;
                    }
                }
            }
        }
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut pixels = Vec::with_capacity(bump.len() * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let stripe = if look.stripe_frequency > 0.0 {
                    let u = x as f64 * ca + y as f64 * sa;
                    t.stripe_contrast * (std::f64::consts::TAU * look.stripe_frequency * u + phase).sin()
                } else {
                    0.0
                };
                let v =
                    (t.value + stripe + bump[(y * self.width + x) as usize] + t.noise * rng.normal()).clamp(0.0, 1.0);
                for c in hsv_to_rgb(hue, t.saturation, v) {
                    pixels.push(((c + offset).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        ImageBuffer::new(self.width, self.height, pixels).expect("buffer sized from dimensions")
    }

    /// Writes `out/<class>/<site>/imgNNN.png` plus a `meta.json` per sub-area
    /// directory and returns the (unassigned) manifest of the tree.
    pub fn generate(&self, out: &Path) -> Result<Manifest> {
        self.validate()?;
        let taxonomy = Taxonomy::new(self.taxonomy);
        for (class, name) in taxonomy.names().iter().enumerate() {
            for area in 0..self.sub_areas {
                let dir = out.join(name).join(Self::sub_area_name(area));
                fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
                let date = site_date(area);
                let meta = if taxonomy.is_seagrass(class) {
                    serde_json::json!({ "date": date, "density": "dense" })
                } else {
                    serde_json::json!({ "date": date })
                };
                let meta_path = dir.join(patchgrid_core::ingest::SUBAREA_META);
                fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
                    .map_err(|e| PipelineError::io(&meta_path, e))?;
                for image in 0..self.images_per_sub_area {
                    self.frame(class, area, image).save(&dir.join(format!("img{image:03}.png")))?;
                }
            }
        }
        Ok(build_manifest(out, taxonomy)?)
    }
}

fn site_date(days: usize) -> String {
    let base = NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date");
    (base + Days::new(days as u64)).to_string()
}
