//! Training-time augmentation policies.
//!
//! Five policies: none, horizontal flip, geometric (flip, crop, zoom,
//! translation), color (brightness, contrast, Gaussian blur, red-channel
//! gain), and geometric followed by color. Every random parameter is drawn
//! from the supplied [`Rng`] in a fixed order.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::resize_bilinear;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    None,
    FlipOnly,
    Geometric,
    Color,
    GeometricAndColor,
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "flip" | "flip_only" => Self::FlipOnly,
            "geometric" => Self::Geometric,
            "color" | "colour" => Self::Color,
            "both" | "geometric_and_color" => Self::GeometricAndColor,
            other => return Err(Error::Invalid(format!("unknown augmentation `{other}`"))),
        })
    }
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 5] =
        [Self::None, Self::FlipOnly, Self::Geometric, Self::Color, Self::GeometricAndColor];

    pub fn flag(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::FlipOnly => "flip",
            Self::Geometric => "geometric",
            Self::Color => "color",
            Self::GeometricAndColor => "both",
        }
    }
}

/// Sampling ranges `[lo, hi)` for every transform parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub flip_probability: f64,
    /// Additive shift on `[0, 1]` samples.
    pub brightness: (f64, f64),
    /// Scale about the patch mean.
    pub contrast: (f64, f64),
    /// Gaussian blur sigma in pixels; kernel radius is `ceil(3 sigma)`.
    pub blur_sigma: (f64, f64),
    /// Multiplicative gain on channel 0.
    pub red_gain: (f64, f64),
    /// Side length of the random crop as a fraction of the patch.
    pub crop_fraction: (f64, f64),
    pub zoom: (f64, f64),
    /// Shift as a fraction of each dimension.
    pub translate: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            brightness: (-0.1, 0.1),
            contrast: (0.8, 1.2),
            blur_sigma: (0.0, 1.5),
            red_gain: (0.8, 1.2),
            crop_fraction: (0.85, 1.0),
            zoom: (0.9, 1.1),
            translate: (-0.1, 0.1),
        }
    }
}

impl AugmentParams {
    /// Every range collapsed onto its no-op value.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            blur_sigma: (0.0, 0.0),
            red_gain: (1.0, 1.0),
            crop_fraction: (1.0, 1.0),
            zoom: (1.0, 1.0),
            translate: (0.0, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    #[serde(default)]
    pub params: AugmentParams,
}

impl AugmentPolicy {
    pub fn new(kind: AugmentKind) -> Self {
        Self { kind, params: AugmentParams::default() }
    }

    pub fn none() -> Self {
        Self::new(AugmentKind::None)
    }
}

fn check_hwc<T: Scalar>(patch: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match patch.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Shape(format!("augmentation expects (H, W, C), got {s:?}"))),
    }
}

fn check_unit_range<T: Scalar>(patch: &Tensor<T>) -> Result<()> {
    if patch.data().iter().all(|&v| v >= T::zero() && v <= T::one()) {
        Ok(())
    } else {
        Err(Error::Invalid("patch values must lie in [0, 1]".into()))
    }
}

pub fn horizontal_flip<T: Scalar>(patch: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = check_hwc(patch)?;
    let src = patch.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * c;
            out.extend_from_slice(&src[i..i + c]);
        }
    }
    Tensor::new(patch.shape().to_vec(), out)
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` is a no-op.
pub fn gaussian_blur<T: Scalar>(patch: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (h, w, c) = check_hwc(patch)?;
    if sigma <= 0.0 {
        return Ok(patch.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = raw.iter().sum();
    let kernel: Vec<T> = raw.iter().map(|&v| T::of_f64(v / norm)).collect();

    let pass = |src: &[T], along_x: bool| -> Vec<T> {
        let mut dst = vec![T::zero(); src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = T::zero();
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let d = ki as isize - radius;
                        let (sy, sx) = if along_x {
                            (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kv * src[(sy * w + sx) * c + ch];
                    }
                    dst[(y * w + x) * c + ch] = acc;
                }
            }
        }
        dst
    };
    let horizontal = pass(patch.data(), true);
    Tensor::new(patch.shape().to_vec(), pass(&horizontal, false))
}

/// Sampled color transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: f64,
    pub red_gain: f64,
}

impl ColorJitter {
    pub fn sample(params: &AugmentParams, rng: &mut Rng) -> Self {
        Self {
            brightness: rng.uniform_in(params.brightness.0, params.brightness.1),
            contrast: rng.uniform_in(params.contrast.0, params.contrast.1),
            blur_sigma: rng.uniform_in(params.blur_sigma.0, params.blur_sigma.1),
            red_gain: rng.uniform_in(params.red_gain.0, params.red_gain.1),
        }
    }

    /// Brightness shift, contrast about the patch mean, blur, red gain, then
    /// a clamp to `[0, 1]`.
    pub fn apply<T: Scalar>(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, c) = check_hwc(patch)?;
        check_unit_range(patch)?;
        let shift = T::of_f64(self.brightness);
        let mut out = patch.map(|v| v + shift);
        // skipped at exactly 1 so the identity stays bit-exact
        if self.contrast != 1.0 {
            let n = T::of_f64(out.len() as f64);
            let mean = out.data().iter().copied().sum::<T>() / n;
            let contrast = T::of_f64(self.contrast);
            out.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
        }
        let mut out = gaussian_blur(&out, self.blur_sigma)?;
        let gain = T::of_f64(self.red_gain);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if i % c == 0 {
                *v *= gain;
            }
            *v = v.max(T::zero()).min(T::one());
        }
        Ok(out)
    }
}

pub fn apply_color<T: Scalar>(patch: &Tensor<T>, params: &AugmentParams, rng: &mut Rng) -> Result<Tensor<T>> {
    ColorJitter::sample(params, rng).apply(patch)
}

/// Sampled geometric transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricJitter {
    pub flip: bool,
    pub crop_fraction: f64,
    /// Crop window origin as a fraction of the available slack, in `[0, 1]`.
    pub crop_origin: (f64, f64),
    pub zoom: f64,
    /// `(dx, dy)` as fractions of width and height.
    pub translate: (f64, f64),
}

impl GeometricJitter {
    pub fn sample(params: &AugmentParams, rng: &mut Rng) -> Self {
        Self {
            flip: rng.bernoulli(params.flip_probability),
            crop_fraction: rng.uniform_in(params.crop_fraction.0, params.crop_fraction.1),
            crop_origin: (rng.uniform(), rng.uniform()),
            zoom: rng.uniform_in(params.zoom.0, params.zoom.1),
            translate: (
                rng.uniform_in(params.translate.0, params.translate.1),
                rng.uniform_in(params.translate.0, params.translate.1),
            ),
        }
    }

    /// Flip, crop-and-resize-back, then zoom about the centre combined with
    /// translation; samples falling outside replicate the nearest edge.
    pub fn apply<T: Scalar>(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = check_hwc(patch)?;
        let mut out = if self.flip { horizontal_flip(patch)? } else { patch.clone() };

        let cw = ((self.crop_fraction * w as f64).round() as usize).clamp(1, w);
        let ch = ((self.crop_fraction * h as f64).round() as usize).clamp(1, h);
        if cw != w || ch != h {
            let ox = (self.crop_origin.0 * (w - cw) as f64).round() as usize;
            let oy = (self.crop_origin.1 * (h - ch) as f64).round() as usize;
            let src = out.data();
            let mut crop = Vec::with_capacity(cw * ch * c);
            for y in oy..oy + ch {
                let start = (y * w + ox) * c;
                crop.extend_from_slice(&src[start..start + cw * c]);
            }
            out = resize_bilinear(&Tensor::new(vec![ch, cw, c], crop)?, w, h)?;
        }

        let (dx, dy) = (self.translate.0 * w as f64, self.translate.1 * h as f64);
        if self.zoom != 1.0 || dx != 0.0 || dy != 0.0 {
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            let src = out.data();
            let mut warped = Vec::with_capacity(src.len());
            for y in 0..h {
                let sy = ((y as f64 - cy) / self.zoom + cy - dy).clamp(0.0, (h - 1) as f64);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let fy = T::of_f64(sy - y0 as f64);
                for x in 0..w {
                    let sx = ((x as f64 - cx) / self.zoom + cx - dx).clamp(0.0, (w - 1) as f64);
                    let x0 = sx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = T::of_f64(sx - x0 as f64);
                    for ch in 0..c {
                        let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                        let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                        let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                        warped.push(top + (bottom - top) * fy);
                    }
                }
            }
            out = Tensor::new(vec![h, w, c], warped)?;
        }
        Ok(out)
    }
}

pub fn apply_geometric<T: Scalar>(patch: &Tensor<T>, params: &AugmentParams, rng: &mut Rng) -> Result<Tensor<T>> {
    check_hwc(patch)?;
    GeometricJitter::sample(params, rng).apply(patch)
}

pub fn apply_policy<T: Scalar>(patch: &Tensor<T>, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Tensor<T>> {
    let p = &policy.params;
    match policy.kind {
        AugmentKind::None => {
            check_hwc(patch)?;
            Ok(patch.clone())
        }
        AugmentKind::FlipOnly => {
            if rng.bernoulli(p.flip_probability) {
                horizontal_flip(patch)
            } else {
                check_hwc(patch)?;
                Ok(patch.clone())
            }
        }
        AugmentKind::Geometric => apply_geometric(patch, p, rng),
        AugmentKind::Color => apply_color(patch, p, rng),
        AugmentKind::GeometricAndColor => {
            let g = apply_geometric(patch, p, rng)?;
            apply_color(&g, p, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_patch(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = Rng::seeded(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.uniform())
    }

    #[test]
    fn flip_reverses_columns() {
        let t = Tensor::<f64>::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(horizontal_flip(&t).unwrap().data(), &[3.0, 2.0, 1.0]);
        let p = random_patch(1, 5, 7);
        assert_eq!(horizontal_flip(&horizontal_flip(&p).unwrap()).unwrap(), p);
        let sym = Tensor::<f64>::from_fn(&[2, 4, 3], |i| {
            let x = (i / 3) % 4;
            x.min(3 - x) as f64
        });
        assert_eq!(horizontal_flip(&sym).unwrap(), sym);
        assert!(horizontal_flip(&Tensor::<f64>::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn identity_color_is_noop() {
        let p = random_patch(2, 6, 6);
        let jitter = ColorJitter { brightness: 0.0, contrast: 1.0, blur_sigma: 0.0, red_gain: 1.0 };
        assert_eq!(jitter.apply(&p).unwrap(), p);
        let mut rng = Rng::seeded(0);
        assert_eq!(apply_color(&p, &AugmentParams::identity(), &mut rng).unwrap(), p);
    }

    #[test]
    fn brightness_on_single_pixel() {
        let p = Tensor::<f64>::new(vec![1, 1, 3], vec![0.5; 3]).unwrap();
        let jitter = ColorJitter { brightness: 0.1, contrast: 1.0, blur_sigma: 0.0, red_gain: 1.0 };
        for v in jitter.apply(&p).unwrap().data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let p = Tensor::<f64>::full(&[9, 7, 3], 0.25);
        for sigma in [0.3, 1.0, 1.5, 4.0] {
            let out = gaussian_blur(&p, sigma).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn blur_preserves_mean_with_constant_border() {
        let sigma = 1.5;
        let border = (3.0 * sigma as f64).ceil() as usize;
        let (h, w) = (24, 24);
        let mut rng = Rng::seeded(5);
        let p = Tensor::<f64>::from_fn(&[h, w, 3], |i| {
            let (y, x) = (i / 3 / w, i / 3 % w);
            let inner = y >= border && y < h - border && x >= border && x < w - border;
            if inner {
                rng.uniform()
            } else {
                0.4
            }
        });
        let out = gaussian_blur(&p, sigma).unwrap();
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.len() as f64;
        assert!((mean(&out) - mean(&p)).abs() < 1e-6);
    }

    #[test]
    fn color_rejects_out_of_range_input() {
        let p = Tensor::<f64>::full(&[2, 2, 3], 1.5);
        assert!(apply_color(&p, &AugmentParams::default(), &mut Rng::seeded(0)).is_err());
    }

    #[test]
    fn identity_geometry_is_noop() {
        let p = random_patch(3, 8, 10);
        let mut rng = Rng::seeded(4);
        assert_eq!(apply_geometric(&p, &AugmentParams::identity(), &mut rng).unwrap(), p);
        let shifted = GeometricJitter {
            flip: false,
            crop_fraction: 1.0,
            crop_origin: (0.0, 0.0),
            zoom: 1.0,
            translate: (0.1, -0.1),
        };
        let constant = Tensor::<f64>::full(&[8, 10, 3], 0.7);
        assert!(shifted.apply(&constant).unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn translation_by_whole_pixels_shifts_content() {
        let p = random_patch(9, 4, 10);
        let shifted = GeometricJitter {
            flip: false,
            crop_fraction: 1.0,
            crop_origin: (0.0, 0.0),
            zoom: 1.0,
            translate: (0.2, 0.0),
        }
        .apply(&p)
        .unwrap();
        // two pixel shift right, left edge replicated
        for y in 0..4 {
            for ch in 0..3 {
                assert_eq!(shifted.get(&[y, 5, ch]), p.get(&[y, 3, ch]));
                assert_eq!(shifted.get(&[y, 0, ch]), p.get(&[y, 0, ch]));
                assert_eq!(shifted.get(&[y, 1, ch]), p.get(&[y, 0, ch]));
            }
        }
    }

    #[test]
    fn policy_dispatch() {
        let p = random_patch(6, 8, 8);
        let mut rng = Rng::seeded(1);
        assert_eq!(apply_policy(&p, &AugmentPolicy::none(), &mut rng).unwrap(), p);
        let forced = AugmentPolicy {
            kind: AugmentKind::FlipOnly,
            params: AugmentParams { flip_probability: 1.0, ..AugmentParams::default() },
        };
        assert_eq!(apply_policy(&p, &forced, &mut rng).unwrap(), horizontal_flip(&p).unwrap());
        let both = AugmentPolicy { kind: AugmentKind::GeometricAndColor, params: AugmentParams::identity() };
        assert_eq!(apply_policy(&p, &both, &mut rng).unwrap(), p);
        for k in AugmentKind::ALL {
            assert_eq!(k.flag().parse::<AugmentKind>().unwrap(), k);
        }
    }

    proptest! {
        #[test]
        fn outputs_keep_shape_range_and_are_deterministic(
            seed in any::<u64>(), h in 2usize..12, w in 2usize..12, kind in 0usize..5
        ) {
            let p = random_patch(seed ^ 0x55, h, w);
            let policy = AugmentPolicy::new(AugmentKind::ALL[kind]);
            let a = apply_policy(&p, &policy, &mut Rng::seeded(seed)).unwrap();
            let b = apply_policy(&p, &policy, &mut Rng::seeded(seed)).unwrap();
            prop_assert_eq!(a.shape(), p.shape());
            prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
