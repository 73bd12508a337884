//! 8-bit RGB frames and bilinear resampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * Self::CHANNELS;
        if data.len() != expected {
            return Err(Error::Shape(format!("{width}x{height} RGB image needs {expected} bytes, got {}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    fn index(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * Self::CHANNELS
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the rectangle at `(x, y)` of size `width × height`.
    pub fn crop(&self, x: u32, y: u32, width: u32, height: u32) -> Result<Self> {
        if x + width > self.width || y + height > self.height {
            return Err(Error::Invalid(format!(
                "crop {width}x{height}+{x}+{y} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for row in y..y + height {
            let start = self.index(x, row);
            data.extend_from_slice(&self.data[start..start + width as usize * 3]);
        }
        Ok(Self { width, height, data })
    }

    /// Decodes a PNG or JPEG file into 8-bit RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.into_rgb8();
        let (width, height) = rgb.dimensions();
        Ok(Self { width, height, data: rgb.into_raw() })
    }

    /// Encodes by file extension (PNG or JPEG).
    pub fn save(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.data, self.width, self.height, image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// `(height, width, 3)` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let scale = T::of_f64(1.0 / 255.0);
        let data = self.data.iter().map(|&b| T::of_f64(b as f64) * scale).collect();
        Tensor::new(vec![self.height as usize, self.width as usize, Self::CHANNELS], data).expect("non-empty image")
    }

    /// Inverse of [`ImageBuffer::to_tensor`]: rounds and clamps to 8 bits.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.shape()[2] != Self::CHANNELS {
            return Err(Error::Shape(format!("expected (H, W, 3) tensor, got {:?}", t.shape())));
        }
        let data = t.data().iter().map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Self::new(t.shape()[1] as u32, t.shape()[0] as u32, data)
    }
}

/// Bilinear resampling of an `(H, W, C)` tensor to `(out_height, out_width, C)`.
///
/// Pixel centres sit at half-integer coordinates (corners not aligned):
/// output pixel `x` samples the source at `(x + 0.5) · W / out_width − 0.5`,
/// clamped to the image. Same-size resizes return an exact copy.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_width: usize, out_height: usize) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!("resize expects (H, W, C), got {:?}", input.shape())));
    }
    if out_width == 0 || out_height == 0 {
        return Err(Error::Invalid("resize target must be at least 1x1".into()));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h == out_height && w == out_width {
        return Ok(input.clone());
    }
    let src = input.data();
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, T::of_f64(s - lo as f64))
            })
            .collect()
    };
    let xs = axis(out_width, w);
    let ys = axis(out_height, h);
    let mut out = Vec::with_capacity(out_width * out_height * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(vec![out_height, out_width, c], out)
}

/// [`resize_bilinear`] on an 8-bit frame, returning unrounded values in `[0, 255]`.
pub fn resize_image(image: &ImageBuffer, out_width: usize, out_height: usize) -> Result<Tensor<f64>> {
    let t = Tensor::new(
        vec![image.height() as usize, image.width() as usize, 3],
        image.data().iter().map(|&b| b as f64).collect(),
    )
    .map_err(|_| Error::Invalid("zero-sized input image".into()))?;
    resize_bilinear(&t, out_width, out_height)
}
