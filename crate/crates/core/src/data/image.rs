use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image stored channel-major (`[3, H, W]`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Image(format!("empty image {height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::Image(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Batch-of-one tensor `[1, 3, H, W]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            [1, CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image dimensions are consistent")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [1, CHANNELS, h, w] | [CHANNELS, h, w] => {
                Self::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
            }
            ref other => Err(Error::shape("image", format!("expected [1,3,H,W], got {other:?}"))),
        }
    }

    /// Round every value to the nearest 8-bit level, as stored on disk.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize_level(*v) as f32 / 255.0;
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; CHANNELS * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = ::image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            for c in 0..CHANNELS {
                px.0[c] = quantize_level(self.get(c, y as usize, x as usize));
            }
        }
        out.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

fn quantize_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resize so the smaller side equals `target_small_side`, keeping the aspect ratio.
///
/// The longer side is rounded to the nearest integer. Sampling uses half-pixel centers.
pub fn resize_keep_aspect(image: &Image, target_small_side: usize) -> Image {
    let (h, w) = (image.height, image.width);
    let t = target_small_side.max(1);
    let (nh, nw) = if h <= w {
        (t, ((w as f64 * t as f64 / h as f64).round() as usize).max(t))
    } else {
        (((h as f64 * t as f64 / w as f64).round() as usize).max(t), t)
    };
    if (nh, nw) == (h, w) {
        return image.clone();
    }
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let sample_axis = |o: usize, scale: f64, extent: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..nh).map(|y| sample_axis(y, sy, h)).collect();
    let cols: Vec<_> = (0..nw).map(|x| sample_axis(x, sx, w)).collect();
    let mut data = Vec::with_capacity(CHANNELS * nh * nw);
    for c in 0..CHANNELS {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
                let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image::new(nh, nw, data).expect("resized dimensions are consistent")
}
