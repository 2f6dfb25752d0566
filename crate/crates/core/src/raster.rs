//! Planar (channel-major) raster images and window-based resampling.
//!
//! All sampling positions are computed in `f64` regardless of the raster
//! scalar so that identity windows reproduce the source bit-for-bit and
//! crop geometry does not drift at large coordinates.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: expected {expected} image, found {found}")]
    ChannelMismatch {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("raster dimensions {h}x{w} with {c} channels do not match buffer of {len} values")]
    BufferSize { c: usize, h: usize, w: usize, len: usize },
    #[error("invalid crop window: {0}")]
    BadWindow(String),
}

/// Planar raster: `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Raster<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self, RasterError> {
        if data.len() != channels * height * width {
            return Err(RasterError::BufferSize {
                c: channels,
                h: height,
                w: width,
                len: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Loads an RGB PNG as a 3-channel raster with values in `[0, 1]`.
    pub fn load_png_rgb(path: &Path) -> Result<Self, RasterError> {
        let img = open_image(path)?;
        let rgb: RgbImage = match img {
            image::DynamicImage::ImageRgb8(r) => r,
            image::DynamicImage::ImageLuma8(g) => {
                image::DynamicImage::ImageLuma8(g).to_rgb8()
            }
            other => {
                return Err(RasterError::ChannelMismatch {
                    path: path.display().to_string(),
                    expected: "8-bit RGB or grayscale",
                    found: format!("{:?}", other.color()),
                })
            }
        };
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Self::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let p = rgb.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, y, x, u8_to_unit(p.0[c]));
                }
            }
        }
        Ok(out)
    }

    /// Loads a grayscale PNG as a 1-channel raster with values in `[0, 1]`.
    pub fn load_png_gray(path: &Path) -> Result<Self, RasterError> {
        let img = open_image(path)?;
        let gray: GrayImage = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(RasterError::ChannelMismatch {
                    path: path.display().to_string(),
                    expected: "8-bit grayscale",
                    found: format!("{:?}", other.color()),
                })
            }
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let mut out = Self::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(0, y, x, u8_to_unit(gray.get_pixel(x as u32, y as u32).0[0]));
            }
        }
        Ok(out)
    }

    /// Saves a 3-channel raster as RGB PNG; values are clamped to `[0, 1]`
    /// and rounded so that a load/save cycle of 8-bit data is exact.
    pub fn save_png_rgb(&self, path: &Path) -> Result<(), RasterError> {
        assert_eq!(self.channels, 3, "save_png_rgb needs 3 channels");
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    unit_to_u8(self.get(0, y, x)),
                    unit_to_u8(self.get(1, y, x)),
                    unit_to_u8(self.get(2, y, x)),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|source| RasterError::Write {
            path: path.display().to_string(),
            source,
        })
    }

    /// Saves a 1-channel raster as grayscale PNG (clamped and rounded).
    pub fn save_png_gray(&self, path: &Path) -> Result<(), RasterError> {
        assert_eq!(self.channels, 1, "save_png_gray needs 1 channel");
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                img.put_pixel(x as u32, y as u32, image::Luma([unit_to_u8(self.get(0, y, x))]));
            }
        }
        img.save(path).map_err(|source| RasterError::Write {
            path: path.display().to_string(),
            source,
        })
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage, RasterError> {
    ImageReader::open(path)
        .map_err(|e| RasterError::Read {
            path: path.display().to_string(),
            source: image::ImageError::IoError(e),
        })?
        .decode()
        .map_err(|source| RasterError::Read {
            path: path.display().to_string(),
            source,
        })
}

#[inline]
fn u8_to_unit<T: Real>(v: u8) -> T {
    T::from_f64_approx(v as f64 / 255.0)
}

#[inline]
fn unit_to_u8<T: Real>(v: T) -> u8 {
    let scaled = (v.to_f64_lossless() * 255.0).round();
    scaled.clamp(0.0, 255.0) as u8
}

/// Integer label raster (one byte per pixel), used for parse maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, fill: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, RasterError> {
        if labels.len() != height * width {
            return Err(RasterError::BufferSize {
                c: 1,
                h: height,
                w: width,
                len: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// Loads a grayscale PNG whose pixel values are label ids (no scaling).
    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = open_image(path)?;
        let gray: GrayImage = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(RasterError::ChannelMismatch {
                    path: path.display().to_string(),
                    expected: "8-bit grayscale label map",
                    found: format!("{:?}", other.color()),
                })
            }
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Ok(Self {
            height: h,
            width: w,
            labels: gray.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("label buffer matches dimensions");
        img.save(path).map_err(|source| RasterError::Write {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Rectangular source window of a crop: `height x width` pixels starting at
/// `(top, left)` inside a `src_h x src_w` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub src_h: usize,
    pub src_w: usize,
}

impl CropWindow {
    /// The identity window covering a whole image.
    pub fn full(src_h: usize, src_w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: src_h,
            width: src_w,
            src_h,
            src_w,
        }
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if self.height == 0 || self.width == 0 {
            return Err(RasterError::BadWindow(format!(
                "window {}x{} has zero extent",
                self.height, self.width
            )));
        }
        if self.top + self.height > self.src_h || self.left + self.width > self.src_w {
            return Err(RasterError::BadWindow(format!(
                "window {}x{} at ({}, {}) exceeds source {}x{}",
                self.height, self.width, self.top, self.left, self.src_h, self.src_w
            )));
        }
        Ok(())
    }

    /// Fraction of the source area covered by the window.
    pub fn area_fraction(&self) -> f64 {
        (self.height * self.width) as f64 / (self.src_h * self.src_w) as f64
    }
}

/// Bilinearly resamples `win` out of `src` to an `out_h x out_w` raster.
///
/// Destination pixel centers map to source coordinates
/// `top + (i + 0.5) * height / out_h - 0.5`; samples are clamped to the
/// window so no pixel outside it influences the output. An identity window
/// at unchanged size returns the source values exactly.
pub fn crop_resize_bilinear<T: Real>(
    src: &Raster<T>,
    win: &CropWindow,
    out_h: usize,
    out_w: usize,
) -> Result<Raster<T>, RasterError> {
    win.validate()?;
    if src.height() != win.src_h || src.width() != win.src_w {
        return Err(RasterError::BadWindow(format!(
            "window declares source {}x{} but raster is {}x{}",
            win.src_h,
            win.src_w,
            src.height(),
            src.width()
        )));
    }
    let mut out = Raster::zeros(src.channels(), out_h, out_w);
    let y_ratio = win.height as f64 / out_h as f64;
    let x_ratio = win.width as f64 / out_w as f64;
    let y_lo = win.top as f64;
    let y_hi = (win.top + win.height - 1) as f64;
    let x_lo = win.left as f64;
    let x_hi = (win.left + win.width - 1) as f64;
    for i in 0..out_h {
        let sy = (win.top as f64 + (i as f64 + 0.5) * y_ratio - 0.5).clamp(y_lo, y_hi);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(win.top + win.height - 1);
        let fy = sy - y0 as f64;
        for j in 0..out_w {
            let sx = (win.left as f64 + (j as f64 + 0.5) * x_ratio - 0.5).clamp(x_lo, x_hi);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(win.left + win.width - 1);
            let fx = sx - x0 as f64;
            for c in 0..src.channels() {
                let v00 = src.get(c, y0, x0).to_f64_lossless();
                let v01 = src.get(c, y0, x1).to_f64_lossless();
                let v10 = src.get(c, y1, x0).to_f64_lossless();
                let v11 = src.get(c, y1, x1).to_f64_lossless();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.set(c, i, j, T::from_f64_approx(top + (bot - top) * fy));
            }
        }
    }
    Ok(out)
}

/// Index of the source row/column for nearest-neighbor resampling:
/// `floor(origin + (i + 0.5) * ratio)`, clamped inside the window.
#[inline]
fn nearest_index(origin: usize, i: usize, ratio: f64, extent: usize) -> usize {
    let idx = (origin as f64 + (i as f64 + 0.5) * ratio).floor() as usize;
    idx.min(origin + extent - 1).max(origin)
}

/// Nearest-neighbor window resampling for label maps. Only labels present in
/// the window can appear in the output.
pub fn crop_resize_nearest_labels(
    src: &LabelMap,
    win: &CropWindow,
    out_h: usize,
    out_w: usize,
) -> Result<LabelMap, RasterError> {
    win.validate()?;
    if src.height() != win.src_h || src.width() != win.src_w {
        return Err(RasterError::BadWindow(format!(
            "window declares source {}x{} but label map is {}x{}",
            win.src_h,
            win.src_w,
            src.height(),
            src.width()
        )));
    }
    let mut out = LabelMap::new(out_h, out_w, 0);
    let y_ratio = win.height as f64 / out_h as f64;
    let x_ratio = win.width as f64 / out_w as f64;
    for i in 0..out_h {
        let sy = nearest_index(win.top, i, y_ratio, win.height);
        for j in 0..out_w {
            let sx = nearest_index(win.left, j, x_ratio, win.width);
            out.set(i, j, src.get(sy, sx));
        }
    }
    Ok(out)
}

/// Nearest-neighbor window resampling for rasters (used for binary masks,
/// where bilinear blending would invent intermediate values).
pub fn crop_resize_nearest<T: Real>(
    src: &Raster<T>,
    win: &CropWindow,
    out_h: usize,
    out_w: usize,
) -> Result<Raster<T>, RasterError> {
    win.validate()?;
    if src.height() != win.src_h || src.width() != win.src_w {
        return Err(RasterError::BadWindow(format!(
            "window declares source {}x{} but raster is {}x{}",
            win.src_h,
            win.src_w,
            src.height(),
            src.width()
        )));
    }
    let mut out = Raster::zeros(src.channels(), out_h, out_w);
    let y_ratio = win.height as f64 / out_h as f64;
    let x_ratio = win.width as f64 / out_w as f64;
    for i in 0..out_h {
        let sy = nearest_index(win.top, i, y_ratio, win.height);
        for j in 0..out_w {
            let sx = nearest_index(win.left, j, x_ratio, win.width);
            for c in 0..src.channels() {
                out.set(c, i, j, src.get(c, sy, sx));
            }
        }
    }
    Ok(out)
}

/// Whole-image bilinear resize (identity window).
pub fn resize_bilinear<T: Real>(src: &Raster<T>, out_h: usize, out_w: usize) -> Raster<T> {
    crop_resize_bilinear(src, &CropWindow::full(src.height(), src.width()), out_h, out_w)
        .expect("full window is always valid")
}

/// Normalized pixel-center coordinate of column/row `j` in a dimension of
/// `size` pixels: `2 * (j + 0.5) / size - 1`, so centers span
/// `[-1 + 1/size, 1 - 1/size]`.
#[inline]
pub fn norm_coord(j: f64, size: usize) -> f64 {
    2.0 * (j + 0.5) / size as f64 - 1.0
}

/// Inverse of [`norm_coord`]: pixel position of a normalized coordinate.
#[inline]
pub fn unnorm_coord(c: f64, size: usize) -> f64 {
    (c + 1.0) * size as f64 / 2.0 - 0.5
}
