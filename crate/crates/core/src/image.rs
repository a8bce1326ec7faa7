//! RGB image buffer with values in [0,1], plus PNG I/O and bilinear resampling.

use ndarray::Array3;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode/encode error at {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("empty image ({height}x{width})")]
    EmptyImage { height: usize, width: usize },
    #[error("region x={x} y={y} w={w} h={h} outside image {width}x{height}")]
    RegionOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("degenerate crop region {w}x{h} (needs at least 2x2 pixels)")]
    DegenerateRegion { w: usize, h: usize },
}

/// Interleaved RGB pixels in row-major `(height, width, 3)` order, f64 in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        debug_assert_eq!(data.shape()[2], 3, "images are 3-channel RGB");
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                img.put(y, x, rgb);
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        [
            self.data[[y, x, 0]],
            self.data[[y, x, 1]],
            self.data[[y, x, 2]],
        ]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.iter().enumerate() {
            self.data[[y, x, c]] = *v;
        }
    }

    /// Clamp every value into [0,1].
    pub fn clamped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Codec {
                path: path.to_path_buf(),
                source,
            })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((h, w, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(Self { data })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| ImageError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        let (h, w) = (self.height(), self.width());
        let mut out = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = self.get(y, x);
                out.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        to_u8(px[0]),
                        to_u8(px[1]),
                        to_u8(px[2]),
                    ]),
                );
            }
        }
        out.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImageError::Codec {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Read only the dimensions of a PNG on disk as (width, height).
    pub fn png_dimensions(path: &Path) -> Result<(usize, usize), ImageError> {
        let (w, h) = image::image_dimensions(path).map_err(|source| ImageError::Codec {
            path: path.to_path_buf(),
            source,
        })?;
        Ok((w as usize, h as usize))
    }

    /// Copy the `w x h` region at `(x, y)` out of this image.
    pub fn region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image, ImageError> {
        if x + w > self.width() || y + h > self.height() || w == 0 || h == 0 {
            return Err(ImageError::RegionOutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width(),
                height: self.height(),
            });
        }
        let mut out = Image::zeros(h, w);
        for yy in 0..h {
            for xx in 0..w {
                out.put(yy, xx, self.get(y + yy, x + xx));
            }
        }
        Ok(out)
    }

    /// Overwrite the region at `(x, y)` with `src` (hard paste, no blending).
    pub fn paste(&mut self, src: &Image, x: usize, y: usize) -> Result<(), ImageError> {
        if x + src.width() > self.width() || y + src.height() > self.height() {
            return Err(ImageError::RegionOutOfBounds {
                x,
                y,
                w: src.width(),
                h: src.height(),
                width: self.width(),
                height: self.height(),
            });
        }
        for yy in 0..src.height() {
            for xx in 0..src.width() {
                self.put(y + yy, x + xx, src.get(yy, xx));
            }
        }
        Ok(())
    }

    /// Bilinear resize using half-pixel-center coordinate mapping:
    /// src = (dst + 0.5) * (src_size / dst_size) - 0.5, clamped at borders.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Image, ImageError> {
        if self.height() == 0 || self.width() == 0 || out_h == 0 || out_w == 0 {
            return Err(ImageError::EmptyImage {
                height: out_h,
                width: out_w,
            });
        }
        let (sh, sw) = (self.height(), self.width());
        let scale_y = sh as f64 / out_h as f64;
        let scale_x = sw as f64 / out_w as f64;
        let mut out = Image::zeros(out_h, out_w);
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let fx = sx - x0 as f64;
                let mut px = [0.0; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    let top = self.data[[y0, x0, c]] * (1.0 - fx) + self.data[[y0, x1, c]] * fx;
                    let bot = self.data[[y1, x0, c]] * (1.0 - fx) + self.data[[y1, x1, c]] * fx;
                    *v = top * (1.0 - fy) + bot * fy;
                }
                out.put(oy, ox, px);
            }
        }
        Ok(out)
    }

    /// Max absolute per-pixel difference against another image of equal size.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.data.shape(), other.data.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
