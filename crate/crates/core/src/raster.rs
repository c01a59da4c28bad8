//! Grayscale raster images normalized to `[0, 1]`, with the geometric
//! primitives the patch pipeline needs: bilinear resize, center rotation
//! and horizontal mirroring.
//!
//! Intensities are stored as `f64` in `[0, 1]`. Files are read and written
//! as 8-bit or 16-bit grayscale PNG/PGM/TIFF; loading divides by the
//! format's maximum value, saving quantizes to 16 bits.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

/// A single-channel intensity grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Raster {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "raster data length mismatch");
        Raster {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Reads a grayscale raster. 8-bit sources are divided by 255,
    /// 16-bit sources by 65535. Non-grayscale images are rejected.
    pub fn load(path: &Path) -> Result<Raster> {
        let img = image::open(path).map_err(|e| Error::image(path, e.to_string()))?;
        match img {
            DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf.pixels().map(|p| p[0] as f64 / 255.0).collect();
                Ok(Raster::from_data(w as usize, h as usize, data))
            }
            DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                let data = buf.pixels().map(|p| p[0] as f64 / 65535.0).collect();
                Ok(Raster::from_data(w as usize, h as usize, data))
            }
            other => Err(Error::image(
                path,
                format!("expected 8-bit or 16-bit grayscale, got {other:?}"),
            )),
        }
    }

    /// Writes the raster as 16-bit grayscale. The format follows the file
    /// extension (png, pgm, tif/tiff).
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(
            self.width as u32,
            self.height as u32,
            |x, y| {
                let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
                Luma([(v * 65535.0).round() as u16])
            },
        );
        buf.save(path).map_err(|e| Error::image(path, e.to_string()))
    }

    /// Bilinear sample at real coordinates with reflected borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, x1) = (x0 as i64, x0 as i64 + 1);
        let (y0, y1) = (y0 as i64, y0 as i64 + 1);
        let w = self.width as i64;
        let h = self.height as i64;
        let px = |xi: i64, yi: i64| -> f64 {
            let xi = reflect_index(xi, w);
            let yi = reflect_index(yi, h);
            self.data[(yi * w + xi) as usize]
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
        let bot = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Corner-aligned bilinear resize to `out_w x out_h`. Output pixel `i`
    /// samples input coordinate `i * (in - 1) / (out - 1)`, so corner
    /// pixels are preserved exactly. Resizing to the same size is an exact
    /// copy.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Raster {
        assert!(out_w >= 1 && out_h >= 1, "resize target must be nonempty");
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let sx = if out_w > 1 {
            (self.width as f64 - 1.0) / (out_w as f64 - 1.0)
        } else {
            0.0
        };
        let sy = if out_h > 1 {
            (self.height as f64 - 1.0) / (out_h as f64 - 1.0)
        } else {
            0.0
        };
        let mut out = Raster::new(out_w, out_h);
        for oy in 0..out_h {
            let y = oy as f64 * sy;
            for ox in 0..out_w {
                let x = ox as f64 * sx;
                out.set(ox, oy, self.sample_bilinear(x, y));
            }
        }
        out
    }

    /// Rotates the content about the raster center by `degrees`
    /// (counterclockwise), sampling bilinearly with reflected borders.
    /// A rotation of exactly 0 degrees is an exact copy.
    pub fn rotate_about_center(&self, degrees: f64) -> Raster {
        if degrees == 0.0 {
            return self.clone();
        }
        let theta = degrees.to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let mut out = Raster::new(self.width, self.height);
        for oy in 0..self.height {
            for ox in 0..self.width {
                let dx = ox as f64 - cx;
                let dy = oy as f64 - cy;
                // inverse rotation maps output pixels to source coordinates
                let sx = cos_t * dx + sin_t * dy + cx;
                let sy = -sin_t * dx + cos_t * dy + cy;
                out.set(ox, oy, self.sample_bilinear(sx, sy));
            }
        }
        out
    }

    /// Horizontal mirror (columns reversed).
    pub fn mirror_horizontal(&self) -> Raster {
        let mut out = Raster::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Crops the rectangle at `(x, y)` with size `w x h`; must lie inside.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Raster {
        assert!(x + w <= self.width && y + h <= self.height, "crop out of bounds");
        let mut out = Raster::new(w, h);
        for row in 0..h {
            let src = (y + row) * self.width + x;
            out.data[row * w..(row + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        out
    }
}

/// Reflects an index into `[0, len)` across the edge pixels.
fn reflect_index(i: i64, len: i64) -> i64 {
    debug_assert!(len >= 1);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut i = i.rem_euclid(period);
    if i >= len {
        i = period - i;
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_across_edges() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn resize_same_size_is_exact_copy() {
        let r = Raster::from_data(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(r.resize_bilinear(3, 2), r);
    }

    #[test]
    fn resize_2x2_to_4x4_preserves_corners() {
        // Corner-aligned sampling keeps the four corner values exactly and
        // interpolates with weights k/3 along each axis.
        let r = Raster::from_data(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let out = r.resize_bilinear(4, 4);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(3, 0), 1.0);
        assert_eq!(out.get(0, 3), 1.0);
        assert_eq!(out.get(3, 3), 0.0);
        // interior: at (1,0): x=1/3 between 0 and 1 -> 1/3
        let v = out.get(1, 0);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn resize_preserves_constants() {
        let r = Raster::from_data(5, 7, vec![0.37; 35]);
        let out = r.resize_bilinear(13, 3);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn rotation_preserves_constants() {
        let r = Raster::from_data(8, 8, vec![0.5; 64]);
        for deg in [0.0, 33.0, 90.0, 180.0] {
            let out = r.rotate_about_center(deg);
            assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let data: Vec<f64> = (0..36).map(|i| i as f64 / 35.0).collect();
        let r = Raster::from_data(6, 6, data);
        assert_eq!(r.rotate_about_center(0.0), r);
    }

    #[test]
    fn mirror_is_involution() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin().abs()).collect();
        let r = Raster::from_data(6, 4, data);
        assert_eq!(r.mirror_horizontal().mirror_horizontal(), r);
    }

    #[test]
    fn mirror_reverses_columns() {
        let r = Raster::from_data(3, 1, vec![0.1, 0.2, 0.3]);
        let m = r.mirror_horizontal();
        assert_eq!(m.data(), &[0.3, 0.2, 0.1]);
    }

    #[test]
    fn save_load_roundtrip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let r = Raster::from_data(5, 4, data);
        r.save(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        assert_eq!(back.width(), 5);
        assert_eq!(back.height(), 4);
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}
