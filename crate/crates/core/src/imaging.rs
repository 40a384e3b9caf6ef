//! Small raster containers and PNG conversion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};

/// Row-major `H x W x 3` image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| SealError::Image(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| SealError::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

/// Single-channel grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GrayGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(SealError::ShapeMismatch(format!(
                "grid of {} values cannot be {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|&v| quantize(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::L8,
        )
        .map_err(|e| SealError::Image(e.to_string()))
    }

    /// 8-bit grayscale load; byte `b` maps to `b / 255`, so `b >= 128` lands
    /// above one half.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| SealError::Image(format!("{}: {e}", path.display())))?
            .to_luma8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            values: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Bilinear resampling with align-corners=false sampling positions.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> GrayGrid {
        let mut out = Vec::with_capacity(height * width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - wx) + self.get(y0, x1) * wx;
                let bot = self.get(y1, x0) * (1.0 - wx) + self.get(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
        GrayGrid {
            height,
            width,
            values: out,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Scales a map by its maximum and upsamples it for viewing.
pub fn heatmap(height: usize, width: usize, values: &[f64], size: usize) -> GrayGrid {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scaled = values
        .iter()
        .map(|v| if max > 0.0 { v / max } else { 0.0 })
        .collect();
    GrayGrid {
        height,
        width,
        values: scaled,
    }
    .resize_bilinear(size, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(3, 2, [0.0, 128.0 / 255.0, 1.0]);
        img.set(1, 1, [10.0 / 255.0, 0.0, 0.0]);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);

        let g = GrayGrid::new(1, 2, vec![0.0, 1.0]).unwrap();
        let p = dir.path().join("m.png");
        g.save_png(&p).unwrap();
        let back = GrayGrid::load_png(&p).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn heatmap_is_max_scaled() {
        let h = heatmap(2, 2, &[0.0, 0.5, 0.25, 0.5], 128);
        assert_eq!((h.height, h.width), (128, 128));
        assert!(h.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((h.values.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }
}
