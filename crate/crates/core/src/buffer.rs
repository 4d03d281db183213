//! RGB float images and their on-disk forms (8-bit PNG, raw little-endian f32).

use std::fs;
use std::path::Path;

use crate::error::{shape, Error, Result};

/// Interleaved RGB image, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape(format!("{width}x{height} RGB image needs {} values, got {}", width * height * 3, data.len())));
        }
        Ok(Image { width, height, data })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) && self.data.len() == other.data.len() {
            Ok(())
        } else {
            Err(shape(format!(
                "image {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Single channel as a dense `height × width` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.as_mut().iter_mut().zip(&self.data) {
            *dst = (src.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image { width: img.width() as usize, height: img.height() as usize, data }
    }

    /// Writes an 8-bit PNG. Values are stored as-is (already display encoded).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Image::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    /// Raw dump: `u32 width, u32 height`, then `width*height*3` f32, all little-endian.
    pub fn save_f32(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = Vec::with_capacity(8 + self.data.len() * 4);
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_f32(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |detail: String| Error::Format { what: "f32 image dump", detail };
        if bytes.len() < 8 {
            return Err(bad(format!("{} is too short", path.display())));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + width * height * 3 * 4;
        if bytes.len() != expected {
            return Err(bad(format!("{} has {} bytes, expected {expected}", path.display(), bytes.len())));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Image::from_data(width, height, data)
    }
}

/// Relative path of a frame inside a sequence directory: `view_VV/frame_TTT.ext`.
pub fn frame_relpath(view: usize, frame: usize, ext: &str) -> String {
    format!("view_{view:02}/frame_{frame:03}.{ext}")
}
