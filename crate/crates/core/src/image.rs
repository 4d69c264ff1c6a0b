//! 8-bit RGB raster used for backgrounds, overlays and diagnostic images.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
#[error("image is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
pub struct DimensionMismatch {
    pub expected_w: u32,
    pub expected_h: u32,
    pub actual_w: u32,
    pub actual_h: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: u32,
    height: u32,
    data: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self { width, height, data: vec![rgb; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    /// Build from row-major interleaved RGB bytes.
    pub fn from_raw(width: u32, height: u32, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != width as usize * height as usize * 3 {
            return None;
        }
        Some(Self { width, height, data: bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[u8; 3]] {
        &mut self.data
    }

    pub fn as_bytes(&self) -> Vec<u8> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        self.data[y as usize * self.width as usize + x as usize] = rgb;
    }

    pub fn check_size(&self, width: u32, height: u32) -> Result<(), DimensionMismatch> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(DimensionMismatch { expected_w: width, expected_h: height, actual_w: self.width, actual_h: self.height })
        }
    }

    /// Bilinear sample at pixel-index coordinates (pixel `(i, j)` at `(i, j)`),
    /// in 0..=255 units. `None` outside the convex hull of pixel centres.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let (x0, y0) = (x.floor() as u32, y.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |xx, yy| self.get(xx, yy)[c] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        Some(out)
    }

    /// `[first | second]` placed side by side; heights must match.
    pub fn side_by_side(first: &ColorImage, second: &ColorImage) -> Result<ColorImage, DimensionMismatch> {
        second.check_size(second.width, first.height)?;
        let width = first.width + second.width;
        Ok(ColorImage::from_fn(width, first.height, |x, y| {
            if x < first.width {
                first.get(x, y)
            } else {
                second.get(x - first.width, y)
            }
        }))
    }
}
