//! Row-major binary masks and the small amount of morphology the pipeline needs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    /// An all-background mask.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask of {width}x{height} cannot hold {} bits",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut m = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-bounds coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Iterator over foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    /// Foreground pixels with at least one background 4-neighbor; the image border
    /// counts as background.
    pub fn boundary_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let (xi, yi) = (x as i64, y as i64);
                if !self.get_signed(xi - 1, yi)
                    || !self.get_signed(xi + 1, yi)
                    || !self.get_signed(xi, yi - 1)
                    || !self.get_signed(xi, yi + 1)
                {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Mask holding only the boundary pixels.
    pub fn boundary_mask(&self) -> BinaryMask {
        let mut out = BinaryMask {
            width: self.width,
            height: self.height,
            bits: vec![false; self.bits.len()],
        };
        for (x, y) in self.boundary_pixels() {
            out.set(x, y, true);
        }
        out
    }

    /// 3x3 dilation.
    pub fn dilate(&self) -> BinaryMask {
        self.morph(|m, x, y| {
            (-1..=1).any(|dy| (-1..=1).any(|dx| m.get_signed(x + dx, y + dy)))
        })
    }

    /// 3x3 erosion; pixels outside the image count as background.
    pub fn erode(&self) -> BinaryMask {
        self.morph(|m, x, y| {
            (-1..=1).all(|dy| (-1..=1).all(|dx| m.get_signed(x + dx, y + dy)))
        })
    }

    /// One 3x3 closing pass (dilation followed by erosion).
    pub fn close(&self) -> BinaryMask {
        self.dilate().erode()
    }

    fn morph(&self, f: impl Fn(&BinaryMask, i64, i64) -> bool) -> BinaryMask {
        let mut bits = vec![false; self.bits.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                bits[y * self.width + x] = f(self, x as i64, y as i64);
            }
        }
        BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    /// Mean of foreground pixel indices, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (x, y) in self.foreground() {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Angle (radians, from +x toward +y) of the major principal axis of the
    /// foreground, in `(-pi/2, pi/2]`.
    pub fn principal_axis_angle(&self) -> Option<f64> {
        let (cx, cy) = self.centroid()?;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for (x, y) in self.foreground() {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        Some(0.5 * (2.0 * sxy).atan2(sxx - syy))
    }
}
