//! Dense row-major rasters with interleaved channels.

use nalgebra::Vector2;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

pub type DepthMap = Raster<f32>;
pub type FlowField = Raster<f32>;
pub type Mask = Raster<u8>;

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} raster needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Value at the pixel nearest to `p`, clamping out-of-bounds positions.
    pub fn nearest(&self, p: &Vector2<f64>, c: usize) -> T {
        let x = clamp_round(p.x, self.width);
        let y = clamp_round(p.y, self.height);
        self.get(x, y, c)
    }

    /// Nearest-neighbour resampling to a new size.
    pub fn resample_nearest(&self, width: usize, height: usize) -> Raster<T> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Raster::from_fn(width, height, self.channels, |x, y, c| {
            let src = Vector2::new((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
            self.nearest(&src, c)
        })
    }
}

fn clamp_round(v: f64, n: usize) -> usize {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, (n - 1) as f64) as usize
}

/// Bilinear interpolation weights at a sub-pixel position that lies inside the
/// pixel-center grid. Returns `None` outside `[0, W-1] x [0, H-1]`.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub wx: f64,
    pub wy: f64,
}

impl Bilinear {
    pub fn at(p: &Vector2<f64>, width: usize, height: usize) -> Option<Self> {
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= max_x && p.y <= max_y) {
            return None;
        }
        let x0 = p.x.floor() as usize;
        let y0 = p.y.floor() as usize;
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Some(Self {
            x0,
            y0,
            x1,
            y1,
            wx: p.x - x0 as f64,
            wy: p.y - y0 as f64,
        })
    }

    /// Corner pixels with their weights, in a fixed order.
    pub fn corners(&self) -> [(usize, usize, f64); 4] {
        [
            (self.x0, self.y0, (1.0 - self.wx) * (1.0 - self.wy)),
            (self.x1, self.y0, self.wx * (1.0 - self.wy)),
            (self.x0, self.y1, (1.0 - self.wx) * self.wy),
            (self.x1, self.y1, self.wx * self.wy),
        ]
    }

    pub fn sample(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        self.corners().iter().map(|&(x, y, w)| w * f(x, y)).sum()
    }
}

impl<T: Copy + Into<f64>> Raster<T> {
    /// Bilinear sample of channel `c`; `None` outside the pixel-center grid.
    pub fn bilinear(&self, p: &Vector2<f64>, c: usize) -> Option<f64> {
        Bilinear::at(p, self.width, self.height).map(|b| b.sample(|x, y| self.get(x, y, c).into()))
    }

    /// Bilinear sample with the position clamped into the image.
    pub fn bilinear_clamped(&self, p: &Vector2<f64>, c: usize) -> f64 {
        let q = Vector2::new(
            p.x.clamp(0.0, (self.width - 1) as f64),
            p.y.clamp(0.0, (self.height - 1) as f64),
        );
        self.bilinear(&q, c).unwrap_or(0.0)
    }
}

impl Raster<f64> {
    pub fn resample_bilinear(&self, width: usize, height: usize) -> Raster<f64> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Raster::from_fn(width, height, self.channels, |x, y, c| {
            let src = Vector2::new((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
            self.bilinear_clamped(&src, c)
        })
    }
}

impl Raster<f32> {
    pub fn to_f64(&self) -> Raster<f64> {
        self.map(|v| v as f64)
    }
}

impl Raster<f64> {
    pub fn to_f32(&self) -> Raster<f32> {
        self.map(|v| v as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_matches_corners_and_midpoints() {
        let r = Raster::from_vec(2, 2, 1, vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.bilinear(&Vector2::new(0.0, 0.0), 0), Some(0.0));
        assert_eq!(r.bilinear(&Vector2::new(1.0, 1.0), 0), Some(3.0));
        assert_eq!(r.bilinear(&Vector2::new(0.5, 0.5), 0), Some(1.5));
        assert_eq!(r.bilinear(&Vector2::new(1.01, 0.5), 0), None);
    }

    #[test]
    fn nearest_clamps() {
        let r = Raster::from_fn(4, 8, 1, |x, y, _| (x + 10 * y) as u8);
        assert_eq!(r.nearest(&Vector2::new(-3.2, 5.0), 0), 50);
        assert_eq!(r.nearest(&Vector2::new(99.0, 99.0), 0), 73);
        assert_eq!(r.nearest(&Vector2::new(1.4, 2.6), 0), 31);
    }

    #[test]
    fn resample_nearest_preserves_binarity() {
        let m = Raster::from_fn(8, 6, 1, |x, y, _| ((x + y) % 2) as u8);
        let up = m.resample_nearest(16, 12);
        assert!(up.data().iter().all(|&v| v <= 1));
        assert_eq!(up.get(0, 0, 0), 0);
        assert_eq!(up.get(2, 0, 0), 1);
    }
}
