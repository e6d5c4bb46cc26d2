use std::fmt;

use crate::error::{Error, Result};

/// Height, width and channel count of a [`Grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape { h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Dense `H x W x C` map of reals, row-major with channels innermost.
///
/// Images, annotations, noise samples, spectra and network parameters are all
/// carried as grids.
#[derive(Clone, PartialEq)]
pub struct Grid {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::filled(h, w, c, 0.0)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Grid { shape: Shape::new(h, w, c), data: vec![value; h * w * c] }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, 1, value)
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(h, w, c);
        if data.len() != shape.len() {
            return Err(Error::shape("Grid::from_vec", shape.len(), data.len()));
        }
        Ok(Grid { shape, data })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` everywhere.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Grid { shape: Shape::new(h, w, c), data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.h
    }

    pub fn width(&self) -> usize {
        self.shape.w
    }

    pub fn channels(&self) -> usize {
        self.shape.c
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.w + x) * self.shape.c + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Channel vector at one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.shape.c]
    }

    pub fn ensure_shape(&self, other: &Grid, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        Ok(())
    }

    pub fn ensure_channels(&self, c: usize, op: &'static str) -> Result<()> {
        if self.shape.c != c {
            return Err(Error::shape(op, format!("{c} channel(s)"), self.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Grid, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_shape(other, op)?;
        Ok(Grid { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Grid, b: f64) -> Result<Grid> {
        self.zip_map(other, "lincomb", |x, y| a * x + b * y)
    }

    pub fn scale(&self, s: f64) -> Grid {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Grid {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Single channel `c` as a one-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        let n = self.shape.c;
        Grid {
            shape: Shape::new(self.shape.h, self.shape.w, 1),
            data: self.data.iter().skip(c).step_by(n).copied().collect(),
        }
    }

    /// Mean over channels, producing a one-channel grid.
    pub fn channel_mean(&self) -> Grid {
        let n = self.shape.c;
        Grid {
            shape: Shape::new(self.shape.h, self.shape.w, 1),
            data: self.data.chunks(n).map(|px| px.iter().sum::<f64>() / n as f64).collect(),
        }
    }

    /// Repeats a one-channel grid `c` times along the channel axis.
    pub fn replicate_channels(&self, c: usize) -> Result<Grid> {
        self.ensure_channels(1, "replicate_channels")?;
        Ok(Grid {
            shape: Shape::new(self.shape.h, self.shape.w, c),
            data: self.data.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect(),
        })
    }

    /// Stacks grids of equal height and width along the channel axis.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of zero grids".into()))?;
        let (h, w) = (first.height(), first.width());
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::shape("concat_channels", format!("{h}x{w}xC"), p.shape()));
            }
        }
        let c: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(h * w * c);
        for px in 0..h * w {
            for p in parts {
                let pc = p.channels();
                data.extend_from_slice(&p.data[px * pc..(px + 1) * pc]);
            }
        }
        Ok(Grid { shape: Shape::new(h, w, c), data })
    }

    /// Zero-pads a grid at the bottom/right to `h x w`.
    pub fn pad_to(&self, h: usize, w: usize) -> Result<Grid> {
        if h < self.shape.h || w < self.shape.w {
            return Err(Error::shape("pad_to", format!("at least {}", self.shape), format!("{h}x{w}")));
        }
        let c = self.shape.c;
        let mut out = Grid::zeros(h, w, c);
        for y in 0..self.shape.h {
            let src = &self.data[y * self.shape.w * c..(y + 1) * self.shape.w * c];
            out.data[y * w * c..y * w * c + src.len()].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Zero-pads to the next power of two in each spatial dimension.
    pub fn pad_pow2(&self) -> Grid {
        let h = self.shape.h.next_power_of_two();
        let w = self.shape.w.next_power_of_two();
        self.pad_to(h, w).expect("padding never shrinks")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Grid::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Grid::from_vec(2, 2, 1, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn concat_then_channel_recovers_parts() {
        let a = Grid::from_fn(3, 2, 1, |y, x, _| (y * 2 + x) as f64);
        let b = Grid::from_fn(3, 2, 2, |y, x, c| 100.0 + (y * 4 + x * 2 + c) as f64);
        let cat = Grid::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(3, 2, 3));
        assert_eq!(cat.channel(0), a);
        assert_eq!(cat.channel(2), b.channel(1));
    }

    #[test]
    fn replicate_and_mean_are_inverse() {
        let a = Grid::from_fn(4, 5, 1, |y, x, _| (y as f64).sin() + x as f64);
        let r = a.replicate_channels(3).unwrap();
        assert!(r.channel_mean().max_abs_diff(&a) < 1e-14);
    }

    #[test]
    fn pad_keeps_content_top_left() {
        let a = Grid::filled(3, 5, 1, 2.0);
        let p = a.pad_pow2();
        assert_eq!(p.shape(), Shape::new(4, 8, 1));
        assert_eq!(p.get(2, 4, 0), 2.0);
        assert_eq!(p.get(3, 4, 0), 0.0);
        assert_eq!(p.get(2, 5, 0), 0.0);
        assert_eq!(p.sum(), 30.0);
    }
}
