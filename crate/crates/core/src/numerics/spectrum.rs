//! 2D power spectra and exponential radial frequency bands.
//!
//! Spectra are unshifted: the DC bin sits at `(0, 0)` and the radius of a bin
//! is measured with wrap-around, so bin `(h - 1, 0)` has radius 1.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::grid::Grid;
use crate::error::{Error, Result};

/// `|DFT|^2` of a one-channel grid whose sides are powers of two.
pub fn fft2_power(g: &Grid) -> Result<Grid> {
    g.ensure_channels(1, "fft2_power")?;
    let (h, w) = (g.height(), g.width());
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("fft2_power needs power-of-two sides, got {h}x{w}; pad first")));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = g.data().iter().map(|&v| Complex::new(v, 0.0)).collect();

    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    Grid::from_vec(h, w, 1, buf.iter().map(|z| z.norm_sqr()).collect())
}

/// Wrap-aware distance of bin `(y, x)` from DC in an `h x w` spectrum.
pub fn bin_radius(y: usize, x: usize, h: usize, w: usize) -> f64 {
    let fy = y.min(h - y) as f64;
    let fx = x.min(w - x) as f64;
    fy.hypot(fx)
}

/// Partition of spectrum bins into exponentially growing radial groups.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMap {
    height: usize,
    width: usize,
    /// Upper radius of each group: `base^1, base^2, ..., base^group_count`.
    radii: Vec<f64>,
    assignment: Vec<usize>,
}

impl BandMap {
    pub fn group_count(&self) -> usize {
        self.radii.len()
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `(lo, hi]` radius bounds of group `g`; group 0 starts at 0 inclusive.
    pub fn bounds(&self, g: usize) -> (f64, f64) {
        let lo = if g == 0 { 0.0 } else { self.radii[g - 1] };
        (lo, self.radii[g])
    }

    /// Number of bins in each group.
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.group_count()];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    /// Group index of a bin at distance `r` from DC.
    pub fn group_of_radius(&self, r: f64) -> usize {
        self.radii.iter().position(|&hi| r <= hi).unwrap_or(self.radii.len() - 1)
    }
}

/// Group 0 is the disk of radius `base`; group `g` the annulus
/// `(base^g, base^(g+1)]`. The last group also takes every bin beyond its
/// outer radius, so the map always covers the whole spectrum.
pub fn band_partition(h: usize, w: usize, base: f64, group_count: usize) -> Result<BandMap> {
    if base <= 1.0 || !base.is_finite() {
        return Err(Error::InvalidArgument(format!("band base must exceed 1, got {base}")));
    }
    if group_count == 0 {
        return Err(Error::InvalidArgument("band partition needs at least one group".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("band partition needs a nonempty spectrum".into()));
    }
    let radii: Vec<f64> = (1..=group_count as i32).map(|k| base.powi(k)).collect();
    let mut map = BandMap { height: h, width: w, radii, assignment: Vec::with_capacity(h * w) };
    for y in 0..h {
        for x in 0..w {
            let g = map.group_of_radius(bin_radius(y, x, h, w));
            map.assignment.push(g);
        }
    }
    Ok(map)
}

/// Total power in each group.
pub fn band_energy(power: &Grid, bands: &BandMap) -> Result<Vec<f64>> {
    power.ensure_channels(1, "band_energy")?;
    if (power.height(), power.width()) != bands.dims() {
        return Err(Error::shape("band_energy", format!("{}x{}", bands.height, bands.width), power.shape()));
    }
    let mut energy = vec![0.0; bands.group_count()];
    for (&p, &g) in power.data().iter().zip(&bands.assignment) {
        energy[g] += p;
    }
    Ok(energy)
}

/// CSV with header `group,radius_lo,radius_hi,energy`. Energies are power
/// (squared magnitude) sums.
pub fn band_energy_csv(bands: &BandMap, energy: &[f64]) -> String {
    let mut out = String::from("group,radius_lo,radius_hi,energy\n");
    for (g, e) in energy.iter().enumerate() {
        let (lo, hi) = bands.bounds(g);
        let _ = writeln!(out, "{g},{lo},{hi},{e:e}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{gaussian_grid, RandomSource};

    #[test]
    fn constant_grid_is_pure_dc() {
        let n = 16;
        let v = 0.75;
        let p = fft2_power(&Grid::filled(n, n, 1, v)).unwrap();
        let dc = (v * (n * n) as f64).powi(2);
        assert!((p.get(0, 0, 0) - dc).abs() < 1e-9 * dc);
        let rest: f64 = p.data()[1..].iter().sum();
        assert!(rest < 1e-12 * dc);
    }

    #[test]
    fn parseval_on_random_grid() {
        let g = gaussian_grid(RandomSource::new(3, 1), 32, 16, 1).unwrap();
        let p = fft2_power(&g).unwrap();
        let spatial = g.sum_sq() * (32.0 * 16.0);
        assert!((p.sum() - spatial).abs() / spatial < 1e-9);
    }

    #[test]
    fn cosine_has_two_bins() {
        // cos(2 pi (3x/16 + 2y/16)): closed-form DFT has mass only at +-(2,3).
        let n = 16;
        let g = Grid::from_fn(n, n, 1, |y, x, _| {
            (2.0 * std::f64::consts::PI * (3.0 * x as f64 + 2.0 * y as f64) / n as f64).cos()
        });
        let p = fft2_power(&g).unwrap();
        let peak = ((n * n) as f64 / 2.0).powi(2);
        let mut hits = vec![];
        for y in 0..n {
            for x in 0..n {
                if p.get(y, x, 0) > 1e-9 * peak {
                    hits.push((y, x));
                }
            }
        }
        assert_eq!(hits, vec![(2, 3), (n - 2, n - 3)]);
        assert!((p.get(2, 3, 0) - peak).abs() < 1e-9 * peak);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fft2_power(&Grid::zeros(12, 16, 1)).is_err());
        assert!(fft2_power(&Grid::zeros(16, 16, 3)).is_err());
    }

    #[test]
    fn eight_groups_base_two_radii() {
        let b = band_partition(64, 64, 2.0, 8).unwrap();
        assert_eq!(b.radii(), &[2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0]);
        assert_eq!(b.group_of_radius(3.0), 1);
        assert_eq!(b.group_of_radius(2.0), 0);
        assert_eq!(b.group_of_radius(0.0), 0);
    }

    #[test]
    fn partition_covers_every_bin_once() {
        let b = band_partition(64, 64, 2.0, 8).unwrap();
        let sizes = b.group_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 64 * 64);
        // Corner radius is 32*sqrt(2) < 64, so the two outermost groups are empty.
        assert_eq!(sizes[6], 0);
        assert_eq!(sizes[7], 0);
    }

    #[test]
    fn constant_image_energy_all_in_group_zero() {
        let p = fft2_power(&Grid::filled(32, 32, 1, 1.5)).unwrap();
        let b = band_partition(32, 32, 2.0, 8).unwrap();
        let e = band_energy(&p, &b).unwrap();
        assert!(e[0] > 0.0);
        assert!(e[1..].iter().all(|&v| v.abs() < 1e-9 * e[0]));
        assert!((e.iter().sum::<f64>() - p.sum()).abs() < 1e-9 * p.sum());
    }

    #[test]
    fn band_energy_shape_mismatch() {
        let b = band_partition(16, 16, 2.0, 4).unwrap();
        assert!(band_energy(&Grid::zeros(8, 8, 1), &b).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let b = band_partition(8, 8, 2.0, 3).unwrap();
        let csv = band_energy_csv(&b, &[1.0, 2.0, 0.0]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "group,radius_lo,radius_hi,energy");
        assert!(lines[1].starts_with("0,0,2,"));
        assert!(lines[3].starts_with("2,4,8,"));
    }
}
