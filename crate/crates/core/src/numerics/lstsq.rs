use super::grid::Grid;
use crate::error::{Error, Result};

/// True where a mask pixel counts as valid.
#[inline]
pub fn is_valid(m: f64) -> bool {
    m > 0.5
}

fn check_operands(pred: &Grid, gt: &Grid, mask: &Grid, op: &'static str) -> Result<()> {
    pred.ensure_channels(1, op)?;
    pred.ensure_shape(gt, op)?;
    pred.ensure_shape(mask, op)
}

/// Scale and shift minimizing `sum mask * (scale * pred + shift - gt)^2`.
///
/// Solved in closed form from the 2x2 normal equations, written in centered
/// form for conditioning. Fails when no pixel is valid or the valid
/// predictions are constant.
pub fn lstsq_scale_shift(pred: &Grid, gt: &Grid, mask: &Grid) -> Result<(f64, f64)> {
    check_operands(pred, gt, mask, "lstsq_scale_shift")?;
    let mut n = 0.0;
    let (mut sp, mut sg) = (0.0, 0.0);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if is_valid(m) {
            n += 1.0;
            sp += p;
            sg += g;
        }
    }
    if n == 0.0 {
        return Err(Error::Degenerate("alignment mask selects no pixel".into()));
    }
    let (mp, mg) = (sp / n, sg / n);
    let (mut sxx, mut sxy, mut spp) = (0.0, 0.0, 0.0);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if is_valid(m) {
            let dp = p - mp;
            sxx += dp * dp;
            sxy += dp * (g - mg);
            spp += p * p;
        }
    }
    if sxx == 0.0 || sxx <= 1e-24 * spp {
        return Err(Error::Degenerate("prediction is constant over the mask".into()));
    }
    let scale = sxy / sxx;
    Ok((scale, mg - scale * mp))
}

/// Masked sum of squared residuals of `scale * pred + shift` against `gt`.
pub fn affine_residual(pred: &Grid, gt: &Grid, mask: &Grid, scale: f64, shift: f64) -> f64 {
    pred.data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .filter(|(_, &m)| is_valid(m))
        .map(|((&p, &g), _)| {
            let r = scale * p + shift - g;
            r * r
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{gaussian_grid, RandomSource};

    #[test]
    fn identity_fit() {
        let g = gaussian_grid(RandomSource::new(1, 0), 8, 8, 1).unwrap();
        let m = Grid::filled(8, 8, 1, 1.0);
        let (s, b) = lstsq_scale_shift(&g, &g, &m).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
    }

    #[test]
    fn exact_affine_preimage() {
        let gt = gaussian_grid(RandomSource::new(2, 0), 8, 8, 1).unwrap();
        let (a, b) = (2.5, -0.75);
        let pred = gt.map(|g| (g - b) / a);
        let m = Grid::filled(8, 8, 1, 1.0);
        let (s, t) = lstsq_scale_shift(&pred, &gt, &m).unwrap();
        assert!((s - a).abs() < 1e-9 && (t - b).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let g = gaussian_grid(RandomSource::new(3, 0), 4, 4, 1).unwrap();
        let none = Grid::zeros(4, 4, 1);
        let all = Grid::filled(4, 4, 1, 1.0);
        assert!(matches!(lstsq_scale_shift(&g, &g, &none), Err(Error::Degenerate(_))));
        let flat = Grid::filled(4, 4, 1, 0.3);
        assert!(matches!(lstsq_scale_shift(&flat, &g, &all), Err(Error::Degenerate(_))));
        assert!(lstsq_scale_shift(&g, &Grid::zeros(4, 5, 1), &all).is_err());
    }
}
