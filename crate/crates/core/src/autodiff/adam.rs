use crate::error::{Error, Result};
use crate::numerics::Grid;

/// Moment estimates and hyperparameters of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Grid>,
    pub second_moment: Vec<Grid>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Learning rate used for large pretrained denoisers; toy nets scale it up.
pub const DEFAULT_LR: f64 = 3e-5;

impl AdamState {
    /// Zero moments shaped like `params`, with the usual 0.9 / 0.999 / 1e-8.
    pub fn new(params: &[Grid]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Grid], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Grid> = params.iter().map(|g| Grid::zeros(g.height(), g.width(), g.channels())).collect();
        AdamState { first_moment: zeros.clone(), second_moment: zeros, step_count: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Grid], grads: &[Grid], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameter tensors", params.len()),
            format!("{} grads, {} moments", grads.len(), state.first_moment.len()),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape()
            || p.shape() != state.first_moment[i].shape()
            || p.shape() != state.second_moment[i].shape()
        {
            return Err(Error::shape("adam_step", p.shape(), grads[i].shape()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_stationary() {
        let mut p = vec![Grid::from_vec(1, 2, 1, vec![0.3, -1.2]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Grid::zeros(1, 2, 1)], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn first_step_without_momentum_is_sign_scaled() {
        let mut p = vec![Grid::from_vec(1, 3, 1, vec![1.0, 1.0, 1.0]).unwrap()];
        let g = Grid::from_vec(1, 3, 1, vec![0.5, -2.0, 1e-3]).unwrap();
        let mut st = AdamState::with_hyper(&p, 0.0, 0.0, 1e-8);
        let lr = 0.01;
        adam_step(&mut p, std::slice::from_ref(&g), &mut st, lr).unwrap();
        for (w, gi) in p[0].data().iter().zip(g.data()) {
            let expect = 1.0 - lr * gi / (gi.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        // Scalar reference evaluated independently of the grid code path.
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 0.05, 0.7);
        let (mut m, mut v, mut x_ref) = (0.0, 0.0, 2.0);
        let mut p = vec![Grid::scalar(2.0)];
        let mut st = AdamState::new(&p);
        let mut prev = 2.0;
        for t in 1..=100 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x_ref -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            adam_step(&mut p, &[Grid::scalar(g)], &mut st, lr).unwrap();
            let x = p[0].data()[0];
            assert!(x < prev);
            prev = x;
            assert!((x - x_ref).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Grid::zeros(2, 2, 1)];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Grid::zeros(2, 1, 1)], &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &[], &mut st, 0.1).is_err());
    }
}
