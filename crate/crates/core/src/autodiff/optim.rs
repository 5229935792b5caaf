//! Adam optimizer and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_params(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// First-moment accumulators, one per parameter tensor (empty before the first step).
    pub fn first_moments(&self) -> &[Matrix] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.second
    }

    /// Applies one update. `params` and `grads` must align in count and shape
    /// with every previous call.
    pub fn step(&mut self, params: Vec<(String, &mut Matrix)>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "{name}: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::training(name.clone(), "non-finite gradient"));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Matrix::zeros(g.rows, g.cols)).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::Shape("parameter layout changed between steps".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((_, p), g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Matrix::row_vector(vec![1.5, -2.0]);
        let mut opt = Adam::new(1e-3);
        for _ in 0..5 {
            opt.step(vec![("p".into(), &mut p)], &[Matrix::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p.data, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_at_most_lr() {
        let lr = 1e-3;
        let g = Matrix::row_vector(vec![1e-6, -3.0, 250.0, 0.0]);
        let mut p = Matrix::zeros(1, 4);
        Adam::new(lr).step(vec![("p".into(), &mut p)], &[g.clone()]).unwrap();
        for (dp, gi) in p.data.iter().zip(&g.data) {
            assert!(dp.abs() <= lr);
            assert!(*gi == 0.0 || dp.signum() == -gi.signum());
        }
        assert!((p.data[2] + lr).abs() < 1e-9);
    }

    #[test]
    fn stationary_gradient_gives_steps_of_lr() {
        let lr = 1e-3;
        let mut p = Matrix::row_vector(vec![0.0, 0.0]);
        let g = Matrix::row_vector(vec![0.4, -7.0]);
        let mut opt = Adam::new(lr);
        for _ in 0..50 {
            let before = p.clone();
            opt.step(vec![("p".into(), &mut p)], &[g.clone()]).unwrap();
            for (a, b) in p.data.iter().zip(&before.data) {
                assert!(((a - b).abs() - lr).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn step_counter_advances() {
        let mut p = Matrix::scalar(0.0);
        let mut opt = Adam::new(1e-3);
        assert_eq!(opt.step, 0);
        opt.step(vec![("p".into(), &mut p)], &[Matrix::scalar(1.0)]).unwrap();
        assert_eq!(opt.step, 1);
        assert_eq!(opt.first_moments()[0].shape(), p.shape());
        assert_eq!(opt.second_moments()[0].shape(), p.shape());
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // loss = (p - 0.7)^2
        let mut p = Matrix::scalar(0.0);
        let mut opt = Adam::new(0.05);
        for _ in 0..200 {
            let g = Matrix::scalar(2.0 * (p.data[0] - 0.7));
            opt.step(vec![("p".into(), &mut p)], &[g]).unwrap();
        }
        assert!((p.data[0] - 0.7).abs() < 1e-2, "p = {}", p.data[0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = Matrix::scalar(0.0);
        let mut opt = Adam::new(1e-3);
        let err = opt
            .step(vec![("flow.3.weight".into(), &mut p)], &[Matrix::scalar(f64::NAN)])
            .unwrap_err();
        match err {
            Error::Training { location, .. } => assert_eq!(location, "flow.3.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Matrix::row_vector(vec![3.0, 4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].frobenius_norm_sq().sqrt() - 1.0).abs() < 1e-12);
        let mut small = vec![Matrix::row_vector(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data, vec![0.3]);
    }
}
