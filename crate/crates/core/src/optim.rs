use crate::autodiff::ActivationField;
use crate::real::Real;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64, params: &[ActivationField<T>]) -> Self {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, eps: f64, params: &[ActivationField<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.values.len()]).collect();
        Self { learning_rate, beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every array from its gradient.
    pub fn update(&mut self, params: &mut [ActivationField<T>], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter array");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - self.beta1), T::from_f64_lossy(1.0 - self.beta2));
        let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
        let lr = T::from_f64_lossy(self.learning_rate);
        let eps = T::from_f64_lossy(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.values[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    #[test]
    fn matches_reference_on_scalar_quadratic() {
        // f(x) = (x − 3)², reference written out directly
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut x, mut m, mut v) = (-2.0f64, 0.0f64, 0.0f64);
        let mut p = vec![ActivationField::new(Shape::scalar(), vec![-2.0f64])];
        let mut adam = Adam::new(lr, &p);
        for t in 1..=100 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let gp = [2.0 * (p[0].values[0] - 3.0)];
            adam.update(&mut p, &[&gp]);
            assert!((p[0].values[0] - x).abs() < 1e-12, "step {t}");
        }
        assert!((x - 3.0).abs() < 0.5);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut p = vec![ActivationField::new(Shape::new(1, 1, 3, 1, 1), vec![1.0f32, -2.0, 0.5])];
        let before = p.clone();
        let mut adam = Adam::new(0.0, &p);
        adam.update(&mut p, &[&[0.3, -0.1, 9.0]]);
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }
}
