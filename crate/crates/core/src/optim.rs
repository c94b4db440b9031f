use ndarray::Array2;

use crate::autograd::Mat;
use crate::model::{ModelParams, ParamId};

/// Adam with bias correction. Moments are kept per parameter and created on
/// first use.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Option<Mat>>,
    pub second: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: vec![None; ParamId::ALL.len()],
            second: vec![None; ParamId::ALL.len()],
        }
    }

    /// One update from `(param, gradient)` pairs.
    pub fn apply(&mut self, params: &mut ModelParams, grads: Vec<(ParamId, Mat)>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (p, g) in grads {
            let idx = p.index();
            let m = self.first[idx].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.second[idx].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.first[idx].as_ref().unwrap(), self.second[idx].as_ref().unwrap());
            let w = params.get_mut(p);
            ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let dims = ModelDims {
            users: 2,
            items: 2,
            entities: 1,
            relations: 2,
            text_dim: 2,
            image_dim: 2,
            disc_cols: 2,
            d: 2,
            d_know: 2,
        };
        let mut p = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(0));
        let before = p.get(ParamId::User).clone();
        let mut adam = Adam::new(0.01);
        let g = ndarray::array![[1.0, -2.0], [0.0, 3.0]];
        adam.apply(&mut p, vec![(ParamId::User, g)]);
        let after = p.get(ParamId::User);
        assert!((after[[0, 0]] - (before[[0, 0]] - 0.01)).abs() < 1e-9);
        assert!((after[[0, 1]] - (before[[0, 1]] + 0.01)).abs() < 1e-9);
        assert_eq!(after[[1, 0]], before[[1, 0]]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let dims = ModelDims {
            users: 1,
            items: 1,
            entities: 0,
            relations: 1,
            text_dim: 1,
            image_dim: 1,
            disc_cols: 1,
            d: 3,
            d_know: 3,
        };
        let mut p = ModelParams::init(dims, &mut ChaCha8Rng::seed_from_u64(1));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = p.get(ParamId::User).mapv(|w| 2.0 * (w - 0.7));
            adam.apply(&mut p, vec![(ParamId::User, g)]);
        }
        assert!(p.get(ParamId::User).iter().all(|w| (w - 0.7).abs() < 1e-3));
    }
}
