//! Learned end-effector force estimator: proprioceptive history in, both
//! end-effector forces (world frame) out. Trained by regression on the
//! forces the simulator applied.

use nalgebra::Vector3;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::Adam;
use super::mlp::Mlp;

#[derive(Debug, Clone, PartialEq)]
pub struct ForceEstimator {
    pub net: Mlp<f32>,
    pub opt: Adam,
    /// Network outputs are forces times this factor.
    pub force_scale: f64,
}

impl ForceEstimator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], force_scale: f64, rng: &mut R) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(6);
        let net = Mlp::new(&sizes, 0.01, rng);
        let opt = Adam::new(net.num_params());
        Self { net, opt, force_scale }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Forces per row: left then right end effector.
    pub fn predict(&self, features: &Array2<f32>) -> Vec<[Vector3<f64>; 2]> {
        let out = self.net.predict(features);
        let s = self.force_scale;
        out.outer_iter()
            .map(|r| {
                let f = |i: usize| r[i] as f64 / s;
                [Vector3::new(f(0), f(1), f(2)), Vector3::new(f(3), f(4), f(5))]
            })
            .collect()
    }

    /// Scaled regression targets for a force row.
    pub fn target_row(&self, forces: &[f64; 6]) -> [f32; 6] {
        forces.map(|f| (f * self.force_scale) as f32)
    }

    /// Mean-squared-error epochs over shuffled minibatches; returns the mean
    /// loss of the last epoch (in scaled units).
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        inputs: &Array2<f32>,
        targets: &Array2<f32>,
        epochs: usize,
        minibatch: usize,
        lr: f64,
        rng: &mut R,
    ) -> f64 {
        let n = inputs.nrows();
        if n == 0 {
            return 0.0;
        }
        let mb = minibatch.clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut flat = Vec::with_capacity(self.net.num_params());
        let mut last = 0.0;
        for _ in 0..epochs {
            idx.shuffle(rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in idx.chunks(mb) {
                let x = inputs.select(Axis(0), chunk);
                let y = targets.select(Axis(0), chunk);
                let (pred, cache) = self.net.forward(&x);
                let err = &pred - &y;
                let count = err.len() as f32;
                sum += err.iter().map(|e| (e * e) as f64).sum::<f64>() / count as f64;
                batches += 1;
                let dout = err.mapv(|e| 2.0 * e / count);
                let grads = self.net.backward(&cache, &dout);
                let mut g = Vec::with_capacity(flat.capacity());
                grads.write_flat(&mut g);
                flat.clear();
                self.net.write_flat(&mut flat);
                self.opt.step(&mut flat, &g, lr, 1.0);
                self.net.read_flat(&flat);
            }
            last = sum / batches as f64;
        }
        last
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn learns_a_linear_force_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut est = ForceEstimator::new(4, &[32], 0.02, &mut rng);
        let n = 512;
        let x = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0f32..1.0));
        let forces: Vec<[f64; 6]> = x
            .outer_iter()
            .map(|r| {
                let a = r[0] as f64 * 30.0;
                let b = r[1] as f64 * -20.0 + r[2] as f64 * 10.0;
                [a, b, 0.0, -b, a, r[3] as f64 * 40.0]
            })
            .collect();
        let mut y = Array2::zeros((n, 6));
        for (i, f) in forces.iter().enumerate() {
            for (j, v) in est.target_row(f).iter().enumerate() {
                y[(i, j)] = *v;
            }
        }
        let first = est.train(&x, &y, 1, 64, 3e-3, &mut rng);
        let last = est.train(&x, &y, 200, 64, 3e-3, &mut rng);
        assert!(last < 0.05 * first, "first {first} last {last}");
        let pred = est.predict(&x.select(Axis(0), &[0]));
        assert!((pred[0][0].x - forces[0][0]).abs() < 3.0);
    }

    #[test]
    fn zero_forces_are_learned_as_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut est = ForceEstimator::new(5, &[32, 16], 0.02, &mut rng);
        let x = Array2::from_shape_fn((256, 5), |_| rng.random_range(-1.0f32..1.0));
        let y = Array2::zeros((256, 6));
        est.train(&x, &y, 100, 64, 1e-3, &mut rng);
        let mse: f64 = est
            .predict(&x)
            .iter()
            .flat_map(|f| f.iter().map(|v| v.norm_squared()))
            .sum::<f64>()
            / (256.0 * 6.0);
        assert!(mse < 0.1, "mse {mse} N^2");
    }
}
