//! Adam on flat parameter vectors, with global gradient-norm clipping.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends on `grad` in place. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64, max_grad_norm: f64) -> f64 {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let norm = grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
        let scale = if max_grad_norm > 0.0 && norm > max_grad_norm {
            max_grad_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] as f64 * scale;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let update = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            params[i] = (params[i] as f64 - update) as f32;
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![3.0f32, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g: Vec<f32> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g, 0.01, 0.0);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut p = vec![0.0f32];
        let mut opt = Adam::new(1);
        opt.step(&mut p, &[123.0], 0.1, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-6);
    }
}
