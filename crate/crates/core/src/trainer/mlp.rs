//! Dense tanh MLP with a linear output layer and hand-written backprop.
//! Generic over the float type so the same code runs training (`f32`) and
//! finite-difference checks (`f64`).

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

pub trait Scalar:
    LinalgScalar + ScalarOperand + Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: LinalgScalar + ScalarOperand + Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Debug + Send + Sync + 'static
{
}

pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    /// Row-major `inputs × outputs` weights per layer.
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Layer inputs recorded by the forward pass; entry 0 is the network input.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub inputs: Vec<Array2<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Uniform fan-in initialisation; the last layer is scaled by `output_gain`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let gain = if l + 1 == layers { output_gain } else { 1.0 };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| lit::<T>(rng.random_range(-bound..=bound)));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Self { weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].nrows()];
        s.extend(self.weights.iter().map(|w| w.ncols()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.ncols()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(w);
            z += b;
            inputs.push(h);
            h = if l < last { z.mapv(|v| v.tanh()) } else { z };
        }
        (h, MlpCache { inputs })
    }

    pub fn predict(&self, x: &Array2<T>) -> Array2<T> {
        let mut h = x.dot(&self.weights[0]);
        h += &self.biases[0];
        let last = self.weights.len() - 1;
        for l in 1..=last {
            h.mapv_inplace(|v| v.tanh());
            let mut z = h.dot(&self.weights[l]);
            z += &self.biases[l];
            h = z;
        }
        h
    }

    /// Parameter gradients for upstream gradient `dout` on the output.
    pub fn backward(&self, cache: &MlpCache<T>, dout: &Array2<T>) -> Mlp<T> {
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = dout.clone();
        for l in (0..n).rev() {
            let input = &cache.inputs[l];
            gw.push(input.t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut dh = delta.dot(&self.weights[l].t());
                // input of layer l is tanh output of layer l-1
                dh.zip_mut_with(input, |d, h| *d = *d * (T::one() - *h * *h));
                delta = dh;
            }
        }
        gw.reverse();
        gb.reverse();
        Mlp {
            weights: gw,
            biases: gb,
        }
    }

    pub fn write_flat(&self, out: &mut Vec<T>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
    }

    /// Reads parameters in [`Mlp::write_flat`] order; returns values consumed.
    pub fn read_flat(&mut self, src: &[T]) -> usize {
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = src[k];
                k += 1;
            }
            for v in b.iter_mut() {
                *v = src[k];
                k += 1;
            }
        }
        k
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let c = |x: &T| U::from_f64(x.to_f64().expect("finite")).expect("representable");
        Mlp {
            weights: self.weights.iter().map(|w| w.map(c)).collect(),
            biases: self.biases.iter().map(|b| b.map(c)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}
