//! Adam with global-norm clipping over any named-tensor parameter set.

use crate::error::{Error, Result};

/// A fixed, ordered collection of named flat tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum()
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    tensor: name.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Rescale `grads` so that its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P) -> Adam {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (i, (_, theta)) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].1;
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..theta.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn tensors(&self) -> Vec<(&'static str, &[f64])> {
            vec![("w", &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("w", &mut self.0)]
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Flat(vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.squared_norm().sqrt() - 1.0).abs() < 1e-12);
        let mut small = Flat(vec![0.3, 0.4]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.0, vec![0.3, 0.4]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Flat(vec![1.0, -1.0]);
        let g = Flat(vec![0.5, -2.0]);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1);
        assert!((p.0[0] - 0.9).abs() < 1e-6);
        assert!((p.0[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_is_named() {
        let p = Flat(vec![1.0, f64::NAN]);
        match p.check_finite() {
            Err(Error::Numeric { tensor }) => assert_eq!(tensor, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
