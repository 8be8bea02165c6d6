use super::ParameterRegistry;

/// Adaptive moment estimation over the trainable parameters of a registry.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, registry: &ParameterRegistry) {
        if self.m.is_empty() {
            for p in registry.trainable() {
                self.m.push(vec![0.0; p.tensor.numel()]);
                self.v.push(vec![0.0; p.tensor.numel()]);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in registry.trainable().enumerate() {
            let g = p.tensor.grad();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            p.tensor.update_data(|data| {
                for j in 0..data.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    data[j] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
    }
}

/// Rescales a flat gradient so its L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Group, Tensor};

    #[test]
    fn adam_descends_a_quadratic() {
        let mut reg = ParameterRegistry::new();
        let x = Tensor::param(vec![3.0, -2.0], &[2]).unwrap();
        reg.register("x", Group::Policy, x.clone()).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            reg.zero_grad();
            x.square().unwrap().sum().unwrap().backward().unwrap();
            opt.step(&reg);
        }
        assert!(x.to_vec().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
