use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated up front and
/// must keep the shapes of the parameters they were created for.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1)".into()));
        }
        Ok(Self {
            config,
            steps: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let bc2 = T::lit(bc2);
        let eps = T::lit(c.eps);

        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if p.shape() != g.shape() || p.shape() != self.first[k].shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = (*vi / bc2).sqrt() + eps;
                *pi = *pi - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = Tensor::row(vec![3.0f64, -2.0]).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &[vec![1, 2]],
        )
        .unwrap();
        for _ in 0..500 {
            let g = x.map(|v| 2.0 * v);
            opt.step(&mut [&mut x], &[Some(&g)]).unwrap();
        }
        assert!(x.max_abs() < 1e-2, "{x:?}");
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut x = Tensor::row(vec![0.5f32, 0.25]).unwrap();
        let before = x.clone();
        let mut opt = Adam::new(AdamConfig::default(), &[vec![1, 2]]).unwrap();
        let g = Tensor::zeros(&[1, 2]);
        for _ in 0..10 {
            opt.step(&mut [&mut x], &[Some(&g)]).unwrap();
        }
        assert_eq!(x, before);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(Adam::<f32>::new(AdamConfig { lr: 0.0, ..Default::default() }, &[]).is_err());
        let mut opt = Adam::<f32>::new(AdamConfig::default(), &[vec![1, 2]]).unwrap();
        let mut x = Tensor::zeros(&[1, 3]);
        let g = Tensor::zeros(&[1, 3]);
        assert!(opt.step(&mut [&mut x], &[Some(&g)]).is_err());
    }
}
