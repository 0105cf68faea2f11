use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment estimates for every parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T: Real = f32> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        AdamWState {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One AdamW update with decoupled weight decay:
    /// `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
    ///
    /// A `None` gradient is treated as zero (the moments still decay).
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters, {} gradients, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::Dimension(format!(
                    "parameter {i} has shape {:?}, optimizer state {:?}",
                    p.shape(),
                    self.m[i].shape()
                )));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient {i} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let lr = T::from_f64(c.lr);
        let decay = T::from_f64(c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let eps = T::from_f64(c.eps);

        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = p.data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mj = b1 * *mj + one_b1 * gj;
                        *vj = b2 * *vj + one_b2 * gj * gj;
                        let mhat = *mj * inv_bc1;
                        let vhat = *vj * inv_bc2;
                        *pj -= lr * (mhat / (vhat.sqrt() + eps)) + decay * *pj;
                    }
                }
                None => {
                    for ((pj, mj), vj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mj = b1 * *mj;
                        *vj = b2 * *vj;
                        let mhat = *mj * inv_bc1;
                        let vhat = *vj * inv_bc2;
                        *pj -= lr * (mhat / (vhat.sqrt() + eps)) + decay * *pj;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig { lr: 1e-2, weight_decay: wd, ..AdamWConfig::default() }
    }

    #[test]
    fn zero_gradient_is_fixed_point_without_decay() {
        let mut params = vec![Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5)];
        let before = params.clone();
        let mut st = AdamWState::new(cfg(0.0), &params);
        for _ in 0..5 {
            st.step(&mut params, &[Some(Tensor::zeros(&[2, 3]))]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::<f64>::new(&[3], vec![1.0, 1.0, 1.0]).unwrap()];
        let mut st = AdamWState::new(cfg(0.0), &params);
        let g = Tensor::new(&[3], vec![0.3, -2.0, 1e-3]).unwrap();
        st.step(&mut params, &[Some(g.clone())]).unwrap();
        for (&p, &gv) in params[0].data().iter().zip(g.data()) {
            let expect = 1.0 - 1e-2 * gv / (gv.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
            assert!((p - (1.0 - 1e-2 * gv.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let wd = 0.1;
        let mut params = vec![Tensor::<f64>::new(&[2], vec![2.0, -4.0]).unwrap()];
        let mut st = AdamWState::new(cfg(wd), &params);
        for step in 1..=3 {
            st.step(&mut params, &[Some(Tensor::zeros(&[2]))]).unwrap();
            let f = (1.0f64 - 1e-2 * wd).powi(step);
            assert!((params[0].data()[0] - 2.0 * f).abs() < 1e-12);
            assert!((params[0].data()[1] + 4.0 * f).abs() < 1e-12);
        }
        assert!(st.m[0].data().iter().all(|&x| x == 0.0));
        assert!(st.v[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn moments_track_definition() {
        let mut params = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamWState::new(cfg(0.0), &params);
        st.step(&mut params, &[Some(Tensor::scalar(2.0))]).unwrap();
        st.step(&mut params, &[Some(Tensor::scalar(-1.0))]).unwrap();
        let m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0;
        let v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
        assert!((st.m[0].data()[0] - m).abs() < 1e-15);
        assert!((st.v[0].data()[0] - v).abs() < 1e-15);
        assert!(st.v[0].data()[0] >= 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamWState::new(cfg(0.0), &params);
        let err = st.step(&mut params, &[Some(Tensor::zeros(&[3]))]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert_eq!(st.t, 0);
    }
}
