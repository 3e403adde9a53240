use crate::error::{Error, Result};
use crate::pagcn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every tensor of a [`ParamStore`]; entries of
/// non-trainable tensors stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` is the gradient of parameter `i`, `None` for
    /// tensors the loss does not reach (treated as zero). Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        for (e, g) in store.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != e.tensor.shape() {
                    return Err(Error::Shape {
                        name: format!("gradient of {}", e.name),
                        expected: e.tensor.shape().to_vec(),
                        actual: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", e.name)));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grads.get(i).and_then(|g| g.as_ref()).map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(&[1], vec![x]).unwrap(), true);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = vec![Some(Tensor::from_vec(&[1], vec![1.0]).unwrap())];
        adam.step(&mut store, &g, 1e-3).unwrap();
        let p = store.entries()[0].tensor.data()[0];
        assert!((p + 1e-3).abs() / 1e-3 < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &[Some(Tensor::zeros(&[1]))], 1e-3).unwrap();
        assert_eq!(store.entries()[0].tensor.data()[0], 0.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut store = scalar_store(0.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let err = adam
            .step(
                &mut store,
                &[Some(Tensor::from_vec(&[1], vec![f64::NAN]).unwrap())],
                1e-3,
            )
            .unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(adam.step, 0);
    }
}
