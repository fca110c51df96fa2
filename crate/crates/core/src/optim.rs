use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step<'a>(
        &mut self,
        params: &mut ModelParams,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(param) = params.by_name_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.to_owned())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second
                .entry(name.to_owned())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((p, g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Vocab};
    use crate::world::SyntheticWorld;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let vocab = Vocab::from_world(&SyntheticWorld::new(0));
        let mut params = ModelParams::init(ModelConfig::for_vocab(&vocab, 0)).unwrap();
        let before = params.by_name("layer0.q").unwrap().clone();
        let mut grad = Tensor::zeros(before.shape());
        grad.data_mut()[0] = 3.0;
        grad.data_mut()[1] = -0.5;
        let mut adam = Adam::new(0.01);
        adam.step(&mut params, [("layer0.q", &grad)]);
        let after = params.by_name("layer0.q").unwrap();
        assert!((before.data()[0] - after.data()[0] - 0.01).abs() < 1e-9);
        assert!((after.data()[1] - before.data()[1] - 0.01).abs() < 1e-9);
        assert_eq!(before.data()[2], after.data()[2]);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_exact_noop() {
        let vocab = Vocab::from_world(&SyntheticWorld::new(0));
        let mut params = ModelParams::init(ModelConfig::for_vocab(&vocab, 0)).unwrap();
        let snapshot = params.clone();
        let zero = Tensor::zeros(params.by_name("layer1.k").unwrap().shape());
        let mut adam = Adam::new(1.0);
        for _ in 0..3 {
            adam.step(&mut params, [("layer1.k", &zero)]);
        }
        assert!(params.bit_equal(&snapshot));
    }
}
