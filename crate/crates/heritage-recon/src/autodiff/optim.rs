//! Adam optimizer over a `ParamSet`.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine-decay the learning rate to zero over this many steps; constant
    /// rate when absent.
    pub cosine_decay_steps: Option<u64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine_decay_steps: None,
        }
    }
}

/// First/second moment accumulators mirroring a `ParamSet`, plus step count.
pub struct AdamState {
    pub config: OptimConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: OptimConfig) -> Self {
        let m = params
            .refs()
            .map(|p| Tensor::zeros(params.value(p).shape().to_vec()))
            .collect();
        let v = params
            .refs()
            .map(|p| Tensor::zeros(params.value(p).shape().to_vec()))
            .collect();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        match self.config.cosine_decay_steps {
            Some(total) if total > 0 => {
                let t = (self.step.min(total)) as f64 / total as f64;
                self.config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.config.lr,
        }
    }

    /// One Adam update. `grads` is indexed like the `ParamSet`; a `None`
    /// entry is a zero gradient (moments still decay). Non-finite gradients
    /// are refused so a poisoned batch cannot corrupt the parameters; the
    /// training harness decides whether to skip or abort.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "gradient list has {} entries for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.refs().zip(grads.iter()) {
            if let Some(g) = g {
                if g.shape() != params.value(p).shape() {
                    return Err(Error::Dimension(format!(
                        "gradient shape {:?} vs parameter {:?} for {}",
                        g.shape(),
                        params.value(p).shape(),
                        params.name(p)
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::Numerical(format!(
                        "poisoned gradient for {}",
                        params.name(p)
                    )));
                }
            }
        }

        self.step += 1;
        let lr = self.effective_lr();
        let OptimConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for (i, p) in params.refs().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let zero_len = m.len();
            let zeros;
            let g: &[f64] = match &grads[i] {
                Some(t) => t.data(),
                None => {
                    zeros = vec![0.0; zero_len];
                    &zeros
                }
            };
            let pv = params.value_mut(p).data_mut();
            for j in 0..pv.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pv[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, named after their parameters.
    pub fn export_arrays(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, p) in params.refs().enumerate() {
            out.push((format!("adam.m.{}", params.name(p)), self.m[i].clone()));
            out.push((format!("adam.v.{}", params.name(p)), self.v[i].clone()));
        }
        out
    }

    pub fn restore_arrays(
        &mut self,
        params: &ParamSet,
        arrays: &std::collections::HashMap<String, Tensor>,
        step: u64,
    ) -> Result<()> {
        for (i, p) in params.refs().enumerate() {
            let name = params.name(p);
            let m = arrays
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint misses adam.m.{name}")))?;
            let v = arrays
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint misses adam.v.{name}")))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::Dimension(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(value: f64) -> (ParamSet, AdamState) {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::scalar(value));
        let state = AdamState::new(&params, OptimConfig::default());
        (params, state)
    }

    #[test]
    fn zero_gradient_leaves_parameters_but_decays_moments() {
        let (mut params, mut state) = scalar_setup(1.5);
        // Prime the moments with one nonzero step.
        state
            .step(&mut params, &[Some(Tensor::scalar(1.0))])
            .unwrap();
        let m_before = state.m[0].data()[0];
        let p_ref = params.by_name("x").unwrap();
        let before = params.value(p_ref).data()[0];
        state.step(&mut params, &[None]).unwrap();
        let m_after = state.m[0].data()[0];
        assert!((m_after - 0.9 * m_before).abs() < 1e-15);
        // Parameter still moves slightly because decayed momentum is nonzero;
        // with moments at zero it would not. Check the zero-moment case:
        let (mut params2, mut state2) = scalar_setup(1.5);
        state2.step(&mut params2, &[None]).unwrap();
        let p2 = params2.by_name("x").unwrap();
        assert_eq!(params2.value(p2).data()[0], 1.5);
        assert!(before != 0.0);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let (mut params, mut state) = scalar_setup(0.0);
        for _ in 0..50 {
            state
                .step(&mut params, &[Some(Tensor::scalar(2.5))])
                .unwrap();
        }
        let p = params.by_name("x").unwrap();
        assert!(params.value(p).data()[0] < 0.0);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        let (mut params, mut state) = scalar_setup(1.0);
        let g = 0.3;
        state.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
        // step 1: m = 0.1 g, v = 0.001 g^2, mh = g, vh = g^2
        // x <- 1 - lr * g / (|g| + eps)
        let expect = 1.0 - 5e-4 * g / (g.abs() + 1e-8);
        let p = params.by_name("x").unwrap();
        assert!((params.value(p).data()[0] - expect).abs() < 1e-12);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let (mut params, mut state) = scalar_setup(1.0);
        let err = state
            .step(&mut params, &[Some(Tensor::scalar(f64::NAN))])
            .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        let p = params.by_name("x").unwrap();
        assert_eq!(params.value(p).data()[0], 1.0);
    }

    #[test]
    fn cosine_decay_reaches_zero() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::scalar(0.0));
        let mut state = AdamState::new(
            &params,
            OptimConfig {
                cosine_decay_steps: Some(100),
                ..OptimConfig::default()
            },
        );
        assert!((state.effective_lr() - 5e-4).abs() < 1e-12);
        state.step = 100;
        assert!(state.effective_lr() < 1e-12);
    }
}
