//! Named parameter storage and the Adam optimizer.

use super::array::Array4;
use crate::{Error, Result};

/// One named parameter entry.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array4,
    pub trainable: bool,
}

/// Ordered map name -> array. Order is insertion order and is the order used
/// for optimizer updates and checkpoints, so it is stable across runs.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: Vec<Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Array4, trainable: bool) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Param { name: name.to_string(), value, trainable });
        Ok(self.entries.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Array4> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array4> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        Ok(&mut self.entries[i].value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }
}

/// Adam state: per-parameter moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Default learning rate used across the pipeline.
    pub const DEFAULT_LR: f32 = 1e-3;

    pub fn new(params: &ParameterSet, lr: f32) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One Adam update with bias correction. `grads[i]` must be present for
    /// every trainable parameter.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Numeric(format!(
                "adam_step: {} gradient slots for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let p = params.by_index_mut(i);
            if !p.trainable {
                continue;
            }
            let grad = grads[i].as_ref().ok_or_else(|| {
                Error::Numeric(format!("adam_step: missing gradient for {:?}", p.name))
            })?;
            if grad.len() != p.value.len() {
                return Err(Error::Numeric(format!("adam_step: gradient size mismatch for {:?}", p.name)));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let gj = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f32>) -> ParameterSet {
        let mut ps = ParameterSet::new();
        let n = v.len();
        ps.insert("p", Array4::from_vec([1, n, 1, 1], v).unwrap(), true).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut ps = one_param(vec![1.0, -2.0, 3.0]);
        let mut st = AdamState::new(&ps, 1e-3);
        st.step(&mut ps, &[Some(vec![0.0; 3])]).unwrap();
        assert_eq!(ps.get("p").unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_matches_scalar_hand_computation() {
        // With constant gradient g from t=0, the bias-corrected update is
        // exactly -lr * g / (|g| + eps'), i.e. about -lr * sign(g).
        let g = 0.37f32;
        let mut ps = one_param(vec![0.5]);
        let mut st = AdamState::new(&ps, 1e-3);
        st.step(&mut ps, &[Some(vec![g])]).unwrap();
        let m_hat = (1.0 - st.beta1) * g / (1.0 - st.beta1);
        let v_hat = (1.0 - st.beta2) * g * g / (1.0 - st.beta2);
        let want = 0.5 - 1e-3 * m_hat / (v_hat.sqrt() + st.eps);
        let got = ps.get("p").unwrap().data()[0];
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        assert!((got - (0.5 - 1e-3)).abs() < 1e-5, "step should be ~ -lr*sign(g)");
    }

    #[test]
    fn missing_gradient_for_trainable_is_hard_error() {
        let mut ps = one_param(vec![1.0]);
        let mut st = AdamState::new(&ps, 1e-3);
        assert!(st.step(&mut ps, &[None]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("a", Array4::scalar(0.0), true).unwrap();
        assert!(ps.insert("a", Array4::scalar(1.0), true).is_err());
    }
}
