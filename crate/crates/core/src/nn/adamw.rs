use alloc::vec::Vec;

use super::params::{GroupFilter, ModelParams, ParamTensor};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros_like(tensors: &[ParamTensor]) -> Self {
        Self {
            step: 0,
            m: tensors.iter().map(|t| alloc::vec![0.0; t.value.len()]).collect(),
            v: tensors.iter().map(|t| alloc::vec![0.0; t.value.len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(0.0));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// One AdamW update (decoupled weight decay) on the tensors whose group is in
/// `filter`. Tensors without a gradient entry are skipped, moments included.
/// `grads` holds `(tensor id, gradient)` pairs.
pub fn adamw_step(params: &mut ModelParams, grads: &[(usize, Matrix)], hyper: &AdamHyper, filter: GroupFilter) -> Result<()> {
    let st = &mut params.optimizer;
    if st.m.len() != params.tensors.len()
        || st.v.len() != params.tensors.len()
        || params.tensors.iter().zip(&st.m).any(|(t, m)| t.value.len() != m.len())
    {
        return Err(Error::StateMismatch);
    }
    for (id, g) in grads {
        if *id >= params.tensors.len() || g.len() != params.tensors[*id].value.len() {
            return Err(Error::StateMismatch);
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let bc1 = 1.0 - libm::pow(hyper.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(hyper.beta2, t as f64);
    let step_size = hyper.lr / bc1;
    let bc2_sqrt = libm::sqrt(bc2);
    for (id, g) in grads {
        let tensor = &mut params.tensors[*id];
        if !filter.contains(tensor.group) {
            continue;
        }
        let decay = if tensor.decay { hyper.lr * hyper.weight_decay } else { 0.0 };
        let (m, v) = (&mut st.m[*id], &mut st.v[*id]);
        for (((p, gi), mi), vi) in tensor.value.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p *= 1.0 - decay;
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let denom = libm::sqrt(*vi) / bc2_sqrt + hyper.eps;
            *p -= step_size * *mi / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Group, ModelConfig};

    fn params() -> ModelParams {
        ModelParams::new(ModelConfig::desk()).unwrap()
    }

    fn full_grads(p: &ModelParams, value: f64) -> Vec<(usize, Matrix)> {
        p.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (i, Matrix::from_vec(t.value.rows, t.value.cols, alloc::vec![value; t.value.len()])))
            .collect()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = params();
        let before = p.clone();
        let g = full_grads(&p, 0.0);
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        adamw_step(&mut p, &g, &hyper, GroupFilter::all()).unwrap();
        for (a, b) in p.tensors.iter().zip(&before.tensors) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(p.optimizer.step, 1);
    }

    #[test]
    fn excluded_group_is_bit_identical() {
        let mut p = params();
        let before = p.clone();
        let g = full_grads(&p, 0.3);
        adamw_step(&mut p, &g, &AdamHyper::default(), GroupFilter::test_time()).unwrap();
        assert!(p.group_bits_equal(&before, Group::Classifier));
        assert!(!p.group_bits_equal(&before, Group::Encoder));
    }

    /// Two steps on a single weight, expanded by hand:
    /// lr=0.1, b1=0.9, b2=0.999, eps=1e-8, wd=0.01, p0=1.0, g1=0.5, g2=-0.25.
    #[test]
    fn two_step_recurrence_matches_hand_table() {
        let mut p = params();
        let id = p.tensors.iter().position(|t| t.decay).unwrap();
        p.tensors[id].value.data[0] = 1.0;
        let hyper = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let shape = (p.tensors[id].value.rows, p.tensors[id].value.cols);
        let mk = |v: f64| {
            let mut m = Matrix::zeros(shape.0, shape.1);
            m.data[0] = v;
            alloc::vec![(id, m)]
        };
        // step 1: p = 1*(1-0.001) = 0.999; m = 0.05; v = 0.00025
        // m_hat = 0.5, v_hat = 0.25 -> update = 0.1 * 0.5/(0.5+1e-8)
        let p1 = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8);
        adamw_step(&mut p, &mk(0.5), &hyper, GroupFilter::all()).unwrap();
        assert!((p.tensors[id].value.data[0] - p1).abs() < 1e-15);
        // step 2: p = p1*0.999; m = 0.045 - 0.025 = 0.02; v = 0.00024975 + 0.0000625
        let m2: f64 = 0.9 * 0.05 + 0.1 * -0.25;
        let v2: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let bc1 = 1.0 - 0.81;
        let bc2: f64 = 1.0 - 0.999 * 0.999;
        let p2 = p1 * 0.999 - (0.1 / bc1) * m2 / (v2.sqrt() / bc2.sqrt() + 1e-8);
        adamw_step(&mut p, &mk(-0.25), &hyper, GroupFilter::all()).unwrap();
        assert!((p.tensors[id].value.data[0] - p2).abs() < 1e-14, "{} vs {}", p.tensors[id].value.data[0], p2);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = params();
        p.optimizer.m.pop();
        assert_eq!(adamw_step(&mut p, &[], &AdamHyper::default(), GroupFilter::all()), Err(Error::StateMismatch));
    }
}
