use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, Real};

/// Adam hyperparameters; defaults are the usual lr=1e-3, β1=0.9, β2=0.999, ε=1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamState {
            step: 0,
            m: store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect(),
            v: store.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched and their moments do not decay.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::shape(format!(
            "adam: state holds {} buffers for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for id in store.ids() {
        let len = store.get(id).len();
        if let Some(g) = grads.get(id) {
            if g.len() != len || state.m[id.0].len() != len || state.v[id.0].len() != len {
                return Err(Error::shape(format!(
                    "adam: gradient/state size mismatch for {} ({len} values)",
                    store.name(id)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for id in store.ids().collect::<Vec<_>>() {
        let Some(g) = grads.get(id) else { continue };
        if !store.get(id).requires_grad {
            continue;
        }
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn setup(vals: &[f64]) -> (ParamStore<f64>, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::from_f64(&[vals.len()], vals).unwrap().trainable()).unwrap();
        (s, id)
    }

    fn grads_of(store: &ParamStore<f64>, id: crate::numerics::ParamId, scale: f64) -> Gradients<f64> {
        let mut t = Tape::new();
        let w = t.param(store, id);
        let s = t.scale(w, scale);
        let l = t.sum(s);
        t.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = setup(&[0.5, -1.0]);
        let g = grads_of(&s, id, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let (mut s, id) = setup(&[0.5, -1.0, 2.0]);
        // constant gradient 3.0 on every coordinate
        let g = grads_of(&s, id, 3.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &g, &mut st, &cfg).unwrap();
        for (after, before) in s.get(id).data().iter().zip([0.5, -1.0, 2.0]) {
            // m̂ = g, v̂ = g², step = lr·g/(|g|+ε)
            let expected = cfg.lr * 3.0 / (3.0 + cfg.eps);
            assert!(((before - after) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut s, id) = setup(&[0.1, 0.2, 0.3]);
            let mut st = AdamState::new(&s);
            for k in 0..5 {
                let g = grads_of(&s, id, 1.0 + k as f64);
                adam_step(&mut s, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            s.get(id).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn state_size_mismatch_is_a_shape_error() {
        let (mut s, id) = setup(&[0.1, 0.2]);
        let g = grads_of(&s, id, 1.0);
        let mut st = AdamState::<f64> { step: 0, m: vec![vec![0.0; 3]], v: vec![vec![0.0; 3]] };
        assert!(matches!(
            adam_step(&mut s, &g, &mut st, &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
