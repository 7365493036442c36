//! Central-difference verification of tape adjoints.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// parameter name and flat index of the worst coordinate
    pub worst: Option<(String, usize)>,
    /// trainable parameters that received no gradient from the tape
    pub missing: Vec<String>,
    pub checked: usize,
}

/// Coordinates visited per parameter: all of them, or an evenly strided subset.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    AtMost(usize),
}

fn coords(len: usize, coverage: Coverage) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..len).collect(),
        Coverage::AtMost(k) if k >= len => (0..len).collect(),
        Coverage::AtMost(k) => {
            let k = k.max(1);
            (0..k).map(|i| i * len / k).collect()
        }
    }
}

/// Checks every trainable parameter in `store` for the scalar built by `f`.
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("grad_check: eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let l = f(&mut t, s)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).requires_grad {
            continue;
        }
        let name = store.name(id).to_string();
        let Some(analytic) = grads.get(id) else {
            report.missing.push(name);
            continue;
        };
        let analytic = analytic.to_vec();
        for i in coords(analytic.len(), coverage) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Single-tensor form: checks `f(θ)` with respect to every entry of `theta`.
pub fn grad_check_tensor<F>(theta: &Tensor<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.insert("theta", theta.clone().trainable())?;
    grad_check(&store, eps, Coverage::All, |tape, s| {
        let v = tape.param(s, id);
        f(tape, v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let theta = Tensor::from_f64(&[2, 3], &[0.3, -0.7, 1.2, 0.0, 2.5, -1.1]).unwrap();
        let r = grad_check_tensor(&theta, 1e-5, |t, v| Ok(t.sum(v))).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn tanh_sum_matches_central_difference() {
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7919) % 200) as f64 / 100.0 - 1.0).collect();
        let theta = Tensor::from_f64(&[16], &vals).unwrap();
        let r = grad_check_tensor(&theta, 1e-5, |t, v| {
            let h = t.tanh(v);
            Ok(t.sum(h))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn disconnected_parameter_is_reported() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().trainable()).unwrap();
        store.insert("unused", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap().trainable()).unwrap();
        let r = grad_check(&store, 1e-5, Coverage::All, |t, s| {
            let v = t.param(s, a);
            Ok(t.sum(v))
        })
        .unwrap();
        assert_eq!(r.missing, vec!["unused".to_string()]);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let theta = Tensor::from_f64(&[1], &[0.5]).unwrap();
        assert!(grad_check_tensor(&theta, 1e-2, |t, v| Ok(t.sum(v))).is_err());
    }

    #[test]
    fn non_finite_objective_is_a_numeric_error() {
        let theta = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let err = grad_check_tensor(&theta, 1e-5, |t, v| {
            let z = t.scale(v, f64::INFINITY);
            Ok(t.sum(z))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
}
