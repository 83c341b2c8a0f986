//! Central finite-difference oracle for analytic gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::math;
use crate::params::ParamStore;
use crate::tensor::KernelError;

/// Per-parameter worst relative error between the analytic gradient stored
/// in `params` and a central finite difference of `f`.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

/// Checks the analytic gradients already accumulated in `params` (one
/// backward pass by the caller) against central differences of `f`.
///
/// `f` must be deterministic for fixed parameters; all randomness has to be
/// injected as fixed noise beforehand. This is verified by evaluating `f`
/// twice at the base point and demanding bitwise equality. The relative
/// error per entry is `|analytic - fd| / max(1, |fd|)`; the report keeps the
/// worst entry per parameter.
pub fn finite_diff_report<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
) -> Result<GradReport, KernelError>
where
    F: Fn(&ParamStore) -> Result<f64, KernelError>,
{
    if !(eps > 0.0) {
        return Err(KernelError::Contract {
            op: "finite_diff_check",
            detail: "eps must be positive".to_string(),
        });
    }
    let base_a = f(params)?;
    let base_b = f(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(KernelError::Contract {
            op: "finite_diff_check",
            detail: "f is not deterministic (double evaluation mismatch)".to_string(),
        });
    }

    let mut work = params.snapshot();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();

    let mut per_param = Vec::with_capacity(names.len());
    let mut max_rel = 0.0f64;
    for name in names {
        let analytic = params.grad_or_zero(&name)?;
        let n = analytic.len();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = params.value(&name)?.data()[i];

            let mut t = work.value(&name)?.clone();
            t.data_mut()[i] = orig + eps;
            work.set_value(&name, t)?;
            let plus = f(&work)?;

            let mut t = work.value(&name)?.clone();
            t.data_mut()[i] = orig - eps;
            work.set_value(&name, t)?;
            let minus = f(&work)?;

            let mut t = work.value(&name)?.clone();
            t.data_mut()[i] = orig;
            work.set_value(&name, t)?;

            let fd = (plus - minus) / (2.0 * eps);
            let rel = math::abs(analytic.data()[i] - fd) / f64::max(1.0, math::abs(fd));
            if rel > worst {
                worst = rel;
            }
        }
        if worst > max_rel {
            max_rel = worst;
        }
        per_param.push((name, worst));
    }

    Ok(GradReport {
        per_param,
        max_rel_error: max_rel,
    })
}

/// Max relative error over all trainable parameter entries.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<f64, KernelError>
where
    F: Fn(&ParamStore) -> Result<f64, KernelError>,
{
    Ok(finite_diff_report(f, params, eps)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn linear_loss(p: &ParamStore) -> Result<f64, KernelError> {
        Ok(p.value("w")?.data().iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum())
    }

    #[test]
    fn linear_function_is_exact() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![0.3, -0.7, 1.1])).unwrap();
        params
            .accumulate_grad("w", &Tensor::vector(vec![1.0, 2.0, 3.0]))
            .unwrap();
        let err = finite_diff_check(linear_loss, &params, 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn zero_eps_rejected() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(
            finite_diff_check(linear_loss, &params, 0.0),
            Err(KernelError::Contract { .. })
        ));
    }

    #[test]
    fn nondeterministic_function_detected() {
        use core::cell::Cell;
        let counter = Cell::new(0.0f64);
        let f = |_: &ParamStore| -> Result<f64, KernelError> {
            counter.set(counter.get() + 1.0);
            Ok(counter.get())
        };
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(
            finite_diff_check(f, &params, 1e-5),
            Err(KernelError::Contract { .. })
        ));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![2.0])).unwrap();
        params
            .insert_with("frozen", Tensor::vector(vec![5.0]), false)
            .unwrap();
        params
            .accumulate_grad("w", &Tensor::vector(vec![1.0]))
            .unwrap();
        let report = finite_diff_report(linear_loss, &params, 1e-5).unwrap();
        assert_eq!(report.per_param.len(), 1);
        assert_eq!(report.per_param[0].0, "w");
    }
}
