//! Adaptive-moment optimizer with global-norm gradient clipping.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::math;
use crate::params::ParamStore;
use crate::tensor::{KernelError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm ceiling applied to all gradients before the moment
    /// updates.
    pub clip_norm: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.004,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// First/second moment estimates plus the bias-correction step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

/// What one step did: the pre-clip global gradient norm and whether the
/// ceiling engaged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One optimizer step over every trainable parameter with a gradient slot
/// filled in. Rejects non-finite gradients, naming the offending parameter;
/// the store is untouched in that case.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<StepReport, KernelError> {
    if hyper.clip_norm <= 0.0 {
        return Err(KernelError::Contract {
            op: "adam_step",
            detail: "clip_norm must be positive".to_string(),
        });
    }

    let mut sq = 0.0;
    let mut touched: Vec<String> = Vec::new();
    for (name, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        if let Some(g) = &p.grad {
            if !g.is_finite() {
                return Err(KernelError::NonFinite {
                    op: "adam_step",
                    detail: format!("gradient of {name:?} is non-finite"),
                });
            }
            sq += g.sq_norm();
            touched.push(name.to_string());
        }
    }
    let norm = math::sqrt(sq);
    let scale = if norm > hyper.clip_norm {
        hyper.clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - math::powf(hyper.beta1, t);
    let bc2 = 1.0 - math::powf(hyper.beta2, t);

    for name in &touched {
        let g = {
            let p = params.get(name)?;
            p.grad.clone().expect("gradient present")
        };
        let shape = g.shape().to_vec();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape.clone())));

        let mut value = params.value(name)?.clone();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i] * scale;
            let mi = hyper.beta1 * m.data()[i] + (1.0 - hyper.beta1) * gi;
            let vi = hyper.beta2 * v.data()[i] + (1.0 - hyper.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *x -= hyper.lr * m_hat / (math::sqrt(v_hat) + hyper.eps);
        }
        params.set_value(name, value)?;
    }

    Ok(StepReport {
        grad_norm: norm,
        clipped: scale < 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, value: &[f64], grad: Option<&[f64]>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::vector(value.to_vec())).unwrap();
        if let Some(g) = grad {
            s.accumulate_grad(name, &Tensor::vector(g.to_vec())).unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged_and_decays_moments() {
        let mut params = store_with("p", &[1.5, -0.5], Some(&[0.0, 0.0]));
        let mut state = AdamState::default();
        let hyper = AdamHyper::default();

        // seed the moments with one non-zero step first
        params.zero_grads();
        params
            .accumulate_grad("p", &Tensor::vector(vec![0.2, -0.1]))
            .unwrap();
        adam_step(&mut params, &mut state, &hyper).unwrap();
        let after_first = params.value("p").unwrap().clone();
        let m_before = state.moments["p"].0.clone();

        params.zero_grads();
        params
            .accumulate_grad("p", &Tensor::vector(vec![0.0, 0.0]))
            .unwrap();
        adam_step(&mut params, &mut state, &hyper).unwrap();
        assert_eq!(params.value("p").unwrap(), &after_first);
        let m_after = &state.moments["p"].0;
        for (b, a) in m_before.data().iter().zip(m_after.data()) {
            assert!((a - b * hyper.beta1).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_halves_a_norm_2_gradient() {
        // grad (2, 0) has L2 norm 2; with clip 1.0 the applied gradient is (1, 0)
        let mut params = store_with("p", &[0.0, 0.0], Some(&[2.0, 0.0]));
        let mut state = AdamState::default();
        let hyper = AdamHyper::default();
        let report = adam_step(&mut params, &mut state, &hyper).unwrap();
        assert!(report.clipped);
        assert!((report.grad_norm - 2.0).abs() < 1e-15);
        assert!((state.moments["p"].0.data()[0] - (1.0 - hyper.beta1) * 1.0).abs() < 1e-15);

        // same start with a pre-halved gradient and no clipping gives the
        // identical update
        let mut params2 = store_with("p", &[0.0, 0.0], Some(&[1.0, 0.0]));
        let mut state2 = AdamState::default();
        let report2 = adam_step(&mut params2, &mut state2, &hyper).unwrap();
        assert!(!report2.clipped);
        assert_eq!(params.value("p").unwrap(), params2.value("p").unwrap());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for &g in &[0.3, -2.7, 1e-3] {
            let mut params = store_with("p", &[1.0], Some(&[g]));
            let mut state = AdamState::default();
            let hyper = AdamHyper {
                clip_norm: 1e9,
                ..AdamHyper::default()
            };
            adam_step(&mut params, &mut state, &hyper).unwrap();
            let moved = params.value("p").unwrap().data()[0] - 1.0;
            let want = -hyper.lr * g.signum();
            assert!(
                (moved - want).abs() < hyper.lr * 1e-4,
                "g={g} moved {moved} want {want}"
            );
        }
    }

    #[test]
    fn non_finite_gradient_rejected_naming_parameter() {
        let mut params = store_with("theta", &[1.0], Some(&[f64::NAN]));
        let before = params.value("theta").unwrap().clone();
        let mut state = AdamState::default();
        let err = adam_step(&mut params, &mut state, &AdamHyper::default()).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("theta"), "{msg}");
        assert_eq!(params.value("theta").unwrap(), &before);
    }

    #[test]
    fn applied_norm_never_exceeds_clip() {
        for seed in 0..20u64 {
            let mut rng = crate::rng::rng_from(seed);
            let g = crate::rng::standard_normal(&mut rng, 6);
            let scaled = Tensor::vector(g.data().iter().map(|v| v * 3.0).collect());
            let mut params = store_with("p", &[0.0; 6], Some(scaled.data()));
            let mut state = AdamState::default();
            let hyper = AdamHyper::default();
            let report = adam_step(&mut params, &mut state, &hyper).unwrap();
            // reconstruct the applied gradient from the first moment
            let applied: f64 = state.moments["p"]
                .0
                .data()
                .iter()
                .map(|m| {
                    let g = m / (1.0 - hyper.beta1);
                    g * g
                })
                .sum();
            assert!(math::sqrt(applied) <= hyper.clip_norm + 1e-12);
            assert_eq!(report.clipped, report.grad_norm > hyper.clip_norm);
        }
    }

    #[test]
    fn non_positive_clip_rejected() {
        let mut params = store_with("p", &[1.0], Some(&[1.0]));
        let mut state = AdamState::default();
        let hyper = AdamHyper {
            clip_norm: 0.0,
            ..AdamHyper::default()
        };
        assert!(adam_step(&mut params, &mut state, &hyper).is_err());
    }
}
