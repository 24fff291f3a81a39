//! SGD with momentum and Adam over a [`ParamSet`].

use vitdp_core::ParamSet;

use crate::config::OptimizerKind;
use crate::error::TrainError;

/// Per-parameter moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// SGD momentum buffer, or Adam first moment.
    pub first: ParamSet<f32>,
    /// Adam second moment; empty for SGD.
    pub second: ParamSet<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamSet<f32>) -> Self {
        let second = match kind {
            OptimizerKind::Adam { .. } => params.zeros_like(),
            OptimizerKind::Sgd { .. } => ParamSet::new(),
        };
        Self {
            kind,
            first: params.zeros_like(),
            second,
            step: 0,
        }
    }
}

/// Applies one update. `grads` is the flattened gradient in parameter order.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ParamSet<f32>,
    grads: &[f32],
) -> Result<(), TrainError> {
    if grads.len() != params.numel() || !state.first.same_layout(params) {
        return Err(TrainError::Usage(format!(
            "gradient of {} values does not mirror {} parameters",
            grads.len(),
            params.numel()
        )));
    }
    state.step += 1;
    let mut offset = 0;
    match state.kind {
        OptimizerKind::Sgd { lr, momentum } => {
            let (lr, mu) = (lr as f32, momentum as f32);
            for ((_, p), (_, buf)) in params.iter_mut().zip(state.first.iter_mut()) {
                let n = p.len();
                let g = &grads[offset..offset + n];
                for ((p, b), &g) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(g) {
                    *b = mu * *b + g;
                    *p -= lr * *b;
                }
                offset += n;
            }
        }
        OptimizerKind::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let t = state.step as i32;
            let c1 = (1.0 - beta1.powi(t)) as f32;
            let c2 = (1.0 - beta2.powi(t)) as f32;
            let (lr, b1, b2, eps) = (lr as f32, beta1 as f32, beta2 as f32, eps as f32);
            for (((_, p), (_, m)), (_, v)) in params
                .iter_mut()
                .zip(state.first.iter_mut())
                .zip(state.second.iter_mut())
            {
                let n = p.len();
                let g = &grads[offset..offset + n];
                for (((p, m), v), &g) in p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g)
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
                offset += n;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vitdp_core::Tensor;

    fn one(v: f32) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::full(&[1], v));
        p
    }

    fn value(p: &ParamSet<f32>) -> f32 {
        p.get("w").unwrap().data()[0]
    }

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut p = one(1.25);
        let mut s = OptimizerState::new(
            OptimizerKind::Sgd {
                lr: 0.1,
                momentum: 0.0,
            },
            &p,
        );
        optimizer_step(&mut s, &mut p, &[0.0]).unwrap();
        assert_eq!(value(&p), 1.25);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn sgd_single_step() {
        let mut p = one(1.0);
        let mut s = OptimizerState::new(
            OptimizerKind::Sgd {
                lr: 0.1,
                momentum: 0.0,
            },
            &p,
        );
        optimizer_step(&mut s, &mut p, &[1.0]).unwrap();
        assert!((value(&p) - 0.9).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = one(0.0);
        let mut s = OptimizerState::new(
            OptimizerKind::Sgd {
                lr: 1.0,
                momentum: 0.5,
            },
            &p,
        );
        optimizer_step(&mut s, &mut p, &[1.0]).unwrap();
        optimizer_step(&mut s, &mut p, &[1.0]).unwrap();
        // buffers 1, then 1.5
        assert_eq!(value(&p), -2.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3f32, 0.5, -7.0] {
            let mut p = one(0.0);
            let mut s = OptimizerState::new(OptimizerKind::default(), &p);
            optimizer_step(&mut s, &mut p, &[g]).unwrap();
            let moved = value(&p).abs() as f64;
            assert!((moved - 3e-4).abs() < 3e-4 * 1e-3, "g {g}: moved {moved}");
            assert_eq!(value(&p).signum(), -g.signum());
        }
    }

    #[test]
    fn constant_gradient_keeps_adam_steps_near_lr() {
        let mut p = one(0.0);
        let mut s = OptimizerState::new(OptimizerKind::default(), &p);
        let mut last = 0.0;
        for _ in 0..50 {
            optimizer_step(&mut s, &mut p, &[0.2]).unwrap();
            let step = last - value(&p);
            assert!((step as f64 - 3e-4).abs() < 1e-6, "{step}");
            last = value(&p);
        }
        assert_eq!(s.step, 50);
    }

    #[test]
    fn gradient_length_must_match() {
        let mut p = one(0.0);
        let mut s = OptimizerState::new(OptimizerKind::default(), &p);
        assert!(optimizer_step(&mut s, &mut p, &[0.0, 1.0]).is_err());
    }
}
