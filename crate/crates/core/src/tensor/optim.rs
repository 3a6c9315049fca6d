//! SGD with classical momentum.

use super::{Scalar, Tensor, TensorError};

/// Per-parameter optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar = f32> {
    pub learning_rate: T,
    pub momentum: T,
    pub velocity: Tensor<T>,
}

impl<T: Scalar> OptimState<T> {
    /// State for one parameter tensor with the given hyper-parameters.
    pub fn new(learning_rate: T, momentum: T, param: &Tensor<T>) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Tensor::zeros(param.shape()).expect("param shape is valid"),
        }
    }

    /// Default hyper-parameters: learning rate 0.01, momentum 0.9.
    pub fn with_defaults(param: &Tensor<T>) -> Self {
        Self::new(T::from_f64(0.01), T::from_f64(0.9), param)
    }
}

/// One update: v <- momentum * v - lr * grad; param <- param + v.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut OptimState<T>,
) -> Result<(), TensorError> {
    param.same_shape(grad, "sgd_momentum_step grad")?;
    param.same_shape(&state.velocity, "sgd_momentum_step velocity")?;
    let lr = state.learning_rate;
    let mu = state.momentum;
    for ((v, g), p) in state
        .velocity
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(param.data_mut())
    {
        *v = mu * *v - lr * *g;
        *p = *p + *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_with_constant_gradient() {
        // With p0 = 0, g = 1 each step, lr = 0.01, mu = 0.9:
        // v1 = -0.01, p1 = -0.01; v2 = -0.019, p2 = -0.029.
        let mut p = Tensor::new(&[1], vec![0.0f64]).unwrap();
        let g = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let mut st = OptimState::new(0.01, 0.9, &p);
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-15);
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        assert!((p.data()[0] + 0.029).abs() < 1e-15, "p = {}", p.data()[0]);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Tensor::new(&[2], vec![1.0f32, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![2.0f32, -4.0]).unwrap();
        let mut st = OptimState::new(0.5, 0.0, &p);
        sgd_momentum_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]).unwrap();
        let g = Tensor::<f32>::zeros(&[3]).unwrap();
        let mut st = OptimState::with_defaults(&p);
        assert!(sgd_momentum_step(&mut p, &g, &mut st).is_err());
    }

    #[test]
    fn defaults_match_documented_values() {
        let p = Tensor::<f32>::zeros(&[1]).unwrap();
        let st = OptimState::with_defaults(&p);
        assert_eq!(st.learning_rate, 0.01);
        assert_eq!(st.momentum, 0.9);
    }
}
