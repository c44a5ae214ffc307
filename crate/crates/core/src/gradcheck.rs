//! Central finite differences, used as an independent oracle for the tape.

use crate::error::Result;
use crate::layers::HasParameters;
use crate::tensor::{Real, Tensor};

/// Estimates `d f / d theta` for every parameter entry of `model` as
/// `(f(theta + step) - f(theta - step)) / (2 step)`.
///
/// `f` must be deterministic: any solver randomness has to be frozen by the
/// caller. Parameter values are restored exactly after each probe.
pub fn finite_difference_gradient<T, M, F>(model: &mut M, mut f: F, step: T) -> Result<Vec<Tensor<T>>>
where
    T: Real,
    M: HasParameters<T>,
    F: FnMut(&mut M) -> Result<T>,
{
    let shapes: Vec<_> = model.parameters().iter().map(|p| p.value().shape()).collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (pi, shape) in shapes.into_iter().enumerate() {
        let mut g = Tensor::zeros(shape);
        for j in 0..shape.numel() {
            let orig = model.parameters()[pi].value().data()[j];
            model.parameters_mut()[pi].value_mut().data_mut()[j] = orig + step;
            let plus = f(model)?;
            model.parameters_mut()[pi].value_mut().data_mut()[j] = orig - step;
            let minus = f(model)?;
            model.parameters_mut()[pi].value_mut().data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (step + step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Relative error with a `max(1, |reference|)` denominator.
pub fn relative_error(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Parameter;
    use crate::tape::ParamId;

    fn scalar_param(v: f64) -> Vec<Parameter<f64>> {
        vec![Parameter::new(ParamId(0), Tensor::scalar(v))]
    }

    #[test]
    fn square_at_three() {
        let mut p = scalar_param(3.0);
        let g = finite_difference_gradient(
            &mut p,
            |m| {
                let v = m[0].value().data()[0];
                Ok(v * v)
            },
            1e-5,
        )
        .unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
        assert_eq!(p[0].value().data()[0], 3.0);
    }

    #[test]
    fn constant_function() {
        let mut p = scalar_param(-1.25);
        let g = finite_difference_gradient(&mut p, |_| Ok(4.0), 1e-5).unwrap();
        assert!(g[0].data()[0].abs() < 1e-8);
    }

    #[test]
    fn linear_slope_five() {
        let mut p = scalar_param(0.5);
        let g = finite_difference_gradient(&mut p, |m| Ok(5.0 * m[0].value().data()[0] - 2.0), 1e-5)
            .unwrap();
        assert!((g[0].data()[0] - 5.0).abs() < 1e-8);
    }
}
