//! Minimal dense-tensor library with tape-based reverse-mode autodiff,
//! sized for small decoder-only transformers.

pub mod check;
mod graph;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, HeadLayout, Var};
pub use real::{gemm, Real};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in {phase} pass")]
    NonFinite { op: &'static str, phase: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("no gradient for parameter `{name}`")]
    MissingGradient { name: String },
}

/// Concatenate parameter gradients into one vector, in the order given.
///
/// `params` lists `(name, var)` pairs; every var must have received a
/// gradient.
pub fn flatten_grads<T: Real>(grads: &Gradients<T>, params: &[(&str, Var)]) -> Result<Vec<T>, NumericsError> {
    let mut out = Vec::new();
    for (name, v) in params {
        let g = grads.get(*v).ok_or_else(|| NumericsError::MissingGradient { name: name.to_string() })?;
        out.extend_from_slice(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_concatenates_in_given_order() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = g.param(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
        let sa = g.sum(a).unwrap();
        let sb = g.sum(b).unwrap();
        let l = g.add(sa, sb).unwrap();
        let grads = g.backward(l).unwrap();
        let flat = flatten_grads(&grads, &[("a", a), ("b", b)]).unwrap();
        assert_eq!(flat, vec![1.0; 7]);
        let again = flatten_grads(&grads, &[("a", a), ("b", b)]).unwrap();
        assert_eq!(flat, again);
    }

    #[test]
    fn flatten_zero_gradients_and_missing() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let z = g.scale(a, 0.0).unwrap();
        let l = g.sum(z).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(flatten_grads(&grads, &[("a", a)]).unwrap(), vec![0.0, 0.0]);
        let err = flatten_grads(&grads, &[("a", a), ("unused", unused)]).unwrap_err();
        assert_eq!(err, NumericsError::MissingGradient { name: "unused".into() });
    }
}
