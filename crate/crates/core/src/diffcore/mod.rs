//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records primitives as they are evaluated. Parameters live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`]; [`Tape::backward`]
//! returns a [`GradientVector`] laid out in parameter registration order.
//!
//! ```
//! use marlbar::diffcore::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let x = store.register("x", Tensor::scalar(3.0));
//! let mut tape = Tape::new();
//! let xv = tape.param(&store, x);
//! let y = tape.mul(xv, xv).unwrap();
//! let g = tape.backward(y, &store).unwrap();
//! assert_eq!(g[0], 6.0);
//! ```

mod check;
mod params;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use params::{GradientVector, ParamId, ParamStore};
pub use tape::{argmax, huber, sigmoid, softplus, Axis, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("non-finite loss while probing parameter {index}")]
    NonFinite { index: usize },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let a = t.constant(mat(2, 2, &[1.0, -2.0, 3.5, 4.0]));
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, -2.0, 3.5, 4.0]);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut t = Tape::new();
        let x = t.scalar(-3.0);
        let y = t.relu(x);
        assert_eq!(t.value(y).item(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        match t.matmul(a, b) {
            Err(DiffError::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
        let c = t.constant(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(DiffError::Shape { op: "add", .. })));
    }

    #[test]
    fn square_and_abs_derivatives() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(3.0));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let y = t.mul(xv, xv).unwrap();
        assert_eq!(t.backward(y, &store).unwrap()[0], 6.0);

        store.get_mut(x).data_mut()[0] = -2.0;
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let y = t.abs(xv);
        assert_eq!(t.backward(y, &store).unwrap()[0], -1.0);
    }

    #[test]
    fn subgradients_at_kinks_are_zero() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(0.0));
        for f in [Tape::relu, Tape::abs] {
            let mut t = Tape::new();
            let xv = t.param(&store, x);
            let y = f(&mut t, xv);
            assert_eq!(t.backward(y, &store).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn max_ties_pick_lowest_index() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::row(vec![1.0, 5.0, 5.0]));
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let m = t.max_axis(xv, Axis::Cols);
        let g = t.backward(m, &store).unwrap();
        assert_eq!(g.0, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(1, 2));
        assert!(matches!(t.backward(a, &store), Err(DiffError::NonScalar { .. })));
    }

    #[test]
    fn cosine_embedding_at_zero_level() {
        // cos(pi * i * 0) = 1 so the embedding is relu(sum(w) + b)
        let d = 4;
        let w = [0.5, -0.25, 1.0, 0.125];
        let b = -0.2;
        let mut t = Tape::new();
        let tau = t.constant(Tensor::scalar(0.0));
        let basis = t.constant(Tensor::row((0..d).map(|i| std::f64::consts::PI * i as f64).collect()));
        let arg = t.matmul(tau, basis).unwrap();
        let c = t.cos(arg);
        let wv = t.constant(Tensor::column(w.to_vec()));
        let pre = t.matmul(c, wv).unwrap();
        let bv = t.scalar(b);
        let pre = t.add(pre, bv).unwrap();
        let out = t.relu(pre);
        let expected: f64 = w.iter().sum::<f64>() + b;
        assert_eq!(t.value(out).item(), expected.max(0.0));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w = store.register_uniform("w", 4, 3, 1.0, &mut rng);
        let x = Tensor::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        let run = || {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param(&store, w);
            let h = t.matmul(xv, wv).unwrap();
            let h = t.softplus(h);
            let s = t.sum_all(h);
            let g = t.backward(s, &store).unwrap();
            (t.value(s).item().to_bits(), g.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut store = ParamStore::new();
        let bias = store.register("b", Tensor::row(vec![0.0, 0.0]));
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(3, 2));
        let bv = t.param(&store, bias);
        let y = t.add(x, bv).unwrap();
        let s = t.sum_all(y);
        assert_eq!(t.backward(s, &store).unwrap().0, vec![3.0, 3.0]);
    }
}
