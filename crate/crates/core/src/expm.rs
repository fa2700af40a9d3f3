//! Matrix exponential by scaling and squaring of a truncated Taylor series.
//!
//! The argument is scaled by `2^-s` until its 1-norm is at most 0.5, the
//! degree-16 Taylor polynomial is evaluated by Horner's rule and the result is
//! squared `s` times. At norm 0.5 the truncation term is below 1e-19, so the
//! relative error is dominated by rounding in the squaring phase.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatView, Tensor};

const TAYLOR_DEGREE: usize = 16;
const SCALED_NORM: f64 = 0.5;

/// `e^M` together with its trace. When any entry leaves the representable
/// range the result is flagged as overflowed and `trace` is `+inf`.
#[derive(Debug, Clone)]
pub struct MatrixExp<T> {
    pub exp: Vec<T>,
    pub trace: T,
    pub overflow: bool,
}

fn matmul_square<T: Scalar>(a: &[T], b: &[T], d: usize, out: &mut [T]) {
    gemm(
        d,
        d,
        d,
        T::one(),
        a,
        MatView::row_major(0, d),
        b,
        MatView::row_major(0, d),
        T::zero(),
        out,
        MatView::row_major(0, d),
    );
}

fn one_norm<T: Scalar>(m: &[T], d: usize) -> f64 {
    (0..d).map(|j| (0..d).map(|i| m[i * d + j].as_f64().abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Exponential of the row-major `d x d` matrix `m`. Inputs are assumed finite.
pub fn expm_raw<T: Scalar>(m: &[T], d: usize) -> MatrixExp<T> {
    debug_assert_eq!(m.len(), d * d);
    let norm = one_norm(m, d);
    let squarings = if norm > SCALED_NORM { (norm / SCALED_NORM).log2().ceil() as i32 } else { 0 };
    let scale = T::from_f64(2f64.powi(-squarings));
    let a: Vec<T> = m.iter().map(|&x| x * scale).collect();

    let mut p = vec![T::zero(); d * d];
    let mut tmp = vec![T::zero(); d * d];
    for i in 0..d {
        p[i * d + i] = T::one();
    }
    for j in (1..=TAYLOR_DEGREE).rev() {
        matmul_square(&a, &p, d, &mut tmp);
        let inv = T::from_f64(1.0 / j as f64);
        for (i, (pv, tv)) in p.iter_mut().zip(&tmp).enumerate() {
            *pv = *tv * inv + if i / d == i % d { T::one() } else { T::zero() };
        }
    }

    let mut overflow = false;
    for _ in 0..squarings {
        matmul_square(&p, &p, d, &mut tmp);
        std::mem::swap(&mut p, &mut tmp);
        if p.iter().any(|x| !x.is_finite()) {
            overflow = true;
            break;
        }
    }
    let mut trace = (0..d).fold(T::zero(), |acc, i| acc + p[i * d + i]);
    if overflow || !trace.is_finite() {
        overflow = true;
        trace = T::infinity();
    }
    MatrixExp { exp: p, trace, overflow }
}

/// Full matrix exponential of a square, finite tensor.
pub fn expm<T: Scalar>(m: &Tensor<T>) -> Result<MatrixExp<T>> {
    let d = m.square_side()?;
    m.ensure_finite("expm argument")?;
    Ok(expm_raw(m.data(), d))
}

/// `tr(e^M)` and whether the evaluation overflowed (`trace = +inf` then).
pub fn expm_trace<T: Scalar>(m: &Tensor<T>) -> Result<(T, bool)> {
    let e = expm(m)?;
    Ok((e.trace, e.overflow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    /// Plain Taylor sum with no scaling, adequate for small norms.
    fn taylor_trace(m: &[f64], d: usize, terms: usize) -> f64 {
        let mut term = vec![0.0; d * d];
        for i in 0..d {
            term[i * d + i] = 1.0;
        }
        let mut sum = term.clone();
        for j in 1..terms {
            let mut next = vec![0.0; d * d];
            for r in 0..d {
                for c in 0..d {
                    next[r * d + c] = (0..d).map(|k| term[r * d + k] * m[k * d + c]).sum::<f64>() / j as f64;
                }
            }
            term = next;
            for (s, t) in sum.iter_mut().zip(&term) {
                *s += t;
            }
        }
        (0..d).map(|i| sum[i * d + i]).sum()
    }

    #[test]
    fn zero_matrix_gives_dimension() {
        let (tr, of) = expm_trace(&Tensor::<f64>::zeros(&[64, 64])).unwrap();
        assert_eq!(tr, 64.0);
        assert!(!of);
    }

    #[test]
    fn identity_gives_d_times_e() {
        let (tr, of) = expm_trace(&Tensor::<f64>::eye(64)).unwrap();
        assert!(!of);
        assert!((tr - 64.0 * std::f64::consts::E).abs() / tr < 1e-13);
        assert!((tr - 173.97).abs() < 0.01);
    }

    #[test]
    fn nilpotent_trace_is_exact() {
        let d = 8;
        let m =
            Tensor::<f64>::from_fn(&[d, d], |i| if i % d > i / d { 1.0 + (i as f64 * 0.37).sin() * 3.0 } else { 0.0 });
        let (tr, _) = expm_trace(&m).unwrap();
        assert_eq!(tr, 8.0);
    }

    #[test]
    fn all_ones_matches_taylor_oracle() {
        let m = Tensor::<f64>::ones(&[2, 2]);
        let oracle = taylor_trace(m.data(), 2, 30);
        let (tr, _) = expm_trace(&m).unwrap();
        assert!((tr - oracle).abs() / oracle < 1e-12);
        let closed = std::f64::consts::E.powi(2) + 1.0;
        assert!((oracle - closed).abs() < 1e-12);
        assert!((tr - 8.3891).abs() < 1e-4);
    }

    #[test]
    fn large_norm_overflows_to_sentinel() {
        let m = Tensor::<f64>::full(&[4, 4], 500.0);
        let (tr, of) = expm_trace(&m).unwrap();
        assert!(of);
        assert_eq!(tr, f64::INFINITY);
        let m32 = Tensor::<f32>::full(&[4, 4], 30.0);
        let (tr32, of32) = expm_trace(&m32).unwrap();
        assert!(of32 && tr32.is_infinite());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(expm_trace(&Tensor::<f64>::zeros(&[2, 3])), Err(Error::Dimension(_))));
        let mut m = Tensor::<f64>::zeros(&[2, 2]);
        m.data_mut()[1] = f64::NAN;
        assert!(matches!(expm_trace(&m), Err(Error::Input(_))));
    }

    #[test]
    fn moderate_norm_relative_accuracy() {
        // diagonal matrix with known exponential, norm 64
        let d = 4;
        let diag = [64.0, -3.0, 0.5, 10.0];
        let m = Tensor::<f64>::from_fn(&[d, d], |i| if i / d == i % d { diag[i / d] } else { 0.0 });
        let exact: f64 = diag.iter().map(|x: &f64| x.exp()).sum();
        let (tr, _) = expm_trace(&m).unwrap();
        assert!((tr - exact).abs() / exact < 1e-8);
    }
}
