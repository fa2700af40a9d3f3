//! Forward kernels shared by the tape and the standalone tensor functions.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default floor applied before taking logarithms in [`elementwise_power`].
pub const POWER_FLOOR: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline(always)]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_fast())
}

/// Swish / SiLU: `x * sigmoid(x)`.
#[inline(always)]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline(always)]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `x * silu(x) = x^2 * sigmoid(x)`, nonnegative everywhere.
#[inline(always)]
pub fn iswiglu_scalar<T: Scalar>(x: T) -> T {
    x * silu(x)
}

#[inline(always)]
pub(crate) fn iswiglu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    let two = T::from_f64(2.0);
    two * x * s + x * x * s * (T::one() - s)
}

pub fn iswiglu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| iswiglu_scalar(v)).collect()).expect("same shape")
}

/// Maps an index of a large tensor onto a smaller operand that is repeated
/// along some axes: the small operand is `groups` blocks of `block` elements,
/// and each block is reused for `repeat` consecutive blocks of the large one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Broadcast {
    pub block: usize,
    pub repeat: usize,
    pub groups: usize,
}

impl Broadcast {
    pub fn same(n: usize) -> Self {
        Self { block: n.max(1), repeat: 1, groups: 1 }
    }

    /// The same `block` reused everywhere.
    pub fn tile(block: usize) -> Self {
        Self { block, repeat: 1, groups: 1 }
    }

    pub fn small_len(&self) -> usize {
        self.block * self.groups
    }

    #[inline]
    pub fn map(&self, i: usize) -> usize {
        ((i / (self.block * self.repeat)) % self.groups) * self.block + i % self.block
    }

    pub(crate) fn check(&self, large: usize, small: usize) -> Result<()> {
        if self.block == 0 || small != self.small_len() || large % (self.block * self.repeat) != 0 {
            return Err(dim_err!("cannot broadcast {} elements over {} with {:?}", small, large, self));
        }
        Ok(())
    }
}

pub(crate) fn power_forward<T: Scalar>(a: &[T], p: &[T], map: Broadcast, floor: T) -> Result<Vec<T>> {
    if let Some(bad) = a.iter().find(|x| !(**x >= T::zero())) {
        return Err(Error::Input(format!("elementwise power base must be nonnegative, found {bad}")));
    }
    Ok(a.iter().enumerate().map(|(i, &x)| x.max(floor).powf(p[map.map(i)])).collect())
}

/// `max(A, floor) ^ P` elementwise for same-shaped `A` and `P`.
pub fn elementwise_power<T: Scalar>(a: &Tensor<T>, p: &Tensor<T>, floor: T) -> Result<Tensor<T>> {
    if a.shape() != p.shape() {
        return Err(dim_err!("power: base {:?} vs exponent {:?}", a.shape(), p.shape()));
    }
    if !(floor > T::zero()) {
        return Err(Error::Input("power floor must be positive".into()));
    }
    let out = power_forward(a.data(), p.data(), Broadcast::same(a.numel()), floor)?;
    Tensor::new(a.shape(), out)
}

/// Row softmax over `cols`-wide rows; `mask[i]` (tiled over rows blocks of the
/// mask length) marks disallowed positions, which come out as exact zeros.
pub(crate) fn masked_softmax_rows<T: Scalar>(s: &[T], cols: usize, mask: Option<&[bool]>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); s.len()];
    for (r, (row, orow)) in s.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let allowed = |j: usize| match mask {
            Some(m) => !m[(r * cols + j) % m.len()],
            None => true,
        };
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                if v.is_nan() {
                    return Err(Error::Input(format!("softmax row {r} has a NaN score")));
                }
                if v > max {
                    max = v;
                }
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::Contract(format!("softmax row {r} is fully masked")));
        }
        let mut sum = T::zero();
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if allowed(j) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Softmax over the last dimension of `s`; `mask` has the shape of one
/// trailing matrix (or of `s`) and `true` marks disallowed positions.
pub fn masked_softmax<T: Scalar>(s: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let cols = s.last_dim();
    if let Some(m) = mask {
        if m.is_empty() || s.numel() % m.len() != 0 || m.len() % cols != 0 {
            return Err(dim_err!("mask of length {} does not tile {:?}", m.len(), s.shape()));
        }
    }
    Tensor::new(s.shape(), masked_softmax_rows(s.data(), cols, mask)?)
}

/// Lower-triangular causal mask for `n` positions (`true` = future).
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n > i / n).collect()
}

pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> (Vec<T>, LayerNormCache<T>) {
    let width = gain.len();
    let nf = T::from_f64(width as f64);
    let rows = x.len() / width;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for ((row, yr), hr) in x.chunks(width).zip(y.chunks_mut(width)).zip(xhat.chunks_mut(width)) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::one() / (var + eps).sqrt();
        for j in 0..width {
            hr[j] = (row[j] - mean) * r;
            yr[j] = hr[j] * gain[j] + bias[j];
        }
        rstd.push(r);
    }
    (y, LayerNormCache { xhat, rstd })
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over a single vector.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(dim_err!("layer_norm of an empty vector"));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(dim_err!("layer_norm widths: x {}, gain {}, bias {}", x.len(), gain.len(), bias.len()));
    }
    Ok(layer_norm_rows(x, gain, bias, eps).0)
}

/// Cosine and sine tables `[positions.len(), d/2]` for rotary embeddings.
pub(crate) fn rotary_tables<T: Scalar>(positions: &[usize], d: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
            cos.push(T::from_f64(theta.cos()));
            sin.push(T::from_f64(theta.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs `(2i, 2i+1)` of `x: [.., t, d]`, where row `t`
/// uses table row `t % table_rows`.
pub(crate) fn rotary_rows<T: Scalar>(x: &[T], d: usize, cos: &[T], sin: &[T], inverse: bool) -> Vec<T> {
    let half = d / 2;
    let table_rows = cos.len() / half;
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, orow)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let t = r % table_rows;
        for i in 0..half {
            let c = cos[t * half + i];
            let s = if inverse { -sin[t * half + i] } else { sin[t * half + i] };
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            orow[2 * i] = x0 * c - x1 * s;
            orow[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    out
}

/// Rotary position embedding of `x: (n_tok x d)` at the given positions.
pub fn rotary_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d % 2 != 0 {
        return Err(Error::Config(format!("rotary width must be even, got {d}")));
    }
    if x.rank() != 2 || x.shape()[0] != positions.len() {
        return Err(dim_err!("rotary expects ({} x d) rows, got {:?}", positions.len(), x.shape()));
    }
    let (cos, sin) = rotary_tables::<T>(positions, d, base);
    Tensor::new(x.shape(), rotary_rows(x.data(), d, &cos, &sin, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iswiglu_values() {
        assert_eq!(iswiglu_scalar(0.0f64), 0.0);
        assert!((iswiglu_scalar(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((iswiglu_scalar(-1.0f64) - 0.268_941_421_369_995_1).abs() < 1e-12);
        for i in -200..200 {
            assert!(iswiglu_scalar(i as f64 * 0.37) >= 0.0);
        }
    }

    #[test]
    fn power_examples() {
        let a = Tensor::<f64>::from_f64(&[1, 3], &[4.0, 0.0, 2.5e-13]).unwrap();
        let ones = Tensor::<f64>::ones(&[1, 3]);
        let y = elementwise_power(&a, &ones, 1e-12).unwrap();
        assert_eq!(y.data(), &[4.0, 1e-12, 1e-12]);
        let p = Tensor::<f64>::from_f64(&[1, 3], &[0.5, 2.0, 1.0]).unwrap();
        let y = elementwise_power(&a, &p, 1e-12).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-15);
        assert!((y.data()[1] - 1e-24).abs() < 1e-36);
        let neg = Tensor::<f64>::from_f64(&[1, 1], &[-1.0]).unwrap();
        assert!(matches!(elementwise_power(&neg, &Tensor::ones(&[1, 1]), 1e-12), Err(Error::Input(_))));
    }

    #[test]
    fn power_identity_exponent_is_exact() {
        let a = Tensor::<f64>::from_fn(&[7, 7], |i| (i as f64 * 0.731).sin().abs() * 10f64.powi(i as i32 % 9 - 6));
        let y = elementwise_power(&a, &Tensor::ones(&[7, 7]), 1e-12).unwrap();
        for (x, v) in a.data().iter().zip(y.data()) {
            assert_eq!(*v, x.max(1e-12));
        }
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(masked_softmax(&s, None).unwrap().data(), &[0.5, 0.5]);
        let s = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 9.0]).unwrap();
        assert_eq!(masked_softmax(&s, Some(&[false, true])).unwrap().data(), &[1.0, 0.0]);
        let s = Tensor::<f64>::from_f64(&[1, 2], &[1f64.ln(), 3f64.ln()]).unwrap();
        let y = masked_softmax(&s, None).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(masked_softmax(&s, Some(&[true, true])), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_mask_shape() {
        assert_eq!(causal_mask(2), vec![false, true, false, false]);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[3.0f64; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        let y = layer_norm(&[-1.0f64, 1.0], &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
        let y = layer_norm(&[0.0f64, 2.0], &[2.0; 2], &[1.0; 2], 1e-14).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 3.0).abs() < 1e-12);
        assert!(layer_norm::<f64>(&[], &[], &[], 1e-5).is_err());
    }

    #[test]
    fn rotary_examples() {
        let x = Tensor::<f64>::from_f64(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = rotary_apply(&x, &[0, 0], 10000.0).unwrap();
        assert_eq!(y.data()[..4], x.data()[..4]);
        let u = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let y = rotary_apply(&u, &[3], 10000.0).unwrap();
        assert!((y.data()[0] - 3f64.cos()).abs() < 1e-15);
        assert!((y.data()[1] - 3f64.sin()).abs() < 1e-15);
        let odd = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(rotary_apply(&odd, &[0], 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn broadcast_mapping() {
        // large [B=2, h=3, T=2, 4] over small [h=3, 4]
        let map = Broadcast { block: 4, repeat: 2, groups: 3 };
        assert_eq!(map.map(0), 0);
        assert_eq!(map.map(4), 0);
        assert_eq!(map.map(8 + 1), 5);
        assert_eq!(map.map(24 + 8 + 3), 7);
        assert!(map.check(48, 12).is_ok());
        assert!(map.check(48, 8).is_err());
    }
}
