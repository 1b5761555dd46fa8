use crate::scalar::Scalar;

/// Guard on the norm in the squash derivative.
pub const SQUASH_EPS: f64 = 1e-8;

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the ReLU output was zero.
pub fn relu_backward_inplace<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, &out) in dy.iter_mut().zip(y) {
        if out <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = sigmoid(*v);
    }
}

/// Backward through sigmoid given its output `y`.
pub fn sigmoid_backward_inplace<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, &s) in dy.iter_mut().zip(y) {
        *g *= s * (T::one() - s);
    }
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `v = (|s|^2 / (1 + |s|^2)) * s / |s|`, evaluated as `|s| / (1 + |s|^2) * s`.
pub fn squash_vec<T: Scalar>(s: &[T], out: &mut [T]) {
    let n2: T = s.iter().map(|&x| x * x).sum();
    let scale = n2.sqrt() / (T::one() + n2);
    for (o, &x) in out.iter_mut().zip(s) {
        *o = scale * x;
    }
}

/// Squashes every length-`dim` chunk of `s`.
pub fn squash<T: Scalar>(s: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); s.len()];
    for (src, dst) in s.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        squash_vec(src, dst);
    }
    out
}

/// Vector-Jacobian product of [`squash_vec`] at `s`, accumulated into `ds`.
pub fn squash_vec_backward<T: Scalar>(s: &[T], dv: &[T], ds: &mut [T]) {
    let n2: T = s.iter().map(|&x| x * x).sum();
    let n = n2.sqrt();
    let one = T::one();
    let denom = one + n2;
    let f = n / denom;
    let eps = T::lit(SQUASH_EPS);
    // d/ds [f(|s|) s] = f I + f'(|s|)/|s| s s^T,  f'(n) = (1 - n^2) / (1 + n^2)^2
    let coef = if n > eps {
        (one - n2) / (denom * denom) / n
    } else {
        T::zero()
    };
    let dot: T = s.iter().zip(dv).map(|(&a, &b)| a * b).sum();
    for ((g, &x), &d) in ds.iter_mut().zip(s).zip(dv) {
        *g += f * d + coef * dot * x;
    }
}

pub fn squash_backward<T: Scalar>(s: &[T], dv: &[T], dim: usize) -> Vec<T> {
    let mut ds = vec![T::zero(); s.len()];
    for ((src, g), dst) in s
        .chunks_exact(dim)
        .zip(dv.chunks_exact(dim))
        .zip(ds.chunks_exact_mut(dim))
    {
        squash_vec_backward(src, g, dst);
    }
    ds
}
