//! Raw row-major kernels shared by the forward and backward passes.

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]` on row-major buffers.
///
/// With `trans_a` the buffer `a` holds a `k×m` matrix; with `trans_b`, `b`
/// holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // extents, and the length assertion guarantees those are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(sqrt(2/pi) (x + 0.044715 x^3))`, the inner term of tanh-GELU.
pub(crate) fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

pub(crate) fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
