// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar nonlinearities used by the mixing blocks.

const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

/// `log(1 + e^x)`, returning `x` itself past 30 where the correction is below f64 resolution.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without underflow for very negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Same function as [`silu`]; RetNet calls it swish.
pub fn swish(x: f64) -> f64 {
    silu(x)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

fn gelu_inner(x: f64) -> f64 {
    GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
}

pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    let inner_grad = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner_grad
}

/// `sqrt(1 - e^{2z})` for `z <= 0`, i.e. `sqrt(1 - a^2)` given `z = log a`.
pub fn sqrt_one_minus_exp2(z: f64) -> f64 {
    (-(2.0 * z).exp_m1()).max(0.0).sqrt()
}

pub fn sqrt_one_minus_exp2_grad(z: f64) -> f64 {
    let root = sqrt_one_minus_exp2(z);
    if root == 0.0 {
        0.0
    } else {
        -(2.0 * z).exp() / root
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_reference_points() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        let tiny = softplus(-100.0);
        assert!(tiny >= 0.0 && (tiny - 3.720075976020836e-44).abs() < 1e-56);
        for y in [1e-3, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn gates_at_zero() {
        assert_eq!(silu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(swish(1.3), silu(1.3));
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        type Pair = (fn(f64) -> f64, fn(f64) -> f64);
        let pairs: [Pair; 4] = [
            (sigmoid, sigmoid_grad),
            (silu, silu_grad),
            (gelu, gelu_grad),
            (sqrt_one_minus_exp2, sqrt_one_minus_exp2_grad),
        ];
        for (f, df) in pairs {
            for x in [-2.5, -0.7, -0.1] {
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                assert!((fd - df(x)).abs() < 1e-8, "x={x} fd={fd} df={}", df(x));
            }
        }
    }

    #[test]
    fn sqrt_one_minus_exp2_reference() {
        assert!((sqrt_one_minus_exp2(0.5f64.ln()) - 0.75f64.sqrt()).abs() < 1e-15);
        assert_eq!(sqrt_one_minus_exp2(0.0), 0.0);
        assert_eq!(sqrt_one_minus_exp2(f64::NEG_INFINITY), 1.0);
    }
}
