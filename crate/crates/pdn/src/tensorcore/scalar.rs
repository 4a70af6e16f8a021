/// Numerically stable softplus: ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|}).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus, the logistic sigmoid, computed without overflow.
#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable ln(1 - e^{-x}) for x > 0, branching at ln 2.
///
/// Below the branch point `exp(-x)` is close to 1 and `ln(-expm1(-x))`
/// keeps precision; above it `ln_1p(-exp(-x))` does.
#[inline]
pub fn log1mexp(x: f64) -> f64 {
    debug_assert!(x > 0.0, "log1mexp needs a positive argument");
    if x <= std::f64::consts::LN_2 {
        (-(-x).exp_m1()).ln()
    } else {
        (-(-x).exp()).ln_1p()
    }
}

#[inline]
pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        alpha
    }
}
