use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    Mish,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Gelu => gelu(x),
            Activation::Mish => mish(x),
        }
    }

    pub fn grad<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Gelu => gelu_grad(x),
            Activation::Mish => mish_grad(x),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Mish: `x · tanh(softplus(x))`.
pub fn mish<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

pub fn mish_grad<T: Scalar>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_points() {
        assert_eq!(mish(0.0f64), 0.0);
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in [Activation::Silu, Activation::Gelu, Activation::Mish] {
            for &x in &[-30.0, -4.0, -1.3, -0.2, 0.0, 0.7, 2.5, 25.0f64] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.grad(x)).abs() < 1e-7, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn mish_reference_values() {
        // x·tanh(ln(1+e^x)) evaluated independently.
        let reference = |x: f64| x * (1.0 + x.exp()).ln().tanh();
        for &x in &[-3.0, -0.5, 0.5, 1.0, 4.0] {
            assert!((mish(x) - reference(x)).abs() < 1e-14);
        }
    }
}
