//! Float math for `no_std` builds. With `std` enabled the inherent methods
//! win during resolution, so these shims only bind when building without it.

#![cfg(not(feature = "std"))]
#![allow(dead_code)]

pub(crate) trait FloatMathExt {
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn acos(self) -> Self;
    fn round(self) -> Self;
    fn powi(self, n: i32) -> Self;
}

impl FloatMathExt for f32 {
    fn exp(self) -> f32 {
        libm::expf(self)
    }
    fn ln(self) -> f32 {
        libm::logf(self)
    }
    fn sqrt(self) -> f32 {
        libm::sqrtf(self)
    }
    fn sin(self) -> f32 {
        libm::sinf(self)
    }
    fn cos(self) -> f32 {
        libm::cosf(self)
    }
    fn tanh(self) -> f32 {
        libm::tanhf(self)
    }
    fn acos(self) -> f32 {
        libm::acosf(self)
    }
    fn round(self) -> f32 {
        libm::roundf(self)
    }
    fn powi(self, n: i32) -> f32 {
        libm::powf(self, n as f32)
    }
}

impl FloatMathExt for f64 {
    fn exp(self) -> f64 {
        libm::exp(self)
    }
    fn ln(self) -> f64 {
        libm::log(self)
    }
    fn sqrt(self) -> f64 {
        libm::sqrt(self)
    }
    fn sin(self) -> f64 {
        libm::sin(self)
    }
    fn cos(self) -> f64 {
        libm::cos(self)
    }
    fn tanh(self) -> f64 {
        libm::tanh(self)
    }
    fn acos(self) -> f64 {
        libm::acos(self)
    }
    fn round(self) -> f64 {
        libm::round(self)
    }
    fn powi(self, n: i32) -> f64 {
        libm::pow(self, n as f64)
    }
}
