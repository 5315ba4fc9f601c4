//! Special functions backing the inference statistics: the standard normal
//! CDF, the regularized incomplete beta function and Student's t tail
//! probabilities (real-valued degrees of freedom).
//!
//! The incomplete beta uses the classic continued-fraction expansion with
//! Lentz's algorithm; log-gamma comes from `libm`.

use crate::error::{Error, Result};
use alloc::format;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * core::f64::consts::FRAC_1_SQRT_2)
}

/// Two-sided normal p-value for a z statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(libm::fabs(z) * core::f64::consts::FRAC_1_SQRT_2)
}

/// 97.5% standard normal quantile, fixing the 95% interval width.
pub const Z_975: f64 = 1.959963984540054;

fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> Result<f64> {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < EPS {
            return Ok(h);
        }
    }
    Err(Error::Numeric(format!("incomplete beta failed to converge (a={a}, b={b}, x={x})")))
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn betainc(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Numeric("betainc needs positive shape parameters".into()));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Numeric(format!("betainc x={x} outside [0, 1]")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let front =
        libm::exp(a * libm::log(x) + b * libm::log(1.0 - x) - ln_beta(a, b));
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * betacf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * betacf(b, a, 1.0 - x)? / b)
    }
}

/// Two-sided p-value of a Student t statistic with (possibly fractional)
/// degrees of freedom: `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::Numeric(format!("degrees of freedom must be positive, got {df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    if !t.is_finite() {
        return Err(Error::Numeric("non-finite t statistic".into()));
    }
    betainc(0.5 * df, 0.5, df / (df + t * t))
}
