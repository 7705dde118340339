//! Scalar special functions needed by the closed-form expected-TV result:
//! log-gamma and the regularized incomplete beta function.

use crate::error::{Error, Result};

// Lanczos approximation, g = 7, 9 coefficients; ~15 significant digits.
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().abs().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = LANCZOS[0];
        for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

const MAX_ITER: usize = 500;
const EPS: f64 = 3e-16;
const FPMIN: f64 = 1e-300;

/// Regularized incomplete beta function I_x(a, b), evaluated with the
/// modified Lentz continued fraction. The symmetry transform keeps the
/// fraction in its fast-converging region; absolute error is well under
/// 1e-12 over the parameter ranges used here. Degenerate shape parameters
/// (a = 0 or b = 0) are treated as the point-mass limits.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !x.is_finite() {
        return Err(Error::InvalidArg(format!("x must be in [0, 1], got {x}")));
    }
    if a < 0.0 || b < 0.0 || (a == 0.0 && b == 0.0) {
        return Err(Error::InvalidArg(format!(
            "shape parameters must be nonnegative and not both zero (a={a}, b={b})"
        )));
    }
    if a == 0.0 {
        // Beta(0, b) degenerates to a point mass at 0
        return Ok(if x > 0.0 { 1.0 } else { 0.0 });
    }
    if b == 0.0 {
        // point mass at 1
        return Ok(if x < 1.0 { 0.0 } else { 1.0 });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        return Ok(1.0 - reg_inc_beta(b, a, 1.0 - x)?);
    }

    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);

    // modified Lentz evaluation of the standard continued fraction
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    let mut converged = false;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::InvalidArg(format!(
            "incomplete beta continued fraction did not converge within {MAX_ITER} iterations (a={a}, b={b}, x={x})"
        )));
    }
    Ok((ln_front.exp() * h / a).clamp(0.0, 1.0))
}
