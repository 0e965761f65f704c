//! Free-space Green's function of the 2D Helmholtz operator.

use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64;

use crate::attenuation::ComplexFrequency;
use crate::error::{Error, Result};

/// Switch from the power series to the asymptotic expansion at this `|z|`.
pub const HANKEL_CROSSOVER: f64 = 12.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Hankel function of the first kind and order zero, `J₀(z) + iY₀(z)`, for
/// `Im z ≥ 0` and `z ≠ 0`.
pub fn hankel1_0(z: Complex64) -> Complex64 {
    if z.norm() < HANKEL_CROSSOVER {
        hankel_series(z)
    } else {
        hankel_asymptotic(z)
    }
}

fn hankel_series(z: Complex64) -> Complex64 {
    let q = z * z * 0.25;
    let mut term = Complex64::new(1.0, 0.0);
    let mut j0 = term;
    let mut tail = Complex64::new(0.0, 0.0);
    let mut harmonic = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        term = -term * q / (kf * kf);
        harmonic += 1.0 / kf;
        j0 += term;
        tail -= term * harmonic;
        if term.norm() * harmonic < 1e-18 * j0.norm().max(1e-300) && k > 4 {
            break;
        }
    }
    let y0 = ((z * 0.5).ln() + EULER_GAMMA) * j0 * (2.0 / PI) + tail * (2.0 / PI);
    j0 + Complex64::i() * y0
}

fn hankel_asymptotic(z: Complex64) -> Complex64 {
    // Σ a_k (i/z)^k with a_k = (−1)^k (1·3⋯(2k−1))² / (k! 8^k)
    let iz = Complex64::i() / z;
    let mut sum = Complex64::new(1.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    let mut last = f64::INFINITY;
    for k in 1..80 {
        let odd = (2 * k - 1) as f64;
        let next = term * iz * (-(odd * odd) / (8.0 * k as f64));
        let size = next.norm();
        if size >= last || size < 1e-17 {
            break;
        }
        last = size;
        term = next;
        sum += term;
    }
    (2.0 / (PI * z)).sqrt() * (Complex64::i() * (z - FRAC_PI_4)).exp() * sum
}

/// `(ωρ/4)·H₀⁽¹⁾(k·r)`, the field of a unit point source in a homogeneous
/// medium for the equation assembled by [`super::assemble_system`].
pub fn analytic_green_2d(k: Complex64, r: f64, rho: f64, omega: ComplexFrequency) -> Result<Complex64> {
    if !(r > 0.0) {
        return Err(Error::domain(format!("Green's function needs r > 0, got {r}")));
    }
    Ok(omega.value() * rho * 0.25 * hankel1_0(k * r))
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    /// H₀⁽¹⁾ evaluated with 40-digit arithmetic.
    const REFERENCE: [(f64, f64, f64, f64); 10] = [
        (0.01, 0.0, 0.99997500015624956597, -3.0054556370836459578),
        (0.5, 0.0, 0.93846980724081290423, -0.44451873350670655715),
        (2.0, 0.0, 0.22389077914123566805, 0.5103756726497451196),
        (7.5, 0.0, 0.26633965788037839687, 0.11731328614820863084),
        (11.9, 0.0, 0.025049441699589563728, -0.2298332139433750764),
        (12.1, 0.0, 0.069666773606807388498, -0.21843838055092545768),
        (25.0, 0.0, 0.096266783275958116174, -0.12724943226800613783),
        (3.0, 0.5, -0.13725451247049944298, 0.23746229686471723283),
        (15.0, 2.0, -0.000084799085262646486812, 0.027720782771461139155),
        (40.0, 1.0, 0.0032879478180926291771, 0.046281107951148575854),
    ];

    #[test]
    fn matches_extended_precision_values() {
        for (zr, zi, hr, hi) in REFERENCE {
            let h = hankel1_0(Complex64::new(zr, zi));
            let exact = Complex64::new(hr, hi);
            let err = (h - exact).norm() / exact.norm();
            assert!(err < 1e-9, "z = {zr}+{zi}i: {h} vs {exact} ({err:e})");
        }
    }

    #[test]
    fn branches_agree_at_crossover() {
        // near the real axis, where the solver evaluates it
        for arg in [0.0, 0.1, 0.3] {
            let z = Complex64::from_polar(HANKEL_CROSSOVER, arg);
            let a = hankel_series(z);
            let b = hankel_asymptotic(z);
            assert!((a - b).norm() <= 1e-9 * a.norm(), "arg {arg}: {a} vs {b}");
        }
    }

    #[test]
    fn large_argument_modulus() {
        for x in [20.5, 50.0, 300.0] {
            let h = hankel1_0(Complex64::new(x, 0.0)).norm();
            let lead = (2.0 / (PI * x)).sqrt();
            assert!((h - lead).abs() < 0.01 * lead);
        }
    }

    #[test]
    fn small_argument_logarithm() {
        let z = 1e-4;
        let h = hankel1_0(Complex64::new(z, 0.0));
        let expect = 2.0 / PI * ((z / 2.0).ln() + EULER_GAMMA);
        assert!((h.im - expect).abs() < 1e-7);
    }

    #[test]
    fn complex_wavenumber_decays() {
        let k = Complex64::new(400.0, 4.0);
        let w = ComplexFrequency::new(1.0, 0.0).unwrap();
        let g = |r: f64| analytic_green_2d(k, r, 1.0, w).unwrap().norm();
        let ratio = g(1.0) / g(0.5);
        let expect = (-4.0 * 0.5f64).exp() * (0.5f64).sqrt();
        assert!((ratio - expect).abs() < 1e-3 * expect);
        assert!(analytic_green_2d(k, 0.0, 1.0, w).is_err());
    }
}
