//! Source wavelets, the discrete Laplace–Fourier transform and white noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attenuation::ComplexFrequency;
use crate::data::DataSet;
use crate::error::{Error, Result};

/// Uniformly sampled real signal, `t_k = k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSignal {
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl TimeSignal {
    pub fn new(dt: f64, samples: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || samples.is_empty() {
            return Err(Error::domain("time signal needs dt > 0 and at least one sample"));
        }
        Ok(Self { dt, samples })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RickerSpec {
    pub peak_frequency: f64,
    pub delay: f64,
}

/// `(1 − 2π²f²τ²)·exp(−π²f²τ²)` with `τ = t − delay`.
pub fn ricker(spec: RickerSpec, nt: usize, dt: f64) -> Result<TimeSignal> {
    if !(spec.peak_frequency > 0.0) || !(spec.delay >= 0.0) || nt < 2 || !(dt > 0.0) {
        return Err(Error::domain(
            "ricker needs peak_frequency > 0, delay >= 0, nt >= 2 and dt > 0",
        ));
    }
    let a = (PI * spec.peak_frequency).powi(2);
    let samples = (0..nt)
        .map(|k| {
            let tau = k as f64 * dt - spec.delay;
            let x = a * tau * tau;
            (1.0 - 2.0 * x) * (-x).exp()
        })
        .collect();
    TimeSignal::new(dt, samples)
}

/// `Σ S_k·exp(iω·k·dt)`; the imaginary part of `ω` damps late samples.
pub fn laplace_fourier(signal: &TimeSignal, omega: ComplexFrequency) -> Complex64 {
    let step = (Complex64::i() * omega.value() * signal.dt).exp();
    // Horner evaluation from the last sample keeps it to one complex exp.
    let mut acc = Complex64::new(0.0, 0.0);
    for &s in signal.samples.iter().rev() {
        acc = acc * step + s;
    }
    acc
}

/// Adds circular complex Gaussian noise to every value so that the data set
/// as a whole has the requested SNR in expectation. `snr_db = +∞` returns the
/// input unchanged. The generator is ChaCha20 seeded with `seed`, and values
/// are visited in block, source, receiver order.
pub fn add_white_noise(data: &DataSet, snr_db: f64, seed: u64) -> Result<DataSet> {
    if data.is_empty() {
        return Err(Error::domain("cannot add noise to empty data"));
    }
    if snr_db == f64::INFINITY {
        return Ok(data.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::domain(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    let n = data.n_values() as f64;
    let signal_power: f64 = data.blocks.iter().map(|b| b.energy()).sum::<f64>() / n;
    let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
    // each of the real and imaginary parts carries half the power
    let sigma = (0.5 * noise_power).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = data.clone();
    for block in &mut out.blocks {
        for v in &mut block.values {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(sigma * re, sigma * im);
        }
    }
    Ok(out)
}

/// `10·log10(Σ|clean|² / Σ|noisy − clean|²)` over the data set.
pub fn measured_snr_db(clean: &DataSet, noisy: &DataSet) -> Result<f64> {
    if clean.blocks.len() != noisy.blocks.len() {
        return Err(Error::domain("data sets have different block counts"));
    }
    let mut s = 0.0;
    let mut e = 0.0;
    for (c, n) in clean.blocks.iter().zip(&noisy.blocks) {
        s += c.energy();
        e += n.residual(c)?.energy();
    }
    Ok(10.0 * (s / e).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FrequencyData;
    use proptest::prelude::*;

    fn spec() -> RickerSpec {
        RickerSpec {
            peak_frequency: 1e6,
            delay: 1.5e-6,
        }
    }

    #[test]
    fn ricker_peak_and_zero_crossings() {
        let s = ricker(spec(), 400, 10e-9).unwrap();
        assert!((s.samples[150] - 1.0).abs() < 1e-15);
        let max = s.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(max, s.samples[150]);
        // 2π²f²τ² = 1 at τ = 1/(π f √2)
        let tau0 = 1.0 / (PI * 1e6 * 2f64.sqrt());
        let at = |t: f64| {
            let x = (PI * 1e6 * (t - 1.5e-6)).powi(2);
            (1.0 - 2.0 * x) * (-x).exp()
        };
        assert!(at(1.5e-6 + tau0).abs() < 1e-15);
        assert!(at(1.5e-6 - tau0).abs() < 1e-15);
    }

    #[test]
    fn ricker_spectrum_peaks_at_peak_frequency() {
        let s = ricker(spec(), 400, 10e-9).unwrap();
        let bin = 10e3;
        let (best, _) = (1..=300)
            .map(|k| {
                let f = k as f64 * bin;
                (f, laplace_fourier(&s, ComplexFrequency::from_hz(f, 0.0).unwrap()).norm())
            })
            .fold((0.0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        assert!((best - 1e6).abs() <= bin, "peak at {best}");
    }

    #[test]
    fn ricker_is_zero_mean() {
        let s = ricker(spec(), 400, 10e-9).unwrap();
        let integral: f64 = s.samples.iter().sum::<f64>() * s.dt;
        assert!(integral.abs() <= 1e-3 / 1e6);
        assert!(ricker(spec(), 1, 1e-9).is_err());
    }

    #[test]
    fn transform_examples() {
        let delta = TimeSignal::new(1e-8, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let w = ComplexFrequency::from_hz(3e5, 2e4).unwrap();
        assert_eq!(laplace_fourier(&delta, w), Complex64::new(1.0, 0.0));

        let ones = TimeSignal::new(1e-3, vec![1.0; 32]).unwrap();
        let tiny = ComplexFrequency::new(1e-9, 0.0).unwrap();
        assert!((laplace_fourier(&ones, tiny) - 32.0).norm() < 1e-9);

        // exp(i·(i ln 2)·1) = 1/2; ω_R must be positive so take it tiny
        let s = TimeSignal::new(1.0, vec![0.0, 1.0]).unwrap();
        let w = ComplexFrequency::new(1e-300, 2f64.ln()).unwrap();
        let v = laplace_fourier(&s, w);
        assert!((v - 0.5).norm() < 1e-15, "{v}");
    }

    #[test]
    fn damping_scales_shifted_signals() {
        let s = ricker(spec(), 600, 10e-9).unwrap();
        let m = 100;
        let mut shifted = vec![0.0; 600];
        shifted[m..].copy_from_slice(&s.samples[..600 - m]);
        let shifted = TimeSignal::new(s.dt, shifted).unwrap();
        let w = ComplexFrequency::from_hz(8e5, 3e5).unwrap();
        let a = laplace_fourier(&s, w).norm();
        let b = laplace_fourier(&shifted, w).norm();
        let expect = (-w.omega_i() * m as f64 * s.dt).exp() * a;
        assert!((b - expect).abs() <= 1e-10 * a.max(1.0), "{b} vs {expect}");
    }

    fn data(n: usize, seed: u64) -> DataSet {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..2)
            .map(|k| {
                let values = (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
                FrequencyData::new(ComplexFrequency::from_hz(1e5 * (k + 1) as f64, 0.0).unwrap(), vec![0, 1], n / 2, values)
                    .unwrap()
            })
            .collect();
        DataSet::new(blocks)
    }

    #[test]
    fn noise_examples() {
        let d = data(20_000, 1);
        assert_eq!(add_white_noise(&d, f64::INFINITY, 9).unwrap(), d);
        let a = add_white_noise(&d, 20.0, 42).unwrap();
        let b = add_white_noise(&d, 20.0, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, add_white_noise(&d, 20.0, 43).unwrap());
        let snr = measured_snr_db(&d, &a).unwrap();
        assert!((snr - 20.0).abs() <= 0.5, "{snr}");
        assert!(add_white_noise(&DataSet::default(), 20.0, 1).is_err());
        assert!(add_white_noise(&d, f64::NAN, 1).is_err());
    }

    proptest! {
        #[test]
        fn transform_is_linear(
            s1 in prop::collection::vec(-1.0..1.0f64, 16),
            s2 in prop::collection::vec(-1.0..1.0f64, 16),
            a in -3.0..3.0f64, b in -3.0..3.0f64,
            f in 1e3..1e7f64, d in 0.0..1e6f64,
        ) {
            let dt = 1e-8;
            let w = ComplexFrequency::from_hz(f, d).unwrap();
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let lhs = laplace_fourier(&TimeSignal::new(dt, mix).unwrap(), w);
            let t1 = laplace_fourier(&TimeSignal::new(dt, s1.clone()).unwrap(), w);
            let t2 = laplace_fourier(&TimeSignal::new(dt, s2.clone()).unwrap(), w);
            let rhs = t1 * a + t2 * b;
            let scale = (t1 * a).norm() + (t2 * b).norm() + 1e-300;
            prop_assert!((lhs - rhs).norm() <= 1e-12 * scale.max(lhs.norm()));
        }

        #[test]
        fn noise_snr_within_half_db(seed in 0u64..1000, snr in 0.0..40.0f64) {
            let d = data(4000, seed);
            let noisy = add_white_noise(&d, snr, seed).unwrap();
            let got = measured_snr_db(&d, &noisy).unwrap();
            prop_assert!((got - snr).abs() <= 0.5, "{} vs {}", got, snr);
        }
    }
}
