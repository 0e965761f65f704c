//! Complex bulk moduli of the visco-acoustic attenuation laws, the quality
//! factor they induce, and calibration of their coefficients to a target
//! quality factor at a reference frequency.
//!
//! Every model is evaluated at the real part of the angular frequency; the
//! imaginary part only enters the wave equation itself. Fractional powers of
//! complex numbers use the principal branch, `arg ∈ (-π, π]`.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Laplace–Fourier angular frequency `ω = ω_R + iω_I`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexFrequency {
    omega_r: f64,
    omega_i: f64,
}

impl ComplexFrequency {
    /// Requires `ω_R > 0` and `ω_I ≥ 0`.
    pub fn new(omega_r: f64, omega_i: f64) -> Result<Self> {
        let omega = Self::new_unchecked(omega_r, omega_i);
        omega.check().map_err(Error::Validity)?;
        Ok(omega)
    }

    /// Ordinary frequency in Hz plus a damping rate in 1/s.
    pub fn from_hz(freq_hz: f64, omega_i: f64) -> Result<Self> {
        Self::new(2.0 * PI * freq_hz, omega_i)
    }

    /// Builds a frequency without checking its sign conditions. Only useful to
    /// feed [`validate_attenuation`] with deliberately invalid input.
    pub const fn new_unchecked(omega_r: f64, omega_i: f64) -> Self {
        Self { omega_r, omega_i }
    }

    pub fn omega_r(&self) -> f64 {
        self.omega_r
    }

    pub fn omega_i(&self) -> f64 {
        self.omega_i
    }

    pub fn freq_hz(&self) -> f64 {
        self.omega_r / (2.0 * PI)
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.omega_r, self.omega_i)
    }

    fn check(&self) -> std::result::Result<(), Violation> {
        if self.omega_r > 0.0 && self.omega_i >= 0.0 {
            Ok(())
        } else {
            Err(Violation::Frequency {
                omega_r: self.omega_r,
                omega_i: self.omega_i,
            })
        }
    }
}

/// Clause of the attenuation validity conditions that a wave speed or
/// frequency breaks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Violation {
    /// Clause 1: `ω_R > 0` and `ω_I ≥ 0`.
    Frequency { omega_r: f64, omega_i: f64 },
    /// Clause 2: `Re(c†) > 0`.
    RealSpeed { c_r: f64 },
    /// Clause 3: `Im(c†) ≤ 0`.
    ImagSpeed { c_i: f64 },
}

impl Violation {
    pub fn clause(&self) -> u8 {
        match self {
            Violation::Frequency { .. } => 1,
            Violation::RealSpeed { .. } => 2,
            Violation::ImagSpeed { .. } => 3,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Frequency { omega_r, omega_i } => write!(
                f,
                "clause 1: need omega_r > 0 and omega_i >= 0, got ({omega_r}, {omega_i})"
            ),
            Violation::RealSpeed { c_r } => {
                write!(f, "clause 2: need Re(c) > 0, got {c_r}")
            }
            Violation::ImagSpeed { c_i } => {
                write!(f, "clause 3: need Im(c) <= 0, got {c_i}")
            }
        }
    }
}

/// Attenuation law tag, shared by every node of a medium.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    NoAttenuation,
    KolskyFutterman,
    ColeCole,
    Zener,
    KelvinVoigt,
    Maxwell,
    Ksb,
    Szabo,
    Generalized,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::NoAttenuation,
        ModelKind::KolskyFutterman,
        ModelKind::ColeCole,
        ModelKind::Zener,
        ModelKind::KelvinVoigt,
        ModelKind::Maxwell,
        ModelKind::Ksb,
        ModelKind::Szabo,
        ModelKind::Generalized,
    ];

    /// The seven single-mechanism laws with non-trivial attenuation.
    pub const ATTENUATING: [ModelKind; 7] = [
        ModelKind::KolskyFutterman,
        ModelKind::ColeCole,
        ModelKind::Zener,
        ModelKind::KelvinVoigt,
        ModelKind::Maxwell,
        ModelKind::Ksb,
        ModelKind::Szabo,
    ];

    pub fn tag(self) -> u8 {
        match self {
            ModelKind::NoAttenuation => 0,
            ModelKind::KolskyFutterman => 1,
            ModelKind::ColeCole => 2,
            ModelKind::Zener => 3,
            ModelKind::KelvinVoigt => 4,
            ModelKind::Maxwell => 5,
            ModelKind::Ksb => 6,
            ModelKind::Szabo => 7,
            ModelKind::Generalized => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::NoAttenuation => "no-attenuation",
            ModelKind::KolskyFutterman => "kolsky-futterman",
            ModelKind::ColeCole => "cole-cole",
            ModelKind::Zener => "zener",
            ModelKind::KelvinVoigt => "kelvin-voigt",
            ModelKind::Maxwell => "maxwell",
            ModelKind::Ksb => "ksb",
            ModelKind::Szabo => "szabo",
            ModelKind::Generalized => "generalized",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let name = name.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Coefficient names in storage order. The generalized law stores
    /// `omega_l`/`b_l` pairs and is listed here without them.
    pub fn coefficient_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::NoAttenuation | ModelKind::Generalized => &[],
            ModelKind::KolskyFutterman => &["eta_q"],
            ModelKind::ColeCole => &["tau_eps", "tau_sig", "beta"],
            ModelKind::Zener => &["tau_eps", "tau_sig"],
            ModelKind::KelvinVoigt => &["tau_eps"],
            ModelKind::Maxwell => &["eta"],
            ModelKind::Ksb => &["eta_q", "tau", "beta"],
            ModelKind::Szabo => &["tau", "beta"],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One relaxation mechanism of the generalized law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mechanism {
    /// Relaxation angular frequency, rad/s.
    pub omega_l: f64,
    /// Dimensionless strength, held constant in frequency.
    pub b_l: f64,
}

/// Attenuation law together with its real coefficients.
#[derive(Clone, Debug, PartialEq)]
pub enum AttenuationSpec {
    NoAttenuation,
    KolskyFutterman { eta_q: f64 },
    ColeCole { tau_eps: f64, tau_sig: f64, beta: f64 },
    Zener { tau_eps: f64, tau_sig: f64 },
    KelvinVoigt { tau_eps: f64 },
    Maxwell { eta: f64 },
    Ksb { eta_q: f64, tau: f64, beta: f64 },
    Szabo { tau: f64, beta: f64 },
    Generalized { mechanisms: Vec<Mechanism> },
}

fn violated(model: ModelKind, condition: &'static str) -> Error {
    Error::Constraint {
        model: model.name(),
        condition,
    }
}

/// `z^b` on the principal branch with `0^b = 0` for `b > 0` and `0^0 = 1`.
pub(crate) fn principal_pow(z: Complex64, b: f64) -> Complex64 {
    if z == Complex64::new(0.0, 0.0) {
        return if b == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    z.powf(b)
}

/// `-iωτ` with a positive zero real part so the principal argument is `-π/2`.
fn minus_i(x: f64) -> Complex64 {
    Complex64::new(0.0, -x)
}

impl AttenuationSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            AttenuationSpec::NoAttenuation => ModelKind::NoAttenuation,
            AttenuationSpec::KolskyFutterman { .. } => ModelKind::KolskyFutterman,
            AttenuationSpec::ColeCole { .. } => ModelKind::ColeCole,
            AttenuationSpec::Zener { .. } => ModelKind::Zener,
            AttenuationSpec::KelvinVoigt { .. } => ModelKind::KelvinVoigt,
            AttenuationSpec::Maxwell { .. } => ModelKind::Maxwell,
            AttenuationSpec::Ksb { .. } => ModelKind::Ksb,
            AttenuationSpec::Szabo { .. } => ModelKind::Szabo,
            AttenuationSpec::Generalized { .. } => ModelKind::Generalized,
        }
    }

    /// Checks the admissible-coefficient condition of the law.
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind();
        let finite = self.coefficients().iter().all(|c| c.is_finite());
        if !finite {
            return Err(violated(kind, "coefficients must be finite"));
        }
        match *self {
            AttenuationSpec::NoAttenuation => Ok(()),
            // eta_q = 0 would put an infinite imaginary part on the modulus.
            AttenuationSpec::KolskyFutterman { eta_q } if eta_q > 0.0 => Ok(()),
            AttenuationSpec::KolskyFutterman { .. } => Err(violated(kind, "eta_q > 0")),
            AttenuationSpec::ColeCole {
                tau_eps,
                tau_sig,
                beta,
            } => {
                if !(tau_eps >= tau_sig && tau_sig >= 0.0) {
                    Err(violated(kind, "tau_eps >= tau_sig >= 0"))
                } else if !(0.0..=1.0).contains(&beta) {
                    Err(violated(kind, "0 <= beta <= 1"))
                } else {
                    Ok(())
                }
            }
            AttenuationSpec::Zener { tau_eps, tau_sig } => {
                if tau_eps >= tau_sig && tau_sig >= 0.0 {
                    Ok(())
                } else {
                    Err(violated(kind, "tau_eps >= tau_sig >= 0"))
                }
            }
            AttenuationSpec::KelvinVoigt { tau_eps } if tau_eps >= 0.0 => Ok(()),
            AttenuationSpec::KelvinVoigt { .. } => Err(violated(kind, "tau_eps >= 0")),
            AttenuationSpec::Maxwell { eta } if eta > 0.0 => Ok(()),
            AttenuationSpec::Maxwell { .. } => Err(violated(kind, "eta > 0")),
            AttenuationSpec::Ksb { eta_q, tau, beta } => {
                if !(eta_q > 0.0) {
                    Err(violated(kind, "eta_q > 0"))
                } else if !(tau > 0.0) {
                    Err(violated(kind, "tau > 0"))
                } else if !(beta > 0.0 && beta < 1.0) {
                    Err(violated(kind, "0 < beta < 1"))
                } else {
                    Ok(())
                }
            }
            AttenuationSpec::Szabo { tau, beta } => {
                if !(tau > 0.0) {
                    Err(violated(kind, "tau > 0"))
                } else if !(beta > 0.0 && beta < 1.0) {
                    Err(violated(kind, "0 < beta < 1"))
                } else {
                    Ok(())
                }
            }
            AttenuationSpec::Generalized { ref mechanisms } => {
                if mechanisms.iter().any(|m| !(m.omega_l > 0.0)) {
                    Err(violated(kind, "omega_l > 0"))
                } else if mechanisms.iter().any(|m| m.b_l < 0.0) {
                    Err(violated(kind, "b_l >= 0"))
                } else if mechanisms.iter().map(|m| m.b_l).sum::<f64>() >= 1.0 {
                    Err(violated(kind, "sum of b_l < 1"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Flat coefficient list in [`ModelKind::coefficient_names`] order; the
    /// generalized law flattens to `omega_1, b_1, omega_2, b_2, ...`.
    pub fn coefficients(&self) -> Vec<f64> {
        match *self {
            AttenuationSpec::NoAttenuation => vec![],
            AttenuationSpec::KolskyFutterman { eta_q } => vec![eta_q],
            AttenuationSpec::ColeCole {
                tau_eps,
                tau_sig,
                beta,
            } => vec![tau_eps, tau_sig, beta],
            AttenuationSpec::Zener { tau_eps, tau_sig } => vec![tau_eps, tau_sig],
            AttenuationSpec::KelvinVoigt { tau_eps } => vec![tau_eps],
            AttenuationSpec::Maxwell { eta } => vec![eta],
            AttenuationSpec::Ksb { eta_q, tau, beta } => vec![eta_q, tau, beta],
            AttenuationSpec::Szabo { tau, beta } => vec![tau, beta],
            AttenuationSpec::Generalized { ref mechanisms } => mechanisms
                .iter()
                .flat_map(|m| [m.omega_l, m.b_l])
                .collect(),
        }
    }

    /// Inverse of [`AttenuationSpec::coefficients`]. Does not validate.
    pub fn from_coefficients(kind: ModelKind, c: &[f64]) -> Result<Self> {
        let expected = kind.coefficient_names().len();
        let bad_len = match kind {
            ModelKind::Generalized => !c.len().is_multiple_of(2),
            _ => c.len() != expected,
        };
        if bad_len {
            return Err(Error::domain(format!(
                "{kind} takes {expected} coefficients, got {}",
                c.len()
            )));
        }
        Ok(match kind {
            ModelKind::NoAttenuation => AttenuationSpec::NoAttenuation,
            ModelKind::KolskyFutterman => AttenuationSpec::KolskyFutterman { eta_q: c[0] },
            ModelKind::ColeCole => AttenuationSpec::ColeCole {
                tau_eps: c[0],
                tau_sig: c[1],
                beta: c[2],
            },
            ModelKind::Zener => AttenuationSpec::Zener {
                tau_eps: c[0],
                tau_sig: c[1],
            },
            ModelKind::KelvinVoigt => AttenuationSpec::KelvinVoigt { tau_eps: c[0] },
            ModelKind::Maxwell => AttenuationSpec::Maxwell { eta: c[0] },
            ModelKind::Ksb => AttenuationSpec::Ksb {
                eta_q: c[0],
                tau: c[1],
                beta: c[2],
            },
            ModelKind::Szabo => AttenuationSpec::Szabo {
                tau: c[0],
                beta: c[1],
            },
            ModelKind::Generalized => AttenuationSpec::Generalized {
                mechanisms: c
                    .chunks_exact(2)
                    .map(|p| Mechanism {
                        omega_l: p[0],
                        b_l: p[1],
                    })
                    .collect(),
            },
        })
    }

    /// Complex bulk modulus without coefficient validation.
    fn modulus_raw(&self, kappa0: f64, omega_r: f64) -> Complex64 {
        let k0 = Complex64::new(kappa0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let w = omega_r;
        match *self {
            AttenuationSpec::NoAttenuation => k0,
            AttenuationSpec::KolskyFutterman { eta_q } => {
                Complex64::new(kappa0, -kappa0 / eta_q)
            }
            AttenuationSpec::ColeCole {
                tau_eps,
                tau_sig,
                beta,
            } => {
                let num = one + principal_pow(minus_i(w * tau_eps), beta);
                let den = one + principal_pow(minus_i(w * tau_sig), beta);
                k0 * num / den
            }
            AttenuationSpec::Zener { tau_eps, tau_sig } => {
                k0 * (one + minus_i(w * tau_eps)) / (one + minus_i(w * tau_sig))
            }
            AttenuationSpec::KelvinVoigt { tau_eps } => {
                Complex64::new(kappa0, -w * kappa0 * tau_eps)
            }
            AttenuationSpec::Maxwell { eta } => {
                let iwe = minus_i(w * eta);
                iwe * kappa0 / (k0 + iwe)
            }
            AttenuationSpec::Ksb { eta_q, tau, beta } => {
                let inner = (one + principal_pow(minus_i(w * tau), beta)).sqrt();
                let d = one + eta_q / inner;
                k0 / (d * d)
            }
            AttenuationSpec::Szabo { tau, beta } => {
                let term = principal_pow(minus_i(w), beta - 1.0) * tau.powf(beta);
                k0 / (one + term)
            }
            AttenuationSpec::Generalized { ref mechanisms } => {
                let relax: Complex64 = mechanisms
                    .iter()
                    .map(|m| m.b_l * m.omega_l / Complex64::new(m.omega_l, -w))
                    .sum();
                k0 * (one - relax)
            }
        }
    }

    /// `∂κ†/∂κ₀` at fixed attenuation coefficients.
    pub fn modulus_derivative(&self, kappa0: f64, omega: ComplexFrequency) -> Complex64 {
        match *self {
            AttenuationSpec::Maxwell { eta } => {
                let iwe = minus_i(omega.omega_r * eta);
                let den = Complex64::new(kappa0, 0.0) + iwe;
                iwe * iwe / (den * den)
            }
            // every other law is linear in κ₀
            _ => self.modulus_raw(1.0, omega.omega_r),
        }
    }

    /// `∂κ†/∂c` for the coefficient at `index` of [`AttenuationSpec::coefficients`],
    /// by central differences with a relative step of 1e-6.
    pub fn coefficient_derivative(
        &self,
        kappa0: f64,
        omega: ComplexFrequency,
        index: usize,
    ) -> Result<Complex64> {
        let base = self.coefficients();
        if index >= base.len() {
            return Err(Error::domain(format!(
                "{} has no coefficient {index}",
                self.kind()
            )));
        }
        let h = 1e-6 * base[index].abs().max(f64::MIN_POSITIVE.sqrt());
        let eval = |delta: f64| -> Result<Complex64> {
            let mut c = base.clone();
            c[index] += delta;
            Ok(Self::from_coefficients(self.kind(), &c)?.modulus_raw(kappa0, omega.omega_r))
        };
        Ok((eval(h)? - eval(-h)?) / (2.0 * h))
    }
}

/// Complex bulk modulus `κ†` of the law at the real part of `omega`.
pub fn evaluate_bulk_modulus(
    spec: &AttenuationSpec,
    kappa0: f64,
    omega: ComplexFrequency,
) -> Result<Complex64> {
    if !(kappa0 > 0.0 && kappa0.is_finite()) {
        return Err(Error::domain(format!("kappa0 must be positive, got {kappa0}")));
    }
    spec.validate()?;
    Ok(spec.modulus_raw(kappa0, omega.omega_r))
}

/// `Q = Re(κ†) / -Im(κ†)`; `+∞` when the modulus is real.
pub fn quality_factor(spec: &AttenuationSpec, kappa0: f64, omega: ComplexFrequency) -> Result<f64> {
    let kappa = evaluate_bulk_modulus(spec, kappa0, omega)?;
    q_from_modulus(kappa)
}

pub(crate) fn q_from_modulus(kappa: Complex64) -> Result<f64> {
    if kappa.im > 0.0 {
        // a positive Im(κ†) maps onto a positive Im(c†)
        return Err(Error::Validity(Violation::ImagSpeed { c_i: kappa.im }));
    }
    if kappa.im == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(kappa.re / -kappa.im)
}

/// `c† = sqrt(κ†/ρ)`.
pub fn complex_wave_speed(kappa_dagger: Complex64, rho: f64) -> Result<Complex64> {
    if !(rho > 0.0) {
        return Err(Error::domain(format!("density must be positive, got {rho}")));
    }
    Ok((kappa_dagger / rho).sqrt())
}

/// Accepts iff `ω_R > 0`, `ω_I ≥ 0`, `Re(c†) > 0` and `Im(c†) ≤ 0`.
pub fn validate_attenuation(
    c_dagger: Complex64,
    omega: ComplexFrequency,
) -> std::result::Result<(), Violation> {
    omega.check()?;
    if !(c_dagger.re > 0.0) {
        return Err(Violation::RealSpeed { c_r: c_dagger.re });
    }
    if c_dagger.im > 0.0 || c_dagger.im.is_nan() {
        return Err(Violation::ImagSpeed { c_i: c_dagger.im });
    }
    Ok(())
}

/// Coefficients held fixed while calibrating a multi-coefficient law.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FixedCoefficients {
    pub tau_sig: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
}

impl FixedCoefficients {
    /// The fixed coefficients of [`reference_calibration`].
    pub fn reference(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Zener => Self {
                tau_sig: Some(85.4e-9),
                ..Self::default()
            },
            ModelKind::ColeCole => Self {
                tau_sig: Some(85.5e-9),
                beta: Some(0.8),
                ..Self::default()
            },
            ModelKind::Ksb => Self {
                tau: Some(2e5),
                beta: Some(0.5),
                ..Self::default()
            },
            ModelKind::Szabo => Self {
                beta: Some(0.6),
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    fn need(value: Option<f64>, kind: ModelKind, name: &str) -> Result<f64> {
        value.ok_or_else(|| Error::domain(format!("calibrating {kind} requires a fixed {name}")))
    }
}

/// Coefficients giving `Q ≈ 118` at 300 kHz for `κ₀ = 2.25 GPa`.
pub fn reference_calibration(kind: ModelKind) -> AttenuationSpec {
    match kind {
        ModelKind::NoAttenuation => AttenuationSpec::NoAttenuation,
        ModelKind::KolskyFutterman => AttenuationSpec::KolskyFutterman { eta_q: 118.0 },
        ModelKind::KelvinVoigt => AttenuationSpec::KelvinVoigt { tau_eps: 4.5e-9 },
        ModelKind::Maxwell => AttenuationSpec::Maxwell { eta: 1.4e5 },
        ModelKind::Zener => AttenuationSpec::Zener {
            tau_eps: 90e-9,
            tau_sig: 85.4e-9,
        },
        ModelKind::ColeCole => AttenuationSpec::ColeCole {
            tau_eps: 90.5e-9,
            tau_sig: 85.5e-9,
            beta: 0.8,
        },
        ModelKind::Ksb => AttenuationSpec::Ksb {
            eta_q: 8.75,
            tau: 2e5,
            beta: 0.5,
        },
        ModelKind::Szabo => AttenuationSpec::Szabo {
            tau: 13.28,
            beta: 0.6,
        },
        ModelKind::Generalized => AttenuationSpec::Generalized { mechanisms: vec![] },
    }
}

/// Picks the free coefficient of `kind` so that `Q(ω_ref) = target_q`.
///
/// Kolsky–Futterman, Kelvin–Voigt and Maxwell have closed forms. Zener and
/// Cole–Cole solve for `τ_ε`, KSB for `η`, Szabo for `τ`, each by bisection in
/// log space down to a relative bracket width of 1e-10.
pub fn calibrate_to_quality(
    kind: ModelKind,
    kappa0: f64,
    target_q: f64,
    omega_ref: ComplexFrequency,
    fixed: &FixedCoefficients,
) -> Result<AttenuationSpec> {
    if !(target_q > 0.0 && target_q.is_finite()) {
        return Err(Error::domain(format!("target Q must be positive, got {target_q}")));
    }
    if !(kappa0 > 0.0) {
        return Err(Error::domain(format!("kappa0 must be positive, got {kappa0}")));
    }
    let w = omega_ref.omega_r;
    let spec = match kind {
        ModelKind::KolskyFutterman => AttenuationSpec::KolskyFutterman { eta_q: target_q },
        ModelKind::KelvinVoigt => AttenuationSpec::KelvinVoigt {
            tau_eps: 1.0 / (w * target_q),
        },
        ModelKind::Maxwell => AttenuationSpec::Maxwell {
            eta: target_q * kappa0 / w,
        },
        ModelKind::Zener => {
            let tau_sig = FixedCoefficients::need(fixed.tau_sig, kind, "tau_sig")?;
            let lo = if tau_sig > 0.0 { tau_sig * (1.0 + 1e-12) } else { 1e-18 };
            let tau_eps = bisect_free(kind, target_q, lo, 1e3, |x| {
                quality_factor(&AttenuationSpec::Zener { tau_eps: x, tau_sig }, kappa0, omega_ref)
            })?;
            AttenuationSpec::Zener { tau_eps, tau_sig }
        }
        ModelKind::ColeCole => {
            let tau_sig = FixedCoefficients::need(fixed.tau_sig, kind, "tau_sig")?;
            let beta = FixedCoefficients::need(fixed.beta, kind, "beta")?;
            let lo = if tau_sig > 0.0 { tau_sig * (1.0 + 1e-12) } else { 1e-18 };
            let make = |tau_eps| AttenuationSpec::ColeCole {
                tau_eps,
                tau_sig,
                beta,
            };
            let tau_eps = bisect_free(kind, target_q, lo, 1e3, |x| {
                quality_factor(&make(x), kappa0, omega_ref)
            })?;
            make(tau_eps)
        }
        ModelKind::Ksb => {
            let tau = FixedCoefficients::need(fixed.tau, kind, "tau")?;
            let beta = FixedCoefficients::need(fixed.beta, kind, "beta")?;
            let make = |eta_q| AttenuationSpec::Ksb { eta_q, tau, beta };
            let eta_q = bisect_free(kind, target_q, 1e-12, 1e12, |x| {
                quality_factor(&make(x), kappa0, omega_ref)
            })?;
            make(eta_q)
        }
        ModelKind::Szabo => {
            let beta = FixedCoefficients::need(fixed.beta, kind, "beta")?;
            let make = |tau| AttenuationSpec::Szabo { tau, beta };
            let tau = bisect_free(kind, target_q, 1e-12, 1e12, |x| {
                quality_factor(&make(x), kappa0, omega_ref)
            })?;
            make(tau)
        }
        ModelKind::NoAttenuation | ModelKind::Generalized => {
            return Err(Error::domain(format!("{kind} has no calibratable coefficient")));
        }
    };
    spec.validate()?;
    Ok(spec)
}

const SCAN_POINTS: usize = 400;
const BRACKET_REL_WIDTH: f64 = 1e-10;

/// Root of `q(x) = target` on `[lo, hi]` by a log-spaced scan for the first
/// sign change followed by geometric bisection.
fn bisect_free(
    kind: ModelKind,
    target: f64,
    lo: f64,
    hi: f64,
    q: impl Fn(f64) -> Result<f64>,
) -> Result<f64> {
    let fail = || Error::Calibration {
        model: kind.name(),
        target,
        lo,
        hi,
    };
    let g = |x: f64| -> Option<f64> {
        let v = q(x).ok()?;
        // Q = +inf counts as "above the target"
        (!v.is_nan()).then_some(v - target)
    };
    let ratio = (hi / lo).ln() / (SCAN_POINTS - 1) as f64;
    let mut prev: Option<(f64, f64)> = None;
    let mut bracket = None;
    for k in 0..SCAN_POINTS {
        let x = lo * (ratio * k as f64).exp();
        let Some(gx) = g(x) else {
            prev = None;
            continue;
        };
        if gx == 0.0 {
            return Ok(x);
        }
        if let Some((xp, gp)) = prev {
            if gp.signum() != gx.signum() {
                bracket = Some((xp, gp, x));
                break;
            }
        }
        prev = Some((x, gx));
    }
    let (mut a, ga, mut b) = bracket.ok_or_else(fail)?;
    while b / a - 1.0 > BRACKET_REL_WIDTH {
        let mid = (a * b).sqrt();
        let gm = g(mid).ok_or_else(fail)?;
        if gm == 0.0 {
            return Ok(mid);
        }
        if gm.signum() == ga.signum() {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok((a * b).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DispersionRow {
    pub freq_hz: f64,
    pub q: f64,
}

/// Quality factor of `spec` at each ordinary frequency in `freqs` (Hz).
pub fn dispersion_table(
    spec: &AttenuationSpec,
    kappa0: f64,
    rho: f64,
    freqs: &[f64],
) -> Result<Vec<DispersionRow>> {
    if !(rho > 0.0) {
        return Err(Error::domain(format!("density must be positive, got {rho}")));
    }
    freqs
        .iter()
        .map(|&f| {
            if !(f > 0.0) {
                return Err(Error::domain(format!("frequency must be positive, got {f}")));
            }
            let omega = ComplexFrequency::from_hz(f, 0.0)?;
            Ok(DispersionRow {
                freq_hz: f,
                q: quality_factor(spec, kappa0, omega)?,
            })
        })
        .collect()
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KAPPA0: f64 = 2.25e9;

    fn at_khz(khz: f64) -> ComplexFrequency {
        ComplexFrequency::from_hz(khz * 1e3, 0.0).unwrap()
    }

    #[test]
    fn kolsky_futterman_modulus() {
        let k = evaluate_bulk_modulus(
            &AttenuationSpec::KolskyFutterman { eta_q: 118.0 },
            KAPPA0,
            at_khz(300.0),
        )
        .unwrap();
        assert_eq!(k, Complex64::new(2.25e9, -2.25e9 / 118.0));
    }

    #[test]
    fn no_attenuation_is_identity() {
        let k = evaluate_bulk_modulus(&AttenuationSpec::NoAttenuation, KAPPA0, at_khz(123.0)).unwrap();
        assert_eq!(k, Complex64::new(KAPPA0, 0.0));
        let q = quality_factor(&AttenuationSpec::NoAttenuation, KAPPA0, at_khz(123.0)).unwrap();
        assert_eq!(q, f64::INFINITY);
    }

    #[test]
    fn kelvin_voigt_imaginary_part_matches_extended_precision() {
        // -κ₀ ω τ_ε evaluated with 40-digit arithmetic
        let expected = -19085175.37055799392366056_f64;
        let k = evaluate_bulk_modulus(
            &AttenuationSpec::KelvinVoigt { tau_eps: 4.5e-9 },
            KAPPA0,
            at_khz(300.0),
        )
        .unwrap();
        assert_eq!(k.re, KAPPA0);
        assert!(((k.im - expected) / expected).abs() < 1e-14, "{}", k.im);
    }

    #[test]
    fn zener_quality_factor_closed_form() {
        let (te, ts) = (90e-9, 85.4e-9);
        let omega = at_khz(300.0);
        let w = omega.omega_r();
        let q = quality_factor(&AttenuationSpec::Zener { tau_eps: te, tau_sig: ts }, KAPPA0, omega).unwrap();
        let closed = (1.0 + w * w * te * ts) / (w * (te - ts));
        assert!((q - closed).abs() < 1e-9 * closed);
        assert!((q - 118.0).abs() <= 1.0);
    }

    #[test]
    fn reference_coefficients_give_q118_at_300khz() {
        for kind in ModelKind::ATTENUATING {
            let q = quality_factor(&reference_calibration(kind), KAPPA0, at_khz(300.0)).unwrap();
            assert!((q - 118.0).abs() <= 0.01 * 118.0, "{kind}: {q}");
        }
    }

    #[test]
    fn constraint_errors_name_the_condition() {
        let cases = [
            (AttenuationSpec::ColeCole { tau_eps: 1e-9, tau_sig: 2e-9, beta: 0.5 }, "tau_eps >= tau_sig >= 0"),
            (AttenuationSpec::ColeCole { tau_eps: 2e-9, tau_sig: 1e-9, beta: 1.5 }, "0 <= beta <= 1"),
            (AttenuationSpec::Zener { tau_eps: 1e-9, tau_sig: -1e-9 }, "tau_eps >= tau_sig >= 0"),
            (AttenuationSpec::KelvinVoigt { tau_eps: -1.0 }, "tau_eps >= 0"),
            (AttenuationSpec::Maxwell { eta: 0.0 }, "eta > 0"),
            (AttenuationSpec::Ksb { eta_q: 1.0, tau: 1.0, beta: 1.0 }, "0 < beta < 1"),
            (AttenuationSpec::Szabo { tau: 0.0, beta: 0.5 }, "tau > 0"),
            (
                AttenuationSpec::Generalized { mechanisms: vec![Mechanism { omega_l: -1.0, b_l: 0.1 }] },
                "omega_l > 0",
            ),
        ];
        for (spec, cond) in cases {
            match evaluate_bulk_modulus(&spec, KAPPA0, at_khz(300.0)) {
                Err(Error::Constraint { condition, .. }) => assert_eq!(condition, cond),
                other => panic!("{spec:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn positive_imaginary_modulus_is_a_validity_error() {
        assert!(matches!(q_from_modulus(Complex64::new(1.0, 1e-3)), Err(Error::Validity(v)) if v.clause() == 3));
    }

    #[test]
    fn wave_speed_examples() {
        let c = complex_wave_speed(Complex64::new(2.25e9, 0.0), 1000.0).unwrap();
        assert_eq!(c, Complex64::new(1500.0, 0.0));
        let c = complex_wave_speed(Complex64::new(9e9, 0.0), 4000.0).unwrap();
        assert_eq!(c, Complex64::new(1500.0, 0.0));

        // 40-digit reference for sqrt(2.25e9 (1 - i/118) / 1000)
        let c = complex_wave_speed(Complex64::new(2.25e9, -2.25e9 / 118.0), 1000.0).unwrap();
        assert!((c.re - 1500.013465655849379855988).abs() < 1e-10);
        assert!((c.im - -6.355875146038271722941219).abs() < 1e-12);
        assert!(c.im < 0.0 && (c.norm() - 1500.0).abs() < 0.005 * 1500.0);

        assert!(matches!(complex_wave_speed(Complex64::new(1.0, 0.0), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn validity_clauses() {
        let w = ComplexFrequency::from_hz(1e5, 0.0).unwrap();
        assert_eq!(validate_attenuation(Complex64::new(1500.0, -0.0), w), Ok(()));
        let any = ComplexFrequency::new(1e6, 3e4).unwrap();
        assert_eq!(validate_attenuation(Complex64::new(1500.0, 10.0), any).unwrap_err().clause(), 3);
        let bad = ComplexFrequency::new_unchecked(-1.0, 0.0);
        assert_eq!(validate_attenuation(Complex64::new(1500.0, -5.0), bad).unwrap_err().clause(), 1);
        assert_eq!(validate_attenuation(Complex64::new(-1.0, -5.0), w).unwrap_err().clause(), 2);
        assert!(ComplexFrequency::new(1.0, -1.0).is_err());
    }

    #[test]
    fn closed_form_calibrations() {
        let omega = at_khz(300.0);
        let none = FixedCoefficients::default();
        let kf = calibrate_to_quality(ModelKind::KolskyFutterman, KAPPA0, 118.0, omega, &none).unwrap();
        assert_eq!(kf, AttenuationSpec::KolskyFutterman { eta_q: 118.0 });

        let AttenuationSpec::KelvinVoigt { tau_eps } =
            calibrate_to_quality(ModelKind::KelvinVoigt, KAPPA0, 118.0, omega, &none).unwrap()
        else {
            unreachable!()
        };
        assert!((tau_eps - 4.5e-9).abs() < 0.01 * 4.5e-9, "{tau_eps}");

        let AttenuationSpec::Maxwell { eta } =
            calibrate_to_quality(ModelKind::Maxwell, KAPPA0, 118.0, omega, &none).unwrap()
        else {
            unreachable!()
        };
        assert!((eta - 1.409e5).abs() < 1e-3 * 1.409e5, "{eta}");
        assert!((eta - 1.4e5).abs() < 0.01 * 1.4e5);
    }

    #[test]
    fn calibration_failure_reports_interval() {
        // Zener Q is bounded below by ω τ_σ
        let omega = at_khz(300.0);
        let fixed = FixedCoefficients { tau_sig: Some(1e-3), ..Default::default() };
        match calibrate_to_quality(ModelKind::Zener, KAPPA0, 10.0, omega, &fixed) {
            Err(Error::Calibration { lo, hi, .. }) => assert!(lo < hi),
            other => panic!("{other:?}"),
        }
        let missing = calibrate_to_quality(ModelKind::Szabo, KAPPA0, 10.0, omega, &FixedCoefficients::default());
        assert!(matches!(missing, Err(Error::Domain(_))));
    }

    #[test]
    fn calibration_round_trip_all_kinds() {
        for kind in ModelKind::ATTENUATING {
            for target in [20.0, 118.0, 350.0, 800.0] {
                for khz in [100.0, 300.0, 600.0] {
                    let omega = at_khz(khz);
                    let spec = calibrate_to_quality(kind, KAPPA0, target, omega, &FixedCoefficients::reference(kind))
                        .unwrap_or_else(|e| panic!("{kind} Q={target} f={khz}: {e}"));
                    let q = quality_factor(&spec, KAPPA0, omega).unwrap();
                    assert!((q - target).abs() / target <= 1e-6, "{kind} {target} {khz}: {q}");
                }
            }
        }
    }

    #[test]
    fn dispersion_examples() {
        let kf = AttenuationSpec::KolskyFutterman { eta_q: 118.0 };
        let rows = dispersion_table(&kf, KAPPA0, 1000.0, &[1e5, 3e5, 7e5]).unwrap();
        assert!(rows.iter().all(|r| r.q == 118.0));

        let kv = AttenuationSpec::KelvinVoigt { tau_eps: 4.5e-9 };
        let rows = dispersion_table(&kv, KAPPA0, 1000.0, &[3e5, 6e5]).unwrap();
        // Q = 1/(ω τ_ε)
        let oracle = |f: f64| 1.0 / (2.0 * PI * f * 4.5e-9);
        assert!((rows[0].q - oracle(3e5)).abs() < 1e-12 * oracle(3e5));
        assert!((rows[1].q * 2.0 - rows[0].q).abs() < 1e-12 * rows[0].q);

        assert!(dispersion_table(&kf, KAPPA0, 1000.0, &[0.0]).is_err());
    }

    #[test]
    fn monotone_dispersion_trends() {
        let freqs: Vec<f64> = (0..=150).map(|k| 50e3 + 5e3 * k as f64).collect();
        for kind in ModelKind::ATTENUATING {
            if kind == ModelKind::KolskyFutterman {
                continue;
            }
            let rows = dispersion_table(&reference_calibration(kind), KAPPA0, 1000.0, &freqs).unwrap();
            let decreasing = matches!(kind, ModelKind::KelvinVoigt | ModelKind::Zener | ModelKind::ColeCole);
            for w in rows.windows(2) {
                if decreasing {
                    assert!(w[1].q < w[0].q, "{kind} at {}", w[1].freq_hz);
                } else {
                    assert!(w[1].q > w[0].q, "{kind} at {}", w[1].freq_hz);
                }
            }
        }
    }

    #[test]
    fn cole_cole_with_unit_beta_is_zener() {
        let omega = at_khz(250.0);
        for (te, ts) in [(90e-9, 85.4e-9), (3e-6, 1e-7), (5e-9, 0.0)] {
            let cc = evaluate_bulk_modulus(&AttenuationSpec::ColeCole { tau_eps: te, tau_sig: ts, beta: 1.0 }, KAPPA0, omega).unwrap();
            let z = evaluate_bulk_modulus(&AttenuationSpec::Zener { tau_eps: te, tau_sig: ts }, KAPPA0, omega).unwrap();
            assert!((cc - z).norm() <= 4.0 * f64::EPSILON * z.norm(), "{cc} vs {z}");
        }
    }

    #[test]
    fn generalized_without_mechanisms_is_elastic() {
        let spec = AttenuationSpec::Generalized { mechanisms: vec![] };
        let k = evaluate_bulk_modulus(&spec, KAPPA0, at_khz(300.0)).unwrap();
        assert_eq!(k, Complex64::new(KAPPA0, 0.0));
    }

    #[test]
    fn maxwell_derivative_matches_difference_quotient() {
        let spec = AttenuationSpec::Maxwell { eta: 1.4e5 };
        let omega = at_khz(300.0);
        let h = 1e-3 * KAPPA0;
        let fd = (spec.modulus_raw(KAPPA0 + h, omega.omega_r()) - spec.modulus_raw(KAPPA0 - h, omega.omega_r()))
            / (2.0 * h);
        let d = spec.modulus_derivative(KAPPA0, omega);
        assert!((d - fd).norm() < 1e-6 * d.norm());
    }

    #[test]
    fn coefficient_derivative_kelvin_voigt() {
        let spec = AttenuationSpec::KelvinVoigt { tau_eps: 4.5e-9 };
        let omega = at_khz(300.0);
        let d = spec.coefficient_derivative(KAPPA0, omega, 0).unwrap();
        let exact = Complex64::new(0.0, -omega.omega_r() * KAPPA0);
        assert!((d - exact).norm() < 1e-6 * exact.norm());
        assert!(spec.coefficient_derivative(KAPPA0, omega, 1).is_err());
    }

    fn any_valid_spec() -> impl Strategy<Value = AttenuationSpec> {
        let tau = 1e-10..1e-5f64;
        prop_oneof![
            Just(AttenuationSpec::NoAttenuation),
            (1.0..2000.0f64).prop_map(|eta_q| AttenuationSpec::KolskyFutterman { eta_q }),
            (tau.clone(), 0.0..1.0f64, 0.0..=1.0f64).prop_map(|(te, r, beta)| AttenuationSpec::ColeCole {
                tau_eps: te,
                tau_sig: te * r,
                beta
            }),
            (tau.clone(), 0.0..1.0f64).prop_map(|(te, r)| AttenuationSpec::Zener { tau_eps: te, tau_sig: te * r }),
            (0.0..1e-7f64).prop_map(|tau_eps| AttenuationSpec::KelvinVoigt { tau_eps }),
            (1.0..1e8f64).prop_map(|eta| AttenuationSpec::Maxwell { eta }),
            (1e-3..1e3f64, 1e-6..1e6f64, 0.01..0.99f64)
                .prop_map(|(eta_q, tau, beta)| AttenuationSpec::Ksb { eta_q, tau, beta }),
            (1e-3..1e3f64, 0.01..0.99f64).prop_map(|(tau, beta)| AttenuationSpec::Szabo { tau, beta }),
            prop::collection::vec((1e3..1e8f64, 0.0..0.2f64), 0..5).prop_map(|m| AttenuationSpec::Generalized {
                mechanisms: m.into_iter().map(|(omega_l, b_l)| Mechanism { omega_l, b_l }).collect()
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn modulus_sign_conditions(spec in any_valid_spec(), khz in 50.0..800.0f64, kappa0 in 1e9..4e9f64) {
            let omega = at_khz(khz);
            let k = evaluate_bulk_modulus(&spec, kappa0, omega).unwrap();
            prop_assert!(k.re > 0.0, "{:?}: {}", spec, k);
            prop_assert!(k.im <= 0.0, "{:?}: {}", spec, k);
            let c = complex_wave_speed(k, 1000.0).unwrap();
            prop_assert!(validate_attenuation(c, omega).is_ok());
        }
    }

    proptest! {
        #[test]
        fn kolsky_futterman_q_is_eta(eta_q in 1e-3..1e6f64, khz in 1.0..1e4f64) {
            let q = quality_factor(&AttenuationSpec::KolskyFutterman { eta_q }, KAPPA0, at_khz(khz)).unwrap();
            prop_assert!((q - eta_q).abs() <= 4.0 * f64::EPSILON * eta_q);
        }
    }
}
