//! Frequency-domain visco-acoustic wave modeling and full-waveform inversion
//! on 2D node grids.
//!
//! The pipeline runs bottom-up:
//! [`attenuation`] turns a real bulk modulus into a complex one,
//! [`medium`] holds gridded parameters and builds synthetic phantoms,
//! [`solver`] assembles and factorizes the complex Helmholtz operator,
//! [`signal`] and [`data`] produce and store receiver data,
//! and [`inversion`] reconstructs a medium from that data.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod attenuation;
pub mod data;
pub mod error;
pub mod inversion;
pub mod medium;
pub mod signal;
pub mod solver;

pub use attenuation::{AttenuationSpec, ComplexFrequency, ModelKind};
pub use data::{DataSet, FrequencyData};
pub use error::{Error, Result};
pub use medium::{MediumGrid, Parametrization};
pub use num_complex::Complex64;
