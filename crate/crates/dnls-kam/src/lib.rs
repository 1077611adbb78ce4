//! Finite-truncation KAM machinery for the derivative nonlinear Schrödinger
//! equation with periodic boundary conditions.
//!
//! The crate builds the Hamiltonian in Fourier coordinates, reduces it to a
//! partial Birkhoff normal form, passes to action-angle variables around a
//! family of tangential tori, and then runs a quadratic KAM iteration whose
//! homological equations carry an angle-dependent normal frequency. Excluded
//! resonance zones in parameter space are recorded on a grid.
//!
//! Series algebra, norms and the homological solvers are generic over the
//! real scalar ([`Real`]); the model and the iteration are driven in `f64`.

pub mod appendix;
pub mod dnls;
pub mod error;
pub mod fourier;
pub mod homological;
pub mod index;
pub mod kam;
pub mod linalg;
pub mod nonres;
pub mod norms;
pub mod series;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive};
use std::fmt::{Debug, Display, LowerExp};
use std::str::FromStr;

/// Real scalar the generic algebra runs over.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Tag written into binary dumps.
    const TAG: u8;

    /// Lossless-enough conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
    fn to_bits64(self) -> u64;
    fn from_bits64(b: u64) -> Self;
}

impl Real for f32 {
    const TAG: u8 = 4;
    fn to_bits64(self) -> u64 {
        self.to_bits() as u64
    }
    fn from_bits64(b: u64) -> Self {
        f32::from_bits(b as u32)
    }
}

impl Real for f64 {
    const TAG: u8 = 8;
    fn to_bits64(self) -> u64 {
        self.to_bits()
    }
    fn from_bits64(b: u64) -> Self {
        f64::from_bits(b)
    }
}

/// Complex coefficient over a generic real scalar.
pub type C<T> = Complex<T>;

pub use error::{Error, Result};
pub use index::{sign, ComponentLabel, MultiIndex, SiteSet};

/// Double-precision series, the workhorse of the model and the iteration.
pub type Series = series::FormalSeries<f64>;
/// Single-precision series, handy for cheap smoke checks.
pub type Series32 = series::FormalSeries<f32>;
/// Double-precision vector field.
pub type Field = norms::VectorField<f64>;
/// Double-precision Fourier function on the torus.
pub type Fourier = fourier::FourierFunction<f64>;
