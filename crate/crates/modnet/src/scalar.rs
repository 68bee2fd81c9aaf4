use ndarray::ScalarOperand;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of every tensor in the crate. Training runs use `f32`,
/// numerical tests (finite differences, bitwise trajectory checks) use `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn as_f64(self) -> f64;

    /// Uniform draw in [0, 1) from the given rng, at this precision.
    fn uniform01<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
    const DTYPE_NAME: &'static str;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn uniform01<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    const BYTE_WIDTH: usize = 4;
    const DTYPE_NAME: &'static str = "f32";
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn uniform01<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    const BYTE_WIDTH: usize = 8;
    const DTYPE_NAME: &'static str = "f64";
}

/// Shorthand for converting literals into the generic element type.
pub fn c<T: Scalar>(x: f64) -> T {
    <T as num_traits::FromPrimitive>::from_f64(x).expect("f64 conversion")
}
