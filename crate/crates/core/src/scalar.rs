use std::fmt::Debug;

use num_traits::Float;

/// Element type of matrices flowing through the accelerator.
///
/// The hardware datapath is single precision; `f64` is supported so the
/// reference GEMM can be run at higher precision for tolerance analysis.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to any float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}

impl Scalar for f64 {}
