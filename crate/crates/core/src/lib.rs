//! DriveGuard: degrade driving-camera frames with parameterized noise and
//! artifact attacks, restore them with convolutional autoencoders trained
//! under an MSE+SSIM loss, and quantify restoration quality and downstream
//! segmentation robustness.

pub mod autodiff;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod rng;
pub mod segmetrics;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Caps intra-op parallelism for the whole process. Call once, before any
/// tensor work; later calls are ignored by the underlying pool.
pub fn init_thread_pool(threads: Option<usize>) {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    // Ignore the error when a global pool already exists.
    let _ = builder.build_global();
}
