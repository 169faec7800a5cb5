//! Synthetic bitemporal scenes, netpbm file I/O and batching.

mod index;
mod netpbm;
mod synth;

pub use index::{batch_iter, batch_order, Batch, BatchIter, DatasetIndex, SPLITS};
pub use netpbm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_pgm, load_ppm, save_pgm, save_ppm,
};
pub use synth::{generate_scene, generate_split, generate_synthetic_dataset, sample_id, SynthConfig, SynthScene};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Co-registered pre/post images (1,3,H,W) in [0,1] and their change mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BitemporalSample {
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub mask: Mask,
}

impl BitemporalSample {
    pub fn check(&self) -> Result<()> {
        let (a, b) = (self.pre.shape(), self.post.shape());
        if a != b || a.n() != 1 || a.c() != 3 {
            return Err(Error::Dimension(format!("pre {a} and post {b} must both be (1,3,H,W)")));
        }
        if (self.mask.n(), self.mask.h(), self.mask.w()) != (1, a.h(), a.w()) {
            return Err(Error::Dimension(format!(
                "mask {}x{} does not match image {}x{}",
                self.mask.h(),
                self.mask.w(),
                a.h(),
                a.w()
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pre.shape().h()
    }

    pub fn width(&self) -> usize {
        self.pre.shape().w()
    }
}
