//! Minimal reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records operations in creation order, so every node's inputs
//! precede it and the backward pass is a single reverse sweep. Parameters
//! live in a [`ParamSet`] that the tape borrows; gradients come back as a
//! [`Gradients`] aligned with it.

mod checkpoint;
mod mlp;
mod optim;
mod tape;
mod tensor;
mod trainlog;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use mlp::{Activation, Mlp, MlpSpec, MlpTrace, Mode};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{mse_loss, softmax_temperature, Gradients, ParamId, ParamSet, Tape, Var};
pub use tensor::Tensor2;
pub use trainlog::{EpochStats, TrainLog};

/// Deterministic 64-bit mixer (splitmix64 finaliser).
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a base seed and a label, stable across platforms.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label
    let h = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    mix_seed(seed ^ mix_seed(h))
}
