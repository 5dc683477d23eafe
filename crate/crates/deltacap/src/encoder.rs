//! Weight-shared patch encoder with tapped hidden states.
//!
//! One weight set encodes each image of a pair independently; hidden
//! states are exported after every `layers / taps`-th layer, ordered
//! lower to higher, for the delta module to probe.

use serde::{Deserialize, Serialize};

use crate::blocks::{encoder_layer, BlockWeights};
use crate::error::{TensorError, TensorResult};
use crate::ppm::RgbImage;
use crate::tensor::{Tape, TensorId};

/// Normalized image: values in [0, 1], three channels, row-major.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ImageTensor {
    pub fn from_rgb(img: &RgbImage) -> Self {
        ImageTensor {
            height: img.height,
            width: img.width,
            values: img.to_unit_floats(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub taps: usize,
    pub heads: usize,
}

impl EncoderConfig {
    /// Layers whose hidden state is exported: layers/taps · j for j = 1..=taps.
    pub fn tap_layers(&self) -> Vec<usize> {
        let stride = self.layers / self.taps;
        (1..=self.taps).map(|j| stride * j).collect()
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.taps == 0 || self.layers == 0 {
            problems.push("encoder: layers and taps must be positive".into());
        } else if self.layers % self.taps != 0 {
            problems.push(format!(
                "encoder: layer count {} not divisible by tap count {}",
                self.layers, self.taps
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "encoder: image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            problems.push(format!(
                "encoder: d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        problems
    }
}

/// Encoder weights bound onto a tape for one forward pass.
pub struct EncoderBound {
    pub patch_embed: TensorId, // [patch_dim, d_model]
    pub patch_bias: TensorId,  // [d_model]
    pub pos_embed: TensorId,   // [patch_count, d_model]
    pub blocks: Vec<BlockWeights>,
}

/// Hidden states at the tap layers, lower to higher.
pub struct TapSet {
    pub taps: Vec<TensorId>,
}

/// Cut an image into flat patch vectors, `[P, patch_size² · 3]`, patches
/// in row-major scan order, pixels within a patch row-major and
/// channel-minor. Lossless: [`unpatchify`] inverts it.
pub fn patchify(img: &ImageTensor, patch_size: usize) -> TensorResult<(Vec<f64>, usize)> {
    if patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(TensorError::InvalidShape {
            op: "patchify",
            shape: vec![img.height, img.width],
            reason: format!("dims not divisible by patch size {patch_size}"),
        });
    }
    let (gh, gw) = (img.height / patch_size, img.width / patch_size);
    let pdim = patch_size * patch_size * 3;
    let mut out = vec![0.0; gh * gw * pdim];
    for py in 0..gh {
        for px in 0..gw {
            let patch = (py * gw + px) * pdim;
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let src = (y * img.width + px * patch_size) * 3;
                let dst = patch + dy * patch_size * 3;
                out[dst..dst + patch_size * 3]
                    .copy_from_slice(&img.values[src..src + patch_size * 3]);
            }
        }
    }
    Ok((out, gh * gw))
}

/// Inverse of [`patchify`] for a square grid of patches.
pub fn unpatchify(patches: &[f64], patch_size: usize, grid: usize) -> ImageTensor {
    let side = grid * patch_size;
    let pdim = patch_size * patch_size * 3;
    let mut values = vec![0.0; side * side * 3];
    for py in 0..grid {
        for px in 0..grid {
            let patch = (py * grid + px) * pdim;
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let dst = (y * side + px * patch_size) * 3;
                let src = patch + dy * patch_size * 3;
                values[dst..dst + patch_size * 3].copy_from_slice(&patches[src..src + patch_size * 3]);
            }
        }
    }
    ImageTensor {
        height: side,
        width: side,
        values,
    }
}

/// Run the encoder over one image, recording hidden states at the tap
/// layers. The image enters as an untracked constant; gradients flow to
/// the weights only.
pub fn encode_with_taps(
    tape: &mut Tape,
    img: &ImageTensor,
    weights: &EncoderBound,
    cfg: &EncoderConfig,
) -> TensorResult<TapSet> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(TensorError::Contract(problems.join("; ")));
    }
    if img.height != cfg.image_size || img.width != cfg.image_size {
        return Err(TensorError::InvalidShape {
            op: "encode_with_taps",
            shape: vec![img.height, img.width],
            reason: format!("config expects {0}x{0}", cfg.image_size),
        });
    }
    let (patches, p) = patchify(img, cfg.patch_size)?;
    let x0 = tape.constant(patches, vec![p, cfg.patch_dim()])?;
    let emb = tape.matmul(x0, weights.patch_embed)?;
    let emb_b = tape.add(emb, weights.patch_bias)?;
    let mut x = tape.add(emb_b, weights.pos_embed)?;
    let stride = cfg.layers / cfg.taps;
    let mut taps = Vec::with_capacity(cfg.taps);
    for (i, block) in weights.blocks.iter().enumerate() {
        x = encoder_layer(tape, x, block)?;
        if (i + 1) % stride == 0 {
            taps.push(x);
        }
    }
    Ok(TapSet { taps })
}
