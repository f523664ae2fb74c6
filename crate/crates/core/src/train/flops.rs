use serde::{Deserialize, Serialize};

use super::Mode;
use crate::ssat::{masked_count, DecoderConfig};
use crate::vit::EncoderConfig;

/// Forward cost per image. `macs` counts multiply-accumulates (the figure
/// usually quoted as "GFLOPs" for vision models); `flops` is `2 · macs`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub macs: u64,
    pub flops: u64,
}

impl FlopCount {
    fn from_macs(macs: u64) -> Self {
        Self { macs, flops: 2 * macs }
    }
}

pub fn linear_macs(tokens: usize, in_dim: usize, out_dim: usize) -> u64 {
    (tokens * in_dim * out_dim) as u64
}

/// Q, K, V and output projections, the two attention products, and the MLP.
pub fn block_macs(tokens: usize, dim: usize, mlp_ratio: usize) -> u64 {
    let n = tokens as u64;
    let d = dim as u64;
    4 * n * d * d + 2 * n * n * d + 2 * n * d * d * mlp_ratio as u64
}

/// Full-token classification path: patch embedding, blocks, head.
pub fn classification_macs(enc: &EncoderConfig) -> u64 {
    let n = enc.num_patches();
    let pd = enc.patch_size * enc.patch_size * enc.channels;
    linear_macs(n, pd, enc.dim)
        + enc.depth as u64 * block_macs(enc.num_tokens(), enc.dim, enc.mlp_ratio)
        + linear_macs(1, enc.dim, enc.num_classes)
}

/// Masked path: every patch is embedded, the blocks see the visible tokens
/// (plus class token), then the decoder runs over the full grid.
pub fn reconstruction_macs(enc: &EncoderConfig, dec: &DecoderConfig, mask_ratio: f64) -> u64 {
    let n = enc.num_patches();
    let pd = enc.patch_size * enc.patch_size * enc.channels;
    let visible = n - masked_count(n, mask_ratio);
    let tokens = visible + usize::from(enc.use_class_token);
    linear_macs(n, pd, enc.dim)
        + enc.depth as u64 * block_macs(tokens, enc.dim, enc.mlp_ratio)
        + linear_macs(visible, enc.dim, dec.dim)
        + dec.depth as u64 * block_macs(n, dec.dim, dec.mlp_ratio)
        + linear_macs(n, dec.dim, pd)
}

/// Analytic forward cost per image of one training step in `mode`.
pub fn estimate_flops(enc: &EncoderConfig, dec: &DecoderConfig, mode: Mode, mask_ratio: f64) -> FlopCount {
    let macs = match mode {
        Mode::Scratch | Mode::Finetune => classification_macs(enc),
        Mode::SslPretrain => reconstruction_macs(enc, dec, mask_ratio),
        Mode::Ssat => classification_macs(enc) + reconstruction_macs(enc, dec, mask_ratio),
    };
    FlopCount::from_macs(macs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_cost_by_hand() {
        // n=2, d=3, ratio 4: 4·2·9 + 2·4·3 + 2·2·9·4
        assert_eq!(block_macs(2, 3, 4), 72 + 24 + 144);
        assert_eq!(linear_macs(5, 4, 3), 60);
        assert_eq!(FlopCount::from_macs(7).flops, 14);
    }
}
