#![allow(dead_code)]

use ern_core::compiler::{gen_random_checkpoint, Checkpoint};
use ern_core::graph::{ArchConfig, BlockKind, Variant};
use ern_core::pixembed::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two short conv-block stages and ten classes; runs in milliseconds.
pub fn tiny_config() -> ArchConfig {
    ArchConfig {
        variant: Variant::Custom,
        block: BlockKind::ConvBlock,
        stem_width: 64,
        stage_blocks: vec![1, 1],
        stage_channels: vec![64, 128],
        num_classes: 10,
        stride_on_conv1: false,
    }
}

pub fn tiny_bottleneck_config() -> ArchConfig {
    ArchConfig {
        variant: Variant::Custom,
        block: BlockKind::Bottleneck,
        stem_width: 64,
        stage_blocks: vec![2, 1],
        stage_channels: vec![64, 64],
        num_classes: 7,
        stride_on_conv1: false,
    }
}

pub fn tiny_checkpoint(seed: u64) -> Checkpoint {
    gen_random_checkpoint(&tiny_config(), 4, 1.0, seed).unwrap()
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * h * w).map(|_| rng.random::<u8>()).collect();
    Image::new(3, h, w, data).unwrap()
}
