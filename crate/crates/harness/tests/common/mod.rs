#![allow(dead_code)]

use tabimg_core::data::SplitDataset;
use tabimg_harness::pipeline::{load_data, pretrain};
use tabimg_harness::{Checkpoint, RunConfig};

/// A configuration small enough to pre-train in well under a second.
pub const TINY: &str = "\
samples = 120
image_size = 8
d_model = 16
heads = 2
tab_layers = 1
interact_layers = 1
proj_dim = 8
image_head_hidden = 16
tab_head_hidden = 16
ff_mult = 2
vision_widths = 4,8
vision_strides = 1,2
epochs = 2
batch_size = 16
warmup_epochs = 1
lr = 0.001
finetune_epochs = 4
finetune_batch_size = 32
eval_batch_size = 32
";

pub fn tiny(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.seed = seed;
    cfg.finish().unwrap();
    cfg
}

pub fn tiny_pretrained(seed: u64) -> (RunConfig, SplitDataset, Checkpoint) {
    let cfg = tiny(seed);
    let split = load_data(&cfg).unwrap();
    let (ckpt, _) = pretrain(&cfg, &split, |_| {}).unwrap();
    (cfg, split, ckpt)
}
