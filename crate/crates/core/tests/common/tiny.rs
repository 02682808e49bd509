//! A desk-scale configuration small enough to train in well under a second.

use std::path::Path;

use patchloc::config::RunConfig;

pub const TINY: &str = "\
seed = 3
backbone.input_side = 16
backbone.grid = 4
backbone.widths = 4, 4
backbone.head_width = 4
backbone.classes = 2
crf.window = 3
crf.iterations = 2
crf.features = 2
train.batch_size = 8
train.phase1_epochs = 2
train.phase2_epochs = 1
eval.folds = 2
synth.image_side = 16
synth.grid = 4
synth.classes = 2
synth.boxed_classes = 1
synth.images = 40
synth.annotated_fraction = 0.25
synth.sigma_min = 1.5
synth.sigma_max = 2.5
";

pub fn tiny(dataset: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.dataset = dataset.to_path_buf();
    cfg
}
