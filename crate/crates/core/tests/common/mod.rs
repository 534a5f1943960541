/// A few-second configuration: 8x8 images, two-block encoder, tiny generator.
pub const TINY: &str = r#"
seed = 3

[encoder]
image_size = 8
patch = 4
dim = 8
depth = 2
heads = 2
mlp_ratio = 1

[stage]
stats_batch = 16

[stage.train]
epochs = 1
batch_size = 8

[inversion]
steps = 3
batch_size = 4
samples = 5

[inversion.generator]
latent_dim = 4
bottleneck_size = 2
channels = [2, 2, 4]
output_size = 8

[[tasks]]
kind = "blobs"
size = 40
resolution = 8
blob_width = [1.0, 2.0]
seed = 1

[[tasks]]
kind = "stripes"
size = 40
resolution = 8
stripe_freq = [1, 3]
seed = 2

[[tasks]]
kind = "checker-noise"
size = 40
resolution = 8
checker_cells = [2, 4]
seed = 3
"#;
