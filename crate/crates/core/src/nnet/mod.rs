//! Segmentation network: tensors and layer primitives with hand-written
//! backward passes, the U-Net, weighted cross-entropy, Adam and training.

mod checkpoint;
mod gradcheck;
mod loss;
mod ops;
mod optim;
mod tensor;
mod train;
mod unet;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use loss::{weighted_bce, weighted_bce_with_grad, BCE_EPS};
pub use ops::{
    concat, conv2d, conv2d_backward, downsample2, maxpool2, maxpool2_backward, relu, relu_backward,
    sigmoid, sigmoid_scalar, split_channels, upsample_nearest2, upsample_nearest2_backward,
};
pub use optim::{adam_step, Adam, AdamConfig};
pub use tensor::{Real, Tensor};
pub use train::{
    downsample_mask_any, evaluate_loss, train, train_with, Progress, TrainConfig, TrainHistory,
    TrainSample,
};
pub use unet::{forward_patch, ConvLayer, Gradients, Tape, UNet, UNetConfig};
