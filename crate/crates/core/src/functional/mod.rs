//! Bit-exact integer execution of the encoder.

pub mod encoder;
pub mod layernorm;
pub mod matrix;
pub mod softmax;
pub mod weights;

pub use encoder::{encoder_forward, mlp_block, msa_block, ForwardOptions, LnMode, PartialSumOrder};
pub use layernorm::{layernorm_two_pass, LayerNormRowState, LnAffine};
pub use matrix::{block_matmul, bmm_block, PackedMatrix, TileAccumulator, TileMatrix};
pub use softmax::{pseudo_softmax_row, SoftmaxRowState};
pub use weights::{param_bytes, param_manifest, ActivationScales, EncoderWeights, Image, QTensor, TensorInfo};
