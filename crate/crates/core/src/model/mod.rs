//! Network description, the forward/backward pass, serialization and the
//! compression calculator.

mod arch;
mod checkpoint;
mod compression;
mod forward;
mod io;
mod packed;
mod params;
mod program;

pub use arch::{Architecture, ConvSpec, LayerSpec, BUILTIN};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use compression::{compression_ratio, compression_report, CompressionReport, ParamCounts};
pub use forward::{
    backward, forward, BnGrad, Cache, ConvGrad, ForwardOutput, Grads, LinearGrad, Mode,
};
pub use packed::{
    export_packed, packed_binary_bytes, PackedConv, PackedModel, PACKED_MAGIC, PACKED_VERSION,
};
pub use params::{BinaryKernel, BnParams, ConvParams, LinearParams, Params, CENTER_LR};
pub use program::{Node, Op, Program, Shape};
