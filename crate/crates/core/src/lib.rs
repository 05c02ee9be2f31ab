//! Multi-modal conditioning for a flow-matching image transformer: token
//! packing with 3-axis rotary positions, block attention masks, LoRA
//! adapters, the EEG branch and the training loop.

pub mod attention;
pub mod conditioning;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tokens;
pub mod train;

pub use attention::{build_mutual_mask, lora_forward, lora_merge, masked_attention, AttentionParams, LoraAdapter, MaskMode, MutualMask};
pub use conditioning::{fnv1a64, table_index, CondInput, ConditionSet, Fusion, Mode, TextStub};
pub use error::{CoreError, Result};
pub use flow::{euler_sample, fm_loss, make_path, sample_sigma, train_step, AdamW, AdamWConfig, FlowItem, SigmaSchedule, StepOptions, StepReport, VelocityField};
pub use metrics::{l1, l2, probe_metrics, psnr, ssim, Probe, ProbeConfig, ProbeMetrics};
pub use model::{Model, ModelConfig};
pub use params::{Param, ParamStore};
pub use tokens::{assign_block_positions, extract_patches, pack, parse_layout, rope_rotate, unpatchify, AxisSplit, BlockKind, EegLayout, Layout, PackedSequence, Position, TokenBlock};
pub use train::{Example, Phase, TrainConfig, Trainer};
