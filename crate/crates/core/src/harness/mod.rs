//! Synthetic data, cropping, the full model, training, tracking, the
//! three-stage latency baseline, ablations and checkpoints.

pub mod ablation;
pub mod baseline;
pub mod checkpoint;
pub mod crop;
pub mod model;
pub mod synthetic;
pub mod track;
pub mod train;

pub use ablation::{held_out_set, run_ablation, run_arm, score_model, selection_efficacy, AblationConfig, AblationKind, AblationTable, ArmResult, HeldOutScore, HeldOutSequence};
pub use baseline::{bench_sizes, describe, latency_csv, measure_latency, unified_features, LatencyReport, ThreeStageBaseline};
pub use checkpoint::{Checkpoint, OptimizerState};
pub use crop::{crop_image, crop_search, crop_search_at, crop_template, CropConfig, CropWindow};
pub use model::{BatchInput, ForwardVars, HeadMode, Inference, Model, ModelConfig};
pub use synthetic::{clean_schedule, degrade_span, generate_sequence, noise_span_scenario, Degradation, Scene, Schedule, SyntheticScenario};
pub use track::{track_sequence, track_sequences, TrackOptions};
pub use train::{curve_csv, sample_pair, CurvePoint, Curriculum, TrainConfig, Trainer, TrainingSample};
