//! IoU bookkeeping and the protocol runners.

mod metrics;
mod protocols;

pub use metrics::{harmonic, iou_accumulate, miou, ConfusionAccumulator, IouCounts, SubsetMiou};
pub use protocols::{
    fss_episode, image_embedding, image_accuracy, run_cross, run_fss, run_gzss, run_zss, scene_proposals, train_on_fold,
    zero_shot_maps, CrossReport, EpisodeOutcome, EvalConfig, MetricsReport, Protocol,
};
