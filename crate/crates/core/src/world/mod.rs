//! The synthetic universe: frozen encoders and prototypes, scenes and
//! datasets, fold splits, pseudo-label corruption, class-agnostic
//! proposals, few-shot episodes and saliency.

mod corrupt;
mod dataset;
mod episode;
mod folds;
mod proposals;
mod scene;
mod universe;

pub use corrupt::{pseudo_label, Corruption};
pub use dataset::{gen_dataset, DatasetConfig, Split, SyntheticDataset};
pub use episode::{oracle_saliency, sample_episode, EpisodeTask};
pub use folds::{make_folds, FoldSplit};
pub use proposals::{connected_components, gen_proposals, ProposalConfig};
pub use scene::{rle_decode, rle_encode, Rect, Scene, WeakLabel};
pub use universe::{PrototypeMode, World, WorldConfig};

pub(crate) use dataset::to_json;
pub(crate) use universe::prompt_matrix;
