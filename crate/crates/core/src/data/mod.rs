//! Synthetic datasets: spatial-relation questions over glyph scenes and a
//! procedural class universe for few-shot episodes.

pub mod fewshot;
pub mod io;
pub mod sqoop;

pub use fewshot::{
    gen_fewshot_universe, sample_episode, sample_episode_with, ClassSplit, Episode, EpisodeConfig,
    FewShotConfig, FewShotPool,
};
pub use sqoop::{
    gen_sqoop, render_scene, Encoding, Placement, Relation, SqoopConfig, SqoopDataset, SqoopSample,
    Triple,
};
