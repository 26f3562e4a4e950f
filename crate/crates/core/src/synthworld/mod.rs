//! Synthetic scenes, their feature rendering, and the caption grammar.

mod dataset;
mod grammar;
mod render;
mod scene;
mod vocab;

pub use dataset::{read_dataset, read_samples, write_dataset, write_samples, Sample, DATASET_HEADER};
pub use grammar::{describe, parse_caption, Caption, DetailLevel, ParseResult};
pub use render::{render_features, CELL_BLOCK, FEATURE_DIM};
pub use scene::{generate_scene, Element, ObjectInstance, Relation, Scene, SceneConfig};
pub use vocab::{
    Category, Cell, Color, RelationKind, Size, TokenClass, TokenId, Vocabulary, ARTICLE, BOS,
    EOS, PAD, PERIOD,
};
