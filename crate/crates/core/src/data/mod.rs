//! Synthetic grounding scenes, JSONL datasets, and the image codec.

mod image;
mod jsonl;
pub mod synth;

pub use image::{decode_ppm, encode_ppm, read_ppm, write_ppm, Image};
pub use jsonl::{
    encode_dataset, generate_dataset, generate_split, parse_dataset, read_dataset, write_dataset, DatasetSummary,
    PhraseSample, Split,
};
pub use synth::{generate_queries, generate_scene, SynthConfig, SyntheticScene};
