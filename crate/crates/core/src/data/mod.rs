//! Annotation files, images, dataset splits and the synthetic desk-scale corpus.

mod annotations;
mod image;
mod split;
mod synth;

pub use annotations::{
    parse_annotations, parse_annotations_str, parse_score_rows, write_annotations, AnnotationRecord,
};
pub use image::{resize_keep_aspect, Image, CHANNELS};
pub use split::{make_split, make_split_with_test, DatasetSplit};
pub use synth::{
    discretized_gaussian, edge_density, generate_synthetic, mean_luminance, CorpusManifest,
    ManifestEntry, RuleParams, SynthItem, SynthSpec, SyntheticCorpus, EDGE_THRESHOLD,
};

use std::path::Path;

use rayon::prelude::*;

use crate::distcore::{normalize_histogram, ScoreDistribution};
use crate::Result;

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub target: ScoreDistribution,
}

/// Load `annotations.csv` and `images/<id>.png` from `dir`, optionally resizing every image
/// so its smaller side equals `small_side`.
pub fn load_samples(dir: &Path, small_side: Option<usize>) -> Result<Vec<Sample>> {
    let records = parse_annotations(&dir.join("annotations.csv"))?;
    records
        .par_iter()
        .map(|r| {
            let image = Image::load_png(&dir.join("images").join(format!("{}.png", r.image_id)))?;
            let image = match small_side {
                Some(s) => resize_keep_aspect(&image, s),
                None => image,
            };
            Ok(Sample {
                id: r.image_id.clone(),
                image,
                target: normalize_histogram(&r.counts)?,
            })
        })
        .collect()
}
