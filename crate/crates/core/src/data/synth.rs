//! Procedural corpus whose score distributions are a known function of image content.
//!
//! Each image belongs to a latent class that fixes its texture family and tint. The mean of
//! its score distribution is an affine function of two measured statistics (mean luminance and
//! edge density); the spread is fixed per class. A fraction of annotations can be corrupted
//! with a spurious spike far from the mean.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotations::{parse_annotations, write_annotations, AnnotationRecord};
use super::image::Image;
use super::Sample;
use crate::distcore::{normalize_histogram, ScoreDistribution, ScoreHistogram, BINS};
use crate::{Error, Result};

/// Luminance step above which a pixel counts as an edge.
pub const EDGE_THRESHOLD: f64 = 0.1;

/// Rec. 601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const TINTS: [[f32; 3]; 4] = [
    [0.06, 0.0, -0.06],
    [-0.06, 0.0, 0.06],
    [0.0, 0.06, -0.06],
    [0.0, 0.0, 0.0],
];

/// Score mean as an affine function of image statistics, clamped to `[1.5, 9.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    pub intercept: f64,
    pub luminance: f64,
    pub edge: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            intercept: 1.5,
            luminance: 6.0,
            edge: 4.0,
        }
    }
}

impl RuleParams {
    pub fn apply(&self, luminance: f64, edge_density: f64) -> f64 {
        (self.intercept + self.luminance * luminance + self.edge * edge_density).clamp(1.5, 9.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Latent classes, at most 4 texture families.
    pub n_classes: usize,
    /// Score standard deviation per class.
    pub class_std: Vec<f64>,
    pub rule: RuleParams,
    pub votes_per_image: u32,
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_images: 2000,
            min_side: 32,
            max_side: 48,
            n_classes: 4,
            class_std: vec![0.8, 1.2, 1.6, 2.0],
            rule: RuleParams::default(),
            votes_per_image: 210,
            outlier_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_images == 0 {
            return bad("n_images must be >= 1".into());
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return bad(format!("invalid side range {}..={}", self.min_side, self.max_side));
        }
        if !(1..=TINTS.len()).contains(&self.n_classes) {
            return bad(format!("n_classes must be in 1..={}", TINTS.len()));
        }
        if self.class_std.len() != self.n_classes || self.class_std.iter().any(|s| !(*s > 0.0)) {
            return bad("class_std needs one positive entry per class".into());
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad(format!("outlier_rate must be in [0, 1), got {}", self.outlier_rate));
        }
        if self.votes_per_image == 0 {
            return bad("votes_per_image must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub class: usize,
    pub image: Image,
    /// Annotation as published, possibly corrupted.
    pub counts: ScoreHistogram,
    /// Annotation before corruption.
    pub clean_counts: ScoreHistogram,
    pub luminance: f64,
    pub edge_density: f64,
    pub rule_mean: f64,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class: usize,
    pub height: usize,
    pub width: usize,
    pub luminance: f64,
    pub edge_density: f64,
    pub rule_mean: f64,
    pub outlier: bool,
    pub clean_counts: [u32; BINS],
}

/// On-disk description of a corpus: spec, seed and per-image rule inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub images: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SynthSpec,
    pub items: Vec<SynthItem>,
}

/// Mean Rec. 601 luma over all pixels.
pub fn mean_luminance(img: &Image) -> f64 {
    luma_plane(img).iter().sum::<f64>() / (img.height() * img.width()) as f64
}

fn luma_plane(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let d = img.data();
    (0..h * w)
        .map(|i| (0..3).map(|c| LUMA[c] * d[c * h * w + i] as f64).sum())
        .collect()
}

/// Fraction of pixels whose forward luma differences `|dx| + |dy|` exceed [`EDGE_THRESHOLD`].
///
/// Only pixels with both a right and a lower neighbour are counted.
pub fn edge_density(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return 0.0;
    }
    let l = luma_plane(img);
    let mut edges = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let c = l[y * w + x];
            let g = (l[y * w + x + 1] - c).abs() + (l[(y + 1) * w + x] - c).abs();
            if g > EDGE_THRESHOLD {
                edges += 1;
            }
        }
    }
    edges as f64 / ((h - 1) * (w - 1)) as f64
}

fn gaussian_bins(center: f64, std: f64) -> [f64; BINS] {
    let mut p = [0.0; BINS];
    for (i, v) in p.iter_mut().enumerate() {
        let z = ((i + 1) as f64 - center) / std;
        *v = (-0.5 * z * z).exp();
    }
    let s: f64 = p.iter().sum();
    p.map(|v| v / s)
}

fn bins_mean(p: &[f64; BINS]) -> f64 {
    p.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum()
}

/// Discretized Gaussian over bins 1..=10 with spread `std`, re-centred so its mean is `mean`.
pub fn discretized_gaussian(mean: f64, std: f64) -> [f64; BINS] {
    // the bin-truncated mean is monotone in the centre, so bisect on the centre
    let (mut lo, mut hi) = (-20.0, 31.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if bins_mean(&gaussian_bins(mid, std)) < mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    gaussian_bins(0.5 * (lo + hi), std)
}

fn to_votes(p: &[f64; BINS], votes: u32) -> [u32; BINS] {
    let mut counts = p.map(|v| (v * votes as f64).round() as u32);
    if counts.iter().all(|&c| c == 0) {
        let best = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        counts[best] = votes;
    }
    counts
}

fn render(rng: &mut ChaCha8Rng, class: usize, h: usize, w: usize) -> Image {
    let base: f32 = rng.gen_range(0.15..0.85);
    let amp: f32 = rng.gen_range(0.08f32..0.25).min(base).min(1.0 - base);
    let period: f32 = if class == 3 {
        rng.gen_range(20.0..40.0)
    } else {
        rng.gen_range(3.0..16.0)
    };
    let (phase_x, phase_y): (f32, f32) = (rng.gen_range(0.0..period), rng.gen_range(0.0..period));
    let noise = Normal::new(0.0f32, 0.01).expect("valid std");
    let tau = std::f32::consts::TAU;
    let square = |t: f32| if (tau * t / period).sin() >= 0.0 { 1.0 } else { -1.0 };

    let mut img = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32 + phase_x, y as f32 + phase_y);
            let s = match class {
                0 => square(fy),
                1 => square(fx),
                2 => square(fx) * square(fy),
                _ => (tau * fx / period).sin() * (tau * fy / period).sin(),
            };
            let v = base + amp * s + noise.sample(rng);
            for c in 0..3 {
                img.set(c, y, x, (v + TINTS[class][c]).clamp(0.0, 1.0));
            }
        }
    }
    img.quantize();
    img
}

fn generate_item(spec: &SynthSpec, index: usize) -> SynthItem {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let class = rng.gen_range(0..spec.n_classes);
    let h = rng.gen_range(spec.min_side..=spec.max_side);
    let w = rng.gen_range(spec.min_side..=spec.max_side);
    let image = render(&mut rng, class, h, w);

    let luminance = mean_luminance(&image);
    let edge = edge_density(&image);
    let rule_mean = spec.rule.apply(luminance, edge);
    let clean = to_votes(
        &discretized_gaussian(rule_mean, spec.class_std[class]),
        spec.votes_per_image,
    );

    let outlier = rng.gen_bool(spec.outlier_rate);
    let mut counts = clean;
    if outlier {
        let far: Vec<usize> = (0..BINS)
            .filter(|&b| ((b + 1) as f64 - rule_mean).abs() >= 4.0)
            .collect();
        let bin = far[rng.gen_range(0..far.len())];
        let spike = (rng.gen_range(0.3..0.6) * spec.votes_per_image as f64).round() as u32;
        counts[bin] += spike;
    }
    SynthItem {
        id: format!("img{index:05}"),
        class,
        image,
        counts: ScoreHistogram::new(counts),
        clean_counts: ScoreHistogram::new(clean),
        luminance,
        edge_density: edge,
        rule_mean,
        outlier,
    }
}

/// Generate a corpus; each image depends only on `(seed, index)`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let items = (0..spec.n_images)
        .into_par_iter()
        .map(|i| generate_item(spec, i))
        .collect();
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        items,
    })
}

impl SyntheticCorpus {
    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|it| it.id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.class).collect()
    }

    /// Samples carrying the published (possibly corrupted) annotations.
    pub fn samples(&self) -> Vec<Sample> {
        self.items
            .iter()
            .map(|it| Sample {
                id: it.id.clone(),
                image: it.image.clone(),
                target: normalize_histogram(&it.counts).expect("synthetic histograms have votes"),
            })
            .collect()
    }

    /// Samples carrying the uncorrupted annotations.
    pub fn clean_samples(&self) -> Vec<Sample> {
        self.items
            .iter()
            .map(|it| Sample {
                id: it.id.clone(),
                image: it.image.clone(),
                target: normalize_histogram(&it.clean_counts).expect("synthetic histograms have votes"),
            })
            .collect()
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            seed: self.spec.seed,
            spec: self.spec.clone(),
            images: self
                .items
                .iter()
                .map(|it| ManifestEntry {
                    id: it.id.clone(),
                    class: it.class,
                    height: it.image.height(),
                    width: it.image.width(),
                    luminance: it.luminance,
                    edge_density: it.edge_density,
                    rule_mean: it.rule_mean,
                    outlier: it.outlier,
                    clean_counts: *it.clean_counts.counts(),
                })
                .collect(),
        }
    }

    /// Write `manifest.json`, `annotations.csv` and `images/<id>.png` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        for it in &self.items {
            it.image.save_png(&dir.join("images").join(format!("{}.png", it.id)))?;
        }
        let records: Vec<AnnotationRecord> = self
            .items
            .iter()
            .map(|it| AnnotationRecord {
                image_id: it.id.clone(),
                counts: it.counts,
            })
            .collect();
        write_annotations(&dir.join("annotations.csv"), &records)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest())?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let records = parse_annotations(&dir.join("annotations.csv"))?;
        if records.len() != manifest.images.len() {
            return Err(Error::InvalidAnnotation(format!(
                "manifest lists {} images but annotations have {} records",
                manifest.images.len(),
                records.len()
            )));
        }
        let items = manifest
            .images
            .iter()
            .zip(records)
            .map(|(entry, rec)| {
                if entry.id != rec.image_id {
                    return Err(Error::InvalidAnnotation(format!(
                        "manifest id `{}` does not match annotation id `{}`",
                        entry.id, rec.image_id
                    )));
                }
                let image = Image::load_png(&dir.join("images").join(format!("{}.png", entry.id)))?;
                Ok(SynthItem {
                    id: entry.id.clone(),
                    class: entry.class,
                    image,
                    counts: rec.counts,
                    clean_counts: ScoreHistogram::new(entry.clean_counts),
                    luminance: entry.luminance,
                    edge_density: entry.edge_density,
                    rule_mean: entry.rule_mean,
                    outlier: entry.outlier,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: manifest.spec,
            items,
        })
    }
}

impl From<&SynthItem> for ScoreDistribution {
    fn from(it: &SynthItem) -> Self {
        normalize_histogram(&it.counts).expect("synthetic histograms have votes")
    }
}
