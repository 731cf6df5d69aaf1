use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::Real;
use crate::data::Image;
use crate::model::Network;
use crate::{Error, Result};

/// Per-image softmax vectors from a frozen teacher classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    ids: Vec<String>,
    targets: Vec<Vec<f64>>,
}

impl TeacherTargets {
    pub fn new(ids: Vec<String>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != targets.len() {
            return Err(Error::shape(
                "teacher_targets",
                format!("{} ids for {} target vectors", ids.len(), targets.len()),
            ));
        }
        let classes = targets.first().map_or(0, Vec::len);
        for (id, s) in ids.iter().zip(&targets) {
            if s.len() != classes || classes == 0 {
                return Err(Error::shape(
                    "teacher_targets",
                    format!("`{id}` has {} classes, expected {classes}", s.len()),
                ));
            }
            let sum: f64 = s.iter().sum();
            if s.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidAnnotation(format!(
                    "teacher target for `{id}` is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self { ids, targets })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn classes(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.targets[i].as_slice())
    }
}

/// Softmax output of the teacher's classifier head for every image.
pub fn generate_teacher_targets<T: Real>(
    teacher: &Network<T>,
    ids: &[String],
    images: &[Image],
) -> Result<TeacherTargets> {
    if ids.len() != images.len() {
        return Err(Error::shape(
            "generate_teacher_targets",
            format!("{} ids for {} images", ids.len(), images.len()),
        ));
    }
    if teacher.config().distill_classes.is_none() {
        return Err(Error::InvalidConfig("teacher network has no classifier head".into()));
    }
    let targets = images
        .par_iter()
        .map(|img| teacher.class_probabilities(img))
        .collect::<Result<Vec<_>>>()?;
    TeacherTargets::new(ids.to_vec(), targets)
}

/// One row per image: `id,s_1,...,s_K`.
pub fn write_teacher_targets(targets: &TeacherTargets, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, s) in targets.ids.iter().zip(&targets.targets) {
        out.push_str(id);
        for v in s {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_teacher_targets(path: &Path) -> Result<TeacherTargets> {
    let text = std::fs::read_to_string(path)?;
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    let mut report = String::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim();
        let values: std::result::Result<Vec<f64>, _> = fields.map(|f| f.trim().parse::<f64>()).collect();
        match values {
            Ok(v) if !id.is_empty() && !v.is_empty() => {
                ids.push(id.to_string());
                targets.push(v);
            }
            Ok(_) => writeln!(report, "line {}: expected `id,s_1,...,s_K`", i + 1).expect("write to string"),
            Err(e) => writeln!(report, "line {}: {e}", i + 1).expect("write to string"),
        }
    }
    if !report.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            report,
        });
    }
    TeacherTargets::new(ids, targets)
}
