//! Pixel-space gradient descent against a frozen model, pushing its predicted distribution
//! one bin up or down, plus per-pixel change heatmaps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor};
use crate::data::{Image, CHANNELS};
use crate::distcore::{HuberConfig, RawPrediction, ScoreDistribution, BINS};
use crate::model::{FusionWeight, HeadVariant, Mode, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Improve,
    Worsen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub direction: Direction,
    /// Fraction of every bin's mass moved one bin over, in `(0, 1]`.
    pub shift_amount: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Optional L-infinity bound on the total change of any pixel.
    pub linf_budget: Option<f64>,
    pub pixel_range: (f64, f64),
    pub huber_sigma: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            direction: Direction::Worsen,
            shift_amount: 0.5,
            steps: 100,
            step_size: 1.0,
            linf_budget: None,
            pixel_range: (0.0, 1.0),
            huber_sigma: 3.0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be positive, got {}", self.step_size));
        }
        if !(self.shift_amount > 0.0 && self.shift_amount <= 1.0) {
            return bad(format!("shift_amount must be in (0, 1], got {}", self.shift_amount));
        }
        if self.linf_budget.is_some_and(|b| !(b >= 0.0)) {
            return bad("linf_budget must be non-negative".into());
        }
        if !(self.pixel_range.0 < self.pixel_range.1) {
            return bad(format!("empty pixel range {:?}", self.pixel_range));
        }
        HuberConfig::new(self.huber_sigma)?;
        Ok(())
    }
}

/// Move `shift` of every bin's mass one bin up (improve) or down (worsen). The end bin in the
/// direction of travel keeps its own mass.
pub fn make_target(p: &ScoreDistribution, direction: Direction, shift: f64) -> Result<ScoreDistribution> {
    if !(shift > 0.0 && shift <= 1.0) {
        return Err(Error::InvalidConfig(format!("shift_amount must be in (0, 1], got {shift}")));
    }
    let src = p.probs();
    let mut out = [0.0; BINS];
    for i in 0..BINS {
        let (dest, is_end) = match direction {
            Direction::Improve => (i + 1, i == BINS - 1),
            Direction::Worsen => (i.wrapping_sub(1), i == 0),
        };
        if is_end {
            out[i] += src[i];
        } else {
            out[i] += (1.0 - shift) * src[i];
            out[dest] += shift * src[i];
        }
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    ScoreDistribution::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub mean: f64,
    /// Step size finally accepted after backoff (0 for the initial record).
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    pub image: Image,
    /// Step 0 is the unmodified image.
    pub trace: Vec<TraceRecord>,
}

struct Evaluation {
    loss: f64,
    mean: f64,
    grad: Vec<f64>,
}

fn evaluate_pixels<T: Real>(
    model: &Network<T>,
    pixels: &[f64],
    shape: [usize; 4],
    target: &ScoreDistribution,
    delta: f64,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(shape, pixels.iter().map(|&v| T::of(v)).collect())?, true);
    let pass = model.build(&mut tape, x, Mode::Aesthetic, false)?;
    let main = pass.main.expect("aesthetic mode");
    let out = match pass.gmp {
        Some(gmp) => {
            let w = model.fusion().unwrap_or_else(|| FusionWeight::new(0.5).expect("in range")).value();
            let a = tape.scale(main, T::of(w));
            let b = tape.scale(gmp, T::of(1.0 - w));
            tape.add(a, b)?
        }
        None => main,
    };
    let raw: Vec<f64> = tape.value(out).data().iter().map(|v| v.as_f64()).collect();
    let mean = RawPrediction::from_slice(&raw)?.normalize()?.mean();
    let loss = tape.huber(out, target.probs(), delta)?;
    tape.backward(loss)?;
    let grad = tape
        .grad(x)
        .map(|g| g.iter().map(|v| v.as_f64()).collect())
        .unwrap_or_else(|| vec![0.0; pixels.len()]);
    Ok(Evaluation {
        loss: tape.value(loss).data()[0].as_f64(),
        mean,
        grad,
    })
}

/// Gradient descent on the pixels of `image` toward `target`; the model is only read.
///
/// A step that raises the loss is retried at half the step size, at most five times, and the
/// last attempt is accepted regardless.
pub fn perturb<T: Real>(
    model: &Network<T>,
    image: &Image,
    target: &ScoreDistribution,
    cfg: &PerturbConfig,
) -> Result<PerturbOutcome> {
    cfg.validate()?;
    if model.config().head.variant == HeadVariant::Mean {
        return Err(Error::InvalidConfig("perturbation needs a distribution-head model".into()));
    }
    let (lo, hi) = cfg.pixel_range;
    if image.data().iter().any(|&v| (v as f64) < lo || (v as f64) > hi) {
        return Err(Error::Image(format!("image values leave the pixel range {:?}", cfg.pixel_range)));
    }
    let delta = HuberConfig::new(cfg.huber_sigma)?.delta();
    let shape = [1, CHANNELS, image.height(), image.width()];
    let original: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let project = |x: f64, x0: f64| {
        let x = match cfg.linf_budget {
            Some(b) => x.clamp(x0 - b, x0 + b),
            None => x,
        };
        x.clamp(lo, hi)
    };

    let mut pixels = original.clone();
    let mut current = evaluate_pixels(model, &pixels, shape, target, delta)?;
    let mut trace = vec![TraceRecord {
        step: 0,
        loss: current.loss,
        mean: current.mean,
        step_size: 0.0,
    }];
    for step in 1..=cfg.steps {
        if current.grad.iter().any(|g| !g.is_finite()) {
            let norm = current.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            return Err(Error::NonFiniteGradient {
                iteration: step,
                param: "pixels".into(),
                norm,
            });
        }
        let mut eta = cfg.step_size;
        let mut attempt = 0;
        let (candidate, next) = loop {
            let candidate: Vec<f64> = pixels
                .iter()
                .zip(&current.grad)
                .zip(&original)
                .map(|((&x, &g), &x0)| project(x - eta * g, x0))
                .collect();
            if candidate.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite pixels at step {step}")));
            }
            let next = evaluate_pixels(model, &candidate, shape, target, delta)?;
            if next.loss <= current.loss || attempt == 5 {
                break (candidate, next);
            }
            attempt += 1;
            eta *= 0.5;
        };
        pixels = candidate;
        current = next;
        trace.push(TraceRecord {
            step,
            loss: current.loss,
            mean: current.mean,
            step_size: eta,
        });
    }
    let image = Image::new(image.height(), image.width(), pixels.iter().map(|&v| v as f32).collect())?;
    Ok(PerturbOutcome { image, trace })
}

pub fn write_trace_csv(trace: &[TraceRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss,mean\n");
    for r in trace {
        writeln!(out, "{},{},{}", r.step, r.loss, r.mean).expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-pixel l2 norm of the channel difference between two images.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ChangeMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Grayscale PNG scaled so the largest change is white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let max = self.max();
        let pixels = self
            .values
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer matches dimensions");
        img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// One CSV row per image row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub fn change_map(original: &Image, perturbed: &Image) -> Result<ChangeMap> {
    if (original.height(), original.width()) != (perturbed.height(), perturbed.width()) {
        return Err(Error::shape(
            "heatmap",
            format!(
                "{}x{} vs {}x{}",
                original.height(),
                original.width(),
                perturbed.height(),
                perturbed.width()
            ),
        ));
    }
    let (h, w) = (original.height(), original.width());
    let values = (0..h * w)
        .map(|i| {
            (0..CHANNELS)
                .map(|c| {
                    let d = original.data()[c * h * w + i] as f64 - perturbed.data()[c * h * w + i] as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ChangeMap { height: h, width: w, values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    pub map: ChangeMap,
    pub original_mean: f64,
    pub perturbed_mean: f64,
    pub iterations: usize,
}

/// Change map of a finished perturbation, with the predicted means before and after.
pub fn heatmap(original: &Image, outcome: &PerturbOutcome) -> Result<HeatmapResult> {
    let map = change_map(original, &outcome.image)?;
    let first = outcome.trace.first().ok_or(Error::EmptyInput("perturbation trace"))?;
    let last = outcome.trace.last().expect("non-empty");
    Ok(HeatmapResult {
        map,
        original_mean: first.mean,
        perturbed_mean: last.mean,
        iterations: last.step,
    })
}

/// Predict, build the shifted target, perturb and map the change in one call.
pub fn run_adversarial<T: Real>(
    model: &Network<T>,
    image: &Image,
    cfg: &PerturbConfig,
) -> Result<(PerturbOutcome, HeatmapResult)> {
    let current = model.predict_distribution(image)?;
    let target = make_target(&current, cfg.direction, cfg.shift_amount)?;
    let outcome = perturb(model, image, &target, cfg)?;
    let result = heatmap(image, &outcome)?;
    Ok((outcome, result))
}
