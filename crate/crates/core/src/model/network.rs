use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::fusion::{fuse, FusionWeight};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::data::{Image, CHANNELS};
use crate::distcore::{RawPrediction, ScoreDistribution, BINS};
use crate::spp::{adaptive_spp, global_max_branch, SppConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn down(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn out_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// A plain stack of `conv -> relu` blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
}

impl BackboneConfig {
    /// Four stride-2 blocks, 3 -> 16 -> 32 -> 64 -> 64 channels; 96x96 inputs give 6x6 maps.
    pub fn desk_default() -> Self {
        Self {
            in_channels: CHANNELS,
            layers: [16, 32, 64, 64].into_iter().map(ConvSpec::down).collect(),
        }
    }

    /// Three stride-2 blocks, 3 -> 8 -> 16 -> 32 channels, for small synthetic images.
    pub fn tiny() -> Self {
        Self {
            in_channels: CHANNELS,
            layers: [8, 16, 32].into_iter().map(ConvSpec::down).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }

    /// Spatial extent after the whole stack, `None` if some kernel does not fit.
    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        self.layers
            .iter()
            .try_fold(extent, |e, layer| layer.out_extent(e))
    }

    /// Smallest input side whose feature map is at least `n` wide.
    pub fn min_input_side(&self, n: usize) -> usize {
        (1..)
            .find(|&e| self.output_extent(e).is_some_and(|o| o >= n))
            .expect("strided stacks eventually grow with the input")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// Ten-bin score distribution.
    Dist,
    /// Single mean score.
    Mean,
    /// Distribution heads on both the SPP branch and the global max-pool branch.
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub variant: HeadVariant,
}

impl HeadConfig {
    pub fn output_width(&self) -> usize {
        match self.variant {
            HeadVariant::Mean => 1,
            HeadVariant::Dist | HeadVariant::Dual => BINS,
        }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            variant: HeadVariant::Dist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub spp_n: usize,
    pub head: HeadConfig,
    /// Width of the distillation classifier on top of the SPP vector, when attached.
    pub distill_classes: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::desk_default(),
            spp_n: 3,
            head: HeadConfig::default(),
            distill_classes: None,
        }
    }
}

impl NetworkConfig {
    pub fn spp(&self) -> SppConfig {
        SppConfig {
            n: self.spp_n,
            channels: self.backbone.out_channels(),
        }
    }

    pub fn min_input_side(&self) -> usize {
        self.backbone.min_input_side(self.spp_n)
    }

    pub fn validate(&self) -> Result<()> {
        SppConfig::new(self.spp_n, self.backbone.out_channels())?;
        if self.backbone.layers.is_empty() {
            return Err(Error::InvalidConfig("backbone needs at least one layer".into()));
        }
        if self
            .backbone
            .layers
            .iter()
            .any(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(Error::InvalidConfig(format!(
                "conv layers need positive channels, kernel and stride: {:?}",
                self.backbone.layers
            )));
        }
        if self.head.hidden == 0 || self.distill_classes == Some(0) {
            return Err(Error::InvalidConfig("head widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes, in the canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.backbone.in_channels;
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![l.out_channels, c, l.kernel, l.kernel]));
            out.push((format!("conv{i}.bias"), vec![l.out_channels]));
            c = l.out_channels;
        }
        let d = self.spp().output_len();
        let (hidden, width) = (self.head.hidden, self.head.output_width());
        let mut head = |prefix: &str, input: usize| {
            out.push((format!("{prefix}.fc1.weight"), vec![input, hidden]));
            out.push((format!("{prefix}.fc1.bias"), vec![hidden]));
            out.push((format!("{prefix}.fc2.weight"), vec![hidden, width]));
            out.push((format!("{prefix}.fc2.bias"), vec![width]));
        };
        head("head", d);
        if self.head.variant == HeadVariant::Dual {
            head("gmp", c);
        }
        if let Some(k) = self.distill_classes {
            out.push(("distill.fc.weight".into(), vec![d, k]));
            out.push(("distill.fc.bias".into(), vec![k]));
        }
        out
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.entries[i].1)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.entries.retain(|(n, _)| keep(n));
    }
}

/// Which output path a forward pass builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Score heads (both branches for the dual variant).
    Aesthetic,
    /// Teacher-class logits from the distillation classifier only.
    Distill,
}

/// Nodes produced by [`Network::build`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `(parameter index, leaf)` for every parameter the pass used.
    pub params: Vec<(usize, Var)>,
    pub spp: Var,
    /// SPP-branch head output, shape `[width]`.
    pub main: Option<Var>,
    /// Global-max-pool branch head output (dual variant).
    pub gmp: Option<Var>,
    pub distill_logits: Option<Var>,
}

/// Model output for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Distribution(RawPrediction),
    Mean(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamSet<T>,
    fusion: Option<FusionWeight>,
}

impl<T: Real> Network<T> {
    /// He-normal weights; zero biases except the score layer, which starts slightly positive
    /// so no output bin begins behind a closed ReLU.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".weight") {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                } else if name.ends_with("fc2.bias") {
                    let init = match config.head.variant {
                        HeadVariant::Mean => 5.5,
                        _ => 0.1,
                    };
                    vec![T::of(init); n]
                } else {
                    vec![T::zero(); n]
                };
                (name, Tensor::new(shape, data).expect("shape from config"))
            })
            .collect();
        Ok(Self {
            config,
            params: ParamSet::new(entries),
            fusion: None,
        })
    }

    /// Assemble from stored parameters, checking names and shapes against the config.
    pub fn from_params(config: NetworkConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::shape(
                "network",
                format!("config needs {} tensors, got {}", expected.len(), params.len()),
            ));
        }
        for ((name, shape), (pn, pt)) in expected.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::shape(
                    "network",
                    format!("expected `{name}` {shape:?}, found `{pn}` {:?}", pt.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            params,
            fusion: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn fusion(&self) -> Option<FusionWeight> {
        self.fusion
    }

    pub fn set_fusion(&mut self, w: Option<FusionWeight>) {
        self.fusion = w;
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: ParamSet::new(
                self.params
                    .iter()
                    .map(|(n, t)| (n.to_string(), t.cast()))
                    .collect(),
            ),
            fusion: self.fusion,
        }
    }

    /// Attach a freshly initialized distillation classifier with `classes` outputs.
    pub fn attach_distill_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        let mut config = self.config.clone();
        config.distill_classes = Some(classes);
        let fresh = Network::<T>::new(config.clone(), seed)?;
        let mut entries: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .filter(|(n, _)| !n.starts_with("distill."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (n, t) in fresh.params.iter().filter(|(n, _)| n.starts_with("distill.")) {
            entries.push((n.to_string(), t.clone()));
        }
        self.config = config;
        self.params = ParamSet::new(entries);
        Ok(())
    }

    /// Drop the distillation classifier, keeping backbone and heads.
    pub fn strip_distill_head(&mut self) {
        self.config.distill_classes = None;
        self.params.retain(|n| !n.starts_with("distill."));
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let min = self.config.min_input_side();
        let fits = |e: usize| {
            self.config
                .backbone
                .output_extent(e)
                .is_some_and(|o| o >= self.config.spp_n)
        };
        if fits(height) && fits(width) {
            Ok(())
        } else {
            Err(Error::ResolutionTooSmall {
                height,
                width,
                min_height: min,
                min_width: min,
            })
        }
    }

    fn param_leaf(
        &self,
        tape: &mut Tape<T>,
        name: &str,
        grads: bool,
        used: &mut Vec<(usize, Var)>,
    ) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"));
        let v = tape.leaf(self.params.tensor(i).clone(), grads);
        used.push((i, v));
        v
    }

    fn head(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        input: Var,
        grads: bool,
        used: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let d = tape.value(input).len();
        let x = tape.reshape(input, [1, d])?;
        let w1 = self.param_leaf(tape, &format!("{prefix}.fc1.weight"), grads, used);
        let b1 = self.param_leaf(tape, &format!("{prefix}.fc1.bias"), grads, used);
        let h = tape.linear(x, w1, b1)?;
        let h = tape.relu(h);
        let w2 = self.param_leaf(tape, &format!("{prefix}.fc2.weight"), grads, used);
        let b2 = self.param_leaf(tape, &format!("{prefix}.fc2.bias"), grads, used);
        let o = tape.linear(h, w2, b2)?;
        let o = tape.relu(o);
        tape.reshape(o, [self.config.head.output_width()])
    }

    /// Record the network on `tape` for an image node of shape `[1, 3, H, W]`.
    pub fn build(&self, tape: &mut Tape<T>, image: Var, mode: Mode, grads: bool) -> Result<ForwardPass> {
        let shape = tape.shape(image).to_vec();
        let [1, c, h, w] = shape[..] else {
            return Err(Error::shape("forward", format!("expected [1,3,H,W], got {shape:?}")));
        };
        if c != self.config.backbone.in_channels {
            return Err(Error::shape(
                "forward",
                format!("image has {c} channels, backbone expects {}", self.config.backbone.in_channels),
            ));
        }
        self.check_input(h, w)?;

        let mut used = Vec::new();
        let mut x = image;
        for (i, layer) in self.config.backbone.layers.iter().enumerate() {
            let wv = self.param_leaf(tape, &format!("conv{i}.weight"), grads, &mut used);
            let bv = self.param_leaf(tape, &format!("conv{i}.bias"), grads, &mut used);
            x = tape.conv2d(x, wv, bv, layer.stride, layer.pad)?;
            x = tape.relu(x);
        }
        let s = tape.shape(x).to_vec();
        let fmap = tape.reshape(x, [s[1], s[2], s[3]])?;
        let spp = adaptive_spp(tape, fmap, &self.config.spp())?;

        let mut pass = ForwardPass {
            params: Vec::new(),
            spp,
            main: None,
            gmp: None,
            distill_logits: None,
        };
        match mode {
            Mode::Distill => {
                let Some(k) = self.config.distill_classes else {
                    return Err(Error::InvalidConfig("network has no distillation head".into()));
                };
                let d = tape.value(spp).len();
                let xs = tape.reshape(spp, [1, d])?;
                let wv = self.param_leaf(tape, "distill.fc.weight", grads, &mut used);
                let bv = self.param_leaf(tape, "distill.fc.bias", grads, &mut used);
                let logits = tape.linear(xs, wv, bv)?;
                pass.distill_logits = Some(tape.reshape(logits, [k])?);
            }
            Mode::Aesthetic => {
                pass.main = Some(self.head(tape, "head", spp, grads, &mut used)?);
                if self.config.head.variant == HeadVariant::Dual {
                    let g = global_max_branch(tape, fmap)?;
                    pass.gmp = Some(self.head(tape, "gmp", g, grads, &mut used)?);
                }
            }
        }
        pass.params = used;
        Ok(pass)
    }

    fn raw_outputs(&self, image: &Image) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.to_tensor(), false);
        let pass = self.build(&mut tape, x, Mode::Aesthetic, false)?;
        let read = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Ok((read(pass.main.expect("aesthetic mode")), pass.gmp.map(read)))
    }

    /// Score-head output; the dual variant fuses its two branches with the stored weight
    /// (equal weighting until one is learned).
    pub fn forward(&self, image: &Image) -> Result<Prediction> {
        let (main, gmp) = self.raw_outputs(image)?;
        match self.config.head.variant {
            HeadVariant::Mean => Ok(Prediction::Mean(main[0])),
            HeadVariant::Dist => Ok(Prediction::Distribution(RawPrediction::from_slice(&main)?)),
            HeadVariant::Dual => {
                let p_spp = RawPrediction::from_slice(&main)?;
                let p_gmp = RawPrediction::from_slice(&gmp.expect("dual variant"))?;
                let w = self.fusion.unwrap_or_else(|| FusionWeight::new(0.5).expect("in range"));
                Ok(Prediction::Distribution(fuse(&p_spp, &p_gmp, w)))
            }
        }
    }

    /// Raw predictions of the two dual-variant branches `(spp, gmp)`.
    pub fn forward_branches(&self, image: &Image) -> Result<(RawPrediction, RawPrediction)> {
        let (main, gmp) = self.raw_outputs(image)?;
        let gmp = gmp.ok_or_else(|| Error::InvalidConfig("network is not the dual variant".into()))?;
        Ok((RawPrediction::from_slice(&main)?, RawPrediction::from_slice(&gmp)?))
    }

    pub fn forward_raw(&self, image: &Image) -> Result<RawPrediction> {
        match self.forward(image)? {
            Prediction::Distribution(p) => Ok(p),
            Prediction::Mean(_) => Err(Error::InvalidConfig(
                "mean-head network does not predict distributions".into(),
            )),
        }
    }

    /// l1-normalized prediction; an all-zero output is reported, not replaced.
    pub fn predict_distribution(&self, image: &Image) -> Result<ScoreDistribution> {
        self.forward_raw(image)?.normalize()
    }

    /// Predicted mean score for any variant.
    pub fn predict_mean(&self, image: &Image) -> Result<f64> {
        match self.forward(image)? {
            Prediction::Distribution(p) => Ok(p.normalize()?.mean()),
            Prediction::Mean(m) => Ok(m),
        }
    }

    /// Teacher-class probabilities from the distillation classifier.
    pub fn class_probabilities(&self, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.to_tensor(), false);
        let pass = self.build(&mut tape, x, Mode::Distill, false)?;
        let logits = pass.distill_logits.expect("distill mode");
        let probs = tape.softmax(logits);
        Ok(tape.value(probs).data().iter().map(|v| v.as_f64()).collect())
    }
}
