//! Central-difference certification of every differentiable operation.
//!
//! Analytic gradients come from the tape at the precision under test; the reference is always
//! a central difference of the same graph evaluated at `f64`. Draws whose graph sits within
//! `KINK_MARGIN` of a non-differentiable point are discarded and redrawn.

#![allow(dead_code)]

use apm_core::autodiff::{Real, Tape, Tensor, Var};
use apm_core::model::{BackboneConfig, HeadConfig, HeadVariant, Mode, Network, NetworkConfig, ParamSet};
use apm_core::spp::{adaptive_spp, SppConfig};
use apm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KINK_MARGIN: f64 = 1e-4;
pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-3;
pub const SEEDS: usize = 20;

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-3;
const MAX_PROBES: usize = 12;
const MAX_DRAWS: usize = 2000;

#[derive(Debug, Clone)]
pub struct OpCertificate {
    pub op: String,
    pub seeds: usize,
    pub rejected: usize,
    pub probes: usize,
    pub worst_f64: f64,
    pub worst_f32: f64,
}

impl OpCertificate {
    pub fn passed(&self) -> bool {
        self.seeds >= SEEDS && self.worst_f64 <= TOL_F64 && self.worst_f32 <= TOL_F32
    }
}

pub trait Case: Sized {
    fn name() -> String;
    fn draw(rng: &mut ChaCha8Rng) -> Self;
    fn inputs(&self) -> Vec<Tensor<f64>>;
    /// Record the scalar loss; returns it with the leaf standing for each input, if any.
    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)>;
}

fn cast_all<T: Real>(xs: &[Tensor<f64>]) -> Vec<Tensor<T>> {
    xs.iter().map(Tensor::cast).collect()
}

fn analytic<C: Case, T: Real>(case: &C, inputs: &[Tensor<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
    let inputs = cast_all::<T>(inputs);
    let mut tape = Tape::new();
    let (loss, leaves) = case.record(&mut tape, &inputs)?;
    tape.backward(loss)?;
    let grads = leaves
        .iter()
        .zip(&inputs)
        .map(|(leaf, x)| match leaf.and_then(|v| tape.grad(v)) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; x.len()],
        })
        .collect();
    Ok((grads, tape.kink_margin()))
}

fn loss_at<C: Case>(case: &C, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = case.record(&mut tape, inputs)?;
    Ok(tape.value(loss).data()[0])
}

fn rel_error(a: f64, n: f64) -> f64 {
    let e = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Worst relative errors `(f64, f32)` over the probed elements, plus the probe count.
fn compare<C: Case>(case: &C, inputs: &[Tensor<f64>], g64: &[Vec<f64>], g32: &[Vec<f64>]) -> Result<(f64, f64, usize)> {
    let (mut w64, mut w32, mut probes) = (0.0f64, 0.0f64, 0);
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let stride = x.len().div_ceil(MAX_PROBES).max(1);
        for e in (0..x.len()).step_by(stride) {
            let orig = x.data()[e];
            work[i].data_mut()[e] = orig + STEP;
            let plus = loss_at(case, &work)?;
            work[i].data_mut()[e] = orig - STEP;
            let minus = loss_at(case, &work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            w64 = w64.max(rel_error(g64[i][e], numeric));
            w32 = w32.max(rel_error(g32[i][e], numeric));
            probes += 1;
        }
    }
    Ok((w64, w32, probes))
}

pub fn certify<C: Case>(seed: u64) -> Result<OpCertificate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cert = OpCertificate {
        op: C::name(),
        seeds: 0,
        rejected: 0,
        probes: 0,
        worst_f64: 0.0,
        worst_f32: 0.0,
    };
    for _ in 0..MAX_DRAWS {
        if cert.seeds >= SEEDS {
            break;
        }
        let case = C::draw(&mut rng);
        let inputs = case.inputs();
        let (g64, margin) = analytic::<C, f64>(&case, &inputs)?;
        if margin < KINK_MARGIN {
            cert.rejected += 1;
            continue;
        }
        let (g32, _) = analytic::<C, f32>(&case, &inputs)?;
        let (w64, w32, probes) = compare(&case, &inputs, &g64, &g32)?;
        cert.worst_f64 = cert.worst_f64.max(w64);
        cert.worst_f32 = cert.worst_f32.max(w32);
        cert.probes += probes;
        cert.seeds += 1;
    }
    Ok(cert)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let s = 1.0 / (n as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

fn probe_sum<T: Real>(tape: &mut Tape<T>, y: Var, w: &[f64]) -> Result<Var> {
    let w: Vec<T> = w.iter().map(|&v| T::of(v)).collect();
    tape.weighted_sum(y, &w)
}

fn leaves<T: Real>(tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Vec<Var> {
    inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect()
}

fn all_some(vs: &[Var]) -> Vec<Option<Var>> {
    vs.iter().copied().map(Some).collect()
}

pub struct Conv2d {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    stride: usize,
    pad: usize,
    probe: Vec<f64>,
}

impl Case for Conv2d {
    fn name() -> String {
        "conv2d".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let (n, c, k) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
        let kernel = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let out = |e: usize| (e + 2 * pad - kernel) / stride + 1;
        Self {
            x: uniform(rng, &[n, c, h, w], -1.0, 1.0),
            w: uniform(rng, &[k, c, kernel, kernel], -1.0, 1.0),
            b: uniform(rng, &[k], -0.5, 0.5),
            stride,
            pad,
            probe: weights(rng, n * k * out(h) * out(w)),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone(), self.w.clone(), self.b.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let y = tape.conv2d(v[0], v[1], v[2], self.stride, self.pad)?;
        Ok((probe_sum(tape, y, &self.probe)?, all_some(&v)))
    }
}

pub struct Relu {
    x: Tensor<f64>,
    probe: Vec<f64>,
}

impl Case for Relu {
    fn name() -> String {
        "relu".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(5..=30);
        Self {
            x: uniform(rng, &[n], -2.0, 2.0),
            probe: weights(rng, n),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let y = tape.relu(v[0]);
        Ok((probe_sum(tape, y, &self.probe)?, all_some(&v)))
    }
}

pub struct Linear {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    probe: Vec<f64>,
}

impl Case for Linear {
    fn name() -> String {
        "linear".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let (n, d, m) = (rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=6));
        let mut x = uniform(rng, &[n, d], -1.0, 1.0);
        // the forward pass skips exact zeros, so keep one in play
        if rng.gen_bool(0.3) {
            x.data_mut()[0] = 0.0;
        }
        Self {
            x,
            w: uniform(rng, &[d, m], -1.0, 1.0),
            b: uniform(rng, &[m], -1.0, 1.0),
            probe: weights(rng, n * m),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone(), self.w.clone(), self.b.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let y = tape.linear(v[0], v[1], v[2])?;
        Ok((probe_sum(tape, y, &self.probe)?, all_some(&v)))
    }
}

pub struct MaxPoolRegion {
    x: Tensor<f64>,
    region: (usize, usize, usize, usize),
    probe: Vec<f64>,
}

impl Case for MaxPoolRegion {
    fn name() -> String {
        "max_pool_region".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let r0 = rng.gen_range(0..h);
        let r1 = rng.gen_range(r0 + 1..=h);
        let c0 = rng.gen_range(0..w);
        let c1 = rng.gen_range(c0 + 1..=w);
        Self {
            x: uniform(rng, &[c, h, w], -1.0, 1.0),
            region: (r0, r1, c0, c1),
            probe: weights(rng, c),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let (r0, r1, c0, c1) = self.region;
        let y = tape.max_pool_region(v[0], r0, r1, c0, c1)?;
        Ok((probe_sum(tape, y, &self.probe)?, all_some(&v)))
    }
}

pub struct L2Normalize {
    x: Tensor<f64>,
    probe: Vec<f64>,
}

impl Case for L2Normalize {
    fn name() -> String {
        "l2_normalize".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(2..=20);
        Self {
            x: uniform(rng, &[n], -1.0, 1.0),
            probe: weights(rng, n),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let y = tape.l2_normalize(v[0], T::of(1e-12));
        Ok((probe_sum(tape, y, &self.probe)?, all_some(&v)))
    }
}

pub struct Softmax {
    x: Tensor<f64>,
    probe: Vec<f64>,
}

impl Case for Softmax {
    fn name() -> String {
        "softmax".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(2..=12);
        Self {
            x: uniform(rng, &[n], -3.0, 3.0),
            probe: weights(rng, n),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let y = tape.softmax(v[0]);
        Ok((probe_sum(tape, y, &self.probe)?, all_some(&v)))
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    raw.iter().map(|v| v / s).collect()
}

pub struct CrossEntropySoft {
    logits: Tensor<f64>,
    target: Vec<f64>,
}

impl Case for CrossEntropySoft {
    fn name() -> String {
        "cross_entropy_soft".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(2..=12);
        Self {
            logits: uniform(rng, &[n], -4.0, 4.0),
            target: random_distribution(rng, n),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.logits.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let target: Vec<T> = self.target.iter().map(|&t| T::of(t)).collect();
        Ok((tape.cross_entropy_soft(v[0], &target)?, all_some(&v)))
    }
}

pub struct Huber {
    x: Tensor<f64>,
    target: Vec<f64>,
    delta: f64,
}

impl Case for Huber {
    fn name() -> String {
        "huber".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let delta = rng.gen_range(0.05..1.0);
        let target = random_distribution(rng, 10);
        let x = target.iter().map(|g| g + rng.gen_range(-2.0 * delta..2.0 * delta)).collect();
        Self {
            x: Tensor::from_vec(x),
            target,
            delta,
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.x.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        Ok((tape.huber(v[0], &self.target, self.delta)?, all_some(&v)))
    }
}

pub struct Spp {
    fmap: Tensor<f64>,
    n: usize,
    probe: Vec<f64>,
}

impl Case for Spp {
    fn name() -> String {
        "full SPP".into()
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=3);
        let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(n..=8), rng.gen_range(n..=8));
        Self {
            fmap: uniform(rng, &[c, h, w], -1.0, 1.0),
            n,
            probe: weights(rng, c * n * n),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.fmap.clone()]
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let v = leaves(tape, inputs);
        let cfg = SppConfig::new(self.n, inputs[0].shape()[0])?;
        let y = adaptive_spp(tape, v[0], &cfg)?;
        Ok((probe_sum(tape, y, &self.probe)?, all_some(&v)))
    }
}

pub const NET_DIST: u8 = 0;
pub const NET_MEAN: u8 = 1;
pub const NET_DUAL: u8 = 2;
pub const NET_DISTILL: u8 = 3;

/// Whole network: image and every parameter are inputs.
pub struct FullNetwork<const V: u8> {
    config: NetworkConfig,
    names: Vec<String>,
    image: Tensor<f64>,
    params: Vec<Tensor<f64>>,
    probe: Vec<f64>,
    target: Vec<f64>,
}

impl<const V: u8> Case for FullNetwork<V> {
    fn name() -> String {
        let v = match V {
            NET_DIST => "dist",
            NET_MEAN => "mean",
            NET_DUAL => "dual",
            _ => "distill",
        };
        format!("full network ({v})")
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let variant = match V {
            NET_MEAN => HeadVariant::Mean,
            NET_DUAL => HeadVariant::Dual,
            _ => HeadVariant::Dist,
        };
        let config = NetworkConfig {
            backbone: BackboneConfig::tiny(),
            spp_n: rng.gen_range(1..=3),
            head: HeadConfig { hidden: 8, variant },
            distill_classes: None,
        };
        let classes = rng.gen_range(2..=5);
        let mut net = Network::<f64>::new(config, rng.gen()).unwrap();
        if V == NET_DISTILL {
            net.attach_distill_head(classes, rng.gen()).unwrap();
        }
        // keep most units active so pooling ties between dead channels stay rare
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, t) in net.params().iter() {
            let mut t = t.clone();
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.3));
            }
            names.push(name.to_string());
            params.push(t);
        }
        let (h, w) = (rng.gen_range(17..=26), rng.gen_range(17..=26));
        let width = if V == NET_DUAL { 20 } else { config_width(variant) };
        Self {
            config: net.config().clone(),
            names,
            image: uniform(rng, &[1, 3, h, w], 0.0, 1.0),
            params,
            probe: weights(rng, width),
            target: random_distribution(rng, classes),
        }
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut v = vec![self.image.clone()];
        v.extend(self.params.iter().cloned());
        v
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Result<(Var, Vec<Option<Var>>)> {
        let params = ParamSet::new(self.names.iter().cloned().zip(inputs[1..].iter().cloned()).collect());
        let net = Network::from_params(self.config.clone(), params)?;
        let image = tape.leaf(inputs[0].clone(), true);
        let mode = if V == NET_DISTILL { Mode::Distill } else { Mode::Aesthetic };
        let pass = net.build(tape, image, mode, true)?;
        let loss = if V == NET_DISTILL {
            let target: Vec<T> = self.target.iter().map(|&t| T::of(t)).collect();
            tape.cross_entropy_soft(pass.distill_logits.expect("distill mode"), &target)?
        } else {
            let main = pass.main.expect("aesthetic mode");
            let out = match pass.gmp {
                Some(g) => tape.concat(&[main, g])?,
                None => main,
            };
            probe_sum(tape, out, &self.probe)?
        };
        let mut vars = vec![None; inputs.len()];
        vars[0] = Some(image);
        for (i, v) in pass.params {
            vars[i + 1] = Some(v);
        }
        Ok((loss, vars))
    }
}

fn config_width(variant: HeadVariant) -> usize {
    HeadConfig { hidden: 1, variant }.output_width()
}

pub fn certify_all(seed: u64) -> Result<Vec<OpCertificate>> {
    Ok(vec![
        certify::<Conv2d>(seed)?,
        certify::<Relu>(seed)?,
        certify::<Linear>(seed)?,
        certify::<MaxPoolRegion>(seed)?,
        certify::<L2Normalize>(seed)?,
        certify::<Softmax>(seed)?,
        certify::<CrossEntropySoft>(seed)?,
        certify::<Huber>(seed)?,
        certify::<Spp>(seed)?,
        certify::<FullNetwork<NET_DIST>>(seed)?,
        certify::<FullNetwork<NET_MEAN>>(seed)?,
        certify::<FullNetwork<NET_DUAL>>(seed)?,
        certify::<FullNetwork<NET_DISTILL>>(seed)?,
    ])
}
