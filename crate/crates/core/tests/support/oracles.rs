//! Brute-force reference implementations of the evaluation metrics, compared against the
//! library on random 10-bin cases.

#![allow(dead_code)]

use apm_core::distcore::{
    cd_loss, euclidean_loss, huber_loss, kl_div, mean_score, spearman, HuberConfig, RawPrediction,
    ScoreDistribution, BINS, KL_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-9;
pub const TOL_TIGHT: f64 = 1e-12;
pub const CASES: usize = 1000;

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub metric: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tol: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.cases >= CASES && self.worst <= self.tol
    }
}

fn ref_huber(p: &[f64], g: &[f64], sigma: f64) -> f64 {
    let delta = 1.0 / (sigma * sigma);
    let mut total = 0.0;
    for i in 0..p.len() {
        let a = (p[i] - g[i]).abs();
        total += if a < delta { a * a / 2.0 } else { delta * a - delta * delta / 2.0 };
    }
    total
}

fn ref_huber_grad(p: &[f64], g: &[f64], sigma: f64) -> Vec<f64> {
    let delta = 1.0 / (sigma * sigma);
    (0..p.len())
        .map(|i| (p[i] - g[i]).clamp(-delta, delta))
        .collect()
}

fn ref_euclidean(p: &[f64], g: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        total += (p[i] - g[i]).powi(2);
    }
    total / 2.0
}

fn ref_cd(p: &[f64], g: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..p.len() {
        let mut d = 0.0;
        for i in 0..=k {
            d += p[i] - g[i];
        }
        total += d * d;
    }
    total
}

fn ref_kl(p: &[f64], g: &[f64]) -> f64 {
    let ps: Vec<f64> = p.iter().map(|v| v + KL_EPS).collect();
    let gs: Vec<f64> = g.iter().map(|v| v + KL_EPS).collect();
    let zp: f64 = ps.iter().sum();
    let zg: f64 = gs.iter().sum();
    let mut total = 0.0;
    for i in 0..p.len() {
        let (a, b) = (gs[i] / zg, ps[i] / zp);
        total += a * a.ln() - a * b.ln();
    }
    total.max(0.0)
}

fn ref_mean(raw: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, v) in raw.iter().enumerate() {
        num += (i + 1) as f64 * v;
        den += v;
    }
    num / den
}

fn ref_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn ref_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (ref_ranks(a), ref_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn random_probs(rng: &mut ChaCha8Rng) -> [f64; BINS] {
    let mut raw = [0.0; BINS];
    match rng.gen_range(0..4) {
        0 => raw[rng.gen_range(0..BINS)] = 1.0,
        1 => raw.iter_mut().for_each(|v| *v = if rng.gen_bool(0.5) { rng.gen::<f64>() } else { 0.0 }),
        _ => raw.iter_mut().for_each(|v| *v = rng.gen::<f64>()),
    }
    if raw.iter().sum::<f64>() == 0.0 {
        raw[0] = 1.0;
    }
    let s: f64 = raw.iter().sum();
    raw.map(|v| v / s)
}

fn random_raw(rng: &mut ChaCha8Rng) -> [f64; BINS] {
    let scale = [0.01, 0.3, 1.0, 5.0][rng.gen_range(0..4)];
    let mut raw = [0.0; BINS];
    for v in raw.iter_mut() {
        *v = if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() * scale };
    }
    if raw.iter().all(|v| *v == 0.0) {
        raw[BINS - 1] = scale;
    }
    raw
}

fn dist(probs: [f64; BINS]) -> ScoreDistribution {
    ScoreDistribution::new(probs).unwrap()
}

fn report(metric: &'static str, errors: impl Iterator<Item = f64>, tol: f64) -> OracleReport {
    let (cases, worst) = errors.fold((0, 0.0f64), |(n, w), e| (n + 1, w.max(if e.is_nan() { f64::INFINITY } else { e })));
    OracleReport { metric, cases, worst, tol }
}

pub fn huber(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..CASES).map(|_| {
        let p = random_raw(&mut rng);
        let g = random_probs(&mut rng);
        let sigma = rng.gen_range(0.5..5.0);
        let (loss, grad) = huber_loss(&RawPrediction::new(p).unwrap(), &dist(g), &HuberConfig::new(sigma).unwrap());
        let grad_err = grad
            .iter()
            .zip(ref_huber_grad(&p, &g, sigma))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (loss - ref_huber(&p, &g, sigma)).abs().max(grad_err)
    });
    report("huber_loss", errors, TOL)
}

pub fn euclidean(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..CASES).map(|_| {
        let p = random_raw(&mut rng);
        let g = random_probs(&mut rng);
        let (loss, grad) = euclidean_loss(&RawPrediction::new(p).unwrap(), &dist(g));
        let grad_err = (0..BINS).map(|i| (grad[i] - (p[i] - g[i])).abs()).fold(0.0, f64::max);
        (loss - ref_euclidean(&p, &g)).abs().max(grad_err)
    });
    report("euclidean_loss", errors, TOL)
}

pub fn cd(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..CASES).map(|_| {
        let p = random_probs(&mut rng);
        let g = random_probs(&mut rng);
        (cd_loss(&dist(p), &dist(g)) - ref_cd(&p, &g)).abs()
    });
    report("cd_loss", errors, TOL_TIGHT)
}

pub fn kl(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..CASES).map(|_| {
        let p = random_probs(&mut rng);
        let g = random_probs(&mut rng);
        (kl_div(&dist(p), &dist(g), KL_EPS) - ref_kl(&p, &g)).abs()
    });
    report("kl_div", errors, TOL)
}

pub fn mean(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..CASES).map(|_| {
        let p = random_raw(&mut rng);
        (mean_score(&RawPrediction::new(p).unwrap()).unwrap() - ref_mean(&p)).abs()
    });
    report("mean_score", errors, TOL)
}

pub fn rho(seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = (0..CASES).map(|_| {
        // coarse grids force ties in some cases
        let levels = [3.0, 10.0, 1e6][rng.gen_range(0..3)];
        let mut draw = || (rng.gen::<f64>() * levels).floor();
        let a: Vec<f64> = (0..BINS).map(|_| draw()).collect();
        let b: Vec<f64> = (0..BINS).map(|_| draw()).collect();
        match (spearman(&a, &b), ref_spearman(&a, &b)) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        }
    });
    report("spearman", errors, TOL_TIGHT)
}

pub fn all(seed: u64) -> Vec<OracleReport> {
    vec![huber(seed), euclidean(seed), cd(seed), kl(seed), mean(seed), rho(seed)]
}
