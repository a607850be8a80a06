//! Shared fixtures and independent reference implementations for the
//! integration tests. Oracles here use plain loops over `Vec<f64>` and never
//! call into the code they check.

#![allow(dead_code)]

use fedpisa::lora::{AdapterRole, AdapterSet, LoraAdapter, Matrix};
use fedpisa::model::{batch_loss, Backbone, Batch, StyleGate, StyleLabel};
use fedpisa::StyleUpdate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_adapter(d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> LoraAdapter {
    LoraAdapter::from_factors(random_matrix(rank, d_in, rng), random_matrix(d_out, rank, rng), alpha).unwrap()
}

pub fn random_set(role: AdapterRole, sites: usize, d_out: usize, d_in: usize, rank: usize, rng: &mut impl Rng) -> AdapterSet {
    let alpha = rng.random_range(0.5..4.0);
    AdapterSet::new(role, (0..sites).map(|_| random_adapter(d_out, d_in, rank, alpha, rng)).collect())
}

/// `n` single-site updates with distinct, shuffled client ids.
pub fn random_updates(n: usize, d_out: usize, d_in: usize, rank: usize, rng: &mut impl Rng) -> Vec<StyleUpdate> {
    let mut ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    ids.into_iter()
        .map(|id| {
            let set = AdapterSet::new(AdapterRole::Style, vec![random_adapter(d_out, d_in, rank, 2.0, rng)]);
            StyleUpdate::new(id, 1, &set)
        })
        .collect()
}

pub fn values(m: &Matrix) -> Vec<f64> {
    // Row-major regardless of memory layout.
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|(i, j)| m[[i, j]]).collect()
}

pub fn ref_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    if nu.sqrt() < 1e-12 || nv.sqrt() < 1e-12 {
        0.0
    } else {
        dot / (nu.sqrt() * nv.sqrt())
    }
}

/// Softmax over cosine similarities divided by `tau`, row by row.
pub fn ref_attention(vectors: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|u| {
            let logits: Vec<f64> = vectors.iter().map(|v| ref_cosine(u, v) / tau).collect();
            let top = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

pub fn rel_frobenius(got: &Matrix, want: &Matrix) -> f64 {
    let diff: f64 = values(got).iter().zip(values(want)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = values(want).iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Random backbone, adapters and labelled batch for gradient checks.
pub struct GradInstance {
    pub backbone: Backbone,
    pub id: AdapterSet,
    pub style: AdapterSet,
    pub batch: Batch,
}

pub fn grad_instance(rng: &mut impl Rng, label: StyleLabel) -> GradInstance {
    let d_in = rng.random_range(1..=8);
    let d_out = rng.random_range(1..=8);
    let rank = rng.random_range(1..=4);
    let sites = rng.random_range(1..=2);
    let n = rng.random_range(1..=10);
    let backbone = Backbone::new((0..sites).map(|_| random_matrix(d_out, d_in, rng)).collect()).unwrap();
    let id = random_set(AdapterRole::Identity, sites, d_out, d_in, rank, rng);
    let style = random_set(AdapterRole::Style, sites, d_out, d_in, rank, rng);
    let batch = Batch {
        inputs: random_matrix(n, d_in, rng),
        targets: random_matrix(n, d_out * sites, rng),
        style_label: label,
    };
    GradInstance { backbone, id, style, batch }
}

/// Central finite differences of the batch loss with respect to every factor
/// entry of the chosen adapter. Returns `(dA, dB)` per site.
pub fn fd_gradient(inst: &GradInstance, which: AdapterRole, gate: StyleGate, h: f64) -> Vec<(Matrix, Matrix)> {
    let loss = |id: &AdapterSet, style: &AdapterSet| batch_loss(&inst.backbone, id, style, &inst.batch, gate).unwrap();
    let base = match which {
        AdapterRole::Identity => &inst.id,
        AdapterRole::Style => &inst.style,
    };
    let eval = |set: &AdapterSet| match which {
        AdapterRole::Identity => loss(set, &inst.style),
        AdapterRole::Style => loss(&inst.id, set),
    };
    let mut out = Vec::new();
    for site in 0..base.sites.len() {
        let ad = &base.sites[site];
        let mut da = Matrix::zeros(ad.a().dim());
        let mut db = Matrix::zeros(ad.b().dim());
        for factor in 0..2 {
            let dim = if factor == 0 { ad.a().dim() } else { ad.b().dim() };
            for i in 0..dim.0 {
                for j in 0..dim.1 {
                    let bump = |delta: f64| {
                        let mut set = base.clone();
                        let (a, b) = set.sites[site].factors_mut();
                        let m = if factor == 0 { a } else { b };
                        m[[i, j]] += delta;
                        eval(&set)
                    };
                    let g = (bump(h) - bump(-h)) / (2.0 * h);
                    if factor == 0 {
                        da[[i, j]] = g;
                    } else {
                        db[[i, j]] = g;
                    }
                }
            }
        }
        out.push((da, db));
    }
    out
}

/// Relative error `|analytic - fd| / max(|fd|, 1e-8)` in Frobenius norm, over
/// all sites and both factors.
pub fn grad_rel_error(analytic: &[fedpisa::model::FactorGrad], fd: &[(Matrix, Matrix)]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (g, (da, db)) in analytic.iter().zip(fd) {
        for (x, y) in values(&g.a).iter().zip(values(da)).chain(values(&g.b).iter().zip(values(db))) {
            diff += (x - y).powi(2);
            norm += y * y;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-8)
}
