//! Server-side aggregation math: participant sampling, softmax attention
//! over pairwise cosine similarity, personalized aggregation and FedAvg.
//!
//! Attention for the `A` factors (alpha) and the `B` factors (beta) is
//! computed independently, and each site of a multi-site adapter gets its own
//! pair of matrices.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::client::StyleUpdate;
use crate::error::{shape_err, Error, Result};
use crate::lora::{matrix_cosine, LoraAdapter, Matrix};
use crate::rng::{stream, stream_rng};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub participant_ids: Vec<usize>,
}

pub fn participant_count(num_clients: usize, rate: f64) -> usize {
    ((rate * num_clients as f64).round() as usize).clamp(1, num_clients)
}

/// Uniform sample without replacement (seeded Fisher-Yates prefix), ids
/// returned sorted.
pub fn sample_participants(num_clients: usize, rate: f64, round: usize, seed: u64) -> Result<RoundPlan> {
    if num_clients == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("participation rate must be in (0, 1], got {rate}")));
    }
    let k = participant_count(num_clients, rate);
    let mut ids: Vec<usize> = (0..num_clients).collect();
    let mut rng = stream_rng(seed, &[stream::SAMPLING, round as u64]);
    let (chosen, _) = ids.partial_shuffle(&mut rng, k);
    let mut participant_ids = chosen.to_vec();
    participant_ids.sort_unstable();
    Ok(RoundPlan { round, participant_ids })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub weights: Vec<Vec<f64>>,
    pub tau: f64,
}

impl AttentionMatrix {
    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.iter().map(|r| r.iter().sum()).collect()
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Row `i` is the softmax over `j` of `cos(flatten(F_i), flatten(F_j)) / tau`.
pub fn attention_weights(factors: &[&Matrix], tau: f64) -> Result<AttentionMatrix> {
    if !(tau > 0.0) || tau.is_nan() {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let first = factors.first().ok_or_else(|| shape_err("attention needs at least one factor"))?;
    if factors.iter().any(|f| f.dim() != first.dim()) {
        return Err(shape_err("attention factors must share one shape"));
    }
    let p = factors.len();
    let mut sim = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in i..p {
            let s = matrix_cosine(factors[i], factors[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let weights = sim
        .iter()
        .map(|row| softmax_row(&row.iter().map(|s| s / tau).collect::<Vec<_>>()))
        .collect();
    Ok(AttentionMatrix { weights, tau })
}

fn weighted_sum(weights: &[f64], mats: &[&Matrix]) -> Matrix {
    let mut out = Matrix::zeros(mats[0].dim());
    for (w, m) in weights.iter().zip(mats) {
        out.scaled_add(*w, m);
    }
    out
}

/// Per-site attention pair of one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAttention {
    pub alpha: AttentionMatrix,
    pub beta: AttentionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedResult {
    /// Client ids in ascending order; row/column order of every attention
    /// matrix.
    pub order: Vec<usize>,
    pub outputs: BTreeMap<usize, Vec<LoraAdapter>>,
    pub attention: Vec<SiteAttention>,
}

fn sorted_updates<'a>(updates: &'a [StyleUpdate]) -> Result<Vec<&'a StyleUpdate>> {
    let first = updates.first().ok_or_else(|| shape_err("aggregation needs at least one update"))?;
    for u in updates {
        if u.sites.len() != first.sites.len() || u.sites.iter().zip(&first.sites).any(|(a, b)| !a.same_shape(b)) {
            return Err(shape_err(format!("update from client {} has a different shape", u.client_id)));
        }
    }
    let mut sorted: Vec<&StyleUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client id among updates".into()));
    }
    Ok(sorted)
}

/// `A'_i = sum_j alpha_ij A_j`, `B'_i = sum_j beta_ij B_j`, with attention
/// computed from the uploaded factors themselves.
pub fn personalized_aggregate(updates: &[StyleUpdate], tau: f64) -> Result<PersonalizedResult> {
    personalized_aggregate_with_basis(updates, None, tau)
}

/// Like [`personalized_aggregate`], but similarity may be measured on a
/// separate basis (for example round-over-round deltas), given per update as
/// `(A, B)` per site in the same order as `updates`.
pub fn personalized_aggregate_with_basis(
    updates: &[StyleUpdate],
    basis: Option<&[Vec<(Matrix, Matrix)>]>,
    tau: f64,
) -> Result<PersonalizedResult> {
    let sorted = sorted_updates(updates)?;
    let basis_sorted: Option<Vec<&Vec<(Matrix, Matrix)>>> = match basis {
        None => None,
        Some(b) => {
            if b.len() != updates.len() {
                return Err(shape_err("similarity basis length differs from updates"));
            }
            let mut pairs: Vec<(usize, &Vec<(Matrix, Matrix)>)> =
                updates.iter().map(|u| u.client_id).zip(b.iter()).collect();
            pairs.sort_by_key(|(id, _)| *id);
            Some(pairs.into_iter().map(|(_, v)| v).collect())
        }
    };
    let order: Vec<usize> = sorted.iter().map(|u| u.client_id).collect();
    let num_sites = sorted[0].sites.len();
    let mut outputs: BTreeMap<usize, Vec<LoraAdapter>> = order.iter().map(|&id| (id, Vec::new())).collect();
    let mut attention = Vec::with_capacity(num_sites);
    for site in 0..num_sites {
        let a_mats: Vec<&Matrix> = sorted.iter().map(|u| u.sites[site].a()).collect();
        let b_mats: Vec<&Matrix> = sorted.iter().map(|u| u.sites[site].b()).collect();
        let (alpha, beta) = match &basis_sorted {
            None => (attention_weights(&a_mats, tau)?, attention_weights(&b_mats, tau)?),
            Some(bs) => {
                let ba: Vec<&Matrix> = bs.iter().map(|v| &v[site].0).collect();
                let bb: Vec<&Matrix> = bs.iter().map(|v| &v[site].1).collect();
                (attention_weights(&ba, tau)?, attention_weights(&bb, tau)?)
            }
        };
        let template = &sorted[0].sites[site];
        for (i, &id) in order.iter().enumerate() {
            let a = weighted_sum(&alpha.weights[i], &a_mats);
            let b = weighted_sum(&beta.weights[i], &b_mats);
            let ad = LoraAdapter::from_factors(a, b, template.alpha())?;
            outputs.get_mut(&id).expect("id present").push(ad);
        }
        attention.push(SiteAttention { alpha, beta });
    }
    Ok(PersonalizedResult { order, outputs, attention })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAvgWeighting {
    #[default]
    Uniform,
    DataSize,
}

/// Weighted mean of the `A` and of the `B` factors. `data_sizes` is used with
/// [`FedAvgWeighting::DataSize`] and must align with `updates`.
pub fn fedavg_aggregate(updates: &[StyleUpdate], weighting: FedAvgWeighting, data_sizes: Option<&[usize]>) -> Result<Vec<LoraAdapter>> {
    let sorted = sorted_updates(updates)?;
    let weights: Vec<f64> = match weighting {
        FedAvgWeighting::Uniform => vec![1.0 / sorted.len() as f64; sorted.len()],
        FedAvgWeighting::DataSize => {
            let sizes = data_sizes.ok_or_else(|| Error::Config("data-size weighting needs sizes".into()))?;
            if sizes.len() != updates.len() {
                return Err(shape_err("data sizes do not align with updates"));
            }
            let mut pairs: Vec<(usize, usize)> = updates.iter().map(|u| u.client_id).zip(sizes.iter().copied()).collect();
            pairs.sort_by_key(|(id, _)| *id);
            let total: usize = pairs.iter().map(|(_, s)| s).sum();
            if total == 0 {
                return Err(Error::Data("data-size weighting with zero total samples".into()));
            }
            pairs.iter().map(|(_, s)| *s as f64 / total as f64).collect()
        }
    };
    (0..sorted[0].sites.len())
        .map(|site| {
            let a: Vec<&Matrix> = sorted.iter().map(|u| u.sites[site].a()).collect();
            let b: Vec<&Matrix> = sorted.iter().map(|u| u.sites[site].b()).collect();
            LoraAdapter::from_factors(weighted_sum(&weights, &a), weighted_sum(&weights, &b), sorted[0].sites[site].alpha())
        })
        .collect()
}

/// Mean per-row attention mass on same-cluster peers (including self) and on
/// other clusters.
pub fn cluster_mass(att: &AttentionMatrix, clusters: &[usize]) -> (f64, f64) {
    let p = att.size();
    let mut within = 0.0;
    for (i, row) in att.weights.iter().enumerate() {
        within += row
            .iter()
            .zip(clusters)
            .filter(|(_, &c)| c == clusters[i])
            .map(|(w, _)| w)
            .sum::<f64>();
    }
    let within = within / p as f64;
    (within, 1.0 - within)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::AdapterRole;
    use crate::lora::AdapterSet;
    use ndarray::array;

    fn update(id: usize, a: Matrix, b: Matrix) -> StyleUpdate {
        let set = AdapterSet::new(AdapterRole::Style, vec![LoraAdapter::from_factors(a, b, 1.0).unwrap()]);
        StyleUpdate::new(id, 1, &set)
    }

    #[test]
    fn sampling_counts_and_determinism() {
        assert_eq!(sample_participants(60, 0.2, 3, 1).unwrap().participant_ids.len(), 12);
        assert_eq!(sample_participants(10, 1.0, 3, 1).unwrap().participant_ids, (0..10).collect::<Vec<_>>());
        assert_eq!(sample_participants(60, 0.2, 4, 9).unwrap(), sample_participants(60, 0.2, 4, 9).unwrap());
        assert_eq!(sample_participants(5, 0.01, 1, 0).unwrap().participant_ids.len(), 1);
        assert!(sample_participants(5, 0.0, 1, 0).is_err());
        assert!(sample_participants(0, 0.5, 1, 0).is_err());
        let plan = sample_participants(60, 0.2, 2, 5).unwrap();
        assert!(plan.participant_ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn singleton_and_uniform_attention() {
        let m = array![[1.0, 2.0]];
        assert_eq!(attention_weights(&[&m], 0.5).unwrap().weights, vec![vec![1.0]]);
        let att = attention_weights(&[&m, &m, &m], 0.5).unwrap();
        for row in &att.weights {
            for w in row {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!(attention_weights(&[&m], 0.0).is_err());
        let other = array![[1.0, 2.0, 3.0]];
        assert!(attention_weights(&[&m, &other], 0.5).is_err());
    }

    #[test]
    fn single_update_is_returned_unchanged() {
        let u = update(4, array![[1.0, -2.0]], array![[0.5], [3.0]]);
        let res = personalized_aggregate(std::slice::from_ref(&u), 0.5).unwrap();
        assert_eq!(res.outputs[&4], u.sites);
    }

    #[test]
    fn fedavg_mean() {
        let u1 = update(0, array![[2.0]], array![[1.0]]);
        let u2 = update(1, array![[4.0]], array![[3.0]]);
        let avg = fedavg_aggregate(&[u1.clone(), u2.clone()], FedAvgWeighting::Uniform, None).unwrap();
        assert_eq!(avg[0].a(), &array![[3.0]]);
        assert_eq!(avg[0].b(), &array![[2.0]]);
        let same = fedavg_aggregate(&[u1.clone(), u1.clone().with_id(5)], FedAvgWeighting::Uniform, None).unwrap();
        assert_eq!(same, u1.sites);
        let sized = fedavg_aggregate(&[u1, u2], FedAvgWeighting::DataSize, Some(&[1, 3])).unwrap();
        assert_eq!(sized[0].a(), &array![[3.5]]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let u = update(0, array![[1.0]], array![[1.0]]);
        assert!(personalized_aggregate(&[u.clone(), u], 0.5).is_err());
    }

    #[test]
    fn cluster_mass_of_uniform_rows() {
        let att = AttentionMatrix { weights: vec![vec![0.25; 4]; 4], tau: 1.0 };
        let (w, c) = cluster_mass(&att, &[0, 0, 1, 2]);
        assert!((w - (0.5 + 0.5 + 0.25 + 0.25) / 4.0).abs() < 1e-15);
        assert!((w + c - 1.0).abs() < 1e-15);
    }

    impl StyleUpdate {
        fn with_id(mut self, id: usize) -> Self {
            self.client_id = id;
            self
        }
    }
}
