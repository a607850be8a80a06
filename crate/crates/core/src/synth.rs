//! Synthetic client population: each client owns a hidden identity offset
//! `D_i`, each style cluster owns a shared offset `S_c`.
//!
//! Neutral samples follow `y = (W0 + D_i) x + e` and expressive samples follow
//! `y = (W0 + D_i + S_c(i)) x + e`, with `e ~ N(0, sigma_noise^2)`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{frobenius, AdapterSet, Matrix};
use crate::model::{batch_loss, Backbone, Batch, StyleGate, StyleLabel};
use crate::rng::{stream, stream_rng, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCounts {
    pub neutral_train: usize,
    pub neutral_val: usize,
    pub neutral_test: usize,
    pub expressive_train: usize,
    pub expressive_val: usize,
    pub expressive_test: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self {
            neutral_train: 64,
            neutral_val: 16,
            neutral_test: 32,
            expressive_train: 128,
            expressive_val: 32,
            expressive_test: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_clients: usize,
    pub num_style_clusters: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub num_sites: usize,
    pub sigma_id: f64,
    pub sigma_style: f64,
    pub sigma_noise: f64,
    pub samples: SampleCounts,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_clients: 12,
            num_style_clusters: 3,
            d_in: 8,
            d_out: 8,
            num_sites: 1,
            sigma_id: 0.5,
            sigma_style: 1.0,
            sigma_noise: 0.05,
            samples: SampleCounts::default(),
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_style_clusters == 0 || self.num_clients < self.num_style_clusters {
            return bad(format!(
                "need num_clients ({}) >= num_style_clusters ({}) >= 1",
                self.num_clients, self.num_style_clusters
            ));
        }
        if self.d_in == 0 || self.d_out == 0 || self.num_sites == 0 {
            return bad("world dimensions and num_sites must be >= 1".into());
        }
        for (name, v) in [
            ("sigma_id", self.sigma_id),
            ("sigma_style", self.sigma_style),
            ("sigma_noise", self.sigma_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        let s = &self.samples;
        if s.neutral_test == 0 || s.expressive_test == 0 {
            return bad("test splits must be nonempty".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("world spec serializes");
        hex_digest(&json)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub neutral: Splits,
    pub expressive: Splits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub backbone: Backbone,
    /// Per client, per site.
    pub id_truth: Vec<Vec<Matrix>>,
    /// Per cluster, per site.
    pub style_truth: Vec<Vec<Matrix>>,
    pub assignment: Vec<usize>,
    pub datasets: Vec<ClientData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub neutral_test_mse: f64,
    pub expressive_test_mse: f64,
    pub identity_error: f64,
    pub style_error: f64,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SimRng) -> Matrix {
    if std == 0.0 {
        return Matrix::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn standard(rows: usize, cols: usize, rng: &mut SimRng) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn make_split(
    n: usize,
    weights: &[Matrix],
    label: StyleLabel,
    sigma_noise: f64,
    rng: &mut SimRng,
) -> Batch {
    let d_in = weights[0].ncols();
    let d_out = weights[0].nrows();
    let inputs = standard(n, d_in, rng);
    let mut targets = Matrix::zeros((n, d_out * weights.len()));
    for (l, w) in weights.iter().enumerate() {
        let block = inputs.dot(&w.t()) + gaussian(n, d_out, sigma_noise, rng);
        targets
            .slice_mut(ndarray::s![.., l * d_out..(l + 1) * d_out])
            .assign(&block);
    }
    Batch { inputs, targets, style_label: label }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let seed = spec.seed;
    let (d_out, d_in, sites) = (spec.d_out, spec.d_in, spec.num_sites);

    let mut rng = stream_rng(seed, &[stream::WORLD, 0]);
    let w0_std = 1.0 / (d_in as f64).sqrt();
    let backbone = Backbone::new((0..sites).map(|_| gaussian(d_out, d_in, w0_std, &mut rng)).collect())?;

    let mut rng = stream_rng(seed, &[stream::WORLD, 1]);
    let id_truth: Vec<Vec<Matrix>> = (0..spec.num_clients)
        .map(|_| (0..sites).map(|_| gaussian(d_out, d_in, spec.sigma_id, &mut rng)).collect())
        .collect();

    let mut rng = stream_rng(seed, &[stream::WORLD, 2]);
    let style_truth: Vec<Vec<Matrix>> = (0..spec.num_style_clusters)
        .map(|_| (0..sites).map(|_| gaussian(d_out, d_in, spec.sigma_style, &mut rng)).collect())
        .collect();

    // Balanced round-robin labels, shuffled, so every cluster is populated.
    let mut rng = stream_rng(seed, &[stream::WORLD, 3]);
    let mut assignment: Vec<usize> = (0..spec.num_clients).map(|i| i % spec.num_style_clusters).collect();
    assignment.shuffle(&mut rng);

    let s = spec.samples;
    let datasets = (0..spec.num_clients)
        .map(|i| {
            let mut rng = stream_rng(seed, &[stream::WORLD, 4, i as u64]);
            let c = assignment[i];
            let neutral_w: Vec<Matrix> = backbone
                .sites()
                .iter()
                .zip(&id_truth[i])
                .map(|(w0, d)| w0 + d)
                .collect();
            let expressive_w: Vec<Matrix> = neutral_w
                .iter()
                .zip(&style_truth[c])
                .map(|(w, st)| w + st)
                .collect();
            let mut split = |n, w: &[Matrix], label| make_split(n, w, label, spec.sigma_noise, &mut rng);
            let neutral = Splits {
                train: split(s.neutral_train, &neutral_w, StyleLabel::Neutral),
                val: split(s.neutral_val, &neutral_w, StyleLabel::Neutral),
                test: split(s.neutral_test, &neutral_w, StyleLabel::Neutral),
            };
            let label = StyleLabel::Cluster(c);
            let expressive = Splits {
                train: split(s.expressive_train, &expressive_w, label),
                val: split(s.expressive_val, &expressive_w, label),
                test: split(s.expressive_test, &expressive_w, label),
            };
            ClientData { neutral, expressive }
        })
        .collect();

    Ok(World { spec: spec.clone(), backbone, id_truth, style_truth, assignment, datasets })
}

fn site_error(deltas: &[Matrix], truth: &[Matrix]) -> f64 {
    deltas
        .iter()
        .zip(truth)
        .map(|(d, t)| frobenius(&(d - t)).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl World {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn cluster_of(&self, client: usize) -> Result<usize> {
        self.assignment.get(client).copied().ok_or(Error::UnknownClient(client))
    }

    pub fn client_data(&self, client: usize) -> Result<&ClientData> {
        self.datasets.get(client).ok_or(Error::UnknownClient(client))
    }

    pub fn hash_hex(&self) -> String {
        self.spec.hash_hex()
    }

    pub fn evaluate_client(&self, client: usize, id: &AdapterSet, style: &AdapterSet) -> Result<MetricsRecord> {
        self.evaluate_client_gated(client, id, style, StyleGate::ExpressiveOnly)
    }

    pub fn evaluate_client_gated(
        &self,
        client: usize,
        id: &AdapterSet,
        style: &AdapterSet,
        gate: StyleGate,
    ) -> Result<MetricsRecord> {
        let data = self.client_data(client)?;
        let cluster = self.assignment[client];
        Ok(MetricsRecord {
            neutral_test_mse: batch_loss(&self.backbone, id, style, &data.neutral.test, gate)?,
            expressive_test_mse: batch_loss(&self.backbone, id, style, &data.expressive.test, gate)?,
            identity_error: site_error(&id.merge_deltas(), &self.id_truth[client]),
            style_error: site_error(&style.merge_deltas(), &self.style_truth[cluster]),
        })
    }

    /// Style error of `style` measured against an arbitrary cluster's truth.
    pub fn style_error_against(&self, style: &AdapterSet, cluster: usize) -> Result<f64> {
        let truth = self
            .style_truth
            .get(cluster)
            .ok_or_else(|| Error::Config(format!("no style cluster {cluster}")))?;
        Ok(site_error(&style.merge_deltas(), truth))
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let spec_json = serde_json::to_vec(&self.spec).expect("world spec serializes");
        w.write_all(SNAPSHOT_MAGIC)?;
        write_bytes(&mut w, self.hash_hex().as_bytes())?;
        write_bytes(&mut w, &spec_json)?;
        for m in self.backbone.sites() {
            write_matrix(&mut w, m)?;
        }
        for per_site in self.id_truth.iter().chain(&self.style_truth) {
            for m in per_site {
                write_matrix(&mut w, m)?;
            }
        }
        for &c in &self.assignment {
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        for data in &self.datasets {
            for split in [&data.neutral, &data.expressive] {
                for b in [&split.train, &split.val, &split.test] {
                    write_matrix(&mut w, &b.inputs)?;
                    write_matrix(&mut w, &b.targets)?;
                }
            }
        }
        Ok(())
    }

    /// Read a snapshot; fails if the stored hash does not match the stored
    /// spec, or if `expected_hash` is given and differs.
    pub fn read_snapshot<R: Read>(mut r: R, expected_hash: Option<&str>) -> Result<World> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Decode("not a world snapshot".into()));
        }
        let hash = String::from_utf8(read_bytes(&mut r)?).map_err(|e| Error::Decode(e.to_string()))?;
        let spec: WorldSpec =
            serde_json::from_slice(&read_bytes(&mut r)?).map_err(|e| Error::Decode(e.to_string()))?;
        spec.validate()?;
        if spec.hash_hex() != hash {
            return Err(Error::Decode("snapshot hash does not match its spec".into()));
        }
        if let Some(expected) = expected_hash {
            if expected != hash {
                return Err(Error::Decode(format!("snapshot hash {hash} != expected {expected}")));
            }
        }
        let sites = spec.num_sites;
        let backbone = Backbone::new((0..sites).map(|_| read_matrix(&mut r)).collect::<Result<_>>()?)?;
        let mut per_site = |n: usize| -> Result<Vec<Vec<Matrix>>> {
            (0..n)
                .map(|_| (0..sites).map(|_| read_matrix(&mut r)).collect())
                .collect()
        };
        let id_truth = per_site(spec.num_clients)?;
        let style_truth = per_site(spec.num_style_clusters)?;
        let mut assignment = Vec::with_capacity(spec.num_clients);
        for _ in 0..spec.num_clients {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            let c = u32::from_le_bytes(buf) as usize;
            if c >= spec.num_style_clusters {
                return Err(Error::Decode(format!("cluster {c} out of range")));
            }
            assignment.push(c);
        }
        let mut datasets = Vec::with_capacity(spec.num_clients);
        for &c in &assignment {
            let mut read_splits = |label| -> Result<Splits> {
                let mut batch = || -> Result<Batch> {
                    Ok(Batch { inputs: read_matrix(&mut r)?, targets: read_matrix(&mut r)?, style_label: label })
                };
                Ok(Splits { train: batch()?, val: batch()?, test: batch()? })
            };
            let neutral = read_splits(StyleLabel::Neutral)?;
            let expressive = read_splits(StyleLabel::Cluster(c))?;
            datasets.push(ClientData { neutral, expressive });
        }
        Ok(World { spec, backbone, id_truth, style_truth, assignment, datasets })
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"FPWORLD1";

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut dims = [0u8; 8];
    r.read_exact(&mut dims)?;
    let rows = u32::from_le_bytes(dims[..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(dims[4..].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let values = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_shape_vec((rows, cols), values).map_err(|e| Error::Decode(e.to_string()))
}
