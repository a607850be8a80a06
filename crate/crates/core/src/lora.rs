//! Low-rank adapters and the vector/similarity primitives built on them.
//!
//! An adapter stores the factor pair `(A, B)` with `A: rank x d_in` and
//! `B: d_out x rank`; the weight delta it contributes is `(alpha / rank) * B A`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub type Matrix = Array2<f64>;

/// Norm below which a vector is treated as degenerate by [`cosine_similarity`].
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterRole {
    Identity,
    Style,
}

impl AdapterRole {
    pub fn tag(self) -> u8 {
        match self {
            AdapterRole::Identity => 0,
            AdapterRole::Style => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(AdapterRole::Identity),
            1 => Ok(AdapterRole::Style),
            other => Err(Error::Decode(format!("unknown adapter role tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    /// Standard LoRA initialization: `A ~ N(0, 1/d_in)` entrywise, `B = 0`.
    pub fn new<R: Rng + ?Sized>(
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(d_out, d_in, rank, alpha)?;
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let a = Matrix::from_shape_simple_fn((rank, d_in), || normal.sample(rng));
        let b = Matrix::zeros((d_out, rank));
        Ok(Self { a, b, rank, alpha })
    }

    /// An adapter with both factors zero.
    pub fn zeros(d_out: usize, d_in: usize, rank: usize, alpha: f64) -> Result<Self> {
        validate_dims(d_out, d_in, rank, alpha)?;
        Ok(Self {
            a: Matrix::zeros((rank, d_in)),
            b: Matrix::zeros((d_out, rank)),
            rank,
            alpha,
        })
    }

    pub fn from_factors(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let rank = a.nrows();
        if b.ncols() != rank {
            return Err(shape_err(format!(
                "B has {} columns but A has {} rows",
                b.ncols(),
                rank
            )));
        }
        validate_dims(b.nrows(), a.ncols(), rank, alpha)?;
        Ok(Self { a, b, rank, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// Mutable access to both factors; shapes must be preserved by the caller.
    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    /// Replace the factors, keeping rank and alpha.
    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        if a.dim() != self.a.dim() || b.dim() != self.b.dim() {
            return Err(shape_err(format!(
                "factor shapes {:?}/{:?} do not match adapter {:?}/{:?}",
                a.dim(),
                b.dim(),
                self.a.dim(),
                self.b.dim()
            )));
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn same_shape(&self, other: &LoraAdapter) -> bool {
        self.a.dim() == other.a.dim() && self.b.dim() == other.b.dim()
    }

    pub fn merge_delta(&self) -> Matrix {
        self.b.dot(&self.a) * self.scale()
    }

    /// Append the binary record: `role u8, rank u32, d_out u32, d_in u32,
    /// alpha f64`, then row-major `B` then `A`, all little-endian.
    pub fn encode(&self, role: AdapterRole, out: &mut Vec<u8>) {
        out.push(role.tag());
        out.extend_from_slice(&(self.rank as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_out() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_in() as u32).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for v in self.b.iter().chain(self.a.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decode one record from the front of `bytes`, returning the number of
    /// bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(AdapterRole, LoraAdapter, usize)> {
        let header = decode_header(bytes)?;
        let body = header.params * 8;
        let end = RECORD_HEADER_LEN + body;
        if bytes.len() < end {
            return Err(Error::Decode(format!(
                "record needs {end} bytes, have {}",
                bytes.len()
            )));
        }
        let mut values = bytes[RECORD_HEADER_LEN..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let b_len = header.d_out * header.rank;
        let b: Vec<f64> = values.by_ref().take(b_len).collect();
        let a: Vec<f64> = values.collect();
        let b = unflatten(&b, header.d_out, header.rank)?;
        let a = unflatten(&a, header.rank, header.d_in)?;
        let adapter = LoraAdapter::from_factors(a, b, header.alpha)?;
        Ok((header.role, adapter, end))
    }
}

pub const RECORD_HEADER_LEN: usize = 1 + 4 + 4 + 4 + 8;

/// Parsed adapter record header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordHeader {
    pub role: AdapterRole,
    pub rank: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub alpha: f64,
    pub params: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<RecordHeader> {
    if bytes.len() < RECORD_HEADER_LEN {
        return Err(Error::Decode(format!(
            "adapter header needs {RECORD_HEADER_LEN} bytes, have {}",
            bytes.len()
        )));
    }
    let role = AdapterRole::from_tag(bytes[0])?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let rank = u32_at(1);
    let d_out = u32_at(5);
    let d_in = u32_at(9);
    let alpha = f64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes"));
    if rank == 0 || d_out == 0 || d_in == 0 {
        return Err(Error::Decode("zero dimension in adapter header".into()));
    }
    Ok(RecordHeader {
        role,
        rank,
        d_out,
        d_in,
        alpha,
        params: rank * (d_out + d_in),
    })
}

fn validate_dims(d_out: usize, d_in: usize, rank: usize, alpha: f64) -> Result<()> {
    if d_out == 0 || d_in == 0 || rank == 0 {
        return Err(Error::Config(format!(
            "adapter dimensions must be >= 1 (d_out={d_out}, d_in={d_in}, rank={rank})"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("adapter alpha must be > 0, got {alpha}")));
    }
    Ok(())
}

/// One adapter per injection site, all playing the same role.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub role: AdapterRole,
    pub sites: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn new(role: AdapterRole, sites: Vec<LoraAdapter>) -> Self {
        Self { role, sites }
    }

    pub fn init<R: Rng + ?Sized>(
        role: AdapterRole,
        num_sites: usize,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_sites == 0 {
            return Err(Error::Config("at least one adapter site is required".into()));
        }
        let sites = (0..num_sites)
            .map(|_| LoraAdapter::new(d_out, d_in, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { role, sites })
    }

    pub fn param_count(&self) -> usize {
        self.sites.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn same_shape(&self, other: &AdapterSet) -> bool {
        self.sites.len() == other.sites.len()
            && self.sites.iter().zip(&other.sites).all(|(a, b)| a.same_shape(b))
    }

    pub fn merge_deltas(&self) -> Vec<Matrix> {
        self.sites.iter().map(LoraAdapter::merge_delta).collect()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        for site in &self.sites {
            site.encode(self.role, out);
        }
    }

    /// Raw little-endian bytes of every factor entry, for identity checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }
}

/// Row-major entries of `m`.
pub fn flatten(m: &Matrix) -> Vec<f64> {
    m.iter().copied().collect()
}

pub fn unflatten(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_shape_vec((rows, cols), v.to_vec())
        .map_err(|e| shape_err(format!("cannot reshape {} values to {rows}x{cols}: {e}", v.len())))
}

/// Cosine of the angle between `u` and `v`; 0.0 when either norm is below
/// [`DEGENERATE_NORM`].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape_err(format!(
            "cosine similarity of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (&x, &y) in u.iter().zip(v) {
        dot += x * y;
        nu += x * x;
        nv += y * y;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity of two equally shaped matrices viewed as flat vectors.
pub fn matrix_cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("matrix shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => cosine_similarity(x, y),
        _ => cosine_similarity(&flatten(a), &flatten(b)),
    }
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
