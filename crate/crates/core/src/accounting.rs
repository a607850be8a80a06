//! Communication-cost bookkeeping. Parameter counts come from decoding the
//! actual wire payloads, never from the sender's own claim.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{decode_header, AdapterRole, RECORD_HEADER_LEN};

pub const GIB: f64 = (1u64 << 30) as f64;
pub const FP16_BYTES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upload,
    Download,
}

/// Which transfers are billed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostScope {
    #[default]
    Both,
    UploadOnly,
}

impl CostScope {
    pub fn bills(self, dir: Direction) -> bool {
        matches!((self, dir), (CostScope::Both, _) | (CostScope::UploadOnly, Direction::Upload))
    }

    pub fn directions(self) -> u64 {
        match self {
            CostScope::Both => 2,
            CostScope::UploadOnly => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client_id: usize,
    pub direction: Direction,
    pub param_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
    bytes_per_param: u64,
}

impl Default for CostLedger {
    fn default() -> Self {
        Self::new(FP16_BYTES)
    }
}

impl CostLedger {
    pub fn new(bytes_per_param: u64) -> Self {
        Self { entries: Vec::new(), bytes_per_param }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn bytes_per_param(&self) -> u64 {
        self.bytes_per_param
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record_transfer(&mut self, round: usize, client_id: usize, direction: Direction, param_count: u64) -> Result<()> {
        if param_count == 0 {
            return Err(Error::Invariant("transfer with zero parameters".into()));
        }
        self.entries.push(LedgerEntry { round, client_id, direction, param_count });
        Ok(())
    }

    /// Bill a wire payload, decoding it to count parameters. Rejects any
    /// payload that carries an identity-role adapter.
    pub fn record_payload(&mut self, round: usize, client_id: usize, direction: Direction, payload: &[u8]) -> Result<()> {
        let count = count_style_params(payload)?;
        self.record_transfer(round, client_id, direction, count)
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.param_count).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_params() * self.bytes_per_param
    }

    pub fn total_cost_gib(&self) -> f64 {
        self.total_bytes() as f64 / GIB
    }

    pub fn bytes_through_round(&self, round: usize) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.round <= round)
            .map(|e| e.param_count)
            .sum::<u64>()
            * self.bytes_per_param
    }
}

/// Closed-form byte total for `rounds` rounds of `participants` clients that
/// each move a `params_per_adapter` payload in every billed direction.
pub fn closed_form_bytes(rounds: u64, participants: u64, params_per_adapter: u64, bytes_per_param: u64, scope: CostScope) -> u64 {
    rounds * participants * scope.directions() * params_per_adapter * bytes_per_param
}

/// Length of a message header preceding the adapter records.
pub const MESSAGE_HEADER_LEN: usize = 8;

/// Parameter count of a framed message (`client_id u32, round u32`, then
/// adapter records). Errors if any record carries the identity role.
pub fn count_style_params(payload: &[u8]) -> Result<u64> {
    if payload.len() < MESSAGE_HEADER_LEN {
        return Err(Error::Decode("message shorter than its header".into()));
    }
    let mut rest = &payload[MESSAGE_HEADER_LEN..];
    let mut total = 0u64;
    if rest.is_empty() {
        return Err(Error::Decode("message carries no adapter".into()));
    }
    while !rest.is_empty() {
        let header = decode_header(rest)?;
        if header.role == AdapterRole::Identity {
            return Err(Error::Invariant("identity adapter in a server-bound payload".into()));
        }
        let len = RECORD_HEADER_LEN + header.params * 8;
        if rest.len() < len {
            return Err(Error::Decode("truncated adapter record".into()));
        }
        total += header.params as u64;
        rest = &rest[len..];
    }
    Ok(total)
}
