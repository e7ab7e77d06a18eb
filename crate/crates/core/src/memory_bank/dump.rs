use serde::{Deserialize, Serialize};

use super::{BankEntry, CompressionPolicy, MemoryBank, Span, TokenGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// JSON debugging snapshot of a bank.
///
/// ```json
/// {"capacity": 3, "policy": {...}, "ingested": 5,
///  "entries": [{"tokens": [[..C..], ..P..], "weights": [..P..],
///               "provenance": [[first, last], ..P..]}]}
/// ```
///
/// Floats are written with the shortest representation that parses back to
/// the same `f64`, so a dump round-trips exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankDump {
    pub capacity: usize,
    pub policy: CompressionPolicy,
    pub ingested: u64,
    pub entries: Vec<EntryDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDump {
    pub tokens: Vec<Vec<f64>>,
    pub weights: Vec<u64>,
    pub provenance: Vec<[u64; 2]>,
}

impl BankDump {
    pub fn from_bank(bank: &MemoryBank) -> Self {
        let entries = bank
            .entries()
            .iter()
            .map(|e| EntryDump {
                tokens: (0..e.tokens().rows()).map(|r| e.tokens().row(r).to_vec()).collect(),
                weights: e.grid().weights().to_vec(),
                provenance: e.provenance().iter().map(|s| [s.first, s.last]).collect(),
            })
            .collect();
        BankDump {
            capacity: bank.capacity(),
            policy: bank.policy(),
            ingested: bank.ingested(),
            entries,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rebuilds the bank, rejecting dumps that violate the bank invariants.
    pub fn into_bank(self) -> Result<MemoryBank> {
        let first = self.entries.first().ok_or(Error::EmptyBank)?;
        let positions = first.tokens.len();
        let channels = first.tokens.first().map_or(0, Vec::len);
        let mut bank = MemoryBank::new(self.capacity, positions, channels, self.policy)?;
        for e in self.entries {
            let rows: Vec<&[f64]> = e.tokens.iter().map(Vec::as_slice).collect();
            let grid = TokenGrid::with_weights(Tensor::from_rows(&rows)?, e.weights)?;
            if grid.positions() != positions || grid.channels() != channels {
                return Err(Error::GridDimension {
                    got_tokens: grid.positions(),
                    got_channels: grid.channels(),
                    want_tokens: positions,
                    want_channels: channels,
                });
            }
            let provenance = e.provenance.iter().map(|&[first, last]| Span { first, last }).collect();
            bank.entries.push(BankEntry { grid, provenance });
        }
        bank.ingested = self.ingested;
        bank.check_invariants().map_err(Error::BankPrecondition)?;
        Ok(bank)
    }
}
