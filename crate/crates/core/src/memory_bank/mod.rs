//! Bounded, temporally ordered stores of token grids.
//!
//! Both the visual bank (one `P x C` grid per frame) and each query bank
//! (one `N x C` grid per timestep) are [`MemoryBank`]s. When an append pushes
//! the bank past its capacity `M`, exactly one reduction step runs:
//!
//! * MBC, token level: for every spatial position `i` independently, pick the
//!   adjacent pair `(k, k+1)` with the highest cosine similarity (ties go to
//!   the smallest `k`) and replace it with the plain average.
//! * MBC, frame level: as above, but one `k` for the whole grid, chosen on
//!   the cosine of the flattened grids.
//! * FIFO: drop the entry with the earliest timestep.
//!
//! Every token carries the contiguous interval of original timesteps merged
//! into it, so order preservation and coverage are directly checkable.

mod dump;
pub mod oracle;

use serde::{Deserialize, Serialize};

pub use dump::{BankDump, EntryDump};

use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionKind {
    MbcToken,
    MbcFrame,
    Fifo,
    None,
}

impl CompressionKind {
    pub fn name(self) -> &'static str {
        match self {
            CompressionKind::MbcToken => "mbc_token",
            CompressionKind::MbcFrame => "mbc_frame",
            CompressionKind::Fifo => "fifo",
            CompressionKind::None => "none",
        }
    }
}

/// Which index wins when several adjacent pairs tie for the highest
/// similarity. `Latest` exists so the verification suite can check that the
/// oracle notices a wrong tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    Earliest,
    Latest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    pub kind: CompressionKind,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl CompressionPolicy {
    pub const MBC_TOKEN: Self = Self::new(CompressionKind::MbcToken);
    pub const MBC_FRAME: Self = Self::new(CompressionKind::MbcFrame);
    pub const FIFO: Self = Self::new(CompressionKind::Fifo);
    pub const NONE: Self = Self::new(CompressionKind::None);

    pub const fn new(kind: CompressionKind) -> Self {
        CompressionPolicy {
            kind,
            tie_break: TieBreak::Earliest,
        }
    }

    pub fn with_tie_break(mut self, tie_break: TieBreak) -> Self {
        self.tie_break = tie_break;
        self
    }
}

/// Inclusive, 1-based interval of original timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub first: u64,
    pub last: u64,
}

impl Span {
    pub fn single(t: u64) -> Self {
        Span { first: t, last: t }
    }

    pub fn count(&self) -> u64 {
        self.last - self.first + 1
    }

    pub fn timesteps(&self) -> std::ops::RangeInclusive<u64> {
        self.first..=self.last
    }
}

/// `P x C` tokens plus the number of original frames merged into each
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    tokens: Tensor,
    weights: Vec<u64>,
}

impl TokenGrid {
    /// A freshly ingested grid: all weights 1.
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: tokens.shape().to_vec(),
                reason: "token grid must be P x C".into(),
            });
        }
        let weights = vec![1; tokens.rows()];
        Ok(TokenGrid { tokens, weights })
    }

    pub fn with_weights(tokens: Tensor, weights: Vec<u64>) -> Result<Self> {
        let mut grid = TokenGrid::new(tokens)?;
        if weights.len() != grid.weights.len() || weights.contains(&0) {
            return Err(Error::BankPrecondition("weights must be >= 1, one per position".into()));
        }
        grid.weights = weights;
        Ok(grid)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn positions(&self) -> usize {
        self.tokens.rows()
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    grid: TokenGrid,
    provenance: Vec<Span>,
}

impl BankEntry {
    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn tokens(&self) -> &Tensor {
        &self.grid.tokens
    }

    /// Timesteps merged into each spatial position of this entry.
    pub fn provenance(&self) -> &[Span] {
        &self.provenance
    }
}

/// What a reduction step did, so that a mirror of the bank (for example the
/// tape nodes holding the same tokens) can replay it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compaction {
    /// Position `i` merged entries `at[i]` and `at[i] + 1`.
    Merged { at: Vec<usize> },
    /// The oldest entry was removed.
    Evicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    positions: usize,
    channels: usize,
    policy: CompressionPolicy,
    entries: Vec<BankEntry>,
    ingested: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize, positions: usize, channels: usize, policy: CompressionPolicy) -> Result<Self> {
        if capacity == 0 || positions == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "bank needs capacity, positions and channels >= 1 (got {capacity}, {positions}, {channels})"
            )));
        }
        Ok(MemoryBank {
            capacity,
            positions,
            channels,
            policy,
            entries: Vec::with_capacity(capacity + 1),
            ingested: 0,
        })
    }

    /// Builds a bank holding `grids` as timesteps `1..=len` without running
    /// any compression. Up to `capacity + 1` grids are accepted so that the
    /// single-step reductions can be exercised directly.
    pub fn from_grids(
        capacity: usize,
        policy: CompressionPolicy,
        grids: impl IntoIterator<Item = Tensor>,
    ) -> Result<Self> {
        let grids: Vec<Tensor> = grids.into_iter().collect();
        let first = grids.first().ok_or(Error::EmptyBank)?;
        let mut bank = MemoryBank::new(capacity, first.rows(), first.cols(), policy)?;
        if grids.len() > capacity + 1 {
            return Err(Error::BankPrecondition(format!(
                "{} grids exceed capacity {capacity} + 1",
                grids.len()
            )));
        }
        for g in grids {
            bank.push(TokenGrid::new(g)?)?;
        }
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn policy(&self) -> CompressionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of timesteps appended over the bank's lifetime.
    pub fn ingested(&self) -> u64 {
        self.ingested
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    /// Rows this bank contributes as attention keys/values.
    pub fn kv_rows(&self) -> usize {
        self.entries.len() * self.positions
    }

    pub fn resident_floats(&self) -> usize {
        self.entries.len() * self.positions * self.channels
    }

    fn push(&mut self, grid: TokenGrid) -> Result<()> {
        if grid.positions() != self.positions || grid.channels() != self.channels {
            return Err(Error::GridDimension {
                got_tokens: grid.positions(),
                got_channels: grid.channels(),
                want_tokens: self.positions,
                want_channels: self.channels,
            });
        }
        if grid.weights.iter().any(|&w| w != 1) {
            return Err(Error::NonUnitWeights);
        }
        self.ingested += 1;
        let provenance = vec![Span::single(self.ingested); self.positions];
        self.entries.push(BankEntry { grid, provenance });
        Ok(())
    }

    /// Appends one grid and, if that exceeds the capacity, runs exactly one
    /// reduction step according to the bank's policy.
    pub fn append(&mut self, grid: TokenGrid) -> Result<Option<Compaction>> {
        if self.policy.kind == CompressionKind::None && self.entries.len() == self.capacity {
            return Err(Error::CapacityExceeded(self.capacity));
        }
        self.push(grid)?;
        if self.entries.len() <= self.capacity {
            return Ok(None);
        }
        let step = match self.policy.kind {
            CompressionKind::MbcToken => self.mbc_compress_token_level()?,
            CompressionKind::MbcFrame => self.mbc_compress_frame_level()?,
            CompressionKind::Fifo => self.fifo_evict()?,
            CompressionKind::None => unreachable!("checked before push"),
        };
        Ok(Some(step))
    }

    pub fn append_tokens(&mut self, tokens: Tensor) -> Result<Option<Compaction>> {
        self.append(TokenGrid::new(tokens)?)
    }

    /// `s[t][i] = cos(entry t position i, entry t+1 position i)`.
    pub fn mbc_similarities(&self) -> Result<Tensor> {
        if self.entries.len() < 2 {
            return Err(Error::BankPrecondition(format!(
                "similarities need at least 2 entries, have {}",
                self.entries.len()
            )));
        }
        let pairs = self.entries.len() - 1;
        let mut data = Vec::with_capacity(pairs * self.positions);
        for w in self.entries.windows(2) {
            for i in 0..self.positions {
                data.push(cosine(w[0].tokens().row(i), w[1].tokens().row(i)));
            }
        }
        Tensor::matrix(pairs, self.positions, data)
    }

    fn require_overfull(&self) -> Result<()> {
        if self.entries.len() != self.capacity + 1 {
            return Err(Error::BankPrecondition(format!(
                "reduction needs len == capacity + 1 = {}, have {}",
                self.capacity + 1,
                self.entries.len()
            )));
        }
        Ok(())
    }

    fn pick(&self, scores: impl Iterator<Item = f64>) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (t, s) in scores.enumerate() {
            let better = match self.policy.tie_break {
                TieBreak::Earliest => s > best_score,
                TieBreak::Latest => s >= best_score,
            };
            if better {
                best = t;
                best_score = s;
            }
        }
        best
    }

    pub fn mbc_compress_token_level(&mut self) -> Result<Compaction> {
        self.require_overfull()?;
        let sims = self.mbc_similarities()?;
        let at: Vec<usize> = (0..self.positions)
            .map(|i| self.pick((0..sims.rows()).map(|t| sims.get(t, i))))
            .collect();
        self.merge_at(&at)?;
        Ok(Compaction::Merged { at })
    }

    pub fn mbc_compress_frame_level(&mut self) -> Result<Compaction> {
        self.require_overfull()?;
        let k = self.pick(
            self.entries
                .windows(2)
                .map(|w| cosine(w[0].tokens().data(), w[1].tokens().data())),
        );
        let at = vec![k; self.positions];
        self.merge_at(&at)?;
        Ok(Compaction::Merged { at })
    }

    pub fn fifo_evict(&mut self) -> Result<Compaction> {
        self.require_overfull()?;
        self.entries.remove(0);
        Ok(Compaction::Evicted)
    }

    /// Position `i` merges entries `at[i]` and `at[i] + 1`; every position
    /// loses exactly one token, so the bank stays rectangular.
    fn merge_at(&mut self, at: &[usize]) -> Result<()> {
        let old = std::mem::take(&mut self.entries);
        let len = old.len() - 1;
        let c = self.channels;
        let mut entries = Vec::with_capacity(self.capacity + 1);
        for j in 0..len {
            let mut data = Vec::with_capacity(self.positions * c);
            let mut weights = Vec::with_capacity(self.positions);
            let mut provenance = Vec::with_capacity(self.positions);
            for (i, &k) in at.iter().enumerate() {
                if j == k {
                    let (a, b) = (&old[k], &old[k + 1]);
                    data.extend(
                        a.tokens()
                            .row(i)
                            .iter()
                            .zip(b.tokens().row(i))
                            .map(|(x, y)| (x + y) / 2.0),
                    );
                    weights.push(a.grid.weights[i] + b.grid.weights[i]);
                    provenance.push(Span {
                        first: a.provenance[i].first,
                        last: b.provenance[i].last,
                    });
                } else {
                    let src = &old[if j < k { j } else { j + 1 }];
                    data.extend_from_slice(src.tokens().row(i));
                    weights.push(src.grid.weights[i]);
                    provenance.push(src.provenance[i]);
                }
            }
            let tokens = Tensor::matrix(self.positions, c, data)?;
            entries.push(BankEntry {
                grid: TokenGrid { tokens, weights },
                provenance,
            });
        }
        self.entries = entries;
        Ok(())
    }

    /// All entries stacked in temporal order, positions in order within an
    /// entry: `(len * P) x C`.
    pub fn flatten(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        Tensor::concat_rows(&self.entries.iter().map(|e| e.tokens()).collect::<Vec<_>>())
    }

    /// Checks the structural invariants: the length bound, contiguous
    /// ascending provenance per position, weights equal to interval lengths,
    /// and full coverage of the retained window.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.entries.len() > self.capacity {
            return Err(format!("len {} exceeds capacity {}", self.entries.len(), self.capacity));
        }
        if self.entries.is_empty() {
            return Ok(());
        }
        for i in 0..self.positions {
            let mut expected_next = self.entries[0].provenance[i].first;
            for (j, e) in self.entries.iter().enumerate() {
                let span = e.provenance[i];
                if span.first != expected_next || span.last < span.first {
                    return Err(format!("entry {j} position {i}: span {span:?} breaks contiguity"));
                }
                if e.grid.weights[i] != span.count() {
                    return Err(format!(
                        "entry {j} position {i}: weight {} != span length {}",
                        e.grid.weights[i],
                        span.count()
                    ));
                }
                expected_next = span.last + 1;
            }
            if expected_next != self.ingested + 1 {
                return Err(format!("position {i}: coverage ends at {}, ingested {}", expected_next - 1, self.ingested));
            }
            let start = self.entries[0].provenance[i].first;
            if self.policy.kind != CompressionKind::Fifo && start != 1 {
                return Err(format!("position {i}: coverage starts at {start}, not 1"));
            }
        }
        Ok(())
    }

    pub fn dump(&self) -> BankDump {
        BankDump::from_bank(self)
    }
}
