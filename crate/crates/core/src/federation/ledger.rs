use serde::{Deserialize, Serialize};

use super::RoundKind;

/// Parameters moved in each direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub up: u64,
    pub down: u64,
}

impl Tally {
    pub fn total(&self) -> u64 {
        self.up + self.down
    }

    fn add(&mut self, up: u64, down: u64) {
        self.up += up;
        self.down += down;
    }
}

/// Cumulative communication in parameter counts, per round kind and per
/// client. Each parameter is a 4-byte float on the wire.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    by_kind: [Tally; 3],
    by_client: Vec<Tally>,
}

impl CommLedger {
    pub const BYTES_PER_PARAM: u64 = 4;

    pub fn new(clients: usize) -> Self {
        Self {
            by_kind: [Tally::default(); 3],
            by_client: vec![Tally::default(); clients],
        }
    }

    pub fn charge(&mut self, kind: RoundKind, client: usize, up: u64, down: u64) {
        self.by_kind[kind.index()].add(up, down);
        self.by_client[client].add(up, down);
    }

    pub fn kind(&self, kind: RoundKind) -> Tally {
        self.by_kind[kind.index()]
    }

    pub fn client(&self, client: usize) -> Tally {
        self.by_client[client]
    }

    pub fn totals(&self) -> Tally {
        self.by_kind.iter().fold(Tally::default(), |mut acc, t| {
            acc.add(t.up, t.down);
            acc
        })
    }

    pub fn total_params(&self) -> u64 {
        self.totals().total()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_params() * Self::BYTES_PER_PARAM
    }
}
