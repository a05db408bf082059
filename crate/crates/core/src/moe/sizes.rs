//! Per-(source, destination) token counts of an irregular all-to-all.

use serde::{Deserialize, Serialize};

use super::routing::{Route, RoutingResult};
use super::MoeError;
use crate::cost::CostDb;
use crate::time::Time;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeMatrix {
    /// `per_expert[s][e]`: tokens on device `s` admitted to expert `e`.
    pub per_expert: Vec<Vec<u64>>,
    pub experts_per_device: usize,
}

impl SizeMatrix {
    pub fn devices(&self) -> usize {
        self.per_expert.len()
    }

    /// Tokens device `src` sends to device `dst`.
    pub fn get(&self, src: usize, dst: usize) -> u64 {
        let el = self.experts_per_device;
        self.per_expert[src][dst * el..(dst + 1) * el].iter().sum()
    }

    pub fn matrix(&self) -> Vec<Vec<u64>> {
        let g = self.devices();
        (0..g).map(|s| (0..g).map(|d| self.get(s, d)).collect()).collect()
    }

    pub fn row_sum(&self, src: usize) -> u64 {
        self.per_expert[src].iter().sum()
    }

    pub fn col_sum(&self, dst: usize) -> u64 {
        (0..self.devices()).map(|s| self.get(s, dst)).sum()
    }

    pub fn total(&self) -> u64 {
        self.per_expert.iter().flatten().sum()
    }

    /// Tokens arriving at expert `e` from all sources.
    pub fn expert_total(&self, e: usize) -> u64 {
        self.per_expert.iter().map(|row| row[e]).sum()
    }
}

/// The two rounds of an irregular all-to-all: every device first tells every
/// peer how many tokens it will send, then sends exactly that many.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrregularExchange {
    /// Bytes of the size round, per (source, destination).
    pub size_round_bytes: Vec<Vec<u64>>,
    pub data: SizeMatrix,
}

impl IrregularExchange {
    /// Modeled time: the size round, then the data round of the busiest sender.
    /// Padding slots are never transmitted.
    pub fn modeled_time(&self, db: &CostDb, token_bytes: u64) -> Time {
        let size_bytes = self.size_round_bytes.iter().map(|r| r.iter().sum::<u64>()).max().unwrap_or(0);
        let busiest = (0..self.data.devices()).map(|s| self.data.row_sum(s)).max().unwrap_or(0);
        db.comm_cost(size_bytes.max(1)) + db.comm_cost((busiest * token_bytes).max(1))
    }
}

/// Size matrix of one all-to-all given each source device's routing (one or
/// more micro-batch results per device, summed).
pub fn a2a_sizes(
    per_device: &[Vec<RoutingResult>],
    devices: usize,
    experts_per_device: usize,
) -> Result<IrregularExchange, MoeError> {
    if per_device.len() != devices || devices == 0 || experts_per_device == 0 {
        return Err(MoeError::InvalidConfig(format!(
            "need one routing per device ({} given, {devices} devices)",
            per_device.len()
        )));
    }
    let experts = devices * experts_per_device;
    let mut per_expert = vec![vec![0u64; experts]; devices];
    for (s, results) in per_device.iter().enumerate() {
        for r in results {
            if r.admitted.len() != experts {
                return Err(MoeError::InvalidConfig(format!(
                    "routing has {} experts, expected G×E_l = {experts}",
                    r.admitted.len()
                )));
            }
            for route in &r.routes {
                if let Route::Expert { expert, .. } = route {
                    per_expert[s][*expert] += 1;
                }
            }
        }
    }
    let count_bytes = (experts_per_device * std::mem::size_of::<u64>()) as u64;
    let size_round_bytes = (0..devices).map(|_| vec![count_bytes; devices]).collect();
    Ok(IrregularExchange { size_round_bytes, data: SizeMatrix { per_expert, experts_per_device } })
}
