//! Top-1 routing with expert capacity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MoeError;
use crate::ir::GateKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub token_id: usize,
    pub sequence_id: usize,
    pub gate_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub tokens: Vec<Token>,
    /// Number of sequences (B).
    pub batch: usize,
    /// Tokens per sequence (S).
    pub seq: usize,
}

impl TokenBatch {
    /// Consecutive slices ending at each of `cuts` (exclusive) and at the end.
    pub fn split_at(&self, cuts: &[usize]) -> Vec<TokenBatch> {
        let mut out = Vec::new();
        let mut start = 0;
        for &c in cuts.iter().chain(std::iter::once(&self.tokens.len())) {
            let c = c.clamp(start, self.tokens.len());
            out.push(TokenBatch { tokens: self.tokens[start..c].to_vec(), batch: self.batch, seq: self.seq });
            start = c;
        }
        out
    }

    /// Splits into `k` slices whose sizes differ by at most one, larger first.
    pub fn split_even(&self, k: usize) -> Vec<TokenBatch> {
        let sizes = even_sizes(self.tokens.len(), k);
        let cuts: Vec<usize> = sizes.iter().scan(0, |acc, s| {
            *acc += s;
            Some(*acc)
        }).take(k.saturating_sub(1)).collect();
        self.split_at(&cuts)
    }
}

/// `k` sizes summing to `n`, differing by at most one, larger parts first.
pub fn even_sizes(n: usize, k: usize) -> Vec<usize> {
    let k = k.max(1);
    (0..k).map(|p| n / k + usize::from(p < n % k)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Admitted to `expert` at capacity position `slot`.
    Expert { expert: usize, slot: usize },
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingResult {
    /// One entry per token of the routed batch, in batch order.
    pub routes: Vec<Route>,
    /// Token ids in the routed batch, aligned with `routes`.
    pub token_ids: Vec<usize>,
    /// Admitted token ids per expert, in admission order.
    pub admitted: Vec<Vec<usize>>,
    pub capacity: usize,
}

impl RoutingResult {
    pub fn dropped(&self) -> Vec<usize> {
        self.routes
            .iter()
            .zip(&self.token_ids)
            .filter(|(r, _)| matches!(r, Route::Dropped))
            .map(|(_, &t)| t)
            .collect()
    }

    pub fn admitted_count(&self) -> usize {
        self.admitted.iter().map(Vec::len).sum()
    }

    /// Concatenates micro-batch results in slice order.
    pub fn concat(parts: &[RoutingResult]) -> RoutingResult {
        let experts = parts.iter().map(|p| p.admitted.len()).max().unwrap_or(0);
        let mut out = RoutingResult {
            routes: Vec::new(),
            token_ids: Vec::new(),
            admitted: vec![Vec::new(); experts],
            capacity: parts.first().map_or(0, |p| p.capacity),
        };
        for p in parts {
            out.routes.extend_from_slice(&p.routes);
            out.token_ids.extend_from_slice(&p.token_ids);
            for (e, a) in p.admitted.iter().enumerate() {
                out.admitted[e].extend_from_slice(a);
            }
        }
        out
    }
}

/// Remaining per-expert capacity, threaded between micro-batches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityState {
    pub remaining: Vec<usize>,
    pub capacity: usize,
    /// Tokens routed so far; the token offset of the next micro-batch.
    pub tokens_seen: usize,
}

impl CapacityState {
    pub fn full(experts: usize, capacity: usize) -> Self {
        CapacityState { remaining: vec![capacity; experts], capacity, tokens_seen: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Router {
    pub experts: usize,
    pub capacity: usize,
    pub gate: GateKind,
    /// Seed of the random gate; ignored by the other gates.
    pub seed: u64,
}

fn mix(seed: u64, token_id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ token_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Index of the largest score; ties go to the lowest expert.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl Router {
    pub fn new(experts: usize, capacity: usize, gate: GateKind, seed: u64) -> Self {
        Router { experts, capacity, gate, seed }
    }

    fn check(&self, batch: &TokenBatch) -> Result<(), MoeError> {
        if self.capacity == 0 || self.experts == 0 {
            return Err(MoeError::InvalidConfig("experts and capacity must be ≥ 1".into()));
        }
        for t in &batch.tokens {
            if t.gate_scores.len() != self.experts {
                return Err(MoeError::ScoreLength { token: t.token_id, expected: self.experts, got: t.gate_scores.len() });
            }
        }
        Ok(())
    }

    /// Expert a token asks for, before capacity is applied.
    pub fn preferred_expert(&self, token: &Token) -> usize {
        match self.gate {
            GateKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, token.token_id as u64));
                rng.gen_range(0..self.experts)
            }
            GateKind::Switch | GateKind::BatchPrioritized => argmax(&token.gate_scores),
        }
    }

    /// Routes a whole batch with a fresh capacity budget.
    pub fn route_full(&self, batch: &TokenBatch) -> Result<RoutingResult, MoeError> {
        self.check(batch)?;
        let order: Vec<usize> = match self.gate {
            GateKind::BatchPrioritized => {
                let importance: Vec<f64> = batch.tokens.iter().map(|t| t.gate_scores[argmax(&t.gate_scores)]).collect();
                let mut idx: Vec<usize> = (0..batch.tokens.len()).collect();
                // stable: equal importance keeps batch order
                idx.sort_by(|&a, &b| importance[b].partial_cmp(&importance[a]).unwrap_or(std::cmp::Ordering::Equal));
                idx
            }
            GateKind::Switch | GateKind::Random => (0..batch.tokens.len()).collect(),
        };
        let mut state = CapacityState::full(self.experts, self.capacity);
        Ok(self.admit(batch, &order, &mut state))
    }

    fn admit(&self, batch: &TokenBatch, order: &[usize], state: &mut CapacityState) -> RoutingResult {
        let mut routes = vec![Route::Dropped; batch.tokens.len()];
        let mut admitted = vec![Vec::new(); self.experts];
        for &i in order {
            let tok = &batch.tokens[i];
            let e = self.preferred_expert(tok);
            if state.remaining[e] > 0 {
                let slot = state.capacity - state.remaining[e];
                state.remaining[e] -= 1;
                routes[i] = Route::Expert { expert: e, slot };
                admitted[e].push(tok.token_id);
            }
        }
        state.tokens_seen += batch.tokens.len();
        RoutingResult {
            routes,
            token_ids: batch.tokens.iter().map(|t| t.token_id).collect(),
            admitted,
            capacity: self.capacity,
        }
    }

    /// Routes one micro-batch against the running capacity state.
    pub fn route_step(&self, batch: &TokenBatch, state: &CapacityState) -> Result<(RoutingResult, CapacityState), MoeError> {
        if !self.gate.supports_micro_batching() {
            return Err(MoeError::UnsupportedGate(self.gate));
        }
        self.check(batch)?;
        if state.remaining.len() != self.experts || state.capacity != self.capacity {
            return Err(MoeError::InvalidConfig("capacity state does not match router".into()));
        }
        let mut next = state.clone();
        let order: Vec<usize> = (0..batch.tokens.len()).collect();
        let result = self.admit(batch, &order, &mut next);
        Ok((result, next))
    }

    /// Routes consecutive micro-batches, passing remaining capacity from
    /// each slice to the next.
    pub fn route_micro(
        &self,
        slices: &[TokenBatch],
        state: CapacityState,
    ) -> Result<(Vec<RoutingResult>, CapacityState), MoeError> {
        let mut state = state;
        let mut out = Vec::with_capacity(slices.len());
        for s in slices {
            let (r, next) = self.route_step(s, &state)?;
            out.push(r);
            state = next;
        }
        Ok((out, state))
    }

    /// Diagnostic: each slice routed independently with capacity `⌈C/k⌉`.
    pub fn route_naive(&self, slices: &[TokenBatch]) -> Result<Vec<RoutingResult>, MoeError> {
        let per = self.capacity.div_ceil(slices.len().max(1));
        let sub = Router { capacity: per, ..*self };
        slices.iter().map(|s| sub.route_full(s)).collect()
    }
}
