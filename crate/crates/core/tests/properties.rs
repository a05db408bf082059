mod common;

use moe_overlap::ir::{build_dependency_graph, validate, GateKind, Lane, Program};
use moe_overlap::moe::{even_sizes, CapacityState, Router, RoutingResult, Token, TokenBatch};
use moe_overlap::sched_dw::{greedy_with_costs, label_overlappable, reorder};
use moe_overlap::sim::{decompose, timeline_from_costs};
use moe_overlap::Time;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{event_queue_sim, random_costs, random_program};

fn program(seed: u64, n: usize) -> (Program, Vec<Time>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_program(&mut rng, n);
    let c = random_costs(&mut rng, n);
    (p, c)
}

/// Transitive closure by Floyd–Warshall over direct def/use edges.
fn closure(p: &Program) -> Vec<Vec<bool>> {
    let n = p.len();
    let mut r = vec![vec![false; n]; n];
    for (j, b) in p.instructions.iter().enumerate() {
        for (i, a) in p.instructions.iter().enumerate().take(j) {
            if a.outputs.iter().any(|t| b.inputs.contains(t)) {
                r[i][j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if r[i][k] {
                for j in 0..n {
                    if r[k][j] {
                        r[i][j] = true;
                    }
                }
            }
        }
    }
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reachability_matches_floyd_warshall(seed in any::<u64>(), n in 1usize..30) {
        let (p, _) = program(seed, n);
        let g = build_dependency_graph(&p).unwrap();
        let r = closure(&p);
        for a in 0..n {
            let desc = g.descendants(a);
            let anc = g.ancestors(a);
            for b in 0..n {
                prop_assert_eq!(g.reachable(a, b), r[a][b]);
                prop_assert_eq!(desc[b], r[a][b]);
                prop_assert_eq!(anc[b], r[b][a]);
            }
        }
    }

    #[test]
    fn reorder_keeps_every_dependency(seed in any::<u64>(), n in 1usize..40) {
        let (p, costs) = program(seed, n);
        let g = build_dependency_graph(&p).unwrap();
        let sets = label_overlappable(&p, &g);
        let a = greedy_with_costs(&sets, &costs);
        prop_assert!(a.is_feasible(&sets));
        let q = reorder(&p, &a);
        prop_assert!(validate(&q).is_empty());
        prop_assert_eq!(q.len(), p.len());
        let mut before: Vec<String> = p.instructions.iter().map(|i| format!("{:?}{:?}{:?}", i.op, i.inputs, i.outputs)).collect();
        let mut after: Vec<String> = q.instructions.iter().map(|i| format!("{:?}{:?}{:?}", i.op, i.inputs, i.outputs)).collect();
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
        // Each assigned dW follows its all-to-all directly or inside its group.
        let pos = |orig: usize| q.instructions.iter().position(|i| i.outputs == p.instructions[orig].outputs).unwrap();
        for pair in &a.pairs {
            prop_assert!(pos(pair.dw_index) > pos(pair.a2a_index));
        }
    }

    #[test]
    fn timeline_matches_event_queue(seed in any::<u64>(), n in 1usize..50) {
        let (p, costs) = program(seed, n);
        let tl = timeline_from_costs(&p, &costs);
        let got: Vec<_> = tl.entries.iter().map(|e| (e.start, e.end)).collect();
        prop_assert_eq!(got, event_queue_sim(&p, &costs));
    }

    #[test]
    fn breakdown_partitions_the_iteration(seed in any::<u64>(), n in 1usize..50) {
        let (p, costs) = program(seed, n);
        let tl = timeline_from_costs(&p, &costs);
        let b = decompose(&tl);
        prop_assert_eq!(b.non_overlapped_compute + b.non_overlapped_comm + b.overlapped, b.iteration_time);
        prop_assert!(b.overlapped <= tl.lane_busy(Lane::Compute).min(tl.lane_busy(Lane::Network)));
        prop_assert!(b.idle <= b.non_overlapped_compute);
        prop_assert!(b.iteration_time >= tl.lane_busy(Lane::Compute).max(tl.lane_busy(Lane::Network)));
    }

    #[test]
    fn doubling_costs_doubles_the_timeline(seed in any::<u64>(), n in 1usize..30) {
        let (p, costs) = program(seed, n);
        let doubled: Vec<Time> = costs.iter().map(|&c| c + c).collect();
        let a = timeline_from_costs(&p, &costs);
        let b = timeline_from_costs(&p, &doubled);
        prop_assert_eq!(a.iteration_time + a.iteration_time, b.iteration_time);
    }

    #[test]
    fn program_json_round_trips(seed in any::<u64>(), n in 1usize..20) {
        let (p, _) = program(seed, n);
        prop_assert_eq!(Program::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn even_sizes_sum_and_balance(n in 0usize..1000, k in 1usize..9) {
        let s = even_sizes(n, k);
        prop_assert_eq!(s.len(), k);
        prop_assert_eq!(s.iter().sum::<usize>(), n);
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn micro_routing_equals_full(seed in any::<u64>(), experts in 1usize..9, n in 1usize..200, cap in 1usize..40, random in any::<bool>(), cuts in prop::collection::vec(0usize..200, 0..3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..n).map(|i| Token { token_id: i, sequence_id: 0, gate_scores: (0..experts).map(|_| rng.gen_range(0.0..1.0)).collect() }).collect();
        let batch = TokenBatch { tokens, batch: 1, seq: n };
        let gate = if random { GateKind::Random } else { GateKind::Switch };
        let router = Router::new(experts, cap, gate, seed);
        let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c.min(n)).collect();
        cuts.sort_unstable();
        let (parts, state) = router.route_micro(&batch.split_at(&cuts), CapacityState::full(experts, cap)).unwrap();
        let full = router.route_full(&batch).unwrap();
        let micro = RoutingResult::concat(&parts);
        prop_assert_eq!(&micro.routes, &full.routes);
        prop_assert_eq!(&micro.admitted, &full.admitted);
        prop_assert_eq!(state.tokens_seen, n);
        prop_assert_eq!(state.remaining.iter().map(|r| cap - r).sum::<usize>(), full.admitted_count());
    }
}

#[test]
fn batch_prioritized_refuses_micro_batches() {
    let batch = TokenBatch { tokens: vec![Token { token_id: 0, sequence_id: 0, gate_scores: vec![1.0] }], batch: 1, seq: 1 };
    let router = Router::new(1, 1, GateKind::BatchPrioritized, 0);
    assert!(router.route_micro(&[batch], CapacityState::full(1, 1)).is_err());
}
