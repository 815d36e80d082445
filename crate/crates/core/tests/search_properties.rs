mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use meshcov::callgraph::{coverage_status, CoverageEvent};
use meshcov::faults::{validate_plan, FaultPlan};
use meshcov::mesh_sim::{extract_events, run_scenario};
use meshcov::orchestrator::Inputs;
use meshcov::search::{
    propose, should_stop, update, Annotation, Candidate, Greedy, SearchSpace, SearchState, StopConfig,
    Strategy as _,
};

fn space(inputs: &Inputs) -> SearchSpace {
    let mut footprints = Vec::new();
    let mut traversed = std::collections::BTreeMap::new();
    for s in &inputs.scenarios {
        let t = run_scenario(&inputs.app, s, &FaultPlan::new(), &inputs.app.placement, 0).expect("baseline");
        footprints.push(t.footprint());
        traversed.insert(s.id.clone(), t.traversed_edges());
    }
    SearchSpace {
        graph: inputs.app.graph.clone(),
        footprints,
        traversed,
        caller_timeouts: inputs
            .app
            .apis()
            .map(|a| (a.clone(), inputs.app.endpoint(a).expect("api").timeout_ms))
            .collect(),
    }
}

fn execute(inputs: &Inputs, c: &Candidate) -> BTreeSet<CoverageEvent> {
    let t = inputs.execute(c).expect("candidate runs");
    extract_events(&t, &c.plan)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn proposals_are_valid_and_fraction_is_monotone(
        seed in any::<u64>(),
        batch in 1usize..10,
        epsilon in 0.0f64..=1.0,
        rounds in 1usize..6,
    ) {
        let inputs = common::demo();
        let space = space(&inputs);
        let strategy = Greedy { epsilon };
        let mut state = SearchState::new(1, seed);
        let ids: BTreeSet<&str> = inputs.scenarios.iter().map(|s| s.id.as_str()).collect();
        for _ in 0..rounds {
            let proposal = strategy.propose(&state, &space, batch).expect("propose");
            prop_assert!(proposal.candidates.len() <= batch);
            for c in &proposal.candidates {
                prop_assert!(validate_plan(&c.plan, &inputs.app.graph).is_ok());
                prop_assert!(ids.contains(c.scenario.as_str()));
                if let Annotation::Target(target) = &c.annotation {
                    prop_assert_eq!(&target.test, &c.scenario);
                    prop_assert!(c.plan.rules.contains_key(&target.edge));
                }
            }
            for t in &proposal.unreachable {
                prop_assert!(!space.traversed[&t.test].contains(&t.edge));
            }
            let executed: Vec<_> = proposal
                .candidates
                .iter()
                .map(|c| (c.clone(), execute(&inputs, c)))
                .collect();
            let next = update(&state, &space, &executed).expect("update");
            prop_assert_eq!(next.round, state.round + 1);
            prop_assert!(next.best_fraction >= state.best_fraction);
            let recomputed = coverage_status(&next.ledger, &space.graph, &space.footprints, 1)
                .expect("coverage")
                .fraction;
            prop_assert!(recomputed >= state.best_fraction);
            state = next;
        }
    }

    #[test]
    fn proposals_are_reproducible(seed in any::<u64>()) {
        let inputs = common::demo();
        let space = space(&inputs);
        let state = SearchState::new(1, seed);
        prop_assert_eq!(propose(&state, &space, 8).unwrap().candidates, propose(&state, &space, 8).unwrap().candidates);
    }
}

#[test]
fn empty_batch_only_advances_round() {
    let inputs = common::demo();
    let space = space(&inputs);
    let state = SearchState::new(1, 9);
    let next = update(&state, &space, &[]).unwrap();
    assert_eq!(next.round, 1);
    assert_eq!(next.ledger, state.ledger);
    assert_eq!(next.best_fraction, state.best_fraction);
    assert_eq!(next.streak, state.streak);
}

#[test]
fn stop_conditions() {
    let cfg = StopConfig { target: 0.9, patience: 3, max_rounds: 10 };
    let mut s = SearchState::new(1, 0);
    assert!(!should_stop(&s, &cfg));
    s.best_fraction = 0.9;
    assert!(should_stop(&s, &cfg));
    s.best_fraction = 0.0;
    s.streak = 3;
    assert!(should_stop(&s, &cfg));
    s.streak = 0;
    s.round = 10;
    assert!(should_stop(&s, &cfg));
}

#[test]
fn greedy_reaches_full_demo_coverage() {
    let inputs = common::demo();
    let space = space(&inputs);
    let mut state = SearchState::new(1, 42);
    let cfg = StopConfig::default();
    while !should_stop(&state, &cfg) {
        let proposal = propose(&state, &space, 8).unwrap();
        let executed: Vec<_> = proposal
            .candidates
            .iter()
            .map(|c| (c.clone(), execute(&inputs, c)))
            .collect();
        state = update(&state, &space, &executed).unwrap();
    }
    assert_eq!(state.best_fraction, 1.0, "stalled after {} rounds", state.round);
}
