//! Golden feature construction and encoder invariants.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tus_core::encoder::{
    assign_indices, build_input, encode_turn, FeatureLayout, SlotList, TurnBlock,
};
use tus_core::goal::{sample_goal, GoalConfig};
use tus_core::{mark_fulfilled, DialogueAct, DialogueState, Ontology, UserGoal};

#[test]
fn golden_two_turn_example() {
    let errs = common::golden_mismatches();
    assert!(errs.is_empty(), "{}", errs.join("\n"));
}

fn check_row(row: &[f64], layout: &FeatureLayout) {
    let sum = |r: &[f64]| r.iter().sum::<f64>();
    assert_eq!(row.len(), layout.width());
    assert!(row.iter().all(|&x| x == 0.0 || x == 1.0));
    assert_eq!(sum(&row[0..4]), 1.0);
    assert_eq!(sum(&row[4..8]), 1.0);
    assert!(sum(&row[8..10]) <= 1.0);
    for j in 0..layout.n_spec {
        let off = layout.spec_offset(j);
        assert_eq!(sum(&row[off..off + 3]), 1.0);
    }
    let ua = layout.user_action_offset();
    assert!(sum(&row[ua..ua + 6]) <= 1.0);
    if layout.index_features {
        let d = layout.domain_index_offset();
        assert_eq!(sum(&row[d..d + layout.l_d]), 1.0);
        let s = layout.slot_index_offset();
        assert_eq!(sum(&row[s..s + layout.l_s]), 1.0);
    }
}

/// A random system turn built from the goal's domains and ontology values.
fn system_turn(
    o: &Ontology,
    goal: &UserGoal,
    picks: &[(usize, usize, usize, usize)],
) -> Vec<DialogueAct> {
    let mut acts = Vec::new();
    for &(d, s, intent, v) in picks {
        let domains: Vec<&str> = goal.domain_names().collect();
        let domain = o.domain(domains[d % domains.len()]).unwrap();
        let spec = &domain.slots[s % domain.slots.len()];
        match intent % 4 {
            0 => acts.push(DialogueAct::general(&o.general_intents[v % o.n_gen()])),
            1 if spec.informable() => {
                acts.push(DialogueAct::new("request", &domain.name, &spec.name, "?"))
            }
            _ if spec.informable() => acts.push(DialogueAct::new(
                &o.domain_specific_intents[v % 2 * 3],
                &domain.name,
                &spec.name,
                &spec.values[v % spec.values.len()],
            )),
            _ => {}
        }
    }
    acts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoded_rows_keep_width_and_one_hot_discipline(
        seed in any::<u64>(),
        index_features in any::<bool>(),
        turns in prop::collection::vec(prop::collection::vec((0usize..4, 0usize..6, 0usize..4, 0usize..9), 0..4), 1..5),
    ) {
        let o = Ontology::toy();
        let layout = FeatureLayout::for_ontology(&o, 6, 10).with_index_features(index_features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut goal = sample_goal(&o, &mut rng, &GoalConfig::default()).unwrap();
        let mut index = assign_indices(&goal, 6, 10).unwrap();
        let mut list = SlotList::shuffled(&goal, &mut rng);
        let mut state = DialogueState::new();
        let mut blocks: Vec<TurnBlock> = Vec::new();
        let mut first_index = BTreeMap::new();
        for (t, picks) in turns.iter().enumerate() {
            let sys = if t == 0 { Vec::new() } else { system_turn(&o, &goal, picks) };
            state.apply_system_acts(&o, &sys).unwrap();
            list.observe_system_turn(&state, &mut index).unwrap();
            mark_fulfilled(&mut goal, &state);
            let slots = list.current(&state);
            let block = encode_turn(&slots, &goal, &state, &index, &layout, &o).unwrap();
            for row in &block.rows {
                check_row(&row.values, &layout);
                // Index stability across turns.
                let idx = index.get(&row.key).unwrap();
                prop_assert_eq!(*first_index.entry(row.key.clone()).or_insert(idx), idx);
            }
            // The user informs the first slot of the list when it is a constraint.
            let mut outputs = BTreeMap::new();
            let mut acts = Vec::new();
            for k in &slots {
                let class = match goal.constraint_value(k) {
                    Some(v) if acts.is_empty() => {
                        acts.push(DialogueAct::inform(k, v));
                        3
                    }
                    _ => 0,
                };
                outputs.insert(k.clone(), class);
            }
            state.record_user_acts(&o, &acts, outputs).unwrap();
            blocks.push(block);
        }
        // No lookahead: re-encoding a prefix never changes earlier blocks'
        // row count, and the last block's rows lead the sequence.
        let refs: Vec<&TurnBlock> = blocks.iter().collect();
        let seq = build_input(&refs, 3, layout.width());
        let kept: usize = refs.iter().rev().take(3).map(|b| b.rows.len() + 1).sum();
        prop_assert_eq!(seq.len(), 1 + kept);
        let last = blocks.last().unwrap();
        for (i, &pos) in seq.current.iter().enumerate() {
            prop_assert_eq!(seq.row(pos), last.rows[i].values.as_slice());
        }
    }

    #[test]
    fn earlier_blocks_ignore_later_turns(seed in any::<u64>(), value in 0usize..5) {
        // Encoding turn 0 before and after a later system turn gives the same rows.
        let o = Ontology::toy();
        let layout = FeatureLayout::for_ontology(&o, 6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut goal = sample_goal(&o, &mut rng, &GoalConfig::default()).unwrap();
        let mut index = assign_indices(&goal, 6, 10).unwrap();
        let mut list = SlotList::in_goal_order(&goal);
        let mut state = DialogueState::new();
        state.apply_system_acts(&o, &[]).unwrap();
        mark_fulfilled(&mut goal, &state);
        let before = encode_turn(&list.current(&state), &goal, &state, &index, &layout, &o).unwrap();

        let mut later = state.clone();
        later.record_user_acts(&o, &[], BTreeMap::new()).unwrap();
        let d = goal.domains[0].domain.clone();
        let area = o.domain(&d).unwrap().slots[0].clone();
        later.apply_system_acts(&o, &[DialogueAct::new("inform", &d, &area.name, &area.values[value % area.values.len()])]).unwrap();
        list.observe_system_turn(&later, &mut index).unwrap();
        let replay = encode_turn(&before.slots().cloned().collect::<Vec<_>>(), &goal, &state, &index, &layout, &o).unwrap();
        prop_assert_eq!(before, replay);
    }
}
