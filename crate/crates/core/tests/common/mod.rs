//! Checks shared by the unit-level test files and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tus_core::encoder::{
    assign_indices, build_input, encode_turn, FeatureLayout, InputSequence, RowKind, SlotList,
    TurnBlock,
};
use tus_core::nn::{example_loss, Example, NetConfig, Network};
use tus_core::{
    mark_fulfilled, DialogueAct, DialogueState, DomainGoal, DomainSpec, Ontology, SlotKey,
    SlotSpec, UserGoal,
};

macro_rules! check_eq {
    ($errs:ident, $a:expr, $b:expr $(,)?) => {{
        let (a, b) = (&$a, &$b);
        if a != b {
            $errs.push(format!(
                "{} != {}:\n  {:?}\n  {:?}",
                stringify!($a),
                stringify!($b),
                a,
                b
            ));
        }
    }};
}

// ---------------------------------------------------------------------------
// Golden feature example
// ---------------------------------------------------------------------------

pub fn slot(name: &str, values: &[&str]) -> SlotSpec {
    SlotSpec {
        name: name.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
        requestable: true,
    }
}

/// Two-domain ontology named after the worked hotel/restaurant example.
pub fn example_ontology() -> Ontology {
    let areas = ["north", "south", "east", "west", "centre"];
    Ontology::new(vec![
        DomainSpec {
            name: "hotel".into(),
            slots: vec![
                slot("area", &areas),
                slot("stars", &["3", "4", "5"]),
                slot("price", &["cheap", "moderate", "expensive"]),
                slot("name", &[]),
            ],
        },
        DomainSpec {
            name: "restaurant".into(),
            slots: vec![
                slot("food", &["chinese", "italian"]),
                slot("area", &areas),
                slot("addr", &[]),
            ],
        },
    ])
    .unwrap()
}

pub fn example_goal() -> UserGoal {
    UserGoal::new(vec![
        DomainGoal {
            domain: "hotel".into(),
            constraints: vec![("area".into(), "north".into())],
            requests: vec!["name".into()],
        },
        DomainGoal {
            domain: "restaurant".into(),
            constraints: vec![("food".into(), "chinese".into())],
            requests: vec!["addr".into()],
        },
    ])
}

/// Independent row builder: concatenates sub-vectors in field order.
#[allow(clippy::too_many_arguments)]
pub fn expected_row(
    user: [f64; 4],
    sys: [f64; 4],
    kind: [f64; 2],
    ful: f64,
    first: f64,
    spec: &[[f64; 3]; 9],
    gen: [f64; 5],
    action: [f64; 6],
    domain_idx: usize,
    slot_idx: usize,
) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend(user);
    v.extend(sys);
    v.extend(kind);
    v.push(ful);
    v.push(first);
    for s in spec {
        v.extend(s);
    }
    v.extend(gen);
    v.extend(action);
    let mut d = [0.0; 6];
    d[domain_idx] = 1.0;
    let mut s = [0.0; 10];
    s[slot_idx] = 1.0;
    v.extend(d);
    v.extend(s);
    v
}

pub const NONE3: [f64; 3] = [1.0, 0.0, 0.0];
pub const VAL_NONE: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
pub const VAL_REQ: [f64; 4] = [0.0, 1.0, 0.0, 0.0];
pub const VAL_OTHER: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

pub fn row_of<'a>(block: &'a TurnBlock, domain: &str, slot: &str) -> &'a [f64] {
    let key = SlotKey::new(domain, slot);
    &block
        .rows
        .iter()
        .find(|r| r.key == key)
        .unwrap_or_else(|| panic!("{key} missing from block"))
        .values
}

/// Runs the hotel/restaurant construction over turns 0 and 1 and returns
/// every field that differs from the hand-built rows.
pub fn golden_mismatches() -> Vec<String> {
    let mut errs = Vec::new();
    let o = example_ontology();
    let layout = FeatureLayout::for_ontology(&o, 6, 10);
    check_eq!(errs, layout.width(), 66);
    let mut goal = example_goal();
    let mut index = assign_indices(&goal, 6, 10).unwrap();
    let mut list = SlotList::in_goal_order(&goal);
    let mut state = DialogueState::new();

    // Turn 0: the user opens; nothing has been said by the system.
    state.apply_system_acts(&o, &[]).unwrap();
    list.observe_system_turn(&state, &mut index).unwrap();
    mark_fulfilled(&mut goal, &state);
    let slots0 = list.current(&state);
    check_eq!(errs, slots0.len(), 4);
    let block0 = encode_turn(&slots0, &goal, &state, &index, &layout, &o).unwrap();

    let empty_spec = [NONE3; 9];
    check_eq!(
        errs,
        row_of(&block0, "hotel", "area"),
        expected_row(
            VAL_OTHER,
            VAL_NONE,
            [1.0, 0.0],
            0.0,
            0.0,
            &empty_spec,
            [0.0; 5],
            [0.0; 6],
            0,
            0
        )
    );
    check_eq!(
        errs,
        row_of(&block0, "hotel", "name"),
        expected_row(
            VAL_REQ,
            VAL_NONE,
            [0.0, 1.0],
            0.0,
            0.0,
            &empty_spec,
            [0.0; 5],
            [0.0; 6],
            0,
            1
        )
    );
    check_eq!(
        errs,
        row_of(&block0, "restaurant", "addr"),
        expected_row(
            VAL_REQ,
            VAL_NONE,
            [0.0, 1.0],
            0.0,
            0.0,
            &empty_spec,
            [0.0; 5],
            [0.0; 6],
            1,
            1
        )
    );

    let area = SlotKey::new("hotel", "area");
    let outputs: BTreeMap<SlotKey, usize> = slots0
        .iter()
        .map(|k| (k.clone(), if *k == area { 3 } else { 0 }))
        .collect();
    state
        .record_user_acts(&o, &[DialogueAct::inform(&area, "north")], outputs)
        .unwrap();

    // Turn 1: recommend a south hotel, ask for the price, offer more help.
    state
        .apply_system_acts(
            &o,
            &[
                DialogueAct::new("recommend", "hotel", "area", "south"),
                DialogueAct::new("request", "hotel", "price", "?"),
                DialogueAct::general("reqmore"),
            ],
        )
        .unwrap();
    list.observe_system_turn(&state, &mut index).unwrap();
    mark_fulfilled(&mut goal, &state);
    let slots1 = list.current(&state);
    check_eq!(errs, slots1.len(), slots0.len() + 1);
    check_eq!(
        errs,
        index.get(&SlotKey::new("hotel", "price")),
        Some((0, 2))
    );
    let block1 = encode_turn(&slots1, &goal, &state, &index, &layout, &o).unwrap();

    let mut area_spec = [NONE3; 9];
    area_spec[0] = [0.0, 0.0, 1.0];
    let reqmore = [0.0, 1.0, 0.0, 0.0, 0.0];
    check_eq!(
        errs,
        row_of(&block1, "hotel", "area"),
        expected_row(
            VAL_OTHER,
            VAL_OTHER,
            [1.0, 0.0],
            0.0,
            1.0,
            &area_spec,
            reqmore,
            [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            0,
            0
        )
    );

    let mut price_spec = [NONE3; 9];
    price_spec[2] = [0.0, 1.0, 0.0];
    check_eq!(
        errs,
        row_of(&block1, "hotel", "price"),
        expected_row(
            VAL_NONE,
            VAL_REQ,
            [0.0, 0.0],
            0.0,
            1.0,
            &price_spec,
            reqmore,
            [0.0; 6],
            0,
            2
        )
    );

    // Untouched slots keep their index and carry the previous none output.
    check_eq!(
        errs,
        row_of(&block1, "restaurant", "food"),
        expected_row(
            VAL_OTHER,
            VAL_NONE,
            [1.0, 0.0],
            0.0,
            0.0,
            &empty_spec,
            reqmore,
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            1,
            0
        )
    );

    // Newest turn first, each block closed by SEP.
    let seq = build_input(&[&block0, &block1], 3, layout.width());
    check_eq!(errs, seq.len(), 1 + 5 + 1 + 4 + 1);
    check_eq!(errs, seq.kinds[0], RowKind::Cls);
    check_eq!(errs, seq.kinds[6], RowKind::Sep);
    check_eq!(errs, seq.kinds[11], RowKind::Sep);
    check_eq!(errs, seq.current, vec![1, 2, 3, 4, 5]);
    check_eq!(errs, seq.slots, slots1);
    // The user-mentioned slot moves to the front of the turn-1 list.
    check_eq!(errs, slots1[0], area);
    errs
}

// ---------------------------------------------------------------------------
// Network fixtures, loss oracle and gradient check
// ---------------------------------------------------------------------------

pub fn small_config(d_model: usize, heads: usize, l_d: usize) -> NetConfig {
    NetConfig {
        d_model,
        n_layers: 2,
        n_heads: heads,
        ff_dim: 2 * d_model,
        dropout: 0.0,
        domain_head_dim: l_d,
        seed: 17,
        ..NetConfig::default()
    }
}

pub fn random_sequence(
    rng: &mut ChaCha8Rng,
    width: usize,
    n_current: usize,
    n_prev: usize,
) -> InputSequence {
    let mut kinds = vec![RowKind::Cls];
    let mut features = vec![0.0; width];
    let mut current = Vec::new();
    let mut slots = Vec::new();
    for (block, n) in [n_current, n_prev].into_iter().enumerate() {
        for i in 0..n {
            if block == 0 {
                current.push(kinds.len());
                slots.push(SlotKey::new("d", format!("s{i}")));
            }
            kinds.push(RowKind::Slot);
            features.extend((0..width).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }));
        }
        kinds.push(RowKind::Sep);
        features.extend(std::iter::repeat_n(0.0, width));
    }
    InputSequence {
        width,
        kinds,
        features,
        current,
        slots,
    }
}

pub fn random_example(rng: &mut ChaCha8Rng, layout: &FeatureLayout, n: usize, m: usize) -> Example {
    let input = random_sequence(rng, layout.width(), n, m);
    Example {
        targets: (0..n).map(|_| rng.gen_range(0..6)).collect(),
        domain_targets: (0..layout.l_d).map(|_| rng.gen_range(0..2)).collect(),
        input,
    }
}

/// Independent calculator: softmax probabilities by explicit exponentials,
/// BCE through the probability.
pub fn oracle_loss(logits: &[[f64; 6]], targets: &[usize], dom: &[f64], dom_t: &[f64]) -> f64 {
    let mut ce = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        ce += -(row[t].exp() / z).ln();
    }
    ce /= targets.len() as f64;
    let mut bce = 0.0;
    for (&l, &y) in dom.iter().zip(dom_t) {
        let p = 1.0 / (1.0 + (-l).exp());
        bce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    ce + bce / dom.len() as f64
}

pub const LOSS_LOGITS: [[f64; 6]; 2] = [
    [0.2, -1.0, 0.5, 1.5, 0.0, -0.3],
    [2.0, 0.1, -0.4, 0.3, 0.9, -2.0],
];
pub const LOSS_TARGETS: [usize; 2] = [3, 0];
pub const LOSS_DOMAIN_LOGITS: [f64; 2] = [0.7, -1.2];
pub const LOSS_DOMAIN_TARGETS: [u8; 2] = [1, 0];

/// Absolute errors of the library loss on the 2-slot fixture against the
/// oracle, and of the uniform-logit slot loss against ln 6.
pub fn loss_oracle_errors() -> (f64, f64) {
    let a = ndarray::Array2::from_shape_vec((2, 6), LOSS_LOGITS.concat()).unwrap();
    let d = ndarray::Array1::from(LOSS_DOMAIN_LOGITS.to_vec());
    let (sl, dl) = example_loss(&a, &LOSS_TARGETS, &d, &LOSS_DOMAIN_TARGETS).unwrap();
    let dom_t: Vec<f64> = LOSS_DOMAIN_TARGETS.iter().map(|&y| y as f64).collect();
    let expect = oracle_loss(&LOSS_LOGITS, &LOSS_TARGETS, &LOSS_DOMAIN_LOGITS, &dom_t);
    let uniform = ndarray::Array2::zeros((3, 6));
    let (ul, _) = example_loss(&uniform, &[0, 1, 5], &d, &LOSS_DOMAIN_TARGETS).unwrap();
    ((sl + dl - expect).abs(), (ul - 6f64.ln()).abs())
}

pub struct GradCheck {
    /// Largest relative error over entries whose gradient is not tiny.
    pub worst: f64,
    pub failures: Vec<String>,
    pub tensors: BTreeSet<String>,
}

/// Central differences over every parameter of a d_model=8, 2-layer,
/// 2-head network on a small random batch.
pub fn gradient_check() -> GradCheck {
    let layout = FeatureLayout::new(5, 9, 3, 4);
    let mut net = Network::new(small_config(8, 2, 3), layout).unwrap();
    // Move LayerNorm gains and biases off their initial values so their
    // gradients are exercised in a generic position.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for x in net.params.data.iter_mut() {
        *x += rng.gen_range(-0.05..0.05);
    }
    let examples: Vec<Example> = (0..3)
        .map(|i| random_example(&mut rng, &layout, 2 + i, 3))
        .collect();
    let batch: Vec<&Example> = examples.iter().collect();
    let (_, grads) = net.loss_and_grad(&batch, None::<&mut ChaCha8Rng>).unwrap();

    let h = 1e-5;
    let mut out = GradCheck {
        worst: 0.0,
        failures: Vec::new(),
        tensors: BTreeSet::new(),
    };
    for spec in net.params.specs.clone() {
        for i in spec.range() {
            let orig = net.params.data[i];
            net.params.data[i] = orig + h;
            let plus = net.loss(&batch).unwrap().loss;
            net.params.data[i] = orig - h;
            let minus = net.loss(&batch).unwrap().loss;
            net.params.data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.data[i];
            let scale = analytic.abs().max(numeric.abs());
            let err = (analytic - numeric).abs();
            if err > 1e-4 * scale + 1e-8 {
                out.failures.push(format!(
                    "{}[{}]: analytic {analytic:e}, numeric {numeric:e}",
                    spec.name,
                    i - spec.offset
                ));
            }
            if scale > 1e-6 {
                out.worst = out.worst.max(err / scale);
            }
        }
        out.tensors.insert(spec.name.clone());
    }
    out
}
