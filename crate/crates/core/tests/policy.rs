//! Reward accounting, rollouts and PPO training of the system policy.

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tus_core::abus::AgendaUser;
use tus_core::db::sample_db_goal;
use tus_core::db::EntityDb;
use tus_core::rl::{
    evaluate_policy, masked_softmax, train_policy, Decider, Policy, PolicyAction, PolicyEnv,
    PpoConfig, SystemView,
};
use tus_core::sim::{run_dialogue, SimError, SystemAgent, UserSimulator};
use tus_core::{DialogueAct, Ontology};

fn fixture() -> (Arc<Ontology>, Arc<EntityDb>) {
    let o = Arc::new(Ontology::toy());
    let db = Arc::new(EntityDb::generate(
        &o,
        20,
        &mut ChaCha8Rng::seed_from_u64(1),
    ));
    (o, db)
}

fn abus(o: &Arc<Ontology>) -> impl Fn() -> Box<dyn UserSimulator> + Sync + '_ {
    move || Box::new(AgendaUser::new(o.clone())) as Box<dyn UserSimulator>
}

#[test]
fn every_return_is_eighty_or_minus_forty_less_turns() {
    let (o, db) = fixture();
    let env = PolicyEnv::new(o.clone(), db);
    let report = evaluate_policy(&env, &abus(&o), &Decider::Random, 500, 7).unwrap();
    assert_eq!(report.episodes.len(), 500);
    for e in &report.episodes {
        let t = e.turns as f64;
        let expected = if e.success { 80.0 - t } else { -40.0 - t };
        assert_eq!(e.ret, expected, "{}", e.id);
        assert!(e.turns <= 40);
    }
    assert!(report.episodes.iter().any(|e| e.success));
    assert!(report.episodes.iter().any(|e| !e.success));
}

/// Says goodbye at once.
struct Farewell;

impl SystemAgent for Farewell {
    fn name(&self) -> &str {
        "farewell"
    }
    fn start(&mut self, _seed: u64) {}
    fn step(&mut self, _user: &[DialogueAct]) -> Result<Vec<DialogueAct>, SimError> {
        Ok(vec![DialogueAct::general("bye")])
    }
}

/// Hand-written policy over the same action space as the learned one:
/// answer the oldest pending request, otherwise ask for more.
struct Scripted {
    ontology: Arc<Ontology>,
    db: Arc<EntityDb>,
    view: SystemView,
}

impl Scripted {
    fn new(ontology: Arc<Ontology>, db: Arc<EntityDb>) -> Self {
        let layout = PolicyEnv::new(ontology.clone(), db.clone()).layout;
        let view = SystemView::new(ontology.clone(), db.clone(), layout);
        Self { ontology, db, view }
    }
}

impl SystemAgent for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }
    fn start(&mut self, _seed: u64) {
        self.view = SystemView::new(self.ontology.clone(), self.db.clone(), self.view.layout);
    }
    fn step(&mut self, user: &[DialogueAct]) -> Result<Vec<DialogueAct>, SimError> {
        self.view.observe_user(user);
        let mask = self.view.mask();
        let layout = self.view.layout;
        let mut action = PolicyAction::Reqmore;
        if let Some((d, s)) = self.view.pending.iter().next() {
            let di = self.view.domains.iter().position(|x| x == d);
            let si = self.ontology.domain(d).and_then(|spec| spec.slot_index(s));
            if let (Some(domain), Some(slot)) = (di, si) {
                let candidates = [
                    PolicyAction::Inform { domain, slot },
                    PolicyAction::Book { domain },
                    PolicyAction::Recommend { domain },
                ];
                if let Some(a) = candidates
                    .into_iter()
                    .find(|&a| mask[layout.action_index(a)])
                {
                    action = a;
                }
            }
        }
        Ok(self.view.execute(action))
    }
}

fn run_against_abus(system: &mut dyn SystemAgent, n: usize, unsat_prob: f64) -> (usize, usize) {
    let (o, db) = fixture();
    let env = PolicyEnv::new(o.clone(), db.clone());
    let mut successes = 0;
    let mut completed = 0;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let goal = sample_db_goal(&o, &db, &mut rng, &env.goal, unsat_prob).unwrap();
        let mut user = AgendaUser::new(o.clone());
        let out = run_dialogue(
            &format!("t{i}"),
            &o,
            &db,
            &mut user,
            system,
            goal,
            i as u64,
            40,
        )
        .unwrap();
        successes += out.success as usize;
        completed += out.completed as usize;
    }
    (successes, completed)
}

#[test]
fn immediate_goodbye_never_succeeds() {
    let (successes, completed) = run_against_abus(&mut Farewell, 100, 0.0);
    assert_eq!(successes, 0);
    assert_eq!(completed, 100);
}

#[test]
fn scripted_policy_serves_satisfiable_goals() {
    let (o, db) = fixture();
    let mut agent = Scripted::new(o, db);
    let (successes, _) = run_against_abus(&mut agent, 200, 0.0);
    assert!(successes >= 190, "scripted success {successes}/200");
}

fn small_config(epochs: usize, seed: u64) -> PpoConfig {
    PpoConfig {
        epochs,
        dialogues_per_epoch: 40,
        seed,
        ..PpoConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initial_policy() {
    let (o, db) = fixture();
    let env = PolicyEnv::new(o.clone(), db);
    let (policy, curve) = train_policy(&env, &abus(&o), &small_config(0, 5), |_, _| {}).unwrap();
    assert!(curve.is_empty());
    assert_eq!(policy, Policy::new(env.layout, 128, 5));
}

#[test]
fn training_is_deterministic_per_seed() {
    let (o, db) = fixture();
    let env = PolicyEnv::new(o.clone(), db);
    let (a, ca) = train_policy(&env, &abus(&o), &small_config(2, 3), |_, _| {}).unwrap();
    let (b, cb) = train_policy(&env, &abus(&o), &small_config(2, 3), |_, _| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = train_policy(&env, &abus(&o), &small_config(2, 4), |_, _| {}).unwrap();
    assert_ne!(a, c);
}

#[test]
fn policy_checkpoint_round_trips() {
    let (o, _) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    let layout = PolicyEnv::new(o.clone(), fixture().1).layout;
    let policy = Policy::new(layout, 16, 9);
    policy
        .save(&path, &o.fingerprint(), serde_json::json!({"seed": 9}))
        .unwrap();
    let (back, extra) = Policy::load(&path, &o.fingerprint()).unwrap();
    assert_eq!(back, policy);
    assert_eq!(extra["seed"], 9);
    assert!(Policy::load(&path, "other").is_err());
}

#[test]
fn invalid_config_is_rejected() {
    let (o, db) = fixture();
    let env = PolicyEnv::new(o.clone(), db);
    let config = PpoConfig {
        clip: 1.5,
        ..small_config(1, 0)
    };
    assert!(train_policy(&env, &abus(&o), &config, |_, _| {}).is_err());
}

proptest! {
    #[test]
    fn masked_distribution_sums_to_one(
        logits in prop::collection::vec(-30.0f64..30.0, 1..40),
        bits in prop::collection::vec(any::<bool>(), 40),
    ) {
        let mut mask: Vec<bool> = bits[..logits.len()].to_vec();
        mask[0] = true;
        let p = masked_softmax(&logits, &mask);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (pi, m) in p.iter().zip(&mask) {
            prop_assert!(*pi >= 0.0);
            if !m {
                prop_assert_eq!(*pi, 0.0);
            }
        }
    }

    #[test]
    fn policy_distribution_respects_the_mask(seed in any::<u64>()) {
        let (o, db) = fixture();
        let layout = PolicyEnv::new(o.clone(), db.clone()).layout;
        let policy = Policy::new(layout, 8, seed);
        let mut view = SystemView::new(o, db, layout);
        view.observe_user(&[DialogueAct::new("inform", "eatery", "food", "italian")]);
        let mask = view.mask();
        let p = policy.distribution(&view.features(), &mask);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().zip(&mask).all(|(pi, m)| *m || *pi == 0.0));
    }
}
