//! Corpus-fit metrics under teacher forcing.

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_corpus, Corpus, EncodedCorpus};
use crate::encoder::{build_input, InputSequence, TurnBlock};
use crate::nn::{NetError, Network};
use crate::ontology::Ontology;
use crate::tus::{gated_classes, DecodePolicy};

/// Predicted and target classes for one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn: usize,
    pub predicted: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusFitReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub turn_accuracy: f64,
    pub slot_accuracy: f64,
    /// Mean number of non-none predictions in the first turn.
    pub len: f64,
    /// The same count on the targets.
    pub target_len: f64,
    /// Mean number of non-none predictions at each turn index.
    pub length_curve: Vec<f64>,
    pub target_length_curve: Vec<f64>,
    pub n_turns: usize,
}

impl CorpusFitReport {
    pub fn is_finite(&self) -> bool {
        [
            self.precision,
            self.recall,
            self.f1,
            self.turn_accuracy,
            self.slot_accuracy,
            self.len,
            self.target_len,
        ]
        .iter()
        .chain(&self.length_curve)
        .all(|x| x.is_finite())
    }

    /// Metrics from logged predictions. An empty input gives all zeros.
    pub fn from_predictions(preds: &[TurnPrediction]) -> Self {
        let mut tp = 0usize;
        let mut n_pred = 0usize;
        let mut n_target = 0usize;
        let mut correct_turns = 0usize;
        let mut correct_slots = 0usize;
        let mut n_slots = 0usize;
        let mut first = (0usize, 0usize, 0usize);
        let mut curve: Vec<(usize, usize, usize)> = Vec::new();
        for p in preds {
            debug_assert_eq!(p.predicted.len(), p.targets.len());
            let mut all = true;
            for (&y, &t) in p.predicted.iter().zip(&p.targets) {
                n_slots += 1;
                if y == t {
                    correct_slots += 1;
                } else {
                    all = false;
                }
                if y != 0 {
                    n_pred += 1;
                    if y == t {
                        tp += 1;
                    }
                }
                if t != 0 {
                    n_target += 1;
                }
            }
            if all {
                correct_turns += 1;
            }
            let len_pred = p.predicted.iter().filter(|&&c| c != 0).count();
            let len_target = p.targets.iter().filter(|&&c| c != 0).count();
            if p.turn == 0 {
                first.0 += 1;
                first.1 += len_pred;
                first.2 += len_target;
            }
            if curve.len() <= p.turn {
                curve.resize(p.turn + 1, (0, 0, 0));
            }
            let c = &mut curve[p.turn];
            c.0 += 1;
            c.1 += len_pred;
            c.2 += len_target;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_target);
        let f1 = if precision > 0.0 && recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            turn_accuracy: ratio(correct_turns, preds.len()),
            slot_accuracy: ratio(correct_slots, n_slots),
            len: ratio(first.1, first.0),
            target_len: ratio(first.2, first.0),
            length_curve: curve.iter().map(|c| ratio(c.1, c.0)).collect(),
            target_length_curve: curve.iter().map(|c| ratio(c.2, c.0)).collect(),
            n_turns: preds.len(),
        }
    }
}

/// Teacher-forced predictions for every turn of an encoded corpus.
pub fn predict_corpus(
    network: &Network,
    encoded: &EncodedCorpus,
    window: usize,
    decode: &DecodePolicy,
) -> Result<Vec<TurnPrediction>, NetError> {
    use rayon::prelude::*;
    let width = network.width();
    let per_dialogue: Vec<Result<Vec<TurnPrediction>, NetError>> = encoded
        .dialogues
        .par_iter()
        .map(|d| {
            let inputs: Vec<InputSequence> = (0..d.examples.len())
                .map(|t| {
                    let blocks: Vec<&TurnBlock> = d.blocks[..=t].iter().collect();
                    build_input(&blocks, window, width)
                })
                .collect();
            let refs: Vec<&InputSequence> = inputs.iter().collect();
            let outs = network.forward_many(&refs)?;
            Ok(d.examples
                .iter()
                .zip(outs)
                .map(|(ex, out)| TurnPrediction {
                    dialogue_id: ex.dialogue_id.clone(),
                    turn: ex.turn,
                    predicted: gated_classes(&out, &ex.slot_domains, decode),
                    targets: ex.targets.clone(),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per_dialogue {
        out.extend(r?);
    }
    Ok(out)
}

pub fn fit_metrics(
    network: &Network,
    encoded: &EncodedCorpus,
    window: usize,
    decode: &DecodePolicy,
) -> Result<CorpusFitReport, NetError> {
    Ok(CorpusFitReport::from_predictions(&predict_corpus(
        network, encoded, window, decode,
    )?))
}

/// Encodes `corpus` with the network's layout and measures the fit. The
/// layout must have been built for `ontology`.
pub fn corpus_fit(
    network: &Network,
    corpus: &Corpus,
    ontology: &Ontology,
    window: usize,
) -> Result<(CorpusFitReport, Vec<TurnPrediction>), NetError> {
    let layout = network.layout;
    if layout.n_gen != ontology.n_gen() || layout.n_spec != ontology.n_spec() {
        return Err(NetError::Config(format!(
            "network layout has {}/{} intents, ontology has {}/{}",
            layout.n_gen,
            layout.n_spec,
            ontology.n_gen(),
            ontology.n_spec()
        )));
    }
    let decode = DecodePolicy {
        use_domain_gate: network.config.domain_loss,
        ..DecodePolicy::default()
    };
    let encoded = encode_corpus(corpus, ontology, &layout);
    let preds = predict_corpus(network, &encoded, window, &decode)?;
    Ok((CorpusFitReport::from_predictions(&preds), preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(turn: usize, predicted: Vec<usize>, targets: Vec<usize>) -> TurnPrediction {
        TurnPrediction {
            dialogue_id: "d".into(),
            turn,
            predicted,
            targets,
        }
    }

    #[test]
    fn perfect_predictions() {
        let preds = vec![
            turn(0, vec![3, 0, 2], vec![3, 0, 2]),
            turn(1, vec![0, 4], vec![0, 4]),
        ];
        let r = CorpusFitReport::from_predictions(&preds);
        assert_eq!(
            (r.precision, r.recall, r.f1, r.turn_accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(r.len, 2.0);
        assert_eq!(r.length_curve, vec![2.0, 1.0]);
    }

    #[test]
    fn all_none_predictions() {
        let preds = vec![turn(0, vec![0, 0], vec![3, 0])];
        let r = CorpusFitReport::from_predictions(&preds);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.len, 0.0);
        assert_eq!(r.target_len, 1.0);
        assert_eq!(r.slot_accuracy, 0.5);
        assert_eq!(r.turn_accuracy, 0.0);
    }

    #[test]
    fn hand_counted_micro_average() {
        // tp = 2 (3/3, 2/2); predicted non-none = 4; target non-none = 3.
        let preds = vec![
            turn(0, vec![3, 1, 0], vec![3, 0, 5]),
            turn(1, vec![2, 4], vec![2, 0]),
        ];
        let r = CorpusFitReport::from_predictions(&preds);
        assert!((r.precision - 0.5).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(r.turn_accuracy, 0.0);
        assert!((r.slot_accuracy - 0.4).abs() < 1e-12);
    }

    #[test]
    fn report_json_round_trip() {
        let r = CorpusFitReport::from_predictions(&[turn(0, vec![3, 1], vec![3, 0])]);
        let back: CorpusFitReport =
            serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
