//! Simulated users with ground-truth requests, and per-trial scoring.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{AgentActionKind, Controller, ControllerConfig, ControllerError, DialogEvent};
use crate::kb::{Category, KnowledgeBase, Provenance};
use crate::model::Rewards;
use crate::parser::{QuestionContext, StopWords};
use crate::solver::PolicyCache;

const DEFAULT_RESERVE: &str = include_str!("../data/reserve.txt");

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown-entity probabilities must lie in [0, 1] and sum to at most 1 (item {item}, recipient {recipient})")]
    Probability { item: f64, recipient: f64 },
    #[error("no reserve {0} names left that the KB does not already know")]
    EmptyReserve(Category),
    #[error("reserve vocabulary line {line}: {message}")]
    Reserve { line: usize, message: String },
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Out-of-KB names for items and recipients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReserveVocabulary {
    pub items: Vec<String>,
    pub recipients: Vec<String>,
}

impl ReserveVocabulary {
    /// Parses `item <name>` / `recipient <name>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut vocab = ReserveVocabulary { items: Vec::new(), recipients: Vec::new() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| SimError::Reserve { line: i + 1, message: message.into() };
            let (kind, name) = line.split_once(char::is_whitespace).ok_or_else(|| err("expected `<category> <name>`"))?;
            let name = name.trim().to_lowercase();
            match kind {
                "item" => vocab.items.push(name),
                "recipient" => vocab.recipients.push(name),
                other => return Err(err(&format!("unknown category `{other}`"))),
            }
        }
        Ok(vocab)
    }

    pub fn names(&self, category: Category) -> &[String] {
        match category {
            Category::Item => &self.items,
            Category::Recipient => &self.recipients,
            Category::Task => &[],
        }
    }

    /// Reserve names the KB has no surface form for.
    pub fn unseen(&self, kb: &KnowledgeBase, category: Category) -> Vec<&str> {
        self.names(category)
            .iter()
            .filter(|n| kb.lexicon().lookup(&n.replace('_', " ")).is_none())
            .map(String::as_str)
            .collect()
    }
}

impl Default for ReserveVocabulary {
    fn default() -> Self {
        ReserveVocabulary::parse(DEFAULT_RESERVE).expect("bundled reserve vocabulary is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotTruth {
    Known { name: String },
    Unknown { name: String },
}

impl SlotTruth {
    pub fn name(&self) -> &str {
        match self {
            SlotTruth::Known { name } | SlotTruth::Unknown { name } => name,
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, SlotTruth::Unknown { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRequest {
    pub task: SlotTruth,
    pub item: SlotTruth,
    pub recipient: SlotTruth,
}

impl GroundTruthRequest {
    pub fn slot(&self, c: Category) -> &SlotTruth {
        match c {
            Category::Task => &self.task,
            Category::Item => &self.item,
            Category::Recipient => &self.recipient,
        }
    }

    /// Slots that hold a name the KB lacks.
    pub fn unknown_slots(&self) -> Vec<Category> {
        Category::ALL.into_iter().filter(|c| self.slot(*c).is_unknown()).collect()
    }
}

/// How often requests mention something the agent does not know.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnknownRates {
    pub item: f64,
    pub recipient: f64,
    /// Draw the two slots independently (both may be unknown). Otherwise at
    /// most one slot is unknown per request.
    pub independent: bool,
}

impl Default for UnknownRates {
    fn default() -> Self {
        UnknownRates { item: 0.25, recipient: 0.25, independent: false }
    }
}

impl UnknownRates {
    pub fn none() -> Self {
        UnknownRates { item: 0.0, recipient: 0.0, independent: false }
    }

    /// Exactly one unknown slot, item or recipient with equal odds.
    pub fn one_unknown() -> Self {
        UnknownRates { item: 0.5, recipient: 0.5, independent: false }
    }

    /// Two unknown out of seven names per slot, drawn independently.
    pub fn human_replica() -> Self {
        UnknownRates { item: 2.0 / 7.0, recipient: 2.0 / 7.0, independent: true }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.item) || !ok(self.recipient) || (!self.independent && self.item + self.recipient > 1.0 + 1e-12) {
            return Err(SimError::Probability { item: self.item, recipient: self.recipient });
        }
        Ok(())
    }
}

/// Samples a request: uniform known entities per slot, with item or
/// recipient replaced by an unseen reserve name at the given rates.
pub fn sample_request<R: Rng + ?Sized>(
    kb: &KnowledgeBase,
    reserve: &ReserveVocabulary,
    rates: UnknownRates,
    rng: &mut R,
) -> Result<GroundTruthRequest, SimError> {
    rates.validate()?;
    let (unknown_item, unknown_recipient) = if rates.independent {
        (rng.gen::<f64>() < rates.item, rng.gen::<f64>() < rates.recipient)
    } else {
        let u = rng.gen::<f64>();
        (u < rates.item, u >= rates.item && u < rates.item + rates.recipient)
    };
    let mut pick = |c: Category, unknown: bool| -> Result<SlotTruth, SimError> {
        if unknown {
            let names = reserve.unseen(kb, c);
            if names.is_empty() {
                return Err(SimError::EmptyReserve(c));
            }
            Ok(SlotTruth::Unknown { name: names[rng.gen_range(0..names.len())].to_string() })
        } else {
            let entities = kb.entities(c);
            Ok(SlotTruth::Known { name: entities[rng.gen_range(0..entities.len())].canonical_name.clone() })
        }
    };
    Ok(GroundTruthRequest {
        task: pick(Category::Task, false)?,
        item: pick(Category::Item, unknown_item)?,
        recipient: pick(Category::Recipient, unknown_recipient)?,
    })
}

fn spoken(name: &str) -> String {
    name.replace('_', " ")
}

/// The user's truthful answer to the agent's pending question.
pub fn respond(request: &GroundTruthRequest, context: QuestionContext, kb: &KnowledgeBase) -> String {
    match context {
        QuestionContext::Request => {
            let verb = match request.task.name() {
                "delivery" => "bring".to_string(),
                other => spoken(other),
            };
            format!("please {verb} {} {}", spoken(request.recipient.name()), spoken(request.item.name()))
        }
        QuestionContext::Wh(c) | QuestionContext::NameRequest(c) => spoken(request.slot(c).name()),
        QuestionContext::Confirm(e) => {
            if kb.name(e) == request.slot(e.category).name() {
                "yes".into()
            } else {
                "no".into()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub request: GroundTruthRequest,
    pub events: Vec<DialogEvent>,
    /// Agent messages in the dialog, including the opening prompt.
    pub turns: u32,
    pub qa_cost: f64,
    /// Bonus or penalty of the final report.
    pub report_reward: f64,
    pub dialog_reward: f64,
    pub report_correct: bool,
    /// Slot the first augmentation targeted.
    pub augmented: Option<Category>,
    /// Turn index of the first name request.
    pub augmentation_turn: Option<u32>,
    /// The agent asked about the right slot first (or never asked when
    /// nothing was missing).
    pub augmentation_correct: bool,
    /// Every unknown slot ended up in the KB under its true name.
    pub learned_all: bool,
    pub success: bool,
}

impl TrialRecord {
    pub fn needs_augmentation(&self) -> bool {
        !self.request.unknown_slots().is_empty()
    }

    /// True positive: augmentation needed and the first one hit an unknown slot.
    pub fn augmentation_hit(&self) -> bool {
        matches!(self.augmented, Some(c) if self.request.slot(c).is_unknown())
    }
}

/// Plays one dialog between a fresh controller and the simulated user.
pub fn run_trial(
    index: usize,
    kb: &KnowledgeBase,
    config: ControllerConfig,
    cache: Arc<PolicyCache>,
    stop_words: Arc<StopWords>,
    request: GroundTruthRequest,
    seed: u64,
) -> Result<TrialRecord, SimError> {
    let mut controller = Controller::new(kb.clone(), config, cache, stop_words, seed)?;
    controller.start()?;
    while !controller.is_terminated() {
        let context = controller.pending_context().expect("live dialog has a pending question");
        let utterance = respond(&request, context, controller.kb());
        controller.step(&utterance)?;
    }
    Ok(score(index, request, &controller, &config.params.rewards))
}

fn score(index: usize, request: GroundTruthRequest, controller: &Controller, rewards: &Rewards) -> TrialRecord {
    let events = controller.events().to_vec();
    let qa_cost: f64 = events.iter().map(|e| e.action.cost.abs()).sum();
    let report = controller.report().expect("terminated dialog has a report");
    let report_correct = report.task == request.task.name()
        && report.item == request.item.name()
        && report.recipient == request.recipient.name();
    let report_reward = if report_correct { rewards.correct } else { rewards.wrong };
    let first = events.iter().find(|e| e.action.kind == AgentActionKind::NameRequest);
    let augmented = first.and_then(|e| e.augmentation.map(|t| t.slot));
    let augmentation_turn = first.map(|e| e.turn);
    let kb = controller.kb();
    let learned_all = request.unknown_slots().into_iter().all(|c| {
        kb.find(c, request.slot(c).name())
            .is_some_and(|id| matches!(kb.entity(id).provenance, Provenance::Learned { .. }))
    });
    let needed = !request.unknown_slots().is_empty();
    let augmentation_correct = match augmented {
        Some(c) => request.slot(c).is_unknown(),
        None => !needed,
    };
    TrialRecord {
        index,
        turns: events.len() as u32,
        events,
        qa_cost,
        report_reward,
        dialog_reward: report_reward - qa_cost,
        report_correct,
        augmented,
        augmentation_turn,
        augmentation_correct,
        learned_all,
        success: report_correct && learned_all,
        request,
    }
}

/// Batch aggregates over trial records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub trials: usize,
    pub success_rate: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_qa_cost: f64,
    pub mean_reward: f64,
    pub mean_report_reward: f64,
    pub mean_turns: f64,
    /// Over trials that needed augmentation: turn of the first name
    /// request, or the dialog length when the agent never asked. `None`
    /// when no trial needed augmentation.
    pub mean_turns_to_augment: Option<f64>,
    /// Over trials that augmented at least once; `None` if none did.
    pub mean_turns_to_first_augmentation: Option<f64>,
    pub augment_accuracy: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Precision, recall and F1 of the augmentation decision. Positive class:
/// augmentation needed. A true positive also needs the right slot.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

pub fn aggregate(records: &[TrialRecord]) -> BatchMetrics {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for r in records {
        let hit = r.augmentation_hit();
        if hit {
            tp += 1;
        }
        if r.augmented.is_some() && !hit {
            fp += 1;
        }
        if r.needs_augmentation() && !hit {
            fn_ += 1;
        }
    }
    let (precision, recall, f1) = f1_score(tp, fp, fn_);
    let augmented: Vec<f64> = records.iter().filter_map(|r| r.augmentation_turn.map(f64::from)).collect();
    let detection: Vec<f64> = records
        .iter()
        .filter(|r| r.needs_augmentation())
        .map(|r| f64::from(r.augmentation_turn.unwrap_or(r.turns)))
        .collect();
    let mean_qa_cost = mean(records.iter().map(|r| r.qa_cost));
    let mean_report_reward = mean(records.iter().map(|r| r.report_reward));
    BatchMetrics {
        trials: records.len(),
        success_rate: mean(records.iter().map(|r| f64::from(u8::from(r.success)))),
        f1,
        precision,
        recall,
        mean_qa_cost,
        mean_reward: mean_report_reward - mean_qa_cost,
        mean_report_reward,
        mean_turns: mean(records.iter().map(|r| f64::from(r.turns))),
        mean_turns_to_augment: (!detection.is_empty()).then(|| mean(detection.into_iter())),
        mean_turns_to_first_augmentation: (!augmented.is_empty()).then(|| mean(augmented.into_iter())),
        augment_accuracy: mean(records.iter().map(|r| f64::from(u8::from(r.augmentation_correct)))),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

/// Seed for stream `stream` of trial `index` under `master` (SplitMix64).
pub fn derive_seed(master: u64, index: u64, stream: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Request for trial `index`, identical for every agent under one master seed.
pub fn trial_request(
    kb: &KnowledgeBase,
    reserve: &ReserveVocabulary,
    rates: UnknownRates,
    master: u64,
    index: usize,
) -> Result<GroundTruthRequest, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, index as u64, 0));
    sample_request(kb, reserve, rates, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb() -> KnowledgeBase {
        crate::kb::builtin_profile("kb17").unwrap()
    }

    #[test]
    fn reserve_names_are_unseen() {
        let kb = kb();
        let reserve = ReserveVocabulary::default();
        assert_eq!(reserve.unseen(&kb, Category::Item).len(), reserve.items.len());
        assert_eq!(reserve.unseen(&kb, Category::Recipient).len(), reserve.recipients.len());
        assert!(ReserveVocabulary::parse("fruit apple").is_err());
    }

    #[test]
    fn zero_rates_give_known_requests() {
        let kb = kb();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = sample_request(&kb, &ReserveVocabulary::default(), UnknownRates::none(), &mut rng).unwrap();
            assert!(r.unknown_slots().is_empty());
        }
    }

    #[test]
    fn one_unknown_rate_always_has_exactly_one() {
        let kb = kb();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let r = sample_request(&kb, &ReserveVocabulary::default(), UnknownRates::one_unknown(), &mut rng).unwrap();
            assert_eq!(r.unknown_slots().len(), 1);
        }
    }

    #[test]
    fn empty_reserve_is_an_error() {
        let empty = ReserveVocabulary { items: vec![], recipients: vec![] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rates = UnknownRates { item: 1.0, recipient: 0.0, independent: false };
        assert_eq!(sample_request(&kb(), &empty, rates, &mut rng).unwrap_err(), SimError::EmptyReserve(Category::Item));
        let bad = UnknownRates { item: 0.7, recipient: 0.7, independent: false };
        assert!(sample_request(&kb(), &empty, bad, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let kb = kb();
        let reserve = ReserveVocabulary::default();
        let a = trial_request(&kb, &reserve, UnknownRates::default(), 9, 5).unwrap();
        let b = trial_request(&kb, &reserve, UnknownRates::default(), 9, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn answers_are_truthful() {
        let kb = kb();
        let request = GroundTruthRequest {
            task: SlotTruth::Known { name: "delivery".into() },
            item: SlotTruth::Known { name: "coffee".into() },
            recipient: SlotTruth::Unknown { name: "nate".into() },
        };
        let alice = kb.find(Category::Recipient, "alice").unwrap();
        let coffee = kb.find(Category::Item, "coffee").unwrap();
        let hamburger = kb.find(Category::Item, "hamburger").unwrap();
        assert_eq!(respond(&request, QuestionContext::Wh(Category::Item), &kb), "coffee");
        assert_eq!(respond(&request, QuestionContext::Confirm(hamburger), &kb), "no");
        assert_eq!(respond(&request, QuestionContext::Confirm(coffee), &kb), "yes");
        assert_eq!(respond(&request, QuestionContext::Confirm(alice), &kb), "no");
        assert_eq!(respond(&request, QuestionContext::Request, &kb), "please bring nate coffee");
        assert_eq!(respond(&request, QuestionContext::NameRequest(Category::Recipient), &kb), "nate");
    }

    #[test]
    fn f1_of_degenerate_batches() {
        assert_eq!(f1_score(10, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(f1_score(0, 0, 0), (0.0, 0.0, 0.0));
        let (p, r, f) = f1_score(3, 1, 2);
        assert!((p - 0.75).abs() < 1e-15 && (r - 0.6).abs() < 1e-15);
        assert!((f - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
    }

    #[test]
    fn seeds_differ_by_stream_and_index() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_eq!(derive_seed(5, 7, 1), derive_seed(5, 7, 1));
    }
}
