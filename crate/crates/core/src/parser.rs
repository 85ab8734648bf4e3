//! Lexicon-driven semantic parser and the mapping from parses to POMDP
//! observations.
//!
//! Parsing is a pure function of the utterance, the lexicon and the question
//! being answered. Randomness enters only in [`to_observations`], through a
//! caller-supplied generator, when a parse cannot be used for the question.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{normalize_surface, Category, EntityId, KnowledgeBase};
use crate::model::{ActionKind, ObsKind, PomdpModel};

const DEFAULT_STOP_WORDS: &str = include_str!("../data/stopwords.txt");

/// Tokens ignored when looking for unknown content words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    /// One word per line, `#` comments.
    pub fn parse(text: &str) -> Self {
        StopWords(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }
}

impl Default for StopWords {
    fn default() -> Self {
        StopWords::parse(DEFAULT_STOP_WORDS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseKind {
    FullRequest,
    TaskAnswer,
    ItemAnswer,
    RecipientAnswer,
    Affirm,
    Deny,
    UnknownWord,
    Malformed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slots {
    pub task: Option<EntityId>,
    pub item: Option<EntityId>,
    pub recipient: Option<EntityId>,
}

impl Slots {
    pub fn get(&self, c: Category) -> Option<EntityId> {
        match c {
            Category::Task => self.task,
            Category::Item => self.item,
            Category::Recipient => self.recipient,
        }
    }

    fn set_if_empty(&mut self, id: EntityId) {
        let slot = match id.category {
            Category::Task => &mut self.task,
            Category::Item => &mut self.item,
            Category::Recipient => &mut self.recipient,
        };
        slot.get_or_insert(id);
    }

    pub fn filled(&self) -> usize {
        [self.task, self.item, self.recipient].iter().filter(|s| s.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parse {
    pub kind: ParseKind,
    pub slots: Slots,
    pub unknown_surface: Option<String>,
}

/// What the agent asked before the utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "snake_case")]
pub enum QuestionContext {
    /// Opening prompt or a request to reword the whole request.
    Request,
    Wh(Category),
    Confirm(EntityId),
    NameRequest(Category),
}

fn tokens(utterance: &str) -> Vec<String> {
    normalize_surface(utterance)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Parses one utterance.
pub fn parse(utterance: &str, kb: &KnowledgeBase, stop_words: &StopWords, expected: QuestionContext) -> Parse {
    let toks = tokens(utterance);
    let lex = kb.lexicon();
    let max_len = lex.max_surface_tokens();
    let mut slots = Slots::default();
    let mut matched = 0usize;
    let mut unknown: Vec<&str> = Vec::new();
    let (mut affirm, mut deny) = (false, false);

    let mut i = 0;
    while i < toks.len() {
        let found = (1..=max_len.min(toks.len() - i))
            .rev()
            .find_map(|len| lex.lookup(&toks[i..i + len].join(" ")).map(|id| (id, len)));
        if let Some((id, len)) = found {
            slots.set_if_empty(id);
            matched += 1;
            i += len;
            continue;
        }
        let t = toks[i].as_str();
        if lex.is_affirm(t) {
            affirm = true;
        } else if lex.is_deny(t) {
            deny = true;
        } else if !stop_words.contains(t) {
            unknown.push(t);
        }
        i += 1;
    }

    let unknown_surface = (!unknown.is_empty()).then(|| unknown.join(" "));
    let marker = match (affirm, deny) {
        (true, false) => Some(ParseKind::Affirm),
        (false, true) => Some(ParseKind::Deny),
        _ => None,
    };
    let make = |kind, slots, unknown_surface| Parse { kind, slots, unknown_surface };

    // Yes/no answers: the marker decides, whatever else was said.
    if let (QuestionContext::Confirm(_), Some(kind)) = (expected, marker) {
        return make(kind, Slots::default(), None);
    }
    if matched == 0 {
        return match (unknown_surface, marker) {
            (Some(u), _) => make(ParseKind::UnknownWord, Slots::default(), Some(u)),
            (None, Some(kind)) => make(kind, Slots::default(), None),
            (None, None) => make(ParseKind::Malformed, Slots::default(), None),
        };
    }
    if unknown_surface.is_some() {
        return make(ParseKind::UnknownWord, slots, unknown_surface);
    }
    if slots.filled() == 1 && expected != QuestionContext::Request {
        let kind = if slots.task.is_some() {
            ParseKind::TaskAnswer
        } else if slots.item.is_some() {
            ParseKind::ItemAnswer
        } else {
            ParseKind::RecipientAnswer
        };
        return make(kind, slots, None);
    }
    make(ParseKind::FullRequest, slots, None)
}

/// One observation derived from a parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedObservation {
    /// Dialog-model action the observation is conditioned on.
    pub action: usize,
    pub observation: usize,
    /// Drawn at random because the parse did not resolve the question.
    pub random: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationPlan {
    pub observations: Vec<DerivedObservation>,
    /// Slots whose answer was an unknown word (the ẑ signal for the
    /// knowledge track).
    pub unknown_slots: Vec<Category>,
}

/// Converts a parse into observations for the dialog model.
///
/// Answers to a request yield one observation per slot (task, item,
/// recipient), each conditioned on the matching wh-question. Anything that
/// does not answer the question falls back to a uniform draw from the
/// question's observation subset.
pub fn to_observations<R: Rng + ?Sized>(
    parse: &Parse,
    context: QuestionContext,
    model: &PomdpModel,
    rng: &mut R,
) -> ObservationPlan {
    let mut plan = ObservationPlan::default();
    match context {
        QuestionContext::Request => {
            let usable = matches!(parse.kind, ParseKind::FullRequest | ParseKind::UnknownWord)
                || parse.slots.filled() > 0;
            for c in Category::ALL {
                let value = if usable { parse.slots.get(c) } else { None };
                plan.observations.push(slot_observation(model, c, value, rng));
                if value.is_none() && parse.kind == ParseKind::UnknownWord && c != Category::Task {
                    plan.unknown_slots.push(c);
                }
            }
        }
        QuestionContext::Wh(c) => {
            let value = match parse.kind {
                ParseKind::FullRequest
                | ParseKind::UnknownWord
                | ParseKind::TaskAnswer
                | ParseKind::ItemAnswer
                | ParseKind::RecipientAnswer => parse.slots.get(c),
                _ => None,
            };
            plan.observations.push(slot_observation(model, c, value, rng));
            if value.is_none() && parse.kind == ParseKind::UnknownWord && c != Category::Task {
                plan.unknown_slots.push(c);
            }
        }
        QuestionContext::Confirm(entity) => {
            let action = model
                .action_id(&ActionKind::Confirm(entity))
                .expect("confirmation action exists in the dialog model");
            let yes = model.obs_id(&ObsKind::Yes).expect("z+");
            let no = model.obs_id(&ObsKind::No).expect("z-");
            let (observation, random) = match parse.kind {
                ParseKind::Affirm => (yes, false),
                ParseKind::Deny => (no, false),
                _ => (if rng.gen_bool(0.5) { yes } else { no }, true),
            };
            plan.observations.push(DerivedObservation { action, observation, random });
        }
        QuestionContext::NameRequest(_) => {}
    }
    plan
}

fn slot_observation<R: Rng + ?Sized>(
    model: &PomdpModel,
    c: Category,
    value: Option<EntityId>,
    rng: &mut R,
) -> DerivedObservation {
    let action = model.action_id(&ActionKind::Ask(c)).expect("wh action exists");
    match value.and_then(|v| model.obs_id(&ObsKind::Value(v))) {
        Some(observation) => DerivedObservation { action, observation, random: false },
        None => {
            let zs = model.slot_observations(c);
            DerivedObservation { action, observation: zs[rng.gen_range(0..zs.len())], random: true }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_dialog_pomdp, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kb() -> KnowledgeBase {
        let mut kb = KnowledgeBase::from_names(
            &["delivery"],
            &["coffee", "hamburger", "pop", "sandwich"],
            &["alice", "ellen", "james", "bob"],
        )
        .unwrap();
        let delivery = kb.find(Category::Task, "delivery").unwrap();
        kb.add_synonym("bring", delivery).unwrap();
        kb
    }

    fn p(text: &str, ctx: QuestionContext) -> Parse {
        parse(text, &kb(), &StopWords::default(), ctx)
    }

    #[test]
    fn full_request_resolves_all_slots() {
        let kb = kb();
        let parse = p("Please bring James coffee", QuestionContext::Request);
        assert_eq!(parse.kind, ParseKind::FullRequest);
        assert_eq!(parse.slots.task, kb.find(Category::Task, "delivery"));
        assert_eq!(parse.slots.item, kb.find(Category::Item, "coffee"));
        assert_eq!(parse.slots.recipient, kb.find(Category::Recipient, "james"));
    }

    #[test]
    fn yes_after_confirmation_is_affirm() {
        let kb = kb();
        let coffee = kb.find(Category::Item, "coffee").unwrap();
        assert_eq!(p("yes", QuestionContext::Confirm(coffee)).kind, ParseKind::Affirm);
        assert_eq!(p("No.", QuestionContext::Confirm(coffee)).kind, ParseKind::Deny);
        assert_eq!(p("no, it's nate", QuestionContext::Confirm(coffee)).kind, ParseKind::Deny);
        assert_eq!(p("coffee", QuestionContext::Confirm(coffee)).kind, ParseKind::ItemAnswer);
    }

    #[test]
    fn unknown_words_are_reported() {
        let kb = kb();
        let parse = p("Get me coffee", QuestionContext::Request);
        assert_eq!(parse.kind, ParseKind::UnknownWord);
        assert_eq!(parse.unknown_surface.as_deref(), Some("get me"));
        assert_eq!(parse.slots.item, kb.find(Category::Item, "coffee"));
        assert_eq!(parse.slots.recipient, None);
    }

    #[test]
    fn slot_answers_and_malformed() {
        assert_eq!(p("Coffee", QuestionContext::Wh(Category::Item)).kind, ParseKind::ItemAnswer);
        assert_eq!(p("alice", QuestionContext::Wh(Category::Recipient)).kind, ParseKind::RecipientAnswer);
        assert_eq!(p("coffee", QuestionContext::Request).kind, ParseKind::FullRequest);
        assert_eq!(p("please, the", QuestionContext::Request).kind, ParseKind::Malformed);
        let nate = p("Nate", QuestionContext::Wh(Category::Recipient));
        assert_eq!(nate.kind, ParseKind::UnknownWord);
        assert_eq!(nate.unknown_surface.as_deref(), Some("nate"));
    }

    #[test]
    fn parsing_is_deterministic() {
        for text in ["bring alice pop", "get me coffee", "yes", "???"] {
            assert_eq!(p(text, QuestionContext::Request), p(text, QuestionContext::Request));
        }
    }

    #[test]
    fn affirm_maps_to_yes() {
        let kb = kb();
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let coffee = kb.find(Category::Item, "coffee").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parse = p("yes", QuestionContext::Confirm(coffee));
        let plan = to_observations(&parse, QuestionContext::Confirm(coffee), &m, &mut rng);
        assert_eq!(plan.observations.len(), 1);
        assert_eq!(m.obs(plan.observations[0].observation), ObsKind::Yes);
        assert!(!plan.observations[0].random);
    }

    #[test]
    fn full_request_gives_three_observations() {
        let kb = kb();
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parse = p("bring alice coffee", QuestionContext::Request);
        let plan = to_observations(&parse, QuestionContext::Request, &m, &mut rng);
        let got: Vec<ObsKind> = plan.observations.iter().map(|d| m.obs(d.observation)).collect();
        assert_eq!(
            got,
            vec![
                ObsKind::Value(kb.find(Category::Task, "delivery").unwrap()),
                ObsKind::Value(kb.find(Category::Item, "coffee").unwrap()),
                ObsKind::Value(kb.find(Category::Recipient, "alice").unwrap()),
            ]
        );
        let asks: Vec<ActionKind> = plan.observations.iter().map(|d| m.action(d.action)).collect();
        assert_eq!(
            asks,
            vec![
                ActionKind::Ask(Category::Task),
                ActionKind::Ask(Category::Item),
                ActionKind::Ask(Category::Recipient)
            ]
        );
        assert!(plan.unknown_slots.is_empty());
    }

    #[test]
    fn unknown_request_flags_recipient() {
        let kb = kb();
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let parse = p("get me coffee", QuestionContext::Request);
        let plan = to_observations(&parse, QuestionContext::Request, &m, &mut rng);
        assert_eq!(plan.unknown_slots, vec![Category::Recipient]);
        assert!(plan.observations[2].random);
        assert!(!plan.observations[1].random);
    }

    #[test]
    fn random_branch_respects_question_type() {
        let kb = kb();
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let coffee = kb.find(Category::Item, "coffee").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let yes = p("yes", QuestionContext::Wh(Category::Item));
            let plan = to_observations(&yes, QuestionContext::Wh(Category::Item), &m, &mut rng);
            assert!(matches!(m.obs(plan.observations[0].observation), ObsKind::Value(e) if e.category == Category::Item));
            let word = p("alice", QuestionContext::Confirm(coffee));
            let plan = to_observations(&word, QuestionContext::Confirm(coffee), &m, &mut rng);
            assert!(matches!(m.obs(plan.observations[0].observation), ObsKind::Yes | ObsKind::No));
        }
    }

    #[test]
    fn custom_stop_words() {
        let stop = StopWords::parse("# comment\nget\nme\n");
        let parse = parse("get me coffee", &kb(), &stop, QuestionContext::Request);
        assert_eq!(parse.kind, ParseKind::FullRequest);
    }
}
