//! The dual-track dialog loop.
//!
//! A [`Controller`] owns one dialog session: the KB, both models, the dialog
//! belief `b`, the knowledge belief `b⁺`, a three-belief history for entropy
//! fluctuation, and the EF counter `δ`. It talks in turns: every call to
//! [`Controller::start`] or [`Controller::step`] produces exactly one agent
//! message wrapped in a [`DialogEvent`].

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{normalize_surface, Category, EntityId, KbError, KnowledgeBase};
use crate::model::{
    build_dialog_pomdp, build_knowledge_pomdp, corrupt_observation, rebuild_after_augmentation, ActionKind,
    ModelError, ModelParams, NoiseModel, PomdpModel, StateKey, TERM,
};
use crate::parser::{parse, to_observations, ParseKind, QuestionContext, StopWords};
use crate::solver::{belief_update, Belief, Policy, PolicyCache, SolverConfig};

pub const OPENING_PROMPT: &str = "How can I help you?";
pub const REWORD_PROMPT: &str = "Please reword your service request";

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dialog has not started")]
    NotStarted,
    #[error("dialog already started")]
    AlreadyStarted,
    #[error("dialog is over")]
    Terminated,
}

/// `τ_b(n) = 1/(1+e^(−⌊√n⌋)) − 1/⌊√n⌋`, defined for `n ≥ 4`.
pub fn tau_b(kb_size: usize) -> Result<f64, ControllerError> {
    if kb_size < 4 {
        return Err(ControllerError::Config(format!("tau_b needs a KB size of at least 4, got {kb_size}")));
    }
    let r = isqrt(kb_size) as f64;
    Ok(1.0 / (1.0 + (-r).exp()) - 1.0 / r)
}

/// `Δ(n) = max(0, ⌊√n⌋)`.
pub fn delta_threshold(kb_size: usize) -> u32 {
    isqrt(kb_size) as u32
}

fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

fn sign(x: f64) -> bool {
    x >= 0.0
}

/// Entropy fluctuation over three consecutive entropies: true iff the two
/// successive differences have opposite signs, with `sign(0) = +1`.
pub fn entropy_fluctuation(h: [f64; 3]) -> bool {
    sign(h[1] - h[0]) ^ sign(h[2] - h[1])
}

/// Which augmentation triggers an agent uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "turns", rename_all = "snake_case")]
pub enum AgentVariant {
    /// Knowledge-belief thresholds and entropy fluctuations.
    Dual,
    /// Knowledge-belief thresholds only.
    TauOnly,
    /// Entropy fluctuations only.
    EfOnly,
    /// Augments after a fixed number of turns.
    FixedTurns(u32),
}

impl AgentVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AgentVariant::Dual => "dual",
            AgentVariant::TauOnly => "baseline1",
            AgentVariant::EfOnly => "baseline2",
            AgentVariant::FixedTurns(_) => "baseline3",
        }
    }

    /// Accepts `dual`, `b1`..`b3` and `baseline1`..`baseline3`.
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "dual" => Some(AgentVariant::Dual),
            "b1" | "baseline1" => Some(AgentVariant::TauOnly),
            "b2" | "baseline2" => Some(AgentVariant::EfOnly),
            "b3" | "baseline3" => Some(AgentVariant::FixedTurns(DEFAULT_FIXED_TURNS)),
            _ => None,
        }
    }

    fn uses_tau(&self) -> bool {
        matches!(self, AgentVariant::Dual | AgentVariant::TauOnly)
    }

    fn uses_ef(&self) -> bool {
        matches!(self, AgentVariant::Dual | AgentVariant::EfOnly)
    }
}

pub const DEFAULT_FIXED_TURNS: u32 = 8;

/// Which observations reach the knowledge belief `b⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeEvidence {
    /// Answers to confirmation questions only.
    Confirmations,
    /// Confirmations plus an unknown-entity observation whenever an answer
    /// leaves a slot filled by an unknown word.
    ConfirmationsAndUnknownWords,
    /// Every dialog observation.
    AllObservations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub variant: AgentVariant,
    /// Parameters of both POMDPs.
    pub params: ModelParams,
    /// Simulated perception noise applied to observations parsed from text.
    /// `None` passes parsed observations through unchanged.
    pub channel_noise: Option<NoiseModel>,
    /// `h = entropy_ratio · ln|S|`.
    pub entropy_ratio: f64,
    /// Turn index at which the agent reports its best guess regardless.
    pub max_turns: u32,
    pub knowledge_evidence: KnowledgeEvidence,
    pub solver: SolverConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            variant: AgentVariant::Dual,
            params: ModelParams::default(),
            channel_noise: None,
            entropy_ratio: 0.9,
            max_turns: 30,
            knowledge_evidence: KnowledgeEvidence::ConfirmationsAndUnknownWords,
            solver: SolverConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        self.params.validate()?;
        if let Some(noise) = &self.channel_noise {
            noise.validate()?;
        }
        if !(self.entropy_ratio > 0.0 && self.entropy_ratio <= 1.0) {
            return Err(ControllerError::Config(format!("entropy_ratio must be in (0, 1], got {}", self.entropy_ratio)));
        }
        if self.max_turns == 0 {
            return Err(ControllerError::Config("max_turns must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingRequest,
    InDialog,
    AwaitingNewName,
    Terminated,
}

/// Beliefs and counters of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub b: Belief,
    pub b_plus: Belief,
    pub history: VecDeque<Belief>,
    pub delta: u32,
    pub phase: Phase,
}

impl ControllerState {
    fn fresh(dialog: &PomdpModel, knowledge: &PomdpModel) -> Self {
        let b = Belief::uniform(dialog.n_states());
        ControllerState {
            history: VecDeque::from(vec![b.clone(), b.clone(), b.clone()]),
            b,
            b_plus: Belief::uniform(knowledge.n_states()),
            delta: 0,
            phase: Phase::AwaitingRequest,
        }
    }

    fn reset_history(&mut self) {
        self.history = VecDeque::from(vec![self.b.clone(), self.b.clone(), self.b.clone()]);
    }

    fn fluctuates(&self) -> bool {
        let h: Vec<f64> = self.history.iter().map(Belief::entropy).collect();
        entropy_fluctuation([h[0], h[1], h[2]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerReason {
    Tau,
    EntropyFluctuation,
    FixedTurns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationTrigger {
    pub slot: Category,
    pub reason: TriggerReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbMutation {
    pub category: Category,
    pub name: String,
    /// The name was already known; the KB did not change.
    pub collision: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentActionKind {
    Request,
    Reword,
    Ask,
    Confirm,
    NameRequest,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub kind: AgentActionKind,
    /// Index in the dialog model's action list, for POMDP actions.
    pub action_id: Option<usize>,
    pub label: String,
    pub text: String,
    /// Reward charged for asking (zero for the opening prompt and reports).
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub action: String,
    pub observation: String,
    pub random: bool,
    /// False when the observation had zero probability and was dropped.
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportedRequest {
    pub task: String,
    pub item: String,
    pub recipient: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMass {
    pub state: String,
    pub p: f64,
}

/// One agent turn: what the user said, what the agent made of it, and what
/// the agent says next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogEvent {
    pub turn: u32,
    pub user_utterance: Option<String>,
    pub parse_kind: Option<ParseKind>,
    pub observations: Vec<ObservationRecord>,
    pub unknown_slots: Vec<Category>,
    pub kb_mutation: Option<KbMutation>,
    pub augmentation: Option<AugmentationTrigger>,
    pub action: AgentAction,
    pub entropy: f64,
    pub entropy_threshold: f64,
    pub delta: u32,
    pub delta_threshold: u32,
    pub tau_b: f64,
    pub kb_size: usize,
    pub unknown_item_mass: f64,
    pub unknown_recipient_mass: f64,
    pub top_states: Vec<StateMass>,
    pub qa_cost: f64,
    pub phase: Phase,
    pub report: Option<ReportedRequest>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    context: QuestionContext,
}

/// One dialog session.
pub struct Controller {
    kb: KnowledgeBase,
    config: ControllerConfig,
    dialog: Arc<PomdpModel>,
    knowledge: Arc<PomdpModel>,
    policy: Arc<Policy>,
    cache: Arc<PolicyCache>,
    stop_words: Arc<StopWords>,
    state: ControllerState,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
    turn: u32,
    turns_since_reset: u32,
    qa_cost: f64,
    events: Vec<DialogEvent>,
    report: Option<ReportedRequest>,
}

#[derive(Default)]
struct Draft {
    user_utterance: Option<String>,
    parse_kind: Option<ParseKind>,
    observations: Vec<ObservationRecord>,
    unknown_slots: Vec<Category>,
    kb_mutation: Option<KbMutation>,
    augmentation: Option<AugmentationTrigger>,
}

impl Controller {
    pub fn new(
        kb: KnowledgeBase,
        config: ControllerConfig,
        cache: Arc<PolicyCache>,
        stop_words: Arc<StopWords>,
        seed: u64,
    ) -> Result<Self, ControllerError> {
        config.validate()?;
        kb.validate()?;
        tau_b(kb.size())?;
        let dialog = Arc::new(build_dialog_pomdp(&kb, &config.params)?);
        let knowledge = Arc::new(build_knowledge_pomdp(&kb, &config.params)?);
        let policy = cache.get_or_solve(&dialog, config.solver);
        let state = ControllerState::fresh(&dialog, &knowledge);
        Ok(Controller {
            kb,
            config,
            dialog,
            knowledge,
            policy,
            cache,
            stop_words,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: None,
            turn: 0,
            turns_since_reset: 0,
            qa_cost: 0.0,
            events: Vec::new(),
            report: None,
        })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn dialog_model(&self) -> &PomdpModel {
        &self.dialog
    }

    pub fn knowledge_model(&self) -> &PomdpModel {
        &self.knowledge
    }

    pub fn events(&self) -> &[DialogEvent] {
        &self.events
    }

    pub fn report(&self) -> Option<&ReportedRequest> {
        self.report.as_ref()
    }

    pub fn is_terminated(&self) -> bool {
        self.state.phase == Phase::Terminated
    }

    /// Context of the question awaiting an answer.
    pub fn pending_context(&self) -> Option<QuestionContext> {
        self.pending.map(|p| p.context)
    }

    /// Current entropy threshold `h`.
    pub fn entropy_threshold(&self) -> f64 {
        self.config.entropy_ratio * (self.dialog.n_states() as f64).ln()
    }

    /// Marginal of `b⁺` over unknown-item and unknown-recipient states.
    pub fn unknown_masses(&self) -> (f64, f64) {
        let mut item = 0.0;
        let mut recipient = 0.0;
        for (s, p) in self.state.b_plus.probs().iter().enumerate() {
            match self.knowledge.state(s) {
                StateKey::UnknownItem { .. } => item += p,
                StateKey::UnknownRecipient { .. } => recipient += p,
                _ => {}
            }
        }
        (item, recipient)
    }

    /// Overwrites the knowledge belief.
    pub fn set_knowledge_belief(&mut self, b_plus: Belief) -> Result<(), ControllerError> {
        if b_plus.len() != self.knowledge.n_states() {
            return Err(ControllerError::Config(format!(
                "knowledge belief has {} entries, model has {} states",
                b_plus.len(),
                self.knowledge.n_states()
            )));
        }
        self.state.b_plus = b_plus;
        Ok(())
    }

    /// Emits the opening prompt.
    pub fn start(&mut self) -> Result<&DialogEvent, ControllerError> {
        if !self.events.is_empty() {
            return Err(ControllerError::AlreadyStarted);
        }
        let action = AgentAction {
            kind: AgentActionKind::Request,
            action_id: None,
            label: "request".into(),
            text: OPENING_PROMPT.into(),
            cost: 0.0,
        };
        self.pending = Some(Pending { context: QuestionContext::Request });
        Ok(self.emit(Draft::default(), action))
    }

    /// Consumes the user's answer to the pending question and produces the
    /// agent's next message.
    pub fn step(&mut self, utterance: &str) -> Result<&DialogEvent, ControllerError> {
        if self.is_terminated() {
            return Err(ControllerError::Terminated);
        }
        let pending = self.pending.take().ok_or(ControllerError::NotStarted)?;
        let mut draft = Draft { user_utterance: Some(utterance.to_string()), ..Draft::default() };
        let mut after_name = false;
        let mut history_changed = false;
        match pending.context {
            QuestionContext::NameRequest(slot) => {
                self.learn_name(slot, utterance, &mut draft)?;
                after_name = true;
            }
            context => history_changed = self.observe(context, utterance, &mut draft),
        }
        self.state.phase = Phase::InDialog;
        self.select(draft, after_name, history_changed)
    }

    fn observe(&mut self, context: QuestionContext, utterance: &str, draft: &mut Draft) -> bool {
        let parsed = parse(utterance, &self.kb, &self.stop_words, context);
        draft.parse_kind = Some(parsed.kind);
        let plan = to_observations(&parsed, context, &self.dialog, &mut self.rng);
        draft.unknown_slots.clone_from(&plan.unknown_slots);
        let mut updated = false;
        for derived in plan.observations {
            let mut z = derived.observation;
            if let (false, Some(noise)) = (derived.random, self.config.channel_noise.as_ref()) {
                z = corrupt_observation(&self.dialog, noise, z, &mut self.rng);
            }
            let applied = match belief_update(&self.dialog, &self.state.b, derived.action, z) {
                Ok(next) => {
                    self.state.b = next;
                    true
                }
                Err(_) => false,
            };
            updated |= applied;
            let action = self.dialog.action(derived.action);
            let feeds_knowledge = action.is_confirmation()
                || self.config.knowledge_evidence == KnowledgeEvidence::AllObservations;
            if feeds_knowledge {
                // Both tracks index shared actions and observations alike.
                if let Ok(next) = belief_update(&self.knowledge, &self.state.b_plus, derived.action, z) {
                    self.state.b_plus = next;
                }
            }
            draft.observations.push(ObservationRecord {
                action: action.label(&self.kb),
                observation: self.dialog.obs(z).label(&self.kb),
                random: derived.random,
                applied,
            });
        }
        if self.config.knowledge_evidence == KnowledgeEvidence::ConfirmationsAndUnknownWords {
            for c in &plan.unknown_slots {
                let a = self.knowledge.action_id(&ActionKind::ConfirmUnknown(*c)).expect("knowledge track confirms unknowns");
                let mut z = self.knowledge.obs_id(&crate::model::ObsKind::Unknown(*c)).expect("knowledge track observes unknowns");
                if let Some(noise) = self.config.channel_noise.as_ref() {
                    z = corrupt_observation(&self.knowledge, noise, z, &mut self.rng);
                }
                if let Ok(next) = belief_update(&self.knowledge, &self.state.b_plus, a, z) {
                    self.state.b_plus = next;
                }
            }
        }
        if updated {
            self.state.history.pop_front();
            self.state.history.push_back(self.state.b.clone());
        }
        updated
    }

    fn learn_name(&mut self, slot: Category, utterance: &str, draft: &mut Draft) -> Result<(), ControllerError> {
        let parsed = parse(utterance, &self.kb, &self.stop_words, QuestionContext::NameRequest(slot));
        draft.parse_kind = Some(parsed.kind);
        if let Some(existing) = parsed.slots.get(slot).filter(|_| parsed.unknown_surface.is_none()) {
            self.condition_on(existing);
            draft.kb_mutation =
                Some(KbMutation { category: slot, name: self.kb.name(existing).to_string(), collision: true });
            self.reset_after_augmentation();
            return Ok(());
        }
        let name = match &parsed.unknown_surface {
            Some(surface) => surface.clone(),
            None if parsed.slots.filled() == 0 => normalize_surface(utterance),
            // Named something of another category: nothing to learn.
            None => return Ok(()),
        };
        if name.is_empty() {
            return Ok(());
        }
        let id = match self.kb.add_entity(slot, &name, self.turn) {
            Ok(id) => id,
            Err(KbError::AlreadyKnown { .. } | KbError::SurfaceConflict { .. }) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let (dialog, knowledge) = rebuild_after_augmentation(&self.dialog, &self.kb, &self.config.params)?;
        let b = reinitialize_belief(&self.state.b_plus, &self.knowledge, &dialog, slot, id);
        self.dialog = Arc::new(dialog);
        self.knowledge = Arc::new(knowledge);
        self.policy = self.cache.get_or_solve(&self.dialog, self.config.solver);
        self.state.b = b;
        self.state.b_plus = Belief::uniform(self.knowledge.n_states());
        draft.kb_mutation = Some(KbMutation { category: slot, name: self.kb.name(id).to_string(), collision: false });
        self.reset_after_augmentation();
        Ok(())
    }

    /// Restricts `b` to states whose slot holds `entity`.
    fn condition_on(&mut self, entity: EntityId) {
        let matches = |s: usize| self.dialog.state(s).slot(entity.category) == Some(crate::model::SlotValue::Known(entity));
        let weights: Vec<f64> = (0..self.dialog.n_states())
            .map(|s| if matches(s) { self.state.b.probs()[s] } else { 0.0 })
            .collect();
        self.state.b = Belief::from_weights(weights).unwrap_or_else(|_| {
            let weights = (0..self.dialog.n_states()).map(|s| if matches(s) { 1.0 } else { 0.0 }).collect();
            Belief::from_weights(weights).expect("entity occurs in some state")
        });
        self.state.b_plus = Belief::uniform(self.knowledge.n_states());
    }

    fn reset_after_augmentation(&mut self) {
        self.state.reset_history();
        self.state.delta = 0;
        self.turns_since_reset = 0;
    }

    fn guard(&self) -> Option<AugmentationTrigger> {
        let variant = self.config.variant;
        if variant.uses_tau() {
            let tau = tau_b(self.kb.size()).expect("validated KB size");
            let (item, recipient) = self.unknown_masses();
            if recipient > tau {
                return Some(AugmentationTrigger { slot: Category::Recipient, reason: TriggerReason::Tau });
            }
            if item > tau {
                return Some(AugmentationTrigger { slot: Category::Item, reason: TriggerReason::Tau });
            }
        }
        let reason = match variant {
            _ if variant.uses_ef() && self.state.delta > delta_threshold(self.kb.size()) => {
                TriggerReason::EntropyFluctuation
            }
            AgentVariant::FixedTurns(n) if self.turns_since_reset >= n => TriggerReason::FixedTurns,
            _ => return None,
        };
        Some(AugmentationTrigger { slot: self.more_likely_slot(), reason })
    }

    /// Slot whose unknown states carry more knowledge-belief mass; ties go
    /// to the item.
    pub fn more_likely_slot(&self) -> Category {
        let (item, recipient) = self.unknown_masses();
        if recipient > item {
            Category::Recipient
        } else {
            Category::Item
        }
    }

    fn select(&mut self, mut draft: Draft, after_name: bool, history_changed: bool) -> Result<&DialogEvent, ControllerError> {
        if self.turn + 1 >= self.config.max_turns {
            let best = (1..self.dialog.n_states())
                .max_by(|a, b| self.state.b.probs()[*a].total_cmp(&self.state.b.probs()[*b]).then(b.cmp(a)))
                .expect("model has non-terminal states");
            let a = self.dialog.action_id(&ActionKind::Report(self.dialog.state(best))).expect("report exists");
            return Ok(self.emit_model_action(draft, a));
        }
        if !after_name {
            if let Some(trigger) = self.guard() {
                draft.augmentation = Some(trigger);
                let text = name_request_text(trigger.slot);
                let action = AgentAction {
                    kind: AgentActionKind::NameRequest,
                    action_id: None,
                    label: format!("name_request_{}", trigger.slot),
                    text,
                    cost: self.config.params.rewards.wh,
                };
                self.state.phase = Phase::AwaitingNewName;
                self.pending = Some(Pending { context: QuestionContext::NameRequest(trigger.slot) });
                return Ok(self.emit(draft, action));
            }
        }
        if history_changed && self.state.fluctuates() {
            self.state.delta += 1;
        }
        if self.state.b.entropy() > self.entropy_threshold() {
            let action = AgentAction {
                kind: AgentActionKind::Reword,
                action_id: None,
                label: "reword".into(),
                text: REWORD_PROMPT.into(),
                cost: self.config.params.rewards.wh,
            };
            self.pending = Some(Pending { context: QuestionContext::Request });
            return Ok(self.emit(draft, action));
        }
        let a = self.policy.action(&self.state.b);
        Ok(self.emit_model_action(draft, a))
    }

    fn emit_model_action(&mut self, draft: Draft, a: usize) -> &DialogEvent {
        let kind = self.dialog.action(a);
        let rewards = self.config.params.rewards;
        let (agent_kind, cost, context) = match kind {
            ActionKind::Ask(c) => (AgentActionKind::Ask, rewards.wh, Some(QuestionContext::Wh(c))),
            ActionKind::Confirm(e) => (AgentActionKind::Confirm, rewards.confirm, Some(QuestionContext::Confirm(e))),
            ActionKind::ConfirmUnknown(_) => unreachable!("dialog model has no unknown confirmations"),
            ActionKind::Report(_) => (AgentActionKind::Report, 0.0, None),
        };
        let action = AgentAction {
            kind: agent_kind,
            action_id: Some(a),
            label: kind.label(&self.kb),
            text: action_text(&self.kb, &kind),
            cost,
        };
        match (kind, context) {
            (ActionKind::Report(s), _) => {
                self.report = Some(reported(&self.kb, &s));
                self.state.phase = Phase::Terminated;
            }
            (_, Some(context)) => self.pending = Some(Pending { context }),
            _ => {}
        }
        self.emit(draft, action)
    }

    fn emit(&mut self, draft: Draft, action: AgentAction) -> &DialogEvent {
        self.qa_cost += action.cost.abs();
        let (unknown_item_mass, unknown_recipient_mass) = self.unknown_masses();
        let top_states = self
            .state
            .b
            .top(3)
            .into_iter()
            .map(|(s, p)| StateMass { state: self.dialog.state(s).label(&self.kb), p })
            .collect();
        let event = DialogEvent {
            turn: self.turn,
            user_utterance: draft.user_utterance,
            parse_kind: draft.parse_kind,
            observations: draft.observations,
            unknown_slots: draft.unknown_slots,
            kb_mutation: draft.kb_mutation,
            augmentation: draft.augmentation,
            action,
            entropy: self.state.b.entropy(),
            entropy_threshold: self.entropy_threshold(),
            delta: self.state.delta,
            delta_threshold: delta_threshold(self.kb.size()),
            tau_b: tau_b(self.kb.size()).expect("validated KB size"),
            kb_size: self.kb.size(),
            unknown_item_mass,
            unknown_recipient_mass,
            top_states,
            qa_cost: self.qa_cost,
            phase: self.state.phase,
            report: self.report.clone(),
        };
        self.turn += 1;
        self.turns_since_reset += 1;
        self.events.push(event);
        self.events.last().expect("just pushed")
    }
}

/// Maps the knowledge belief onto a rebuilt dialog model after `new_entity`
/// was learned for `slot`: known states keep their mass, unknown-`slot`
/// states move onto the matching states of the new entity, states unknown
/// in the other slot are dropped. Falls back to uniform if nothing remains.
pub fn reinitialize_belief(
    b_plus: &Belief,
    old_knowledge: &PomdpModel,
    new_dialog: &PomdpModel,
    slot: Category,
    new_entity: EntityId,
) -> Belief {
    let mut weights = vec![0.0; new_dialog.n_states()];
    for (s, p) in b_plus.probs().iter().enumerate() {
        let target = match (old_knowledge.state(s), slot) {
            (StateKey::Term, _) => continue,
            (k @ StateKey::Known { .. }, _) => k,
            (StateKey::UnknownItem { task, recipient }, Category::Item) => {
                StateKey::Known { task, item: new_entity, recipient }
            }
            (StateKey::UnknownRecipient { task, item }, Category::Recipient) => {
                StateKey::Known { task, item, recipient: new_entity }
            }
            _ => continue,
        };
        if let Some(t) = new_dialog.state_id(&target) {
            weights[t] += p;
        }
    }
    weights[TERM] = 0.0;
    Belief::from_weights(weights).unwrap_or_else(|_| Belief::uniform(new_dialog.n_states()))
}

fn capitalize(name: &str) -> String {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn display(kb: &KnowledgeBase, id: EntityId) -> String {
    kb.name(id).replace('_', " ")
}

fn reported(kb: &KnowledgeBase, s: &StateKey) -> ReportedRequest {
    match *s {
        StateKey::Known { task, item, recipient } => ReportedRequest {
            task: kb.name(task).to_string(),
            item: kb.name(item).to_string(),
            recipient: kb.name(recipient).to_string(),
        },
        _ => unreachable!("dialog reports name known states"),
    }
}

pub fn name_request_text(slot: Category) -> String {
    match slot {
        Category::Recipient => {
            "It seems I do not know the person you are talking about. Please write their name so I can learn it."
                .into()
        }
        _ => "It seems I do not know the item you are talking about. Please write its name so I can learn it.".into(),
    }
}

/// Surface text of a dialog action.
pub fn action_text(kb: &KnowledgeBase, action: &ActionKind) -> String {
    match *action {
        ActionKind::Ask(Category::Task) => "What should I do?".into(),
        ActionKind::Ask(Category::Item) => "What item should I bring?".into(),
        ActionKind::Ask(Category::Recipient) => "Who should I bring the item to?".into(),
        ActionKind::Confirm(e) => match e.category {
            Category::Task => format!("Do you want me to do a {}?", display(kb, e)),
            Category::Item => format!("Do you want me to deliver {}?", display(kb, e)),
            Category::Recipient => format!("Is this delivery for {}?", capitalize(&display(kb, e))),
        },
        ActionKind::ConfirmUnknown(Category::Recipient) => "Is this for someone I do not know?".into(),
        ActionKind::ConfirmUnknown(_) => "Is this something I do not know?".into(),
        ActionKind::Report(StateKey::Known { task, item, recipient }) => {
            let verb = if kb.name(task) == "delivery" {
                "brings".to_string()
            } else {
                format!("performs {} with", display(kb, task))
            };
            format!("Execute: Robot {verb} {} for {}", display(kb, item), capitalize(&display(kb, recipient)))
        }
        ActionKind::Report(s) => format!("Execute: {}", s.label(kb)),
    }
}
