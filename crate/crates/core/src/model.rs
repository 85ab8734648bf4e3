//! Explicit finite POMDPs for the dialog track and the knowledge track.
//!
//! Both tracks share one layout rule: every element (state, action,
//! observation) sorts by the learning generation of the newest entity it
//! mentions, so growing the KB only ever appends. The knowledge track lists
//! the full dialog track first and its extra elements after, which makes the
//! dialog model the restriction of the knowledge model to known states.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{entity_order_key, Category, EntityId, KnowledgeBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateKey {
    Term,
    Known { task: EntityId, item: EntityId, recipient: EntityId },
    /// Known task and recipient, item not in the KB.
    UnknownItem { task: EntityId, recipient: EntityId },
    /// Known task and item, recipient not in the KB.
    UnknownRecipient { task: EntityId, item: EntityId },
}

/// Value a state assigns to one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotValue {
    Known(EntityId),
    Unknown,
}

impl StateKey {
    pub fn slot(&self, category: Category) -> Option<SlotValue> {
        use SlotValue::*;
        let (t, i, r) = match *self {
            StateKey::Term => return None,
            StateKey::Known { task, item, recipient } => (Known(task), Known(item), Known(recipient)),
            StateKey::UnknownItem { task, recipient } => (Known(task), Unknown, Known(recipient)),
            StateKey::UnknownRecipient { task, item } => (Known(task), Known(item), Unknown),
        };
        Some(match category {
            Category::Task => t,
            Category::Item => i,
            Category::Recipient => r,
        })
    }

    pub fn is_known(&self) -> bool {
        matches!(self, StateKey::Known { .. })
    }

    pub fn label(&self, kb: &KnowledgeBase) -> String {
        match *self {
            StateKey::Term => "term".into(),
            StateKey::Known { task, item, recipient } => {
                format!("({}, {}, {})", kb.name(task), kb.name(item), kb.name(recipient))
            }
            StateKey::UnknownItem { task, recipient } => {
                format!("({}, ?item, {})", kb.name(task), kb.name(recipient))
            }
            StateKey::UnknownRecipient { task, item } => {
                format!("({}, {}, ?recipient)", kb.name(task), kb.name(item))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "snake_case")]
pub enum ActionKind {
    /// Open "wh" question about a slot.
    Ask(Category),
    /// Yes/no question about one slot value.
    Confirm(EntityId),
    /// Yes/no question "is it something I don't know?" (knowledge track).
    ConfirmUnknown(Category),
    /// Terminal report of a state.
    Report(StateKey),
}

impl ActionKind {
    pub fn is_question(&self) -> bool {
        !matches!(self, ActionKind::Report(_))
    }

    pub fn is_confirmation(&self) -> bool {
        matches!(self, ActionKind::Confirm(_) | ActionKind::ConfirmUnknown(_))
    }

    pub fn label(&self, kb: &KnowledgeBase) -> String {
        match self {
            ActionKind::Ask(c) => format!("ask_{c}"),
            ActionKind::Confirm(e) => format!("confirm_{}_{}", e.category, kb.name(*e)),
            ActionKind::ConfirmUnknown(c) => format!("confirm_unknown_{c}"),
            ActionKind::Report(s) => format!("report{}", s.label(kb)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "snake_case")]
pub enum ObsKind {
    Yes,
    No,
    Inapplicable,
    Value(EntityId),
    /// "Something I don't know" for a slot (knowledge track only).
    Unknown(Category),
}

impl ObsKind {
    pub fn label(&self, kb: &KnowledgeBase) -> String {
        match self {
            ObsKind::Yes => "yes".into(),
            ObsKind::No => "no".into(),
            ObsKind::Inapplicable => "inapplicable".into(),
            ObsKind::Value(e) => format!("{}:{}", e.category, kb.name(*e)),
            ObsKind::Unknown(c) => format!("unknown_{c}"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid noise model: {0}")]
    Noise(String),
    #[error("invalid rewards: {0}")]
    Rewards(String),
    #[error("discount must lie in (0, 1), got {0}")]
    Discount(f64),
    #[error("invalid tensor: {0}")]
    Tensor(String),
}

/// Observation channel accuracy.
///
/// Slot accuracy decays with the number of candidates:
/// `p_slot(k) = p_floor + (p_base - p_floor) * k_ref / k`, capped at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub p_confirm: f64,
    pub p_base: f64,
    pub p_floor: f64,
    pub k_ref: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { p_confirm: 0.8, p_base: 0.8, p_floor: 0.5, k_ref: 4.0 }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel { p_confirm: 1.0, p_base: 1.0, p_floor: 1.0, k_ref: 4.0 }
    }

    pub fn p_slot(&self, k: usize) -> f64 {
        if k <= 1 {
            return 1.0;
        }
        (self.p_floor + (self.p_base - self.p_floor) * self.k_ref / k as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Noise(m.to_string()));
        if !(self.p_confirm > 0.5 && self.p_confirm <= 1.0) {
            return err("p_confirm must lie in (0.5, 1]");
        }
        if !(self.p_floor >= 0.5 && self.p_floor <= self.p_base && self.p_base <= 1.0) {
            return err("need 0.5 <= p_floor <= p_base <= 1");
        }
        if self.k_ref < 1.0 {
            return err("k_ref must be at least 1");
        }
        // p_slot(k) > 1/k holds for k >= 3 once p_floor >= 0.5; k = 2 is the tight case.
        if self.p_slot(2) <= 0.5 {
            return err("p_slot(2) must exceed 1/2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rewards {
    pub confirm: f64,
    pub wh: f64,
    pub correct: f64,
    pub wrong: f64,
}

impl Default for Rewards {
    fn default() -> Self {
        Rewards { confirm: -1.0, wh: -1.5, correct: 20.0, wrong: -20.0 }
    }
}

impl Rewards {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.confirm < 0.0 && self.wh < 0.0) {
            return Err(ModelError::Rewards("question rewards must be negative".into()));
        }
        if !(self.correct > 0.0 && self.wrong < 0.0) {
            return Err(ModelError::Rewards("need correct > 0 > wrong".into()));
        }
        let question = self.confirm.abs().max(self.wh.abs());
        if self.correct.abs() < 10.0 * question || self.wrong.abs() < 10.0 * question {
            return Err(ModelError::Rewards("report rewards must be at least 10x question costs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub noise: NoiseModel,
    pub rewards: Rewards,
    pub discount: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { noise: NoiseModel::default(), rewards: Rewards::default(), discount: 0.95 }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.noise.validate()?;
        self.rewards.validate()?;
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(ModelError::Discount(self.discount));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Dialog,
    Knowledge,
}

/// Dense finite POMDP. Tensors are row-major:
/// `T[a][s][s']`, `O[a][s'][z]`, `R[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PomdpModel {
    pub track: Track,
    states: Vec<StateKey>,
    actions: Vec<ActionKind>,
    observations: Vec<ObsKind>,
    transition: Vec<f64>,
    observation: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    state_index: HashMap<StateKey, usize>,
    action_index: HashMap<ActionKind, usize>,
    obs_index: HashMap<ObsKind, usize>,
    /// Observations with non-zero probability for each action.
    support: Vec<Vec<usize>>,
}

pub const TERM: usize = 0;

impl PomdpModel {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn states(&self) -> &[StateKey] {
        &self.states
    }

    pub fn actions(&self) -> &[ActionKind] {
        &self.actions
    }

    pub fn observations(&self) -> &[ObsKind] {
        &self.observations
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn state(&self, s: usize) -> StateKey {
        self.states[s]
    }

    pub fn action(&self, a: usize) -> ActionKind {
        self.actions[a]
    }

    pub fn obs(&self, z: usize) -> ObsKind {
        self.observations[z]
    }

    pub fn state_id(&self, key: &StateKey) -> Option<usize> {
        self.state_index.get(key).copied()
    }

    pub fn action_id(&self, key: &ActionKind) -> Option<usize> {
        self.action_index.get(key).copied()
    }

    pub fn obs_id(&self, key: &ObsKind) -> Option<usize> {
        self.obs_index.get(key).copied()
    }

    #[inline]
    pub fn t(&self, s: usize, a: usize, s2: usize) -> f64 {
        let n = self.states.len();
        self.transition[(a * n + s) * n + s2]
    }

    #[inline]
    pub fn o(&self, s2: usize, a: usize, z: usize) -> f64 {
        let nz = self.observations.len();
        self.observation[(a * self.states.len() + s2) * nz + z]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.actions.len() + a]
    }

    /// Observations reachable after `a` from some state.
    pub fn observation_support(&self, a: usize) -> &[usize] {
        &self.support[a]
    }

    /// Observation ids carrying a value of `category`.
    pub fn slot_observations(&self, category: Category) -> Vec<usize> {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| matches!(o, ObsKind::Value(e) if e.category == category))
            .map(|(z, _)| z)
            .collect()
    }

    /// Content hash of the tensors and discount. Element labels are not
    /// hashed, so relabelled but numerically identical models share a key.
    /// Same layout with replaced `T` and `O` tensors; every row must be a
    /// probability distribution.
    pub fn with_tensors(&self, transition: Vec<f64>, observation: Vec<f64>) -> Result<PomdpModel, ModelError> {
        let (n, na, nz) = (self.n_states(), self.n_actions(), self.n_observations());
        if transition.len() != na * n * n || observation.len() != na * n * nz {
            return Err(ModelError::Tensor("shape mismatch".into()));
        }
        let stochastic = |rows: &[f64], width: usize| {
            rows.chunks(width).all(|r| r.iter().all(|p| *p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9)
        };
        if !stochastic(&transition, n) || !stochastic(&observation, nz) {
            return Err(ModelError::Tensor("rows must be non-negative and sum to 1".into()));
        }
        let support = (0..na)
            .map(|a| (0..nz).filter(|&z| (0..n).any(|s| observation[(a * n + s) * nz + z] > 0.0)).collect())
            .collect();
        Ok(PomdpModel { transition, observation, support, ..self.clone() })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for dim in [self.states.len(), self.actions.len(), self.observations.len()] {
            h.update((dim as u64).to_le_bytes());
        }
        for v in self.transition.iter().chain(&self.observation).chain(&self.reward) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(self.discount.to_bits().to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Plain-text dump, one section per tensor, zero entries omitted.
    pub fn dump(&self, kb: &KnowledgeBase) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# track {:?}", self.track);
        let _ = writeln!(out, "discount {}", self.discount);
        let _ = writeln!(out, "\n[states] {}", self.states.len());
        for (i, s) in self.states.iter().enumerate() {
            let _ = writeln!(out, "{i} {}", s.label(kb));
        }
        let _ = writeln!(out, "\n[actions] {}", self.actions.len());
        for (i, a) in self.actions.iter().enumerate() {
            let _ = writeln!(out, "{i} {}", a.label(kb));
        }
        let _ = writeln!(out, "\n[observations] {}", self.observations.len());
        for (i, z) in self.observations.iter().enumerate() {
            let _ = writeln!(out, "{i} {}", z.label(kb));
        }
        let n = self.states.len();
        let _ = writeln!(out, "\n[T] a s s' p");
        for a in 0..self.actions.len() {
            for s in 0..n {
                for s2 in 0..n {
                    let p = self.t(s, a, s2);
                    if p != 0.0 {
                        let _ = writeln!(out, "{a} {s} {s2} {p}");
                    }
                }
            }
        }
        let _ = writeln!(out, "\n[O] a s' z p");
        for a in 0..self.actions.len() {
            for s2 in 0..n {
                for z in 0..self.observations.len() {
                    let p = self.o(s2, a, z);
                    if p != 0.0 {
                        let _ = writeln!(out, "{a} {s2} {z} {p}");
                    }
                }
            }
        }
        let _ = writeln!(out, "\n[R] s a r");
        for s in 0..n {
            for a in 0..self.actions.len() {
                let r = self.r(s, a);
                if r != 0.0 {
                    let _ = writeln!(out, "{s} {a} {r}");
                }
            }
        }
        out
    }
}

fn state_sort_key(kb: &KnowledgeBase, key: &StateKey) -> (u32, Vec<(u32, usize, u32)>) {
    let ids: Vec<EntityId> = match *key {
        StateKey::Term => vec![],
        StateKey::Known { task, item, recipient } => vec![task, item, recipient],
        StateKey::UnknownItem { task, recipient } => vec![task, recipient],
        StateKey::UnknownRecipient { task, item } => vec![task, item],
    };
    let keys: Vec<_> = ids.iter().map(|id| entity_order_key(kb, *id)).collect();
    let generation = keys.iter().map(|k| k.0).max().unwrap_or(0);
    (generation, keys)
}

fn sorted_by_key<T, K: Ord>(mut items: Vec<T>, key: impl Fn(&T) -> K) -> Vec<T> {
    items.sort_by_key(|x| key(x));
    items
}

fn ids(kb: &KnowledgeBase, c: Category) -> Vec<EntityId> {
    kb.entities(c).iter().map(|e| e.id).collect()
}

fn dialog_layout(kb: &KnowledgeBase) -> (Vec<StateKey>, Vec<ActionKind>, Vec<ObsKind>) {
    let tasks = ids(kb, Category::Task);
    let items = ids(kb, Category::Item);
    let recipients = ids(kb, Category::Recipient);

    let mut known = Vec::with_capacity(tasks.len() * items.len() * recipients.len());
    for &task in &tasks {
        for &item in &items {
            for &recipient in &recipients {
                known.push(StateKey::Known { task, item, recipient });
            }
        }
    }
    let known = sorted_by_key(known, |s| state_sort_key(kb, s));
    let mut states = vec![StateKey::Term];
    states.extend(known.iter().copied());

    // (generation, kind rank, tie-breaker)
    let mut actions: Vec<((u32, u8, Vec<(u32, usize, u32)>), ActionKind)> = Vec::new();
    for (rank, c) in Category::ALL.iter().enumerate() {
        actions.push(((0, 0, vec![(0, rank, 0)]), ActionKind::Ask(*c)));
    }
    for e in kb.all_entities() {
        let k = entity_order_key(kb, e.id);
        actions.push(((k.0, 1, vec![k]), ActionKind::Confirm(e.id)));
    }
    for s in &known {
        let (generation, keys) = state_sort_key(kb, s);
        actions.push(((generation, 2, keys), ActionKind::Report(*s)));
    }
    actions.sort_by(|a, b| a.0.cmp(&b.0));
    let actions = actions.into_iter().map(|(_, a)| a).collect();

    let mut observations = vec![ObsKind::Yes, ObsKind::No, ObsKind::Inapplicable];
    let values = sorted_by_key(kb.all_entities().map(|e| e.id).collect(), |id| entity_order_key(kb, *id));
    observations.extend(values.into_iter().map(ObsKind::Value));
    (states, actions, observations)
}

/// Builds the dialog-track POMDP over `S = T x I x R ∪ {term}`.
pub fn build_dialog_pomdp(kb: &KnowledgeBase, params: &ModelParams) -> Result<PomdpModel, ModelError> {
    params.validate()?;
    let (states, actions, observations) = dialog_layout(kb);
    Ok(assemble(kb, params, Track::Dialog, states, actions, observations))
}

/// Builds the knowledge-track POMDP: the dialog track plus states, actions
/// and observations for one unknown item or recipient.
pub fn build_knowledge_pomdp(kb: &KnowledgeBase, params: &ModelParams) -> Result<PomdpModel, ModelError> {
    params.validate()?;
    let (mut states, mut actions, mut observations) = dialog_layout(kb);
    let tasks = ids(kb, Category::Task);
    let mut unknown_recipient = Vec::new();
    for &task in &tasks {
        for &item in &ids(kb, Category::Item) {
            unknown_recipient.push(StateKey::UnknownRecipient { task, item });
        }
    }
    let mut unknown_item = Vec::new();
    for &task in &tasks {
        for &recipient in &ids(kb, Category::Recipient) {
            unknown_item.push(StateKey::UnknownItem { task, recipient });
        }
    }
    let unknown_recipient = sorted_by_key(unknown_recipient, |s| state_sort_key(kb, s));
    let unknown_item = sorted_by_key(unknown_item, |s| state_sort_key(kb, s));
    states.extend(unknown_recipient.iter().chain(&unknown_item).copied());

    actions.push(ActionKind::ConfirmUnknown(Category::Item));
    actions.push(ActionKind::ConfirmUnknown(Category::Recipient));
    actions.extend(unknown_recipient.iter().chain(&unknown_item).map(|s| ActionKind::Report(*s)));

    observations.push(ObsKind::Unknown(Category::Item));
    observations.push(ObsKind::Unknown(Category::Recipient));
    Ok(assemble(kb, params, Track::Knowledge, states, actions, observations))
}

/// Rebuilds both tracks after the KB gained entities. Elements of the old
/// dialog model keep their indices.
pub fn rebuild_after_augmentation(
    old_dialog: &PomdpModel,
    new_kb: &KnowledgeBase,
    params: &ModelParams,
) -> Result<(PomdpModel, PomdpModel), ModelError> {
    let dialog = build_dialog_pomdp(new_kb, params)?;
    let knowledge = build_knowledge_pomdp(new_kb, params)?;
    debug_assert!(old_dialog.states.iter().zip(&dialog.states).all(|(a, b)| a == b));
    debug_assert!(old_dialog.actions.iter().zip(&dialog.actions).all(|(a, b)| a == b));
    debug_assert!(old_dialog.observations.iter().zip(&dialog.observations).all(|(a, b)| a == b));
    Ok((dialog, knowledge))
}

fn assemble(
    kb: &KnowledgeBase,
    params: &ModelParams,
    track: Track,
    states: Vec<StateKey>,
    actions: Vec<ActionKind>,
    observations: Vec<ObsKind>,
) -> PomdpModel {
    let n = states.len();
    let na = actions.len();
    let nz = observations.len();
    let state_index: HashMap<_, _> = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let action_index: HashMap<_, _> = actions.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let obs_index: HashMap<_, _> = observations.iter().enumerate().map(|(i, z)| (*z, i)).collect();

    let mut transition = vec![0.0; na * n * n];
    let mut observation = vec![0.0; na * n * nz];
    let mut reward = vec![0.0; n * na];
    let noise = params.noise;
    let rw = params.rewards;
    let pc = noise.p_confirm;
    let z_yes = obs_index[&ObsKind::Yes];
    let z_no = obs_index[&ObsKind::No];
    let z_inapplicable = obs_index[&ObsKind::Inapplicable];
    let values: HashMap<Category, Vec<usize>> = Category::ALL
        .iter()
        .map(|c| {
            let zs = ids(kb, *c).iter().map(|e| obs_index[&ObsKind::Value(*e)]).collect();
            (*c, zs)
        })
        .collect();

    for (a, action) in actions.iter().enumerate() {
        for (s, state) in states.iter().enumerate() {
            // Transitions: questions self-loop, reports end the dialog.
            let next = if action.is_question() { s } else { TERM };
            transition[(a * n + s) * n + next] = 1.0;

            reward[s * na + a] = match (state, action) {
                (StateKey::Term, _) => 0.0,
                (_, ActionKind::Ask(_)) => rw.wh,
                (_, ActionKind::Confirm(_) | ActionKind::ConfirmUnknown(_)) => rw.confirm,
                (_, ActionKind::Report(target)) if target == state => rw.correct,
                (_, ActionKind::Report(_)) => rw.wrong,
            };

            // Observations are indexed by the post-action state `s`.
            let row = &mut observation[(a * n + s) * nz..(a * n + s + 1) * nz];
            if *state == StateKey::Term || !action.is_question() {
                row[z_inapplicable] = 1.0;
                continue;
            }
            match *action {
                ActionKind::Ask(c) => {
                    let zs = &values[&c];
                    let k = zs.len();
                    match state.slot(c) {
                        Some(SlotValue::Known(v)) => {
                            let p = noise.p_slot(k);
                            let truth = obs_index[&ObsKind::Value(v)];
                            if k > 1 {
                                let rest = (1.0 - p) / (k - 1) as f64;
                                for &z in zs {
                                    row[z] = rest;
                                }
                            }
                            row[truth] = if k > 1 { p } else { 1.0 };
                        }
                        // An unknown value reads as an arbitrary known one.
                        _ => {
                            for &z in zs {
                                row[z] = 1.0 / k as f64;
                            }
                        }
                    }
                }
                ActionKind::Confirm(e) => {
                    let truthful_yes = state.slot(e.category) == Some(SlotValue::Known(e));
                    let (z_true, z_false) = if truthful_yes { (z_yes, z_no) } else { (z_no, z_yes) };
                    row[z_true] = pc;
                    row[z_false] += 1.0 - pc;
                }
                ActionKind::ConfirmUnknown(c) => {
                    let z_unknown = obs_index[&ObsKind::Unknown(c)];
                    let (z_true, z_false) = if state.slot(c) == Some(SlotValue::Unknown) {
                        (z_unknown, z_no)
                    } else {
                        (z_no, z_unknown)
                    };
                    row[z_true] = pc;
                    row[z_false] += 1.0 - pc;
                }
                ActionKind::Report(_) => unreachable!(),
            }
        }
    }

    let support = (0..na)
        .map(|a| {
            (0..nz)
                .filter(|&z| (0..n).any(|s| observation[(a * n + s) * nz + z] > 0.0))
                .collect()
        })
        .collect();

    PomdpModel {
        track,
        states,
        actions,
        observations,
        transition,
        observation,
        reward,
        discount: params.discount,
        state_index,
        action_index,
        obs_index,
        support,
    }
}

/// Simulated channel noise: given the observation a truthful answer would
/// produce, samples what the agent actually perceives. Applies the same
/// probabilities as the model's observation function.
pub fn corrupt_observation<R: rand::Rng + ?Sized>(
    model: &PomdpModel,
    noise: &NoiseModel,
    clean: usize,
    rng: &mut R,
) -> usize {
    match model.obs(clean) {
        ObsKind::Yes | ObsKind::No => {
            if rng.gen::<f64>() < noise.p_confirm {
                clean
            } else if model.obs(clean) == ObsKind::Yes {
                model.obs_id(&ObsKind::No).expect("model has z-")
            } else {
                model.obs_id(&ObsKind::Yes).expect("model has z+")
            }
        }
        ObsKind::Value(e) => {
            let zs = model.slot_observations(e.category);
            let k = zs.len();
            if k <= 1 || rng.gen::<f64>() < noise.p_slot(k) {
                clean
            } else {
                let others: Vec<usize> = zs.into_iter().filter(|z| *z != clean).collect();
                others[rng.gen_range(0..others.len())]
            }
        }
        // An unknown-entity answer is heard as a plain "no" when misheard.
        ObsKind::Unknown(_) => {
            if rng.gen::<f64>() < noise.p_confirm {
                clean
            } else {
                model.obs_id(&ObsKind::No).expect("model has z-")
            }
        }
        ObsKind::Inapplicable => clean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb(items: usize, recipients: usize) -> KnowledgeBase {
        let items: Vec<String> = (0..items).map(|i| format!("item{i}")).collect();
        let recipients: Vec<String> = (0..recipients).map(|i| format!("person{i}")).collect();
        let items: Vec<&str> = items.iter().map(String::as_str).collect();
        let recipients: Vec<&str> = recipients.iter().map(String::as_str).collect();
        KnowledgeBase::from_names(&["delivery"], &items, &recipients).unwrap()
    }

    fn count(model: &PomdpModel, f: impl Fn(&ActionKind) -> bool) -> usize {
        model.actions().iter().filter(|a| f(a)).count()
    }

    #[test]
    fn dialog_model_counts() {
        let m = build_dialog_pomdp(&kb(4, 4), &ModelParams::default()).unwrap();
        assert_eq!(m.n_states(), 17);
        assert_eq!(count(&m, |a| matches!(a, ActionKind::Report(_))), 16);
        assert_eq!(count(&m, |a| matches!(a, ActionKind::Ask(_))), 3);
        assert_eq!(count(&m, |a| matches!(a, ActionKind::Confirm(_))), 9);
        assert_eq!(m.n_observations(), 3 + 9);
        assert_eq!(m.state(TERM), StateKey::Term);
    }

    #[test]
    fn confirmation_accuracy_is_p_confirm() {
        let kb = kb(4, 4);
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let coffee = kb.find(Category::Item, "item0").unwrap();
        let a = m.action_id(&ActionKind::Confirm(coffee)).unwrap();
        let yes = m.obs_id(&ObsKind::Yes).unwrap();
        let no = m.obs_id(&ObsKind::No).unwrap();
        for (s, key) in m.states().iter().enumerate().skip(1) {
            let matches = key.slot(Category::Item) == Some(SlotValue::Known(coffee));
            let expected = if matches { 0.8 } else { 0.2 };
            assert!((m.o(s, a, yes) - expected).abs() < 1e-12);
            assert!((m.o(s, a, no) - (1.0 - expected)).abs() < 1e-12);
        }
    }

    #[test]
    fn wh_rows_spread_error_mass() {
        let kb = kb(4, 4);
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let a = m.action_id(&ActionKind::Ask(Category::Recipient)).unwrap();
        let zs = m.slot_observations(Category::Recipient);
        let s = 1;
        let StateKey::Known { recipient, .. } = m.state(s) else { panic!() };
        let truth = m.obs_id(&ObsKind::Value(recipient)).unwrap();
        for z in zs {
            let expected = if z == truth { 0.8 } else { 0.2 / 3.0 };
            assert!((m.o(s, a, z) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_rows_are_one_hot() {
        let m = build_dialog_pomdp(&kb(4, 4), &ModelParams { noise: NoiseModel::noiseless(), ..Default::default() })
            .unwrap();
        for a in 0..m.n_actions() {
            for s in 0..m.n_states() {
                let nonzero: Vec<f64> = (0..m.n_observations()).map(|z| m.o(s, a, z)).filter(|p| *p > 0.0).collect();
                assert_eq!(nonzero, vec![1.0]);
            }
        }
    }

    #[test]
    fn single_value_slot_puts_all_mass_on_truth() {
        let m = build_dialog_pomdp(&kb(4, 4), &ModelParams::default()).unwrap();
        let a = m.action_id(&ActionKind::Ask(Category::Task)).unwrap();
        let z = m.slot_observations(Category::Task)[0];
        for s in 1..m.n_states() {
            assert_eq!(m.o(s, a, z), 1.0);
        }
    }

    #[test]
    fn reward_structure() {
        let kb = kb(4, 4);
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        for (a, action) in m.actions().iter().enumerate() {
            assert_eq!(m.r(TERM, a), 0.0);
            for s in 1..m.n_states() {
                let expected = match action {
                    ActionKind::Ask(_) => -1.5,
                    ActionKind::Confirm(_) => -1.0,
                    ActionKind::Report(target) if *target == m.state(s) => 20.0,
                    ActionKind::Report(_) => -20.0,
                    ActionKind::ConfirmUnknown(_) => unreachable!(),
                };
                assert_eq!(m.r(s, a), expected);
                if action.is_question() {
                    assert_eq!(m.t(s, a, s), 1.0);
                } else {
                    assert_eq!(m.t(s, a, TERM), 1.0);
                }
            }
        }
    }

    #[test]
    fn knowledge_state_counts() {
        let m = build_knowledge_pomdp(&kb(4, 4), &ModelParams::default()).unwrap();
        assert_eq!(m.n_states(), 25);
        let mut small = KnowledgeBase::from_names(&["delivery"], &["a", "b"], &["c", "d"]).unwrap();
        assert_eq!(build_knowledge_pomdp(&small, &ModelParams::default()).unwrap().n_states(), 5 + 2 + 2);
        small.add_entity(Category::Item, "e", 1).unwrap();
        assert_eq!(build_knowledge_pomdp(&small, &ModelParams::default()).unwrap().n_states(), 7 + 2 + 3);
    }

    #[test]
    fn unknown_recipient_denies_known_recipients() {
        let kb = kb(4, 4);
        let m = build_knowledge_pomdp(&kb, &ModelParams::default()).unwrap();
        let task = kb.find(Category::Task, "delivery").unwrap();
        let item = kb.find(Category::Item, "item0").unwrap();
        let alice = kb.find(Category::Recipient, "person0").unwrap();
        let s = m.state_id(&StateKey::UnknownRecipient { task, item }).unwrap();
        let a = m.action_id(&ActionKind::Confirm(alice)).unwrap();
        let no = m.obs_id(&ObsKind::No).unwrap();
        assert!((m.o(s, a, no) - 0.8).abs() < 1e-12);
        let a = m.action_id(&ActionKind::ConfirmUnknown(Category::Recipient)).unwrap();
        let hat = m.obs_id(&ObsKind::Unknown(Category::Recipient)).unwrap();
        assert!((m.o(s, a, hat) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dialog_is_restriction_of_knowledge() {
        let kb = kb(3, 4);
        let p = ModelParams::default();
        let d = build_dialog_pomdp(&kb, &p).unwrap();
        let k = build_knowledge_pomdp(&kb, &p).unwrap();
        assert_eq!(&k.states()[..d.n_states()], d.states());
        assert_eq!(&k.actions()[..d.n_actions()], d.actions());
        assert_eq!(&k.observations()[..d.n_observations()], d.observations());
        for a in 0..d.n_actions() {
            for s in 0..d.n_states() {
                assert_eq!(d.r(s, a), k.r(s, a));
                for s2 in 0..d.n_states() {
                    assert_eq!(d.t(s, a, s2), k.t(s, a, s2));
                }
                for z in 0..d.n_observations() {
                    assert_eq!(d.o(s, a, z), k.o(s, a, z));
                }
                for z in d.n_observations()..k.n_observations() {
                    assert_eq!(k.o(s, a, z), 0.0);
                }
            }
        }
    }

    #[test]
    fn rebuild_keeps_indices_and_grows() {
        let mut kb = kb(4, 4);
        let p = ModelParams::default();
        let old = build_dialog_pomdp(&kb, &p).unwrap();
        let (same, _) = rebuild_after_augmentation(&old, &kb, &p).unwrap();
        assert_eq!(same, old);
        let task = kb.find(Category::Task, "delivery").unwrap();
        let item = kb.find(Category::Item, "item0").unwrap();
        let alice = kb.find(Category::Recipient, "person0").unwrap();
        let key = StateKey::Known { task, item, recipient: alice };
        let before = old.state_id(&key).unwrap();
        kb.add_entity(Category::Recipient, "dennis", 8).unwrap();
        let (dialog, knowledge) = rebuild_after_augmentation(&old, &kb, &p).unwrap();
        assert_eq!(dialog.n_states() - 1, 20);
        assert_eq!(dialog.state_id(&key), Some(before));
        assert_eq!(&dialog.states()[..old.n_states()], old.states());
        assert_eq!(&dialog.actions()[..old.n_actions()], old.actions());
        assert_eq!(&dialog.observations()[..old.n_observations()], old.observations());
        assert_eq!(knowledge.n_states(), 21 + 4 + 5);
    }

    #[test]
    fn fingerprint_ignores_names() {
        let p = ModelParams::default();
        let a = build_dialog_pomdp(&kb(3, 3), &p).unwrap();
        let other = KnowledgeBase::from_names(&["x"], &["a", "b", "c"], &["d", "e", "f"]).unwrap();
        let b = build_dialog_pomdp(&other, &p).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = build_dialog_pomdp(&kb(3, 4), &p).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn p_slot_decreases_with_candidates() {
        let n = NoiseModel::default();
        assert_eq!(n.p_slot(4), 0.8);
        assert_eq!(n.p_slot(2), 1.0);
        let mut prev = n.p_slot(2);
        for k in 3..60 {
            let p = n.p_slot(k);
            assert!(p <= prev && p > 1.0 / k as f64);
            prev = p;
        }
        assert!(NoiseModel { p_confirm: 0.5, ..n }.validate().is_err());
    }

    #[test]
    fn reward_ratio_is_enforced() {
        let bad = Rewards { correct: 5.0, ..Rewards::default() };
        assert!(bad.validate().is_err());
        assert!(Rewards::default().validate().is_ok());
    }

    #[test]
    fn dump_has_all_sections() {
        let kb = kb(2, 2);
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let text = m.dump(&kb);
        for section in ["[states] 5", "[actions]", "[observations]", "[T]", "[O]", "[R]"] {
            assert!(text.contains(section), "missing {section}");
        }
    }
}
