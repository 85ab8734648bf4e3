//! Knowledge base: typed entity sets plus the surface-form lexicon.
//!
//! The on-disk form is a fact file, one fact per line:
//!
//! ```text
//! % comment
//! task(delivery).
//! item(coffee).
//! recipient(alice).
//! synonym(bring, delivery).
//! synonym("coca cola", coke).
//! affirm(yes).
//! deny(no).
//! learned(recipient, dennis, 8).
//! ```
//!
//! Entities keep their per-category insertion order. That order, together
//! with the learning order of `learned` facts, fixes the state and action
//! indices of the models built from the KB.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entity category. Task types, deliverable items and recipients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Task,
    Item,
    Recipient,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Task, Category::Item, Category::Recipient];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Task => "task",
            Category::Item => "item",
            Category::Recipient => "recipient",
        }
    }

    fn rank(self) -> usize {
        match self {
            Category::Task => 0,
            Category::Item => 1,
            Category::Recipient => 2,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task" => Ok(Category::Task),
            "item" => Ok(Category::Item),
            "recipient" => Ok(Category::Recipient),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

/// Entity identifier: category plus position within that category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId {
    pub category: Category,
    pub ordinal: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Provenance {
    Seed,
    /// Learned during a dialog. `turn` is the dialog turn that created it and
    /// `generation` its position in the KB's learning order (1-based).
    Learned { turn: u32, generation: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub canonical_name: String,
    pub provenance: Provenance,
}

impl Entity {
    /// Seed entities are generation 0; each learned entity opens a new one.
    pub fn generation(&self) -> u32 {
        match self.provenance {
            Provenance::Seed => 0,
            Provenance::Learned { generation, .. } => generation,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KbError {
    #[error("`{name}` is already known as a {category}")]
    AlreadyKnown { category: Category, name: String },
    #[error("surface form `{surface}` already refers to a {existing}")]
    SurfaceConflict { surface: String, existing: Category },
    #[error("empty entity name")]
    EmptyName,
    #[error("knowledge base needs at least {min} {category} entities, found {found}")]
    TooFewEntities { category: Category, min: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no entity named `{0}`")]
    UnknownEntity(String),
}

/// Minimum entity counts that keep the dialog POMDP non-degenerate.
pub const MIN_TASKS: usize = 1;
pub const MIN_ITEMS: usize = 2;
pub const MIN_RECIPIENTS: usize = 2;

/// Surface forms to entities, plus yes/no markers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, EntityId>,
    affirm: Vec<String>,
    deny: Vec<String>,
}

impl Lexicon {
    pub fn lookup(&self, surface: &str) -> Option<EntityId> {
        self.entries.get(surface).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, EntityId)> {
        self.entries.iter().map(|(s, id)| (s.as_str(), *id))
    }

    pub fn surfaces_of(&self, id: EntityId) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, e)| **e == id)
            .map(|(s, _)| s.as_str())
    }

    pub fn is_affirm(&self, token: &str) -> bool {
        self.affirm.iter().any(|w| w == token)
    }

    pub fn is_deny(&self, token: &str) -> bool {
        self.deny.iter().any(|w| w == token)
    }

    pub fn affirm_markers(&self) -> &[String] {
        &self.affirm
    }

    pub fn deny_markers(&self) -> &[String] {
        &self.deny
    }

    /// Longest surface form in tokens, for greedy matching.
    pub fn max_surface_tokens(&self) -> usize {
        self.entries
            .keys()
            .map(|s| s.split(' ').count())
            .max()
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    tasks: Vec<Entity>,
    items: Vec<Entity>,
    recipients: Vec<Entity>,
    lexicon: Lexicon,
    /// Ids of learned entities in learning order.
    learned: Vec<EntityId>,
}

/// Lower-cases, strips punctuation and collapses whitespace.
pub fn normalize_surface(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '_' {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical atom for a (normalized) surface form: words joined with `_`.
pub fn canonical_atom(surface: &str) -> String {
    normalize_surface(surface).replace(' ', "_")
}

impl KnowledgeBase {
    /// Empty KB. Invariants are only checked by [`KnowledgeBase::validate`].
    fn empty() -> Self {
        KnowledgeBase {
            tasks: Vec::new(),
            items: Vec::new(),
            recipients: Vec::new(),
            lexicon: Lexicon::default(),
            learned: Vec::new(),
        }
    }

    /// Builds a seed KB from entity names; the lexicon gets each name (with
    /// underscores read as spaces) plus the default yes/no markers.
    pub fn from_names(tasks: &[&str], items: &[&str], recipients: &[&str]) -> Result<Self, KbError> {
        let mut kb = KnowledgeBase::empty();
        for (category, names) in [
            (Category::Task, tasks),
            (Category::Item, items),
            (Category::Recipient, recipients),
        ] {
            for name in names {
                kb.insert(category, name, Provenance::Seed)?;
            }
        }
        kb.lexicon.affirm = ["yes", "yeah", "yep", "sure", "correct", "right"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        kb.lexicon.deny = ["no", "nope", "nah", "wrong", "incorrect"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        kb.validate()?;
        Ok(kb)
    }

    pub fn validate(&self) -> Result<(), KbError> {
        for (category, min) in [
            (Category::Task, MIN_TASKS),
            (Category::Item, MIN_ITEMS),
            (Category::Recipient, MIN_RECIPIENTS),
        ] {
            let found = self.entities(category).len();
            if found < min {
                return Err(KbError::TooFewEntities { category, min, found });
            }
        }
        Ok(())
    }

    pub fn entities(&self, category: Category) -> &[Entity] {
        match category {
            Category::Task => &self.tasks,
            Category::Item => &self.items,
            Category::Recipient => &self.recipients,
        }
    }

    fn entities_mut(&mut self, category: Category) -> &mut Vec<Entity> {
        match category {
            Category::Task => &mut self.tasks,
            Category::Item => &mut self.items,
            Category::Recipient => &mut self.recipients,
        }
    }

    pub fn all_entities(&self) -> impl Iterator<Item = &Entity> {
        self.tasks.iter().chain(&self.items).chain(&self.recipients)
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities(id.category)[id.ordinal as usize]
    }

    pub fn name(&self, id: EntityId) -> &str {
        &self.entity(id).canonical_name
    }

    pub fn find(&self, category: Category, name: &str) -> Option<EntityId> {
        self.entities(category)
            .iter()
            .find(|e| e.canonical_name == name)
            .map(|e| e.id)
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn learned(&self) -> &[EntityId] {
        &self.learned
    }

    pub fn count(&self, category: Category) -> usize {
        self.entities(category).len()
    }

    /// Number of dialog states: every task/item/recipient combination plus
    /// the terminal state.
    pub fn size(&self) -> usize {
        self.tasks.len() * self.items.len() * self.recipients.len() + 1
    }

    fn insert(&mut self, category: Category, name: &str, provenance: Provenance) -> Result<EntityId, KbError> {
        let atom = canonical_atom(name);
        if atom.is_empty() {
            return Err(KbError::EmptyName);
        }
        let surface = atom.replace('_', " ");
        if let Some(existing) = self.lexicon.lookup(&surface) {
            return Err(if existing.category == category {
                KbError::AlreadyKnown { category, name: atom }
            } else {
                KbError::SurfaceConflict { surface, existing: existing.category }
            });
        }
        if self.find(category, &atom).is_some() {
            return Err(KbError::AlreadyKnown { category, name: atom });
        }
        let list = self.entities_mut(category);
        let id = EntityId { category, ordinal: list.len() as u32 };
        list.push(Entity { id, canonical_name: atom, provenance });
        self.lexicon.entries.insert(surface, id);
        Ok(id)
    }

    /// Adds a learned entity. `name` is the user's raw answer.
    pub fn add_entity(&mut self, category: Category, name: &str, turn: u32) -> Result<EntityId, KbError> {
        let generation = self.learned.len() as u32 + 1;
        let id = self.insert(category, name, Provenance::Learned { turn, generation })?;
        self.learned.push(id);
        Ok(id)
    }

    /// Registers an extra surface form for an existing entity.
    pub fn add_synonym(&mut self, surface: &str, id: EntityId) -> Result<(), KbError> {
        let surface = normalize_surface(surface);
        if surface.is_empty() {
            return Err(KbError::EmptyName);
        }
        match self.lexicon.lookup(&surface) {
            Some(existing) if existing == id => Ok(()),
            Some(existing) => Err(KbError::SurfaceConflict { surface, existing: existing.category }),
            None => {
                self.lexicon.entries.insert(surface, id);
                Ok(())
            }
        }
    }

    /// Renders the fact file. Output is canonical: parsing it and
    /// serializing again yields the same bytes.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for category in Category::ALL {
            for e in self.entities(category) {
                out.push_str(&format!("{}({}).\n", category, e.canonical_name));
            }
        }
        let mut synonyms: Vec<(&str, EntityId)> = self
            .lexicon
            .entries()
            .filter(|(s, id)| *s != self.name(*id).replace('_', " "))
            .collect();
        synonyms.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        for (surface, id) in synonyms {
            out.push_str(&format!("synonym({}, {}).\n", quote_term(surface), self.name(id)));
        }
        for w in &self.lexicon.affirm {
            out.push_str(&format!("affirm({}).\n", quote_term(w)));
        }
        for w in &self.lexicon.deny {
            out.push_str(&format!("deny({}).\n", quote_term(w)));
        }
        for id in &self.learned {
            if let Provenance::Learned { turn, .. } = self.entity(*id).provenance {
                out.push_str(&format!("learned({}, {}, {}).\n", id.category, self.name(*id), turn));
            }
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<Self, KbError> {
        let mut kb = KnowledgeBase::empty();
        let mut synonyms = Vec::new();
        let mut learned = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('%') {
                Some(pos) if !in_quotes(raw, pos) => &raw[..pos],
                _ => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (pred, args) = parse_fact(line).map_err(|message| KbError::Parse { line: line_no, message })?;
            let err = |message: String| KbError::Parse { line: line_no, message };
            let arity = |n: usize| {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(err(format!("`{pred}` takes {n} argument(s), got {}", args.len())))
                }
            };
            match pred.as_str() {
                "task" | "item" | "recipient" => {
                    arity(1)?;
                    let category: Category = pred.parse().map_err(err)?;
                    kb.insert(category, &args[0], Provenance::Seed)
                        .map_err(|e| err(e.to_string()))?;
                }
                "synonym" => {
                    arity(2)?;
                    synonyms.push((line_no, args[0].clone(), args[1].clone()));
                }
                "affirm" => {
                    arity(1)?;
                    kb.lexicon.affirm.push(normalize_surface(&args[0]));
                }
                "deny" => {
                    arity(1)?;
                    kb.lexicon.deny.push(normalize_surface(&args[0]));
                }
                "learned" => {
                    arity(3)?;
                    let category: Category = args[0].parse().map_err(err)?;
                    let turn: u32 = args[2]
                        .parse()
                        .map_err(|_| err(format!("bad turn `{}`", args[2])))?;
                    learned.push((line_no, category, args[1].clone(), turn));
                }
                other => return Err(err(format!("unknown predicate `{other}`"))),
            }
        }
        for (line, category, name, turn) in learned {
            let id = kb
                .find(category, &name)
                .ok_or_else(|| KbError::Parse { line, message: format!("learned fact for unknown {category} `{name}`") })?;
            if kb.learned.contains(&id) {
                return Err(KbError::Parse { line, message: format!("`{name}` learned twice") });
            }
            let generation = kb.learned.len() as u32 + 1;
            kb.entities_mut(category)[id.ordinal as usize].provenance = Provenance::Learned { turn, generation };
            kb.learned.push(id);
        }
        for (line, surface, name) in synonyms {
            let id = Category::ALL
                .iter()
                .find_map(|c| kb.find(*c, &name))
                .ok_or_else(|| KbError::Parse { line, message: format!("synonym for unknown entity `{name}`") })?;
            kb.add_synonym(&surface, id)
                .map_err(|e| KbError::Parse { line, message: e.to_string() })?;
        }
        kb.validate()?;
        Ok(kb)
    }
}

fn in_quotes(line: &str, pos: usize) -> bool {
    line[..pos].chars().filter(|c| *c == '"').count() % 2 == 1
}

fn quote_term(term: &str) -> String {
    if !term.is_empty() && term.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
        term.to_string()
    } else {
        format!("\"{term}\"")
    }
}

/// Parses `pred(arg, "quoted arg", ...).`
fn parse_fact(line: &str) -> Result<(String, Vec<String>), String> {
    let body = line
        .strip_suffix('.')
        .ok_or_else(|| "fact must end with `.`".to_string())?
        .trim();
    let open = body.find('(').ok_or_else(|| "expected `(`".to_string())?;
    let inner = body[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| "expected `)` before `.`".to_string())?;
    let pred = body[..open].trim();
    if pred.is_empty() || !pred.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
        return Err(format!("bad predicate `{pred}`"));
    }
    let mut args = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let mut arg = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(c) => arg.push(c),
                    None => return Err("unterminated string".into()),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c == ',' || c.is_whitespace() {
                    break;
                }
                if !(c.is_ascii_alphanumeric() || c == '_') {
                    return Err(format!("unexpected character `{c}`"));
                }
                arg.push(c);
                chars.next();
            }
        }
        if arg.is_empty() {
            return Err("empty argument".into());
        }
        args.push(arg);
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => break,
            Some(',') => continue,
            Some(c) => return Err(format!("unexpected character `{c}`")),
        }
    }
    Ok((pred.to_string(), args))
}

/// Orders entities for model construction: by generation, then category,
/// then ordinal. New entities always sort after existing ones.
pub fn entity_order_key(kb: &KnowledgeBase, id: EntityId) -> (u32, usize, u32) {
    (kb.entity(id).generation(), id.category.rank(), id.ordinal)
}

/// Knowledge bases shipped with the crate, by profile name.
pub const BUILTIN_PROFILES: [(&str, &str); 3] = [
    ("kb17", include_str!("../data/kb17.kb")),
    ("kb26", include_str!("../data/kb26.kb")),
    ("kb37", include_str!("../data/kb37.kb")),
];

/// Loads a bundled profile (`kb17`, `kb26`, `kb37`).
pub fn builtin_profile(name: &str) -> Option<KnowledgeBase> {
    BUILTIN_PROFILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| KnowledgeBase::deserialize(text).expect("bundled profile is valid"))
}

/// Bundled profile whose `|KB|` equals `size`.
pub fn builtin_by_size(size: usize) -> Option<KnowledgeBase> {
    BUILTIN_PROFILES
        .iter()
        .map(|(_, text)| KnowledgeBase::deserialize(text).expect("bundled profile is valid"))
        .find(|kb| kb.size() == size)
}
