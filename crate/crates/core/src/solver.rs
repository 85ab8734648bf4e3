//! Belief tracking and an offline point-based value iteration solver.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PomdpModel, TERM};

/// Probability distribution over a model's states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(Vec<f64>);

#[derive(Debug, Error, PartialEq)]
pub enum BeliefError {
    #[error("observation has zero probability under the current belief")]
    ZeroProbability,
    #[error("belief has {got} entries, model has {expected} states")]
    Dimension { expected: usize, got: usize },
    #[error("not a distribution: {0}")]
    Invalid(String),
}

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self, BeliefError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(BeliefError::Invalid("negative or non-finite entry".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BeliefError::Invalid(format!("sums to {total}")));
        }
        Ok(Belief(probs))
    }

    /// Normalizes non-negative weights. All-zero weights are an error.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, BeliefError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(BeliefError::ZeroProbability);
        }
        Ok(Belief(weights.into_iter().map(|w| w / total).collect()))
    }

    /// Uniform over every non-terminal state of a model with `n` states.
    pub fn uniform(n: usize) -> Self {
        let mut probs = vec![1.0 / (n - 1) as f64; n];
        probs[TERM] = 0.0;
        Belief(probs)
    }

    pub fn one_hot(n: usize, s: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[s] = 1.0;
        Belief(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        entropy(self)
    }

    /// Most likely state (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Indices of the `k` most likely states, most likely first.
    pub fn top(&self, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<(usize, f64)> = self.0.iter().copied().enumerate().collect();
        idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        idx.truncate(k);
        idx
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(b: &Belief) -> f64 {
    -b.0.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `Pr(z | b, a)`.
pub fn observation_probability(model: &PomdpModel, b: &Belief, a: usize, z: usize) -> f64 {
    let n = model.n_states();
    (0..n)
        .map(|s2| {
            let reach: f64 = (0..n).map(|s| model.t(s, a, s2) * b.0[s]).sum();
            model.o(s2, a, z) * reach
        })
        .sum()
}

/// Bayes filter: `b'(s') ∝ O(s',a,z) Σ_s T(s,a,s') b(s)`.
pub fn belief_update(model: &PomdpModel, b: &Belief, a: usize, z: usize) -> Result<Belief, BeliefError> {
    let n = model.n_states();
    if b.len() != n {
        return Err(BeliefError::Dimension { expected: n, got: b.len() });
    }
    let mut next = vec![0.0; n];
    for (s, &p) in b.0.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (s2, slot) in next.iter_mut().enumerate() {
            let t = model.t(s, a, s2);
            if t != 0.0 {
                *slot += t * p;
            }
        }
    }
    for (s2, slot) in next.iter_mut().enumerate() {
        *slot *= model.o(s2, a, z);
    }
    Belief::from_weights(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub belief_points: usize,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { belief_points: 256, epsilon: 1e-2, max_iterations: 500, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaVector {
    pub action: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub alphas: Vec<AlphaVector>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest value change at any belief point in the final sweep.
    pub residual: f64,
    pub model_fingerprint: String,
}

impl Policy {
    fn best(&self, b: &Belief) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, alpha) in self.alphas.iter().enumerate() {
            let v = b.dot(&alpha.values);
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    /// Greedy action at `b`.
    pub fn action(&self, b: &Belief) -> usize {
        self.alphas[self.best(b).0].action
    }

    pub fn value(&self, b: &Belief) -> f64 {
        self.best(b).1
    }
}

/// Sparse transition rows for one action: `(s, [(s', p)])`.
type SparseRows = Vec<Vec<(usize, f64)>>;

/// Point-based value iteration over a fixed belief set.
///
/// The value function starts from a blind-policy lower bound and every
/// point backup keeps the better of the old and new vector, so the value at
/// each belief point never decreases.
pub struct PbviSolver<'m> {
    model: &'m PomdpModel,
    config: SolverConfig,
    beliefs: Vec<Belief>,
    alphas: Vec<AlphaVector>,
    /// Current vector index per belief point.
    point_alpha: Vec<usize>,
    rows: Vec<SparseRows>,
    iterations: usize,
    residual: f64,
}

impl<'m> PbviSolver<'m> {
    pub fn new(model: &'m PomdpModel, config: SolverConfig) -> Self {
        let n = model.n_states();
        let rows: Vec<SparseRows> = (0..model.n_actions())
            .map(|a| {
                (0..n)
                    .map(|s| (0..n).filter_map(|s2| {
                        let p = model.t(s, a, s2);
                        (p != 0.0).then_some((s2, p))
                    }).collect())
                    .collect()
            })
            .collect();

        // Blind lower bound: the best action repeated forever, scored at its
        // worst state.
        let gamma = model.discount();
        let (blind_action, worst) = (0..model.n_actions())
            .map(|a| (a, (1..n).map(|s| model.r(s, a)).fold(f64::INFINITY, f64::min)))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
            .expect("model has actions");
        let mut values = vec![worst / (1.0 - gamma); n];
        values[TERM] = 0.0;
        let alphas = vec![AlphaVector { action: blind_action, values }];

        let mut solver = PbviSolver {
            model,
            config,
            beliefs: Vec::new(),
            alphas,
            point_alpha: Vec::new(),
            rows,
            iterations: 0,
            residual: f64::INFINITY,
        };
        solver.expand_beliefs();
        solver
    }

    pub fn beliefs(&self) -> &[Belief] {
        &self.beliefs
    }

    /// Builds the belief set: uniform, every non-terminal corner, then
    /// stochastic forward expansion keeping the successor farthest (L1)
    /// from the set, until `belief_points` is reached.
    fn expand_beliefs(&mut self) {
        let n = self.model.n_states();
        let target = self.config.belief_points.max(n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.beliefs.push(Belief::uniform(n));
        for s in 1..n {
            self.beliefs.push(Belief::one_hot(n, s));
        }
        let questions: Vec<usize> = (0..self.model.n_actions())
            .filter(|&a| self.model.action(a).is_question())
            .collect();
        let mut stalled = 0;
        while self.beliefs.len() < target && stalled < 4 {
            let before = self.beliefs.len();
            let frontier = self.beliefs.clone();
            for b in &frontier {
                if self.beliefs.len() >= target {
                    break;
                }
                let mut best: Option<(f64, Belief)> = None;
                for &a in &questions {
                    let s = sample(b.probs(), &mut rng);
                    let Some(&(s2, _)) = self.rows[a][s].first() else { continue };
                    let z = sample_row(|z| self.model.o(s2, a, z), self.model.n_observations(), &mut rng);
                    let Ok(next) = belief_update(self.model, b, a, z) else { continue };
                    let dist = self
                        .beliefs
                        .iter()
                        .map(|x| l1(x.probs(), next.probs()))
                        .fold(f64::INFINITY, f64::min);
                    if dist > 1e-9 && best.as_ref().is_none_or(|(d, _)| dist > *d) {
                        best = Some((dist, next));
                    }
                }
                if let Some((_, next)) = best {
                    self.beliefs.push(next);
                }
            }
            stalled = if self.beliefs.len() == before { stalled + 1 } else { 0 };
        }
        self.point_alpha = vec![0; self.beliefs.len()];
    }

    /// Current value at every belief point.
    pub fn values(&self) -> Vec<f64> {
        self.beliefs
            .iter()
            .zip(&self.point_alpha)
            .map(|(b, &i)| b.dot(&self.alphas[i].values))
            .collect()
    }

    /// Backs up every belief point once. Returns the largest value change.
    pub fn sweep(&mut self) -> f64 {
        let model = self.model;
        let n = model.n_states();
        let gamma = model.discount();
        let old_values = self.values();

        // Projections g[a][z][k](s) = Σ_s' T(s,a,s') O(s',a,z) α_k(s').
        let projections: Vec<Vec<Vec<Vec<f64>>>> = (0..model.n_actions())
            .map(|a| {
                model
                    .observation_support(a)
                    .iter()
                    .map(|&z| {
                        self.alphas
                            .iter()
                            .map(|alpha| {
                                (0..n)
                                    .map(|s| {
                                        self.rows[a][s]
                                            .iter()
                                            .map(|&(s2, p)| p * model.o(s2, a, z) * alpha.values[s2])
                                            .sum()
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut new_alphas: Vec<AlphaVector> = Vec::new();
        let mut new_point_alpha = Vec::with_capacity(self.beliefs.len());
        let mut residual: f64 = 0.0;
        for (bi, b) in self.beliefs.iter().enumerate() {
            let mut best: Option<(f64, AlphaVector)> = None;
            for a in 0..model.n_actions() {
                let mut values: Vec<f64> = (0..n).map(|s| model.r(s, a)).collect();
                for zi in 0..model.observation_support(a).len() {
                    let candidates = &projections[a][zi];
                    let mut pick = 0;
                    let mut pick_v = f64::NEG_INFINITY;
                    for (k, g) in candidates.iter().enumerate() {
                        let v = b.dot(g);
                        if v > pick_v {
                            pick_v = v;
                            pick = k;
                        }
                    }
                    for (s, v) in values.iter_mut().enumerate() {
                        *v += gamma * candidates[pick][s];
                    }
                }
                let v = b.dot(&values);
                if best.as_ref().is_none_or(|(bv, _)| v > *bv + 1e-12) {
                    best = Some((v, AlphaVector { action: a, values }));
                }
            }
            let (v, alpha) = best.expect("model has actions");
            let chosen = if v >= old_values[bi] {
                alpha
            } else {
                self.alphas[self.point_alpha[bi]].clone()
            };
            let v = b.dot(&chosen.values);
            residual = residual.max((v - old_values[bi]).abs());
            let idx = match new_alphas.iter().position(|x| x == &chosen) {
                Some(i) => i,
                None => {
                    new_alphas.push(chosen);
                    new_alphas.len() - 1
                }
            };
            new_point_alpha.push(idx);
        }
        self.alphas = new_alphas;
        self.point_alpha = new_point_alpha;
        self.iterations += 1;
        self.residual = residual;
        residual
    }

    pub fn run(mut self) -> Policy {
        let mut converged = false;
        while self.iterations < self.config.max_iterations {
            if self.sweep() < self.config.epsilon {
                converged = true;
                break;
            }
        }
        self.into_policy(converged)
    }

    fn into_policy(self, converged: bool) -> Policy {
        Policy {
            alphas: self.alphas,
            converged,
            iterations: self.iterations,
            residual: self.residual,
            model_fingerprint: self.model.fingerprint(),
        }
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    sample_row(|i| probs[i], probs.len(), rng)
}

fn sample_row<R: Rng + ?Sized>(p: impl Fn(usize) -> f64, n: usize, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for i in 0..n {
        let pi = p(i);
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Solves `model` with point-based value iteration.
pub fn solve(model: &PomdpModel, config: SolverConfig) -> Policy {
    PbviSolver::new(model, config).run()
}

/// Memoizes policies by model fingerprint, optionally persisted as JSON
/// files in a directory.
pub struct PolicyCache {
    memory: Mutex<HashMap<String, Arc<OnceLock<Arc<Policy>>>>>,
    dir: Option<PathBuf>,
    enabled: bool,
}

impl PolicyCache {
    pub fn in_memory() -> Self {
        PolicyCache { memory: Mutex::default(), dir: None, enabled: true }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        PolicyCache { memory: Mutex::default(), dir: Some(dir.into()), enabled: true }
    }

    /// Solves on every request.
    pub fn disabled() -> Self {
        PolicyCache { memory: Mutex::default(), dir: None, enabled: false }
    }

    pub fn get_or_solve(&self, model: &PomdpModel, config: SolverConfig) -> Arc<Policy> {
        if !self.enabled {
            return Arc::new(solve(model, config));
        }
        let key = format!("{}-{}-{}-{}", model.fingerprint(), config.belief_points, config.seed, config.max_iterations);
        let cell = {
            let mut map = self.memory.lock().expect("policy cache lock");
            map.entry(key.clone()).or_default().clone()
        };
        cell.get_or_init(|| {
            if let Some(policy) = self.load(&key) {
                return Arc::new(policy);
            }
            let policy = solve(model, config);
            self.store(&key, &policy);
            Arc::new(policy)
        })
        .clone()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.policy.json")))
    }

    fn load(&self, key: &str) -> Option<Policy> {
        let text = fs::read_to_string(self.path(key)?).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn store(&self, key: &str, policy: &Policy) {
        if let Some(path) = self.path(key) {
            let _ = fs::create_dir_all(path.parent().expect("cache file has a parent"));
            if let Ok(text) = serde_json::to_string(policy) {
                let _ = fs::write(path, text);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{Category, KnowledgeBase};
    use crate::model::{build_dialog_pomdp, ActionKind, ModelParams, NoiseModel, ObsKind, StateKey};

    fn kb17() -> KnowledgeBase {
        KnowledgeBase::from_names(&["delivery"], &["coffee", "tea", "pop", "cake"], &["alice", "bob", "carol", "dan"])
            .unwrap()
    }

    #[test]
    fn entropy_examples() {
        let u = Belief::uniform(18);
        assert!((entropy(&u) - 17f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&Belief::one_hot(5, 2)), 0.0);
        let half = Belief::new(vec![0.5, 0.5]).unwrap();
        assert!((entropy(&half) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wh_answer_moves_p_slot_onto_value() {
        let kb = kb17();
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let a = m.action_id(&ActionKind::Ask(Category::Item)).unwrap();
        let coffee = kb.find(Category::Item, "coffee").unwrap();
        let z = m.obs_id(&ObsKind::Value(coffee)).unwrap();
        let b = belief_update(&m, &Belief::uniform(m.n_states()), a, z).unwrap();
        let mass: f64 = m
            .states()
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, StateKey::Known { item, .. } if *item == coffee))
            .map(|(i, _)| b.probs()[i])
            .sum();
        assert!((mass - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_observation_is_an_error() {
        let kb = kb17();
        let m = build_dialog_pomdp(&kb, &ModelParams { noise: NoiseModel::noiseless(), ..Default::default() }).unwrap();
        let coffee = kb.find(Category::Item, "coffee").unwrap();
        let tea = kb.find(Category::Item, "tea").unwrap();
        let a = m.action_id(&ActionKind::Ask(Category::Item)).unwrap();
        let b = belief_update(&m, &Belief::uniform(m.n_states()), a, m.obs_id(&ObsKind::Value(coffee)).unwrap()).unwrap();
        let err = belief_update(&m, &b, a, m.obs_id(&ObsKind::Value(tea)).unwrap()).unwrap_err();
        assert_eq!(err, BeliefError::ZeroProbability);
    }

    #[test]
    fn uniform_belief_asks_a_wh_question() {
        let m = build_dialog_pomdp(&kb17(), &ModelParams::default()).unwrap();
        let policy = solve(&m, SolverConfig::default());
        let a = policy.action(&Belief::uniform(m.n_states()));
        assert!(matches!(m.action(a), ActionKind::Ask(_)), "got {:?}", m.action(a));
        // Reporting blind from uniform is worth (r+ + 15 r-) / 16 < r^W.
        assert!((20.0 + 15.0 * -20.0) / 16.0 < -1.5);
    }

    #[test]
    fn certain_belief_reports() {
        let m = build_dialog_pomdp(&kb17(), &ModelParams::default()).unwrap();
        let policy = solve(&m, SolverConfig::default());
        for s in 1..m.n_states() {
            let a = policy.action(&Belief::one_hot(m.n_states(), s));
            assert_eq!(m.action(a), ActionKind::Report(m.state(s)));
        }
    }

    #[test]
    fn single_state_model_reports_immediately() {
        let kb = KnowledgeBase::from_names(&["delivery"], &["a", "b"], &["c", "d"]).unwrap();
        let m = build_dialog_pomdp(&kb, &ModelParams::default()).unwrap();
        let policy = solve(&m, SolverConfig { belief_points: 32, ..Default::default() });
        let a = policy.action(&Belief::one_hot(m.n_states(), 1));
        assert_eq!(m.action(a), ActionKind::Report(m.state(1)));
    }

    #[test]
    fn values_never_decrease_across_sweeps() {
        let m = build_dialog_pomdp(&kb17(), &ModelParams::default()).unwrap();
        let mut solver = PbviSolver::new(&m, SolverConfig { belief_points: 64, ..Default::default() });
        let mut prev = solver.values();
        for _ in 0..40 {
            solver.sweep();
            let now = solver.values();
            for (a, b) in prev.iter().zip(&now) {
                assert!(*b >= *a - 1e-9, "{b} < {a}");
            }
            prev = now;
        }
    }

    #[test]
    fn solve_is_deterministic_and_reports_convergence() {
        let m = build_dialog_pomdp(&kb17(), &ModelParams::default()).unwrap();
        let cfg = SolverConfig { belief_points: 64, ..Default::default() };
        let a = solve(&m, cfg);
        let b = solve(&m, cfg);
        assert_eq!(a, b);
        assert!(a.converged);
        let capped = solve(&m, SolverConfig { max_iterations: 2, ..cfg });
        assert!(!capped.converged);
        assert_eq!(capped.iterations, 2);
        for alpha in &a.alphas {
            assert!(alpha.action < m.n_actions());
        }
    }

    #[test]
    fn cache_reuses_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dialog_pomdp(&kb17(), &ModelParams::default()).unwrap();
        let cfg = SolverConfig { belief_points: 32, ..Default::default() };
        let cache = PolicyCache::with_dir(dir.path());
        let p1 = cache.get_or_solve(&m, cfg);
        let p2 = cache.get_or_solve(&m, cfg);
        assert!(Arc::ptr_eq(&p1, &p2));
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let fresh = PolicyCache::with_dir(dir.path());
        assert_eq!(*fresh.get_or_solve(&m, cfg), *p1);
    }
}
