//! Batch evaluation: config files, parallel trial runs, CSV tables,
//! transcript replay and small SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{AgentActionKind, AgentVariant, ControllerConfig, DialogEvent, KnowledgeEvidence};
use crate::kb::{builtin_by_size, KbError, KnowledgeBase};
use crate::model::{ModelParams, NoiseModel, Rewards};
use crate::parser::StopWords;
use crate::simuser::{
    aggregate, derive_seed, run_trial, trial_request, BatchMetrics, ReserveVocabulary, SimError, TrialRecord,
    UnknownRates,
};
use crate::solver::{PolicyCache, SolverConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value` or `include <path>`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("KB file {path}: {source}")]
    Kb { path: PathBuf, source: KbError },
}

fn field(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: name.into(), message: message.into() }
}

/// Everything a batch run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub agent: AgentVariant,
    pub kb_size: usize,
    /// KB file pulled in with `include`; otherwise the bundled KB of `kb_size`.
    pub kb_path: Option<PathBuf>,
    pub trials: usize,
    pub seed: u64,
    pub rates: UnknownRates,
    pub params: ModelParams,
    /// Apply perception noise to the simulated user's answers.
    pub channel_noise: bool,
    pub entropy_ratio: f64,
    pub max_turns: u32,
    pub knowledge_evidence: KnowledgeEvidence,
    pub solver: SolverConfig,
    pub sub_batches: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let controller = ControllerConfig::default();
        ExperimentConfig {
            agent: AgentVariant::Dual,
            kb_size: 17,
            kb_path: None,
            trials: 3000,
            seed: 1,
            rates: UnknownRates::default(),
            params: controller.params,
            channel_noise: true,
            entropy_ratio: controller.entropy_ratio,
            max_turns: controller.max_turns,
            knowledge_evidence: controller.knowledge_evidence,
            solver: controller.solver,
            sub_batches: 5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| field(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(field(key, format!("expected true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Parses flat `key = value` text. `#` starts a comment; `include <path>`
    /// names the KB file, resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut fixed_turns = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(path) = line.strip_prefix("include ") {
                cfg.kb_path = Some(base_dir.join(path.trim()));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(key.trim(), value.trim(), &mut fixed_turns)?;
        }
        if let (Some(n), AgentVariant::FixedTurns(_)) = (fixed_turns, cfg.agent) {
            cfg.agent = AgentVariant::FixedTurns(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        ExperimentConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn set(&mut self, key: &str, value: &str, fixed_turns: &mut Option<u32>) -> Result<(), ConfigError> {
        let noise = &mut self.params.noise;
        let rewards = &mut self.params.rewards;
        match key {
            "agent" => {
                self.agent = AgentVariant::parse(value).ok_or_else(|| field(key, format!("unknown agent `{value}`")))?
            }
            "kb_size" => self.kb_size = parse_num(key, value)?,
            "trials" => self.trials = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "unknown_item" => self.rates.item = parse_num(key, value)?,
            "unknown_recipient" => self.rates.recipient = parse_num(key, value)?,
            "unknown_independent" => self.rates.independent = parse_bool(key, value)?,
            "p_confirm" => noise.p_confirm = parse_num(key, value)?,
            "p_base" => noise.p_base = parse_num(key, value)?,
            "p_floor" => noise.p_floor = parse_num(key, value)?,
            "k_ref" => noise.k_ref = parse_num(key, value)?,
            "reward_confirm" => rewards.confirm = parse_num(key, value)?,
            "reward_wh" => rewards.wh = parse_num(key, value)?,
            "reward_correct" => rewards.correct = parse_num(key, value)?,
            "reward_wrong" => rewards.wrong = parse_num(key, value)?,
            "discount" => self.params.discount = parse_num(key, value)?,
            "channel_noise" => self.channel_noise = parse_bool(key, value)?,
            "entropy_ratio" => self.entropy_ratio = parse_num(key, value)?,
            "max_turns" => self.max_turns = parse_num(key, value)?,
            "fixed_turns" => *fixed_turns = Some(parse_num(key, value)?),
            "knowledge_evidence" => {
                self.knowledge_evidence = match value {
                    "confirmations" => KnowledgeEvidence::Confirmations,
                    "confirmations_and_unknown_words" => KnowledgeEvidence::ConfirmationsAndUnknownWords,
                    "all_observations" => KnowledgeEvidence::AllObservations,
                    _ => return Err(field(key, format!("unknown mode `{value}`"))),
                }
            }
            "belief_points" => self.solver.belief_points = parse_num(key, value)?,
            "solver_epsilon" => self.solver.epsilon = parse_num(key, value)?,
            "solver_max_iterations" => self.solver.max_iterations = parse_num(key, value)?,
            "solver_seed" => self.solver.seed = parse_num(key, value)?,
            "sub_batches" => self.sub_batches = parse_num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trials == 0 {
            return Err(field("trials", "must be positive"));
        }
        if self.sub_batches == 0 || self.sub_batches > self.trials {
            return Err(field("sub_batches", "must be between 1 and the trial count"));
        }
        self.rates.validate().map_err(|e| field("unknown_item", e.to_string()))?;
        self.controller_config().validate().map_err(|e| field("model", e.to_string()))?;
        if !(self.solver.epsilon > 0.0) {
            return Err(field("solver_epsilon", "must be positive"));
        }
        if self.kb_path.is_none() && builtin_by_size(self.kb_size).is_none() {
            return Err(field("kb_size", format!("no bundled KB of size {}; include a KB file", self.kb_size)));
        }
        Ok(())
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            variant: self.agent,
            params: self.params,
            channel_noise: self.channel_noise.then_some(self.params.noise),
            entropy_ratio: self.entropy_ratio,
            max_turns: self.max_turns,
            knowledge_evidence: self.knowledge_evidence,
            solver: self.solver,
        }
    }

    /// Loads the KB this config names.
    pub fn knowledge_base(&self) -> Result<KnowledgeBase, ConfigError> {
        match &self.kb_path {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                KnowledgeBase::deserialize(&text).map_err(|source| ConfigError::Kb { path: path.clone(), source })
            }
            None => builtin_by_size(self.kb_size).ok_or_else(|| field("kb_size", "no bundled KB of this size")),
        }
    }
}

/// Population std of per-sub-batch metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBatchStd {
    pub success_rate: f64,
    pub f1: f64,
    pub mean_qa_cost: f64,
    pub mean_reward: f64,
    pub mean_turns_to_augment: f64,
    pub augment_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub agent: AgentVariant,
    pub kb_size: usize,
    pub metrics: BatchMetrics,
    pub sub_batches: Vec<BatchMetrics>,
    pub std: SubBatchStd,
    pub records: Vec<TrialRecord>,
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Contiguous, near-equal chunks of `records`.
pub fn split_sub_batches(records: &[TrialRecord], k: usize) -> Vec<&[TrialRecord]> {
    let n = records.len();
    (0..k).map(|i| &records[i * n / k..(i + 1) * n / k]).collect()
}

/// Runs `config.trials` simulated dialogs. Trial `i` gets the same request
/// and noise stream under any agent.
pub fn run_batch(
    config: &ExperimentConfig,
    kb: &KnowledgeBase,
    cache: Arc<PolicyCache>,
) -> Result<BatchResult, SimError> {
    let reserve = ReserveVocabulary::default();
    let stop_words = Arc::new(StopWords::default());
    let controller = config.controller_config();
    let records = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let request = trial_request(kb, &reserve, config.rates, config.seed, i)?;
            let seed = derive_seed(config.seed, i as u64, 1);
            run_trial(i, kb, controller, cache.clone(), stop_words.clone(), request, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = aggregate(&records);
    let sub_batches: Vec<BatchMetrics> =
        split_sub_batches(&records, config.sub_batches).into_iter().map(aggregate).collect();
    let pick = |f: fn(&BatchMetrics) -> f64| population_std(&sub_batches.iter().map(f).collect::<Vec<_>>());
    let std = SubBatchStd {
        success_rate: pick(|m| m.success_rate),
        f1: pick(|m| m.f1),
        mean_qa_cost: pick(|m| m.mean_qa_cost),
        mean_reward: pick(|m| m.mean_reward),
        mean_turns_to_augment: pick(|m| m.mean_turns_to_augment.unwrap_or(0.0)),
        augment_accuracy: pick(|m| m.augment_accuracy),
    };
    Ok(BatchResult { agent: config.agent, kb_size: kb.size(), metrics, sub_batches, std, records })
}

pub const CSV_HEADER: &str = "agent,kb_size,trials,success_rate,f1,precision,recall,mean_qa_cost,mean_reward,\
mean_turns_to_augment,augment_accuracy,mean_turns,mean_turns_to_first_augmentation,success_rate_std,f1_std,\
mean_qa_cost_std,mean_reward_std,mean_turns_to_augment_std,augment_accuracy_std";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn csv_row(result: &BatchResult) -> String {
    let m = &result.metrics;
    let s = &result.std;
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        result.agent.name(),
        result.kb_size,
        m.trials,
        m.success_rate,
        m.f1,
        m.precision,
        m.recall,
        m.mean_qa_cost,
        m.mean_reward,
        opt(m.mean_turns_to_augment),
        m.augment_accuracy,
        m.mean_turns,
        opt(m.mean_turns_to_first_augmentation),
        s.success_rate,
        s.f1,
        s.mean_qa_cost,
        s.mean_reward,
        s.mean_turns_to_augment,
        s.augment_accuracy,
    )
}

/// Header plus one row per batch.
pub fn to_csv(results: &[BatchResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

/// One trial record per line.
pub fn records_jsonl(records: &[TrialRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

/// Dialog events, one per line.
pub fn events_jsonl(events: &[DialogEvent]) -> String {
    events.iter().map(|e| serde_json::to_string(e).expect("events serialize") + "\n").collect()
}

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct ReplayError {
    pub line: usize,
    pub message: String,
}

/// Renders JSON lines of dialog events (or whole trial records) as a
/// readable transcript annotated with `H(b)` and `δ`.
pub fn replay(text: &str) -> Result<String, ReplayError> {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(event) = serde_json::from_str::<DialogEvent>(line) {
            render_event(&mut out, &event);
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(record) => {
                let _ = writeln!(
                    out,
                    "== trial {}: {} / {} / {}",
                    record.index,
                    record.request.task.name(),
                    record.request.item.name(),
                    record.request.recipient.name()
                );
                for event in &record.events {
                    render_event(&mut out, event);
                }
                let _ = writeln!(out, "== success: {}", record.success);
            }
            Err(e) => return Err(ReplayError { line: i + 1, message: e.to_string() }),
        }
    }
    Ok(out)
}

fn render_event(out: &mut String, event: &DialogEvent) {
    if let Some(u) = &event.user_utterance {
        let _ = writeln!(out, "         user:  {u}");
    }
    if let Some(m) = &event.kb_mutation {
        if m.collision {
            let _ = writeln!(out, "         [already known {}: {}]", m.category, m.name);
        } else {
            let _ = writeln!(out, "         [learned new {}: {}]", m.category, m.name);
        }
    }
    let _ = writeln!(
        out,
        "[turn {:>2}] robot: {:<60} H(b)={:.3} δ={}",
        event.turn, event.action.text, event.entropy, event.delta
    );
    if event.action.kind == AgentActionKind::Report {
        let _ = writeln!(out, "         the dialog is over.");
    }
}

/// A labelled point for [`scatter_svg`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub series: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d6a9f"];

/// Minimal scatter plot, one color per series, each point labelled.
pub fn scatter_svg(points: &[PlotPoint], x_label: &str, y_label: &str) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let bounds = |f: fn(&PlotPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = (hi - lo) * 0.1;
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = bounds(|p| p.x);
    let (y0, y1) = bounds(|p| p.y);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut series: Vec<&str> = Vec::new();
    for p in points {
        if !series.contains(&p.series.as_str()) {
            series.push(&p.series);
        }
    }
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 15.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (tick, v) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.2}</text>"#, sx(tick), h - pad + 16.0, v);
    }
    for (tick, v) in [(y0, y0), (y1, y1)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#, pad - 6.0, sy(tick), v);
    }
    for p in points {
        let color = PALETTE[series.iter().position(|s| *s == p.series).unwrap_or(0) % PALETTE.len()];
        let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="5" fill="{color}"/>"#, sx(p.x), sy(p.y));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, sx(p.x) + 7.0, sy(p.y) - 4.0, escape(&p.label));
    }
    for (i, s) in series.iter().enumerate() {
        let y = pad + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<circle cx="{}" cy="{y}" r="5" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            w - pad - 90.0,
            PALETTE[i % PALETTE.len()],
            w - pad - 80.0,
            y + 4.0,
            escape(s)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Points for an accuracy-versus-turns view from CSV produced by [`to_csv`].
pub fn points_from_csv(csv: &str, x: &str, y: &str) -> Result<Vec<PlotPoint>, ReplayError> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or(ReplayError { line: 1, message: format!("no column `{name}`") })
    };
    let (ca, ck, cx, cy) = (col("agent")?, col("kb_size")?, col(x)?, col(y)?);
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let num = |c: usize| -> Result<f64, ReplayError> {
            cells.get(c).and_then(|v| v.parse().ok()).ok_or(ReplayError { line: i + 2, message: "bad number".into() })
        };
        points.push(PlotPoint {
            series: cells[ca].to_string(),
            label: cells[ck].to_string(),
            x: num(cx)?,
            y: num(cy)?,
        });
    }
    Ok(points)
}

/// Noise-free model parameters.
pub fn noiseless_params() -> ModelParams {
    ModelParams { noise: NoiseModel::noiseless(), rewards: Rewards::default(), discount: ModelParams::default().discount }
}
