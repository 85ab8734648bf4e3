//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualtrack::controller::{delta_threshold, entropy_fluctuation, tau_b, AgentActionKind, AgentVariant};
use dualtrack::experiments::{noiseless_params, run_batch, to_csv, BatchResult, ExperimentConfig};
use dualtrack::kb::KnowledgeBase;
use dualtrack::model::{build_dialog_pomdp, build_knowledge_pomdp, ModelParams};
use dualtrack::simuser::{TrialRecord, UnknownRates};
use dualtrack::solver::{belief_update, entropy, Belief, PolicyCache};

const SEED: u64 = 42;

fn verdict(id: u32, pass: bool, detail: &str) -> bool {
    println!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn batch(agent: AgentVariant, kb_size: usize, trials: usize, rates: UnknownRates, cache: &Arc<PolicyCache>) -> (BatchResult, Duration) {
    let config = ExperimentConfig { agent, kb_size, trials, seed: SEED, rates, ..Default::default() };
    let kb = config.knowledge_base().expect("bundled KB");
    let start = Instant::now();
    let result = run_batch(&config, &kb, cache.clone()).expect("batch runs");
    (result, start.elapsed())
}

fn questions(r: &TrialRecord) -> usize {
    r.events
        .iter()
        .filter(|e| {
            matches!(
                e.action.kind,
                AgentActionKind::Ask | AgentActionKind::Confirm | AgentActionKind::Reword | AgentActionKind::NameRequest
            )
        })
        .count()
}

#[test]
fn criterion_1_threshold_formulas() {
    // tau(n) = 1 / (1 + e^-k) - 1 / k with k = floor(sqrt(n)), evaluated by hand.
    let expected_tau = [(17, 0.732_01), (26, 0.793_31), (37, 0.830_86)];
    let expected_delta = [(17, 4), (26, 5), (37, 6)];
    let mut worst: f64 = 0.0;
    for (n, want) in expected_tau {
        worst = worst.max((tau_b(n).unwrap() - want).abs());
    }
    let deltas_ok = expected_delta.iter().all(|&(n, d)| delta_threshold(n) == d);
    let pass = worst <= 1e-5 && deltas_ok;
    let detail = format!(
        "tau(17,26,37) = {:.5}, {:.5}, {:.5}; delta = {}, {}, {}; max error {worst:.2e}",
        tau_b(17).unwrap(),
        tau_b(26).unwrap(),
        tau_b(37).unwrap(),
        delta_threshold(17),
        delta_threshold(26),
        delta_threshold(37)
    );
    assert!(verdict(1, pass, &detail));
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..width).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() }).collect();
        if row.iter().all(|p| *p == 0.0) {
            row[rng.gen_range(0..width)] = 1.0;
        }
        let sum: f64 = row.iter().sum();
        out.extend(row.into_iter().map(|p| p / sum));
    }
    out
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn random_layout(rng: &mut ChaCha8Rng) -> dualtrack::model::PomdpModel {
    loop {
        let (t, i, r) = (rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(2..=4));
        let names = |prefix: &str, k: usize| (0..k).map(|j| format!("{prefix}{j}")).collect::<Vec<_>>();
        let (tn, inames, rn) = (names("task", t), names("item", i), names("person", r));
        let kb = KnowledgeBase::from_names(&refs(&tn), &refs(&inames), &refs(&rn)).unwrap();
        let params = ModelParams::default();
        let model = if rng.gen_bool(0.5) {
            build_knowledge_pomdp(&kb, &params).unwrap()
        } else {
            build_dialog_pomdp(&kb, &params).unwrap()
        };
        if model.n_states() <= 25 {
            return model;
        }
    }
}

#[test]
fn criterion_2_belief_update_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut impossible_rejected = true;
    for _ in 0..1000 {
        let layout = random_layout(&mut rng);
        let (n, na, nz) = (layout.n_states(), layout.n_actions(), layout.n_observations());
        let t = random_rows(&mut rng, na * n, n);
        let o = random_rows(&mut rng, na * n, nz);
        let model = layout.with_tensors(t.clone(), o.clone()).unwrap();
        let b = Belief::new(random_rows(&mut rng, 1, n)).unwrap();
        let a = rng.gen_range(0..na);

        // Full joint over (s, s', z), then condition on z.
        let mut joint = vec![0.0; n * nz];
        for s in 0..n {
            for s2 in 0..n {
                for z in 0..nz {
                    joint[s2 * nz + z] += b.probs()[s] * t[(a * n + s) * n + s2] * o[(a * n + s2) * nz + z];
                }
            }
        }
        for z in 0..nz {
            let pz: f64 = (0..n).map(|s2| joint[s2 * nz + z]).sum();
            let got = belief_update(&model, &b, a, z);
            if pz == 0.0 {
                impossible_rejected &= got.is_err();
                continue;
            }
            let got = got.unwrap();
            for s2 in 0..n {
                worst = worst.max((got.probs()[s2] - joint[s2 * nz + z] / pz).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && impossible_rejected && elapsed < Duration::from_secs(10);
    let detail = format!("1000 random POMDPs, max |diff| {worst:.2e}, runtime {:.2}s", elapsed.as_secs_f64());
    assert!(verdict(2, pass, &detail));
}

#[test]
fn criterion_3_zero_noise_soundness() {
    let config = ExperimentConfig {
        kb_size: 17,
        trials: 200,
        seed: SEED,
        rates: UnknownRates::none(),
        params: noiseless_params(),
        ..Default::default()
    };
    let kb = config.knowledge_base().unwrap();
    let result = run_batch(&config, &kb, Arc::new(PolicyCache::in_memory())).unwrap();
    let correct = result.records.iter().filter(|r| r.report_correct).count();
    let augmentations =
        result.records.iter().filter(|r| r.augmented.is_some() || r.events.iter().any(|e| e.kb_mutation.is_some())).count();
    let max_q = result.records.iter().map(questions).max().unwrap_or(0);
    let pass = correct == 200 && augmentations == 0 && max_q <= 4;
    let detail = format!("{correct}/200 correct, {augmentations} augmentations, max questions {max_q}");
    assert!(verdict(3, pass, &detail));
}

#[test]
fn criterion_4_augmentation_trend() {
    let cache = Arc::new(PolicyCache::in_memory());
    let rates = UnknownRates::one_unknown();
    let (dual, _) = batch(AgentVariant::Dual, 17, 1000, rates, &cache);
    let (b1, _) = batch(AgentVariant::TauOnly, 17, 1000, rates, &cache);
    let (b2, _) = batch(AgentVariant::EfOnly, 17, 1000, rates, &cache);
    let tta = |r: &BatchResult| r.metrics.mean_turns_to_augment.unwrap_or(f64::INFINITY);
    let accuracy = dual.metrics.augment_accuracy;
    let pass = accuracy >= 0.75 && tta(&dual) < tta(&b1) && tta(&dual) < tta(&b2);
    let detail = format!(
        "dual accuracy {accuracy:.3}; mean turns to augment dual {:.3}, baseline1 {:.3}, baseline2 {:.3} \
         (accuracy baseline1 {:.3}, baseline2 {:.3})",
        tta(&dual),
        tta(&b1),
        tta(&b2),
        b1.metrics.augment_accuracy,
        b2.metrics.augment_accuracy
    );
    assert!(verdict(4, pass, &detail));
}

#[test]
fn criterion_5_f1_ordering() {
    let cache = Arc::new(PolicyCache::in_memory());
    let published = [(17, [0.79, 0.59, 0.61]), (26, [0.77, 0.52, 0.66])];
    let mut pass = true;
    let mut parts = Vec::new();
    for (size, reference) in published {
        let mut f1 = [0.0; 3];
        let mut slowest = Duration::ZERO;
        for (k, agent) in [AgentVariant::Dual, AgentVariant::TauOnly, AgentVariant::EfOnly].into_iter().enumerate() {
            let (result, elapsed) = batch(agent, size, 3000, UnknownRates::default(), &cache);
            f1[k] = result.metrics.f1;
            slowest = slowest.max(elapsed);
        }
        let ordered = f1[0] > f1[1] && f1[0] > f1[2];
        let floor = size != 17 || f1[0] >= 0.60;
        let fast = slowest < Duration::from_secs(300);
        pass &= ordered && floor && fast;
        parts.push(format!(
            "|KB|={size}: F1 dual/b1/b2 = {:.3}/{:.3}/{:.3} (reference {:.2}/{:.2}/{:.2}), slowest batch {:.1}s",
            f1[0],
            f1[1],
            f1[2],
            reference[0],
            reference[1],
            reference[2],
            slowest.as_secs_f64()
        ));
    }
    assert!(verdict(5, pass, &parts.join("; ")));
}

#[test]
fn criterion_6_fixed_turn_comparison() {
    let cache = Arc::new(PolicyCache::in_memory());
    let rates = UnknownRates::human_replica();
    let (dual, _) = batch(AgentVariant::Dual, 17, 1000, rates, &cache);
    let (b3, _) = batch(AgentVariant::FixedTurns(8), 17, 1000, rates, &cache);
    let (d, f) = (&dual.metrics, &b3.metrics);
    let pass = d.mean_turns < f.mean_turns && d.success_rate > f.success_rate;
    let detail = format!(
        "mean turns dual {:.3} vs baseline3 {:.3}; success dual {:.3} vs baseline3 {:.3}",
        d.mean_turns, f.mean_turns, d.success_rate, f.success_rate
    );
    assert!(verdict(6, pass, &detail));
}

#[test]
fn criterion_7_entropy_fluctuation_table() {
    // (H0, H1, H2) -> fluctuation, with a zero difference counted as rising.
    let table: [([f64; 3], bool); 9] = [
        ([1.0, 2.0, 3.0], false), // up, up
        ([1.0, 2.0, 2.0], false), // up, flat
        ([1.0, 2.0, 1.0], true),  // up, down
        ([2.0, 2.0, 3.0], false), // flat, up
        ([2.0, 2.0, 2.0], false), // flat, flat
        ([2.0, 2.0, 1.0], true),  // flat, down
        ([3.0, 2.0, 3.0], true),  // down, up
        ([3.0, 2.0, 2.0], true),  // down, flat
        ([3.0, 2.0, 1.0], false), // down, down
    ];
    let table_ok = table.iter().all(|(h, want)| entropy_fluctuation(*h) == *want);
    let mut worst: f64 = 0.0;
    for n in 1..=200 {
        let flat = Belief::new(vec![1.0 / n as f64; n]).unwrap();
        worst = worst.max((entropy(&flat) - (n as f64).ln()).abs());
        if n >= 2 {
            // The initial belief spreads over every state except `term`.
            worst = worst.max((entropy(&Belief::uniform(n)) - ((n - 1) as f64).ln()).abs());
        }
    }
    let pass = table_ok && worst <= 1e-12;
    let detail = format!("{} sign patterns checked, uniform entropy max error {worst:.2e}", table.len());
    assert!(verdict(7, pass, &detail));
}

#[test]
fn criterion_8_reward_structure() {
    let cache = Arc::new(PolicyCache::in_memory());
    let (result, _) = batch(AgentVariant::Dual, 17, 1000, UnknownRates::default(), &cache);
    let records = &result.records;
    let n = records.len() as f64;
    let bonus = records.iter().map(|r| r.report_reward).fold(0.0, |s, v| s + v) / n;
    let cost = records.iter().map(|r| r.qa_cost).fold(0.0, |s, v| s + v) / n;
    let exact = result.metrics.mean_reward == bonus - cost;

    let worst_wrong = records.iter().filter(|r| !r.report_correct).map(|r| r.dialog_reward).fold(f64::MIN, f64::max);
    let best_floor = records
        .iter()
        .filter(|r| r.report_correct && questions(r) <= 20)
        .map(|r| r.dialog_reward)
        .fold(f64::MAX, f64::min);
    let ordered = worst_wrong < best_floor;
    let r = ModelParams::default().rewards;
    let structural = r.wrong.abs() + r.correct.abs() > 20.0 * r.wh.abs().max(r.confirm.abs());
    let pass = exact && ordered && structural;
    let detail = format!(
        "mean reward {:.6} = {bonus:.6} - {cost:.6}; best wrong-report trial {worst_wrong:.2} < worst correct trial {best_floor:.2}",
        result.metrics.mean_reward
    );
    assert!(verdict(8, pass, &detail));
}

#[test]
fn criterion_9_determinism() {
    let csv = || {
        let cache = Arc::new(PolicyCache::in_memory());
        let results: Vec<BatchResult> = [AgentVariant::Dual, AgentVariant::FixedTurns(8)]
            .into_iter()
            .map(|agent| batch(agent, 17, 300, UnknownRates::default(), &cache).0)
            .collect();
        to_csv(&results)
    };
    let (first, second) = (csv(), csv());
    let pass = first.as_bytes() == second.as_bytes();
    assert!(verdict(9, pass, &format!("two runs with seed {SEED}: {} bytes, identical = {pass}", first.len())));
}
