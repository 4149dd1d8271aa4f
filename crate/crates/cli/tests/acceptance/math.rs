//! Criteria 1-4: metrics, counterfactual matching and calibration against
//! brute-force oracles written here from the definitions.

use ad_agent_core::eval::{auroc, f1_max};
use ad_agent_core::memory::{calibrated_margin, calibrated_topk, update_weight, CalibrationWeights, Relation};
use ad_agent_core::primitives::{BinaryLabel, Embedding, ScoredRecord, Verdict};
use ad_agent_core::templates::{
    candidate_margin, compute_prototypes, retrieve_topk, soft_anomaly_score, CandidateSet, CandidateSide,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-12;

fn records(labels: &[u8], scores: &[f64]) -> Vec<ScoredRecord> {
    labels
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&l, &s))| ScoredRecord {
            image_id: format!("r{i}"),
            label: BinaryLabel::from_u8(l).unwrap(),
            verdict: if s >= 1.0 { Verdict::Anomalous } else { Verdict::Normal },
            ranking_score: s,
        })
        .collect()
}

fn oracle_auroc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn oracle_f1(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut best: f64 = 0.0;
    for &t in scores {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&l, &s) in labels.iter().zip(scores) {
            if s >= t {
                if l == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let fn_ = positives - tp;
        best = best.max(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
    }
    Some(best)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<f64>) {
    let n = rng.random_range(1..=200);
    // a coarse grid some of the time, to exercise ties
    let levels = if rng.random_bool(0.5) {
        rng.random_range(2..12)
    } else {
        0
    };
    let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    let scores = (0..n)
        .map(|_| {
            if levels > 0 {
                rng.random_range(0..levels) as f64 / levels as f64 * 2.0
            } else {
                rng.random_range(0.0..2.0)
            }
        })
        .collect();
    (labels, scores)
}

fn compare(name: &str, got: Result<f64, ad_agent_core::Error>, want: Option<f64>) -> Result<(), String> {
    match (got, want) {
        (Ok(g), Some(w)) => ensure!((g - w).abs() <= TOL, "{name}: got {g}, oracle {w}"),
        (Err(_), None) => {}
        (g, w) => return Err(format!("{name}: got {g:?}, oracle {w:?}")),
    }
    Ok(())
}

pub fn metric_oracles() -> Result<(), String> {
    let pinned = records(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]);
    ensure!(auroc(&pinned).map_err(|e| e.to_string())? == 0.75, "pinned AUROC case");
    ensure!(
        oracle_auroc(&[1, 0, 1, 0], &[0.9, 0.8, 0.7, 0.1]) == Some(0.75),
        "pinned AUROC oracle"
    );
    let pinned = records(&[1, 1, 0], &[0.9, 0.2, 0.5]);
    let f1 = f1_max(&pinned).map_err(|e| e.to_string())?;
    ensure!((f1 - 0.8).abs() <= TOL, "pinned F1-max case: {f1}");
    ensure!(
        (oracle_f1(&[1, 1, 0], &[0.9, 0.2, 0.5]).unwrap() - 0.8).abs() <= TOL,
        "pinned F1 oracle"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..INSTANCES {
        let (labels, scores) = random_instance(&mut rng);
        compare(
            &format!("auroc #{i}"),
            auroc(&records(&labels, &scores)),
            oracle_auroc(&labels, &scores),
        )?;
    }
    for i in 0..INSTANCES {
        let (labels, scores) = random_instance(&mut rng);
        compare(
            &format!("f1_max #{i}"),
            f1_max(&records(&labels, &scores)),
            oracle_f1(&labels, &scores),
        )?;
    }
    Ok(())
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

struct Instance {
    caption: Vec<f64>,
    anomaly: Vec<Vec<f64>>,
    normal: Vec<Vec<f64>>,
    set: CandidateSet,
}

fn random_candidates(rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.random_range(8..=64);
    let total = rng.random_range(2..=64);
    let na = rng.random_range(1..total);
    let anomaly: Vec<Vec<f64>> = (0..na).map(|_| gaussian_vec(rng, dim)).collect();
    let normal: Vec<Vec<f64>> = (0..total - na).map(|_| gaussian_vec(rng, dim)).collect();
    let emb = |v: &Vec<f64>| Embedding::new(v.clone()).unwrap();
    let set = CandidateSet::new(
        "widget",
        (0..anomaly.len()).map(|i| format!("a{i}")).collect(),
        (0..normal.len()).map(|i| format!("n{i}")).collect(),
        anomaly.iter().map(emb).collect(),
        normal.iter().map(emb).collect(),
    )
    .unwrap();
    Instance {
        caption: gaussian_vec(rng, dim),
        anomaly,
        normal,
        set,
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in m.iter_mut().zip(v) {
            *a += x / vs.len() as f64;
        }
    }
    m
}

fn oracle_topk(caption: &[f64], side: &[Vec<f64>], k: usize) -> Vec<usize> {
    let sims: Vec<f64> = side.iter().map(|e| cos(caption, e)).collect();
    let mut taken = vec![false; sims.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(sims.len()) {
        let mut best: Option<usize> = None;
        for i in 0..sims.len() {
            if !taken[i] && best.is_none_or(|b| sims[i] > sims[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn oracle_margin(inst: &Instance) -> f64 {
    let best = |side: &[Vec<f64>]| {
        side.iter()
            .map(|e| cos(&inst.caption, e))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    best(&inst.anomaly) - best(&inst.normal)
}

pub fn counterfactual_math() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..INSTANCES {
        let inst = random_candidates(&mut rng);
        let caption = Embedding::new(inst.caption.clone()).unwrap();

        let d = cos(&inst.caption, &mean(&inst.anomaly)) - cos(&inst.caption, &mean(&inst.normal));
        let want = 1.0 / (1.0 + (-d).exp());
        let protos = compute_prototypes(&inst.set).map_err(|e| e.to_string())?;
        let got = soft_anomaly_score(&caption, &protos).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= TOL, "soft score #{i}: {got} vs {want}");

        let k = rng.random_range(1..=10);
        let topk = retrieve_topk(&caption, &inst.set, k).map_err(|e| e.to_string())?;
        for (side, vecs, got) in [
            ("anomaly", &inst.anomaly, &topk.anomaly),
            ("normal", &inst.normal, &topk.normal),
        ] {
            let idx: Vec<usize> = got.iter().map(|m| m.index).collect();
            ensure!(
                idx == oracle_topk(&inst.caption, vecs, k),
                "top-{k} {side} #{i}: {idx:?}"
            );
            for m in got {
                let want = cos(&inst.caption, &vecs[m.index]);
                ensure!((m.similarity - want).abs() <= TOL, "top-k similarity #{i}");
            }
        }

        let got = candidate_margin(&caption, &inst.set).map_err(|e| e.to_string())?;
        let want = oracle_margin(&inst);
        ensure!((got - want).abs() <= TOL, "margin #{i}: {got} vs {want}");
    }
    Ok(())
}

pub fn calibration_identity() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..INSTANCES {
        let inst = random_candidates(&mut rng);
        let caption = Embedding::new(inst.caption.clone()).unwrap();
        let tau = 10f64.powf(rng.random_range(-2.0..1.0));
        let weights = CalibrationWeights::uniform(&inst.set);
        let cal = calibrated_margin(&caption, &inst.set, &weights, tau).map_err(|e| e.to_string())?;
        let raw = candidate_margin(&caption, &inst.set).map_err(|e| e.to_string())?;
        ensure!((cal - raw).abs() <= TOL, "instance #{i} tau {tau}: {cal} vs {raw}");

        let k = rng.random_range(1..=10);
        let a = calibrated_topk(&caption, &inst.set, &weights, tau, k).map_err(|e| e.to_string())?;
        let b = retrieve_topk(&caption, &inst.set, k).map_err(|e| e.to_string())?;
        let idx = |v: &[ad_agent_core::templates::CandidateMatch]| v.iter().map(|m| m.index).collect::<Vec<_>>();
        ensure!(
            idx(&a.anomaly) == idx(&b.anomaly) && idx(&a.normal) == idx(&b.normal),
            "neutral ranking differs at #{i}"
        );
    }
    Ok(())
}

fn oracle_delta(relation: Relation, side: CandidateSide, rho: f64, wrong: bool) -> f64 {
    let s = match (side, relation) {
        (CandidateSide::Normal, Relation::Fit) => 1.0,
        (CandidateSide::Anomaly, Relation::Fit) => -1.0,
        (CandidateSide::Anomaly, Relation::Conflict) => 0.05,
        _ => 0.0,
    };
    s * if wrong { 0.2 } else { 0.1 } * rho.max(0.0)
}

pub fn weight_dynamics() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut weights = [0.5; 16];
    let mut unclamped_pairs = 0;
    for step in 0..10_000 {
        let slot = rng.random_range(0..weights.len());
        let relation = [Relation::Fit, Relation::Conflict, Relation::Unrelated][rng.random_range(0..3)];
        let side = if rng.random_bool(0.5) {
            CandidateSide::Anomaly
        } else {
            CandidateSide::Normal
        };
        let rho = rng.random_range(-1.0..=1.0);
        let wrong = rng.random_bool(0.5);
        let w = weights[slot];

        let next = update_weight(w, relation, rho, side, wrong).map_err(|e| e.to_string())?;
        ensure!((0.0..=1.0).contains(&next), "step {step}: weight {next} left [0, 1]");
        let want = (w + oracle_delta(relation, side, rho, wrong)).clamp(0.0, 1.0);
        ensure!((next - want).abs() <= TOL, "step {step}: {next} vs oracle {want}");
        match (side, relation) {
            (CandidateSide::Normal, Relation::Fit) => ensure!(next >= w, "step {step}: fit-normal decreased"),
            (CandidateSide::Anomaly, Relation::Fit) => ensure!(next <= w, "step {step}: fit-anomaly increased"),
            _ => {}
        }

        let base = update_weight(w, relation, rho, side, false).map_err(|e| e.to_string())?;
        let doubled = update_weight(w, relation, rho, side, true).map_err(|e| e.to_string())?;
        let raw = w + oracle_delta(relation, side, rho, true);
        if (0.0..=1.0).contains(&raw) {
            unclamped_pairs += 1;
            let (d1, d2) = ((base - w).abs(), (doubled - w).abs());
            ensure!((d2 - 2.0 * d1).abs() <= TOL, "step {step}: |Δ| {d1} vs corrective {d2}");
        }
        weights[slot] = next;
    }
    ensure!(
        unclamped_pairs > 1000,
        "only {unclamped_pairs} unclamped updates sampled"
    );
    ensure!(weights.iter().any(|&w| w != 0.5), "weights never moved");
    Ok(())
}
