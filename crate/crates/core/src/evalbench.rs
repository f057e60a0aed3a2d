//! Evaluation protocols, scenario generation, trial runner and metric aggregation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::perception::{most_occluded_target, occlusion_report_from, OcclusionOptions};
use crate::policy::{Policy, Result, RunError};
use crate::reward::{grasp_reward, push_reward, RewardParams, ThresholdState};
use crate::sim::{ActionKind, ObjectId, Scene, SceneFile, ShapePool};

pub const OCCLUDED_OBJECTS: usize = 30;
pub const REJECTION_CAP: usize = 500;
pub const CHALLENGING_LAYOUTS: usize = 6;

const LAYOUTS: [&str; CHALLENGING_LAYOUTS] = [
    include_str!("../assets/challenging_1.json"),
    include_str!("../assets/challenging_2.json"),
    include_str!("../assets/challenging_3.json"),
    include_str!("../assets/challenging_4.json"),
    include_str!("../assets/challenging_5.json"),
    include_str!("../assets/challenging_6.json"),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProtocolKind {
    Random15,
    Random30,
    Random30Hard,
    /// Target occluded rate in `[lo, hi)`.
    Occluded {
        lo: f64,
        hi: f64,
    },
    /// Scripted layout, numbered from 1.
    Challenging(usize),
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolKind::Random15 => write!(f, "random15"),
            ProtocolKind::Random30 => write!(f, "random30"),
            ProtocolKind::Random30Hard => write!(f, "random30_hard"),
            ProtocolKind::Occluded { lo, hi } => write!(f, "occluded:{lo}-{hi}"),
            ProtocolKind::Challenging(k) => write!(f, "challenging:{k}"),
        }
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random15" => return Ok(ProtocolKind::Random15),
            "random30" => return Ok(ProtocolKind::Random30),
            "random30_hard" => return Ok(ProtocolKind::Random30Hard),
            _ => {}
        }
        if let Some(bin) = s.strip_prefix("occluded:") {
            let (lo, hi) = bin
                .split_once('-')
                .ok_or_else(|| format!("occluded bin `{bin}` is not lo-hi"))?;
            let lo: f64 = lo.parse().map_err(|_| format!("bad bin bound `{lo}`"))?;
            let hi: f64 = hi.parse().map_err(|_| format!("bad bin bound `{hi}`"))?;
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(format!("occluded bin [{lo}, {hi}) outside [0, 1]"));
            }
            return Ok(ProtocolKind::Occluded { lo, hi });
        }
        if let Some(k) = s.strip_prefix("challenging:") {
            let k: usize = k.parse().map_err(|_| format!("bad layout id `{k}`"))?;
            if !(1..=CHALLENGING_LAYOUTS).contains(&k) {
                return Err(format!("layout {k} not in 1..={CHALLENGING_LAYOUTS}"));
            }
            return Ok(ProtocolKind::Challenging(k));
        }
        Err(format!("unknown protocol `{s}`"))
    }
}

impl Serialize for ProtocolKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProtocolKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub name: ProtocolKind,
    pub n_trials: usize,
    pub max_attempts: usize,
    /// Consecutive zero-reward motions that end a trial.
    pub fail_limit: usize,
    pub seed_base: u64,
}

impl Protocol {
    /// Trial counts and caps used for each protocol family.
    pub fn standard(name: ProtocolKind) -> Self {
        let (n_trials, max_attempts) = match name {
            ProtocolKind::Random15 | ProtocolKind::Random30 | ProtocolKind::Random30Hard => {
                (100, 5)
            }
            ProtocolKind::Occluded { .. } => (100, 10),
            ProtocolKind::Challenging(_) => (30, 10),
        };
        Self {
            name,
            n_trials,
            max_attempts,
            fail_limit: 5,
            seed_base: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.max_attempts == 0 || self.fail_limit == 0 {
            return Err(RunError::Generation(format!(
                "protocol {}: n_trials, max_attempts and fail_limit must be >= 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// A protocol file holds either one protocol object or a list of them.
pub fn parse_protocols(text: &str) -> Result<Vec<Protocol>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<Protocol>),
        One(Protocol),
    }
    let list = match serde_json::from_str(text)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(p) => vec![p],
    };
    for p in &list {
        p.validate()?;
    }
    Ok(list)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    #[allow(dead_code)]
    name: String,
    target: ObjectId,
    scene: SceneFile,
}

/// One of the scripted occluded-and-enclosed layouts.
pub fn challenging_layout(k: usize) -> Result<(Scene, ObjectId)> {
    let text = LAYOUTS
        .get(k.wrapping_sub(1))
        .ok_or_else(|| RunError::Generation(format!("no layout {k}")))?;
    let file: LayoutFile = serde_json::from_str(text)?;
    let scene = file.scene.into_scene()?;
    scene.validate()?;
    if !scene.contains(file.target) {
        return Err(RunError::Generation(format!(
            "layout {k} target {} missing",
            file.target
        )));
    }
    Ok((scene, file.target))
}

/// Build the starting scene and target for one trial.
pub fn generate_case(
    protocol: &Protocol,
    trial_seed: u64,
    workspace: usize,
) -> Result<(Scene, ObjectId)> {
    let pool = ShapePool::default();
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let base = Scene::new(workspace, workspace, trial_seed);
    match protocol.name {
        ProtocolKind::Random15 | ProtocolKind::Random30 => {
            let n = if protocol.name == ProtocolKind::Random15 {
                15
            } else {
                30
            };
            let scene = base.spawn_random(n, &pool, &mut rng)?;
            let target = scene.stack_order[rng.gen_range(0..n)];
            Ok((scene, target))
        }
        ProtocolKind::Random30Hard => {
            let scene = base.spawn_random(30, &pool, &mut rng)?;
            let ids = scene.stack_order.clone();
            let target = most_occluded_target(&scene, &ids)?;
            Ok((scene, target))
        }
        ProtocolKind::Occluded { lo, hi } => {
            let opts = OcclusionOptions::default();
            for _ in 0..REJECTION_CAP {
                let scene = base.spawn_random(OCCLUDED_OBJECTS, &pool, &mut rng)?;
                let prints = scene.footprints();
                let mut in_bin = Vec::new();
                for &id in &scene.stack_order {
                    let o = occlusion_report_from(&scene, &prints, id, &opts)?.occluded_rate;
                    if o >= lo && o < hi {
                        in_bin.push(id);
                    }
                }
                if !in_bin.is_empty() {
                    let target = in_bin[rng.gen_range(0..in_bin.len())];
                    return Ok((scene, target));
                }
            }
            Err(RunError::Generation(format!(
                "no target with occluded rate in [{lo}, {hi}) after {REJECTION_CAP} scenes"
            )))
        }
        ProtocolKind::Challenging(k) => challenging_layout(k),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionOutcome {
    Pushed { moved: usize },
    GraspedTarget,
    GraspedOther { id: ObjectId },
    GraspMissed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub kind: ActionKind,
    pub rot: usize,
    pub x: usize,
    pub y: usize,
    pub reward: f64,
    pub outcome: MotionOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub protocol: String,
    pub seed: u64,
    pub target: ObjectId,
    pub motions: Vec<MotionRecord>,
    pub success: bool,
    pub attempts: usize,
}

/// Reward bookkeeping for evaluation; the push threshold stays frozen.
#[derive(Clone, Copy, Debug)]
pub struct EvalRewards {
    pub params: RewardParams,
    pub threshold: ThresholdState,
}

/// Roll out a frozen policy until the target is retrieved, the attempt cap is
/// hit, or `fail_limit` consecutive motions earn nothing.
pub fn run_trial(
    scene: &Scene,
    target: ObjectId,
    policy: &Policy,
    protocol: &Protocol,
    rewards: &EvalRewards,
    seed: u64,
) -> Result<TrialRecord> {
    let mut scene = scene.clone();
    let mut motions = Vec::new();
    let mut fails = 0usize;
    let mut zero_run = 0usize;
    let mut success = false;
    let mut decision = policy.act(&scene, target, fails)?;
    while motions.len() < protocol.max_attempts {
        let action = decision.primitive;
        let o_before = decision.observation.report.occluded_rate;
        let (next, outcome, grasp) = match action.kind {
            ActionKind::Push => {
                let (next, out) = scene.apply_push(&action);
                let moved = out.moved.len();
                (next, MotionOutcome::Pushed { moved }, None)
            }
            ActionKind::Grasp => {
                let (next, out) = scene.apply_grasp(&action, target)?;
                let outcome = match out.grasped_id {
                    Some(_) if out.target_was_grasped => MotionOutcome::GraspedTarget,
                    Some(id) => MotionOutcome::GraspedOther { id },
                    None => MotionOutcome::GraspMissed,
                };
                (next, outcome, Some(out))
            }
        };
        if let Some(g) = &grasp {
            if !g.target_was_grasped {
                fails += 1;
            }
        }
        let terminal = outcome == MotionOutcome::GraspedTarget;
        let next_decision = if terminal {
            None
        } else {
            Some(policy.act(&next, target, fails)?)
        };
        let reward = match (&grasp, &next_decision) {
            (Some(g), _) => grasp_reward(
                g,
                (action.x, action.y),
                &decision.observation.report.full_mask,
                &rewards.params,
            ),
            (None, Some(nd)) => push_reward(
                o_before,
                nd.observation.report.occluded_rate,
                nd.observation.best_grasp.q_value as f64,
                &rewards.threshold,
                &rewards.params,
            ),
            (None, None) => unreachable!("a push never removes the target"),
        };
        motions.push(MotionRecord {
            kind: action.kind,
            rot: action.rot_index,
            x: action.x,
            y: action.y,
            reward,
            outcome,
        });
        if terminal {
            success = true;
            break;
        }
        zero_run = if reward == 0.0 { zero_run + 1 } else { 0 };
        if zero_run >= protocol.fail_limit {
            break;
        }
        scene = next;
        decision = next_decision.expect("non-terminal");
    }
    Ok(TrialRecord {
        protocol: protocol.name.to_string(),
        seed,
        target,
        attempts: motions.len(),
        motions,
        success,
    })
}

/// Run every trial of `protocol`, spread over worker threads. Records come back
/// in trial order whatever the thread count.
pub fn run_protocol(
    policy: &Policy,
    protocol: &Protocol,
    workspace: usize,
    rewards: &EvalRewards,
    threads: usize,
) -> Result<Vec<TrialRecord>> {
    protocol.validate()?;
    let before = policy.checksum();
    let seeds: Vec<u64> = (0..protocol.n_trials as u64)
        .map(|i| protocol.seed_base + i)
        .collect();
    let threads = threads.clamp(1, seeds.len());
    let chunk = seeds.len().div_ceil(threads);
    let results: Vec<Result<Vec<TrialRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let (scene, target) = generate_case(protocol, seed, workspace)?;
                            run_trial(&scene, target, policy, protocol, rewards, seed)
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });
    let mut records = Vec::with_capacity(seeds.len());
    for r in results {
        records.extend(r?);
    }
    if policy.checksum() != before {
        return Err(RunError::Checkpoint(
            "policy parameters changed during evaluation".into(),
        ));
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub label: String,
    pub protocol: String,
    pub trials: usize,
    pub success_rate_pct: f64,
    pub mean_attempts: f64,
}

fn summarize(
    label: &str,
    protocol: &str,
    records: &[&TrialRecord],
    successes_only: bool,
) -> MetricsLine {
    let trials = records.len();
    let successes: Vec<_> = records.iter().filter(|r| r.success).collect();
    let counted: Vec<usize> = if successes_only {
        successes.iter().map(|r| r.attempts).collect()
    } else {
        records.iter().map(|r| r.attempts).collect()
    };
    MetricsLine {
        label: label.to_string(),
        protocol: protocol.to_string(),
        trials,
        success_rate_pct: 100.0 * successes.len() as f64 / trials as f64,
        // NaN when averaging over successes and there are none
        mean_attempts: counted.iter().sum::<usize>() as f64 / counted.len() as f64,
    }
}

/// Per-protocol rows in order of first appearance, then an `average` row taking
/// the unweighted mean of the protocol rows.
pub fn aggregate(
    label: &str,
    records: &[TrialRecord],
    successes_only: bool,
) -> Result<Vec<MetricsLine>> {
    if records.is_empty() {
        return Err(RunError::Generation("no trial records to aggregate".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.protocol.as_str()) {
            order.push(&r.protocol);
        }
    }
    let mut lines: Vec<MetricsLine> = order
        .iter()
        .map(|p| {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.protocol == *p).collect();
            summarize(label, p, &rs, successes_only)
        })
        .collect();
    let n = lines.len() as f64;
    lines.push(MetricsLine {
        label: label.to_string(),
        protocol: "average".into(),
        trials: records.len(),
        success_rate_pct: lines.iter().map(|l| l.success_rate_pct).sum::<f64>() / n,
        mean_attempts: lines.iter().map(|l| l.mean_attempts).sum::<f64>() / n,
    });
    Ok(lines)
}

pub fn write_metrics_csv(path: &Path, lines: &[MetricsLine]) -> Result<()> {
    let mut out = String::from("label,protocol,trials,success_rate_pct,mean_attempts\n");
    for l in lines {
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2}\n",
            l.label, l.protocol, l.trials, l.success_rate_pct, l.mean_attempts
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_records_jsonl(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names_round_trip() {
        for s in [
            "random15",
            "random30",
            "random30_hard",
            "occluded:0.2-0.4",
            "challenging:3",
        ] {
            let p: ProtocolKind = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("occluded:0.6".parse::<ProtocolKind>().is_err());
        assert!("occluded:0.8-0.6".parse::<ProtocolKind>().is_err());
        assert!("challenging:7".parse::<ProtocolKind>().is_err());
        assert!("random45".parse::<ProtocolKind>().is_err());
    }

    #[test]
    fn standard_protocols() {
        let r = Protocol::standard(ProtocolKind::Random30Hard);
        assert_eq!((r.n_trials, r.max_attempts, r.fail_limit), (100, 5, 5));
        let o = Protocol::standard(ProtocolKind::Occluded { lo: 0.2, hi: 0.4 });
        assert_eq!((o.n_trials, o.max_attempts), (100, 10));
        let c = Protocol::standard(ProtocolKind::Challenging(1));
        assert_eq!((c.n_trials, c.max_attempts), (30, 10));
    }

    #[test]
    fn protocol_file_forms() {
        let one = r#"{"name": "random15", "n_trials": 3, "max_attempts": 5, "fail_limit": 5, "seed_base": 1}"#;
        assert_eq!(parse_protocols(one).unwrap().len(), 1);
        let many = format!("[{one}, {}]", one.replace("random15", "occluded:0.6-0.8"));
        let ps = parse_protocols(&many).unwrap();
        assert_eq!(ps[1].name, ProtocolKind::Occluded { lo: 0.6, hi: 0.8 });
        assert!(parse_protocols(&one.replace("\"n_trials\": 3", "\"n_trials\": 0")).is_err());
        assert!(parse_protocols(&one.replace("seed_base", "seed")).is_err());
    }

    fn record(success: bool, attempts: usize) -> TrialRecord {
        TrialRecord {
            protocol: "random15".into(),
            seed: 0,
            target: 0,
            motions: Vec::new(),
            success,
            attempts,
        }
    }

    #[test]
    fn all_single_motion_successes() {
        let rs: Vec<_> = (0..4).map(|_| record(true, 1)).collect();
        let lines = aggregate("x", &rs, false).unwrap();
        assert_eq!(lines[0].success_rate_pct, 100.0);
        assert_eq!(lines[0].mean_attempts, 1.0);
        assert_eq!(lines[1].protocol, "average");
        assert!(aggregate("x", &[], false).is_err());
    }
}
