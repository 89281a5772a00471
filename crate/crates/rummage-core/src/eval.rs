//! Evaluation batches, the three task metrics (success rate, average motion
//! count, efficiency), method/ablation grids, and the deterministic replay
//! check used to detect nondeterminism regressions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decision::{decide, Thresholds};
use crate::env::{Method, SearchEnv, StepTrace};
use crate::error::{EvalError, ReplayError};
use crate::oracle::score_scene;
use crate::ppo::{act, act_flat, Checkpoint, EnvAction};
use crate::scene::{
    execute, generate_scene, render_info, ActionPrimitive, TransitionOutcome,
};

/// One evaluated episode: the unit of both evaluation and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub method: String,
    pub scene_seed: u64,
    pub n_objects: u32,
    pub success: bool,
    /// Number of executed actions (dead-end terminations execute none).
    pub motion_count: u32,
    pub actions: Vec<ActionPrimitive>,
    pub steps: Vec<StepTrace>,
}

/// A method plus the checkpoint it runs from, when it needs one.
pub struct MethodSpec {
    pub method: Method,
    pub checkpoint: Option<Checkpoint>,
}

impl MethodSpec {
    pub fn new(method: Method, checkpoint: Option<Checkpoint>) -> Result<Self, EvalError> {
        if method.requires_checkpoint() && checkpoint.is_none() {
            return Err(EvalError::MissingCheckpoint(method.name().to_string()));
        }
        if let (Some(head), Some(ckpt)) = (method.head(), checkpoint.as_ref()) {
            if ckpt.params.head != head {
                return Err(EvalError::MissingCheckpoint(format!(
                    "{} (checkpoint has the wrong policy head)",
                    method.name()
                )));
            }
        }
        Ok(Self { method, checkpoint })
    }

    /// Deterministic action for the current observation.
    fn select_action(&self, env: &SearchEnv) -> EnvAction {
        let features = &env.policy_features_now();
        match self.method {
            Method::FixedThreshold => EnvAction::Thresholds(Thresholds::new(0.5, 0.5)),
            Method::Xpg | Method::NoNbv => {
                let ckpt = self.checkpoint.as_ref().expect("validated at construction");
                let mut rng = rand::SeedableRng::seed_from_u64(0);
                let out = act(&ckpt.params, features, Some(&ckpt.obs_normalizer), true, &mut rng)
                    .expect("finite policy output");
                EnvAction::Thresholds(out.thresholds)
            }
            Method::FlatPolicy => {
                let ckpt = self.checkpoint.as_ref().expect("validated at construction");
                let mut rng = rand::SeedableRng::seed_from_u64(0);
                let out =
                    act_flat(&ckpt.params, features, Some(&ckpt.obs_normalizer), true, &mut rng)
                        .expect("finite policy output");
                EnvAction::Flat(out.index)
            }
        }
    }
}

/// Run one episode to termination and record it.
pub fn run_episode(
    spec: &MethodSpec,
    n_objects: u32,
    scene_seed: u64,
    config: &RunConfig,
) -> Result<EpisodeRecord, EvalError> {
    let mut env = SearchEnv::new(config, vec![n_objects], spec.method.nbv_enabled());
    env.try_reset(scene_seed)?;
    while !env.done() {
        let action = spec.select_action(&env);
        env.step_env(&action);
    }
    let trace = env.trace().to_vec();
    let actions: Vec<ActionPrimitive> = trace.iter().filter_map(|t| t.action).collect();
    Ok(EpisodeRecord {
        method: spec.method.name().to_string(),
        scene_seed,
        n_objects,
        success: env.success(),
        motion_count: actions.len() as u32,
        actions,
        steps: trace,
    })
}

/// Evaluate one (method, object count) cell: scene i uses seed base_seed + i.
/// With `jobs > 1` episodes run in parallel; results keep scene order either
/// way.
pub fn run_batch(
    spec: &MethodSpec,
    n_objects: u32,
    n_scenes: u32,
    base_seed: u64,
    config: &RunConfig,
    jobs: usize,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    let seeds: Vec<u64> = (0..n_scenes as u64).map(|i| base_seed + i).collect();
    if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| run_episode(spec, n_objects, seed, config))
                .collect()
        })
    } else {
        seeds.iter().map(|&seed| run_episode(spec, n_objects, seed, config)).collect()
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub n_objects: u32,
    pub episodes: u32,
    /// Percent of episodes extracting the target within the motion budget.
    pub success_rate: f64,
    pub avg_motions: f64,
    /// success_rate / avg_motions; 0 when no motions were recorded.
    pub efficiency: f64,
    /// efficiency / reference efficiency at the same object count.
    pub relative_efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub reference_method: String,
    pub include_failures: bool,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, method: &str, n_objects: u32) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method && r.n_objects == n_objects)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "method,n_objects,episodes,success_rate,avg_motions,efficiency,relative_efficiency"
        )?;
        for r in &self.rows {
            let rel = r.relative_efficiency.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.method, r.n_objects, r.episodes, r.success_rate, r.avg_motions, r.efficiency, rel
            )?;
        }
        Ok(())
    }
}

/// Aggregate records into the metrics table. Cells with no episodes are
/// simply absent. `include_failures` controls the avg-motions denominator.
pub fn compute_metrics(
    records: &[EpisodeRecord],
    reference_method: &str,
    include_failures: bool,
) -> MetricsTable {
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(String, u32), Vec<&EpisodeRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.method.clone(), r.n_objects)).or_default().push(r);
    }

    let mut rows = Vec::new();
    for ((method, n_objects), cell) in &cells {
        let episodes = cell.len() as u32;
        let successes = cell.iter().filter(|r| r.success).count() as f64;
        let success_rate = 100.0 * successes / episodes as f64;
        let motion_pool: Vec<f64> = cell
            .iter()
            .filter(|r| include_failures || r.success)
            .map(|r| r.motion_count as f64)
            .collect();
        let avg_motions = if motion_pool.is_empty() {
            0.0
        } else {
            motion_pool.iter().sum::<f64>() / motion_pool.len() as f64
        };
        let efficiency = efficiency_ratio(success_rate, avg_motions);
        rows.push(MetricsRow {
            method: method.clone(),
            n_objects: *n_objects,
            episodes,
            success_rate,
            avg_motions,
            efficiency,
            relative_efficiency: None,
        });
    }

    // Second pass: normalize by the reference method's efficiency per count.
    let reference: Vec<(u32, f64)> = rows
        .iter()
        .filter(|r| r.method == reference_method)
        .map(|r| (r.n_objects, r.efficiency))
        .collect();
    for row in rows.iter_mut() {
        row.relative_efficiency = reference
            .iter()
            .find(|(n, _)| *n == row.n_objects)
            .and_then(|(_, ref_eff)| (*ref_eff > 0.0).then(|| row.efficiency / ref_eff));
    }

    MetricsTable {
        reference_method: reference_method.to_string(),
        include_failures,
        rows,
    }
}

/// The efficiency definition on published-style (success %, avg motions)
/// pairs, exposed for direct metric arithmetic.
pub fn efficiency_ratio(success_rate: f64, avg_motions: f64) -> f64 {
    if avg_motions > 0.0 {
        success_rate / avg_motions
    } else {
        0.0
    }
}

/// Full methods-by-counts grid. Every learned method must carry a checkpoint.
pub fn run_ablation_suite(
    specs: &[MethodSpec],
    object_counts: &[u32],
    n_scenes: u32,
    base_seed: u64,
    config: &RunConfig,
    jobs: usize,
) -> Result<(Vec<EpisodeRecord>, MetricsTable), EvalError> {
    let mut records = Vec::new();
    for spec in specs {
        for &n in object_counts {
            records.extend(run_batch(spec, n, n_scenes, base_seed, config, jobs)?);
        }
    }
    let table = compute_metrics(
        &records,
        &config.eval.reference_method,
        config.eval.include_failures,
    );
    Ok((records, table))
}

pub fn write_jsonl<W: std::io::Write>(
    records: &[EpisodeRecord],
    mut w: W,
) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<EpisodeRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// Re-simulate a recorded episode from its seed, verifying the stored action
/// trace step by step. For threshold methods the cascade decision is also
/// re-derived from the recorded thresholds and compared. Returns the per-step
/// renders so callers can dump mask/ODM images.
pub fn replay_episode(
    record: &EpisodeRecord,
    config: &RunConfig,
) -> Result<Vec<crate::scene::DepthRender>, ReplayError> {
    let mut scene = generate_scene(record.n_objects, record.scene_seed, &config.scene)?;
    let threshold_method = record.method != Method::FlatPolicy.name();
    let mut renders = Vec::new();
    let mut success = false;

    for (step_idx, step) in record.steps.iter().enumerate() {
        let info = render_info(&scene, &scene.camera);
        renders.push(info.render.clone());
        let scores = score_scene(&scene, &info, &config.oracle);

        let Some(recorded_action) = step.action else {
            // Dead-end termination: nothing executed, episode over.
            break;
        };

        if threshold_method {
            let derived = decide(
                Thresholds::new(step.tau1, step.tau2),
                &scores,
                || match recorded_action {
                    ActionPrimitive::MoveView { pose } => pose,
                    _ => scene.camera,
                },
            )
            .map_err(|_| ReplayError::TraceMismatch {
                step: step_idx,
                recorded: format!("{recorded_action:?}"),
                resimulated: "inconsistent grasp scores".to_string(),
            })?;
            if derived != recorded_action {
                return Err(ReplayError::TraceMismatch {
                    step: step_idx,
                    recorded: format!("{recorded_action:?}"),
                    resimulated: format!("{derived:?}"),
                });
            }
        }

        let (next, outcome) = execute(&scene, &recorded_action, &scores, &config.dynamics);
        if Some(outcome) != step.outcome {
            return Err(ReplayError::TraceMismatch {
                step: step_idx,
                recorded: format!("{:?}", step.outcome),
                resimulated: format!("{outcome:?}"),
            });
        }
        success = outcome == TransitionOutcome::TargetExtracted;
        scene = next;
    }

    // Final render after the last action.
    renders.push(render_info(&scene, &scene.camera).render);

    if success != record.success || scene.step_count != record.motion_count {
        return Err(ReplayError::OutcomeMismatch {
            recorded: record.success,
            recorded_motions: record.motion_count,
            resimulated: success,
            resimulated_motions: scene.step_count,
        });
    }
    Ok(renders)
}
