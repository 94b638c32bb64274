//! The command-line verbs. Each returns a JSON run summary.

use crate::config::RunConfig;
use crate::pipeline::{self, Model, Split};
use diffplan_core::checkpoint::Checkpoint;
use diffplan_core::corpus::{load_corpus, save_corpus, CorpusManifest};
use diffplan_core::il::RunStatus;
use diffplan_core::rng::derive_rng;
use diffplan_core::scene::Scene;
use diffplan_core::simulator::{render_svg, rollout, EvalReport};
use diffplan_core::{Error, Real, Result};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

/// `out` with `suffix` appended to its file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn read_corpus(path: &Path) -> Result<Vec<Scene>> {
    if !path.exists() {
        return Err(Error::Validation(format!("corpus {} does not exist", path.display())));
    }
    load_corpus(path)
}

fn read_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    Model::from_checkpoint(Checkpoint::load(path)?)
}

fn header(cfg: &RunConfig, command: &str) -> Value {
    json!({ "command": command, "config_hash": cfg.hash(), "seed": cfg.seed })
}

fn status_json(status: &RunStatus) -> Value {
    match status {
        RunStatus::Completed => json!("completed"),
        RunStatus::Diverged { step, reason } => json!({ "diverged": { "step": step, "reason": reason } }),
    }
}

fn diverged(status: &RunStatus, summary: &Path) -> Result<()> {
    match status {
        RunStatus::Completed => Ok(()),
        RunStatus::Diverged { step, reason } => Err(Error::Diverged(format!(
            "training diverged at step {step} ({reason}); last good parameters saved, see {}",
            summary.display()
        ))),
    }
}

/// Writes the corpus and `<out>.manifest.json`.
pub fn gen_corpus(cfg: &RunConfig, split: Split, out: &Path) -> Result<Value> {
    let (spec, corpus) = pipeline::generate(cfg, split)?;
    save_corpus(out, &corpus.scenes)?;
    let manifest = CorpusManifest::new(&spec, &corpus);
    let manifest_path = sibling(out, ".manifest.json");
    write_json(&manifest_path, &serde_json::to_value(&manifest)?)?;
    let mut summary = header(cfg, "gen-corpus");
    summary["scenes"] = json!(corpus.scenes.len());
    summary["corpus"] = json!(out);
    summary["manifest"] = json!(manifest_path);
    summary["oracle_pdms_floor"] = json!(manifest.oracle_pdms_floor);
    Ok(summary)
}

/// Writes the checkpoint, `<out>.curve.csv` and `<out>.summary.json`.
pub fn train_il(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<Value> {
    let scenes = read_corpus(corpus)?;
    let run = pipeline::run_il(cfg, &scenes)?;
    let meta = json!({ "stage": "il", "config_hash": cfg.hash(), "seed": cfg.seed });
    pipeline::checkpoint(cfg, run.params.clone(), meta).save(out)?;
    write(&sibling(out, ".curve.csv"), run.curve_csv())?;
    let mut summary = header(cfg, "train-il");
    summary["checkpoint"] = json!(out);
    summary["steps"] = json!(run.curve.len());
    summary["initial_loss"] = json!(run.initial_loss);
    summary["final_loss"] = json!(run.final_loss);
    summary["epoch_losses"] = json!(run.epoch_losses);
    summary["status"] = status_json(&run.status);
    let summary_path = sibling(out, ".summary.json");
    write_json(&summary_path, &summary)?;
    diverged(&run.status, &summary_path)?;
    Ok(summary)
}

/// Fine-tunes `init`; writes the checkpoint, `<out>.curve.csv` and `<out>.summary.json`.
pub fn train_rl(cfg: &RunConfig, corpus: &Path, init: &Path, eval_corpus: Option<&Path>, out: &Path) -> Result<Value> {
    let scenes = read_corpus(corpus)?;
    let model = read_model(init)?;
    let eval_scenes = eval_corpus.map(read_corpus).transpose()?;
    let run = pipeline::run_rl(cfg, &model, &scenes, eval_scenes.as_deref())?;
    let meta = json!({ "stage": "rl", "config_hash": cfg.hash(), "seed": cfg.seed, "init": init });
    let ck = Checkpoint { params: run.params.clone(), ..model.checkpoint.clone() };
    Checkpoint { meta, ..ck }.save(out)?;
    let mut csv = run.curve_csv();
    if !run.epoch_eval.is_empty() {
        let mut lines: Vec<String> = csv.lines().map(str::to_string).collect();
        lines[0].push_str(",eval_pdms");
        for (line, e) in lines.iter_mut().skip(1).zip(&run.epoch_eval) {
            line.push_str(&format!(",{:.9e}", e.pdms));
        }
        csv = lines.join("\n") + "\n";
    }
    write(&sibling(out, ".curve.csv"), csv)?;
    let mut summary = header(cfg, "train-rl");
    summary["checkpoint"] = json!(out);
    summary["iterations_per_epoch"] = json!(scenes.len().div_ceil(cfg.rl.batch_scenes));
    summary["final_mean_reward"] = json!(run.curve.last().map(|p| p.mean_reward));
    summary["epoch_eval"] = serde_json::to_value(&run.epoch_eval)?;
    summary["status"] = status_json(&run.status);
    let summary_path = sibling(out, ".summary.json");
    write_json(&summary_path, &summary)?;
    diverged(&run.status, &summary_path)?;
    Ok(summary)
}

pub enum Subject<'a> {
    Checkpoint(&'a Path),
    ConstantVelocity,
}

/// Writes the per-scene CSV, `<report>.summary.json` and optionally one SVG per scene.
pub fn eval(cfg: &RunConfig, corpus: &Path, subject: Subject<'_>, report: &Path, svg_dir: Option<&Path>) -> Result<Value> {
    let scenes = read_corpus(corpus)?;
    let sched = pipeline::schedule(cfg)?;
    let model = match subject {
        Subject::Checkpoint(p) => Some(read_model(p)?),
        Subject::ConstantVelocity => None,
    };
    let result: EvalReport = match &model {
        Some(m) => pipeline::evaluate_model(cfg, m, &scenes)?,
        None => pipeline::evaluate_baseline(cfg, &scenes)?,
    };
    write(report, result.to_csv())?;
    let mut summary = header(cfg, "eval");
    summary["planner"] = json!(if model.is_some() { "checkpoint" } else { "constant-velocity" });
    summary["report"] = json!(report);
    for (k, v) in result.summary_json().as_object().expect("summary is an object") {
        summary[k] = v.clone();
    }
    write_json(&sibling(report, ".summary.json"), &summary)?;
    if let Some(dir) = svg_dir {
        std::fs::create_dir_all(dir)?;
        for scene in &scenes {
            let plan = match &model {
                Some(m) => m.planner(&sched, cfg).plan(scene, &cfg.sampler, cfg.eval_seed()),
                None => diffplan_core::simulator::constant_velocity_planner(scene, cfg.corpus.waypoints, cfg.corpus.dt_waypoint),
            }
            .ok();
            let ticks = plan.as_ref().and_then(|p| rollout(scene, p, cfg.sim.dt_tick).ok());
            write(&dir.join(format!("scene_{}.svg", scene.id)), render_svg(scene, plan.as_ref(), ticks.as_deref(), &cfg.sim))?;
        }
    }
    Ok(summary)
}

/// The noise schedule as CSV.
pub fn inspect_schedule(cfg: &RunConfig) -> Result<String> {
    Ok(pipeline::schedule(cfg)?.to_csv())
}

/// One sampled denoising chain for a scene, as JSON.
pub fn inspect_chain(cfg: &RunConfig, checkpoint: &Path, corpus: &Path, scene_id: Option<u64>, steps: Option<usize>) -> Result<Value> {
    let scenes = read_corpus(corpus)?;
    let scene = match scene_id {
        Some(id) => scenes.iter().find(|s| s.id == id).ok_or_else(|| Error::Validation(format!("no scene with id {id}")))?,
        None => scenes.first().ok_or_else(|| Error::Validation("corpus is empty".into()))?,
    };
    let model = read_model(checkpoint)?;
    let sched = pipeline::schedule(cfg)?;
    let planner = model.planner(&sched, cfg);
    let cond = planner.condition(scene)?;
    let mut rng = derive_rng(cfg.eval_seed(), "plan", scene.id);
    let chain = planner.sample(&cond, steps.unwrap_or(cfg.sampler.steps), cfg.sampler.sigma_min, &cfg.sampler.clip, &mut rng)?;
    let rows = |m: &diffplan_core::Mat<Real>| -> Vec<Vec<Real>> { (0..m.rows()).map(|r| m.row(r).to_vec()).collect() };
    let trajectory = planner.decode(&chain)?;
    Ok(json!({
        "scene_id": scene.id,
        "timesteps": chain.timesteps(),
        "sigmas": chain.step_sigmas(),
        "states": chain.states.iter().map(rows).collect::<Vec<_>>(),
        "means": chain.means.iter().map(rows).collect::<Vec<_>>(),
        "trajectory": trajectory.waypoints,
    }))
}
