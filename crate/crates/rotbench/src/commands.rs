//! The five subcommands as library functions. Each reads and writes files
//! under one output directory:
//!
//! ```text
//! <out>/environments/<level>.json   generate
//! <out>/transcripts/<level>.jsonl   run
//! <out>/results.json, report.txt    score
//! <out>/augment/trajectories.json   augment
//! <out>/augment/training.jsonl      augment
//! <out>/manifests/<command>.json    every command
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rotbench_core::augment::{
    clean_items, environment_for, export_records, rewrite_trajectory, sample_plan, AugmentationPlan,
    AugmentedTrajectory, Trajectory, MAX_TURNS,
};
use rotbench_core::eval::evaluate_action;
use rotbench_core::{build_environment, Catalog, EvalRecord, NoiseLevel, Stage};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{run_batch_with, Backend, BackendConfig, BackendKind};
use crate::format::{
    append_line, read_bytes, read_catalog, read_json, sha256_hex, to_canonical_json, to_jsonl_line, write_atomic,
    write_json, write_jsonl, EnvironmentFile, Manifest, Script, Transcript, TranscriptEntry, TrajectoryFile,
};
use crate::report::{build_report, render_report, Results};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub catalog: Option<PathBuf>,
    pub levels: Vec<NoiseLevel>,
    pub seed: u64,
    pub backend: BackendConfig,
    /// Answers file for the scripted backend.
    pub script: Option<PathBuf>,
    pub out: PathBuf,
    pub anova_stage: Stage,
    pub scenario: Option<String>,
    pub trajectories: Option<PathBuf>,
    pub plan: Option<AugmentationPlan>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            catalog: None,
            levels: NoiseLevel::ALL.to_vec(),
            seed: 0,
            backend: BackendConfig::default(),
            script: None,
            out: PathBuf::from("out"),
            anova_stage: Stage::ContentFilling,
            scenario: None,
            trajectories: None,
            plan: None,
        }
    }
}

impl RunConfig {
    fn levels(&self) -> Result<Vec<NoiseLevel>> {
        if self.levels.is_empty() {
            bail!("no levels requested");
        }
        let unique: BTreeSet<_> = self.levels.iter().copied().collect();
        Ok(unique.into_iter().collect())
    }

    fn catalog_path(&self) -> Result<&Path> {
        self.catalog.as_deref().context("--catalog is required")
    }

    fn keep_scenario(&self, scenario: &str) -> bool {
        self.scenario.as_deref().is_none_or(|s| s == scenario)
    }
}

pub fn environment_path(out: &Path, level: NoiseLevel) -> PathBuf {
    out.join("environments").join(format!("{level}.json"))
}

pub fn transcript_path(out: &Path, level: NoiseLevel) -> PathBuf {
    out.join("transcripts").join(format!("{level}.jsonl"))
}

pub fn results_path(out: &Path) -> PathBuf {
    out.join("results.json")
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join("manifests").join(format!("{command}.json"))
}

fn write_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    write_json(&manifest_path(out, &manifest.command), manifest)?;
    Ok(())
}

fn config_hash(value: &serde_json::Value) -> String {
    sha256_hex(to_canonical_json(value).as_bytes())
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn load_catalog(config: &RunConfig) -> Result<(Catalog, String)> {
    let path = config.catalog_path()?;
    let catalog = read_catalog(path).with_context(|| format!("reading catalog {}", path.display()))?;
    Ok((catalog, file_hash(path)?))
}

fn read_environment(out: &Path, level: NoiseLevel) -> Result<EnvironmentFile> {
    let path = environment_path(out, level);
    if !path.exists() {
        bail!(
            "missing environment file {} for level {level}; run `generate` first",
            path.display()
        );
    }
    Ok(read_json(&path)?)
}

/// Build one environment file per requested level.
pub fn cmd_generate(config: &RunConfig) -> Result<Manifest> {
    let levels = config.levels()?;
    let (mut catalog, catalog_hash) = load_catalog(config)?;
    catalog.cases.retain(|c| config.keep_scenario(&c.scenario));
    let mut counts = BTreeMap::new();
    for &level in &levels {
        let cases = build_environment(&catalog.cases, level, config.seed)?;
        counts.insert(level.label().to_string(), cases.len());
        let file = EnvironmentFile {
            level,
            seed: config.seed,
            cases,
        };
        write_json(&environment_path(&config.out, level), &file)?;
    }
    let manifest = Manifest {
        command: "generate".into(),
        seed: config.seed,
        config_hash: config_hash(&json!({
            "catalog_sha256": catalog_hash,
            "levels": levels,
            "seed": config.seed,
            "scenario": config.scenario,
        })),
        counts,
        errors: Vec::new(),
    };
    write_manifest(&config.out, &manifest)?;
    Ok(manifest)
}

/// Ask the backend for every case not yet answered. Transcripts are
/// appended to as answers arrive and rewritten in environment order at the
/// end, so an interrupted run can simply be started again.
pub fn cmd_run(config: &RunConfig) -> Result<Manifest> {
    let levels = config.levels()?;
    let script = match (&config.backend.kind, &config.script) {
        (BackendKind::Scripted, Some(path)) => Some(read_json::<Script>(path)?),
        _ => None,
    };
    let backend = Backend::from_config(&config.backend, script)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;

    let mut counts = BTreeMap::new();
    let mut errors = Vec::new();
    let mut env_hashes = BTreeMap::new();
    for &level in &levels {
        let env = read_environment(&config.out, level)?;
        env_hashes.insert(level, file_hash(&environment_path(&config.out, level))?);
        let path = transcript_path(&config.out, level);
        let previous = if path.exists() {
            Transcript::read(&path)?
        } else {
            Transcript::default()
        };
        let answered: BTreeMap<String, TranscriptEntry> = previous
            .entries
            .into_iter()
            .filter(TranscriptEntry::is_answered)
            .map(|e| (e.case_id.clone(), e))
            .collect();

        let cases: Vec<_> = env.cases.iter().filter(|c| config.keep_scenario(&c.scenario)).collect();
        let in_order = |extra: &BTreeMap<String, TranscriptEntry>| -> Vec<TranscriptEntry> {
            cases
                .iter()
                .filter_map(|c| extra.get(&c.id).or_else(|| answered.get(&c.id)).cloned())
                .collect()
        };
        // Start from a clean copy of what is already answered so a torn
        // last line cannot corrupt the entries appended below.
        write_jsonl(&path, &in_order(&BTreeMap::new()))?;

        let pending: Vec<_> = cases.iter().copied().filter(|c| !answered.contains_key(&c.id)).collect();
        let mut file = OpenOptions::new()
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        let mut append_error = None;
        let results = runtime.block_on(run_batch_with(&backend, &pending, config.backend.concurrency_limit, |(id, r)| {
            let entry = match r {
                Ok(text) => TranscriptEntry::answered(id.as_str(), text.as_str()),
                Err(e) => TranscriptEntry::failed(id.as_str(), e.to_string()),
            };
            if append_error.is_none() {
                append_error = append_line(&mut file, &path, &to_jsonl_line(&entry)).err();
            }
        }));
        if let Some(e) = append_error {
            return Err(e.into());
        }

        let mut fresh = BTreeMap::new();
        let mut failed = 0;
        for (id, r) in results {
            let entry = match r {
                Ok(text) => TranscriptEntry::answered(id.as_str(), text),
                Err(e) => {
                    failed += 1;
                    errors.push(e.to_string());
                    TranscriptEntry::failed(id.as_str(), e.to_string())
                }
            };
            fresh.insert(id, entry);
        }
        let final_entries = in_order(&fresh);
        write_jsonl(&path, &final_entries)?;
        counts.insert(format!("{}.answered", level.label()), final_entries.len() - failed);
        counts.insert(format!("{}.failed", level.label()), failed);
    }
    let b = &config.backend;
    let manifest = Manifest {
        command: "run".into(),
        seed: config.seed,
        config_hash: config_hash(&json!({
            "environments_sha256": env_hashes,
            "backend": {"kind": b.kind, "endpoint": b.endpoint, "model": b.model_name, "temperature": b.temperature},
            "script_sha256": config.script.as_deref().map(file_hash).transpose()?,
            "scenario": config.scenario,
        })),
        counts,
        errors,
    };
    write_manifest(&config.out, &manifest)?;
    Ok(manifest)
}

/// Score every transcript against its environment and write the results
/// document plus its text rendering.
pub fn cmd_score(config: &RunConfig) -> Result<Results> {
    let levels = config.levels()?;
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut hashes = BTreeMap::new();
    for &level in &levels {
        let env = read_environment(&config.out, level)?;
        let path = transcript_path(&config.out, level);
        let transcript = if path.exists() {
            hashes.insert(level, file_hash(&path)?);
            Transcript::read(&path)?
        } else {
            warnings.push(format!("no transcript for level {level}; every case counts as unanswered"));
            Transcript::default()
        };
        for (line, err) in &transcript.bad_lines {
            warnings.push(format!("{}: line {line} skipped: {err}", path.display()));
        }
        let by_case = transcript.by_case();
        for case in env.cases.iter().filter(|c| config.keep_scenario(&c.scenario)) {
            let action = by_case.get(case.id.as_str()).and_then(|e| e.action());
            records.push(evaluate_action(case, action.as_ref()));
        }
    }
    let mut report = build_report(&config.backend.model_name, &records, config.anova_stage);
    report.warnings.extend(warnings);
    let results = Results { records, report };
    write_json(&results_path(&config.out), &results)?;
    write_atomic(&config.out.join("report.txt"), render_report(&results.report).as_bytes())?;

    let manifest = Manifest {
        command: "score".into(),
        seed: config.seed,
        config_hash: config_hash(&json!({
            "transcripts_sha256": hashes,
            "levels": levels,
            "anova_stage": config.anova_stage,
            "scenario": config.scenario,
            "model": config.backend.model_name,
        })),
        counts: results
            .report
            .diagnostics
            .iter()
            .map(|(l, d)| (l.label().to_string(), d.cases))
            .collect(),
        errors: Vec::new(),
    };
    write_manifest(&config.out, &manifest)?;
    Ok(results)
}

/// Re-aggregate an existing results document, optionally for a different
/// ANOVA stage or a single scenario, and render it.
pub fn cmd_report(config: &RunConfig) -> Result<String> {
    let results: Results = read_json(&results_path(&config.out))
        .with_context(|| format!("reading results from {}; run `score` first", config.out.display()))?;
    let levels: BTreeSet<_> = config.levels.iter().copied().collect();
    let records: Vec<EvalRecord> = results
        .records
        .into_iter()
        .filter(|r| config.keep_scenario(&r.scenario) && levels.contains(&r.level))
        .collect();
    let model = if config.backend.model_name.is_empty() {
        results.report.model
    } else {
        config.backend.model_name.clone()
    };
    Ok(render_report(&build_report(&model, &records, config.anova_stage)))
}

/// Sample trajectories per level, rewrite them into noisy environments and
/// export one training record per turn.
pub fn cmd_augment(config: &RunConfig) -> Result<Manifest> {
    let (catalog, catalog_hash) = load_catalog(config)?;
    let traj_path = config.trajectories.as_deref().context("--trajectories is required")?;
    let file: TrajectoryFile = read_json(traj_path)?;

    let mut errors = Vec::new();
    let trajectories: Vec<Trajectory> = file
        .trajectories
        .into_iter()
        .filter(|t| {
            let known = catalog.cases.iter().any(|c| c.id == t.source_case);
            if !known {
                errors.push(format!("trajectory `{}`: unknown source case `{}`", t.id, t.source_case));
            } else if t.turns.len() > MAX_TURNS {
                errors.push(format!("trajectory `{}`: {} turns, more than {MAX_TURNS}", t.id, t.turns.len()));
            }
            known && t.turns.len() <= MAX_TURNS
        })
        .collect();

    let plan = config.plan.clone().unwrap_or_default();
    let fitted = plan.fit_to(trajectories.len());
    let sampled = sample_plan(&trajectories, &plan, config.seed);

    let mut items: Vec<AugmentedTrajectory> = clean_items(&sampled[&NoiseLevel::Clean], &catalog.cases);
    let mut counts = BTreeMap::new();
    counts.insert(NoiseLevel::Clean.label().to_string(), items.len());
    for (&level, picked) in sampled.iter().filter(|(l, _)| **l != NoiseLevel::Clean) {
        let mut n = 0;
        for t in picked {
            let case = catalog.cases.iter().find(|c| c.id == t.source_case).expect("filtered above");
            let rewritten = environment_for(t, case, level, config.seed)
                .map_err(|e| e.to_string())
                .and_then(|env| {
                    rewrite_trajectory(t, &env)
                        .map(|r| (r, env.tools))
                        .map_err(|e| e.to_string())
                });
            match rewritten {
                Ok((trajectory, tools)) => {
                    n += 1;
                    items.push(AugmentedTrajectory {
                        level,
                        trajectory,
                        tools,
                    });
                }
                Err(e) => errors.push(format!("trajectory `{}` at {level}: {e}", t.id)),
            }
        }
        counts.insert(level.label().to_string(), n);
    }
    let records = export_records(&items);
    counts.insert("records".into(), records.len());

    let dir = config.out.join("augment");
    write_json(&dir.join("trajectories.json"), &items)?;
    write_jsonl(&dir.join("training.jsonl"), &records)?;
    let manifest = Manifest {
        command: "augment".into(),
        seed: config.seed,
        config_hash: config_hash(&json!({
            "catalog_sha256": catalog_hash,
            "trajectories_sha256": file_hash(traj_path)?,
            "plan": fitted,
            "seed": config.seed,
        })),
        counts,
        errors,
    };
    write_manifest(&config.out, &manifest)?;
    Ok(manifest)
}
