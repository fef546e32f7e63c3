//! `gen-data` and dataset loading.

use std::path::{Path, PathBuf};

use polab::objectives::PreferencePair;
use polab::policy::{Policy, TokenSequence};
use polab::synth::{gen_pairs, Sampler, SyntheticTask};
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::io::{create_dir, jsonl_bytes, read_bytes, read_jsonl, sha256_hex, write_bytes};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const TRAIN_PROMPTS_FILE: &str = "train_prompts.jsonl";
pub const EVAL_PROMPTS_FILE: &str = "eval_prompts.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub records: usize,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub data_hash: String,
    pub task_seed: u64,
    pub behaviour_policy_seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub struct Dataset {
    pub task: SyntheticTask,
    pub train_prompts: Vec<TokenSequence>,
    pub eval_prompts: Vec<TokenSequence>,
    pub pairs: Vec<PreferencePair>,
}

pub fn data_dir(root: &Path) -> PathBuf {
    root.join("data")
}

/// Builds every dataset in memory.
pub fn generate(cfg: &Resolved) -> Result<Dataset> {
    let task = SyntheticTask::new(cfg.task.clone())?;
    let train_prompts = task.train_prompts(cfg.n_train_prompts);
    let eval_prompts = task.eval_prompts(cfg.n_eval_prompts, cfg.eval_overlap, &train_prompts)?;
    // Pairs come from a fixed random behaviour policy seeded by the task.
    let behaviour_spec = polab::PolicySpec { seed: cfg.task.seed, ..cfg.policy.clone() };
    let behaviour = Policy::new(behaviour_spec)?;
    let behaviour_params = behaviour.init_params(cfg.behaviour_scale);
    let sampler = Sampler { policy: &behaviour, params: &behaviour_params, config: cfg.sampler };
    let pairs = gen_pairs(&task, &train_prompts, sampler, cfg.task.seed)?;
    Ok(Dataset { task, train_prompts, eval_prompts, pairs })
}

pub fn gen_data(cfg: &Resolved, root: &Path) -> Result<Manifest> {
    let data = generate(cfg)?;
    let dir = data_dir(root);
    create_dir(&dir)?;
    let files = [
        (PAIRS_FILE, jsonl_bytes(&data.pairs)?, data.pairs.len()),
        (TRAIN_PROMPTS_FILE, jsonl_bytes(&data.train_prompts)?, data.train_prompts.len()),
        (EVAL_PROMPTS_FILE, jsonl_bytes(&data.eval_prompts)?, data.eval_prompts.len()),
    ];
    let mut entries = Vec::new();
    for (name, bytes, records) in files {
        write_bytes(&dir.join(name), &bytes)?;
        entries.push(ManifestEntry { path: name.to_string(), sha256: sha256_hex(&bytes), records });
    }
    let manifest = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        data_hash: cfg.data_hash(),
        task_seed: cfg.task.seed,
        behaviour_policy_seed: cfg.task.seed,
        files: entries,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_bytes(&dir.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}

/// Loads the datasets under `root`, checking they match `cfg` and their
/// manifest hashes.
pub fn load(cfg: &Resolved, root: &Path) -> Result<Dataset> {
    let dir = data_dir(root);
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(CliError::Usage(format!(
            "no datasets under {}; run gen-data first",
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&read_bytes(&manifest_path)?)?;
    if manifest.data_hash != cfg.data_hash() {
        return Err(CliError::Usage(format!(
            "datasets under {} were generated from a different task/policy/sampler config; rerun gen-data",
            dir.display()
        )));
    }
    for entry in &manifest.files {
        let bytes = read_bytes(&dir.join(&entry.path))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(CliError::Usage(format!("{} does not match its manifest hash", entry.path)));
        }
    }
    Ok(Dataset {
        task: SyntheticTask::new(cfg.task.clone())?,
        train_prompts: read_jsonl(&dir.join(TRAIN_PROMPTS_FILE))?,
        eval_prompts: read_jsonl(&dir.join(EVAL_PROMPTS_FILE))?,
        pairs: read_jsonl(&dir.join(PAIRS_FILE))?,
    })
}
