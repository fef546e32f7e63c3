//! `ablate`: trains a matrix of objective variants on shared data and seeds,
//! tracking the synthetic-oracle greedy reward at each checkpoint.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use polab::policy::Policy;
use polab::synth::greedy_reward;
use serde::Deserialize;

use crate::commands::data;
use crate::commands::train::{train_into, FileHooks};
use crate::config::{ExperimentConfig, ObjectiveSection};
use crate::error::{CliError, Result};
use crate::io::{create_dir, write_bytes};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const REWARDS_FILE: &str = "rewards.csv";
const METRIC_NAME: &str = "synthetic-oracle greedy reward (not Win Rate)";

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub objective: ObjectiveSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    /// Multiplies every schedule step parameter (t1, t2, t3).
    #[serde(default = "one")]
    pub step_scale: f64,
    pub variants: Vec<Variant>,
}

fn one() -> f64 {
    1.0
}

impl Matrix {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Matrix = toml::from_str(text).map_err(|e| CliError::config("matrix", e.message().to_string()))?;
        if !(m.step_scale > 0.0 && m.step_scale.is_finite()) {
            return Err(CliError::config("matrix.step_scale", "must be a finite value > 0"));
        }
        if m.variants.is_empty() {
            return Err(CliError::config("matrix.variants", "must list at least one variant"));
        }
        let mut names: Vec<String> = m.variants.iter().map(|v| sanitize(&v.name)).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::config("matrix.variants", "variant names must be unique"));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub objective: String,
    pub peak_reward: f64,
    pub peak_step: u64,
    pub final_reward: f64,
    pub final_step: u64,
}

/// Peak (earliest on ties) and final entries of a reward curve.
pub fn summarize(variant: &str, objective: &str, curve: &[(u64, f64)]) -> Option<VariantSummary> {
    let &(final_step, final_reward) = curve.last()?;
    let mut peak = curve[0];
    for &p in curve {
        if p.1 > peak.1 {
            peak = p;
        }
    }
    Some(VariantSummary {
        variant: variant.to_string(),
        objective: objective.to_string(),
        peak_reward: peak.1,
        peak_step: peak.0,
        final_reward,
        final_step,
    })
}

pub fn summary_csv(rows: &[VariantSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "objective", "peak_oracle_reward", "peak_step", "final_oracle_reward", "final_step", "metric"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.objective.clone(),
            r.peak_reward.to_string(),
            r.peak_step.to_string(),
            r.final_reward.to_string(),
            r.final_step.to_string(),
            METRIC_NAME.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

fn rewards_csv(curve: &[(u64, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "oracle_reward"]).map_err(csv_err)?;
    for (s, r) in curve {
        w.write_record([s.to_string(), r.to_string()]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Usage(format!("writing csv: {e}"))
}

/// Runs every variant under `root/ablate/<label>/`.
pub fn cmd_ablate(base: &ExperimentConfig, root: &Path, label: &str, matrix: &Matrix) -> Result<PathBuf> {
    let out_dir = root.join("ablate").join(sanitize(label));
    create_dir(&out_dir)?;
    let mut rows = Vec::new();
    for variant in &matrix.variants {
        let mut cfg = base.clone();
        let mut objective = variant.objective.clone();
        objective.schedule = objective.schedule.map(|s| s.scaled(matrix.step_scale));
        cfg.objective = objective;
        let resolved = cfg.resolve().map_err(|e| match e {
            CliError::Config { field, message } => {
                CliError::Config { field: format!("variants[{}].{field}", variant.name), message }
            }
            other => other,
        })?;
        let data = data::load(&resolved, root)?;
        let policy = Policy::new(resolved.policy.clone())?;
        let max_len = resolved.sampler.max_len;

        let dir = out_dir.join(sanitize(&variant.name));
        create_dir(&dir)?;
        let curve = RefCell::new(Vec::new());
        {
            let mut hooks = FileHooks::new(&dir, false)?.with_observer(|ckpt| {
                let r = greedy_reward(&data.task, &policy, &ckpt.params, &data.eval_prompts, max_len)?;
                curve.borrow_mut().push((ckpt.step, r));
                Ok(())
            });
            train_into(&resolved, &data, &dir, None, &mut hooks)?;
        }
        let curve = curve.into_inner();

        write_bytes(&dir.join(REWARDS_FILE), &rewards_csv(&curve)?)?;
        if let Some(row) = summarize(&variant.name, resolved.objective.name(), &curve) {
            println!(
                "{}: peak {} at step {}, final {} at step {}",
                row.variant, row.peak_reward, row.peak_step, row.final_reward, row.final_step
            );
            rows.push(row);
        }
        // Rewritten after every variant so partial matrices leave a summary.
        write_bytes(&out_dir.join(SUMMARY_FILE), &summary_csv(&rows)?)?;
    }
    Ok(out_dir.join(SUMMARY_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_prefers_earliest_maximum() {
        let s = summarize("a", "dpo", &[(0, 0.1), (10, 0.5), (20, 0.5), (30, 0.2)]).unwrap();
        assert_eq!((s.peak_step, s.peak_reward), (10, 0.5));
        assert_eq!((s.final_step, s.final_reward), (30, 0.2));
        assert!(summarize("a", "dpo", &[]).is_none());
        let csv = String::from_utf8(summary_csv(&[s]).unwrap()).unwrap();
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("a,dpo,0.5,10,0.2,30,"), "{row}");
    }

    #[test]
    fn matrix_parsing() {
        let m = Matrix::parse(
            r#"
            step_scale = 0.5
            [[variants]]
            name = "dpo"
            objective = { id = "dpo", beta = 0.1 }
            [[variants]]
            name = "cdpo ramp"
            objective = { id = "cdpo", schedule = { kind = "cdpo_ramp", t1 = 10, t2 = 20 } }
            "#,
        )
        .unwrap();
        assert_eq!(m.variants.len(), 2);
        assert_eq!(sanitize(&m.variants[1].name), "cdpo_ramp");
        assert!(Matrix::parse("variants = []").is_err());
        let dup = r#"
            [[variants]]
            name = "a"
            objective = { id = "dpo" }
            [[variants]]
            name = "a"
            objective = { id = "ppo" }
        "#;
        assert!(Matrix::parse(dup).is_err());
    }
}
