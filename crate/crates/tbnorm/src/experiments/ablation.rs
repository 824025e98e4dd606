//! Ablation sweep over the task-balanced components: the full layer, the
//! four single-flag cases, and plain batch normalization for reference.

use serde::Serialize;

use crate::error::Result;
use crate::norm::{AblationFlags, NormKind};

use super::cil_run::run_seeds;
use super::{prepare_out_dir, write_csv, write_json, RunConfig};

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub per_seed_final: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub mean_average_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    /// 1 / (total classes): the accuracy of guessing one class blindly.
    pub chance_level: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.name == name)
            .unwrap_or_else(|| panic!("no ablation row named {name}"))
    }
}

pub fn exp_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    prepare_out_dir(cfg)?;
    let chance_level = 1.0 / (cfg.train.tasks * cfg.train.classes_per_task) as f64;

    let mut cases: Vec<(String, NormKind, AblationFlags)> = vec![(
        "tbbn".to_string(),
        NormKind::Tbbn,
        AblationFlags::FULL,
    )];
    for case in 1..=4 {
        cases.push((
            format!("case{case}"),
            NormKind::Tbbn,
            AblationFlags::ablation_case(case),
        ));
    }
    cases.push(("bn".to_string(), NormKind::Bn, AblationFlags::VANILLA_BN));

    let mut rows = Vec::with_capacity(cases.len());
    for (name, norm, flags) in cases {
        let train = cfg
            .train
            .clone()
            .with_norm(norm)
            .with_ablation(flags);
        let sub = RunConfig::new(
            format!("{}-{name}", cfg.experiment),
            train.clone(),
            cfg.out_dir.join(&name),
            cfg.seeds.clone(),
        );
        std::fs::create_dir_all(&sub.out_dir)?;
        let report = run_seeds(&sub, &train)?;
        rows.push(AblationRow {
            name,
            flags,
            per_seed_final: report.per_seed.iter().map(|s| s.final_accuracy).collect(),
            mean_final_accuracy: report.mean_final_accuracy,
            mean_average_accuracy: report.mean_average_accuracy,
        });
    }

    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.name,
                r.flags.balanced_stats_train,
                r.flags.balanced_stats_test,
                r.flags.balanced_affine,
                r.mean_final_accuracy,
                r.mean_average_accuracy
            )
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("ablation.csv"),
        "case,balanced_stats_train,balanced_stats_test,balanced_affine,mean_final_accuracy,mean_average_accuracy",
        &lines,
    )?;

    let report = AblationReport { chance_level, rows };
    write_json(&cfg.out_dir.join("ablation.json"), &report)?;
    Ok(report)
}
