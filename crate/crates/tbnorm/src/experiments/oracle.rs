//! Oracle study: train the fine-tuning baseline with plain batch norm, then
//! repair its normalization state with full-data access — first statistics
//! only, then statistics plus retrained gamma/beta — against the joint-
//! training upper bound.

use serde::Serialize;

use crate::checkpoint::{load_model, save_model};
use crate::cil::{
    evaluate, oracle_recompute_stats, oracle_retrain_affine, pooled_train_data,
    run_cil_with_model, train_joint,
};
use crate::error::Result;
use crate::norm::NormKind;
use crate::rng::SeededRng;

use super::{mean_of, prepare_out_dir, write_csv, write_json, RunConfig};

#[derive(Debug, Clone, Serialize)]
pub struct OracleSeedReport {
    pub seed: u64,
    pub ft: Vec<f64>,
    pub stats_only: Vec<f64>,
    pub stats_affine: Vec<f64>,
    pub joint: Vec<f64>,
    pub ft_avg: f64,
    pub stats_only_avg: f64,
    pub stats_affine_avg: f64,
    pub joint_avg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub per_seed: Vec<OracleSeedReport>,
    pub mean_ft: f64,
    pub mean_stats_only: f64,
    pub mean_stats_affine: f64,
    pub mean_joint: f64,
}

pub fn exp_oracle(cfg: &RunConfig) -> Result<OracleReport> {
    prepare_out_dir(cfg)?;
    let train = cfg.train.clone().with_norm(NormKind::Bn);

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let stream = train.build_stream(seed);
        let tasks = stream.tasks();
        let (_, ft_model) = run_cil_with_model(&stream, &train, seed)?;

        // The trained baseline goes through the checkpoint format; both
        // oracle branches start from the same file.
        let ckpt = cfg.out_dir.join(format!("ft_model_s{seed}.tbnorm"));
        save_model(&ft_model, &ckpt)?;

        let ft_row = evaluate(&ft_model, &stream, tasks)?;
        let full = pooled_train_data(&stream);

        let mut stats_model = load_model(&ckpt)?;
        oracle_recompute_stats(&mut stats_model, &full)?;
        let stats_row = evaluate(&stats_model, &stream, tasks)?;

        let mut affine_model = load_model(&ckpt)?;
        oracle_recompute_stats(&mut affine_model, &full)?;
        let mut affine_rng = SeededRng::new(seed).fork(7);
        oracle_retrain_affine(
            &mut affine_model,
            &full,
            &train,
            train.epochs_per_task,
            &mut affine_rng,
        )?;
        let affine_row = evaluate(&affine_model, &stream, tasks)?;

        let joint_model = train_joint(&stream, &train, seed)?;
        let joint_row = evaluate(&joint_model, &stream, tasks)?;

        per_seed.push(OracleSeedReport {
            seed,
            ft_avg: mean_of(&ft_row),
            stats_only_avg: mean_of(&stats_row),
            stats_affine_avg: mean_of(&affine_row),
            joint_avg: mean_of(&joint_row),
            ft: ft_row,
            stats_only: stats_row,
            stats_affine: affine_row,
            joint: joint_row,
        });
    }

    let mut lines = Vec::new();
    for s in &per_seed {
        for (variant, row, avg) in [
            ("ft", &s.ft, s.ft_avg),
            ("stats_only", &s.stats_only, s.stats_only_avg),
            ("stats_affine", &s.stats_affine, s.stats_affine_avg),
            ("joint", &s.joint, s.joint_avg),
        ] {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            lines.push(format!("{},{variant},{},{avg}", s.seed, cells.join(";")));
        }
    }
    write_csv(
        &cfg.out_dir.join("oracle.csv"),
        "seed,variant,per_task_accuracy,average",
        &lines,
    )?;

    let report = OracleReport {
        mean_ft: mean_of(&per_seed.iter().map(|s| s.ft_avg).collect::<Vec<_>>()),
        mean_stats_only: mean_of(&per_seed.iter().map(|s| s.stats_only_avg).collect::<Vec<_>>()),
        mean_stats_affine: mean_of(
            &per_seed.iter().map(|s| s.stats_affine_avg).collect::<Vec<_>>(),
        ),
        mean_joint: mean_of(&per_seed.iter().map(|s| s.joint_avg).collect::<Vec<_>>()),
        per_seed,
    };
    write_json(&cfg.out_dir.join("oracle.json"), &report)?;
    Ok(report)
}
