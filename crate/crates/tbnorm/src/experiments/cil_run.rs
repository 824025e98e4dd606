//! Full class-incremental runs of the fine-tuning baseline with a chosen
//! normalization layer: per-seed accuracy matrices, metrics and the
//! misclassification taxonomy, plus across-seed means.

use serde::Serialize;

use crate::cil::{run_cil, TrainConfig};
use crate::error::Result;
use crate::metrics::{
    average_accuracy, final_accuracy, forgetting, learning_accuracy, MisclassCounts,
};
use crate::norm::NormKind;

use super::{mean_of, prepare_out_dir, write_csv, write_json, RunConfig};

#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub final_accuracy: f64,
    pub average_accuracy: f64,
    pub forgetting: f64,
    pub learning_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CilRunReport {
    pub norm: NormKind,
    pub per_seed: Vec<SeedMetrics>,
    pub taxonomy_per_seed: Vec<MisclassCounts>,
    pub mean_final_accuracy: f64,
    pub mean_average_accuracy: f64,
    pub mean_forgetting: f64,
    pub mean_learning_accuracy: f64,
}

pub(crate) fn run_seeds(cfg: &RunConfig, train: &TrainConfig) -> Result<CilRunReport> {
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut taxonomy_per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let stream = train.build_stream(seed);
        let result = run_cil(&stream, train, seed)?;
        per_seed.push(SeedMetrics {
            seed,
            final_accuracy: final_accuracy(&result.matrix),
            average_accuracy: average_accuracy(&result.matrix),
            forgetting: forgetting(&result.matrix),
            learning_accuracy: learning_accuracy(&result.matrix),
        });
        taxonomy_per_seed.push(result.taxonomy);

        let matrix_lines: Vec<String> = result
            .matrix
            .to_csv()
            .lines()
            .map(|l| l.to_string())
            .collect();
        write_csv(
            &cfg.out_dir.join(format!("matrix_s{seed}.csv")),
            "# one row per task: accuracies on tasks seen so far",
            &matrix_lines,
        )?;
    }

    Ok(CilRunReport {
        norm: train.norm,
        mean_final_accuracy: mean_of(&per_seed.iter().map(|s| s.final_accuracy).collect::<Vec<_>>()),
        mean_average_accuracy: mean_of(
            &per_seed.iter().map(|s| s.average_accuracy).collect::<Vec<_>>(),
        ),
        mean_forgetting: mean_of(&per_seed.iter().map(|s| s.forgetting).collect::<Vec<_>>()),
        mean_learning_accuracy: mean_of(
            &per_seed.iter().map(|s| s.learning_accuracy).collect::<Vec<_>>(),
        ),
        per_seed,
        taxonomy_per_seed,
    })
}

pub fn exp_cil_run(cfg: &RunConfig) -> Result<CilRunReport> {
    prepare_out_dir(cfg)?;
    let report = run_seeds(cfg, &cfg.train)?;
    write_json(&cfg.out_dir.join("metrics.json"), &report)?;
    write_json(&cfg.out_dir.join("taxonomy.json"), &report.taxonomy_per_seed)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rerun_is_byte_identical_apart_from_timestamps() {
        let base = std::env::temp_dir().join(format!("tbnorm-cilrun-{}", std::process::id()));
        let train = TrainConfig {
            tasks: 2,
            epochs_per_task: 2,
            samples_per_class: 30,
            ..TrainConfig::default()
        };
        let cfg_a = RunConfig::new("cil-run", train.clone(), base.join("a"), vec![9]);
        let cfg_b = RunConfig::new("cil-run", train, base.join("b"), vec![9]);
        exp_cil_run(&cfg_a).unwrap();
        exp_cil_run(&cfg_b).unwrap();

        for name in ["matrix_s9.csv"] {
            let a = std::fs::read_to_string(cfg_a.out_dir.join(name)).unwrap();
            let b = std::fs::read_to_string(cfg_b.out_dir.join(name)).unwrap();
            let strip = |s: &str| -> String {
                s.lines().filter(|l| !l.starts_with("# written")).collect::<Vec<_>>().join("\n")
            };
            assert_eq!(strip(&a), strip(&b));
        }
        // JSON outputs carry no timestamp at all.
        let a = std::fs::read_to_string(cfg_a.out_dir.join("metrics.json")).unwrap();
        let b = std::fs::read_to_string(cfg_b.out_dir.join("metrics.json")).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&base).ok();
    }

    #[test]
    fn emitted_matrix_parses_back() {
        use crate::metrics::AccuracyMatrix;
        let base = std::env::temp_dir().join(format!("tbnorm-cilparse-{}", std::process::id()));
        let train = TrainConfig {
            tasks: 2,
            epochs_per_task: 2,
            samples_per_class: 30,
            ..TrainConfig::default()
        };
        let cfg = RunConfig::new("cil-run", train, &base, vec![3]);
        exp_cil_run(&cfg).unwrap();
        let text = std::fs::read_to_string(base.join("matrix_s3.csv")).unwrap();
        let matrix = AccuracyMatrix::from_csv(&text).unwrap();
        assert_eq!(matrix.tasks(), 2);
        std::fs::remove_dir_all(&base).ok();
    }
}
