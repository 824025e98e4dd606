use tbnorm::cil::TrainConfig;
use tbnorm::experiments::*;

fn main() {
    let base = std::env::temp_dir().join("tbnorm-pilot12");
    for (tag, seeds) in [
        ("flat-d12-s123", vec![1u64, 2, 3]),
        ("flat-d12-s456", vec![4u64, 5, 6]),
        ("flat-d12-s789", vec![7u64, 8, 9]),
    ] {
        let train = TrainConfig {
            tasks: 10,
            blocks: 12,
            ..TrainConfig::default()
        };
        let cfg = RunConfig::new("pilot-abl", train, base.join(tag), seeds);
        let t0 = std::time::Instant::now();
        let rep = exp_ablation(&cfg).unwrap();
        print!("{tag:13} [{:>5.1}s] |", t0.elapsed().as_secs_f64());
        for row in &rep.rows {
            print!(" {} {:.3}", row.name, row.mean_final_accuracy);
        }
        let case2 = rep.row("case2");
        println!("  c2/seed {:?}", case2.per_seed_final.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
    std::fs::remove_dir_all(&base).ok();
}
