use xmodal::encoders::OptimizerConfig;
use xmodal::losses::{LossKind, LossSpec};
use xmodal::similarity::SimilarityKernel;
use xmodal::synthdata::WorldConfig;
use xmodal::trainer::{compare_losses, run_experiment, EvalConfig, ExperimentConfig, TaskKind};

fn base(steps: usize, lr: f64, hidden: usize, channel: f64, gain: f64, batch: usize) -> ExperimentConfig {
    ExperimentConfig {
        steps, eval_every: 100000, batch_size: batch, hidden_dim: hidden,
        optimizer: OptimizerConfig { learning_rate: lr, ..OptimizerConfig::default() },
        world: WorldConfig { channel_sigma: channel, render_gain: gain, ..WorldConfig::default() },
        eval: EvalConfig { sv_pairs: 8000, clips_per_test_identity: 4, ..EvalConfig::default() },
        lambda_content: 0.5,
        ..ExperimentConfig::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("learn");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4e-3);
    let hidden: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let channel: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let gain: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let batch: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(40);
    let started = std::time::Instant::now();

    if mode == "learn" {
        for seed in [1u64, 2, 3] {
            let config = ExperimentConfig { seed, ..base(steps, lr, hidden, channel, gain, batch) };
            let out = run_experiment(&config).unwrap();
            let m = out.report.final_metrics;
            println!("learn seed {}  cbm {:.3} sv {:.3} r1 {:.3} probe {:.3}  ({:.0}s)",
                seed, m.cbm_eer, m.sv_eer, m.recall_at_1, m.probe_top1, out.report.wall_clock_seconds);
        }
    } else if mode == "cmp" {
        let b = base(steps, lr, hidden, channel, gain, batch);
        let mk = |kind: LossKind, kernel: SimilarityKernel| ExperimentConfig { loss: LossSpec::new(kind, kernel), ..b.clone() };
        let configs = vec![
            mk(LossKind::Mwm, SimilarityKernel::default_euclidean()),
            mk(LossKind::Mwm, SimilarityKernel::default_angular()),
            mk(LossKind::Cddl, SimilarityKernel::default_angular()),
        ];
        let report = compare_losses(&configs, &[1, 2, 3, 4, 5], 2).unwrap();
        let sv = |name: &str| -> Vec<f64> { report.rows.iter().filter(|r| r.name == name).map(|r| r.metrics.sv_eer).collect() };
        let mwm = sv("mwm-angular"); let cddl = sv("cddl-angular");
        for s in &report.summaries {
            println!("MEAN {:16} cbm {:.4} sv {:.4} vv {:.4} r1 {:.4} probe {:.4}",
                s.name, s.mean_cbm_eer, s.mean_sv_eer, s.mean_vv_eer, s.mean_recall_at_1, s.mean_probe_top1);
        }
        let wins = mwm.iter().zip(&cddl).filter(|(m, c)| m > c).count();
        println!("per-seed mwm sv {:?}", mwm);
        println!("per-seed cddl sv {:?}", cddl);
        println!("cddl beats mwm on {} of 5 seeds", wins);
    } else if mode == "sync" {
        let b = ExperimentConfig { task: TaskKind::Sync, ..base(steps, lr, hidden, channel, gain, batch) };
        let mk = |kind: LossKind| ExperimentConfig { loss: LossSpec::new(kind, SimilarityKernel::default_angular()), ..b.clone() };
        let configs = vec![mk(LossKind::Mwm), mk(LossKind::Cddl)];
        let report = compare_losses(&configs, &[1, 2, 3, 4, 5], 2).unwrap();
        for s in &report.summaries {
            println!("MEAN {:16} probe {:.4}/{:.4} r1 {:.4}", s.name, s.mean_probe_top1, s.mean_recall_at_k, s.mean_recall_at_1);
        }
        let probe = |name: &str| -> Vec<f64> { report.rows.iter().filter(|r| r.name == name).map(|r| r.metrics.probe_top1).collect() };
        println!("per-seed mwm probe {:?}", probe("mwm-angular"));
        println!("per-seed cddl probe {:?}", probe("cddl-angular"));
    }
    println!("mode {mode} steps {steps} lr {lr} hidden {hidden} ch {channel} gain {gain} batch {batch} wall {:.0}s", started.elapsed().as_secs_f64());
}
