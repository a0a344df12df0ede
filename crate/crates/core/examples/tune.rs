// Scratch harness for sizing the toy acceptance run. Not part of the build.

use std::time::Instant;

use distillforge_core::augment::AugmentationSpec;
use distillforge_core::data::{compute_stats, normalize, split_train_test, synth_gaussians};
use distillforge_core::distill::{
    run, ConvNetStudent, DistillConfig, InitMode, InnerBatchPolicy, TeacherBank,
};
use distillforge_core::eval::{audit, baseline_random_real, eval_student, pairwise_percentile};
use distillforge_core::model::ModelConfig;
use distillforge_core::trajectory::{train_teacher, OptimizerDescriptor};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let img_lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50.0);
    let outer: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let inner_j: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);
    let window_k: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2);
    let depth: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2);
    let width: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(16);
    let teacher_lr: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let alpha_lr: f64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(1e-5);

    let t0 = Instant::now();
    let raw = synth_gaussians::<f32>(4, 1000, (1, 16, 16), sep, 1234).unwrap();
    let (train_raw, test_raw) = split_train_test(&raw, 0.5, 99).unwrap();
    let stats = compute_stats(&train_raw).unwrap();
    let train = normalize(&train_raw, &stats).unwrap();
    let test = normalize(&test_raw, &stats).unwrap();
    println!("data: {:?} train={} test={}", t0.elapsed(), train.len(), test.len());

    let cfg = ModelConfig {
        depth,
        width,
        in_channels: 1,
        height: 16,
        width_px: 16,
        class_count: 4,
    };
    println!("model params: {}", cfg.param_count());

    let t1 = Instant::now();
    let tmom: f64 = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let hyper = OptimizerDescriptor::sgd(teacher_lr, tmom, 64);
    let cache = std::path::PathBuf::from(format!(
        "/tmp/tune_store_{sep}_{teacher_lr}_{depth}_{width}_{tmom}"
    ));
    let teachers: Vec<_> = if cache.exists() {
        let store = distillforge_core::trajectory::TrajectoryStore::open(&cache).unwrap();
        (0..store.count()).map(|i| store.load(i).unwrap()).collect()
    } else {
        let ts: Vec<_> = (0..8)
            .map(|s| train_teacher(&train, &cfg, 20, &hyper, s, None).unwrap())
            .collect();
        distillforge_core::trajectory::TrajectoryStore::record(&cache, &ts, Some(stats.clone()))
            .unwrap();
        ts
    };
    println!("teachers: {:?}", t1.elapsed());
    // teacher quality
    let acc_first = distillforge_core::eval::accuracy(&cfg, teachers[0].snapshots.last().unwrap(), &test).unwrap();
    let train_acc = distillforge_core::eval::accuracy(&cfg, teachers[0].snapshots.last().unwrap(), &train).unwrap();
    println!("teacher0 final: train acc {train_acc:.3} test acc {acc_first:.3}");

    let mut bank_stats = teachers.clone();
    for t in bank_stats.iter_mut() {
        t.norm_stats = Some(stats.clone());
    }
    let bank = TeacherBank::new(bank_stats).unwrap();
    let student = ConvNetStudent { config: cfg.clone() };

    let seeds: Vec<u64> = (0..5).collect();
    let aug = AugmentationSpec::default_distill();

    let ipc_list: Vec<usize> = if args.get(11).map(|s| s == "1").unwrap_or(false) {
        vec![1]
    } else {
        vec![1, 5]
    };
    for ipc in ipc_list {
        let t2 = Instant::now();
        let dcfg = DistillConfig {
            inner_steps: inner_j,
            teacher_window: window_k,
            max_start_step: args.get(10).and_then(|s| s.parse().ok()).unwrap_or(3),
            outer_steps: outer,
            ipc,
            init_mode: InitMode::Noise,
            image_lr: img_lr,
            alpha_lr,
            momentum: 0.5,
            inner_batch: InnerBatchPolicy::Full,
            eval_every: 0,
            seed: 7,
            augmentation: aug.clone(),
        };
        let out = run(&bank, &train, &dcfg, &student, None).unwrap();
        let n = out.log.len();
        let head = &out.log[..n / 10];
        let tail = &out.log[n - n / 10..];
        let head_mean: f64 = head.iter().map(|r| r.loss).sum::<f64>() / head.len() as f64;
        let tail_mean: f64 = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        println!(
            "ipc={ipc} distill: {:?} loss head {head_mean:.4} tail {tail_mean:.4} ratio {:.3} alpha {:.5}",
            t2.elapsed(),
            tail_mean / head_mean,
            out.final_state.alpha(),
        );

        let t3 = Instant::now();
        let report = eval_student(&out.final_state, &test, &cfg, &seeds, 300, Some(&aug), 4).unwrap();
        println!(
            "ipc={ipc} distilled acc: {:.4} +- {:.4} ({:?})",
            report.mean,
            report.std,
            t3.elapsed()
        );
        if ipc == 1 {
            let t4 = Instant::now();
            let base = baseline_random_real(&train, &test, &cfg, 1, &seeds, 300, Some(&aug), 4).unwrap();
            println!(
                "ipc=1 baseline acc: {:.4} +- {:.4} ({:?}) gap {:.1}pp",
                base.mean,
                base.std,
                t4.elapsed(),
                (report.mean - base.mean) * 100.0
            );
            let t5 = Instant::now();
            let auditr = audit(&out.final_state, &train_raw).unwrap();
            let p01 = pairwise_percentile(&train_raw, 0.01).unwrap();
            println!(
                "audit: min {:.4} p01(real-real) {:.4} ok={} ({:?})",
                auditr.min_distance,
                p01,
                auditr.min_distance > p01,
                t5.elapsed()
            );
        }
    }
    println!("total: {:?}", t0.elapsed());
}
