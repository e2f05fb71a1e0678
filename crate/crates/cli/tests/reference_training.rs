use std::path::Path;

use fakd_cli::load_config;
use fakd_core::config::StudentVariant;
use fakd_core::data::TaskSpec;
use fakd_core::harness::{train_student, train_teacher, variant_setup, TaskData};

/// On the shipped reference task the combined distillation objective falls
/// over the first 500 steps, averaged over the configured seeds.
#[test]
fn combined_loss_decreases_on_the_reference_task() {
    let cfg = load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml"))
        .unwrap_or_else(|e| panic!("{}", e.message));
    let window = 50;
    for variant in [StudentVariant::AugPd, StudentVariant::AugCwd] {
        let (mut early, mut late) = (0.0, 0.0);
        for &seed in &cfg.seeds {
            let spec = TaskSpec { seed, ..cfg.task.clone() };
            let data = TaskData::generate_with_teacher_set(
                &spec,
                cfg.data.train_images,
                cfg.data.teacher_images(),
                cfg.data.val_images,
            )
            .unwrap();
            let teacher = train_teacher(&data, &cfg.teacher, seed).unwrap();
            let run = train_student(&data, &teacher.net, &cfg, &variant_setup(&cfg, variant), seed).unwrap();
            let mean = |steps: std::ops::Range<usize>| {
                run.losses[steps.clone()].iter().map(|l| l.total).sum::<f64>() / steps.len() as f64
            };
            early += mean(0..window);
            late += mean(500 - window..500);
        }
        assert!(late < early, "{variant}: first {window} steps {early}, steps 450..500 {late} (seed sums)");
    }
}
