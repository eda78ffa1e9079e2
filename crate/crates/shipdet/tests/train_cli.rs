//! train-toy CLI behavior: reproducibility, two-stage resume, checkpoint
//! round-trips. Uses a tiny model config so the whole file runs in seconds.

mod common;

use common::{run_cli, Scratch};
use shipdet_core::codec::Task;
use shipdet_core::fusion::synthetic_detection_samples;
use shipdet_core::raster::encode_pgm;
use shipdet_core::testkit::fnv1a;

const TINY_CONFIG: &str = r#"{
  "steps": 10,
  "batch_size": 4,
  "model": {
    "model_dim": 32, "heads": 4, "total_layers": 2, "lora_top_layers": 2,
    "lora_rank": 2, "lora_alpha": 4.0, "scales_a": 2, "scales_b": 2,
    "patch_size": 8, "enc_dim_a": 16, "enc_dim_b": 16, "mlp_hidden": 64,
    "max_answer_len": 48, "max_seq_len": 160, "seed": 9
  }
}"#;

fn write_training_data(scratch: &Scratch) -> std::path::PathBuf {
    let samples = synthetic_detection_samples(9, 6, 32, Task::Hbb);
    let mut records = String::new();
    for s in &samples {
        std::fs::write(scratch.path(&s.record.image), encode_pgm(&s.image)).unwrap();
        records.push_str(&serde_json::to_string(&s.record).unwrap());
        records.push('\n');
    }
    let data = scratch.path("records.jsonl");
    std::fs::write(&data, records).unwrap();
    std::fs::write(scratch.path("train.json"), TINY_CONFIG).unwrap();
    data
}

#[test]
fn two_stage_training_via_cli_is_reproducible() {
    let scratch = Scratch::new("train-cli");
    let data = write_training_data(&scratch);

    let train = |stage: &str, init: Option<&str>, out: &str| -> (i32, String) {
        let mut args = vec![
            "train-toy",
            "--data",
            data.to_str().unwrap(),
            "--stage",
            stage,
            "--config",
        ];
        let config = scratch.path("train.json");
        args.push(config.to_str().unwrap());
        let init_path;
        if let Some(i) = init {
            init_path = scratch.path(i);
            args.push("--init");
            args.push(init_path.to_str().unwrap());
        }
        let out_path = scratch.path(out);
        args.push("--out");
        args.push(out_path.to_str().unwrap());
        let (code, stdout, stderr) = run_cli(&args);
        assert_eq!(code, 0, "stdout: {stdout}\nstderr: {stderr}");
        (code, stdout)
    };

    train("alignment", None, "align.bin");
    train("alignment", None, "align2.bin");
    assert_eq!(
        fnv1a(&std::fs::read(scratch.path("align.bin")).unwrap()),
        fnv1a(&std::fs::read(scratch.path("align2.bin")).unwrap()),
        "fixed-seed alignment runs must produce identical checkpoints"
    );

    // ship stage on the alignment checkpoint
    train("ship", Some("align.bin"), "ship.bin");

    let align = shipdet::checkpoint::read_checkpoint(&scratch.path("align.bin")).unwrap();
    let ship = shipdet::checkpoint::read_checkpoint(&scratch.path("ship.bin")).unwrap();
    assert!(!align.bias_scale_active());
    assert!(ship.bias_scale_active(), "ship stage activates bias/scale");

    // alignment left deltas untouched; ship trained them
    let deltas = |m: &shipdet_core::fusion::ToyModel| -> Vec<f64> {
        m.named_tensors()
            .into_iter()
            .filter(|(n, _)| n.ends_with(".delta_bias") || n.ends_with(".delta_scale"))
            .flat_map(|(_, mat)| mat.data().to_vec())
            .collect()
    };
    let fresh = shipdet_core::fusion::ToyModel::new(align.config.clone()).unwrap();
    assert_eq!(deltas(&fresh), deltas(&align));
    assert_ne!(deltas(&align), deltas(&ship));

    // loss curve exists with one line per step plus header
    let curve = std::fs::read_to_string(scratch.path("align.bin.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 11);
    assert!(curve.starts_with("step,loss\n"));

    // the ship checkpoint drives inference
    let images_dir = scratch.path("imgdir");
    std::fs::create_dir_all(&images_dir).unwrap();
    let samples = synthetic_detection_samples(9, 2, 32, Task::Hbb);
    for s in &samples {
        std::fs::write(images_dir.join(&s.record.image), encode_pgm(&s.image)).unwrap();
    }
    let (code, stdout, stderr) = run_cli(&[
        "infer",
        "--model",
        scratch.path("ship.bin").to_str().unwrap(),
        "--images",
        images_dir.to_str().unwrap(),
        "--task",
        "hbb",
        "--out",
        scratch.path("preds.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stdout: {stdout}\nstderr: {stderr}");
    assert!(stdout.contains("images:         2"));
}

#[test]
fn divergent_config_fails_cleanly() {
    let scratch = Scratch::new("train-diverge");
    let data = write_training_data(&scratch);
    // an absurd learning rate reliably overflows into NaN
    let config = TINY_CONFIG.replace("\"steps\": 10", "\"steps\": 60, \"learning_rate\": 1e6");
    std::fs::write(scratch.path("bad.json"), config).unwrap();
    let (code, _, stderr) = run_cli(&[
        "train-toy",
        "--data",
        data.to_str().unwrap(),
        "--stage",
        "ship",
        "--config",
        scratch.path("bad.json").to_str().unwrap(),
        "--out",
        scratch.path("ckpt.bin").to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "stderr: {stderr}");
    assert!(stderr.contains("diverged"), "stderr: {stderr}");
}
