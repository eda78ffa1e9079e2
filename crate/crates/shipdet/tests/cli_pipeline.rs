//! End-to-end CLI behavior: exit codes, file formats, determinism.

mod common;

use common::{run_cli, write_dota_dataset, Scratch};
use shipdet_core::codec::Task;
use shipdet_core::labeling::build_instruction;
use shipdet_core::testkit::fnv1a;

fn hash_file(path: &std::path::Path) -> u64 {
    fnv1a(&std::fs::read(path).expect("readable output"))
}

#[test]
fn convert_emits_records_and_is_deterministic() {
    let scratch = Scratch::new("convert");
    write_dota_dataset(&scratch.dir, 4, 11);
    let images = scratch.path("images");
    let annotations = scratch.path("annotations");

    // two runs with identical arguments must produce identical bytes,
    // config snapshot included
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let (code, stdout, _) = run_cli(&[
            "convert",
            "--format",
            "dota",
            "--task",
            "hbb",
            "--images",
            images.to_str().unwrap(),
            "--annotations",
            annotations.to_str().unwrap(),
            "--out",
            scratch.path("a.jsonl").to_str().unwrap(),
            "--seed",
            "0",
        ]);
        assert_eq!(code, 0, "stdout: {stdout}");
        assert!(stdout.contains("records emitted:  4"));
        hashes.push((
            hash_file(&scratch.path("a.jsonl")),
            hash_file(&scratch.path("a.jsonl.config.json")),
        ));
    }
    assert_eq!(hashes[0], hashes[1]);

    let records = shipdet::convert::load_records(&scratch.path("a.jsonl")).unwrap();
    assert_eq!(records.len(), 4);
    // lexicographic by image id
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn convert_empty_dir_is_fatal() {
    let scratch = Scratch::new("convert-empty");
    std::fs::create_dir_all(scratch.path("images")).unwrap();
    std::fs::create_dir_all(scratch.path("annotations")).unwrap();
    let (code, _, stderr) = run_cli(&[
        "convert",
        "--format",
        "dota",
        "--task",
        "hbb",
        "--images",
        scratch.path("images").to_str().unwrap(),
        "--annotations",
        scratch.path("annotations").to_str().unwrap(),
        "--out",
        scratch.path("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("no .txt annotation files"), "stderr: {stderr}");
}

#[test]
fn convert_reports_partial_completion() {
    let scratch = Scratch::new("convert-partial");
    write_dota_dataset(&scratch.dir, 2, 3);
    // add a malformed line to one annotation
    let ann = scratch.path("annotations/scene_000.txt");
    let mut text = std::fs::read_to_string(&ann).unwrap();
    text.push_str("1 2 3 ship\n");
    std::fs::write(&ann, text).unwrap();

    let (code, stdout, _) = run_cli(&[
        "convert",
        "--format",
        "dota",
        "--task",
        "hbb",
        "--images",
        scratch.path("images").to_str().unwrap(),
        "--annotations",
        scratch.path("annotations").to_str().unwrap(),
        "--out",
        scratch.path("out.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stdout: {stdout}");
    assert!(stdout.contains("malformed_line: 1"));
}

#[test]
fn scripted_inference_produces_exact_boxes() {
    let scratch = Scratch::new("infer");
    write_dota_dataset(&scratch.dir, 2, 17);
    let instruction = build_instruction(Task::Hbb);
    let script = format!(
        "{}\n{}\n",
        serde_json::json!({
            "image_id": "scene_000",
            "instruction": instruction,
            "answer": "[0.100, 0.200, 0.500, 0.600]"
        }),
        serde_json::json!({
            "image_id": "scene_001",
            "instruction": instruction,
            "answer": "some prose the parser must survive"
        }),
    );
    std::fs::write(scratch.path("script.jsonl"), script).unwrap();

    let (code, stdout, _) = run_cli(&[
        "infer",
        "--scripted",
        scratch.path("script.jsonl").to_str().unwrap(),
        "--images",
        scratch.path("images").to_str().unwrap(),
        "--task",
        "hbb",
        "--scorer",
        "constant",
        "--out",
        scratch.path("preds.jsonl").to_str().unwrap(),
        "--seed",
        "0",
    ]);
    assert_eq!(code, 0);
    // unparseable generation yields zero boxes plus a warning count
    assert!(stdout.contains("parse warnings: 1"), "stdout: {stdout}");

    // output validates against the prediction schema
    let preds =
        shipdet::predio::load_predictions(&scratch.path("preds.jsonl"), Task::Hbb).unwrap();
    assert_eq!(preds.len(), 1);
    assert_eq!(preds[0].image_id, "scene_000");
    match &preds[0].bbox {
        shipdet_core::eval::GeomBox::Horizontal(b) => {
            assert_eq!(b.coords(), [0.1, 0.2, 0.5, 0.6]);
        }
        _ => unreachable!(),
    }
}

#[test]
fn eval_perfect_predictions_and_determinism() {
    let scratch = Scratch::new("eval");
    let gt = concat!(
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"boxes\": [[0.1, 0.1, 0.3, 0.3]]}\n",
        "{\"image_id\": \"b\", \"task\": \"hbb\", \"boxes\": [[0.5, 0.5, 0.8, 0.8]]}\n",
    );
    let preds = concat!(
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"box\": [0.1, 0.1, 0.3, 0.3], \"confidence\": 1.0}\n",
        "{\"image_id\": \"b\", \"task\": \"hbb\", \"box\": [0.5, 0.5, 0.8, 0.8], \"confidence\": 1.0}\n",
    );
    std::fs::write(scratch.path("gt.jsonl"), gt).unwrap();
    std::fs::write(scratch.path("preds.jsonl"), preds).unwrap();

    for out_name in ["r1.json", "r2.json"] {
        let (code, stdout, _) = run_cli(&[
            "eval",
            "--preds",
            scratch.path("preds.jsonl").to_str().unwrap(),
            "--gt",
            scratch.path("gt.jsonl").to_str().unwrap(),
            "--task",
            "hbb",
            "--out",
            scratch.path(out_name).to_str().unwrap(),
            "--seed",
            "0",
        ]);
        assert_eq!(code, 0);
        assert!(stdout.contains("100.00"), "stdout: {stdout}");
    }
    assert_eq!(hash_file(&scratch.path("r1.json")), hash_file(&scratch.path("r2.json")));

    let report = shipdet::report::read_report(&scratch.path("r1.json")).unwrap();
    assert_eq!(report.thresholds(), vec![0.4, 0.5, 0.6]);
    assert!(report.entries.iter().all(|e| e.ap == 1.0));
    assert_eq!(report.num_ground_truth, 2);
}

#[test]
fn eval_schema_errors_carry_line_numbers() {
    let scratch = Scratch::new("eval-bad");
    std::fs::write(
        scratch.path("gt.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"boxes\": [[0.1, 0.1, 0.3, 0.3]]}\n",
    )
    .unwrap();
    std::fs::write(
        scratch.path("preds.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"box\": [0.1, 0.1, 0.3], \"confidence\": 1.0}\n",
    )
    .unwrap();
    let (code, _, stderr) = run_cli(&[
        "eval",
        "--preds",
        scratch.path("preds.jsonl").to_str().unwrap(),
        "--gt",
        scratch.path("gt.jsonl").to_str().unwrap(),
        "--task",
        "hbb",
        "--out",
        scratch.path("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("preds.jsonl:1"), "stderr: {stderr}");
}

#[test]
fn segment_boxfill_masks_match_prompts() {
    let scratch = Scratch::new("segment");
    write_dota_dataset(&scratch.dir, 2, 23);
    let preds = concat!(
        "{\"image_id\": \"scene_000\", \"task\": \"hbb\", \"box\": [0.25, 0.25, 0.75, 0.5], \"confidence\": 0.9}\n",
        "{\"image_id\": \"scene_000\", \"task\": \"hbb\", \"box\": [0.1, 0.6, 0.4, 0.9], \"confidence\": 0.8}\n",
        "{\"image_id\": \"scene_001\", \"task\": \"hbb\", \"box\": [0.5, 0.5, 0.9, 0.9], \"confidence\": 0.7}\n",
    );
    std::fs::write(scratch.path("preds.jsonl"), preds).unwrap();

    let (code, stdout, _) = run_cli(&[
        "segment",
        "--preds",
        scratch.path("preds.jsonl").to_str().unwrap(),
        "--images",
        scratch.path("images").to_str().unwrap(),
        "--segmenter",
        "boxfill",
        "--out",
        scratch.path("masks").to_str().unwrap(),
        "--seed",
        "0",
    ]);
    assert_eq!(code, 0, "stdout: {stdout}");

    let manifest: Vec<shipdet::maskio::ManifestLine> =
        shipdet::jsonl::read_lines(&scratch.path("masks/manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 3, "one manifest line per box");
    for line in &manifest {
        let mask = shipdet::maskio::read_mask(&scratch.path("masks").join(&line.mask)).unwrap();
        let [x0, y0, x1, y1] = line.bbox;
        let expected = ((x1 - x0) * (y1 - y0)) as usize;
        assert_eq!(mask.count_ones(), expected, "box-fill mask fills its box");
    }
}

#[test]
fn segment_threshold_recovers_bright_rectangles() {
    let scratch = Scratch::new("segment-threshold");
    let truths = write_dota_dataset(&scratch.dir, 2, 29);

    // predictions = the exact normalized truth boxes
    let mut preds = String::new();
    for (id, [x0, y0, x1, y1]) in &truths {
        preds.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "image_id": id,
                "task": "hbb",
                "box": [x0 / 96.0, y0 / 96.0, x1 / 96.0, y1 / 96.0],
                "confidence": 0.9
            })
        ));
    }
    std::fs::write(scratch.path("preds.jsonl"), preds).unwrap();

    let (code, _, _) = run_cli(&[
        "segment",
        "--preds",
        scratch.path("preds.jsonl").to_str().unwrap(),
        "--images",
        scratch.path("images").to_str().unwrap(),
        "--segmenter",
        "threshold",
        "--out",
        scratch.path("masks").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);

    let manifest: Vec<shipdet::maskio::ManifestLine> =
        shipdet::jsonl::read_lines(&scratch.path("masks/manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), truths.len());
    for (line, (_, [x0, y0, x1, y1])) in manifest.iter().zip(&truths) {
        let mask = shipdet::maskio::read_mask(&scratch.path("masks").join(&line.mask)).unwrap();
        let mut truth = shipdet_core::seg::MaskImage::new(96, 96);
        for y in *y0 as u32..*y1 as u32 {
            for x in *x0 as u32..*x1 as u32 {
                truth.set(x, y, 1);
            }
        }
        let iou = shipdet_core::seg::mask_metrics(&mask, &truth).unwrap().iou;
        assert!(iou >= 0.95, "{}: threshold mask IoU {iou}", line.image_id);
    }
}

#[test]
fn report_merges_rows_sorted_and_csv_round_trips() {
    let scratch = Scratch::new("report");
    let mk_gt = |path: &std::path::Path| {
        std::fs::write(
            path,
            "{\"image_id\": \"a\", \"task\": \"hbb\", \"boxes\": [[0.1, 0.1, 0.3, 0.3], [0.5, 0.5, 0.7, 0.7]]}\n",
        )
        .unwrap();
    };
    mk_gt(&scratch.path("gt.jsonl"));
    // strong predictions
    std::fs::write(
        scratch.path("p_good.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"box\": [0.1, 0.1, 0.3, 0.3], \"confidence\": 0.9}\n",
    )
    .unwrap();
    // weak predictions: a confident false positive ahead of the hit
    std::fs::write(
        scratch.path("p_bad.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"box\": [0.8, 0.8, 0.9, 0.9], \"confidence\": 0.95}\n{\"image_id\": \"a\", \"task\": \"hbb\", \"box\": [0.1, 0.1, 0.3, 0.3], \"confidence\": 0.9}\n",
    )
    .unwrap();

    for (preds, out, method) in [
        ("p_good.jsonl", "good.json", "good"),
        ("p_bad.jsonl", "bad.json", "bad"),
    ] {
        let (code, _, _) = run_cli(&[
            "eval",
            "--preds",
            scratch.path(preds).to_str().unwrap(),
            "--gt",
            scratch.path("gt.jsonl").to_str().unwrap(),
            "--task",
            "hbb",
            "--out",
            scratch.path(out).to_str().unwrap(),
            "--method",
            method,
        ]);
        assert_eq!(code, 0);
    }

    let (code, stdout, _) = run_cli(&[
        "report",
        "--eval",
        scratch.path("bad.json").to_str().unwrap(),
        "--eval",
        scratch.path("good.json").to_str().unwrap(),
        "--format",
        "table",
    ]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two rows: {stdout}");
    assert!(lines[1].starts_with("good"), "best AP@50 first: {stdout}");

    let (code, csv, _) = run_cli(&[
        "report",
        "--eval",
        scratch.path("good.json").to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(code, 0);
    let (thresholds, rows) = shipdet_core::eval::parse_rows_csv(&csv).unwrap();
    assert_eq!(shipdet_core::eval::format_rows_csv(&thresholds, &rows), csv);

    // svg output
    let (code, _, _) = run_cli(&[
        "report",
        "--eval",
        scratch.path("good.json").to_str().unwrap(),
        "--format",
        "svg",
        "--out",
        scratch.path("pr.svg").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let svg = std::fs::read_to_string(scratch.path("pr.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn report_rejects_mixed_tasks() {
    let scratch = Scratch::new("report-mixed");
    std::fs::write(
        scratch.path("gt_h.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"boxes\": [[0.1, 0.1, 0.3, 0.3]]}\n",
    )
    .unwrap();
    std::fs::write(
        scratch.path("p_h.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"hbb\", \"box\": [0.1, 0.1, 0.3, 0.3], \"confidence\": 0.9}\n",
    )
    .unwrap();
    std::fs::write(
        scratch.path("gt_o.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"obb\", \"boxes\": [[0.1, 0.1, 0.3, 0.1, 0.3, 0.3, 0.1, 0.3]]}\n",
    )
    .unwrap();
    std::fs::write(
        scratch.path("p_o.jsonl"),
        "{\"image_id\": \"a\", \"task\": \"obb\", \"box\": [0.1, 0.1, 0.3, 0.1, 0.3, 0.3, 0.1, 0.3], \"confidence\": 0.9}\n",
    )
    .unwrap();
    for (p, g, o) in [("p_h.jsonl", "gt_h.jsonl", "h.json"), ("p_o.jsonl", "gt_o.jsonl", "o.json")] {
        let (code, _, _) = run_cli(&[
            "eval",
            "--preds",
            scratch.path(p).to_str().unwrap(),
            "--gt",
            scratch.path(g).to_str().unwrap(),
            "--task",
            if p.contains("_h") { "hbb" } else { "obb" },
            "--out",
            scratch.path(o).to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    let (code, _, stderr) = run_cli(&[
        "report",
        "--eval",
        scratch.path("h.json").to_str().unwrap(),
        "--eval",
        scratch.path("o.json").to_str().unwrap(),
        "--format",
        "table",
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("mix"), "stderr: {stderr}");
}

#[test]
fn seed_precedence_flag_over_env() {
    let scratch = Scratch::new("seed");
    write_dota_dataset(&scratch.dir, 1, 41);
    let base_args = |out: &str| {
        vec![
            "convert".to_string(),
            "--format".to_string(),
            "dota".to_string(),
            "--task".to_string(),
            "hbb".to_string(),
            "--images".to_string(),
            scratch.path("images").display().to_string(),
            "--annotations".to_string(),
            scratch.path("annotations").display().to_string(),
            "--out".to_string(),
            scratch.path(out).display().to_string(),
        ]
    };

    // env var alone
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_shipdet"))
        .args(base_args("env.jsonl"))
        .env("SHIPDET_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    let snap = std::fs::read_to_string(scratch.path("env.jsonl.config.json")).unwrap();
    assert!(snap.contains("\"seed\": 42"), "snapshot: {snap}");

    // flag beats env
    let mut args = base_args("flag.jsonl");
    args.push("--seed".to_string());
    args.push("7".to_string());
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_shipdet"))
        .args(args)
        .env("SHIPDET_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    let snap = std::fs::read_to_string(scratch.path("flag.jsonl.config.json")).unwrap();
    assert!(snap.contains("\"seed\": 7"), "snapshot: {snap}");
}

#[test]
fn version_is_machine_readable() {
    let (code, stdout, _) = run_cli(&["--version"]);
    assert_eq!(code, 0);
    let fields: Vec<&str> = stdout.trim().split(' ').collect();
    assert_eq!(fields.len(), 2);
    assert_eq!(fields[0], "shipdet");
    assert!(fields[1].split('.').count() == 3);
}

#[test]
fn conversion_stats_conserve_inputs() {
    let scratch = Scratch::new("conserve");
    write_dota_dataset(&scratch.dir, 3, 31);
    // remove one image so its annotation gets skipped
    std::fs::remove_file(scratch.path("images/scene_001.pgm")).unwrap();

    let opts = shipdet::convert::ConvertOptions {
        format: shipdet::convert::SourceFormat::Dota,
        task: Task::Hbb,
        images_dir: scratch.path("images"),
        annotations_dir: scratch.path("annotations"),
        out_path: scratch.path("out.jsonl"),
        source_dataset: String::from("unit"),
        modality: shipdet_core::labeling::Modality::Optical,
        keep_empty: true,
        strict: false,
        class_filter: shipdet_core::labeling::ClassFilter::default(),
    };
    let stats = shipdet::convert::convert_dataset(&opts).unwrap();
    assert_eq!(stats.records_emitted, 2);
    assert_eq!(stats.images_skipped, 1);
    // conservation: inputs = emitted + skipped
    assert_eq!(3, stats.records_emitted + stats.images_skipped);
}
