//! Shared fixtures for the integration and acceptance suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use shipdet_core::raster::{encode_pgm, render_rect_scene};
use shipdet_core::rng::Rng;

static COUNTER: AtomicU64 = AtomicU64::new(0);

/// A unique scratch directory, removed on drop.
pub struct Scratch {
    pub dir: PathBuf,
}

impl Scratch {
    pub fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!(
            "shipdet-test-{tag}-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&dir).expect("scratch dir");
        Scratch { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

/// Runs the CLI binary; returns (exit_code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_shipdet"))
        .args(args)
        .env_remove("SHIPDET_SEED")
        .output()
        .expect("running shipdet binary");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Writes a small synthetic DOTA-style dataset (images/ + annotations/) and
/// returns the scene truths in pixel coordinates.
pub fn write_dota_dataset(root: &Path, count: usize, seed: u64) -> Vec<(String, [f64; 4])> {
    let images = root.join("images");
    let annotations = root.join("annotations");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&annotations).unwrap();
    let mut rng = Rng::from_label(seed, "cli-fixture");
    let mut truths = Vec::new();
    for i in 0..count {
        let id = format!("scene_{i:03}");
        let scene = render_rect_scene(&mut rng, 96, 96, 20, 40);
        std::fs::write(images.join(format!("{id}.pgm")), encode_pgm(&scene.image)).unwrap();
        let (x0, y0, x1, y1) = (
            scene.truth.x_min(),
            scene.truth.y_min(),
            scene.truth.x_max(),
            scene.truth.y_max(),
        );
        let line = format!("{x0:.0} {y0:.0} {x1:.0} {y0:.0} {x1:.0} {y1:.0} {x0:.0} {y1:.0} ship 0\n");
        std::fs::write(annotations.join(format!("{id}.txt")), line).unwrap();
        truths.push((id, [x0, y0, x1, y1]));
    }
    truths
}
