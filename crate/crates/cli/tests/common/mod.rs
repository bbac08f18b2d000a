#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use covidnn::SeededRng;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_covidnn"));
    c.env_remove("COVIDNN_THREADS");
    c
}

pub fn covidnn(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn covidnn")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Grayscale image with a disc: bright for class 1, dim for class 0, on a
/// slightly noisy dark background with the disc centre jittered.
pub fn blob_image(label: u8, side: u32, rng: &mut SeededRng) -> image::GrayImage {
    let r = side as f64 / 4.0;
    let jitter = side as f64 / 12.0;
    let cy = side as f64 / 2.0 + rng.uniform(-jitter, jitter);
    let cx = side as f64 / 2.0 + rng.uniform(-jitter, jitter);
    let disc = if label == 1 { 220.0 } else { 90.0 };
    image::GrayImage::from_fn(side, side, |x, y| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        let v = if d2 < r * r {
            disc
        } else {
            40.0 + rng.uniform(-6.0, 6.0)
        };
        image::Luma([v as u8])
    })
}

pub const MANIFEST_HEADER: &str = "path,label,split,source,crop_x,crop_y,crop_w,crop_h\n";

/// Writes `2 * per_class` PNGs (labels alternating 0, 1) under `dir/sub` and
/// returns their manifest rows, all assigned to `split`.
pub fn blob_rows(
    dir: &Path,
    sub: &str,
    per_class: usize,
    side: u32,
    seed: u64,
    split: &str,
) -> String {
    fs::create_dir_all(dir.join(sub)).unwrap();
    let mut rng = SeededRng::new(seed);
    let mut rows = String::new();
    for i in 0..2 * per_class {
        let label = (i % 2) as u8;
        let name = format!("{sub}/{i:03}.png");
        blob_image(label, side, &mut rng)
            .save(dir.join(&name))
            .unwrap();
        rows.push_str(&format!("{name},{label},{split},synthetic,,,,\n"));
    }
    rows
}

/// Single-split blob manifest at `dir/manifest.csv`.
pub fn blob_dataset(dir: &Path, per_class: usize, side: u32, seed: u64, split: &str) -> PathBuf {
    let rows = blob_rows(dir, "img", per_class, side, seed, split);
    let path = dir.join("manifest.csv");
    fs::write(&path, format!("{MANIFEST_HEADER}{rows}")).unwrap();
    path
}

pub fn write_config(path: &Path, json: &str) {
    fs::write(path, json).unwrap();
}
