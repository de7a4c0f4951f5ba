#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// Runs the CLI in-process and captures both streams.
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = ccblock::cli::run_with(
        std::iter::once("ccblock").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Writes `n` small grayscale PNGs per class under `root/<class>/` and
/// returns the paths. Images differ per class and per index.
pub fn write_png_tree(root: &Path, classes: &[(&str, usize)]) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    for (ci, &(class, n)) in classes.iter().enumerate() {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            let img = image::GrayImage::from_fn(40, 32, |x, y| {
                let v = (x * (ci as u32 + 1) * 7 + y * 3 + i as u32 * 29) % 256;
                image::Luma([v as u8])
            });
            let path = dir.join(format!("img{i}.png"));
            img.save(&path).unwrap();
            paths.push(path);
        }
    }
    paths
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
