use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// An ordered list of `(rgb, depth)` file pairs belonging to one split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub split: Split,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `rgb<TAB>depth` lines after a `#` header recording split and
    /// seed. Paths under the manifest's directory are stored relative to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String {
            p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
        };
        let mut text = format!("# split={} seed={}\n", self.split, self.seed);
        for (rgb, depth) in &self.pairs {
            text.push_str(&format!("{}\t{}\n", rel(rgb), rel(depth)));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest; relative paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let bad = |line: usize, msg: &str| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: {msg}"),
        };
        let mut split = Split::Train;
        let mut seed = 0;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("split", "test")) => split = Split::Test,
                        Some(("split", "train")) => split = Split::Train,
                        Some(("seed", v)) => seed = v.parse().map_err(|_| bad(i + 1, "bad seed"))?,
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (rgb, depth) = line
                .split_once('\t')
                .ok_or_else(|| bad(i + 1, "expected `rgb_path<TAB>depth_path`"))?;
            pairs.push((base.join(rgb), base.join(depth)));
        }
        Ok(Self { pairs, split, seed })
    }
}

/// Seeded shuffle of `pairs`, then the first `round(n · ratio)` go to train.
pub fn make_manifest_from_pairs(
    mut pairs: Vec<(PathBuf, PathBuf)>,
    split_ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::config(format!("split ratio {split_ratio} must lie in (0, 1)")));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    pairs.sort();
    pairs.dedup();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (pairs.len() as f64 * split_ratio).round() as usize;
    let test = pairs.split_off(n_train);
    Ok((
        DatasetManifest { pairs, split: Split::Train, seed },
        DatasetManifest { pairs: test, split: Split::Test, seed },
    ))
}

/// Pairs `root/rgb/<stem>.png` with `root/depth/<stem>.{pfm,png}` and splits
/// them.
pub fn make_manifest(root: &Path, split_ratio: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let rgb_dir = root.join("rgb");
    let depth_dir = root.join("depth");
    let entries = std::fs::read_dir(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    let mut pairs = Vec::new();
    for entry in entries {
        let rgb = entry.map_err(|e| Error::io(&rgb_dir, e))?.path();
        if rgb.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = rgb.file_stem().unwrap_or_default().to_owned();
        let depth = ["pfm", "png"]
            .iter()
            .map(|ext| depth_dir.join(&stem).with_extension(ext))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Format {
                path: rgb.clone(),
                message: "no matching depth map".into(),
            })?;
        pairs.push((rgb, depth));
    }
    make_manifest_from_pairs(pairs, split_ratio, seed)
}
