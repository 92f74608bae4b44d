//! On-disk datasets: PGM triplets plus a JSON manifest.
//!
//! Layout:
//!
//! ```text
//! DIR/manifest.json
//! DIR/train/000000_noisy.pgm  000000_clean.pgm  000000_binary.pgm
//! DIR/val/...
//! DIR/test/...
//! ```
//!
//! Sample `i` of split `s` uses seed `seed::derive(base_seed, s, i)`; clean and
//! noise streams are derived from that per-sample seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::GrayImage;
use crate::pgm;
use crate::seed;
use crate::synth::clean::{generate_clean, RidgeParams};
use crate::synth::wet::{synthesize_wet, NoiseParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Aligned noisy / clean / binary images of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriplet {
    pub noisy: GrayImage,
    pub clean: GrayImage,
    pub binary: GrayImage,
    pub seed: u64,
    pub params: NoiseParams,
}

/// Generates one triplet at full precision (before 8-bit quantization).
pub fn generate_triplet(
    sample_seed: u64,
    height: usize,
    width: usize,
    ridge: &RidgeParams,
    noise: &NoiseParams,
) -> Result<SampleTriplet> {
    let (clean, binary) =
        generate_clean(seed::derive(sample_seed, "clean", 0), height, width, ridge)?;
    let noisy = synthesize_wet(
        &clean,
        &binary,
        noise,
        seed::derive(sample_seed, "noise", 0),
    )?;
    Ok(SampleTriplet {
        noisy,
        clean,
        binary,
        seed: sample_seed,
        params: noise.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub noisy: String,
    pub clean: String,
    pub binary: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub base_seed: u64,
    pub height: usize,
    pub width: usize,
    pub params: NoiseParams,
    pub ridge: RidgeParams,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[ManifestEntry]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("manifest has no split {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// What to synthesize.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub base_seed: u64,
    pub noise: NoiseParams,
    pub ridge: RidgeParams,
}

impl DatasetSpec {
    pub fn new(n_train: usize, n_val: usize, n_test: usize, base_seed: u64) -> Self {
        DatasetSpec {
            n_train,
            n_val,
            n_test,
            height: 36,
            width: 176,
            base_seed,
            noise: NoiseParams::default(),
            ridge: RidgeParams::default(),
        }
    }

    fn counts(&self) -> [(&'static str, usize); 3] {
        [
            (SPLITS[0], self.n_train),
            (SPLITS[1], self.n_val),
            (SPLITS[2], self.n_test),
        ]
    }
}

fn write_triplet(
    dir: &Path,
    split: &str,
    index: usize,
    t: &SampleTriplet,
) -> Result<ManifestEntry> {
    let names = [
        format!("{split}/{index:06}_noisy.pgm"),
        format!("{split}/{index:06}_clean.pgm"),
        format!("{split}/{index:06}_binary.pgm"),
    ];
    pgm::write(dir.join(&names[0]), &t.noisy)?;
    pgm::write(dir.join(&names[1]), &t.clean)?;
    pgm::write(dir.join(&names[2]), &t.binary)?;
    let [noisy, clean, binary] = names;
    Ok(ManifestEntry {
        noisy,
        clean,
        binary,
        seed: t.seed,
    })
}

/// Synthesizes every split into `dir` and writes the manifest.
///
/// Refuses a non-empty `dir` unless `force` is set.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec, force: bool) -> Result<Manifest> {
    let dir = dir.as_ref();
    spec.noise.validate()?;
    spec.ridge.validate()?;
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty (use force to overwrite)",
                dir.display()
            )));
        }
    }
    let mut splits = BTreeMap::new();
    for (split, n) in spec.counts() {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let s = seed::derive(spec.base_seed, split, i as u64);
            let t = generate_triplet(s, spec.height, spec.width, &spec.ridge, &spec.noise)?;
            entries.push(write_triplet(dir, split, i, &t)?);
        }
        splits.insert(split.to_string(), entries);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        base_seed: spec.base_seed,
        height: spec.height,
        width: spec.width,
        params: spec.noise.clone(),
        ridge: spec.ridge,
        splits,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Rewrites every file listed in a manifest from the seeds it records.
pub fn regenerate(manifest: &Manifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (split, entries) in &manifest.splits {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, e) in entries.iter().enumerate() {
            let t = generate_triplet(
                e.seed,
                manifest.height,
                manifest.width,
                &manifest.ridge,
                &manifest.params,
            )?;
            let written = write_triplet(dir, split, i, &t)?;
            if written != *e {
                return Err(Error::Format(format!(
                    "manifest entry {split}/{i} does not match layout"
                )));
            }
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))
}

/// A dataset opened from its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Opens `path`, which may be the manifest file or its directory.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        Ok(Dataset {
            manifest: Manifest::read(&file)?,
            root,
        })
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<SampleTriplet> {
        let noisy = pgm::read(self.root.join(&e.noisy))?;
        let clean = pgm::read(self.root.join(&e.clean))?;
        let binary = pgm::read(self.root.join(&e.binary))?;
        if !noisy.same_dims(&clean) || !noisy.same_dims(&binary) {
            return Err(Error::Format(format!(
                "triplet {} has mismatched dims",
                e.noisy
            )));
        }
        Ok(SampleTriplet {
            noisy,
            clean,
            binary,
            seed: e.seed,
            params: self.manifest.params.clone(),
        })
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<SampleTriplet>> {
        self.manifest
            .split(split)?
            .iter()
            .map(|e| self.load_entry(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_disjoint_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &DatasetSpec::new(8, 2, 2, 42), false).unwrap();
        assert_eq!(m.len(), 12);
        let mut seeds: Vec<u64> = m.splits.values().flatten().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 12);
        let ds = Dataset::open(dir.path()).unwrap();
        let train = ds.load_split("train").unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(train[0].noisy.width(), 176);
    }

    #[test]
    fn refuses_non_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk"), b"x").unwrap();
        assert!(write_dataset(dir.path(), &DatasetSpec::new(1, 0, 0, 1), false).is_err());
        assert!(write_dataset(dir.path(), &DatasetSpec::new(1, 0, 0, 1), true).is_ok());
    }
}
