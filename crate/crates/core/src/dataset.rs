//! On-disk procedural dataset: catalog, per-split scene JSON, occupancy
//! caches and a manifest with seed ranges and file digests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenes::{gen_split, Catalog, SceneRules, SceneSpec, Split, Splits};
use crate::voxel::OccupancyGrid;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub split: Split,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub resolution: usize,
    pub splits: Splits,
    /// Half-open seed range per split.
    pub seed_ranges: BTreeMap<String, (u64, u64)>,
    pub scenes: BTreeMap<String, Vec<String>>,
    pub failures: Vec<Failure>,
    /// Relative path to SHA-256 of every written file.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

fn put(root: &Path, rel: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, bytes)?;
    files.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn check_writable_root(root: &Path) -> Result<()> {
    if root.exists() && !root.is_dir() {
        return Err(Error::Data(format!("{} exists and is not a directory", root.display())));
    }
    let manifest = root.join(MANIFEST);
    if manifest.exists() {
        let text = fs::read(&manifest)?;
        serde_json::from_slice::<Manifest>(&text).map_err(|e| {
            Error::Data(format!("corrupt dataset at {}: manifest unreadable ({e})", root.display()))
        })?;
    }
    Ok(())
}

/// Generates every split under `root` using `jobs` worker threads.
pub fn write_dataset(
    root: &Path,
    rules: &SceneRules,
    splits: &Splits,
    catalog: &Catalog,
    jobs: usize,
) -> Result<Manifest> {
    check_writable_root(root)?;
    fs::create_dir_all(root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut files = BTreeMap::new();
    put(root, "catalog.json", &serde_json::to_vec_pretty(catalog)?, &mut files)?;
    let mut seed_ranges = BTreeMap::new();
    let mut scenes = BTreeMap::new();
    let mut failures = Vec::new();
    for split in Split::ALL {
        let seeds = split.seeds(splits);
        seed_ranges.insert(split.name().to_string(), (seeds.start, seeds.end));
        let results = pool.install(|| gen_split(split, splits, rules, catalog));
        let mut ids = Vec::new();
        for (seed, result) in results {
            match result {
                Ok(spec) => {
                    let rel = format!("scenes/{}/{}.json", split.name(), spec.scene_id);
                    put(root, &rel, &serde_json::to_vec_pretty(&spec)?, &mut files)?;
                    let mut occ = Vec::new();
                    spec.occupancy(catalog)?.write_rle(&mut occ)?;
                    let rel = format!("occupancy/{}/{}.occ", split.name(), spec.scene_id);
                    put(root, &rel, &occ, &mut files)?;
                    ids.push(spec.scene_id);
                }
                Err(e) => {
                    log::warn!("{} seed {seed}: {e}", split.name());
                    failures.push(Failure {
                        split,
                        seed,
                        error: e.to_string(),
                    });
                }
            }
        }
        scenes.insert(split.name().to_string(), ids);
    }
    let manifest = Manifest {
        version: 1,
        resolution: rules.resolution,
        splits: *splits,
        seed_ranges,
        scenes,
        failures,
        files,
    };
    fs::write(root.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub catalog: Catalog,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let corrupt = |what: String| Error::Data(format!("corrupt dataset at {}: {what}", root.display()));
        let bytes = fs::read(root.join(MANIFEST))
            .map_err(|e| Error::Data(format!("no dataset at {}: {e}", root.display())))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("manifest ({e})")))?;
        let catalog_bytes = fs::read(root.join("catalog.json")).map_err(|e| corrupt(format!("catalog ({e})")))?;
        let catalog: Catalog =
            serde_json::from_slice(&catalog_bytes).map_err(|e| corrupt(format!("catalog ({e})")))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            catalog,
        })
    }

    fn read_checked(&self, rel: &str) -> Result<Vec<u8>> {
        let bytes = fs::read(self.root.join(rel))
            .map_err(|e| Error::Data(format!("{}: {e}", self.root.join(rel).display())))?;
        match self.manifest.files.get(rel) {
            Some(d) if *d == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Data(format!("{rel}: digest does not match manifest"))),
            None => Err(Error::Data(format!("{rel}: not listed in manifest"))),
        }
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.manifest
            .scenes
            .get(split.name())
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn scene(&self, split: Split, id: &str) -> Result<SceneSpec> {
        let bytes = self.read_checked(&format!("scenes/{}/{id}.json", split.name()))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("scene {id}: {e}")))
    }

    pub fn scenes(&self, split: Split) -> Result<Vec<SceneSpec>> {
        self.ids(split).iter().map(|id| self.scene(split, id)).collect()
    }

    pub fn occupancy(&self, split: Split, id: &str) -> Result<OccupancyGrid> {
        let bytes = self.read_checked(&format!("occupancy/{}/{id}.occ", split.name()))?;
        OccupancyGrid::read_rle(&bytes[..])
    }
}
