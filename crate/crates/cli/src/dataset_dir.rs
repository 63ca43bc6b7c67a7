//! On-disk phantom datasets.
//!
//! A dataset directory holds one sub-directory per pair (`pair_0000`, ...)
//! with `pat.r32f`, `mri.r32f`, `aligned_mri.r32f` and `true_field.f32d`,
//! plus a `manifest.txt`:
//!
//! ```text
//! # fusekit phantom dataset
//! seed=9
//! count=2
//! size=64
//! deform_magnitude=3
//! pair pair_0000 1234567
//! file 9f86d08...  pair_0000/pat.r32f
//! ```
//!
//! `file` lines carry the SHA-256 of each file and are checked on load.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use fusekit_core::imagedata::{load_image, save_image, Dataset, Modality, PhantomPair};
use fusekit_core::warpfield::{load_field, save_field};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";
const MEMBERS: [&str; 4] = ["pat.r32f", "mri.r32f", "aligned_mri.r32f", "true_field.f32d"];

/// How a dataset was generated.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub deform_magnitude: f64,
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn pair_dir(index: usize) -> String {
    format!("pair_{index:04}")
}

/// Generates the pairs described by `spec` and writes them under `out`.
pub fn write_dataset(spec: &GenSpec, out: &Path) -> Result<Dataset> {
    let data = Dataset::generate(spec.seed, spec.count, spec.size, spec.deform_magnitude)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = format!(
        "# fusekit phantom dataset\nseed={}\ncount={}\nsize={}\ndeform_magnitude={:?}\n",
        spec.seed, spec.count, spec.size, spec.deform_magnitude
    );
    for (i, pair) in data.pairs.iter().enumerate() {
        let name = pair_dir(i);
        let dir = out.join(&name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        save_image(&pair.pat, dir.join(MEMBERS[0]))?;
        save_image(&pair.mri, dir.join(MEMBERS[1]))?;
        save_image(&pair.aligned_mri, dir.join(MEMBERS[2]))?;
        save_field(&pair.true_field, dir.join(MEMBERS[3]))?;
        let _ = writeln!(manifest, "pair {name} {}", pair.seed);
        for member in MEMBERS {
            let rel = format!("{name}/{member}");
            let _ = writeln!(manifest, "file {}  {rel}", file_digest(&out.join(&rel))?);
        }
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    Ok(data)
}

/// Parsed manifest contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: GenSpec,
    /// Pair directory names with their phantom seeds, in order.
    pub pairs: Vec<(String, u64)>,
    /// Expected digests keyed by path relative to the dataset root.
    pub files: Vec<(String, String)>,
}

fn header<T: std::str::FromStr>(keys: &[(String, String)], key: &str) -> Result<T> {
    let raw = keys
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| anyhow!("manifest lacks `{key}`"))?;
    raw.parse().map_err(|_| anyhow!("manifest `{key}` is not valid: {raw}"))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let (mut keys, mut pairs, mut files) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || anyhow!("{}:{}: cannot parse `{line}`", path.display(), n + 1);
        if let Some(rest) = line.strip_prefix("pair ") {
            let (name, seed) = rest.split_once(' ').ok_or_else(bad)?;
            pairs.push((name.to_string(), seed.trim().parse().map_err(|_| bad())?));
        } else if let Some(rest) = line.strip_prefix("file ") {
            let (digest, rel) = rest.split_once("  ").ok_or_else(bad)?;
            files.push((rel.trim().to_string(), digest.to_string()));
        } else {
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            keys.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let spec = GenSpec {
        seed: header(&keys, "seed")?,
        count: header(&keys, "count")?,
        size: header(&keys, "size")?,
        deform_magnitude: header(&keys, "deform_magnitude")?,
    };
    ensure!(
        pairs.len() == spec.count,
        "manifest lists {} pairs but count={}",
        pairs.len(),
        spec.count
    );
    Ok(Manifest { spec, pairs, files })
}

/// Recomputes every listed digest; returns the paths that do not match.
pub fn verify(dir: &Path, manifest: &Manifest) -> Result<Vec<PathBuf>> {
    let mut bad = Vec::new();
    for (rel, want) in &manifest.files {
        let path = dir.join(rel);
        if !path.exists() || file_digest(&path)? != *want {
            bad.push(path);
        }
    }
    Ok(bad)
}

/// Loads a dataset directory after checking its manifest digests.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let bad = verify(dir, &manifest)?;
    if !bad.is_empty() {
        bail!("checksum mismatch: {}", bad.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "));
    }
    let pairs = manifest
        .pairs
        .iter()
        .map(|(name, seed)| {
            let d = dir.join(name);
            Ok(PhantomPair {
                pat: load_image(d.join(MEMBERS[0]))?.with_modality(Modality::Pat),
                mri: load_image(d.join(MEMBERS[1]))?.with_modality(Modality::Mri),
                aligned_mri: load_image(d.join(MEMBERS[2]))?.with_modality(Modality::Mri),
                true_field: load_field(d.join(MEMBERS[3]))?,
                seed: *seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { pairs })
}
