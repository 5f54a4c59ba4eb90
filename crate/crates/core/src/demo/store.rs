//! Directory of demonstration files indexed by `manifest.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{self, Compression};
use super::{DemoSource, Demonstration};
use crate::env::Outcome;
use crate::error::{Error, Result};
use crate::eye::{Fidelity, SectorId};
use crate::hash::sha256_hex;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub surgeon: String,
    pub target: SectorId,
    pub source: DemoSource,
    pub fidelity: Fidelity,
    pub obs_hash: String,
    pub env_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub outcome: Outcome,
    pub entry_sector: Option<SectorId>,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn counts_by_sector(&self) -> BTreeMap<SectorId, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.target).or_insert(0) += 1;
        }
        m
    }
}

pub struct DemoStore {
    dir: PathBuf,
    compression: Compression,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl DemoStore {
    /// Opens (creating if needed) a store directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let store = Self { dir, compression: Compression::Deflate };
        if !store.manifest_path().exists() {
            store.write_manifest(&Manifest { version: MANIFEST_VERSION, entries: Vec::new() })?;
        }
        Ok(store)
    }

    pub fn with_compression(mut self, c: Compression) -> Self {
        self.compression = c;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(self.manifest_path())?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(m)?;
        bytes.push(b'\n');
        write_atomic(&self.manifest_path(), &bytes)
    }

    /// Writes the demo file and adds it to the manifest. The id is derived from
    /// the file content, so saving the same demonstration twice is a no-op.
    pub fn save(&self, demo: &Demonstration) -> Result<String> {
        let bytes = format::encode(demo, self.compression)?;
        let sha = sha256_hex(&bytes);
        let id = format!("{}-{}-{}", file_safe(&demo.meta.surgeon), demo.meta.target, &sha[..12]);
        let file = format!("{id}.demo");
        write_atomic(&self.dir.join(&file), &bytes)?;
        let mut m = self.manifest()?;
        if !m.entries.iter().any(|e| e.id == id) {
            let meta = &demo.meta;
            m.entries.push(ManifestEntry {
                id: id.clone(),
                file,
                surgeon: meta.surgeon.clone(),
                target: meta.target,
                source: meta.source,
                fidelity: meta.fidelity,
                obs_hash: meta.obs_hash.clone(),
                env_hash: meta.env_hash.clone(),
                seed: meta.seed,
                steps: demo.steps.len(),
                outcome: meta.outcome,
                entry_sector: meta.entry_sector,
                sha256: sha,
            });
            m.entries.sort_by(|a, b| a.id.cmp(&b.id));
            self.write_manifest(&m)?;
        }
        Ok(id)
    }

    /// Loads a demo by id. With `expected_obs_hash`, demos recorded under a
    /// different observation layout are rejected.
    pub fn load(&self, id: &str, expected_obs_hash: Option<&str>) -> Result<Demonstration> {
        let m = self.manifest()?;
        let e = m
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no demo with id {id:?}")))?;
        let (demo, _) = format::decode(&std::fs::read(self.dir.join(&e.file))?)?;
        if let Some(h) = expected_obs_hash {
            demo.check_compatible(h)?;
        }
        Ok(demo)
    }

    /// Ids for a surgeon/sector group, in manifest order.
    pub fn ids(&self, surgeon: Option<&str>, target: Option<SectorId>) -> Result<Vec<String>> {
        Ok(self
            .manifest()?
            .entries
            .into_iter()
            .filter(|e| surgeon.is_none_or(|s| e.surgeon == s))
            .filter(|e| target.is_none_or(|t| e.target == t))
            .map(|e| e.id)
            .collect())
    }

    pub fn load_group(
        &self,
        surgeon: Option<&str>,
        targets: &[SectorId],
        expected_obs_hash: Option<&str>,
    ) -> Result<Vec<Demonstration>> {
        let mut out = Vec::new();
        for e in self.manifest()?.entries {
            if surgeon.is_none_or(|s| e.surgeon == s) && targets.contains(&e.target) {
                out.push(self.load(&e.id, expected_obs_hash)?);
            }
        }
        Ok(out)
    }

    /// Demo files on disk (by name), for consistency checks against the manifest.
    pub fn files_on_disk(&self) -> Result<Vec<String>> {
        let mut v = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.ends_with(".demo") {
                v.push(name);
            }
        }
        v.sort();
        Ok(v)
    }
}
