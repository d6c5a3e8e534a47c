//! Gender-directed preference pairs for reward-model training.
//!
//! Every man image of a cell is paired with every woman image of the same
//! (action, ethnicity, context) cell. `image_a` is always the man image and
//! the label follows the dataset direction, so the two directions differ
//! only in their labels. Pairs stream straight into sharded JSONL files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::reward_probe::ImageManifestCell;
use crate::taxonomy::{Action, Ethnicity, Gender};

pub const DEFAULT_SHARD_SIZE: usize = 100_000;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    ManPreferred,
    WomanPreferred,
}

impl Direction {
    /// Label for a (man image, woman image) pair.
    pub fn label(self) -> [u8; 2] {
        match self {
            Direction::ManPreferred => [1, 0],
            Direction::WomanPreferred => [0, 1],
        }
    }

    pub fn flipped(self) -> Direction {
        match self {
            Direction::ManPreferred => Direction::WomanPreferred,
            Direction::WomanPreferred => Direction::ManPreferred,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Curated,
    Facefree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairCell {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ethnicity: Option<Ethnicity>,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub image_a: String,
    pub image_b: String,
    /// Preference for (image_a, image_b); exactly one entry is 1.
    pub label: [u8; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<PairCell>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.label, [1, 0] | [0, 1]) {
            return Err(Error::Input(format!("label {:?} is not [1, 0] or [0, 1]", self.label)));
        }
        if self.image_a.is_empty() || self.image_b.is_empty() || self.image_a == self.image_b {
            return Err(Error::Input("pair needs two distinct non-empty images".into()));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::Input("pair has an empty prompt".into()));
        }
        Ok(())
    }

    /// Digest of the pair content, ignoring provenance.
    pub fn content_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for field in [self.prompt.as_bytes(), self.image_a.as_bytes(), self.image_b.as_bytes()] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field);
        }
        h.update(self.label);
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationConfig {
    #[serde(default)]
    pub direction: Direction,
    /// Cap on images per gender per cell; all images when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_per_gender: Option<usize>,
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
}

fn default_shard_size() -> usize {
    DEFAULT_SHARD_SIZE
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            direction: Direction::ManPreferred,
            images_per_gender: None,
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub cell: PairCell,
    pub missing: Gender,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub cells: usize,
    pub pairs: u64,
    pub skipped: Vec<SkippedCell>,
}

struct CellImages<'a> {
    prompt: Option<&'a ImageManifestCell>,
    man: Vec<&'a str>,
    woman: Vec<&'a str>,
}

/// Emits the man x woman cross product of every cell into `sink`, in cell
/// order. Cells missing one gender are skipped and reported.
pub fn build_pairs<F>(
    cells: &[ImageManifestCell],
    catalog: &Catalog,
    config: &CurationConfig,
    mut sink: F,
) -> Result<BuildSummary>
where
    F: FnMut(&PreferencePair) -> Result<()>,
{
    let mut grouped: BTreeMap<PairCell, CellImages> = BTreeMap::new();
    for c in cells {
        let Some(gender @ (Gender::Man | Gender::Woman)) = c.gender else {
            continue;
        };
        let key = PairCell {
            action: c.action,
            ethnicity: c.ethnicity,
            context: c.context,
        };
        let entry = grouped.entry(key).or_insert_with(|| CellImages {
            prompt: None,
            man: Vec::new(),
            woman: Vec::new(),
        });
        entry.prompt.get_or_insert(c);
        let images = c.images.iter().map(String::as_str);
        match gender {
            Gender::Man => entry.man.extend(images),
            _ => entry.woman.extend(images),
        }
    }

    let cap = config.images_per_gender.unwrap_or(usize::MAX);
    let label = config.direction.label();
    let mut summary = BuildSummary::default();
    for (cell, images) in &grouped {
        let missing = match (images.man.is_empty(), images.woman.is_empty()) {
            (true, _) => Some(Gender::Man),
            (_, true) => Some(Gender::Woman),
            _ => None,
        };
        if let Some(missing) = missing {
            summary.skipped.push(SkippedCell { cell: *cell, missing });
            continue;
        }
        let prompt = images.prompt.expect("cell has a source").evaluation_prompt(catalog)?;
        summary.cells += 1;
        let mut pair = PreferencePair {
            prompt,
            image_a: String::new(),
            image_b: String::new(),
            label,
            cell: Some(*cell),
            provenance: Provenance::Curated,
        };
        for man in images.man.iter().take(cap) {
            pair.image_a.clear();
            pair.image_a.push_str(man);
            for woman in images.woman.iter().take(cap) {
                pair.image_b.clear();
                pair.image_b.push_str(woman);
                sink(&pair)?;
                summary.pairs += 1;
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub records: u64,
    pub sha256: String,
}

struct OpenShard {
    writer: BufWriter<File>,
    hasher: Sha256,
    records: u64,
    file: String,
}

/// Writes records into `pairs-NNNNN.jsonl` shards of at most `shard_size`
/// lines, tracking a digest per shard.
pub struct ShardWriter {
    dir: PathBuf,
    shard_size: usize,
    current: Option<OpenShard>,
    shards: Vec<ShardInfo>,
    line: Vec<u8>,
}

impl ShardWriter {
    pub fn create(dir: &Path, shard_size: usize) -> Result<ShardWriter> {
        if shard_size == 0 {
            return Err(Error::Config("shard_size must be at least 1".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(ShardWriter {
            dir: dir.to_path_buf(),
            shard_size,
            current: None,
            shards: Vec::new(),
            line: Vec::with_capacity(512),
        })
    }

    pub fn write(&mut self, pair: &PreferencePair) -> Result<()> {
        if self.current.as_ref().is_some_and(|s| s.records as usize >= self.shard_size) {
            self.close_current()?;
        }
        if self.current.is_none() {
            let file = format!("pairs-{:05}.jsonl", self.shards.len());
            let path = self.dir.join(&file);
            let handle = File::create(&path).map_err(|e| Error::io(&path, e))?;
            self.current = Some(OpenShard {
                writer: BufWriter::with_capacity(1 << 16, handle),
                hasher: Sha256::new(),
                records: 0,
                file,
            });
        }
        self.line.clear();
        serde_json::to_writer(&mut self.line, pair)?;
        self.line.push(b'\n');
        let shard = self.current.as_mut().expect("shard open");
        shard.hasher.update(&self.line);
        shard
            .writer
            .write_all(&self.line)
            .map_err(|e| Error::io(self.dir.join(&shard.file), e))?;
        shard.records += 1;
        Ok(())
    }

    fn close_current(&mut self) -> Result<()> {
        if let Some(mut shard) = self.current.take() {
            let path = self.dir.join(&shard.file);
            shard.writer.flush().map_err(|e| Error::io(&path, e))?;
            self.shards.push(ShardInfo {
                file: shard.file,
                records: shard.records,
                sha256: hex::encode(shard.hasher.finalize()),
            });
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<ShardInfo>> {
        self.close_current()?;
        Ok(self.shards)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacefreeStats {
    pub read: u64,
    pub accepted: u64,
    pub malformed: u64,
    pub duplicates: u64,
}

/// Streams extra labeled pairs from a JSONL source into `sink`, tagging them
/// as face-free. Malformed lines are skipped; repeated content is dropped.
pub fn merge_facefree<F>(source: &Path, mut sink: F) -> Result<FacefreeStats>
where
    F: FnMut(&PreferencePair) -> Result<()>,
{
    let file = File::open(source).map_err(|e| Error::io(source, e))?;
    let mut stats = FacefreeStats::default();
    let mut seen: HashSet<[u8; 32]> = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.read += 1;
        let pair = serde_json::from_str::<PreferencePair>(&line)
            .map_err(Error::from)
            .and_then(|p| p.validate().map(|_| p));
        let mut pair = match pair {
            Ok(p) => p,
            Err(e) => {
                log::warn!("{}:{}: skipping malformed pair ({e})", source.display(), lineno + 1);
                stats.malformed += 1;
                continue;
            }
        };
        if !seen.insert(pair.content_digest()) {
            stats.duplicates += 1;
            continue;
        }
        pair.provenance = Provenance::Facefree;
        sink(&pair)?;
        stats.accepted += 1;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub direction: Direction,
    pub shard_size: usize,
    pub total_records: u64,
    pub curated_pairs: u64,
    pub curated_cells: usize,
    pub skipped_cells: Vec<SkippedCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facefree: Option<FacefreeStats>,
    pub shards: Vec<ShardInfo>,
}

/// Builds the curated pairs, appends the optional face-free source, and
/// writes shards plus `manifest.json` into `out_dir`.
pub fn curate(
    cells: &[ImageManifestCell],
    catalog: &Catalog,
    config: &CurationConfig,
    facefree: Option<&Path>,
    out_dir: &Path,
) -> Result<CurationManifest> {
    let mut writer = ShardWriter::create(out_dir, config.shard_size)?;
    let built = build_pairs(cells, catalog, config, |p| writer.write(p))?;
    let facefree = facefree
        .map(|src| merge_facefree(src, |p| writer.write(p)))
        .transpose()?;
    let shards = writer.finish()?;
    let manifest = CurationManifest {
        direction: config.direction,
        shard_size: config.shard_size,
        total_records: shards.iter().map(|s| s.records).sum(),
        curated_pairs: built.pairs,
        curated_cells: built.cells,
        skipped_cells: built.skipped,
        facefree,
        shards,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
