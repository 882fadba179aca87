//! On-disk corpus layout and validation.
//!
//! A split directory holds images/, masks/, and manifest.jsonl with one entry
//! per sample. Train and test draw from seed ranges a megasample apart, so
//! they can never share a seed. Reading validates structure eagerly and the
//! per-sample pixel invariants lazily on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::mml::{OptimizedInstruction, Vocabulary};
use crate::tensor::Tensor;

use super::{dilate, pixel_diff, sample_edit, CANVAS};

/// Test seeds start this far above the train base seed.
pub const TEST_SEED_OFFSET: u64 = 1 << 20;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: u32,
    pub seed: u64,
    pub edit_type: String,
    pub src: String,
    pub gt: String,
    pub mask: String,
    pub t_raw: String,
    pub t_gt: OptimizedInstruction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub base_seed: u64,
    pub test_seed_offset: u64,
    pub canvas: usize,
    pub train: usize,
    pub test: usize,
    pub edit_type_counts: BTreeMap<String, usize>,
}

/// A split with its manifest parsed and validated; images stay on disk until
/// `load` is called.
#[derive(Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A fully materialized sample.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub seed: u64,
    pub edit_type: String,
    pub t_raw: String,
    pub t_gt: OptimizedInstruction,
    pub i_src: Tensor,
    pub i_gt: Tensor,
    pub mask: Tensor,
}

fn write_split(dir: &Path, first_seed: u64, count: usize) -> Result<BTreeMap<String, usize>> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    let mut counts = BTreeMap::new();
    for i in 0..count {
        let sample = sample_edit(first_seed + i as u64)?;
        let entry = ManifestEntry {
            id: i as u32,
            seed: sample.seed,
            edit_type: sample.edit.type_name().to_string(),
            src: format!("images/{i:05}_src.png"),
            gt: format!("images/{i:05}_gt.png"),
            mask: format!("masks/{i:05}.png"),
            t_raw: sample.t_raw.clone(),
            t_gt: sample.t_gt.clone(),
        };
        imageio::write_image(&dir.join(&entry.src), &sample.i_src)?;
        imageio::write_image(&dir.join(&entry.gt), &sample.i_gt)?;
        imageio::write_mask(&dir.join(&entry.mask), &sample.mask)?;
        writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
        *counts.entry(entry.edit_type).or_insert(0usize) += 1;
    }
    Ok(counts)
}

/// Generate train/ and test/ under `root` plus a corpus.json summary.
pub fn write_corpus(root: &Path, base_seed: u64, train: usize, test: usize) -> Result<CorpusSummary> {
    if train as u64 >= TEST_SEED_OFFSET {
        return Err(Error::parameter(format!(
            "train size {train} would collide with the test seed range"
        )));
    }
    let mut counts = write_split(&root.join("train"), base_seed, train)?;
    let test_counts = write_split(&root.join("test"), base_seed + TEST_SEED_OFFSET, test)?;
    for (k, v) in test_counts {
        *counts.entry(k).or_insert(0) += v;
    }
    let summary = CorpusSummary {
        base_seed,
        test_seed_offset: TEST_SEED_OFFSET,
        canvas: CANVAS,
        train,
        test,
        edit_type_counts: counts,
    };
    fs::write(root.join("corpus.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Parse and structurally validate one split: sequential ids, files present,
/// phrase-count bounds, and every instruction tokenizable under the core
/// vocabulary.
pub fn read_split(dir: &Path) -> Result<Corpus> {
    let manifest = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest)
        .map_err(|e| Error::io(format!("{}: {e}", manifest.display())))?;
    let vocab = Vocabulary::core();
    let mut entries = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::integrity(format!("manifest line {}: {e}", ln + 1)))?;
        if entry.id as usize != entries.len() {
            return Err(Error::integrity(format!(
                "manifest line {}: id {} out of order",
                ln + 1,
                entry.id
            )));
        }
        let phrases = entry.t_gt.optimized_prompt.len();
        if !(5..=10).contains(&phrases) {
            return Err(Error::integrity(format!(
                "sample {}: {phrases} prompt phrases outside 5..=10",
                entry.id
            )));
        }
        vocab.encode(&entry.t_raw)?;
        entry.t_gt.to_token_ids(&vocab)?;
        for rel in [&entry.src, &entry.gt, &entry.mask] {
            if !dir.join(rel).is_file() {
                return Err(Error::integrity(format!("missing file {rel}")));
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::integrity(format!("{}: empty manifest", manifest.display())));
    }
    Ok(Corpus { dir: dir.to_path_buf(), entries })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Read one sample's images and re-check the pixel invariants: canvas
    /// size and mask = dilate(diff, 1).
    pub fn load(&self, index: usize) -> Result<LoadedSample> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::parameter(format!("sample {index} of {}", self.entries.len()))
        })?;
        let i_src = imageio::read_image(&self.dir.join(&entry.src))?;
        let i_gt = imageio::read_image(&self.dir.join(&entry.gt))?;
        let mask = imageio::read_mask(&self.dir.join(&entry.mask))?;
        for (t, want) in [
            (&i_src, vec![3, CANVAS, CANVAS]),
            (&i_gt, vec![3, CANVAS, CANVAS]),
        ] {
            if t.shape != want {
                return Err(Error::integrity(format!(
                    "sample {index}: image shape {:?}",
                    t.shape
                )));
            }
        }
        let expect = dilate(&pixel_diff(&i_src, &i_gt), 1);
        if expect.data != mask.data {
            return Err(Error::integrity(format!(
                "sample {index}: mask does not match dilated pixel diff"
            )));
        }
        Ok(LoadedSample {
            seed: entry.seed,
            edit_type: entry.edit_type.clone(),
            t_raw: entry.t_raw.clone(),
            t_gt: entry.t_gt.clone(),
            i_src,
            i_gt,
            mask,
        })
    }

    pub fn load_all(&self) -> Result<Vec<LoadedSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let summary = write_corpus(dir.path(), 50, 6, 3).unwrap();
        assert_eq!((summary.train, summary.test), (6, 3));
        assert_eq!(summary.edit_type_counts.values().sum::<usize>(), 9);

        let train = read_split(&dir.path().join("train")).unwrap();
        let test = read_split(&dir.path().join("test")).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 3);

        // Disjoint seed ranges by construction.
        let max_train = train.entries.iter().map(|e| e.seed).max().unwrap();
        let min_test = test.entries.iter().map(|e| e.seed).min().unwrap();
        assert!(max_train < min_test);

        // Loaded pixels match a fresh in-memory regeneration bit for bit.
        for entry in &train.entries {
            let fresh = sample_edit(entry.seed).unwrap();
            let loaded = train.load(entry.id as usize).unwrap();
            assert_eq!(loaded.i_src.data, fresh.i_src.data);
            assert_eq!(loaded.i_gt.data, fresh.i_gt.data);
            assert_eq!(loaded.mask.data, fresh.mask.data);
            assert_eq!(loaded.t_raw, fresh.t_raw);
            assert_eq!(loaded.t_gt, fresh.t_gt);
        }
    }

    #[test]
    fn tampered_image_is_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 9000, 2, 1).unwrap();
        let train = read_split(&dir.path().join("train")).unwrap();
        let mut img = imageio::read_image(&dir.path().join("train/images/00000_src.png")).unwrap();
        // Flip one pixel far from any plausible mask coverage guard: any
        // change must break the mask invariant somewhere.
        img.data[0] = if img.data[0] == 0.0 { 1.0 } else { 0.0 };
        imageio::write_image(&dir.path().join("train/images/00000_src.png"), &img).unwrap();
        let err = train.load(0).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Integrity);
    }

    #[test]
    fn missing_file_fails_read() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 300, 2, 1).unwrap();
        fs::remove_file(dir.path().join("train/masks/00001.png")).unwrap();
        assert!(read_split(&dir.path().join("train")).is_err());
    }

    #[test]
    fn oversized_train_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_corpus(dir.path(), 0, TEST_SEED_OFFSET as usize, 1).is_err());
    }
}
