//! Dataset directory: `manifest.json` plus, per song, a token file
//! `songs/<id>.tok` and an optional ground-truth sidecar `songs/<id>.json`.
//!
//! Songs are split 90/5/5 into train/validation/test by id (`id % 20`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_grid, write_grid};
use crate::layout::{LayoutSpec, TokenGrid};
use crate::synth::{generate_song, symbolic_layout, symbolic_tokenize, StyleParams, SymbolicSong, N_CONDITIONS};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn of(id: usize) -> Split {
        match id % 20 {
            18 => Split::Val,
            19 => Split::Test,
            _ => Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongEntry {
    pub id: usize,
    /// Token file, relative to the dataset root.
    pub tokens: String,
    /// Symbolic ground truth, relative to the dataset root.
    pub sidecar: Option<String>,
    pub condition_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub layout: LayoutSpec,
    pub n_conditions: usize,
    pub seed: Option<u64>,
    pub style: Option<StyleParams>,
    pub songs: Vec<SongEntry>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub grids: Vec<TokenGrid>,
}

/// Generates `n` songs (song `i` from stream `i` of the seeded generator)
/// and writes them as a dataset directory.
pub fn synthesize_dataset(dir: impl AsRef<Path>, n: usize, style: &StyleParams, seed: u64) -> Result<Manifest> {
    style.validate()?;
    let songs = synthesize_songs(n, style, seed)?;
    let layout = symbolic_layout(style.frame_rate_hz);
    let items = songs
        .into_iter()
        .map(|song| Ok((symbolic_tokenize(&song, &layout)?, song)))
        .collect::<Result<Vec<_>>>()?;
    write_symbolic_dataset(dir, &layout, &items, Some(seed), Some(style))
}

pub fn synthesize_songs(n: usize, style: &StyleParams, seed: u64) -> Result<Vec<SymbolicSong>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_song(style, &mut rng)
        })
        .collect()
}

/// Writes tokenized songs with their sidecars and the manifest.
pub fn write_symbolic_dataset(
    dir: impl AsRef<Path>,
    layout: &LayoutSpec,
    items: &[(TokenGrid, SymbolicSong)],
    seed: Option<u64>,
    style: Option<&StyleParams>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("songs"))?;
    let mut songs = Vec::with_capacity(items.len());
    for (id, (grid, song)) in items.iter().enumerate() {
        let tokens = format!("songs/{id:06}.tok");
        let sidecar = format!("songs/{id:06}.json");
        write_grid(dir.join(&tokens), grid)?;
        fs::write(dir.join(&sidecar), serde_json::to_vec(song)?)?;
        songs.push(SongEntry {
            id,
            tokens,
            sidecar: Some(sidecar),
            condition_id: song.condition_id,
            split: Split::of(id),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        layout: layout.clone(),
        n_conditions: N_CONDITIONS,
        seed,
        style: style.cloned(),
        songs,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    fs::write(dir.as_ref().join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        let mut grids = Vec::with_capacity(manifest.songs.len());
        for entry in &manifest.songs {
            if entry.condition_id >= manifest.n_conditions {
                return Err(Error::Dataset(format!(
                    "song {} has condition {} of {}",
                    entry.id, entry.condition_id, manifest.n_conditions
                )));
            }
            let grid = read_grid(root.join(&entry.tokens))?;
            if !grid.layout().same_structure(&manifest.layout) {
                return Err(Error::LayoutMismatch(format!(
                    "song {} does not match the dataset layout",
                    entry.id
                )));
            }
            grids.push(grid);
        }
        Ok(Self { root, manifest, grids })
    }

    pub fn layout(&self) -> &LayoutSpec {
        &self.manifest.layout
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Indices of the songs in `split`, in id order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.songs[i].split == split)
            .collect()
    }

    pub fn condition(&self, index: usize) -> usize {
        self.manifest.songs[index].condition_id
    }

    pub fn song(&self, index: usize) -> Result<SymbolicSong> {
        let entry = &self.manifest.songs[index];
        let rel = entry
            .sidecar
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("song {} has no symbolic sidecar", entry.id)))?;
        let path = self.root.join(rel);
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))
    }
}
