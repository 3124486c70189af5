use std::path::{Path, PathBuf};

use crate::data::{read_manifest, read_tile, Manifest, SlideGrid};
use crate::error::{Error, Result};

/// Window pixels by grid position, with read accounting.
pub trait TileSource {
    fn slide_id(&self) -> &str;
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn patch_h(&self) -> usize;
    fn patch_w(&self) -> usize;
    fn read(&mut self, r: usize, c: usize) -> Result<Vec<u8>>;
    /// Pixel bytes delivered so far.
    fn bytes_read(&self) -> u64;
    /// Reads of each tile so far, row-major.
    fn reads(&self) -> &[u32];
}

pub struct MemorySource<'a> {
    slide: &'a SlideGrid,
    bytes: u64,
    reads: Vec<u32>,
}

impl<'a> MemorySource<'a> {
    pub fn new(slide: &'a SlideGrid) -> Self {
        MemorySource {
            slide,
            bytes: 0,
            reads: vec![0; slide.rows * slide.cols],
        }
    }
}

impl TileSource for MemorySource<'_> {
    fn slide_id(&self) -> &str {
        &self.slide.slide_id
    }
    fn rows(&self) -> usize {
        self.slide.rows
    }
    fn cols(&self) -> usize {
        self.slide.cols
    }
    fn patch_h(&self) -> usize {
        self.slide.patch_h
    }
    fn patch_w(&self) -> usize {
        self.slide.patch_w
    }
    fn read(&mut self, r: usize, c: usize) -> Result<Vec<u8>> {
        if r >= self.slide.rows || c >= self.slide.cols {
            return Err(Error::OutOfRange(format!("tile ({r},{c})")));
        }
        self.reads[r * self.slide.cols + c] += 1;
        let p = self.slide.patch(r, c).to_vec();
        self.bytes += p.len() as u64;
        Ok(p)
    }
    fn bytes_read(&self) -> u64 {
        self.bytes
    }
    fn reads(&self) -> &[u32] {
        &self.reads
    }
}

/// Decodes tiles lazily from an on-disk archive.
pub struct ArchiveSource {
    dir: PathBuf,
    manifest: Manifest,
    bytes: u64,
    reads: Vec<u32>,
}

impl ArchiveSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let n = manifest.rows * manifest.cols;
        Ok(ArchiveSource {
            dir: dir.to_path_buf(),
            manifest,
            bytes: 0,
            reads: vec![0; n],
        })
    }
}

impl TileSource for ArchiveSource {
    fn slide_id(&self) -> &str {
        &self.manifest.slide_id
    }
    fn rows(&self) -> usize {
        self.manifest.rows
    }
    fn cols(&self) -> usize {
        self.manifest.cols
    }
    fn patch_h(&self) -> usize {
        self.manifest.patch_h
    }
    fn patch_w(&self) -> usize {
        self.manifest.patch_w
    }
    fn read(&mut self, r: usize, c: usize) -> Result<Vec<u8>> {
        let entry = self
            .manifest
            .tiles
            .iter()
            .find(|t| t.r == r && t.c == c)
            .ok_or_else(|| Error::OutOfRange(format!("tile ({r},{c}) not in manifest")))?
            .clone();
        let px = read_tile(&self.dir, &self.manifest, &entry)?;
        self.reads[r * self.manifest.cols + c] += 1;
        self.bytes += px.len() as u64;
        Ok(px)
    }
    fn bytes_read(&self) -> u64 {
        self.bytes
    }
    fn reads(&self) -> &[u32] {
        &self.reads
    }
}
