//! Directory archive: `<slide_id>/manifest.json`, `<slide_id>/tiles/r{r}_c{c}.png`
//! and `<slide_id>/annotations.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::slide::{PointAnnotation, SlideGrid, CHANNELS};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub r: usize,
    pub c: usize,
    pub file: String,
    /// SHA-256 of the decoded RGB bytes.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub slide_id: String,
    #[serde(rename = "R")]
    pub rows: usize,
    #[serde(rename = "Cc")]
    pub cols: usize,
    #[serde(rename = "H")]
    pub patch_h: usize,
    #[serde(rename = "W")]
    pub patch_w: usize,
    pub tiles: Vec<TileEntry>,
}

pub fn tile_name(r: usize, c: usize) -> String {
    format!("r{r}_c{c}.png")
}

pub fn tile_checksum(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_png(pixels: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format {
        what: "tile",
        detail: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(pixels).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(out)
}

/// Decodes an 8-bit RGB PNG and checks its extents.
pub fn decode_png(bytes: &[u8], h: usize, w: usize, name: &str) -> Result<Vec<u8>> {
    let fail = |detail: String| Error::Format {
        what: "tile",
        detail: format!("{name}: {detail}"),
    };
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(fail(format!("{:?}/{:?}, expected 8-bit RGB", info.color_type, info.bit_depth)));
    }
    if (info.height as usize, info.width as usize) != (h, w) {
        return Err(fail(format!("{}x{}, expected {h}x{w}", info.height, info.width)));
    }
    buf.truncate(h * w * CHANNELS);
    Ok(buf)
}

/// Writes `root/<slide_id>/...` and returns the slide directory.
pub fn save_archive(slide: &SlideGrid, annotations: &[PointAnnotation], root: &Path) -> Result<PathBuf> {
    let dir = root.join(&slide.slide_id);
    let tiles = dir.join("tiles");
    fs::create_dir_all(&tiles).map_err(|e| Error::io(&tiles, e))?;
    let mut entries = Vec::with_capacity(slide.rows * slide.cols);
    for r in 0..slide.rows {
        for c in 0..slide.cols {
            let px = slide.patch(r, c);
            let name = tile_name(r, c);
            let path = tiles.join(&name);
            fs::write(&path, encode_png(px, slide.patch_h, slide.patch_w)?).map_err(|e| Error::io(&path, e))?;
            entries.push(TileEntry {
                r,
                c,
                file: name,
                checksum: tile_checksum(px),
            });
        }
    }
    let manifest = Manifest {
        format_version: ARCHIVE_VERSION,
        slide_id: slide.slide_id.clone(),
        rows: slide.rows,
        cols: slide.cols,
        patch_h: slide.patch_h,
        patch_w: slide.patch_w,
        tiles: entries,
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    write_annotations(&dir.join("annotations.jsonl"), annotations)?;
    Ok(dir)
}

pub fn write_annotations(path: &Path, annotations: &[PointAnnotation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<PointAnnotation>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "annotations",
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "annotations",
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "manifest",
            path: path.clone(),
        },
        _ => Error::io(&path, e),
    })?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        what: "manifest",
        detail: e.to_string(),
    })?;
    if m.format_version != ARCHIVE_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: ARCHIVE_VERSION,
        });
    }
    if m.rows == 0 || m.cols == 0 || m.tiles.len() != m.rows * m.cols {
        return Err(Error::Format {
            what: "manifest",
            detail: format!("{}x{} grid declares {} tiles", m.rows, m.cols, m.tiles.len()),
        });
    }
    let mut seen = vec![false; m.rows * m.cols];
    for t in &m.tiles {
        if t.r >= m.rows || t.c >= m.cols || std::mem::replace(&mut seen[t.r * m.cols + t.c], true) {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("tile ({}, {}) out of range or repeated", t.r, t.c),
            });
        }
    }
    Ok(m)
}

/// Reads and verifies one tile named by the manifest.
pub fn read_tile(dir: &Path, manifest: &Manifest, entry: &TileEntry) -> Result<Vec<u8>> {
    let path = dir.join("tiles").join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: "tile",
            path: path.clone(),
        },
        _ => Error::io(&path, e),
    })?;
    let px = decode_png(&bytes, manifest.patch_h, manifest.patch_w, &entry.file)?;
    if tile_checksum(&px) != entry.checksum {
        return Err(Error::Checksum(path.display().to_string()));
    }
    Ok(px)
}

pub fn load_archive(dir: &Path) -> Result<(SlideGrid, Vec<PointAnnotation>)> {
    let m = read_manifest(dir)?;
    let mut patches = vec![Vec::new(); m.rows * m.cols];
    for t in &m.tiles {
        patches[t.r * m.cols + t.c] = read_tile(dir, &m, t)?;
    }
    let slide = SlideGrid::new(m.slide_id.clone(), m.rows, m.cols, m.patch_h, m.patch_w, patches)?;
    let annotations = read_annotations(&dir.join("annotations.jsonl"))?;
    Ok((slide, annotations))
}

/// Slide directories (those holding a manifest) directly under `root`, sorted.
pub fn list_archives(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("manifest.json").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
