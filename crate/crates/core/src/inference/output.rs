use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::engine::Detection;

pub fn write_detections_jsonl(path: &Path, detections: &[Detection]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for d in detections {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<Detection>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "detections",
            detail: format!("{}:{}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

pub fn detections_csv(detections: &[Detection]) -> String {
    let mut s = String::from("slide_id,r,c,global_x,global_y,score,category\n");
    for d in detections {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            d.slide_id, d.r, d.c, d.global_x, d.global_y, d.score, d.category
        );
    }
    s
}
