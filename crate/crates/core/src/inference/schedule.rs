use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    Encode(usize, usize),
    Detect(usize, usize),
    EvictPooledRow(usize),
    EvictFullRow(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub rows: usize,
    pub cols: usize,
    pub delta: usize,
    /// Past-only context: neighbors not yet encoded count as absent.
    pub causal: bool,
    pub events: Vec<Event>,
}

/// Row-major encoding with a `delta`-row lookahead: row `r` is detected as
/// soon as row `min(r + delta, rows - 1)` is fully encoded. Full-resolution
/// rows are evicted right after detection, pooled row `r` once row `r + delta`
/// has been detected.
pub fn plan_schedule(rows: usize, cols: usize, delta: usize) -> Result<Schedule> {
    plan(rows, cols, delta, false)
}

/// Detects each window right after encoding it, with context limited to
/// windows encoded earlier.
pub fn plan_causal_schedule(rows: usize, cols: usize, delta: usize) -> Result<Schedule> {
    plan(rows, cols, delta, true)
}

fn plan(rows: usize, cols: usize, delta: usize, causal: bool) -> Result<Schedule> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("empty grid {rows}x{cols}")));
    }
    let mut ev = Vec::with_capacity(2 * rows * cols + 2 * rows);
    let mut next_det = 0;
    let mut next_evict = 0;
    for r in 0..rows {
        for c in 0..cols {
            ev.push(Event::Encode(r, c));
            if causal {
                ev.push(Event::Detect(r, c));
            }
        }
        if causal {
            ev.push(Event::EvictFullRow(r));
            if r >= delta {
                ev.push(Event::EvictPooledRow(r - delta));
                next_evict = r - delta + 1;
            }
            continue;
        }
        while next_det < rows && (next_det + delta).min(rows - 1) <= r {
            for c in 0..cols {
                ev.push(Event::Detect(next_det, c));
            }
            ev.push(Event::EvictFullRow(next_det));
            if next_det >= delta {
                ev.push(Event::EvictPooledRow(next_det - delta));
                next_evict = next_det - delta + 1;
            }
            next_det += 1;
        }
    }
    for r in next_evict..rows {
        ev.push(Event::EvictPooledRow(r));
    }
    Ok(Schedule {
        rows,
        cols,
        delta,
        causal,
        events: ev,
    })
}

impl Schedule {
    /// Replays the events against the dependency rules and returns the peak
    /// `(pooled, full)` residencies.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let (rows, cols, d) = (self.rows, self.cols, self.delta);
        let bad = |m: String| Err(Error::CacheInvariant(m));
        let mut encoded = vec![false; rows * cols];
        let mut detected = vec![false; rows * cols];
        let mut pooled = vec![false; rows * cols];
        let mut full = vec![false; rows * cols];
        let (mut np, mut nf, mut peak_p, mut peak_f) = (0usize, 0usize, 0usize, 0usize);
        for &e in &self.events {
            match e {
                Event::Encode(r, c) => {
                    if encoded[r * cols + c] {
                        return bad(format!("({r},{c}) encoded twice"));
                    }
                    encoded[r * cols + c] = true;
                    pooled[r * cols + c] = true;
                    full[r * cols + c] = true;
                    np += 1;
                    nf += 1;
                }
                Event::Detect(r, c) => {
                    if detected[r * cols + c] {
                        return bad(format!("({r},{c}) detected twice"));
                    }
                    if !full[r * cols + c] {
                        return bad(format!("({r},{c}) detected without its features"));
                    }
                    for rr in r.saturating_sub(d)..=(r + d).min(rows - 1) {
                        for cc in c.saturating_sub(d)..=(c + d).min(cols - 1) {
                            let i = rr * cols + cc;
                            let past = (rr, cc) <= (r, c);
                            if self.causal && !past {
                                continue;
                            }
                            if !encoded[i] {
                                return bad(format!("({r},{c}) detected before neighbor ({rr},{cc}) was encoded"));
                            }
                            if !pooled[i] {
                                return bad(format!("neighbor ({rr},{cc}) evicted before ({r},{c}) was detected"));
                            }
                        }
                    }
                    detected[r * cols + c] = true;
                }
                Event::EvictFullRow(r) => {
                    for c in 0..cols {
                        if full[r * cols + c] {
                            full[r * cols + c] = false;
                            nf -= 1;
                        }
                    }
                }
                Event::EvictPooledRow(r) => {
                    for c in 0..cols {
                        if pooled[r * cols + c] {
                            pooled[r * cols + c] = false;
                            np -= 1;
                        }
                    }
                }
            }
            peak_p = peak_p.max(np);
            peak_f = peak_f.max(nf);
        }
        if encoded.iter().any(|&v| !v) || detected.iter().any(|&v| !v) {
            return bad("some window was never encoded or detected".into());
        }
        if np != 0 || nf != 0 {
            return bad("cache not empty at the end of the pass".into());
        }
        Ok((peak_p, peak_f))
    }

    pub fn count(&self, pred: impl Fn(&Event) -> bool) -> usize {
        self.events.iter().filter(|e| pred(e)).count()
    }
}
