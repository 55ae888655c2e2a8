//! Episode files.
//!
//! JSON lines: one [`Episode`] object per line with the fields of the struct;
//! `states` and `true_probs` are flat unit-major arrays.
//!
//! Packed binary, a concatenation of records, all little-endian:
//!
//! ```text
//! magic        b"SSQ1"
//! u64          M
//! u64          T
//! u8  * M      feature x
//! u8  * M*T    states
//! f64 * 2*T    lambda, group 0 then group 1
//! f64 * 2*(T-1) absorption fractions, group 0 then group 1
//! f64 * M*T*3  true next-state probabilities
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Episode;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSQ1";

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)?;
        ep.validate()?;
        out.push(ep);
    }
    Ok(out)
}

pub fn write_binary(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ep in episodes {
        w.write_all(MAGIC)?;
        w.write_all(&(ep.m as u64).to_le_bytes())?;
        w.write_all(&(ep.t as u64).to_le_bytes())?;
        w.write_all(&ep.x)?;
        w.write_all(&ep.states)?;
        for series in ep.lambda.iter().chain(ep.frac_default.iter()) {
            for v in series {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &ep.true_probs {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated episode file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Format("episode too large".into()))?,
            )?
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_binary(path: &Path) -> Result<Vec<Episode>> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        if c.take(4)? != MAGIC {
            return Err(Error::Format("bad episode magic".into()));
        }
        let m = c.u64()? as usize;
        let t = c.u64()? as usize;
        if t < 2 {
            return Err(Error::Format("episode has fewer than two periods".into()));
        }
        let mt = m
            .checked_mul(t)
            .ok_or_else(|| Error::Format("episode too large".into()))?;
        let x = c.take(m)?.to_vec();
        let states = c.take(mt)?.to_vec();
        let lambda = [c.f64s(t)?, c.f64s(t)?];
        let frac_default = [c.f64s(t - 1)?, c.f64s(t - 1)?];
        let true_probs = c.f64s(mt * 3)?;
        let ep = Episode {
            m,
            t,
            x,
            states,
            lambda,
            frac_default,
            true_probs,
        };
        ep.validate()?;
        out.push(ep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};

    fn episodes() -> Vec<Episode> {
        let cfg = SimConfig {
            m: 10,
            t: 12,
            seed: 9,
            ..SimConfig::default()
        };
        (0..3).map(|s| simulate(&cfg, s).unwrap()).collect()
    }

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.jsonl");
        let eps = episodes();
        write_jsonl(&path, &eps).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), eps);
    }

    #[test]
    fn binary_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.ssq");
        let eps = episodes();
        write_binary(&path, &eps).unwrap();
        assert_eq!(read_binary(&path).unwrap(), eps);
    }

    #[test]
    fn truncated_binary_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eps.ssq");
        write_binary(&path, &episodes()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_binary(&path), Err(Error::Format(_))));
    }
}
