//! Per-timestep class probability lattice and its text/binary file formats.
//!
//! Text: a `LAT1 <T> <C> <alphabet>` header, then `T` lines of `C`
//! space-separated decimals. Binary: `LATB`, little-endian `u32` T and C,
//! the alphabet as a `u32`-length-prefixed UTF-8 string, then `T*C` `f64`.

use std::fs;
use std::path::Path as FsPath;

use crate::error::{Error, Result};
use crate::numeric::{Alphabet, Distribution};

/// Row-sum tolerance accepted when reading lattices from disk.
pub const LOAD_SUM_TOL: f64 = 1e-6;

const TEXT_MAGIC: &str = "LAT1";
const BIN_MAGIC: &[u8; 4] = b"LATB";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeFormat {
    Text,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbLattice {
    alphabet: Alphabet,
    rows: Vec<Distribution>,
}

impl ProbLattice {
    pub fn new(alphabet: Alphabet, rows: Vec<Distribution>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("lattice needs at least one timestep"));
        }
        let c = alphabet.classes();
        if let Some(t) = rows.iter().position(|r| r.len() != c) {
            return Err(Error::Shape(format!(
                "row {t} has {} classes, alphabet implies {c}",
                rows[t].len()
            )));
        }
        Ok(Self { alphabet, rows })
    }

    /// Builds a lattice from `T*C` row-major probabilities, renormalizing rows
    /// that sum to one within `tol`.
    pub fn from_flat(alphabet: Alphabet, timesteps: usize, data: &[f64], tol: f64) -> Result<Self> {
        let c = alphabet.classes();
        if data.len() != timesteps * c {
            return Err(Error::Shape(format!(
                "{timesteps}x{c} lattice needs {} values, got {}",
                timesteps * c,
                data.len()
            )));
        }
        let rows = data
            .chunks(c)
            .enumerate()
            .map(|(t, r)| {
                Distribution::normalized(r.to_vec(), tol)
                    .map_err(|e| Error::Format(format!("lattice row {t}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(alphabet, rows)
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn timesteps(&self) -> usize {
        self.rows.len()
    }

    pub fn classes(&self) -> usize {
        self.alphabet.classes()
    }

    pub fn rows(&self) -> &[Distribution] {
        &self.rows
    }

    pub fn row(&self, t: usize) -> &Distribution {
        &self.rows[t]
    }

    pub fn prob(&self, t: usize, class: usize) -> f64 {
        self.rows[t].probs()[class]
    }

    /// Mean of the per-row entropies.
    pub fn mean_entropy(&self) -> f64 {
        self.rows.iter().map(Distribution::entropy).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{TEXT_MAGIC} {} {} {}\n",
            self.timesteps(),
            self.classes(),
            self.alphabet
        );
        for row in &self.rows {
            let line: Vec<String> = row.probs().iter().map(|p| p.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty lattice file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != TEXT_MAGIC {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected `{TEXT_MAGIC} <T> <C> <alphabet>`"),
            });
        }
        let parse_dim = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("bad {what} {s:?}"),
            })
        };
        let t = parse_dim(parts[1], "timestep count")?;
        let c = parse_dim(parts[2], "class count")?;
        let alphabet = Alphabet::parse(parts[3]).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        check_classes(&alphabet, c)?;
        let mut data = Vec::with_capacity(t * c);
        let mut seen = 0;
        for (idx, line) in lines {
            let lineno = idx + 1;
            let row = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad probability {v:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != c {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {c} values, got {}", row.len()),
                });
            }
            data.extend(row);
            seen += 1;
        }
        if seen != t {
            return Err(Error::Format(format!("header says {t} rows, found {seen}")));
        }
        Self::from_flat(alphabet, t, &data, LOAD_SUM_TOL)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let alpha = self.alphabet.to_string();
        let mut out = Vec::with_capacity(16 + alpha.len() + 8 * self.timesteps() * self.classes());
        out.extend_from_slice(BIN_MAGIC);
        out.extend_from_slice(&(self.timesteps() as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes() as u32).to_le_bytes());
        out.extend_from_slice(&(alpha.len() as u32).to_le_bytes());
        out.extend_from_slice(alpha.as_bytes());
        for row in &self.rows {
            for p in row.probs() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != BIN_MAGIC {
            return Err(Error::Format("missing LATB magic".into()));
        }
        let t = r.u32()? as usize;
        let c = r.u32()? as usize;
        let alen = r.u32()? as usize;
        let alpha = std::str::from_utf8(r.take(alen)?)
            .map_err(|_| Error::Format("alphabet is not UTF-8".into()))?;
        let alphabet = Alphabet::parse(alpha)?;
        check_classes(&alphabet, c)?;
        let data = (0..t * c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after lattice data".into()));
        }
        Self::from_flat(alphabet, t, &data, LOAD_SUM_TOL)
    }

    /// Reads either format, sniffing the magic bytes.
    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(BIN_MAGIC) {
            Self::from_binary(&bytes)
        } else if bytes.starts_with(TEXT_MAGIC.as_bytes()) {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::Format("lattice text is not UTF-8".into()))?;
            Self::from_text(text)
        } else {
            Err(Error::Format(format!("{}: not a lattice file", path.display())))
        }
    }

    pub fn save(&self, path: impl AsRef<FsPath>, format: LatticeFormat) -> Result<()> {
        let path = path.as_ref();
        let bytes = match format {
            LatticeFormat::Text => self.to_text().into_bytes(),
            LatticeFormat::Binary => self.to_binary(),
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn check_classes(alphabet: &Alphabet, c: usize) -> Result<()> {
    if alphabet.classes() != c {
        return Err(Error::Format(format!(
            "class count {c} does not match alphabet of {} symbols plus blank",
            alphabet.symbols().len()
        )));
    }
    Ok(())
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
