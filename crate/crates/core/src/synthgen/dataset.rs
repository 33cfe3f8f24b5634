//! Dataset generation and on-disk formats (PGM strips, CSV manifest,
//! quantized frame archive).

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_strip, strip_frames, CorruptionSpec, GlyphFont, StripLayout, FRAME_STRIDE};
use crate::ctc::lattice::ByteReader;
use crate::error::{Error, Result};
use crate::model::{FrameSet, DEFAULT_WINDOW};
use crate::numeric::{Alphabet, Tensor};
use crate::rules::EncodingRules;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    TargetShifted,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::TargetShifted => "target_shifted",
        }
    }

    pub fn default_spec(self) -> CorruptionSpec {
        match self {
            Domain::Source => CorruptionSpec::source(),
            Domain::TargetShifted => CorruptionSpec::target_shifted(),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target_shifted" | "target" => Ok(Domain::TargetShifted),
            other => Err(Error::Format(format!("unknown domain {other:?}"))),
        }
    }
}

/// One generated strip held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub label: String,
    pub image: Tensor,
    pub damage: Vec<bool>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub layout: StripLayout,
    pub entries: Vec<DatasetEntry>,
    /// Window crops of every strip with per-frame class labels.
    pub frames: FrameSet,
}

/// Knobs that are not part of the corruption model.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub alphabet: Alphabet,
    pub layout: StripLayout,
    pub window: usize,
    pub stride: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            alphabet: Alphabet::default(),
            layout: StripLayout::default(),
            window: DEFAULT_WINDOW,
            stride: FRAME_STRIDE,
        }
    }
}

fn sample_label(rules: &EncodingRules, pools: &[Vec<char>], rng: &mut ChaCha8Rng) -> String {
    debug_assert_eq!(pools.len(), rules.total_length());
    pools.iter().map(|pool| pool[rng.random_range(0..pool.len())]).collect()
}

/// Generates `count` strips. Labels are uniform over rule-conforming strings
/// drawn from the alphabet; each entry has its own seed taken from a master
/// stream, so entries can be rendered in parallel.
pub fn gen_dataset(
    rules: &EncodingRules,
    count: usize,
    spec: &CorruptionSpec,
    domain: Domain,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::contract("dataset count must be at least 1"));
    }
    spec.validate()?;
    let font = GlyphFont::for_alphabet(&cfg.alphabet)?;
    let pools: Vec<Vec<char>> = rules
        .classes()
        .into_iter()
        .map(|class| {
            let pool: Vec<char> =
                cfg.alphabet.symbols().iter().copied().filter(|&c| class.matches(c)).collect();
            if pool.is_empty() {
                Err(Error::AlphabetMismatch(format!("no alphabet symbol satisfies {class}")))
            } else {
                Ok(pool)
            }
        })
        .collect::<Result<_>>()?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| master.next_u64()).collect();

    let rendered: Vec<(DatasetEntry, FrameSet)> = seeds
        .par_iter()
        .map(|&entry_seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(entry_seed);
            let label = sample_label(rules, &pools, &mut rng);
            let strip = render_strip(&label, rules, &font, spec, cfg.layout, &[], rng.next_u64())?;
            let frames = strip_frames(&strip.image, &label, &cfg.alphabet, cfg.layout, cfg.window, cfg.stride)?;
            Ok((
                DatasetEntry {
                    label,
                    image: strip.image,
                    damage: strip.damage,
                    seed: entry_seed,
                },
                frames,
            ))
        })
        .collect::<Result<_>>()?;

    let mut frames = FrameSet::new(cfg.window);
    let mut entries = Vec::with_capacity(count);
    for (entry, f) in rendered {
        frames.extend(&f);
        entries.push(entry);
    }
    Ok(Dataset {
        domain,
        layout: cfg.layout,
        entries,
        frames,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| ManifestEntry {
                    path: PathBuf::from(strip_file_name(i)),
                    label: e.label.clone(),
                    domain: self.domain,
                    damage: e.damage.clone(),
                    seed: e.seed,
                })
                .collect(),
        }
    }

    /// Writes `strip_NNNNN.pgm` files, `manifest.csv` and `frames.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, e) in self.entries.iter().enumerate() {
            write_pgm(&dir.join(strip_file_name(i)), &e.image)?;
        }
        let manifest = self.manifest();
        manifest.save(&dir.join("manifest.csv"))?;
        write_frames(&dir.join("frames.bin"), &self.frames)?;
        Ok(manifest)
    }
}

fn strip_file_name(i: usize) -> String {
    format!("strip_{i:05}.pgm")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: String,
    pub domain: Domain,
    pub damage: Vec<bool>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    domain: Domain,
    damage_flags: String,
    seed: u64,
}

impl DatasetManifest {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(ManifestRow {
                path: e.path.to_string_lossy().into_owned(),
                label: e.label.clone(),
                domain: e.domain,
                damage_flags: e.damage.iter().map(|&d| if d { '1' } else { '0' }).collect(),
                seed: e.seed,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, row) in r.deserialize::<ManifestRow>().enumerate() {
            let row = row?;
            let line = i + 2;
            let damage = row
                .damage_flags
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(Error::Parse {
                        line,
                        msg: format!("bad damage flag {c:?}"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            if damage.len() != row.label.chars().count() {
                return Err(Error::Parse {
                    line,
                    msg: "damage flags and label differ in length".into(),
                });
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(row.path),
                label: row.label,
                domain: row.domain,
                damage,
                seed: row.seed,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `1 x H x W` image as 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        &[1, h, w] => (h, w),
        other => return Err(Error::Shape(format!("expected 1 x H x W image, got {other:?}"))),
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM into a `1 x H x W` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM number {s:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let max = num(token()?)?;
    if max == 0 || max > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    let data = raster.iter().map(|&b| b as f64 / max as f64).collect();
    Tensor::new(vec![1, h, w], data)
}

const FRAMES_MAGIC: &[u8; 4] = b"FRM8";

/// Writes frames as `FRM8`, u32 count, u32 side, then per frame a u32
/// label and `side * side` quantized bytes. All integers little-endian.
pub fn write_frames(path: &Path, frames: &FrameSet) -> Result<()> {
    let side = frames.side;
    let mut out = Vec::with_capacity(12 + frames.len() * (4 + side * side));
    out.extend_from_slice(FRAMES_MAGIC);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
    for i in 0..frames.len() {
        out.extend_from_slice(&(frames.labels[i] as u32).to_le_bytes());
        out.extend(frames.image(i).iter().map(|&v| quantize(v)));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<FrameSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    if r.take(4)? != FRAMES_MAGIC {
        return Err(Error::Format("not a frame archive".into()));
    }
    let count = r.u32()? as usize;
    let side = r.u32()? as usize;
    let mut frames = FrameSet::new(side);
    let mut img = vec![0.0; side * side];
    for _ in 0..count {
        let label = r.u32()? as usize;
        for (d, &b) in img.iter_mut().zip(r.take(side * side)?) {
            *d = b as f64 / 255.0;
        }
        frames.push(&img, label);
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes in frame archive".into()));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn billet() -> EncodingRules {
        EncodingRules::parse("company LETTER 1\ndate DIGIT 6\nfurnace LETTER 2\nserial DIGIT 2\n")
            .unwrap()
    }

    fn small(seed: u64, count: usize) -> Dataset {
        gen_dataset(&billet(), count, &CorruptionSpec::target_shifted(), Domain::TargetShifted, seed, &GenConfig::default())
            .unwrap()
    }

    #[test]
    fn same_seed_same_manifest() {
        let a = small(11, 4);
        let b = small(11, 4);
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a, b);
        assert_ne!(small(12, 4).manifest(), a.manifest());
    }

    #[test]
    fn labels_conform_and_count_is_respected() {
        let d = small(3, 1);
        assert_eq!(d.len(), 1);
        assert_eq!(d.frames.len(), 23);
        let d = small(4, 30);
        let rules = billet();
        for e in &d.manifest().entries {
            assert!(rules.validate(&e.label).is_empty(), "{}", e.label);
            assert_eq!(e.damage.len(), e.label.len());
        }
    }

    #[test]
    fn zero_count_rejected() {
        let r = gen_dataset(&billet(), 0, &CorruptionSpec::none(), Domain::Source, 0, &GenConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = small(5, 3).manifest();
        let text = m.to_csv().unwrap();
        assert!(text.starts_with("path,label,domain,damage_flags,seed\n"));
        assert_eq!(DatasetManifest::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_flag_length_mismatch() {
        let text = "path,label,domain,damage_flags,seed\na.pgm,B636021BB06,source,0000,1\n";
        assert!(matches!(DatasetManifest::from_csv(text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let d = small(6, 2);
        let m = d.save(dir.path()).unwrap();
        assert_eq!(DatasetManifest::load(&dir.path().join("manifest.csv")).unwrap(), m);
        let img = read_pgm(&dir.path().join(&m.entries[0].path)).unwrap();
        assert_eq!(img.shape(), d.entries[0].image.shape());
        for (a, b) in img.data().iter().zip(d.entries[0].image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let frames = read_frames(&dir.path().join("frames.bin")).unwrap();
        assert_eq!(frames.len(), d.frames.len());
        for i in 0..frames.len() {
            assert_eq!(frames.labels[i], d.frames.labels[i]);
        }
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let t = parse_pgm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
