//! Deterministic synthetic billet-number strips.
//!
//! Characters are drawn as 5x7 dot matrices into 32x32 cells laid out left
//! to right with a fixed gap and margins. Corruptions run in a fixed order:
//! dot dropout, occlusion bands, contrast, brightness, Gaussian noise, clamp
//! to `[0, 1]`. Every output is a pure function of its inputs and seed.

mod dataset;
mod font;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{
    gen_dataset, read_frames, read_pgm, write_frames, write_pgm, Dataset, DatasetEntry,
    DatasetManifest, Domain, GenConfig, ManifestEntry,
};
pub use font::{GlyphFont, GLYPH_COLS, GLYPH_ROWS};

use crate::error::{Error, Result};
use crate::model::FrameSet;
use crate::numeric::{Alphabet, Tensor};
use crate::rules::EncodingRules;

pub const CELL: usize = 32;
pub const DOT_PITCH: usize = 3;
pub const DOT_SIZE: usize = 2;
pub const BACKGROUND: f64 = 0.1;
pub const INK: f64 = 0.9;

/// Left/top offset of the glyph inside its cell before jitter.
const GLYPH_X: usize = (CELL - ((GLYPH_COLS - 1) * DOT_PITCH + DOT_SIZE)) / 2;
const GLYPH_Y: usize = (CELL - ((GLYPH_ROWS - 1) * DOT_PITCH + DOT_SIZE)) / 2;
const GLYPH_HEIGHT: usize = GLYPH_ROWS * DOT_PITCH;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Chance that a character receives occlusion bands at all.
    pub occlusion_prob: f64,
    /// Inclusive range of band counts for an occluded character.
    pub occlusion_bands: (usize, usize),
    /// Inclusive range of band heights in pixels.
    pub band_width: (usize, usize),
    pub occlusion_fill: f64,
    pub brightness_shift: f64,
    /// Half-width of a uniform per-strip offset added to `brightness_shift`.
    pub brightness_jitter: f64,
    /// Scales deviations from mid-grey.
    pub contrast_scale: f64,
    /// Half-width of a uniform per-strip offset added to `contrast_scale`.
    pub contrast_jitter: f64,
    pub noise_sigma: f64,
    /// Chance that a lit dot is erased.
    pub dot_dropout: f64,
    /// Maximum horizontal glyph offset in pixels.
    pub jitter: usize,
    /// Occluded fraction of glyph rows at which a character counts as damaged.
    pub damage_threshold: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            occlusion_prob: 0.0,
            occlusion_bands: (0, 0),
            band_width: (0, 0),
            occlusion_fill: BACKGROUND,
            brightness_shift: 0.0,
            brightness_jitter: 0.0,
            contrast_scale: 1.0,
            contrast_jitter: 0.0,
            noise_sigma: 0.0,
            dot_dropout: 0.0,
            jitter: 0,
            damage_threshold: 0.5,
        }
    }

    /// Training domain: mild noise, dropout and jitter plus small per-strip
    /// lighting variation.
    pub fn source() -> Self {
        Self {
            noise_sigma: 0.06,
            dot_dropout: 0.03,
            jitter: 1,
            brightness_jitter: 0.15,
            contrast_jitter: 0.15,
            ..Self::none()
        }
    }

    /// Darker, flatter, noisier and partly peeled marks.
    pub fn target_shifted() -> Self {
        Self {
            occlusion_prob: 0.12,
            occlusion_bands: (1, 2),
            band_width: (3, 8),
            brightness_shift: -0.3,
            contrast_scale: 0.7,
            noise_sigma: 0.1,
            dot_dropout: 0.05,
            jitter: 1,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::contract(format!("{what} must be in [0, 1], got {p}")))
            }
        };
        prob(self.occlusion_prob, "occlusion_prob")?;
        prob(self.dot_dropout, "dot_dropout")?;
        prob(self.damage_threshold, "damage_threshold")?;
        if self.occlusion_bands.0 > self.occlusion_bands.1 || self.band_width.0 > self.band_width.1 {
            return Err(Error::contract("inverted occlusion range"));
        }
        if !(self.noise_sigma >= 0.0)
            || !self.contrast_scale.is_finite()
            || !self.brightness_shift.is_finite()
            || !(self.brightness_jitter >= 0.0 && self.brightness_jitter.is_finite())
            || !(self.contrast_jitter >= 0.0 && self.contrast_jitter.is_finite())
        {
            return Err(Error::contract("invalid photometric parameters"));
        }
        Ok(())
    }
}

/// Per-character render outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharInfo {
    /// Fraction of the glyph's rows covered by occlusion bands.
    pub coverage: f64,
    pub damaged: bool,
}

/// Draws one glyph (with dropout and jitter) into a canvas of width
/// `canvas_w`, with the cell's left edge at `x0`.
fn draw_glyph(
    canvas: &mut [f64],
    canvas_w: usize,
    x0: usize,
    bits: &[u8; GLYPH_ROWS],
    spec: &CorruptionSpec,
    rng: &mut ChaCha8Rng,
) {
    let j = spec.jitter as i64;
    let shift = if j > 0 { rng.random_range(-j..=j) } else { 0 };
    let gx = (x0 + GLYPH_X) as i64 + shift;
    for row in 0..GLYPH_ROWS {
        for col in 0..GLYPH_COLS {
            if !GlyphFont::dot(bits, row, col) {
                continue;
            }
            if spec.dot_dropout > 0.0 && rng.random::<f64>() < spec.dot_dropout {
                continue;
            }
            for dy in 0..DOT_SIZE {
                for dx in 0..DOT_SIZE {
                    let x = gx + (col * DOT_PITCH + dx) as i64;
                    let y = GLYPH_Y + row * DOT_PITCH + dy;
                    if x >= 0 && (x as usize) < canvas_w {
                        canvas[y * canvas_w + x as usize] = INK;
                    }
                }
            }
        }
    }
}

/// Paints horizontal bands over the cell starting at `x0`; returns the
/// covered fraction of glyph rows.
fn occlude(
    canvas: &mut [f64],
    canvas_w: usize,
    x0: usize,
    spec: &CorruptionSpec,
    force: bool,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut covered = [false; CELL];
    let mut paint = |canvas: &mut [f64], top: usize, height: usize| {
        for y in top..(top + height).min(CELL) {
            covered[y] = true;
            canvas[y * canvas_w + x0..y * canvas_w + x0 + CELL].fill(spec.occlusion_fill);
        }
    };
    let hit = spec.occlusion_prob > 0.0 && rng.random::<f64>() < spec.occlusion_prob;
    if hit {
        let count = rng.random_range(spec.occlusion_bands.0..=spec.occlusion_bands.1);
        for _ in 0..count {
            let w = rng.random_range(spec.band_width.0..=spec.band_width.1).min(GLYPH_HEIGHT);
            if w == 0 {
                continue;
            }
            let top = GLYPH_Y + rng.random_range(0..=GLYPH_HEIGHT - w);
            paint(canvas, top, w);
        }
    }
    if force {
        // one band over the middle of the glyph, just past the threshold
        let need = (spec.damage_threshold * GLYPH_HEIGHT as f64).ceil() as usize;
        let w = need.clamp(1, GLYPH_HEIGHT);
        let top = GLYPH_Y + (GLYPH_HEIGHT - w) / 2;
        paint(canvas, top, w);
    }
    let rows = covered[GLYPH_Y..GLYPH_Y + GLYPH_HEIGHT].iter().filter(|&&c| c).count();
    rows as f64 / GLYPH_HEIGHT as f64
}

fn photometric(canvas: &mut [f64], spec: &CorruptionSpec, rng: &mut ChaCha8Rng) {
    let mut jitter = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let contrast = spec.contrast_scale + jitter(spec.contrast_jitter);
    let brightness = spec.brightness_shift + jitter(spec.brightness_jitter);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma is positive"));
    for v in canvas.iter_mut() {
        let mut x = 0.5 + contrast * (*v - 0.5);
        x += brightness;
        if let Some(n) = &noise {
            x += n.sample(rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
}

/// Renders a single symbol into a `1 x 32 x 32` cell.
pub fn render_char(
    symbol: char,
    font: &GlyphFont,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<(Tensor, CharInfo)> {
    spec.validate()?;
    let bits = font.glyph(symbol).ok_or(Error::UnknownSymbol(symbol))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = vec![BACKGROUND; CELL * CELL];
    draw_glyph(&mut canvas, CELL, 0, bits, spec, &mut rng);
    let coverage = occlude(&mut canvas, CELL, 0, spec, false, &mut rng);
    photometric(&mut canvas, spec, &mut rng);
    let info = CharInfo {
        coverage,
        damaged: coverage >= spec.damage_threshold,
    };
    Ok((Tensor::new(vec![1, CELL, CELL], canvas)?, info))
}

/// Horizontal placement of character cells on a strip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripLayout {
    pub gap_px: usize,
    /// Blank columns on each side.
    pub margin_px: usize,
}

impl Default for StripLayout {
    fn default() -> Self {
        Self {
            gap_px: 0,
            margin_px: 16,
        }
    }
}

impl StripLayout {
    /// Distance between neighbouring character centres.
    pub fn pitch(&self) -> usize {
        CELL + self.gap_px
    }

    /// Half the pitch: windows alternate between character-centred and
    /// gap-centred, giving one frame per character and one blank between.
    pub fn frame_stride(&self) -> usize {
        self.pitch() / 2
    }

    pub fn width(&self, chars: usize) -> usize {
        chars * CELL + chars.saturating_sub(1) * self.gap_px + 2 * self.margin_px
    }

    pub fn cell_left(&self, i: usize) -> usize {
        self.margin_px + i * (CELL + self.gap_px)
    }

    pub fn cell_center(&self, i: usize) -> usize {
        self.cell_left(i) + CELL / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedStrip {
    /// `1 x 32 x W`
    pub image: Tensor,
    pub damage: Vec<bool>,
}

/// Renders a rule-conforming label. Characters listed in `force_damage` get
/// an occlusion band that reaches the damage threshold.
pub fn render_strip(
    label: &str,
    rules: &EncodingRules,
    font: &GlyphFont,
    spec: &CorruptionSpec,
    layout: StripLayout,
    force_damage: &[usize],
    seed: u64,
) -> Result<RenderedStrip> {
    spec.validate()?;
    let violations = rules.validate(label);
    if !violations.is_empty() {
        return Err(Error::contract(format!(
            "label {label:?} violates the encoding rules: {violations:?}"
        )));
    }
    let chars: Vec<char> = label.chars().collect();
    let width = layout.width(chars.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = vec![BACKGROUND; CELL * width];
    let mut damage = Vec::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let bits = font.glyph(c).ok_or(Error::UnknownSymbol(c))?;
        let x0 = layout.cell_left(i);
        draw_glyph(&mut canvas, width, x0, bits, spec, &mut rng);
        let coverage = occlude(&mut canvas, width, x0, spec, force_damage.contains(&i), &mut rng);
        damage.push(coverage >= spec.damage_threshold);
    }
    photometric(&mut canvas, spec, &mut rng);
    Ok(RenderedStrip {
        image: Tensor::new(vec![1, CELL, width], canvas)?,
        damage,
    })
}

/// Window stride used by generation and evaluation for the default layout.
pub const FRAME_STRIDE: usize = CELL / 2;

/// Half-width of the window-centre band around a character centre inside
/// which a window is labelled with that character.
pub const FRAME_TOLERANCE: usize = 8;

/// Class label of every sliding window over a strip: the character whose
/// cell centre lies within [`FRAME_TOLERANCE`] of the window centre, blank
/// otherwise.
pub fn frame_labels(
    label: &str,
    alphabet: &Alphabet,
    layout: StripLayout,
    window: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    let chars: Vec<char> = label.chars().collect();
    let t = crate::model::window_count(layout.width(chars.len()), window, stride)?;
    (0..t)
        .map(|k| {
            let centre = k * stride + window / 2;
            let hit = chars
                .iter()
                .enumerate()
                .find(|(i, _)| layout.cell_center(*i).abs_diff(centre) <= FRAME_TOLERANCE);
            match hit {
                Some((_, &c)) => alphabet.index_of(c).ok_or(Error::UnknownSymbol(c)),
                None => Ok(alphabet.blank_index()),
            }
        })
        .collect()
}

/// Labelled training frames cut from one strip.
pub fn strip_frames(
    strip: &Tensor,
    label: &str,
    alphabet: &Alphabet,
    layout: StripLayout,
    window: usize,
    stride: usize,
) -> Result<FrameSet> {
    let windows = crate::model::strip_windows(strip, window, stride)?;
    let labels = frame_labels(label, alphabet, layout, window, stride)?;
    let mut frames = FrameSet::new(window);
    for (k, &l) in labels.iter().enumerate() {
        frames.push(&windows.data()[k * window * window..(k + 1) * window * window], l);
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

    fn font() -> GlyphFont {
        GlyphFont::for_alphabet(&Alphabet::default()).unwrap()
    }

    #[test]
    fn render_char_is_deterministic() {
        let spec = CorruptionSpec::target_shifted();
        let (a, _) = render_char('B', &font(), &spec, 42).unwrap();
        let (b, _) = render_char('B', &font(), &spec, 42).unwrap();
        assert_eq!(a, b);
        let (c, _) = render_char('B', &font(), &spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spec_equals_default_spec() {
        let (a, ia) = render_char('7', &font(), &CorruptionSpec::none(), 1).unwrap();
        let (b, ib) = render_char('7', &font(), &CorruptionSpec::default(), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        assert!(!ia.damaged);
        assert!(a
            .data()
            .iter()
            .all(|&v| (v - BACKGROUND).abs() < 1e-12 || (v - INK).abs() < 1e-12));
    }

    #[test]
    fn unknown_symbol_is_rejected() {
        assert!(matches!(
            render_char('a', &font(), &CorruptionSpec::none(), 0),
            Err(Error::UnknownSymbol('a'))
        ));
    }

    #[test]
    fn wide_band_marks_damage() {
        // one band of 13 of the 21 glyph rows (>= 60%)
        let spec = CorruptionSpec {
            occlusion_prob: 1.0,
            occlusion_bands: (1, 1),
            band_width: (13, 13),
            ..CorruptionSpec::none()
        };
        let (_, info) = render_char('8', &font(), &spec, 3).unwrap();
        assert!((info.coverage - 13.0 / 21.0).abs() < 1e-12);
        assert!(info.coverage >= 0.6);
        assert!(info.damaged);
        let narrow = CorruptionSpec {
            band_width: (5, 5),
            ..spec
        };
        assert!(!render_char('8', &font(), &narrow, 3).unwrap().1.damaged);
    }

    #[test]
    fn strip_width_and_flags() {
        let layout = StripLayout {
            gap_px: 8,
            margin_px: 16,
        };
        assert_eq!(layout.width(11), 11 * 32 + 10 * 8 + 32);
        assert_eq!(layout.width(11), 464);
        assert_eq!(StripLayout::default().width(11), 384);
        let s = render_strip("B636021BB06", &billet(), &font(), &CorruptionSpec::none(), layout, &[], 5)
            .unwrap();
        assert_eq!(s.image.shape(), &[1, 32, 464]);
        assert!(s.damage.iter().all(|&d| !d));
        let s = render_strip("B636021BB06", &billet(), &font(), &CorruptionSpec::none(), layout, &[4], 5)
            .unwrap();
        assert_eq!(s.damage.iter().filter(|&&d| d).count(), 1);
        assert!(s.damage[4]);
    }

    #[test]
    fn strip_rejects_invalid_label() {
        let r = render_strip("8636021BB06", &billet(), &font(), &CorruptionSpec::none(), StripLayout::default(), &[], 0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let spec = CorruptionSpec {
            brightness_shift: 0.8,
            contrast_scale: 3.0,
            noise_sigma: 0.5,
            ..CorruptionSpec::target_shifted()
        };
        let s = render_strip("B636021BB06", &billet(), &font(), &spec, StripLayout::default(), &[], 9).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn distinct_symbols_render_differently() {
        let f = font();
        let imgs: Vec<(char, Tensor)> = Alphabet::default()
            .symbols()
            .iter()
            .map(|&c| (c, render_char(c, &f, &CorruptionSpec::none(), 0).unwrap().0))
            .collect();
        for (i, (a, ia)) in imgs.iter().enumerate() {
            for (b, ib) in &imgs[i + 1..] {
                assert_ne!(ia, ib, "{a} and {b} render identically");
            }
        }
    }

    #[test]
    fn frame_labels_follow_cell_geometry() {
        let a = Alphabet::default();
        assert_eq!(StripLayout::default().frame_stride(), FRAME_STRIDE);
        let labels = frame_labels("B636021BB06", &a, StripLayout::default(), 32, FRAME_STRIDE).unwrap();
        let path = crate::ctc::Path::new(a.clone(), labels).unwrap();
        assert_eq!(path.to_string(), "_B_6_3_6_0_2_1_B_B_0_6_");
        assert_eq!(crate::ctc::collapse(&path).text, "B636021BB06");

        let labels = frame_labels("B636021BB06", &a, StripLayout::default(), 32, 8).unwrap();
        assert_eq!(labels.len(), 45);
        let path = crate::ctc::Path::new(a.clone(), labels).unwrap();
        // three windows per character, one blank between neighbours
        assert_eq!(path.to_string(), "_BBB_666_333_666_000_222_111_BBB_BBB_000_666_");
        assert!(crate::ctc::find_blank_runs(&path, 2).is_empty());
        assert_eq!(crate::ctc::collapse(&path).text, "B636021BB06");

        let wide = StripLayout {
            gap_px: 8,
            margin_px: 16,
        };
        let labels = frame_labels("B636021BB06", &a, wide, 32, 8).unwrap();
        assert_eq!(labels.len(), 55);
        let path = crate::ctc::Path::new(a.clone(), labels).unwrap();
        assert_eq!(path.to_string(), "_BBB__666__333__666__000__222__111__BBB__BBB__000__666_");
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = CorruptionSpec {
            dot_dropout: 1.5,
            ..CorruptionSpec::none()
        };
        assert!(bad.validate().is_err());
        let bad = CorruptionSpec {
            occlusion_bands: (3, 1),
            ..CorruptionSpec::none()
        };
        assert!(bad.validate().is_err());
    }
}
