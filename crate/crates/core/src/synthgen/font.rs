use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::Alphabet;

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 7;

// Rows top to bottom, leftmost dot in the high bit.
const GLYPHS: &[(char, [&str; 7])] = &[
    ('0', ["01110", "10001", "10011", "10101", "11001", "10001", "01110"]),
    ('1', ["00100", "01100", "00100", "00100", "00100", "00100", "01110"]),
    ('2', ["01110", "10001", "00001", "00010", "00100", "01000", "11111"]),
    ('3', ["11111", "00010", "00100", "00010", "00001", "10001", "01110"]),
    ('4', ["00010", "00110", "01010", "10010", "11111", "00010", "00010"]),
    ('5', ["11111", "10000", "11110", "00001", "00001", "10001", "01110"]),
    ('6', ["00110", "01000", "10000", "11110", "10001", "10001", "01110"]),
    ('7', ["11111", "00001", "00010", "00100", "01000", "01000", "01000"]),
    ('8', ["01110", "10001", "10001", "01110", "10001", "10001", "01110"]),
    ('9', ["01110", "10001", "10001", "01111", "00001", "00010", "01100"]),
    ('A', ["01110", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('B', ["11110", "10001", "10001", "11110", "10001", "10001", "11110"]),
    ('C', ["01110", "10001", "10000", "10000", "10000", "10001", "01110"]),
    ('D', ["11100", "10010", "10001", "10001", "10001", "10010", "11100"]),
    ('E', ["11111", "10000", "10000", "11110", "10000", "10000", "11111"]),
    ('F', ["11111", "10000", "10000", "11110", "10000", "10000", "10000"]),
    ('G', ["01110", "10001", "10000", "10111", "10001", "10001", "01111"]),
    ('H', ["10001", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('I', ["01110", "00100", "00100", "00100", "00100", "00100", "01110"]),
    ('J', ["00111", "00010", "00010", "00010", "00010", "10010", "01100"]),
    ('K', ["10001", "10010", "10100", "11000", "10100", "10010", "10001"]),
    ('L', ["10000", "10000", "10000", "10000", "10000", "10000", "11111"]),
    ('M', ["10001", "11011", "10101", "10101", "10001", "10001", "10001"]),
    ('N', ["10001", "10001", "11001", "10101", "10011", "10001", "10001"]),
    ('O', ["01110", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('P', ["11110", "10001", "10001", "11110", "10000", "10000", "10000"]),
    ('Q', ["01110", "10001", "10001", "10001", "10101", "10010", "01101"]),
    ('R', ["11110", "10001", "10001", "11110", "10100", "10010", "10001"]),
    ('S', ["01111", "10000", "10000", "01110", "00001", "00001", "11110"]),
    ('T', ["11111", "00100", "00100", "00100", "00100", "00100", "00100"]),
    ('U', ["10001", "10001", "10001", "10001", "10001", "10001", "01110"]),
    ('V', ["10001", "10001", "10001", "10001", "10001", "01010", "00100"]),
    ('W', ["10001", "10001", "10001", "10101", "10101", "10101", "01010"]),
    ('X', ["10001", "10001", "01010", "00100", "01010", "10001", "10001"]),
    ('Y', ["10001", "10001", "10001", "01010", "00100", "00100", "00100"]),
    ('Z', ["11111", "00001", "00010", "00100", "01000", "10000", "11111"]),
    ('-', ["00000", "00000", "00000", "11111", "00000", "00000", "00000"]),
];

/// 5x7 dot-matrix bitmaps, one `u8` per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphFont {
    glyphs: HashMap<char, [u8; GLYPH_ROWS]>,
}

impl GlyphFont {
    /// Built-in font restricted to `alphabet`; fails if a symbol has no glyph.
    pub fn for_alphabet(alphabet: &Alphabet) -> Result<Self> {
        let all = Self::builtin();
        let mut glyphs = HashMap::new();
        for &c in alphabet.symbols() {
            let g = all.glyphs.get(&c).ok_or(Error::UnknownSymbol(c))?;
            glyphs.insert(c, *g);
        }
        Ok(Self { glyphs })
    }

    pub fn builtin() -> Self {
        let glyphs = GLYPHS
            .iter()
            .map(|(c, rows)| {
                let mut bits = [0u8; GLYPH_ROWS];
                for (b, r) in bits.iter_mut().zip(rows) {
                    *b = u8::from_str_radix(r, 2).expect("font rows are binary");
                }
                (*c, bits)
            })
            .collect();
        Self { glyphs }
    }

    pub fn glyph(&self, c: char) -> Option<&[u8; GLYPH_ROWS]> {
        self.glyphs.get(&c)
    }

    pub fn symbols(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }

    /// Whether the dot at `(row, col)` is lit.
    pub fn dot(bits: &[u8; GLYPH_ROWS], row: usize, col: usize) -> bool {
        bits[row] >> (GLYPH_COLS - 1 - col) & 1 == 1
    }
}
