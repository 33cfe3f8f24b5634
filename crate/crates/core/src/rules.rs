//! Billet-number encoding rules: a fixed positional schema of letter, digit
//! and literal fields, used to validate decoded strings and to correct
//! class-violating characters from the ranked per-position candidates.
//!
//! Rules file format, one field per line:
//!
//! ```text
//! # name   class        length
//! company  LETTER       1
//! date     DIGIT        6
//! sep      LITERAL(-)   1
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::ctc::{DecodeResult, ProbLattice, Provenance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CharClass {
    Letter,
    Digit,
    Literal(char),
}

impl CharClass {
    pub fn matches(self, c: char) -> bool {
        match self {
            CharClass::Letter => c.is_ascii_alphabetic(),
            CharClass::Digit => c.is_ascii_digit(),
            CharClass::Literal(l) => c == l,
        }
    }

    fn parse(token: &str) -> Option<Self> {
        match token {
            "LETTER" => Some(CharClass::Letter),
            "DIGIT" => Some(CharClass::Digit),
            _ => {
                let inner = token.strip_prefix("LITERAL(")?.strip_suffix(')')?;
                let mut chars = inner.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Some(CharClass::Literal(c)),
                    _ => None,
                }
            }
        }
    }
}

impl fmt::Display for CharClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CharClass::Letter => f.write_str("LETTER"),
            CharClass::Digit => f.write_str("DIGIT"),
            CharClass::Literal(c) => write!(f, "LITERAL({c})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub class: CharClass,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingRules {
    fields: Vec<FieldSpec>,
}

/// The billet schema shipped with the crate: company letter, six-digit date,
/// two furnace letters, two-digit serial.
pub const BILLET_RULES: &str = include_str!("../assets/billet.rules");

impl EncodingRules {
    pub fn billet() -> Self {
        Self::parse(BILLET_RULES).expect("bundled rules parse")
    }

    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::contract("encoding rules need at least one field"));
        }
        if let Some(f) = fields.iter().find(|f| f.length == 0) {
            return Err(Error::contract(format!("field {:?} has zero length", f.name)));
        }
        Ok(Self { fields })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let parts: Vec<&str> = content.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `<name> <class> <length>`, got {content:?}"),
                });
            }
            let class = CharClass::parse(parts[1]).ok_or_else(|| Error::Parse {
                line,
                msg: format!("invalid class token {:?}", parts[1]),
            })?;
            let length = parts[2]
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("invalid length {:?}", parts[2]),
                })?;
            fields.push(FieldSpec {
                name: parts[0].to_string(),
                class,
                length,
            });
        }
        if fields.is_empty() {
            return Err(Error::Parse {
                line: text.lines().count().max(1),
                msg: "no fields defined".into(),
            });
        }
        Self::new(fields)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.fields
            .iter()
            .map(|f| format!("{} {} {}\n", f.name, f.class, f.length))
            .collect()
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn total_length(&self) -> usize {
        self.fields.iter().map(|f| f.length).sum()
    }

    pub fn position_class(&self, i: usize) -> Result<CharClass> {
        let mut offset = 0;
        for f in &self.fields {
            if i < offset + f.length {
                return Ok(f.class);
            }
            offset += f.length;
        }
        Err(Error::Range {
            index: i,
            len: offset,
        })
    }

    /// Expanded per-position classes.
    pub fn classes(&self) -> Vec<CharClass> {
        self.fields
            .iter()
            .flat_map(|f| std::iter::repeat_n(f.class, f.length))
            .collect()
    }

    pub fn validate(&self, text: &str) -> Vec<Violation> {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() != self.total_length() {
            return vec![Violation::Length {
                expected: self.total_length(),
                found: chars.len(),
            }];
        }
        self.classes()
            .into_iter()
            .zip(chars)
            .enumerate()
            .filter(|(_, (class, c))| !class.matches(*c))
            .map(|(position, (expected, found))| Violation::Class {
                position,
                expected,
                found,
            })
            .collect()
    }

    pub fn is_valid(&self, text: &str) -> bool {
        self.validate(text).is_empty()
    }
}

fn strip_comment(line: &str) -> &str {
    // `#` opens a comment at line start or after whitespace, so LITERAL(#)
    // stays usable.
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    Length {
        expected: usize,
        found: usize,
    },
    Class {
        position: usize,
        expected: CharClass,
        found: char,
    },
}

/// Per output position, non-blank symbols sorted by probability descending.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidates {
    positions: Vec<Vec<(char, f64)>>,
}

impl RankedCandidates {
    pub fn new(positions: Vec<Vec<(char, f64)>>) -> Result<Self> {
        for (i, list) in positions.iter().enumerate() {
            if list.windows(2).any(|w| w[1].1 > w[0].1) {
                return Err(Error::contract(format!("candidates at {i} not sorted")));
            }
            for (j, (c, _)) in list.iter().enumerate() {
                if list[..j].iter().any(|(d, _)| d == c) {
                    return Err(Error::contract(format!("duplicate candidate {c:?} at {i}")));
                }
                if *c == crate::numeric::BLANK_CHAR {
                    return Err(Error::contract("blank is not a candidate symbol"));
                }
            }
        }
        Ok(Self { positions })
    }

    /// Candidates for each decoded character, read from the lattice row at
    /// the character's source timestep.
    pub fn from_lattice(lattice: &ProbLattice, result: &DecodeResult) -> Result<Self> {
        let alphabet = lattice.alphabet();
        let positions = result
            .chars
            .iter()
            .map(|ch| {
                if ch.timestep >= lattice.timesteps() {
                    return Err(Error::Range {
                        index: ch.timestep,
                        len: lattice.timesteps(),
                    });
                }
                let probs = lattice.row(ch.timestep).probs();
                let mut list: Vec<(char, f64)> = alphabet
                    .symbols()
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| (s, probs[k]))
                    .collect();
                // stable sort keeps alphabet order on ties
                list.sort_by(|a, b| b.1.total_cmp(&a.1));
                Ok(list)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn at(&self, i: usize) -> &[(char, f64)] {
        &self.positions[i]
    }
}

/// Replaces each class-violating character with the most probable
/// class-valid candidate at that position.
///
/// Valid positions are never touched. Positions with no valid candidate are
/// left as they are and listed in `unresolved`. When the decoded length
/// differs from the schema length nothing is changed and a diagnostic is
/// recorded instead.
pub fn correct(
    result: &DecodeResult,
    candidates: &RankedCandidates,
    rules: &EncodingRules,
) -> Result<DecodeResult> {
    if candidates.len() < result.chars.len() {
        return Err(Error::contract(format!(
            "{} candidate lists for {} characters",
            candidates.len(),
            result.chars.len()
        )));
    }
    let mut out = result.clone();
    if out.chars.len() != rules.total_length() {
        let note = format!(
            "rule correction skipped: decoded length {} != schema length {}",
            out.chars.len(),
            rules.total_length()
        );
        if !out.diagnostics.contains(&note) {
            out.diagnostics.push(note);
        }
        return Ok(out);
    }
    for (i, (ch, class)) in out.chars.iter_mut().zip(rules.classes()).enumerate() {
        if class.matches(ch.symbol) {
            continue;
        }
        match candidates.at(i).iter().find(|(s, _)| class.matches(*s)) {
            Some(&(s, _)) => {
                ch.symbol = s;
                ch.provenance = Provenance::RuleCorrected;
            }
            None => {
                if !out.unresolved.contains(&i) {
                    out.unresolved.push(i);
                }
            }
        }
    }
    out.rebuild_text();
    Ok(out)
}
