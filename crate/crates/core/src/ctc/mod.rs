//! Greedy CTC decoding with blank-run repair.
//!
//! A decode goes `greedy_path -> repair_blanks -> collapse -> rules::correct`,
//! where the middle and last stages are optional. Repair works on the raw
//! per-timestep path: a run of at least `min_run` consecutive blanks that
//! does not touch either end of the strip is taken to hide one damaged
//! character, which is recovered from the strongest non-blank probability
//! inside the run.

pub(crate) mod lattice;

use serde::Serialize;

pub use lattice::{LatticeFormat, ProbLattice, LOAD_SUM_TOL};
pub(crate) use lattice::ByteReader;

use crate::error::{Error, Result};
use crate::numeric::Alphabet;
use crate::rules::{self, EncodingRules, RankedCandidates};

pub const DEFAULT_MIN_RUN: usize = 3;

/// Per-timestep label sequence (blanks included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    alphabet: Alphabet,
    labels: Vec<usize>,
    repaired: Vec<bool>,
}

impl Path {
    pub fn new(alphabet: Alphabet, labels: Vec<usize>) -> Result<Self> {
        let c = alphabet.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Range { index: bad, len: c });
        }
        let repaired = vec![false; labels.len()];
        Ok(Self {
            alphabet,
            labels,
            repaired,
        })
    }

    /// Parses a path written with `_` for blank, e.g. `B_63_6`.
    pub fn parse(alphabet: &Alphabet, s: &str) -> Result<Self> {
        let labels = s
            .chars()
            .map(|ch| match ch {
                crate::numeric::BLANK_CHAR => Ok(alphabet.blank_index()),
                c => alphabet.index_of(c).ok_or(Error::UnknownSymbol(c)),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(alphabet.clone(), labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn is_blank(&self, t: usize) -> bool {
        self.labels[t] == self.alphabet.blank_index()
    }

    /// Timesteps whose label was inserted by blank-run repair.
    pub fn repaired(&self) -> &[bool] {
        &self.repaired
    }
}

impl std::fmt::Display for Path {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &l in &self.labels {
            write!(f, "{}", self.alphabet.symbol(l).unwrap_or('?'))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Normal,
    BlankRepaired,
    RuleCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedChar {
    pub symbol: char,
    pub timestep: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DecodeResult {
    pub text: String,
    pub chars: Vec<DecodedChar>,
    /// Output positions the rule engine flagged but could not fix.
    pub unresolved: Vec<usize>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProvenanceCounts {
    pub normal: usize,
    pub blank_repaired: usize,
    pub rule_corrected: usize,
}

impl DecodeResult {
    pub fn from_chars(chars: Vec<DecodedChar>) -> Self {
        let text = chars.iter().map(|c| c.symbol).collect();
        Self {
            text,
            chars,
            ..Self::default()
        }
    }

    pub fn provenance_counts(&self) -> ProvenanceCounts {
        let mut counts = ProvenanceCounts::default();
        for c in &self.chars {
            match c.provenance {
                Provenance::Normal => counts.normal += 1,
                Provenance::BlankRepaired => counts.blank_repaired += 1,
                Provenance::RuleCorrected => counts.rule_corrected += 1,
            }
        }
        counts
    }

    pub(crate) fn rebuild_text(&mut self) {
        self.text = self.chars.iter().map(|c| c.symbol).collect();
    }
}

/// Per-timestep argmax; ties go to the lowest class index.
pub fn greedy_path(lattice: &ProbLattice) -> Path {
    let labels = lattice.rows().iter().map(|r| r.argmax()).collect();
    Path::new(lattice.alphabet().clone(), labels).expect("argmax is within class range")
}

/// Removes consecutive duplicates, then blanks.
///
/// Each emitted character records the first timestep of its run. A label
/// inserted by [`repair_blanks`] always forms its own run, so it can never
/// be merged into an identical neighbouring character.
pub fn collapse(path: &Path) -> DecodeResult {
    let blank = path.alphabet.blank_index();
    let mut chars = Vec::new();
    for (t, &label) in path.labels.iter().enumerate() {
        let new_run = t == 0
            || path.labels[t - 1] != label
            || path.repaired[t]
            || path.repaired[t - 1];
        if new_run && label != blank {
            chars.push(DecodedChar {
                symbol: path.alphabet.symbol(label).expect("label in range"),
                timestep: t,
                provenance: if path.repaired[t] {
                    Provenance::BlankRepaired
                } else {
                    Provenance::Normal
                },
            });
        }
    }
    DecodeResult::from_chars(chars)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlankRun {
    pub start: usize,
    pub len: usize,
}

impl BlankRun {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn touches_edge(&self, timesteps: usize) -> bool {
        self.start == 0 || self.end() == timesteps
    }
}

/// Maximal blank runs of length `>= min_run`, edge runs included.
pub fn find_blank_runs(path: &Path, min_run: usize) -> Vec<BlankRun> {
    let min_run = min_run.max(1);
    let mut runs = Vec::new();
    let mut t = 0;
    while t < path.len() {
        if path.is_blank(t) {
            let start = t;
            while t < path.len() && path.is_blank(t) {
                t += 1;
            }
            if t - start >= min_run {
                runs.push(BlankRun {
                    start,
                    len: t - start,
                });
            }
        } else {
            t += 1;
        }
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepairOptions {
    pub min_run: usize,
    /// Also repair runs touching the first or last timestep.
    pub repair_edges: bool,
}

impl Default for RepairOptions {
    fn default() -> Self {
        Self {
            min_run: DEFAULT_MIN_RUN,
            repair_edges: false,
        }
    }
}

/// Inserts one non-blank label into every qualifying blank run.
///
/// The replaced timestep is the one in the run whose best non-blank class has
/// the highest probability (earliest timestep on ties); its label becomes
/// that class.
pub fn repair_blanks(lattice: &ProbLattice, path: &Path, opts: RepairOptions) -> Result<Path> {
    if path.len() != lattice.timesteps() || path.alphabet != *lattice.alphabet() {
        return Err(Error::contract("path was not derived from this lattice"));
    }
    let blank = lattice.alphabet().blank_index();
    let mut out = path.clone();
    for run in find_blank_runs(path, opts.min_run) {
        if !opts.repair_edges && run.touches_edge(path.len()) {
            continue;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for t in run.start..run.end() {
            let (class, p) = best_non_blank(lattice.row(t).probs(), blank);
            if best.is_none_or(|(_, _, bp)| p > bp) {
                best = Some((t, class, p));
            }
        }
        if let Some((t, class, _)) = best {
            out.labels[t] = class;
            out.repaired[t] = true;
        }
    }
    Ok(out)
}

fn best_non_blank(probs: &[f64], blank: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (c, &p) in probs.iter().enumerate() {
        if c != blank && p > best.1 {
            best = (c, p);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub repair: RepairOptions,
    pub repair_enabled: bool,
    pub rules_enabled: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            repair: RepairOptions::default(),
            repair_enabled: true,
            rules_enabled: true,
        }
    }
}

impl DecodeOptions {
    pub fn plain() -> Self {
        Self {
            repair_enabled: false,
            rules_enabled: false,
            ..Self::default()
        }
    }
}

/// Full decode pipeline over one lattice.
pub fn decode(
    lattice: &ProbLattice,
    rules: Option<&EncodingRules>,
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    let mut path = greedy_path(lattice);
    if opts.repair_enabled {
        path = repair_blanks(lattice, &path, opts.repair)?;
    }
    let result = collapse(&path);
    match rules {
        Some(rules) if opts.rules_enabled => {
            let candidates = RankedCandidates::from_lattice(lattice, &result)?;
            rules::correct(&result, &candidates, rules)
        }
        _ => Ok(result),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Distribution;

    fn alpha() -> Alphabet {
        Alphabet::default()
    }

    /// Lattice whose argmax follows `path` with confidence `peak`.
    fn peaked(alphabet: &Alphabet, path: &str, peak: f64) -> ProbLattice {
        let p = Path::parse(alphabet, path).unwrap();
        let c = alphabet.classes();
        let rest = (1.0 - peak) / (c - 1) as f64;
        let rows = p
            .labels()
            .iter()
            .map(|&l| {
                let mut r = vec![rest; c];
                r[l] = peak;
                Distribution::normalized(r, 1e-9).unwrap()
            })
            .collect();
        ProbLattice::new(alphabet.clone(), rows).unwrap()
    }

    #[test]
    fn greedy_single_blank() {
        let a = alpha();
        let lat = ProbLattice::new(a.clone(), vec![Distribution::one_hot(37, 36)]).unwrap();
        assert_eq!(greedy_path(&lat).labels(), &[36]);
    }

    #[test]
    fn greedy_follows_constructed_lattice() {
        let a = alpha();
        let lat = peaked(&a, "B_63_6_0_21_B_B_06_", 0.8);
        assert_eq!(greedy_path(&lat).to_string(), "B_63_6_0_21_B_B_06_");
    }

    #[test]
    fn greedy_tie_takes_lower_class() {
        let a = Alphabet::parse("AB").unwrap();
        let lat = ProbLattice::from_flat(a, 1, &[0.0, 0.5, 0.5], 1e-12).unwrap();
        assert_eq!(greedy_path(&lat).labels(), &[1]);
    }

    #[test]
    fn collapse_examples() {
        let a = alpha();
        let p = Path::parse(&a, "B_63_6_0_21_B_B_06_").unwrap();
        let r = collapse(&p);
        assert_eq!(r.text, "B636021BB06");
        assert_eq!(r.chars[0].timestep, 0);
        assert_eq!(r.chars[1].timestep, 2);
        assert!(r.chars.iter().all(|c| c.provenance == Provenance::Normal));
        assert_eq!(collapse(&Path::parse(&a, "____").unwrap()).text, "");
        assert_eq!(collapse(&Path::parse(&a, "AA_A").unwrap()).text, "AA");
    }

    #[test]
    fn collapse_records_first_timestep_of_run() {
        let a = alpha();
        let r = collapse(&Path::parse(&a, "__777_11").unwrap());
        let ts: Vec<usize> = r.chars.iter().map(|c| c.timestep).collect();
        assert_eq!(r.text, "71");
        assert_eq!(ts, vec![2, 6]);
    }

    #[test]
    fn blank_runs() {
        let a = alpha();
        let p = Path::parse(&a, "AB___CD").unwrap();
        assert_eq!(find_blank_runs(&p, 3), vec![BlankRun { start: 2, len: 3 }]);
        let p = Path::parse(&a, "AB__CD").unwrap();
        assert!(find_blank_runs(&p, 3).is_empty());
        let p = Path::parse(&a, "___A____").unwrap();
        assert_eq!(
            find_blank_runs(&p, 3),
            vec![BlankRun { start: 0, len: 3 }, BlankRun { start: 4, len: 4 }]
        );
    }

    /// [B, _, _, _, 6] where '5' is the runner-up in the run, strongest at t=2.
    fn damaged_fixture(a: &Alphabet) -> ProbLattice {
        let c = a.classes();
        let blank = a.blank_index();
        let mut rows = Vec::new();
        let mut row = |top: usize, second: Option<(usize, f64)>| {
            let mut r = vec![0.0; c];
            let second_p = second.map_or(0.0, |s| s.1);
            r[top] = 1.0 - second_p - 0.01;
            if let Some((s, p)) = second {
                r[s] = p;
            }
            r[if top == 0 { 1 } else { 0 }] += 0.01;
            rows.push(Distribution::new(r).unwrap());
        };
        let five = a.index_of('5').unwrap();
        row(a.index_of('B').unwrap(), None);
        row(blank, Some((five, 0.20)));
        row(blank, Some((five, 0.35)));
        row(blank, Some((a.index_of('S').unwrap(), 0.10)));
        row(a.index_of('6').unwrap(), None);
        ProbLattice::new(a.clone(), rows).unwrap()
    }

    #[test]
    fn repair_inserts_strongest_non_blank() {
        let a = alpha();
        let lat = damaged_fixture(&a);
        let path = greedy_path(&lat);
        assert_eq!(path.to_string(), "B___6");
        let fixed = repair_blanks(&lat, &path, RepairOptions::default()).unwrap();
        assert_eq!(fixed.to_string(), "B_5_6");
        let r = collapse(&fixed);
        assert_eq!(r.text, "B56");
        assert_eq!(r.chars[1].provenance, Provenance::BlankRepaired);
        assert_eq!(r.chars[1].timestep, 2);
    }

    #[test]
    fn repair_without_runs_is_identity() {
        let a = alpha();
        let lat = peaked(&a, "A__B_C", 0.9);
        let path = greedy_path(&lat);
        assert_eq!(repair_blanks(&lat, &path, RepairOptions::default()).unwrap(), path);
    }

    #[test]
    fn repair_two_runs_two_insertions() {
        let a = alpha();
        let lat = peaked(&a, "A____B___C", 0.9);
        let path = greedy_path(&lat);
        let fixed = repair_blanks(&lat, &path, RepairOptions::default()).unwrap();
        assert_eq!(fixed.repaired().iter().filter(|&&r| r).count(), 2);
        assert_eq!(collapse(&fixed).text.len(), 5);
    }

    #[test]
    fn repair_skips_edges_unless_asked() {
        let a = alpha();
        let lat = peaked(&a, "___A___", 0.9);
        let path = greedy_path(&lat);
        assert_eq!(repair_blanks(&lat, &path, RepairOptions::default()).unwrap(), path);
        let opts = RepairOptions {
            repair_edges: true,
            ..RepairOptions::default()
        };
        let fixed = repair_blanks(&lat, &path, opts).unwrap();
        assert_eq!(collapse(&fixed).text.len(), 3);
    }

    #[test]
    fn repaired_label_is_not_merged_into_identical_neighbour() {
        let a = alpha();
        let c = a.classes();
        let one = a.index_of('1').unwrap();
        let mut data = Vec::new();
        for t in 0..5 {
            let mut r = vec![0.0; c];
            if t == 0 || t == 4 {
                r[one] = 1.0;
            } else {
                r[a.blank_index()] = 0.7;
                r[one] = if t == 1 { 0.3 } else { 0.1 };
                r[0] = 1.0 - r[a.blank_index()] - r[one];
            }
            data.extend(r);
        }
        let lat = ProbLattice::from_flat(a.clone(), 5, &data, 1e-12).unwrap();
        let fixed = repair_blanks(&lat, &greedy_path(&lat), RepairOptions::default()).unwrap();
        assert_eq!(fixed.to_string(), "11__1");
        assert_eq!(collapse(&fixed).text, "111");
    }

    #[test]
    fn decode_composition() {
        let a = alpha();
        let lat = peaked(&a, "B_63_6_0_21_B_B_06_", 0.6);
        let plain = decode(&lat, None, &DecodeOptions::plain()).unwrap();
        assert_eq!(plain, collapse(&greedy_path(&lat)));
        assert_eq!(plain.text, "B636021BB06");

        let lat = damaged_fixture(&a);
        let off = decode(&lat, None, &DecodeOptions::plain()).unwrap();
        let on = decode(
            &lat,
            None,
            &DecodeOptions {
                repair_enabled: true,
                rules_enabled: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(off.text, "B6");
        assert_eq!(on.text, "B56");
    }

    #[test]
    fn path_rejects_out_of_range_labels() {
        assert!(Path::new(Alphabet::parse("AB").unwrap(), vec![0, 3]).is_err());
        assert!(Path::parse(&alpha(), "a").is_err());
    }
}
