//! Metrics, the 2x2 ablation runner and the entropy-vs-error report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::ctc::{decode, DecodeOptions, ProbLattice, ProvenanceCounts};
use crate::error::{Error, Result};
use crate::model::{classify_strip, probabilities, strip_windows, ModelParams, DEFAULT_WINDOW};
use crate::synthgen::FRAME_STRIDE;
use crate::numeric::Tensor;
use crate::rules::EncodingRules;
use crate::tta::{adapt_batch, AdaptConfig, AdaptMode, AdaptState, BatchRecord, DEFAULT_TTA_BATCH};

/// Levenshtein distance over Unicode scalar values with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn exact_match_accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], gts: &[T]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// A test strip with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub label: String,
    /// `1 x H x W`
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub index: usize,
    pub gt: String,
    pub prediction: String,
    pub edit_distance: usize,
    pub mean_entropy: f64,
    pub provenance: ProvenanceCounts,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.gt == self.prediction
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub exact_match_accuracy: f64,
    pub mean_edit_distance: f64,
    pub records: Vec<SampleRecord>,
    /// Adaptation log for cells that ran TTA.
    pub trajectory: Option<Vec<BatchRecord>>,
}

impl EvalReport {
    pub fn from_records(method: impl Into<String>, records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("evaluation produced no records".into()));
        }
        let n = records.len() as f64;
        let hits = records.iter().filter(|r| r.correct()).count();
        let dist: usize = records.iter().map(|r| r.edit_distance).sum();
        Ok(Self {
            method: method.into(),
            exact_match_accuracy: hits as f64 / n,
            mean_edit_distance: dist as f64 / n,
            records,
            trajectory: None,
        })
    }

    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index",
            "gt",
            "prediction",
            "edit_distance",
            "mean_entropy",
            "normal",
            "blank_repaired",
            "rule_corrected",
        ])?;
        for r in &self.records {
            w.write_record([
                r.index.to_string(),
                r.gt.clone(),
                r.prediction.clone(),
                r.edit_distance.to_string(),
                format!("{:.9}", r.mean_entropy),
                r.provenance.normal.to_string(),
                r.provenance.blank_repaired.to_string(),
                r.provenance.rule_corrected.to_string(),
            ])?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// How TTA-cell predictions are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaProtocol {
    /// Each batch is scored with the model as it was when the batch arrived,
    /// before that batch's update.
    #[default]
    Online,
    /// The whole stream is adapted first, then every batch is re-scored with
    /// the final parameters (still on batch statistics).
    PostHoc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub window: usize,
    pub stride: usize,
    /// Decode options for cells with the prior enabled.
    pub prior: DecodeOptions,
    pub adapt: AdaptConfig,
    /// Minimum frames per adaptation batch; whole strips are grouped until
    /// this is reached.
    pub tta_batch: usize,
    pub protocol: TtaProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: FRAME_STRIDE,
            prior: DecodeOptions::default(),
            adapt: AdaptConfig::default(),
            tta_batch: DEFAULT_TTA_BATCH,
            protocol: TtaProtocol::Online,
        }
    }
}

fn check_alphabet(params: &ModelParams, samples: &[EvalSample], rules: &EncodingRules) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("no evaluation samples".into()));
    }
    for s in samples {
        if let Some(c) = s.label.chars().find(|&c| !params.alphabet.contains(c)) {
            return Err(Error::AlphabetMismatch(format!(
                "label {:?} uses {c:?}, which the checkpoint alphabet {} lacks",
                s.label, params.alphabet
            )));
        }
    }
    for class in rules.classes() {
        if !params.alphabet.symbols().iter().any(|&c| class.matches(c)) {
            return Err(Error::AlphabetMismatch(format!(
                "no checkpoint symbol satisfies rule class {class}"
            )));
        }
    }
    Ok(())
}

/// Lattices under frozen running statistics.
pub fn frozen_lattices(params: &ModelParams, samples: &[EvalSample], cfg: &EvalConfig) -> Result<Vec<ProbLattice>> {
    samples
        .par_iter()
        .map(|s| classify_strip(params, &s.image, cfg.window, cfg.stride))
        .collect()
}

/// Consecutive strip groups holding at least `min_frames` windows each; a
/// short tail is merged into the previous group.
fn stream_groups(frame_counts: &[usize], min_frames: usize) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    let mut acc = 0;
    for (i, &n) in frame_counts.iter().enumerate() {
        acc += n;
        if acc >= min_frames.max(2) {
            groups.push(start..i + 1);
            start = i + 1;
            acc = 0;
        }
    }
    if start < frame_counts.len() {
        match groups.last_mut() {
            Some(last) => last.end = frame_counts.len(),
            None => groups.push(start..frame_counts.len()),
        }
    }
    groups
}

fn split_lattices(params: &ModelParams, logits: &Tensor, counts: &[usize]) -> Result<Vec<ProbLattice>> {
    let mut probs = probabilities(logits).into_iter();
    counts
        .iter()
        .map(|&t| ProbLattice::new(params.alphabet.clone(), probs.by_ref().take(t).collect()))
        .collect()
}

/// Lattices from a fresh copy of `params` adapted over the sample stream in
/// order. Returns the lattices and the adaptation log.
pub fn adapted_lattices(
    params: &ModelParams,
    samples: &[EvalSample],
    cfg: &EvalConfig,
) -> Result<(Vec<ProbLattice>, Vec<BatchRecord>)> {
    let windows: Vec<Tensor> = samples
        .par_iter()
        .map(|s| strip_windows(&s.image, cfg.window, cfg.stride))
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = windows.iter().map(|w| w.shape()[0]).collect();
    let groups = stream_groups(&counts, cfg.tta_batch);
    let stack = |g: &std::ops::Range<usize>| -> Result<Tensor> {
        let n: usize = counts[g.clone()].iter().sum();
        let mut data = Vec::with_capacity(n * cfg.window * cfg.window);
        for w in &windows[g.clone()] {
            data.extend_from_slice(w.data());
        }
        Tensor::new(vec![n, 1, cfg.window, cfg.window], data)
    };

    let mut model = params.clone();
    let mut state = AdaptState::new(&model, &cfg.adapt);
    let mut lattices = Vec::with_capacity(samples.len());
    let mut batches = Vec::with_capacity(groups.len());
    for g in &groups {
        let batch = stack(g)?;
        if cfg.adapt.mode == AdaptMode::Episodic {
            crate::tta::reset(&mut model, &mut state);
        }
        let out = adapt_batch(&mut model, &mut state, &batch, &cfg.adapt)?;
        if cfg.protocol == TtaProtocol::Online {
            lattices.extend(split_lattices(&model, &out.logits, &counts[g.clone()])?);
        } else {
            batches.push(batch);
        }
    }
    if cfg.protocol == TtaProtocol::PostHoc {
        for (g, batch) in groups.iter().zip(&batches) {
            let (logits, _) = crate::model::forward(&model, batch, crate::model::StatMode::BatchStats)?;
            lattices.extend(split_lattices(&model, &logits, &counts[g.clone()])?);
        }
    }
    Ok((lattices, state.log().to_vec()))
}

/// Decodes and scores precomputed lattices.
pub fn score(
    method: &str,
    lattices: &[ProbLattice],
    samples: &[EvalSample],
    rules: &EncodingRules,
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    if lattices.len() != samples.len() {
        return Err(Error::Shape("one lattice per sample is required".into()));
    }
    let records = lattices
        .par_iter()
        .zip(samples)
        .enumerate()
        .map(|(index, (lat, s))| {
            let result = decode(lat, Some(rules), opts)?;
            Ok(SampleRecord {
                index,
                gt: s.label.clone(),
                edit_distance: edit_distance(&result.text, &s.label),
                prediction: result.text.clone(),
                mean_entropy: lat.mean_entropy(),
                provenance: result.provenance_counts(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(method, records)
}

/// Which of the four ablation cells to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub tta: bool,
    /// Blank-run repair plus rule correction.
    pub prior: bool,
}

impl Cell {
    pub const GRID: [Cell; 4] = [
        Cell { tta: false, prior: false },
        Cell { tta: false, prior: true },
        Cell { tta: true, prior: false },
        Cell { tta: true, prior: true },
    ];

    pub fn name(self) -> &'static str {
        match (self.tta, self.prior) {
            (false, false) => "baseline",
            (false, true) => "prior",
            (true, false) => "tta",
            (true, true) => "tta+prior",
        }
    }
}

/// Evaluates one cell.
pub fn evaluate(
    params: &ModelParams,
    samples: &[EvalSample],
    rules: &EncodingRules,
    cell: Cell,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    Ok(run_cells(params, samples, rules, &[cell], cfg)?.remove(0))
}

/// Runs the 2x2 grid: baseline, prior, tta, tta+prior. Every cell sees the
/// samples in the same order and TTA cells adapt their own copy of the model.
pub fn run_ablation(
    params: &ModelParams,
    samples: &[EvalSample],
    rules: &EncodingRules,
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    run_cells(params, samples, rules, &Cell::GRID, cfg)
}

fn run_cells(
    params: &ModelParams,
    samples: &[EvalSample],
    rules: &EncodingRules,
    cells: &[Cell],
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    check_alphabet(params, samples, rules)?;
    // the prior only acts after the lattice, so both cells of a row share it
    let frozen = if cells.iter().any(|c| !c.tta) {
        Some(frozen_lattices(params, samples, cfg)?)
    } else {
        None
    };
    let adapted = if cells.iter().any(|c| c.tta) {
        Some(adapted_lattices(params, samples, cfg)?)
    } else {
        None
    };
    cells
        .iter()
        .map(|&cell| {
            let opts = if cell.prior { cfg.prior } else { DecodeOptions::plain() };
            if cell.tta {
                let (lats, log) = adapted.as_ref().expect("computed above");
                let mut report = score(cell.name(), lats, samples, rules, &opts)?;
                report.trajectory = Some(log.clone());
                Ok(report)
            } else {
                score(cell.name(), frozen.as_ref().expect("computed above"), samples, rules, &opts)
            }
        })
        .collect()
}

/// Summary CSV: `method,exact_match_accuracy,mean_edit_distance,samples`.
pub fn summary_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "exact_match_accuracy", "mean_edit_distance", "samples"])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            format!("{:.6}", r.exact_match_accuracy),
            format!("{:.6}", r.mean_edit_distance),
            r.records.len().to_string(),
        ])?;
    }
    finish_csv(w)
}

pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<12} {:>10} {:>14} {:>8}\n", "method", "accuracy", "edit_distance", "samples");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12} {:>10.4} {:>14.4} {:>8}",
            r.method,
            r.exact_match_accuracy,
            r.mean_edit_distance,
            r.records.len()
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub error_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyErrorReport {
    pub bins: Vec<EntropyBin>,
    /// Spearman correlation between entropy and the error indicator; 0 when
    /// either side is constant.
    pub rank_correlation: f64,
}

impl EntropyErrorReport {
    pub fn lowest_bin(&self) -> &EntropyBin {
        self.bins.iter().find(|b| b.count > 0).expect("at least one sample")
    }

    pub fn highest_bin(&self) -> &EntropyBin {
        self.bins.iter().rev().find(|b| b.count > 0).expect("at least one sample")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for b in &self.bins {
            w.serialize(b)?;
        }
        finish_csv(w)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>22} {:>7} {:>10}\n", "entropy", "count", "error_rate");
        for b in &self.bins {
            let rate = b.error_rate.map_or("-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(out, "[{:>9.5}, {:>9.5}] {:>7} {:>10}", b.lo, b.hi, b.count, rate);
        }
        let _ = writeln!(out, "rank correlation: {:.4}", self.rank_correlation);
        out
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Equal-width entropy bins over the observed range with per-bin exact-match
/// error rates.
pub fn entropy_error_report(records: &[SampleRecord], bins: usize) -> Result<EntropyErrorReport> {
    if bins == 0 {
        return Err(Error::contract("at least one bin is required"));
    }
    if records.len() < bins {
        return Err(Error::Empty(format!("{} samples for {bins} bins", records.len())));
    }
    let h: Vec<f64> = records.iter().map(|r| r.mean_entropy).collect();
    let err: Vec<f64> = records.iter().map(|r| f64::from(u8::from(!r.correct()))).collect();
    let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut errors = vec![0usize; bins];
    for (&e, &wrong) in h.iter().zip(&err) {
        let k = if width > 0.0 {
            (((e - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1;
        errors[k] += wrong as usize;
    }
    let bins = (0..bins)
        .map(|k| EntropyBin {
            lo: lo + k as f64 * width,
            hi: if k + 1 == bins { hi } else { lo + (k + 1) as f64 * width },
            count: counts[k],
            error_rate: (counts[k] > 0).then(|| errors[k] as f64 / counts[k] as f64),
        })
        .collect();
    Ok(EntropyErrorReport {
        bins,
        rank_correlation: spearman(&h, &err),
    })
}
