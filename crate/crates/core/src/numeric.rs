//! Shared numeric primitives: dense tensors, categorical distributions, the
//! recognition alphabet, entropy, softmax and the differentiable
//! binarization sigmoid.

use std::fmt;

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) == 1` for a [`Distribution`].
pub const DIST_SUM_TOL: f64 = 1e-9;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite tensor value at {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Categorical distribution over `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_probs(&probs, DIST_SUM_TOL)?;
        Ok(Self { probs })
    }

    /// Accepts rows whose sum is within `tol` of one. Rows outside the
    /// stricter [`DIST_SUM_TOL`] are renormalized; others are kept bit-exact.
    pub fn normalized(mut probs: Vec<f64>, tol: f64) -> Result<Self> {
        check_probs(&probs, tol)?;
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > DIST_SUM_TOL {
            probs.iter_mut().for_each(|p| *p /= s);
        }
        Ok(Self { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn one_hot(classes: usize, index: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn entropy(&self) -> f64 {
        entropy_unchecked(&self.probs)
    }
}

fn check_probs(probs: &[f64], tol: f64) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::contract("distribution has no classes"));
    }
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::contract(format!("probability {p} at class {i}")));
        }
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::contract(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats, `0 * ln 0 = 0`.
pub fn entropy(d: &Distribution) -> f64 {
    d.entropy()
}

/// Entropy of a raw probability vector, validated first.
pub fn entropy_of(probs: &[f64]) -> Result<f64> {
    check_probs(probs, DIST_SUM_TOL)?;
    Ok(entropy_unchecked(probs))
}

pub(crate) fn entropy_unchecked(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Distribution> {
    if logits.is_empty() {
        return Err(Error::contract("softmax of empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("softmax of non-finite logits"));
    }
    let mut probs = vec![0.0; logits.len()];
    softmax_into(logits, &mut probs);
    Ok(Distribution { probs })
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Differentiable binarization of a single probability/threshold pair:
/// `1 / (1 + exp(-k (p - t)))`.
pub fn db_binarize_scalar(p: f64, t: f64, k: f64) -> Result<f64> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::contract(format!("gain factor must be > 0, got {k}")));
    }
    Ok(sigmoid(k * (p - t)))
}

/// Elementwise differentiable binarization of a probability map against a
/// threshold map of the same shape.
pub fn db_binarize(prob: &Tensor, thresh: &Tensor, k: f64) -> Result<Tensor> {
    if prob.shape() != thresh.shape() {
        return Err(Error::Shape(format!(
            "probability map {:?} vs threshold map {:?}",
            prob.shape(),
            thresh.shape()
        )));
    }
    let data = prob
        .data()
        .iter()
        .zip(thresh.data())
        .map(|(&p, &t)| db_binarize_scalar(p, t, k))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(prob.shape().to_vec(), data)
}

/// Blank is rendered as `_` in paths and lattice dumps.
pub const BLANK_CHAR: char = '_';

/// Ordered recognition symbols; the CTC blank is the extra last class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub const DIGITS_LETTERS: &'static str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

    pub fn new(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::contract("alphabet is empty"));
        }
        for (i, &c) in symbols.iter().enumerate() {
            if c == BLANK_CHAR || c.is_whitespace() || c.is_control() {
                return Err(Error::contract(format!("reserved alphabet symbol {c:?}")));
            }
            if symbols[..i].contains(&c) {
                return Err(Error::contract(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::new(s.chars().collect())
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    /// Total class count including the blank.
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// Symbol for a class index; the blank maps to `_`.
    pub fn symbol(&self, class: usize) -> Option<char> {
        if class == self.blank_index() {
            Some(BLANK_CHAR)
        } else {
            self.symbols.get(class).copied()
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.index_of(c).is_some()
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::parse(Self::DIGITS_LETTERS).expect("built-in alphabet is valid")
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.symbols.iter().try_for_each(|c| write!(f, "{c}"))
    }
}
