//! Binaries as graphs of graphs.
//!
//! A [`Gog`] is a directed function-call graph whose nodes are attributed
//! control-flow graphs ([`Cfg`]). Every basic block carries a fixed-length
//! vector of instruction statistics ([`BasicBlockFeatures`]).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Number of attributes per basic block.
pub const NUM_FEATURES: usize = 12;

/// Attribute slots, in file order.
pub mod feature {
    pub const TOTAL: usize = 0;
    pub const ARITHMETIC: usize = 1;
    pub const LOGIC: usize = 2;
    pub const TRANSFER: usize = 3;
    pub const CALL: usize = 4;
    pub const DATA_TRANSFER: usize = 5;
    pub const SSA: usize = 6;
    pub const COMPARE: usize = 7;
    pub const POINTER: usize = 8;
    pub const OTHER: usize = 9;
    pub const CONSTANTS: usize = 10;
    pub const STRINGS: usize = 11;

    /// The per-category instruction counts bounded above by [`TOTAL`].
    pub const INSTRUCTION_CATEGORIES: std::ops::RangeInclusive<usize> = ARITHMETIC..=OTHER;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GogError {
    #[error("cannot split: {0}")]
    CannotSplit(String),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
}

/// Instruction statistics of one basic block.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlockFeatures(pub Vec<f64>);

impl BasicBlockFeatures {
    pub fn zeros() -> Self {
        Self(vec![0.0; NUM_FEATURES])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    fn violations(&self, at: &str, out: &mut Vec<String>) {
        if self.0.len() != NUM_FEATURES {
            out.push(format!(
                "{at}: expected {NUM_FEATURES} features, found {}",
                self.0.len()
            ));
            return;
        }
        for (i, &v) in self.0.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                out.push(format!("{at} feature {i}: negative or non-finite value {v}"));
            }
        }
        let total = self.0[feature::TOTAL];
        for i in feature::INSTRUCTION_CATEGORIES {
            if self.0[i] > total {
                out.push(format!(
                    "{at}: total instructions {total} below category feature {i} ({})",
                    self.0[i]
                ));
            }
        }
    }
}

impl From<[f64; NUM_FEATURES]> for BasicBlockFeatures {
    fn from(v: [f64; NUM_FEATURES]) -> Self {
        Self(v.to_vec())
    }
}

/// Control-flow graph of one function. Block ids are indices into `blocks`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cfg {
    pub name: Option<String>,
    pub is_thunk: bool,
    pub blocks: Vec<BasicBlockFeatures>,
    pub edges: Vec<(usize, usize)>,
}

impl Cfg {
    pub fn new(name: Option<String>, blocks: Vec<BasicBlockFeatures>, edges: Vec<(usize, usize)>) -> Self {
        Self {
            name,
            is_thunk: false,
            blocks,
            edges,
        }
    }

    pub fn thunk(name: Option<String>) -> Self {
        Self {
            name,
            is_thunk: true,
            blocks: Vec::new(),
            edges: Vec::new(),
        }
    }

    /// A body-less declaration: exactly one block whose attributes are all zero.
    pub fn is_declaration(&self) -> bool {
        self.blocks.len() == 1 && self.blocks[0].is_all_zero()
    }
}

/// One binary: a call graph over attributed CFGs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gog {
    pub package: String,
    pub binary_name: String,
    pub arch: String,
    pub functions: Vec<Cfg>,
    pub call_edges: Vec<(usize, usize)>,
}

impl Gog {
    pub fn new(package: impl Into<String>, binary_name: impl Into<String>, arch: impl Into<String>) -> Self {
        Self {
            package: package.into(),
            binary_name: binary_name.into(),
            arch: arch.into(),
            functions: Vec::new(),
            call_edges: Vec::new(),
        }
    }

    /// `(package, binary_name, arch)`, unique within a corpus.
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.package, &self.binary_name, &self.arch)
    }

    pub fn num_blocks(&self) -> usize {
        self.functions.iter().map(|f| f.blocks.len()).sum()
    }

    /// Lists every broken invariant; an empty list means the binary is valid.
    pub fn validate(&self) -> Vec<String> {
        validate(self)
    }
}

/// Checks every [`Gog`], [`Cfg`] and [`BasicBlockFeatures`] invariant.
pub fn validate(gog: &Gog) -> Vec<String> {
    let mut out = Vec::new();
    for (fi, f) in gog.functions.iter().enumerate() {
        if f.blocks.is_empty() && !f.is_thunk {
            out.push(format!("function {fi}: no blocks but not marked as thunk"));
        }
        for (bi, b) in f.blocks.iter().enumerate() {
            b.violations(&format!("function {fi} block {bi}"), &mut out);
        }
        check_edges(&f.edges, f.blocks.len(), &mut out, |s, d, what| {
            format!("function {fi} edge {s}→{d}: {what}")
        }, ("source", "destination"));
    }
    check_edges(&gog.call_edges, gog.functions.len(), &mut out, |s, d, what| {
        format!("call edge {s}→{d}: {what}")
    }, ("caller", "callee"));
    out
}

fn check_edges(
    edges: &[(usize, usize)],
    n: usize,
    out: &mut Vec<String>,
    describe: impl Fn(usize, usize, &str) -> String,
    (src_role, dst_role): (&str, &str),
) {
    let mut seen = HashSet::new();
    for &(s, d) in edges {
        if s >= n {
            out.push(describe(s, d, &format!("{src_role} out of range")));
        }
        if d >= n {
            out.push(describe(s, d, &format!("{dst_role} out of range")));
        }
        if !seen.insert((s, d)) {
            out.push(describe(s, d, "duplicate"));
        }
    }
}

/// A collection of binaries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub binaries: Vec<Gog>,
    pub provenance: String,
}

impl Corpus {
    pub fn new(binaries: Vec<Gog>, provenance: impl Into<String>) -> Self {
        Self {
            binaries,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.binaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binaries.is_empty()
    }

    /// Distinct package tags, sorted.
    pub fn packages(&self) -> BTreeSet<&str> {
        self.binaries.iter().map(|b| b.package.as_str()).collect()
    }

    /// Per-binary violations (prefixed with the binary's key) plus duplicate keys.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for g in &self.binaries {
            let (p, n, a) = g.key();
            if !seen.insert(g.key()) {
                out.push(format!("{p}/{n}/{a}: duplicate (package, binary, arch)"));
            }
            out.extend(g.validate().into_iter().map(|v| format!("{p}/{n}/{a}: {v}")));
        }
        out
    }
}

/// Splits a corpus so that each package lands entirely on one side.
///
/// Packages are sorted, shuffled with `seed`, and the train side takes the
/// longest prefix whose binary count stays within `train_fraction` of the total.
pub fn split_by_package(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), GogError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GogError::Fraction(train_fraction));
    }
    let mut by_package: BTreeMap<&str, usize> = BTreeMap::new();
    for b in &corpus.binaries {
        *by_package.entry(&b.package).or_default() += 1;
    }
    if by_package.len() < 2 {
        return Err(GogError::CannotSplit(format!(
            "need at least 2 packages, found {}",
            by_package.len()
        )));
    }
    let mut order: Vec<(&str, usize)> = by_package.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let budget = train_fraction * corpus.len() as f64 + 1e-9;
    let mut taken = 0usize;
    let mut train_packages = HashSet::new();
    for (pkg, count) in order {
        if (taken + count) as f64 > budget {
            break;
        }
        taken += count;
        train_packages.insert(pkg);
    }

    let (train, test): (Vec<Gog>, Vec<Gog>) = corpus
        .binaries
        .iter()
        .cloned()
        .partition(|b| train_packages.contains(b.package.as_str()));
    let note = |side: &str| format!("{} [{side} split, fraction {train_fraction}, seed {seed}]", corpus.provenance);
    Ok((Corpus::new(train, note("train")), Corpus::new(test, note("test"))))
}
