//! Seeded generator of multi-architecture corpora.
//!
//! Every package owns a set of function prototypes (a CFG plus an
//! instruction-mix profile) and a call graph. Each architecture variant of
//! the package rescales block attributes by a per-architecture factor vector,
//! adds multiplicative noise, and randomly splits or merges blocks, both in
//! proportion to `arch_distortion`. Randomness is drawn from streams keyed by
//! `(seed, package)` and `(seed, package, arch)`, so adding an architecture
//! leaves the other variants byte-identical.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gog::{feature, BasicBlockFeatures, Cfg, Corpus, Gog, NUM_FEATURES};
use crate::ingest::{write_corpus_dir, IngestError};
use crate::json::{canonical_json, write_atomic};

pub const MANIFEST_FORMAT: &str = "cfg2vec-synth-manifest-v1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_packages: usize,
    /// Inclusive `[min, max]`.
    pub functions_per_binary: (usize, usize),
    pub archs: Vec<String>,
    /// Inclusive `[min, max]` blocks per prototype CFG.
    pub blocks_per_function: (usize, usize),
    pub edge_density: f64,
    pub arch_distortion: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_packages: 40,
            functions_per_binary: (10, 20),
            archs: vec!["amd64".into(), "armel".into(), "i386".into()],
            blocks_per_function: (3, 12),
            edge_density: 0.3,
            arch_distortion: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.n_packages == 0 {
            return fail("n_packages must be at least 1".into());
        }
        for (what, (lo, hi)) in [
            ("functions_per_binary", self.functions_per_binary),
            ("blocks_per_function", self.blocks_per_function),
        ] {
            if lo == 0 || lo > hi {
                return fail(format!("{what} range {lo}..={hi} is empty or starts at 0"));
            }
        }
        if self.archs.len() < 2 {
            return fail(format!("need at least 2 archs, got {}", self.archs.len()));
        }
        if self.archs.iter().collect::<BTreeSet<_>>().len() != self.archs.len() {
            return fail("arch tags must be distinct".into());
        }
        if self.archs.iter().any(|a| a.is_empty()) {
            return fail("arch tags must be non-empty".into());
        }
        if !(self.edge_density > 0.0 && self.edge_density <= 1.0) {
            return fail(format!("edge_density {} outside (0, 1]", self.edge_density));
        }
        if !(self.arch_distortion >= 0.0 && self.arch_distortion.is_finite()) {
            return fail(format!("arch_distortion {} must be finite and >= 0", self.arch_distortion));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let key = parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

const STREAM_PROTOTYPE: u64 = 1;
const STREAM_VARIANT: u64 = 2;
const STREAM_ARCH: u64 = 3;

/// Per-attribute scale factors of an architecture, each in `[0.7, 1.4]`.
/// The total-instruction slot is unused (it is re-derived from the categories).
pub fn arch_factors(seed: u64, arch: &str) -> [f64; NUM_FEATURES] {
    let mut rng = stream(seed, &[STREAM_ARCH, fnv1a(arch)]);
    let mut f = [1.0; NUM_FEATURES];
    for v in &mut f {
        *v = rng.random_range(0.7..=1.4);
    }
    f[feature::TOTAL] = 1.0;
    f
}

pub fn package_name(index: usize) -> String {
    format!("pkg{index:03}")
}

pub fn function_name(package: &str, index: usize) -> String {
    format!("fn_{package}_{index}")
}

struct Prototype {
    blocks: Vec<[f64; NUM_FEATURES]>,
    edges: Vec<(usize, usize)>,
}

struct PackagePrototype {
    name: String,
    functions: Vec<Prototype>,
    call_edges: Vec<(usize, usize)>,
}

fn with_total(mut b: [f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
    b[feature::TOTAL] = feature::INSTRUCTION_CATEGORIES.map(|i| b[i]).sum();
    b
}

fn dedup_edges(edges: &mut Vec<(usize, usize)>) {
    let mut seen = BTreeSet::new();
    edges.retain(|e| seen.insert(*e));
}

fn prototype_function(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Prototype {
    let n = rng.random_range(cfg.blocks_per_function.0..=cfg.blocks_per_function.1);
    // Instruction mix: cubed uniforms give a skewed, function-specific profile.
    let mut mix = [0.0; NUM_FEATURES];
    for i in feature::INSTRUCTION_CATEGORIES {
        mix[i] = rng.random::<f64>().powi(3);
    }
    let norm: f64 = mix.iter().sum::<f64>().max(1e-9);
    mix.iter_mut().for_each(|m| *m /= norm);
    let const_rate = rng.random_range(0.0..0.6);
    let string_rate = rng.random_range(0.0..0.2);

    let blocks = (0..n)
        .map(|_| {
            let size: f64 = rng.random_range(1.0..25.0);
            let mut b = [0.0; NUM_FEATURES];
            for i in feature::INSTRUCTION_CATEGORIES {
                b[i] = size * mix[i] * rng.random_range(0.5..1.5);
            }
            b[feature::CONSTANTS] = size * const_rate * rng.random_range(0.5..1.5);
            b[feature::STRINGS] = size * string_rate * rng.random_range(0.5..1.5);
            with_total(b)
        })
        .collect();

    let mut edges = Vec::new();
    for i in 0..n {
        let fallthrough = rng.random_bool(0.85);
        let jump = rng.random_bool(cfg.edge_density);
        let back = rng.random_bool(cfg.edge_density * 0.25);
        let jump_target = rng.random_range(0..n);
        let back_target = rng.random_range(0..=i);
        if fallthrough && i + 1 < n {
            edges.push((i, i + 1));
        }
        if jump && jump_target > i + 1 {
            edges.push((i, jump_target));
        }
        if back {
            edges.push((i, back_target));
        }
    }
    dedup_edges(&mut edges);
    Prototype { blocks, edges }
}

fn prototype_package(cfg: &SynthConfig, index: usize) -> PackagePrototype {
    let mut rng = stream(cfg.seed, &[STREAM_PROTOTYPE, index as u64]);
    let n = rng.random_range(cfg.functions_per_binary.0..=cfg.functions_per_binary.1);
    let functions = (0..n).map(|_| prototype_function(cfg, &mut rng)).collect();
    // Random DAG over function ids with a few back edges.
    let p_call = cfg.edge_density * 0.5;
    let mut call_edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let u: f64 = rng.random();
            let hit = if i < j { u < p_call } else { i != j && u < p_call * 0.1 };
            if hit {
                call_edges.push((i, j));
            }
        }
    }
    PackagePrototype {
        name: package_name(index),
        functions,
        call_edges,
    }
}

/// One architecture's rendition of a prototype CFG.
fn perturb(
    proto: &Prototype,
    factors: &[f64; NUM_FEATURES],
    distortion: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<BasicBlockFeatures>, Vec<(usize, usize)>) {
    let n = proto.blocks.len();
    let p = distortion.min(1.0);
    // Fixed number of draws per block keeps streams aligned across distortions.
    let draws: Vec<(f64, f64, f64)> = (0..n).map(|_| (rng.random(), rng.random(), rng.random_range(0.3..0.7))).collect();

    // Merge block i into i+1 only along a fallthrough edge.
    let has_edge = |s: usize, d: usize| proto.edges.contains(&(s, d));
    let merges_into_next = |i: usize| {
        let (u, v, _) = draws[i];
        u < p && v >= 0.5 && has_edge(i, i + 1)
    };
    let mut group = Vec::with_capacity(n);
    let mut current = 0usize;
    for i in 0..n {
        if i > 0 && !merges_into_next(i - 1) {
            current += 1;
        }
        group.push(current);
    }
    let n_groups = if n == 0 { 0 } else { current + 1 };

    let mut merged = vec![[0.0; NUM_FEATURES]; n_groups];
    let mut split_at: Vec<Option<f64>> = vec![None; n_groups];
    for i in 0..n {
        for (m, v) in merged[group[i]].iter_mut().zip(&proto.blocks[i]) {
            *m += v;
        }
        let (u, v, r) = draws[i];
        if u < p && v < 0.5 {
            split_at[group[i]] = Some(r);
        }
    }

    // head/tail block ids of each group after splitting
    let mut blocks = Vec::new();
    let mut head = vec![0; n_groups];
    let mut tail = vec![0; n_groups];
    let mut edges = Vec::new();
    for g in 0..n_groups {
        head[g] = blocks.len();
        match split_at[g] {
            Some(r) => {
                blocks.push(merged[g].map(|x| x * r));
                blocks.push(merged[g].map(|x| x * (1.0 - r)));
                edges.push((head[g], head[g] + 1));
            }
            None => blocks.push(merged[g]),
        }
        tail[g] = blocks.len() - 1;
    }
    for &(s, d) in &proto.edges {
        let (gs, gd) = (group[s], group[d]);
        if gs == gd && s != d {
            continue;
        }
        edges.push((tail[gs], head[gd]));
    }
    dedup_edges(&mut edges);

    let features = blocks
        .into_iter()
        .map(|b| {
            let mut out = [0.0; NUM_FEATURES];
            for i in 0..NUM_FEATURES {
                let z: f64 = rng.sample(StandardNormal);
                out[i] = b[i] * factors[i] * (1.0 + distortion * z).max(0.0);
            }
            BasicBlockFeatures(with_total(out).to_vec())
        })
        .collect();
    (features, edges)
}

fn render(cfg: &SynthConfig, proto: &PackagePrototype, index: usize, arch: &str) -> Gog {
    let factors = arch_factors(cfg.seed, arch);
    let mut rng = stream(cfg.seed, &[STREAM_VARIANT, index as u64, fnv1a(arch)]);
    let mut gog = Gog::new(&proto.name, &proto.name, arch);
    gog.functions = proto
        .functions
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let (blocks, edges) = perturb(f, &factors, cfg.arch_distortion, &mut rng);
            Cfg::new(Some(function_name(&proto.name, fi)), blocks, edges)
        })
        .collect();
    gog.call_edges = proto.call_edges.clone();
    gog
}

/// Generates one binary per (package, arch), packages in index order and
/// archs in config order.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let per_package: Vec<Vec<Gog>> = (0..cfg.n_packages)
        .into_par_iter()
        .map(|p| {
            let proto = prototype_package(cfg, p);
            cfg.archs.iter().map(|a| render(cfg, &proto, p, a)).collect()
        })
        .collect();
    let provenance = format!(
        "synth seed={} packages={} archs={} distortion={}",
        cfg.seed,
        cfg.n_packages,
        cfg.archs.join(","),
        cfg.arch_distortion
    );
    Ok(Corpus::new(per_package.into_iter().flatten().collect(), provenance))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: SynthConfig,
    pub files: Vec<String>,
}

/// Writes `<out>/<package>/<arch>.gog.json` for every binary plus `manifest.json`.
pub fn write_synth_dir(corpus: &Corpus, cfg: &SynthConfig, out: &Path) -> Result<Manifest, SynthError> {
    let files = write_corpus_dir(corpus, out)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config: cfg.clone(),
        files: files.iter().map(|p| p.to_string_lossy().replace('\\', "/")).collect(),
    };
    let path = out.join("manifest.json");
    let text = canonical_json(&manifest).map_err(IngestError::from)?;
    write_atomic(&path, text.as_bytes()).map_err(|source| SynthError::Io { path, source })?;
    Ok(manifest)
}
