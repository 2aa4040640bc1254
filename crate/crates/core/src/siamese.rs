//! Pair labeling, balanced batching, the contrastive loss and the training
//! loop.
//!
//! A batch is a list of groups. Each group holds an anchor binary, a binary
//! of the same package built for another architecture, and a binary of a
//! different package. Positive pairs join same-named functions of the first
//! two; negative pairs join functions of different packages and are
//! downsampled to the number of positives.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gog::{Corpus, Gog};
use crate::hgnn::{HgnnError, Model, ModelConfig, PackedBatch};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, TensorError, Var};

pub const METRICS_HEADER: &str = "epoch,batch,loss,n_pos,n_neg";

/// Training step size. Lower than the optimizer's own default: every
/// convolution is scale-free under the cosine loss, so weight norms grow
/// step by step and at 1e-3 the attention softmax saturates.
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SiameseError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training corpus needs at least 2 packages, found {0}")]
    TooFewPackages(usize),
    #[error("no positive pairs possible: no package has the same named function under two architectures")]
    NoPositivePairs,
    #[error("similarity {0} outside [-1, 1]")]
    SimilarityRange(f64),
    #[error("label must be +1 or -1, got {0}")]
    Label(i8),
    #[error(transparent)]
    Model(#[from] HgnnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch} batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        /// Weights before the failing step.
        last_good: Box<Model>,
        report: TrainReport,
    },
}

/// A function of a corpus binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FnRef {
    pub binary: usize,
    pub function: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairLabel {
    /// `+1` similar, `-1` dissimilar.
    pub y: i8,
    pub query: FnRef,
    pub key: FnRef,
}

/// Anchor, cross-architecture partner, other-package binary, with their pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub gogs: [usize; 3],
    pub pairs: Vec<PairLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub groups: Vec<Group>,
}

impl Batch {
    pub fn gogs(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().flat_map(|g| g.gogs)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PairLabel> {
        self.groups.iter().flat_map(|g| &g.pairs)
    }

    pub fn n_pos(&self) -> usize {
        self.pairs().filter(|p| p.y == 1).count()
    }

    pub fn n_neg(&self) -> usize {
        self.pairs().filter(|p| p.y == -1).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Binaries per batch; every three form one group.
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_pairs_per_batch: usize,
    pub seed: u64,
    /// Parallel gradient workers; results are reproducible only with 1.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 8,
            epochs: 30,
            margin: 0.5,
            lr: DEFAULT_LR,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            max_pairs_per_batch: 256,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn groups_per_batch(&self) -> usize {
        self.batch_size / 3
    }

    pub fn validate(&self) -> Result<(), SiameseError> {
        let err = |m: String| Err(SiameseError::Config(m));
        if self.batch_size < 3 {
            return err(format!("batch_size must be at least 3, got {}", self.batch_size));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return err(format!("margin must lie in (0, 1), got {}", self.margin));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return err(format!("eps must be positive, got {}", self.eps));
        }
        if self.max_pairs_per_batch < 2 {
            return err("max_pairs_per_batch must be at least 2".into());
        }
        if self.workers < 1 {
            return err("workers must be at least 1".into());
        }
        Ok(())
    }
}

/// Positive-source candidates of every binary: same package, other
/// architecture, at least one shared function name. Candidates with the same
/// binary name are preferred when present.
fn partner_table(corpus: &Corpus) -> Vec<Vec<usize>> {
    let names: Vec<Vec<&str>> = corpus
        .binaries
        .iter()
        .map(|b| {
            let mut n: Vec<&str> = named(b).into_iter().map(|(_, s)| s).collect();
            n.sort_unstable();
            n
        })
        .collect();
    let shares = |a: usize, b: usize| names[a].iter().any(|n| names[b].binary_search(n).is_ok());
    let bins = &corpus.binaries;
    (0..bins.len())
        .map(|i| {
            let all: Vec<usize> = (0..bins.len())
                .filter(|&j| bins[j].package == bins[i].package && bins[j].arch != bins[i].arch && shares(i, j))
                .collect();
            let same_name: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&j| bins[j].binary_name == bins[i].binary_name)
                .collect();
            if same_name.is_empty() {
                all
            } else {
                same_name
            }
        })
        .collect()
}

fn named(gog: &Gog) -> Vec<(usize, &str)> {
    gog.functions
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.is_thunk && !f.blocks.is_empty())
        .filter_map(|(i, f)| f.name.as_deref().map(|n| (i, n)))
        .collect()
}

fn embeddable(gog: &Gog) -> Vec<usize> {
    (0..gog.functions.len())
        .filter(|&i| !gog.functions[i].is_thunk && !gog.functions[i].blocks.is_empty())
        .collect()
}

fn build_group(
    corpus: &Corpus,
    [a, p, n]: [usize; 3],
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Group> {
    let bins = &corpus.binaries;
    let partner_names: HashMap<&str, usize> = named(&bins[p]).into_iter().map(|(i, s)| (s, i)).collect();
    let mut positives: Vec<PairLabel> = named(&bins[a])
        .into_iter()
        .filter_map(|(i, s)| {
            partner_names.get(s).map(|&j| PairLabel {
                y: 1,
                query: FnRef { binary: a, function: i },
                key: FnRef { binary: p, function: j },
            })
        })
        .collect();
    if positives.is_empty() {
        return None;
    }
    positives.shuffle(rng);
    positives.truncate(max_pairs / 2);

    let name_of = |b: usize, f: usize| bins[b].functions[f].name.as_deref();
    let other = embeddable(&bins[n]);
    let mut negatives = Vec::new();
    for q in [a, p] {
        for i in embeddable(&bins[q]) {
            for &j in &other {
                let (x, y) = (name_of(q, i), name_of(n, j));
                if x.is_some() && x == y {
                    continue;
                }
                negatives.push(PairLabel {
                    y: -1,
                    query: FnRef { binary: q, function: i },
                    key: FnRef { binary: n, function: j },
                });
            }
        }
    }
    if negatives.is_empty() {
        return None;
    }
    let k = positives.len().min(negatives.len());
    let (chosen, _) = negatives.partial_shuffle(rng, k);
    let mut negatives = chosen.to_vec();
    negatives.sort_by_key(|p| (p.query, p.key));
    positives.sort_by_key(|p| (p.query, p.key));
    positives.extend(negatives);
    Some(Group {
        gogs: [a, p, n],
        pairs: positives,
    })
}

/// Batches of one epoch. Every binary with a cross-architecture partner
/// anchors one group per epoch; the order and all sampling depend only on
/// the corpus, `cfg.seed` and `epoch`.
pub fn build_batches(corpus: &Corpus, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Batch>, SiameseError> {
    cfg.validate()?;
    let n_packages = corpus.packages().len();
    if n_packages < 2 {
        return Err(SiameseError::TooFewPackages(n_packages));
    }
    let partners = partner_table(corpus);
    let mut anchors: Vec<usize> = (0..corpus.len()).filter(|&i| !partners[i].is_empty()).collect();
    if anchors.is_empty() {
        return Err(SiameseError::NoPositivePairs);
    }
    let mut by_package: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in corpus.binaries.iter().enumerate() {
        by_package.entry(&b.package).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    anchors.shuffle(&mut rng);

    let per_batch = cfg.groups_per_batch();
    let pair_budget = (cfg.max_pairs_per_batch / per_batch).max(2);
    let mut batches = Vec::new();
    for chunk in anchors.chunks(per_batch) {
        let mut groups = Vec::with_capacity(chunk.len());
        for &a in chunk {
            let p = *partners[a].choose(&mut rng).expect("non-empty partner list");
            let others: Vec<usize> = by_package
                .iter()
                .filter(|(pkg, _)| **pkg != corpus.binaries[a].package)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let n = *others.choose(&mut rng).expect("at least two packages");
            if let Some(g) = build_group(corpus, [a, p, n], pair_budget, &mut rng) {
                groups.push(g);
            }
        }
        if !groups.is_empty() {
            batches.push(Batch { groups });
        }
    }
    Ok(batches)
}

/// Contrastive loss of one pair: `1 - ŷ` for similar pairs and
/// `max(0, ŷ - m)` for dissimilar ones.
pub fn pair_loss(y_hat: f64, y: i8, margin: f64) -> Result<f64, SiameseError> {
    if !(-1.0..=1.0).contains(&y_hat) {
        return Err(SiameseError::SimilarityRange(y_hat));
    }
    match y {
        1 => Ok(1.0 - y_hat),
        -1 => Ok((y_hat - margin).max(0.0)),
        other => Err(SiameseError::Label(other)),
    }
}

/// Records the summed loss of `pairs` given function embeddings `emb`
/// (one row per function, binaries packed in the order of `slots`).
fn pairs_loss(
    g: &mut Graph,
    emb: Var,
    pairs: &[PairLabel],
    row_of: impl Fn(FnRef) -> usize,
    margin: f64,
) -> Result<Var, SiameseError> {
    let mut total = None;
    for y in [1i8, -1] {
        let sel: Vec<&PairLabel> = pairs.iter().filter(|p| p.y == y).collect();
        if sel.is_empty() {
            continue;
        }
        let q = g.gather_rows(emb, sel.iter().map(|p| row_of(p.query)).collect())?;
        let k = g.gather_rows(emb, sel.iter().map(|p| row_of(p.key)).collect())?;
        let cos = g.row_cosine(q, k)?;
        let per_pair = if y == 1 {
            let neg = g.scale(cos, -1.0)?;
            g.add_scalar(neg, 1.0)?
        } else {
            let shifted = g.add_scalar(cos, -margin)?;
            g.relu(shifted)
        };
        let s = g.sum_all(per_pair);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(0.0)?)),
    }
}

/// Embeds the given binaries once and records the summed pair loss.
pub fn record_loss(
    g: &mut Graph,
    model: &Model,
    corpus: &Corpus,
    binaries: &[usize],
    pairs: &[PairLabel],
    margin: f64,
) -> Result<Var, SiameseError> {
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    for &b in binaries {
        slot.entry(b).or_insert_with(|| {
            order.push(b);
            order.len() - 1
        });
    }
    let gogs: Vec<&Gog> = order.iter().map(|&b| &corpus.binaries[b]).collect();
    let packed = PackedBatch::new(&gogs, model.config())?;
    let emb = model.forward_packed(g, &packed)?;
    let offsets = packed.offsets;
    pairs_loss(g, emb, pairs, |r| offsets[slot[&r.binary]] + r.function, margin)
}

/// Loss of a whole batch; differentiable through the tape in `g`.
pub fn batch_loss(g: &mut Graph, model: &Model, corpus: &Corpus, batch: &Batch, margin: f64) -> Result<Var, SiameseError> {
    let binaries: Vec<usize> = batch.gogs().collect();
    let pairs: Vec<PairLabel> = batch.pairs().copied().collect();
    record_loss(g, model, corpus, &binaries, &pairs, margin)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    /// Mean batch loss of each completed epoch.
    pub epoch_means: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.batch, r.loss, r.n_pos, r.n_neg);
        }
        out
    }
}

/// Loss and gradients of one batch, accumulated into `store`.
fn batch_step(
    model: &Model,
    corpus: &Corpus,
    batch: &Batch,
    cfg: &TrainConfig,
    store: &mut ParamStore,
) -> Result<f64, SiameseError> {
    if cfg.workers <= 1 || batch.groups.len() < 2 {
        let mut g = Graph::new();
        let loss = batch_loss(&mut g, model, corpus, batch, cfg.margin)?;
        g.backward(loss, store)?;
        return Ok(g.value(loss).item().unwrap_or(f64::NAN));
    }
    let chunk = batch.groups.len().div_ceil(cfg.workers);
    let parts: Vec<Result<(f64, ParamStore), SiameseError>> = batch
        .groups
        .par_chunks(chunk)
        .map(|groups| {
            let mut local = model.params().clone();
            local.zero_grad();
            let sub = Batch { groups: groups.to_vec() };
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, model, corpus, &sub, cfg.margin)?;
            g.backward(loss, &mut local)?;
            Ok((g.value(loss).item().unwrap_or(f64::NAN), local))
        })
        .collect();
    let mut total = 0.0;
    for part in parts {
        let (loss, grads) = part?;
        total += loss;
        store.accumulate_grads(&grads);
    }
    Ok(total)
}

fn all_finite(store: &ParamStore) -> bool {
    store
        .iter()
        .all(|p| p.grad.data().iter().chain(p.value.data()).all(|v| v.is_finite()))
}

fn is_non_finite(e: &SiameseError) -> bool {
    matches!(
        e,
        SiameseError::Tensor(TensorError::NonFinite { .. })
            | SiameseError::Model(HgnnError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Trains a fresh model seeded with `cfg.seed`.
pub fn train(corpus: &Corpus, model_config: ModelConfig, cfg: &TrainConfig) -> Result<(Model, TrainReport), SiameseError> {
    let model = Model::new(model_config, cfg.seed)?;
    train_model(model, corpus, cfg, |_, _| {})
}

/// Runs `cfg.epochs` epochs of Adam on `model`; `on_epoch` sees the model
/// and the mean loss after every epoch. The corpus must be thunk-free.
pub fn train_model(
    mut model: Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, f64),
) -> Result<(Model, TrainReport), SiameseError> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((model, report));
    }
    let mut adam = Adam::new(cfg.adam(), model.params());
    for epoch in 0..cfg.epochs {
        let batches = build_batches(corpus, cfg, epoch)?;
        let mut sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut grads = model.params().clone();
            grads.zero_grad();
            let loss = match batch_step(&model, corpus, batch, cfg, &mut grads) {
                Ok(loss) => loss,
                Err(e) if is_non_finite(&e) => f64::NAN,
                Err(e) => return Err(e),
            };
            let diverged = |report: TrainReport, model: &Model| SiameseError::Diverged {
                epoch,
                batch: bi,
                loss,
                last_good: Box::new(model.clone()),
                report,
            };
            if !loss.is_finite() || !all_finite(&grads) {
                return Err(diverged(report, &model));
            }
            let before = model.clone();
            *model.params_mut() = grads;
            adam.step(model.params_mut());
            if !all_finite(model.params()) {
                return Err(diverged(report, &before));
            }
            report.rows.push(MetricRow {
                epoch,
                batch: bi,
                loss,
                n_pos: batch.n_pos(),
                n_neg: batch.n_neg(),
            });
            sum += loss;
        }
        let mean = if batches.is_empty() { 0.0 } else { sum / batches.len() as f64 };
        report.epoch_means.push(mean);
        on_epoch(&model, mean);
    }
    model.params_mut().zero_grad();
    Ok((model, report))
}
