//! Embedding index, top-k name prediction, precision at k and the
//! matched / mismatched / orphan report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gog::{Corpus, Gog};
use crate::hgnn::{HgnnError, Model};
use crate::ingest::strip_thunks_mapped;
use crate::json::canonical_json;
use crate::tensor::cosine;

pub const INDEX_FORMAT: &str = "cfg2vec-index-v1";
pub const REPORT_FORMAT: &str = "cfg2vec-match-v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty candidate pool for query record {0}")]
    EmptyPool(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("record {index}: embedding has dimension {found}, expected {expected}")]
    Dimension { index: usize, found: usize, expected: usize },
    #[error("record {0} does not exist")]
    NoRecord(usize),
    #[error("reference binary has no functions")]
    EmptyReference,
    #[error("thresholds must satisfy t_orphan <= t_match, got t_orphan {t_orphan} and t_match {t_match}")]
    Thresholds { t_match: f64, t_orphan: f64 },
    #[error("unsupported index format {0:?}")]
    Format(String),
    #[error("{binary}: {source}")]
    Embed {
        binary: String,
        #[source]
        source: HgnnError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub package: String,
    pub binary: String,
    pub arch: String,
    /// Function id in the original (unstripped) GoG.
    pub function: usize,
    pub name: Option<String>,
    pub embedding: Vec<f64>,
}

impl IndexRecord {
    fn same_binary(&self, other: &IndexRecord) -> bool {
        self.package == other.package && self.binary == other.binary && self.arch == other.arch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingIndex {
    pub format: String,
    pub dim: usize,
    pub records: Vec<IndexRecord>,
}

/// Which records a query may be ranked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolScope {
    /// Everything except records of the query's own binary.
    #[default]
    OtherBinaries,
    /// Every record, the query included.
    All,
}

fn embed_binary(model: &Model, gog: &Gog) -> Result<Vec<IndexRecord>, EvalError> {
    let (stripped, ids) = strip_thunks_mapped(gog);
    let emb = model.embed_functions(&stripped).map_err(|source| EvalError::Embed {
        binary: format!("{}/{}/{}", gog.package, gog.binary_name, gog.arch),
        source,
    })?;
    Ok(ids
        .into_iter()
        .zip(emb)
        .map(|(id, embedding)| IndexRecord {
            package: gog.package.clone(),
            binary: gog.binary_name.clone(),
            arch: gog.arch.clone(),
            function: id,
            name: gog.functions[id].name.clone(),
            embedding,
        })
        .collect())
}

impl EmbeddingIndex {
    pub fn from_records(dim: usize, records: Vec<IndexRecord>) -> Result<Self, EvalError> {
        for (index, r) in records.iter().enumerate() {
            if r.embedding.len() != dim {
                return Err(EvalError::Dimension {
                    index,
                    found: r.embedding.len(),
                    expected: dim,
                });
            }
        }
        Ok(Self {
            format: INDEX_FORMAT.to_string(),
            dim,
            records,
        })
    }

    /// Embeds every non-thunk function of the corpus. Binaries are embedded
    /// in parallel; the record order follows the corpus order.
    pub fn build(model: &Model, corpus: &Corpus) -> Result<Self, EvalError> {
        let parts: Vec<Result<Vec<IndexRecord>, EvalError>> =
            corpus.binaries.par_iter().map(|g| embed_binary(model, g)).collect();
        let mut records = Vec::new();
        for p in parts {
            records.extend(p?);
        }
        Self::from_records(model.config().embedding_dim(), records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&IndexRecord, EvalError> {
        self.records.get(id).ok_or(EvalError::NoRecord(id))
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(canonical_json(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let idx: EmbeddingIndex = serde_json::from_str(text)?;
        if idx.format != INDEX_FORMAT {
            return Err(EvalError::Format(idx.format));
        }
        Self::from_records(idx.dim, idx.records)
    }
}

fn in_pool(query: &IndexRecord, candidate: &IndexRecord, scope: PoolScope) -> bool {
    candidate.name.is_some() && (scope == PoolScope::All || !query.same_binary(candidate))
}

/// Best similarity per name over the pool, highest first, ties by name.
fn rank_all<'a>(
    query: &IndexRecord,
    pools: &[&'a [IndexRecord]],
    scope: PoolScope,
) -> Vec<(&'a str, f64)> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for pool in pools {
        for c in pool.iter().filter(|c| in_pool(query, c, scope)) {
            let s = cosine(&query.embedding, &c.embedding);
            let name = c.name.as_deref().expect("pool records are named");
            best.entry(name).and_modify(|b| *b = b.max(s)).or_insert(s);
        }
    }
    let mut ranked: Vec<(&str, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
}

/// Top `k` distinct names for record `query`, ranked by their best cosine
/// similarity to the query.
pub fn topk_names(
    index: &EmbeddingIndex,
    query: usize,
    k: usize,
    scope: PoolScope,
) -> Result<Vec<(String, f64)>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let q = index.get(query)?;
    let ranked = rank_all(q, &[&index.records], scope);
    if ranked.is_empty() {
        return Err(EvalError::EmptyPool(query));
    }
    Ok(ranked.into_iter().take(k).map(|(n, s)| (n.to_string(), s)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionTable {
    /// `precision[k - 1]` is p@k.
    pub precision: Vec<f64>,
    pub n_queries: usize,
    /// Mean over queries of `1 / distinct names in the pool`.
    pub random_baseline: f64,
}

impl PrecisionTable {
    pub fn at(&self, k: usize) -> f64 {
        self.precision[k - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,precision\n");
        for (i, p) in self.precision.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, p);
        }
        out
    }
}

/// p@1..=p@k_max over every named record of `test`. The pool is `test` plus,
/// if given, `reference`; with [`PoolScope::OtherBinaries`] records of the
/// query's own binary are left out.
pub fn precision_at_k(
    test: &EmbeddingIndex,
    reference: Option<&EmbeddingIndex>,
    k_max: usize,
    scope: PoolScope,
) -> Result<PrecisionTable, EvalError> {
    precision_at_k_for(test, reference, k_max, scope, |_| true)
}

/// As [`precision_at_k`], with queries restricted to records accepted by
/// `keep` (the pool is unchanged).
pub fn precision_at_k_for(
    test: &EmbeddingIndex,
    reference: Option<&EmbeddingIndex>,
    k_max: usize,
    scope: PoolScope,
    keep: impl Fn(&IndexRecord) -> bool + Sync,
) -> Result<PrecisionTable, EvalError> {
    if k_max == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut pools: Vec<&[IndexRecord]> = vec![&test.records];
    if let Some(r) = reference {
        pools.push(&r.records);
    }
    let queries: Vec<usize> = (0..test.len())
        .filter(|&i| test.records[i].name.is_some() && keep(&test.records[i]))
        .collect();
    let per_query: Vec<Result<(Option<usize>, f64), EvalError>> = queries
        .par_iter()
        .map(|&qi| {
            let q = &test.records[qi];
            let ranked = rank_all(q, &pools, scope);
            if ranked.is_empty() {
                return Err(EvalError::EmptyPool(qi));
            }
            let truth = q.name.as_deref();
            let rank = ranked.iter().position(|(n, _)| Some(*n) == truth);
            Ok((rank, 1.0 / ranked.len() as f64))
        })
        .collect();
    let mut hits = vec![0usize; k_max];
    let mut baseline = 0.0;
    for r in per_query {
        let (rank, chance) = r?;
        baseline += chance;
        if let Some(rank) = rank {
            for h in hits.iter_mut().skip(rank) {
                *h += 1;
            }
        }
    }
    let n = queries.len();
    let denom = n.max(1) as f64;
    Ok(PrecisionTable {
        precision: hits.iter().map(|&h| h as f64 / denom).collect(),
        n_queries: n,
        random_baseline: baseline / denom,
    })
}

/// One function and its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionEmbedding {
    pub id: usize,
    pub name: Option<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub query: usize,
    pub query_name: Option<String>,
    pub key: usize,
    pub key_name: Option<String>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrphanEntry {
    pub query: usize,
    pub query_name: Option<String>,
    pub best_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub format: String,
    pub t_match: f64,
    pub t_orphan: f64,
    pub matched: Vec<MatchEntry>,
    pub mismatched: Vec<MatchEntry>,
    pub orphans: Vec<OrphanEntry>,
}

/// Pairs each query with its most similar key (lowest id on ties) and sorts
/// it into matched (`>= t_match`), mismatched (`>= t_orphan`) or orphan.
pub fn match_embeddings(
    queries: &[FunctionEmbedding],
    keys: &[FunctionEmbedding],
    t_match: f64,
    t_orphan: f64,
) -> Result<MatchReport, EvalError> {
    if !(t_orphan <= t_match) {
        return Err(EvalError::Thresholds { t_match, t_orphan });
    }
    if keys.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let mut report = MatchReport {
        format: REPORT_FORMAT.to_string(),
        t_match,
        t_orphan,
        matched: Vec::new(),
        mismatched: Vec::new(),
        orphans: Vec::new(),
    };
    for q in queries {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, k) in keys.iter().enumerate() {
            let s = cosine(&q.embedding, &k.embedding);
            if s > best.1 {
                best = (i, s);
            }
        }
        let key = &keys[best.0];
        let entry = MatchEntry {
            query: q.id,
            query_name: q.name.clone(),
            key: key.id,
            key_name: key.name.clone(),
            similarity: best.1,
        };
        if best.1 >= t_match {
            report.matched.push(entry);
        } else if best.1 >= t_orphan {
            report.mismatched.push(entry);
        } else {
            report.orphans.push(OrphanEntry {
                query: q.id,
                query_name: q.name.clone(),
                best_similarity: best.1,
            });
        }
    }
    Ok(report)
}

fn function_embeddings(model: &Model, gog: &Gog) -> Result<Vec<FunctionEmbedding>, EvalError> {
    Ok(embed_binary(model, gog)?
        .into_iter()
        .map(|r| FunctionEmbedding {
            id: r.function,
            name: r.name,
            embedding: r.embedding,
        })
        .collect())
}

/// Matches every non-thunk function of `stripped` against `reference`.
pub fn match_binaries(
    stripped: &Gog,
    reference: &Gog,
    model: &Model,
    t_match: f64,
    t_orphan: f64,
) -> Result<MatchReport, EvalError> {
    if !(t_orphan <= t_match) {
        return Err(EvalError::Thresholds { t_match, t_orphan });
    }
    let keys = function_embeddings(model, reference)?;
    if keys.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    match_embeddings(&function_embeddings(model, stripped)?, &keys, t_match, t_orphan)
}

impl MatchReport {
    pub fn len(&self) -> usize {
        self.matched.len() + self.mismatched.len() + self.orphans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(canonical_json(self)?)
    }

    /// Aligned plain-text table, one row per query function.
    pub fn to_table(&self) -> String {
        let name = |n: &Option<String>| n.clone().unwrap_or_else(|| "-".to_string());
        let mut rows: Vec<[String; 5]> = vec![[
            "status".into(),
            "query".into(),
            "query_name".into(),
            "key_name".into(),
            "similarity".into(),
        ]];
        for (status, list) in [("matched", &self.matched), ("mismatched", &self.mismatched)] {
            for e in list {
                rows.push([
                    status.into(),
                    e.query.to_string(),
                    name(&e.query_name),
                    format!("{} ({})", name(&e.key_name), e.key),
                    format!("{:.4}", e.similarity),
                ]);
            }
        }
        for o in &self.orphans {
            rows.push([
                "orphan".into(),
                o.query.to_string(),
                name(&o.query_name),
                "-".into(),
                format!("{:.4}", o.best_similarity),
            ]);
        }
        let mut widths = [0usize; 5];
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = format!(
            "t_match {}  t_orphan {}  matched {}  mismatched {}  orphans {}\n",
            self.t_match,
            self.t_orphan,
            self.matched.len(),
            self.mismatched.len(),
            self.orphans.len()
        );
        for r in &rows {
            let line: Vec<String> = r.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gog::{BasicBlockFeatures, Cfg, NUM_FEATURES};
    use crate::hgnn::ModelConfig;
    use proptest::prelude::*;

    fn rec(binary: &str, name: Option<&str>, embedding: Vec<f64>) -> IndexRecord {
        IndexRecord {
            package: "p".into(),
            binary: binary.into(),
            arch: "amd64".into(),
            function: 0,
            name: name.map(str::to_string),
            embedding,
        }
    }

    fn index(records: Vec<IndexRecord>) -> EmbeddingIndex {
        let dim = records[0].embedding.len();
        EmbeddingIndex::from_records(dim, records).unwrap()
    }

    fn naive_cos(u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            0.0
        } else {
            dot / (nu * nv)
        }
    }

    #[test]
    fn exact_duplicate_ranks_first() {
        let idx = index(vec![
            rec("q", Some("foo"), vec![1.0, 2.0]),
            rec("r", Some("foo"), vec![1.0, 2.0]),
            rec("r", Some("bar"), vec![2.0, -1.0]),
        ]);
        let top = topk_names(&idx, 0, 1, PoolScope::OtherBinaries).unwrap();
        assert_eq!(top[0].0, "foo");
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_beyond_pool_truncates_and_empty_pool_errors() {
        let idx = index(vec![
            rec("q", Some("a"), vec![1.0, 0.0]),
            rec("r", Some("b"), vec![0.0, 1.0]),
            rec("r", Some("c"), vec![1.0, 1.0]),
        ]);
        assert_eq!(topk_names(&idx, 0, 10, PoolScope::OtherBinaries).unwrap().len(), 2);
        let lonely = index(vec![rec("q", Some("a"), vec![1.0])]);
        assert!(matches!(
            topk_names(&lonely, 0, 1, PoolScope::OtherBinaries),
            Err(EvalError::EmptyPool(0))
        ));
        assert!(matches!(topk_names(&idx, 0, 0, PoolScope::All), Err(EvalError::ZeroK)));
    }

    #[test]
    fn five_record_ranking_matches_brute_force() {
        let idx = index(vec![
            rec("q", Some("q"), vec![1.0, 0.5]),
            rec("a", Some("alpha"), vec![0.2, 1.0]),
            rec("a", Some("beta"), vec![1.0, 0.4]),
            rec("b", Some("alpha"), vec![0.9, 0.6]),
            rec("b", Some("gamma"), vec![-1.0, 0.3]),
        ]);
        // Brute force: every pool record's similarity, best per name, sort.
        let q = &idx.records[0].embedding;
        let mut best: Vec<(String, f64)> = Vec::new();
        for r in &idx.records[1..] {
            let s = naive_cos(q, &r.embedding);
            let n = r.name.clone().unwrap();
            match best.iter_mut().find(|(m, _)| *m == n) {
                Some(e) => e.1 = e.1.max(s),
                None => best.push((n, s)),
            }
        }
        best.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = topk_names(&idx, 0, 5, PoolScope::OtherBinaries).unwrap();
        assert_eq!(got.len(), best.len());
        for (g, b) in got.iter().zip(&best) {
            assert_eq!(g.0, b.0);
            assert!((g.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_break_by_name() {
        let idx = index(vec![
            rec("q", Some("q"), vec![1.0, 0.0]),
            rec("r", Some("zeta"), vec![2.0, 0.0]),
            rec("r", Some("alpha"), vec![3.0, 0.0]),
        ]);
        let got = topk_names(&idx, 0, 2, PoolScope::OtherBinaries).unwrap();
        assert_eq!(got[0].0, "alpha");
        assert_eq!(got[1].0, "zeta");
    }

    #[test]
    fn precision_definitions() {
        // Each query's nearest other-binary record shares its name.
        let idx = index(vec![
            rec("x", Some("a"), vec![1.0, 0.0]),
            rec("x", Some("b"), vec![0.0, 1.0]),
            rec("y", Some("a"), vec![0.9, 0.1]),
            rec("y", Some("b"), vec![0.1, 0.9]),
        ]);
        let t = precision_at_k(&idx, None, 2, PoolScope::OtherBinaries).unwrap();
        assert_eq!(t.precision, vec![1.0, 1.0]);
        assert_eq!(t.n_queries, 4);
        assert!((t.random_baseline - 0.5).abs() < 1e-12);
        assert_eq!(t.to_csv(), "k,precision\n1,1\n2,1\n");

        // Ground truth always third.
        let idx = index(vec![
            rec("x", Some("t"), vec![1.0, 0.0]),
            rec("y", Some("n1"), vec![1.0, 0.01]),
            rec("y", Some("n2"), vec![1.0, 0.2]),
            rec("y", Some("t"), vec![1.0, 0.5]),
            rec("y", Some("n3"), vec![0.0, 1.0]),
        ]);
        let only_first = EmbeddingIndex::from_records(2, idx.records.clone()).unwrap();
        let ranked = topk_names(&only_first, 0, 4, PoolScope::OtherBinaries).unwrap();
        assert_eq!(ranked[2].0, "t");
        let sub = index(vec![idx.records[0].clone()]);
        let t = precision_at_k(&sub, Some(&index(idx.records[1..].to_vec())), 4, PoolScope::OtherBinaries).unwrap();
        assert_eq!(t.precision, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn self_retrieval_in_sanity_mode() {
        let idx = index(vec![
            rec("x", Some("a"), vec![1.0, 0.3]),
            rec("x", Some("b"), vec![0.2, 1.0]),
            rec("y", Some("c"), vec![1.0, 0.31]),
        ]);
        for i in 0..idx.len() {
            let top = topk_names(&idx, i, 1, PoolScope::All).unwrap();
            assert_eq!(Some(top[0].0.clone()), idx.records[i].name);
            assert!((top[0].1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = EmbeddingIndex::from_records(2, vec![rec("x", Some("a"), vec![1.0])]).unwrap_err();
        assert!(err.to_string().contains("dimension 1, expected 2"));
    }

    fn fe(id: usize, e: Vec<f64>) -> FunctionEmbedding {
        FunctionEmbedding {
            id,
            name: Some(format!("f{id}")),
            embedding: e,
        }
    }

    #[test]
    fn match_thresholds() {
        let q = vec![fe(0, vec![1.0, 0.0]), fe(1, vec![1.0, 1.0]), fe(2, vec![-1.0, 0.1])];
        let k = vec![fe(0, vec![1.0, 0.0]), fe(1, vec![0.0, 1.0])];
        let r = match_embeddings(&q, &k, 0.9, 0.5).unwrap();
        assert_eq!(r.matched.len(), 1);
        assert_eq!(r.mismatched.len(), 1);
        assert_eq!(r.mismatched[0].key, 0);
        assert_eq!(r.orphans.len(), 1);
        let none = match_embeddings(&q, &k, 1.1, 0.5).unwrap();
        assert!(none.matched.is_empty());
        assert!(match_embeddings(&q, &k, 0.4, 0.5).is_err());
        assert!(match_embeddings(&q, &[], 0.9, 0.5).is_err());
        let table = r.to_table();
        assert!(table.starts_with("t_match 0.9  t_orphan 0.5  matched 1  mismatched 1  orphans 1\nstatus"));
        assert_eq!(table.lines().count(), 5);
    }

    fn small_gog(seed: u64) -> Gog {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Gog::new("p", "b", "amd64");
        for i in 0..5 {
            let blocks = (0..3)
                .map(|_| BasicBlockFeatures((0..NUM_FEATURES).map(|_| rng.random_range(0.0..3.0)).collect()))
                .collect();
            g.functions.push(Cfg::new(Some(format!("f{i}")), blocks, vec![(0, 1), (1, 2)]));
        }
        g.functions.push(Cfg::thunk(Some("puts".into())));
        g.call_edges = vec![(0, 1), (1, 2), (2, 5)];
        g
    }

    #[test]
    fn identical_reference_matches_everything() {
        let model = Model::new(ModelConfig::with_layers(6, 2, true), 1).unwrap();
        let g = small_gog(3);
        let r = match_binaries(&g, &g, &model, 0.9, 0.5).unwrap();
        assert_eq!(r.matched.len(), 5);
        for e in &r.matched {
            assert!((e.similarity - 1.0).abs() < 1e-12);
            assert_eq!(e.query_name, e.key_name);
        }
        let back: MatchReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn index_build_and_json_round_trip() {
        let model = Model::new(ModelConfig::with_layers(4, 1, false), 2).unwrap();
        let corpus = Corpus::new(vec![small_gog(1), small_gog(2)], "t");
        let idx = EmbeddingIndex::build(&model, &corpus).unwrap();
        assert_eq!(idx.len(), 10);
        assert_eq!(idx.records[4].function, 4);
        let text = idx.to_json().unwrap();
        assert_eq!(EmbeddingIndex::from_json(&text).unwrap(), idx);
    }

    fn arb_index() -> impl Strategy<Value = EmbeddingIndex> {
        prop::collection::vec(
            (0usize..3, 0usize..4, prop::collection::vec(-2.0f64..2.0, 3)),
            2..12,
        )
        .prop_map(|rows| {
            let records = rows
                .into_iter()
                .map(|(b, n, e)| rec(&format!("b{b}"), Some(&format!("n{n}")), e))
                .collect();
            EmbeddingIndex::from_records(3, records).unwrap()
        })
    }

    proptest! {
        #[test]
        fn precision_is_monotone(idx in arb_index()) {
            if let Ok(t) = precision_at_k(&idx, None, 5, PoolScope::OtherBinaries) {
                for w in t.precision.windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
            }
        }

        #[test]
        fn positive_scaling_keeps_rankings(idx in arb_index(), factor in 0.01f64..100.0) {
            let mut scaled = idx.clone();
            for r in scaled.records.iter_mut() {
                for v in r.embedding.iter_mut() {
                    *v *= factor;
                }
            }
            for q in 0..idx.len() {
                let a = topk_names(&idx, q, 5, PoolScope::All).unwrap();
                let b = topk_names(&scaled, q, 5, PoolScope::All).unwrap();
                let names_a: Vec<_> = a.iter().map(|x| &x.0).collect();
                let names_b: Vec<_> = b.iter().map(|x| &x.0).collect();
                prop_assert_eq!(names_a, names_b);
            }
        }

        #[test]
        fn report_partitions_queries(
            q in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 0..10),
            k in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..6),
            t_orphan in -1.0f64..1.0,
            gap in 0.0f64..1.0,
        ) {
            let queries: Vec<_> = q.into_iter().enumerate().map(|(i, e)| fe(i, e)).collect();
            let keys: Vec<_> = k.into_iter().enumerate().map(|(i, e)| fe(i, e)).collect();
            let r = match_embeddings(&queries, &keys, t_orphan + gap, t_orphan).unwrap();
            prop_assert_eq!(r.len(), queries.len());
            let mut seen: Vec<usize> = r.matched.iter().chain(&r.mismatched).map(|e| e.query)
                .chain(r.orphans.iter().map(|o| o.query)).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..queries.len()).collect::<Vec<_>>());
        }
    }
}
