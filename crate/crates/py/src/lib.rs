//! Python bindings: corpus generation, training, embedding, p@k evaluation
//! and binary matching over the on-disk formats used by the CLI.

use std::path::{Path, PathBuf};

use ::cfg2vec::config::ExperimentConfig;
use ::cfg2vec::evalpred::{self, EmbeddingIndex, PoolScope};
use ::cfg2vec::gog::split_by_package;
use ::cfg2vec::hgnn::{Checkpoint, Model};
use ::cfg2vec::ingest::{load_corpus_dir, prepare_corpus, read_gog_file, write_corpus_dir};
use ::cfg2vec::json::write_atomic;
use ::cfg2vec::siamese::{self, SiameseError};
use ::cfg2vec::synth::{generate, write_synth_dir, SynthConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn at(path: &Path) -> impl Fn(String) -> PyErr + '_ {
    move |m| PyValueError::new_err(format!("{}: {m}", path.display()))
}

fn load_model(path: &Path) -> PyResult<Model> {
    let ckpt = Checkpoint::load(path).map_err(value_err)?;
    Model::from_checkpoint(&ckpt).map_err(|e| at(path)(e.to_string()))
}

fn load_prepared(dir: &Path) -> PyResult<::cfg2vec::gog::Corpus> {
    let corpus = load_corpus_dir(dir).map_err(value_err)?;
    if let Some(first) = corpus.validate().first() {
        return Err(at(dir)(first.clone()));
    }
    Ok(prepare_corpus(&corpus).map_err(value_err)?.0)
}

/// Writes a synthetic corpus to `out` and returns the number of binaries.
#[pyfunction]
#[pyo3(signature = (out, packages=40, archs=None, distortion=0.1, seed=0))]
fn synth(py: Python<'_>, out: PathBuf, packages: usize, archs: Option<Vec<String>>, distortion: f64, seed: u64) -> PyResult<usize> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_packages: packages,
        archs: archs.unwrap_or(defaults.archs.clone()),
        arch_distortion: distortion,
        seed,
        ..defaults
    };
    py.detach(|| {
        let corpus = generate(&cfg).map_err(value_err)?;
        let manifest = write_synth_dir(&corpus, &cfg, &out).map_err(value_err)?;
        Ok(manifest.files.len())
    })
}

/// Package-disjoint split; returns the binary counts of both sides.
#[pyfunction]
#[pyo3(signature = (input, out_train, out_test, train_frac=0.8, seed=0))]
fn split(py: Python<'_>, input: PathBuf, out_train: PathBuf, out_test: PathBuf, train_frac: f64, seed: u64) -> PyResult<(usize, usize)> {
    py.detach(|| {
        let corpus = load_corpus_dir(&input).map_err(value_err)?;
        let (train, test) = split_by_package(&corpus, train_frac, seed).map_err(|e| at(&input)(e.to_string()))?;
        write_corpus_dir(&train, &out_train).map_err(value_err)?;
        write_corpus_dir(&test, &out_test).map_err(value_err)?;
        Ok((train.len(), test.len()))
    })
}

/// Trains on `data`, writes the checkpoint and metrics CSV and returns the
/// mean loss of every epoch.
#[pyfunction]
#[pyo3(signature = (data, out, metrics, config=None, epochs=None, seed=None))]
fn train(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    metrics: PathBuf,
    config: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Vec<f64>> {
    py.detach(|| {
        let mut exp = match &config {
            Some(p) => ExperimentConfig::load(p).map_err(value_err)?,
            None => ExperimentConfig::default(),
        };
        exp.train.epochs = epochs.unwrap_or(exp.train.epochs);
        exp.train.seed = seed.unwrap_or(exp.train.seed);
        let corpus = load_prepared(&data)?;
        let write_metrics = |csv: String| write_atomic(&metrics, csv.as_bytes()).map_err(|e| at(&metrics)(e.to_string()));
        match siamese::train(&corpus, exp.model, &exp.train) {
            Ok((model, report)) => {
                write_metrics(report.to_csv())?;
                model.to_checkpoint().save(&out).map_err(value_err)?;
                Ok(report.epoch_means)
            }
            Err(SiameseError::Diverged { epoch, batch, last_good, report, .. }) => {
                write_metrics(report.to_csv())?;
                last_good.to_checkpoint().save(&out).map_err(value_err)?;
                Err(PyRuntimeError::new_err(format!(
                    "training diverged at epoch {epoch}, batch {batch}; last good weights written to {}",
                    out.display()
                )))
            }
            Err(e) => Err(at(&data)(e.to_string())),
        }
    })
}

/// Embeddings of the non-thunk functions of one binary, in function order.
#[pyfunction]
fn embed_functions(py: Python<'_>, ckpt: PathBuf, gog: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    py.detach(|| {
        let model = load_model(&ckpt)?;
        let g = read_gog_file(&gog).map_err(value_err)?;
        let stripped = ::cfg2vec::ingest::strip_thunks(&g);
        model.embed_functions(&stripped).map_err(|e| at(&gog)(e.to_string()))
    })
}

/// p@1..p@kmax on a test corpus, plus the query count and random baseline.
#[pyfunction]
#[pyo3(signature = (ckpt, test, kmax=5, reference=None))]
fn evaluate<'py>(
    py: Python<'py>,
    ckpt: PathBuf,
    test: PathBuf,
    kmax: usize,
    reference: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let table = py.detach(|| {
        let model = load_model(&ckpt)?;
        let index = EmbeddingIndex::build(&model, &load_prepared(&test)?).map_err(value_err)?;
        let extra = match &reference {
            Some(dir) => Some(EmbeddingIndex::build(&model, &load_prepared(dir)?).map_err(value_err)?),
            None => None,
        };
        evalpred::precision_at_k(&index, extra.as_ref(), kmax, PoolScope::OtherBinaries).map_err(value_err)
    })?;
    let out = PyDict::new(py);
    out.set_item("precision", table.precision)?;
    out.set_item("n_queries", table.n_queries)?;
    out.set_item("random_baseline", table.random_baseline)?;
    Ok(out)
}

/// Matched / mismatched / orphan report as a JSON string.
#[pyfunction]
#[pyo3(signature = (ckpt, stripped, reference, t_match=0.9, t_orphan=0.5))]
fn match_binaries(py: Python<'_>, ckpt: PathBuf, stripped: PathBuf, reference: PathBuf, t_match: f64, t_orphan: f64) -> PyResult<String> {
    py.detach(|| {
        let model = load_model(&ckpt)?;
        let s = read_gog_file(&stripped).map_err(value_err)?;
        let r = read_gog_file(&reference).map_err(value_err)?;
        let report = evalpred::match_binaries(&s, &r, &model, t_match, t_orphan).map_err(value_err)?;
        report.to_json().map_err(value_err)
    })
}

#[pymodule]
#[pyo3(name = "cfg2vec")]
fn cfg2vec_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(embed_functions, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(match_binaries, m)?)?;
    Ok(())
}
