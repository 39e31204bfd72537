//! The `nadetopic` command line. Each subcommand parses its flags, calls
//! into the library and writes JSON or JSON-lines output.
//!
//! Exit codes: `0` success, `1` invalid input or arguments, `2` I/O failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::index;
use serde::Serialize;

use crate::corpus::{self, Corpus, Document, JointVocab, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval;
use crate::model;
use crate::quantizer::{self, DescriptorSet};
use crate::seeded_rng;
use crate::trainer::{self, Checkpoint, TrainConfig};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "nadetopic", version, about = "Supervised neural autoregressive topic model for images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a k-means visual-word codebook on dense descriptors.
    BuildVocab {
        /// Descriptor files (`.ntde`) or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        descriptors: Vec<PathBuf>,
        #[arg(long, default_value_t = 240)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Fit on a seeded random subset of this many descriptors.
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn per-image descriptor files into a corpus.
    Prepare {
        /// One descriptor file per image, or directories of `.ntde` files
        /// (taken in lexicographic order).
        #[arg(long, required = true, num_args = 1..)]
        descriptors: Vec<PathBuf>,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, default_value = "2x2", value_parser = parse_grid)]
        grid: (usize, usize),
        /// One class index per line, one line per image.
        #[arg(long)]
        labels: PathBuf,
        /// Whitespace-separated annotation indices, one line per image.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Number of classes (default: largest label + 1).
        #[arg(long)]
        classes: Option<usize>,
        /// Annotation vocabulary size (default: largest index + 1).
        #[arg(long)]
        ann_vocab: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        regions: usize,
        #[arg(long, default_value_t = 10)]
        ann: usize,
        #[arg(long, default_value_t = 100)]
        docs_per_class: usize,
        #[arg(long, default_value_t = 50)]
        doc_len: usize,
        #[arg(long, default_value_t = 3)]
        ann_len: usize,
        #[arg(long, default_value_t = 0.05)]
        concentration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; a comma-separated `--lambda` list is searched by
    /// validation accuracy.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value = "0.1", value_delimiter = ',')]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 1.0)]
        decay: f64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 0.1)]
        init_scale: f64,
        /// Also write the per-epoch training log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict classes from visual words.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the top annotation words of each document.
    Annotate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and annotation F-measure report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        hidden: usize,
        #[arg(long, default_value_t = 12)]
        vocab: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Words most associated with a class through its strongest topics.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 3)]
        topics: usize,
        #[arg(long, default_value_t = 20)]
        words: usize,
    },
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (x, y) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected COLSxROWS, got {s:?}"))?;
    let x: usize = x.trim().parse().map_err(|e| format!("grid columns: {e}"))?;
    let y: usize = y.trim().parse().map_err(|e| format!("grid rows: {e}"))?;
    if x == 0 || y == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((x, y))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::BuildVocab {
            descriptors,
            k,
            seed,
            max_iters,
            tol,
            subsample,
            out,
        } => {
            let sets = read_descriptor_sets(&descriptors)?;
            let dim = sets[0].dim;
            let mut data = Vec::new();
            for s in &sets {
                if s.dim != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: s.dim });
                }
                data.extend(s.to_f64());
            }
            let n = data.len() / dim;
            if let Some(m) = subsample.filter(|&m| m < n) {
                let mut rows = index::sample(&mut seeded_rng(seed, 6), n, m).into_vec();
                rows.sort_unstable();
                data = rows
                    .into_iter()
                    .flat_map(|r| data[r * dim..(r + 1) * dim].to_vec())
                    .collect();
            }
            let cb = quantizer::kmeans_fit(&data, dim, k, seed, max_iters, tol)?;
            quantizer::save_codebook(&cb, &out)?;
            eprintln!(
                "codebook: {k} words, dim {dim}, {} iterations, objective {:.6e}",
                cb.history.len(),
                cb.objective
            );
            Ok(())
        }
        Command::Prepare {
            descriptors,
            codebook,
            grid,
            labels,
            annotations,
            classes,
            ann_vocab,
            out,
        } => {
            let files = expand_descriptor_paths(&descriptors)?;
            let cb = quantizer::load_codebook(&codebook)?;
            let labels = read_int_lines(&labels)?;
            let anns = match &annotations {
                Some(p) => read_int_lines(p)?,
                None => vec![Vec::new(); files.len()],
            };
            if labels.len() != files.len() || anns.len() != files.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} descriptor files, {} label lines, {} annotation lines",
                    files.len(),
                    labels.len(),
                    anns.len()
                )));
            }
            let mut docs = Vec::with_capacity(files.len());
            for (i, f) in files.iter().enumerate() {
                if labels[i].len() != 1 {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: "label line must hold exactly one integer".into(),
                    });
                }
                let set = quantizer::read_descriptors(f)?;
                docs.push(Document {
                    label: labels[i][0],
                    tokens: set.tokenize(&cb, grid.0, grid.1)?,
                    annotations: anns[i].clone(),
                });
            }
            let c = classes.unwrap_or_else(|| docs.iter().map(|d| d.label + 1).max().unwrap_or(0).max(2));
            let a = ann_vocab.unwrap_or_else(|| {
                docs.iter()
                    .flat_map(|d| d.annotations.iter().map(|x| x + 1))
                    .max()
                    .unwrap_or(0)
            });
            let vocab = JointVocab::new(cb.k, grid.0 * grid.1, a, c)?;
            let corpus = Corpus::new(vocab, docs)?;
            corpus::save_corpus(&corpus, &out)?;
            eprintln!("corpus: {} documents, J = {}", corpus.len(), corpus.vocab.joint_size());
            Ok(())
        }
        Command::Synth {
            classes,
            k,
            regions,
            ann,
            docs_per_class,
            doc_len,
            ann_len,
            concentration,
            seed,
            out,
        } => {
            let corpus = corpus::gen_synthetic(&SyntheticSpec {
                classes,
                k,
                m: regions,
                a: ann,
                docs_per_class,
                doc_len,
                ann_len,
                concentration,
                seed,
            })?;
            corpus::save_corpus(&corpus, &out)
        }
        Command::Train {
            corpus,
            hidden,
            lambda,
            lr,
            decay,
            epochs,
            seed,
            val_frac,
            patience,
            init_scale,
            log,
            out,
        } => {
            let corpus = corpus::load_corpus(&corpus)?;
            let base = TrainConfig {
                lambda: lambda[0],
                learning_rate: lr,
                decay,
                epochs,
                seed,
                hidden,
                init_scale,
                val_fraction: val_frac,
                patience,
            };
            let (params, config, logs) = if lambda.len() == 1 {
                let (p, l) = trainer::train(&corpus, &base)?;
                (p, base, vec![l])
            } else {
                trainer::select_lambda(&corpus, &base, &lambda)?
            };
            for l in &logs {
                eprintln!(
                    "lambda {}: best epoch {} of {}, score {:.4}",
                    l.lambda,
                    l.best_epoch,
                    l.epochs.len(),
                    l.best_score
                );
            }
            let ckpt = Checkpoint {
                params,
                corpus_hash: Some(corpus.header_hash()),
                config: Some(config),
            };
            trainer::save_checkpoint(&ckpt, &out)?;
            if let Some(path) = log {
                write_json(&path, &logs)?;
            }
            Ok(())
        }
        Command::Predict { model, corpus, out } => {
            let (params, corpus) = load_model_and_corpus(&model, &corpus)?;
            #[derive(Serialize)]
            struct Record {
                doc: usize,
                label: usize,
                predicted: usize,
                posterior: Vec<f64>,
            }
            let records = corpus
                .docs
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let (predicted, posterior) = model::predict_class(&params, d)?;
                    Ok(Record {
                        doc: i,
                        label: d.label,
                        predicted,
                        posterior,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&out, &records)
        }
        Command::Annotate {
            model,
            corpus,
            top,
            out,
        } => {
            let (params, corpus) = load_model_and_corpus(&model, &corpus)?;
            #[derive(Serialize)]
            struct Record {
                doc: usize,
                predicted: Vec<usize>,
                scores: Vec<f64>,
            }
            let records = corpus
                .docs
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let ranked = model::predict_annotations(&params, d, top)?;
                    Ok(Record {
                        doc: i,
                        predicted: ranked.iter().map(|x| x.0).collect(),
                        scores: ranked.iter().map(|x| x.1).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&out, &records)
        }
        Command::Eval {
            model,
            corpus,
            top,
            out,
        } => {
            let (params, corpus) = load_model_and_corpus(&model, &corpus)?;
            let report = eval::evaluate(&params, &corpus, top)?;
            write_json(&out, &report)
        }
        Command::Gradcheck {
            hidden,
            vocab,
            classes,
            trials,
            seed,
            eps,
        } => {
            let report = verify::gradcheck(hidden, vocab, classes, trials, seed, eps)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.max_overall > 1e-5 || report.tested * 5 < report.attempted * 4 {
                return Err(Error::InvalidArgument(format!(
                    "gradient check failed: max relative error {:.3e}, {} of {} points tested",
                    report.max_overall, report.tested, report.attempted
                )));
            }
            Ok(())
        }
        Command::Inspect {
            model,
            class,
            topics,
            words,
        } => {
            let params = trainer::load_checkpoint(&model)?.params;
            let r = model::inspect_class_associations(&params, class, topics, words)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            Ok(())
        }
    }
}

fn load_model_and_corpus(model: &Path, corpus: &Path) -> Result<(crate::ModelParams, Corpus)> {
    let params = trainer::load_checkpoint(model)?.params;
    let corpus = corpus::load_corpus(corpus)?;
    params.check_vocab(&corpus.vocab)?;
    Ok((params, corpus))
}

fn expand_descriptor_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ntde"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no descriptor files found".into()));
    }
    Ok(out)
}

fn read_descriptor_sets(paths: &[PathBuf]) -> Result<Vec<DescriptorSet>> {
    expand_descriptor_paths(paths)?
        .iter()
        .map(quantizer::read_descriptors)
        .collect()
}

fn read_int_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: format!("{}: {t:?}: {e}", path.display()),
                    })
                })
                .collect()
        })
        .collect()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
