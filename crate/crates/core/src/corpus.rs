//! Vocabularies, documents, the JSON-lines corpus format and a seeded
//! synthetic corpus generator.
//!
//! Visual words are indexed jointly with the region they were observed in,
//! so a `(word, region)` pair becomes one token of the joint vocabulary.
//! Annotation words follow in a tail block. With `K` visual words, `M`
//! regions and `A` annotation words the joint vocabulary has
//! `J = K·M + A` entries laid out as
//!
//! ```text
//! [ region 0: words 0..K | region 1: words 0..K | ... | annotations 0..A ]
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const CORPUS_FORMAT: &str = "nadetopic-corpus/1";

/// Dimensions of the joint visual/region/annotation vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointVocab {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "A")]
    pub a: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

/// A decoded joint index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointWord {
    Visual { word: usize, region: usize },
    Annotation(usize),
}

impl JointVocab {
    pub fn new(k: usize, m: usize, a: usize, c: usize) -> Result<Self> {
        let vocab = JointVocab {
            k,
            m,
            a,
            c,
            visual_names: None,
            annotation_names: None,
            class_names: None,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if self.m < 1 {
            return Err(Error::InvalidArgument("M must be at least 1".into()));
        }
        if self.c < 2 {
            return Err(Error::InvalidArgument("C must be at least 2".into()));
        }
        let check = |name: &str, names: &Option<Vec<String>>, n: usize| match names {
            Some(v) if v.len() != n => Err(Error::InvalidArgument(format!(
                "{name} has {} entries, expected {n}",
                v.len()
            ))),
            _ => Ok(()),
        };
        check("visual_names", &self.visual_names, self.k)?;
        check("annotation_names", &self.annotation_names, self.a)?;
        check("class_names", &self.class_names, self.c)?;
        Ok(())
    }

    /// Number of `(word, region)` pairs, `K·M`.
    pub fn visual_size(&self) -> usize {
        self.k * self.m
    }

    /// Size of the joint vocabulary, `J = K·M + A`.
    pub fn joint_size(&self) -> usize {
        self.visual_size() + self.a
    }

    pub fn joint_index(&self, word: usize, region: usize) -> Result<usize> {
        if word >= self.k {
            return Err(Error::bounds("word", word, self.k));
        }
        if region >= self.m {
            return Err(Error::bounds("region", region, self.m));
        }
        Ok(region * self.k + word)
    }

    pub fn annotation_index(&self, a: usize) -> Result<usize> {
        if a >= self.a {
            return Err(Error::bounds("annotation", a, self.a));
        }
        Ok(self.visual_size() + a)
    }

    pub fn decode(&self, joint: usize) -> Result<JointWord> {
        if joint >= self.joint_size() {
            return Err(Error::bounds("joint index", joint, self.joint_size()));
        }
        let visual = self.visual_size();
        Ok(if joint < visual {
            JointWord::Visual {
                word: joint % self.k,
                region: joint / self.k,
            }
        } else {
            JointWord::Annotation(joint - visual)
        })
    }

    /// Human readable name of a joint word, falling back to indices.
    pub fn describe(&self, joint: usize) -> Result<String> {
        Ok(match self.decode(joint)? {
            JointWord::Visual { word, region } => {
                let w = self
                    .visual_names
                    .as_ref()
                    .map(|n| n[word].clone())
                    .unwrap_or_else(|| format!("w{word}"));
                format!("{w}@r{region}")
            }
            JointWord::Annotation(a) => self
                .annotation_names
                .as_ref()
                .map(|n| n[a].clone())
                .unwrap_or_else(|| format!("a{a}")),
        })
    }

    /// Checks that every index in `doc` lies inside this vocabulary.
    pub fn check_document(&self, doc: &Document) -> std::result::Result<(), String> {
        if doc.label >= self.c {
            return Err(format!("label {} out of range (C = {})", doc.label, self.c));
        }
        for (i, &(w, r)) in doc.tokens.iter().enumerate() {
            if w >= self.k {
                return Err(format!("token {i}: word {w} out of range (K = {})", self.k));
            }
            if r >= self.m {
                return Err(format!("token {i}: region {r} out of range (M = {})", self.m));
            }
        }
        for (i, &a) in doc.annotations.iter().enumerate() {
            if a >= self.a {
                return Err(format!("annotation {i}: {a} out of range (A = {})", self.a));
            }
        }
        Ok(())
    }

    pub(crate) fn validate_document(&self, ordinal: usize, doc: &Document) -> Result<()> {
        self.check_document(doc)
            .map_err(|msg| Error::InvalidDocument { doc: ordinal, msg })
    }

    /// Same dimensions, ignoring display names.
    pub fn same_shape(&self, other: &JointVocab) -> bool {
        (self.k, self.m, self.a, self.c) == (other.k, other.m, other.a, other.c)
    }
}

/// A labeled image: visual tokens with their regions plus annotation words.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Document {
    pub label: usize,
    /// `(visual word, region)` pairs in stored order.
    pub tokens: Vec<(usize, usize)>,
    #[serde(default)]
    pub annotations: Vec<usize>,
}

impl Document {
    /// Joint indices of the visual tokens, in stored order.
    ///
    /// Indices are not bounds checked; validate the document first.
    pub fn visual_joint(&self, vocab: &JointVocab) -> Vec<usize> {
        self.tokens.iter().map(|&(w, r)| r * vocab.k + w).collect()
    }

    /// The canonical token sequence: visual tokens then annotation words,
    /// each block in stored order.
    pub fn joint_sequence(&self, vocab: &JointVocab) -> Vec<usize> {
        let offset = vocab.visual_size();
        let mut seq = self.visual_joint(vocab);
        seq.extend(self.annotations.iter().map(|&a| offset + a));
        seq
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: JointVocab,
    pub docs: Vec<Document>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(flatten)]
    vocab: JointVocab,
}

impl Corpus {
    pub fn new(vocab: JointVocab, docs: Vec<Document>) -> Result<Self> {
        vocab.validate()?;
        for (i, d) in docs.iter().enumerate() {
            vocab.validate_document(i, d)?;
        }
        Ok(Corpus { vocab, docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn header_line(&self) -> String {
        let header = Header {
            format: CORPUS_FORMAT.to_string(),
            vocab: self.vocab.clone(),
        };
        serde_json::to_string(&header).expect("header serializes")
    }

    /// CRC32 of the serialized header line, used to tie checkpoints to the
    /// corpus vocabulary they were trained on.
    pub fn header_hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.header_line().as_bytes()))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.header_line())?;
        for doc in &self.docs {
            writeln!(out, "{}", serde_json::to_string(doc).expect("document serializes"))?;
        }
        out.flush()
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => {
                    return Err(Error::Parse {
                        line: 1,
                        msg: "missing header".into(),
                    })
                }
                Some((i, line)) => {
                    let line = line.map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    })?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    })?;
                }
            }
        };
        if header.format != CORPUS_FORMAT {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unknown format {:?}", header.format),
            });
        }
        header.vocab.validate()?;

        let mut docs = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            header.vocab.validate_document(docs.len(), &doc)?;
            docs.push(doc);
        }
        Ok(Corpus {
            vocab: header.vocab,
            docs,
        })
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    corpus
        .write_to(BufWriter::new(file))
        .map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::read_from(BufReader::new(file))
}

/// Parameters of [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub k: usize,
    pub m: usize,
    pub a: usize,
    pub docs_per_class: usize,
    pub doc_len: usize,
    pub ann_len: usize,
    pub concentration: f64,
    pub seed: u64,
}

/// Draws a symmetric Dirichlet sample as normalized Gamma(concentration, 1)
/// variables.
///
/// Small shapes underflow `f64` when sampled directly, so each variable is
/// drawn in log space through `Gamma(α) = Gamma(α + 1) · U^(1/α)`.
fn dirichlet_weights<R: Rng>(rng: &mut R, n: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = Open01.sample(rng);
            g.ln() + u.ln() / concentration
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Seeded synthetic corpus: each class owns one categorical distribution over
/// the visual joint words and one over the annotation words. Documents are
/// emitted class by class, `docs_per_class` per class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.docs_per_class < 1 {
        return Err(Error::InvalidArgument("docs_per_class must be at least 1".into()));
    }
    if !(spec.concentration > 0.0 && spec.concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive and finite, got {}",
            spec.concentration
        )));
    }
    let vocab = JointVocab::new(spec.k, spec.m, spec.a, spec.classes)?;
    let visual = vocab.visual_size();
    let mut docs = Vec::with_capacity(spec.classes * spec.docs_per_class);

    for class in 0..spec.classes {
        let mut rng = seeded_rng(spec.seed, class as u64);
        let visual_dist = WeightedIndex::new(dirichlet_weights(&mut rng, visual, spec.concentration))
            .expect("normalized weights");
        let ann_dist = if spec.a > 0 {
            Some(
                WeightedIndex::new(dirichlet_weights(&mut rng, spec.a, spec.concentration))
                    .expect("normalized weights"),
            )
        } else {
            None
        };
        for _ in 0..spec.docs_per_class {
            let tokens = (0..spec.doc_len)
                .map(|_| {
                    let j = visual_dist.sample(&mut rng);
                    (j % spec.k, j / spec.k)
                })
                .collect();
            let annotations = match &ann_dist {
                Some(d) => (0..spec.ann_len).map(|_| d.sample(&mut rng)).collect(),
                None => Vec::new(),
            };
            docs.push(Document {
                label: class,
                tokens,
                annotations,
            });
        }
    }
    Ok(Corpus { vocab, docs })
}
