//! Exact gradients of the hybrid loss, plain SGD, the training loop and the
//! checkpoint format.
//!
//! The per-document loss is `-log p(y | v) + λ Σ_i -log p(v_i | v_<i)`.
//! Gradients come from one forward sweep that stores every pre-activation,
//! followed by a backward sweep from the last token to the first carrying
//! the running pre-activation gradient `δa`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, JointVocab};
use crate::error::{Error, Result};
use crate::model::{self, log_softmax, node_logit, softplus, ModelParams, NllParts};
use crate::seeded_rng;
use crate::wordtree::WordTree;

/// Gradient accumulator with the same block shapes as [`ModelParams`].
///
/// Only the `W` columns and tree nodes reached by a document are ever
/// nonzero; those are tracked so clearing and applying a gradient costs
/// time proportional to the document, not to `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: usize,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub v: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    touched_words: Vec<usize>,
    touched_nodes: Vec<usize>,
    word_seen: Vec<bool>,
    node_seen: Vec<bool>,
}

impl Gradients {
    pub fn zeros(params: &ModelParams) -> Self {
        let j = params.num_words();
        let t = params.num_nodes();
        Gradients {
            hidden: params.hidden,
            w: vec![0.0; params.w.len()],
            c: vec![0.0; params.c.len()],
            v: vec![0.0; params.v.len()],
            b: vec![0.0; params.b.len()],
            u: vec![0.0; params.u.len()],
            d: vec![0.0; params.d.len()],
            touched_words: Vec::new(),
            touched_nodes: Vec::new(),
            word_seen: vec![false; j],
            node_seen: vec![false; t],
        }
    }

    /// Resets every entry to zero.
    pub fn clear(&mut self) {
        let h = self.hidden;
        for &v in &self.touched_words {
            self.w[v * h..(v + 1) * h].fill(0.0);
            self.word_seen[v] = false;
        }
        for &t in &self.touched_nodes {
            self.v[t * h..(t + 1) * h].fill(0.0);
            self.b[t] = 0.0;
            self.node_seen[t] = false;
        }
        self.touched_words.clear();
        self.touched_nodes.clear();
        self.c.fill(0.0);
        self.u.fill(0.0);
        self.d.fill(0.0);
    }

    /// Joint words whose `W` column may be nonzero.
    pub fn touched_words(&self) -> &[usize] {
        &self.touched_words
    }

    /// Tree nodes whose `V` row and `b` entry may be nonzero.
    pub fn touched_nodes(&self) -> &[usize] {
        &self.touched_nodes
    }

    pub(crate) fn mark_word(&mut self, v: usize) {
        if !self.word_seen[v] {
            self.word_seen[v] = true;
            self.touched_words.push(v);
        }
    }

    pub(crate) fn mark_node(&mut self, t: usize) {
        if !self.node_seen[t] {
            self.node_seen[t] = true;
            self.touched_nodes.push(t);
        }
    }

    /// Column `v` of `δW`.
    pub fn w_col(&self, v: usize) -> &[f64] {
        &self.w[v * self.hidden..(v + 1) * self.hidden]
    }

    pub fn is_finite(&self) -> bool {
        [&self.w, &self.c, &self.v, &self.b, &self.u, &self.d]
            .iter()
            .all(|blk| blk.iter().all(|x| x.is_finite()))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of the hybrid loss for `tokens` in the given order.
pub fn compute_gradients(
    params: &ModelParams,
    tokens: &[usize],
    label: usize,
    lambda: f64,
) -> Result<(Gradients, NllParts)> {
    if label >= params.num_classes() {
        return Err(Error::bounds("label", label, params.num_classes()));
    }
    if let Some(&v) = tokens.iter().find(|&&v| v >= params.num_words()) {
        return Err(Error::bounds("joint index", v, params.num_words()));
    }
    let mut grads = Gradients::zeros(params);
    let parts = accumulate_gradients(params, tokens, label, lambda, &mut grads);
    Ok((grads, parts))
}

/// Writes the gradients for one sequence into a cleared accumulator.
/// Indices are assumed valid.
pub(crate) fn accumulate_gradients(
    params: &ModelParams,
    tokens: &[usize],
    label: usize,
    lambda: f64,
    grads: &mut Gradients,
) -> NllParts {
    let hdim = params.hidden;
    let n = tokens.len();

    // forward: pre-activation before each token, then the full document
    let mut pre = Vec::with_capacity((n + 1) * hdim);
    pre.extend_from_slice(&params.c);
    for (i, &v) in tokens.iter().enumerate() {
        let col = params.w_col(v);
        for k in 0..hdim {
            let next = pre[i * hdim + k] + col[k];
            pre.push(next);
        }
    }
    let a_doc = &pre[n * hdim..];
    let h_doc = model::relu(a_doc);

    // supervised head
    let logits: Vec<f64> = (0..params.num_classes())
        .map(|y| params.d[y] + model::dot(params.u_row(y), &h_doc))
        .collect();
    let log_post = log_softmax(&logits);
    let disc = -log_post[label];
    for (y, lp) in log_post.iter().enumerate() {
        let delta = lp.exp() - if y == label { 1.0 } else { 0.0 };
        grads.d[y] = delta;
        for (g, h) in grads.u[y * hdim..(y + 1) * hdim].iter_mut().zip(&h_doc) {
            *g = delta * h;
        }
    }
    let mut delta_a: Vec<f64> = (0..hdim)
        .map(|k| {
            if a_doc[k] > 0.0 {
                (0..params.num_classes())
                    .map(|y| params.u[y * hdim + k] * grads.d[y])
                    .sum()
            } else {
                0.0
            }
        })
        .collect();

    // backward over positions
    let mut gen = 0.0;
    let mut h = vec![0.0; hdim];
    let mut delta_h = vec![0.0; hdim];
    for i in (0..n).rev() {
        let v = tokens[i];
        let a_i = &pre[i * hdim..(i + 1) * hdim];
        for (hk, ak) in h.iter_mut().zip(a_i) {
            *hk = ak.max(0.0);
        }
        delta_h.fill(0.0);
        let (nodes, bits) = params.tree.path_unchecked(v);
        for (&t, &bit) in nodes.iter().zip(bits) {
            let x = node_logit(params, t, &h);
            gen += if bit == 1 { softplus(-x) } else { softplus(x) };
            let dt = lambda * (sigmoid(x) - bit as f64);
            grads.mark_node(t);
            grads.b[t] += dt;
            for (g, hk) in grads.v[t * hdim..(t + 1) * hdim].iter_mut().zip(&h) {
                *g += dt * hk;
            }
            for (dh, vk) in delta_h.iter_mut().zip(params.v_row(t)) {
                *dh += dt * vk;
            }
        }
        // h_i depends on tokens before i only, so W[:, v_i] receives the
        // gradient of later positions before δh_i is folded in.
        grads.mark_word(v);
        for (g, da) in grads.w[v * hdim..(v + 1) * hdim].iter_mut().zip(&delta_a) {
            *g += da;
        }
        for k in 0..hdim {
            if a_i[k] > 0.0 {
                delta_a[k] += delta_h[k];
            }
        }
    }
    grads.c.copy_from_slice(&delta_a);

    NllParts {
        disc,
        gen,
        total: disc + lambda * gen,
    }
}

/// `θ ← θ - lr·δθ` for every block.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.hidden != params.hidden
        || grads.w.len() != params.w.len()
        || grads.v.len() != params.v.len()
        || grads.u.len() != params.u.len()
    {
        return Err(Error::Shape("gradient shapes do not match parameters".into()));
    }
    let h = params.hidden;
    for &v in &grads.touched_words {
        for (p, g) in params.w[v * h..(v + 1) * h].iter_mut().zip(grads.w_col(v)) {
            *p -= lr * g;
        }
    }
    for &t in &grads.touched_nodes {
        for (p, g) in params.v[t * h..(t + 1) * h]
            .iter_mut()
            .zip(&grads.v[t * h..(t + 1) * h])
        {
            *p -= lr * g;
        }
        params.b[t] -= lr * grads.b[t];
    }
    for (p, g) in params.c.iter_mut().zip(&grads.c) {
        *p -= lr * g;
    }
    for (p, g) in params.u.iter_mut().zip(&grads.u) {
        *p -= lr * g;
    }
    for (p, g) in params.d.iter_mut().zip(&grads.d) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the generative term.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub init_scale: f64,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            learning_rate: 0.05,
            decay: 1.0,
            epochs: 100,
            seed: 1,
            hidden: 32,
            init_scale: 0.1,
            val_fraction: 0.2,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return bad(format!("decay must be positive, got {}", self.decay));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.hidden < 1 {
            return bad("hidden size must be at least 1".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Mean per-document losses over one epoch, measured before each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub mean_disc: f64,
    pub mean_gen: f64,
    pub mean_total: f64,
}

/// One pass over `docs` in a shuffled order, drawing a fresh token
/// permutation for every update.
pub fn train_epoch(
    params: &mut ModelParams,
    docs: &[Document],
    lambda: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if docs.is_empty() {
        return Err(Error::InsufficientData("cannot train on an empty corpus".into()));
    }
    for (i, d) in docs.iter().enumerate() {
        params.vocab.validate_document(i, d)?;
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(rng);
    let mut grads = Gradients::zeros(params);
    let (mut disc, mut gen, mut total) = (0.0, 0.0, 0.0);
    for i in order {
        let doc = &docs[i];
        let mut tokens = doc.joint_sequence(&params.vocab);
        tokens.shuffle(rng);
        grads.clear();
        let parts = accumulate_gradients(params, &tokens, doc.label, lambda, &mut grads);
        sgd_step(params, &grads, lr)?;
        disc += parts.disc;
        gen += parts.gen;
        total += parts.total;
    }
    let n = docs.len() as f64;
    Ok(EpochStats {
        mean_disc: disc / n,
        mean_gen: gen / n,
        mean_total: total / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub stats: EpochStats,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub lambda: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Validation accuracy of the selected epoch, or its mean training loss
    /// when no validation split was requested.
    pub best_score: f64,
    pub train_docs: usize,
    pub val_docs: usize,
}

/// Seeded train/validation split. Returns `(train, validation)` indices.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction <= 0.0 {
        return Ok((idx, Vec::new()));
    }
    if n < 2 {
        return Err(Error::InsufficientData(
            "a validation split needs at least 2 documents".into(),
        ));
    }
    idx.shuffle(&mut seeded_rng(seed, 2));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

fn accuracy_on(params: &ModelParams, docs: &[&Document]) -> Result<f64> {
    let mut correct = 0;
    for doc in docs {
        if model::predict_class(params, doc)?.0 == doc.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / docs.len() as f64)
}

/// Trains from a fresh initialization and returns the parameters of the
/// best epoch.
///
/// Epochs are scored by validation accuracy, or by mean training loss when
/// `val_fraction` is zero. Training stops once `patience` consecutive epochs
/// fail to improve on the best score.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InsufficientData("cannot train on an empty corpus".into()));
    }
    let vocab = &corpus.vocab;
    let tree = WordTree::build_balanced(vocab.joint_size(), config.seed)?;
    let mut params = ModelParams::init(config.hidden, vocab, &tree, config.seed, config.init_scale)?;

    let (train_idx, val_idx) = split_validation(corpus.len(), config.val_fraction, config.seed)?;
    let train_docs: Vec<Document> = train_idx.iter().map(|&i| corpus.docs[i].clone()).collect();
    let val_docs: Vec<&Document> = val_idx.iter().map(|&i| &corpus.docs[i]).collect();

    let mut rng = seeded_rng(config.seed, 3);
    let mut best = params.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut lr = config.learning_rate;

    for epoch in 1..=config.epochs {
        let stats = train_epoch(&mut params, &train_docs, config.lambda, lr, &mut rng)?;
        let val_accuracy = if val_docs.is_empty() {
            None
        } else {
            Some(accuracy_on(&params, &val_docs)?)
        };
        // higher is better in both modes
        let score = val_accuracy.unwrap_or(-stats.mean_total);
        log.push(EpochLog {
            epoch,
            learning_rate: lr,
            stats,
            val_accuracy,
        });
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best.clone_from(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
        lr *= config.decay;
    }

    let best_score = if val_docs.is_empty() { -best_score } else { best_score };
    Ok((
        best,
        TrainLog {
            lambda: config.lambda,
            epochs: log,
            best_epoch,
            best_score,
            train_docs: train_docs.len(),
            val_docs: val_docs.len(),
        },
    ))
}

/// Trains once per `λ` in `grid` and keeps the run with the best validation
/// accuracy (earliest entry on ties). Requires `val_fraction > 0`.
pub fn select_lambda(
    corpus: &Corpus,
    config: &TrainConfig,
    grid: &[f64],
) -> Result<(ModelParams, TrainConfig, Vec<TrainLog>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if config.val_fraction <= 0.0 && grid.len() > 1 {
        return Err(Error::InvalidArgument(
            "selecting lambda needs a validation fraction > 0".into(),
        ));
    }
    let mut best: Option<(ModelParams, TrainConfig, f64)> = None;
    let mut logs = Vec::new();
    for &lambda in grid {
        let cfg = TrainConfig {
            lambda,
            ..config.clone()
        };
        let (params, log) = train(corpus, &cfg)?;
        let score = log.best_score;
        logs.push(log);
        if best.as_ref().is_none_or(|b| score > b.2) {
            best = Some((params, cfg, score));
        }
    }
    let (params, cfg, _) = best.expect("nonempty grid");
    Ok((params, cfg, logs))
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus the metadata stored alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: Option<TrainConfig>,
    pub corpus_hash: Option<String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            config: None,
            corpus_hash: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    #[serde(rename = "H")]
    hidden: usize,
    #[serde(flatten)]
    vocab: JointVocab,
    #[serde(rename = "J")]
    j: usize,
    #[serde(rename = "T")]
    t: usize,
    tree_seed: u64,
    leaf_words: Vec<usize>,
    #[serde(default)]
    config: Option<TrainConfig>,
    #[serde(default)]
    corpus_hash: Option<String>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let (h, j) = (p.hidden, p.num_words());
    let meta = CheckpointMeta {
        hidden: h,
        vocab: p.vocab.clone(),
        j,
        t: p.num_nodes(),
        tree_seed: p.tree.seed(),
        leaf_words: p.tree.leaf_words().to_vec(),
        config: ckpt.config.clone(),
        corpus_hash: ckpt.corpus_hash.clone(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");

    let mut payload = Vec::new();
    payload.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    payload.extend_from_slice(&meta);
    // W row-major H×J on disk
    for k in 0..h {
        for v in 0..j {
            payload.extend_from_slice(&p.w[v * h + k].to_le_bytes());
        }
    }
    for block in [&p.c, &p.v, &p.b, &p.u, &p.d] {
        for x in block.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::Corrupt(m.to_string());
    if bytes.len() < 8 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(corrupt("file too short"));
    }
    let (payload, crc) = bytes[8..].split_at(bytes.len() - 12);
    if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let meta_len = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
    let meta_bytes = payload
        .get(4..4 + meta_len)
        .ok_or_else(|| corrupt("metadata truncated"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;

    let vocab = meta.vocab;
    vocab.validate()?;
    let (h, j, t, c) = (meta.hidden, vocab.joint_size(), meta.t, vocab.c);
    if meta.j != j || t + 1 != j || meta.leaf_words.len() != j {
        return Err(Error::Shape(format!(
            "inconsistent dimensions: J={} (K·M+A={j}), T={t}, {} leaves",
            meta.j,
            meta.leaf_words.len()
        )));
    }
    let tree = WordTree::from_leaf_words(meta.leaf_words, meta.tree_seed)?;
    let mut params = ModelParams::zeros(h, &vocab, &tree)?;

    let mut floats = payload[4 + meta_len..].chunks_exact(8);
    let expected = h * j + h + t * h + t + c * h + c;
    if floats.len() != expected || !floats.remainder().is_empty() {
        return Err(Error::Shape(format!(
            "payload holds {} values, expected {expected}",
            payload[4 + meta_len..].len() as f64 / 8.0
        )));
    }
    let mut next = || f64::from_le_bytes(floats.next().unwrap().try_into().unwrap());
    for k in 0..h {
        for v in 0..j {
            params.w[v * h + k] = next();
        }
    }
    for block in [
        &mut params.c,
        &mut params.v,
        &mut params.b,
        &mut params.u,
        &mut params.d,
    ] {
        for x in block.iter_mut() {
            *x = next();
        }
    }
    params.validate()?;
    Ok(Checkpoint {
        params,
        config: meta.config,
        corpus_hash: meta.corpus_hash,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(ckpt))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SyntheticSpec};
    use crate::model::joint_nll;
    use rand::Rng;

    fn random_params(k: usize, m: usize, a: usize, c: usize, hidden: usize, seed: u64) -> ModelParams {
        let vocab = JointVocab::new(k, m, a, c).unwrap();
        let tree = WordTree::build_balanced(vocab.joint_size(), seed).unwrap();
        let mut p = ModelParams::zeros(hidden, &vocab, &tree).unwrap();
        let mut rng = seeded_rng(seed, 11);
        for block in [&mut p.w, &mut p.c, &mut p.v, &mut p.b, &mut p.u, &mut p.d] {
            for x in block.iter_mut() {
                *x = rng.random_range(-0.8..0.8);
            }
        }
        p
    }

    #[test]
    fn lambda_zero_leaves_tree_untouched() {
        let p = random_params(4, 2, 3, 3, 5, 1);
        let (g, parts) = compute_gradients(&p, &[1, 9, 4, 4, 0], 2, 0.0).unwrap();
        assert!(g.v.iter().all(|&x| x == 0.0));
        assert!(g.b.iter().all(|&x| x == 0.0));
        let h = crate::model::relu(&{
            let mut a = p.c.clone();
            for v in [1, 9, 4, 4, 0] {
                for (x, w) in a.iter_mut().zip(p.w_col(v)) {
                    *x += w;
                }
            }
            a
        });
        let f = crate::model::class_posterior(&p, &h);
        for y in 0..3 {
            let want = f[y] - if y == 2 { 1.0 } else { 0.0 };
            assert!((g.d[y] - want).abs() < 1e-15);
        }
        assert_eq!(parts.total, parts.disc);
    }

    #[test]
    fn empty_document_gradients() {
        let p = random_params(3, 1, 2, 4, 6, 2);
        let (g, parts) = compute_gradients(&p, &[], 1, 0.9).unwrap();
        assert!(g.w.iter().chain(&g.v).chain(&g.b).all(|&x| x == 0.0));
        assert_eq!(parts.gen, 0.0);
        let f = crate::model::class_posterior(&p, &crate::model::relu(&p.c));
        for y in 0..4 {
            assert!((g.d[y] - (f[y] - if y == 1 { 1.0 } else { 0.0 })).abs() < 1e-15);
        }
        for k in 0..6 {
            let want = if p.c[k] > 0.0 {
                (0..4).map(|y| p.u[y * 6 + k] * g.d[y]).sum::<f64>()
            } else {
                0.0
            };
            assert!((g.c[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_from_gradient_pass_matches_forward() {
        let p = random_params(5, 2, 4, 3, 7, 3);
        let tokens = [3, 13, 0, 7, 7, 11];
        let (_, parts) = compute_gradients(&p, &tokens, 0, 0.4).unwrap();
        let fwd = crate::model::sequence_nll(&p, &tokens, 0, 0.4);
        assert!((parts.disc - fwd.disc).abs() < 1e-12);
        assert!((parts.gen - fwd.gen).abs() < 1e-12);
    }

    #[test]
    fn gradients_are_linear_in_lambda() {
        let p = random_params(4, 2, 2, 3, 5, 4);
        let tokens = [0, 5, 9, 2, 2, 8];
        let (g0, _) = compute_gradients(&p, &tokens, 1, 0.0).unwrap();
        let (g1, _) = compute_gradients(&p, &tokens, 1, 1.0).unwrap();
        let lam = 0.37;
        let (gl, _) = compute_gradients(&p, &tokens, 1, lam).unwrap();
        let blocks = |g: &Gradients| [g.w.clone(), g.c.clone(), g.v.clone(), g.b.clone(), g.u.clone(), g.d.clone()];
        for ((b0, b1), bl) in blocks(&g0).iter().zip(blocks(&g1).iter()).zip(blocks(&gl).iter()) {
            for ((x0, x1), xl) in b0.iter().zip(b1).zip(bl) {
                let want = x0 + lam * (x1 - x0);
                assert!((xl - want).abs() <= 1e-12 * (1.0 + want.abs()), "{xl} vs {want}");
            }
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let p = random_params(2, 1, 1, 2, 2, 5);
        assert!(compute_gradients(&p, &[3], 0, 1.0).is_err());
        assert!(compute_gradients(&p, &[0], 2, 1.0).is_err());
    }

    #[test]
    fn clear_resets_everything() {
        let p = random_params(4, 2, 2, 3, 5, 6);
        let mut g = Gradients::zeros(&p);
        accumulate_gradients(&p, &[1, 2, 3], 0, 1.0, &mut g);
        assert!(g.touched_words().len() == 3);
        g.clear();
        assert_eq!(g, Gradients::zeros(&p));
    }

    #[test]
    fn sgd_step_examples() {
        let p = random_params(4, 2, 2, 3, 5, 7);
        let (g, _) = compute_gradients(&p, &[1, 2, 8], 0, 1.0).unwrap();
        let mut q = p.clone();
        sgd_step(&mut q, &g, 0.0).unwrap();
        assert_eq!(q, p);

        let mut r = p.clone();
        sgd_step(&mut q, &g, 0.1).unwrap();
        sgd_step(&mut r, &g, 0.1).unwrap();
        assert_eq!(q, r);

        let other = random_params(4, 2, 2, 3, 6, 7);
        let (g2, _) = compute_gradients(&other, &[1], 0, 1.0).unwrap();
        assert!(sgd_step(&mut q, &g2, 0.1).is_err());
    }

    #[test]
    fn repeated_steps_decrease_loss() {
        let mut p = random_params(5, 2, 3, 4, 8, 8);
        let doc = Document {
            label: 3,
            tokens: vec![(1, 0), (4, 1), (1, 1), (0, 0)],
            annotations: vec![2],
        };
        let tokens = doc.joint_sequence(&p.vocab);
        let mut prev = joint_nll(&p, &doc, 0.5).unwrap().total;
        for _ in 0..20 {
            let (g, _) = compute_gradients(&p, &tokens, doc.label, 0.5).unwrap();
            sgd_step(&mut p, &g, 0.01).unwrap();
            let now = joint_nll(&p, &doc, 0.5).unwrap().total;
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn permutations_are_fresh_per_update() {
        let vocab = JointVocab::new(10, 1, 0, 2).unwrap();
        let mut rng = seeded_rng(99, 3);
        let doc = Document {
            label: 0,
            tokens: (0..10).map(|w| (w, 0)).collect(),
            annotations: vec![],
        };
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let mut t = doc.joint_sequence(&vocab);
            t.shuffle(&mut rng);
            seen.insert(t);
        }
        assert!(seen.len() >= 95);
    }

    fn small_corpus() -> Corpus {
        gen_synthetic(&SyntheticSpec {
            classes: 2,
            k: 6,
            m: 2,
            a: 3,
            docs_per_class: 5,
            doc_len: 8,
            ann_len: 2,
            concentration: 0.3,
            seed: 17,
        })
        .unwrap()
    }

    #[test]
    fn epochs_are_reproducible() {
        let corpus = small_corpus();
        let tree = WordTree::build_balanced(corpus.vocab.joint_size(), 1).unwrap();
        let p0 = ModelParams::init(6, &corpus.vocab, &tree, 1, 0.1).unwrap();
        let run = || {
            let mut p = p0.clone();
            let mut rng = seeded_rng(5, 3);
            let s = train_epoch(&mut p, &corpus.docs, 0.1, 0.05, &mut rng).unwrap();
            (p, s)
        };
        let (pa, sa) = run();
        let (pb, sb) = run();
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
        assert!(sa.mean_disc.is_finite() && sa.mean_gen.is_finite());
        let mut p = p0.clone();
        assert!(train_epoch(&mut p, &[], 0.1, 0.05, &mut seeded_rng(5, 3)).is_err());
    }

    #[test]
    fn training_lowers_the_loss() {
        let corpus = small_corpus();
        let config = TrainConfig {
            epochs: 50,
            hidden: 8,
            val_fraction: 0.0,
            patience: 50,
            ..Default::default()
        };
        let (_, log) = train(&corpus, &config).unwrap();
        assert_eq!(log.epochs.len(), 50);
        let first = log.epochs[0].stats.mean_total;
        let last = log.epochs[49].stats.mean_total;
        assert!(last < first, "{last} >= {first}");
        assert!(log.epochs.iter().all(|e| e.val_accuracy.is_none()));
    }

    #[test]
    fn zero_patience_runs_one_epoch_past_the_best() {
        let corpus = small_corpus();
        let config = TrainConfig {
            epochs: 50,
            hidden: 4,
            patience: 0,
            val_fraction: 0.3,
            ..Default::default()
        };
        let (_, log) = train(&corpus, &config).unwrap();
        assert_eq!(log.epochs.len(), log.best_epoch + 1);
        assert_eq!(log.val_docs, 3);
    }

    #[test]
    fn train_rejects_bad_input() {
        let corpus = small_corpus();
        let empty = Corpus {
            vocab: corpus.vocab.clone(),
            docs: vec![],
        };
        assert!(train(&empty, &TrainConfig::default()).is_err());
        let one = Corpus {
            vocab: corpus.vocab.clone(),
            docs: vec![corpus.docs[0].clone()],
        };
        assert!(train(&one, &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            val_fraction: 1.0,
            ..Default::default()
        };
        assert!(train(&corpus, &bad).is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_validation(10, 0.25, 3).unwrap();
        assert_eq!((t.len(), v.len()), (7, 3));
        let mut all: Vec<_> = t.iter().chain(&v).cloned().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_validation(10, 0.25, 3).unwrap(), (t, v));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut ckpt = Checkpoint::new(random_params(4, 3, 2, 3, 5, 9));
        ckpt.config = Some(TrainConfig::default());
        ckpt.corpus_hash = Some("deadbeef".into());
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn checkpoint_errors() {
        let bytes = encode_checkpoint(&Checkpoint::new(random_params(3, 2, 1, 2, 3, 10)));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 9]),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(decode_checkpoint(&bytes[..6]), Err(Error::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt(_))));
        let mut versioned = bytes.clone();
        versioned[4] = 2;
        assert!(matches!(
            decode_checkpoint(&versioned),
            Err(Error::Version { found: 2, .. })
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::Corrupt(_))));
    }
}
