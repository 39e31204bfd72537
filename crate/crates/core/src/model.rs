//! Parameters and forward computations.
//!
//! The hidden layer for position `i` is `h_i = max(0, c + Σ_{k<i} W[:, v_k])`.
//! Each word conditional is a product of binary logistic decisions along the
//! word's path in the [`WordTree`]; the class posterior is a softmax over
//! `d + U h_y`, where `h_y` absorbs every token of the document.
//!
//! Everything is computed in `f64` and in log space; probabilities are only
//! materialized by [`class_posterior`].

use rand::Rng;
use serde::Serialize;

use crate::corpus::{Document, JointVocab, JointWord};
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::wordtree::WordTree;

/// The full parameter set of the model.
///
/// Matrices are stored as flat `Vec<f64>`. `W` is kept word-major so the
/// column touched by one token is contiguous: `W[k, v]` lives at
/// `w[v * H + k]`. `V` (`T×H`) and `U` (`C×H`) are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hidden: usize,
    pub vocab: JointVocab,
    pub tree: WordTree,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub v: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub d: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(hidden: usize, vocab: &JointVocab, tree: &WordTree) -> Result<Self> {
        if hidden < 1 {
            return Err(Error::InvalidArgument("hidden size must be at least 1".into()));
        }
        vocab.validate()?;
        let j = vocab.joint_size();
        if tree.num_words() != j {
            return Err(Error::Shape(format!(
                "tree has {} leaves but the vocabulary has {j} joint words",
                tree.num_words()
            )));
        }
        let t = tree.num_nodes();
        Ok(ModelParams {
            hidden,
            vocab: vocab.clone(),
            tree: tree.clone(),
            w: vec![0.0; hidden * j],
            c: vec![0.0; hidden],
            v: vec![0.0; t * hidden],
            b: vec![0.0; t],
            u: vec![0.0; vocab.c * hidden],
            d: vec![0.0; vocab.c],
        })
    }

    /// `W` uniform on `±init_scale/√H`, everything else zero.
    pub fn init(
        hidden: usize,
        vocab: &JointVocab,
        tree: &WordTree,
        seed: u64,
        init_scale: f64,
    ) -> Result<Self> {
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "init_scale must be positive, got {init_scale}"
            )));
        }
        let mut params = Self::zeros(hidden, vocab, tree)?;
        let bound = init_scale / (hidden as f64).sqrt();
        let mut rng = seeded_rng(seed, 1);
        for x in &mut params.w {
            *x = rng.random_range(-bound..=bound);
        }
        Ok(params)
    }

    pub fn num_words(&self) -> usize {
        self.vocab.joint_size()
    }

    pub fn num_nodes(&self) -> usize {
        self.tree.num_nodes()
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.c
    }

    /// Column `v` of `W`.
    #[inline]
    pub fn w_col(&self, v: usize) -> &[f64] {
        &self.w[v * self.hidden..(v + 1) * self.hidden]
    }

    /// Row `t` of `V`.
    #[inline]
    pub fn v_row(&self, t: usize) -> &[f64] {
        &self.v[t * self.hidden..(t + 1) * self.hidden]
    }

    /// Row `y` of `U`.
    #[inline]
    pub fn u_row(&self, y: usize) -> &[f64] {
        &self.u[y * self.hidden..(y + 1) * self.hidden]
    }

    /// Checks block shapes and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        let (h, j, t, c) = (self.hidden, self.num_words(), self.num_nodes(), self.num_classes());
        let blocks: [(&str, &[f64], usize); 6] = [
            ("W", &self.w, h * j),
            ("c", &self.c, h),
            ("V", &self.v, t * h),
            ("b", &self.b, t),
            ("U", &self.u, c * h),
            ("d", &self.d, c),
        ];
        if self.tree.num_words() != j {
            return Err(Error::Shape(format!(
                "tree has {} leaves, vocabulary has {j}",
                self.tree.num_words()
            )));
        }
        for (name, data, len) in blocks {
            if data.len() != len {
                return Err(Error::Shape(format!(
                    "{name} has {} entries, expected {len}",
                    data.len()
                )));
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Fails unless `vocab` has the dimensions this model was built for.
    pub fn check_vocab(&self, vocab: &JointVocab) -> Result<()> {
        if !self.vocab.same_shape(vocab) {
            return Err(Error::Shape(format!(
                "model expects K={} M={} A={} C={} (J={}), corpus has K={} M={} A={} C={} (J={})",
                self.vocab.k,
                self.vocab.m,
                self.vocab.a,
                self.vocab.c,
                self.num_words(),
                vocab.k,
                vocab.m,
                vocab.a,
                vocab.c,
                vocab.joint_size()
            )));
        }
        Ok(())
    }

    fn check_document(&self, doc: &Document) -> Result<()> {
        self.vocab
            .check_document(doc)
            .map_err(|msg| Error::InvalidDocument { doc: 0, msg })
    }
}

/// Running pre-activation `c + Σ W[:, v]` over the absorbed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub a: Vec<f64>,
    pub count: usize,
}

impl HiddenState {
    pub fn new(params: &ModelParams) -> Self {
        HiddenState {
            a: params.c.clone(),
            count: 0,
        }
    }

    /// Adds column `v` of `W`. Cost `O(H)` regardless of how many tokens
    /// were absorbed before.
    pub fn absorb(&mut self, v: usize, params: &ModelParams) -> Result<()> {
        if v >= params.num_words() {
            return Err(Error::bounds("joint index", v, params.num_words()));
        }
        self.absorb_unchecked(v, params);
        Ok(())
    }

    #[inline]
    pub(crate) fn absorb_unchecked(&mut self, v: usize, params: &ModelParams) {
        for (a, w) in self.a.iter_mut().zip(params.w_col(v)) {
            *a += w;
        }
        self.count += 1;
    }

    /// `g(a) = max(0, a)` element-wise.
    pub fn hidden(&self) -> Vec<f64> {
        relu(&self.a)
    }
}

pub fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| x.max(0.0)).collect()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logit of going right at internal node `t`: `b_t + V[t, :]·h`.
#[inline]
pub fn node_logit(params: &ModelParams, t: usize, h: &[f64]) -> f64 {
    params.b[t] + dot(params.v_row(t), h)
}

/// `log p(v | h)`: sum over the path of `log sigm(±logit)`.
pub fn cond_word_logprob(params: &ModelParams, h: &[f64], v: usize) -> Result<f64> {
    if v >= params.num_words() {
        return Err(Error::bounds("joint index", v, params.num_words()));
    }
    if h.len() != params.hidden {
        return Err(Error::DimensionMismatch {
            expected: params.hidden,
            got: h.len(),
        });
    }
    Ok(cond_word_logprob_unchecked(params, h, v))
}

#[inline]
pub(crate) fn cond_word_logprob_unchecked(params: &ModelParams, h: &[f64], v: usize) -> f64 {
    let (nodes, bits) = params.tree.path_unchecked(v);
    nodes
        .iter()
        .zip(bits)
        .map(|(&t, &bit)| {
            let x = node_logit(params, t, h);
            if bit == 1 {
                -softplus(-x)
            } else {
                -softplus(x)
            }
        })
        .sum()
}

/// Class logits `d + U h`.
fn class_logits(params: &ModelParams, h: &[f64]) -> Vec<f64> {
    (0..params.num_classes())
        .map(|y| params.d[y] + dot(params.u_row(y), h))
        .collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `softmax(d + U h)` with max subtraction.
pub fn class_posterior(params: &ModelParams, h: &[f64]) -> Vec<f64> {
    let logits = class_logits(params, h);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Per-document loss split into its discriminative and generative parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NllParts {
    /// `-log p(y | v)`.
    pub disc: f64,
    /// `Σ_i -log p(v_i | v_<i)`.
    pub gen: f64,
    /// `disc + λ·gen`.
    pub total: f64,
}

/// Hybrid loss of `doc` in its canonical order (visual tokens, then
/// annotation words, each in stored order).
pub fn joint_nll(params: &ModelParams, doc: &Document, lambda: f64) -> Result<NllParts> {
    params.check_document(doc)?;
    Ok(sequence_nll(params, &doc.joint_sequence(&params.vocab), doc.label, lambda))
}

/// Hybrid loss of an explicit token order. Indices must be in range.
pub fn sequence_nll(params: &ModelParams, tokens: &[usize], label: usize, lambda: f64) -> NllParts {
    let mut state = HiddenState::new(params);
    let mut gen = 0.0;
    let mut h = vec![0.0; params.hidden];
    for &v in tokens {
        for (hk, ak) in h.iter_mut().zip(&state.a) {
            *hk = ak.max(0.0);
        }
        gen -= cond_word_logprob_unchecked(params, &h, v);
        state.absorb_unchecked(v, params);
    }
    let disc = -log_softmax(&class_logits(params, &state.hidden()))[label];
    NllParts {
        disc,
        gen,
        total: disc + lambda * gen,
    }
}

/// Document representation `g(c + Σ W[:, v])`.
///
/// Columns are summed in ascending joint-index order, so the result is
/// bit-identical under any permutation of the document's tokens.
pub fn extract_representation(
    params: &ModelParams,
    doc: &Document,
    use_annotations: bool,
) -> Result<Vec<f64>> {
    params.check_document(doc)?;
    let mut tokens = if use_annotations {
        doc.joint_sequence(&params.vocab)
    } else {
        doc.visual_joint(&params.vocab)
    };
    tokens.sort_unstable();
    let mut state = HiddenState::new(params);
    for v in tokens {
        state.absorb_unchecked(v, params);
    }
    Ok(state.hidden())
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Predicted class and posterior from the visual tokens alone.
pub fn predict_class(params: &ModelParams, doc: &Document) -> Result<(usize, Vec<f64>)> {
    let h = extract_representation(params, doc, false)?;
    let posterior = class_posterior(params, &h);
    Ok((argmax(&posterior), posterior))
}

/// The `top_n` annotation words most likely to be the next token given the
/// visual tokens, as `(annotation index, log-probability)`.
///
/// Scores are leaf log-probabilities of the full tree, not renormalized over
/// the annotation leaves.
pub fn predict_annotations(
    params: &ModelParams,
    doc: &Document,
    top_n: usize,
) -> Result<Vec<(usize, f64)>> {
    let a = params.vocab.a;
    if a < top_n {
        return Err(Error::InvalidArgument(format!(
            "cannot predict {top_n} annotations from a vocabulary of {a}"
        )));
    }
    let h = extract_representation(params, doc, false)?;
    let offset = params.vocab.visual_size();
    let mut scored: Vec<(usize, f64)> = (0..a)
        .map(|i| (i, cond_word_logprob_unchecked(params, &h, offset + i)))
        .collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    scored.truncate(top_n);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordScore {
    pub joint: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAssociations {
    pub class: usize,
    pub topics: Vec<usize>,
    pub words: Vec<WordScore>,
}

/// Words most associated with `class`: pick the hidden units with the
/// largest weights in the class's row of `U`, average their rows of `W`,
/// and rank joint words by that average.
pub fn inspect_class_associations(
    params: &ModelParams,
    class: usize,
    top_topics: usize,
    top_words: usize,
) -> Result<ClassAssociations> {
    if class >= params.num_classes() {
        return Err(Error::bounds("class", class, params.num_classes()));
    }
    if top_topics < 1 || top_topics > params.hidden {
        return Err(Error::InvalidArgument(format!(
            "topics must be in 1..={}, got {top_topics}",
            params.hidden
        )));
    }
    let row = params.u_row(class);
    let mut topics: Vec<usize> = (0..params.hidden).collect();
    topics.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
    topics.truncate(top_topics);

    let j = params.num_words();
    let mut scores: Vec<(usize, f64)> = (0..j)
        .map(|v| {
            let col = params.w_col(v);
            let s: f64 = topics.iter().map(|&t| col[t]).sum();
            (v, s / top_topics as f64)
        })
        .collect();
    scores.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    scores.truncate(top_words.min(j));

    let words = scores
        .into_iter()
        .map(|(joint, score)| {
            Ok(WordScore {
                joint,
                name: params.vocab.describe(joint)?,
                score,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClassAssociations {
        class,
        topics,
        words,
    })
}

/// Decodes a joint index through the model's vocabulary.
pub fn decode_word(params: &ModelParams, joint: usize) -> Result<JointWord> {
    params.vocab.decode(joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn setup(k: usize, m: usize, a: usize, c: usize, hidden: usize) -> ModelParams {
        let vocab = JointVocab::new(k, m, a, c).unwrap();
        let tree = WordTree::build_balanced(vocab.joint_size(), 3).unwrap();
        ModelParams::zeros(hidden, &vocab, &tree).unwrap()
    }

    fn randomize(p: &mut ModelParams, seed: u64, scale: f64) {
        let mut rng = seeded_rng(seed, 9);
        for block in [&mut p.w, &mut p.c, &mut p.v, &mut p.b, &mut p.u, &mut p.d] {
            for x in block.iter_mut() {
                *x = rng.random_range(-scale..scale);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let vocab = JointVocab::new(6, 2, 3, 4).unwrap();
        let tree = WordTree::build_balanced(15, 0).unwrap();
        let p = ModelParams::init(9, &vocab, &tree, 42, 0.3).unwrap();
        assert_eq!(p, ModelParams::init(9, &vocab, &tree, 42, 0.3).unwrap());
        assert_ne!(p, ModelParams::init(9, &vocab, &tree, 43, 0.3).unwrap());
        assert!(p.w.iter().all(|x| x.abs() <= 0.1 + 1e-15));
        assert!(p.c.iter().chain(&p.v).chain(&p.b).chain(&p.u).chain(&p.d).all(|&x| x == 0.0));
        let post = class_posterior(&p, &[1.0; 9]);
        assert!(post.iter().all(|&q| (q - 0.25).abs() < 1e-15));
        assert!(ModelParams::init(9, &vocab, &tree, 42, 0.0).is_err());
        assert!(ModelParams::init(0, &vocab, &tree, 42, 0.1).is_err());
        let wrong = WordTree::build_balanced(14, 0).unwrap();
        assert!(matches!(ModelParams::zeros(2, &vocab, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_params_give_uniform_conditionals() {
        let p = setup(4, 1, 0, 2, 3);
        for v in 0..4 {
            let lp = cond_word_logprob(&p, &[0.3, 0.0, 2.0], v).unwrap();
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
        assert!(cond_word_logprob(&p, &[0.0; 3], 4).is_err());
        assert!(cond_word_logprob(&p, &[0.0; 2], 0).is_err());
    }

    #[test]
    fn relu_examples() {
        let p = setup(2, 1, 0, 2, 2);
        let mut s = HiddenState::new(&p);
        assert_eq!(s.hidden(), vec![0.0, 0.0]);
        s.a = vec![-1.0, 2.0];
        assert_eq!(s.hidden(), vec![0.0, 2.0]);
    }

    #[test]
    fn absorb_matches_recomputation_and_inverts() {
        let mut p = setup(5, 2, 3, 3, 7);
        randomize(&mut p, 1, 1.0);
        let tokens = [3usize, 0, 12, 3, 7, 1];
        let mut s = HiddenState::new(&p);
        for (n, &v) in tokens.iter().enumerate() {
            s.absorb(v, &p).unwrap();
            let mut naive = p.c.clone();
            for &u in &tokens[..=n] {
                for (x, w) in naive.iter_mut().zip(p.w_col(u)) {
                    *x += w;
                }
            }
            assert_eq!(s.a, naive);
            assert_eq!(s.hidden(), relu(&naive));
        }
        assert_eq!(s.count, tokens.len());
        let before = s.a.clone();
        s.absorb(4, &p).unwrap();
        for (x, w) in s.a.iter_mut().zip(p.w_col(4)) {
            *x -= w;
        }
        assert_eq!(s.a, before);
        assert!(s.absorb(13, &p).is_err());
    }

    #[test]
    fn class_posterior_examples() {
        let mut p = setup(2, 1, 0, 2, 1);
        p.d = vec![3f64.ln(), 0.0];
        let post = class_posterior(&p, &[5.0]);
        assert!((post[0] - 0.75).abs() < 1e-12);
        assert!((post[1] - 0.25).abs() < 1e-12);

        let mut p = setup(2, 1, 0, 5, 4);
        randomize(&mut p, 5, 2.0);
        let h = [0.5, 1.0, 0.0, 2.0];
        let before = class_posterior(&p, &h);
        assert!((before.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for x in &mut p.d {
            *x += 123.4;
        }
        let after = class_posterior(&p, &h);
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_survives_huge_logits() {
        let mut p = setup(2, 1, 0, 3, 1);
        p.d = vec![1e4, 1e4 - 1.0, -1e4];
        let post = class_posterior(&p, &[0.0]);
        assert!(post.iter().all(|x| x.is_finite()));
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_nll_examples() {
        let p = setup(4, 1, 0, 5, 3);
        let doc = Document {
            label: 2,
            tokens: vec![(0, 0), (3, 0), (1, 0)],
            annotations: vec![],
        };
        let parts = joint_nll(&p, &doc, 0.5).unwrap();
        assert!((parts.gen - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((parts.disc - 5f64.ln()).abs() < 1e-12);

        let mut p = setup(3, 2, 2, 3, 4);
        randomize(&mut p, 8, 1.0);
        let doc = Document {
            label: 1,
            tokens: vec![(0, 1), (2, 0)],
            annotations: vec![1],
        };
        let parts = joint_nll(&p, &doc, 0.0).unwrap();
        assert_eq!(parts.total, parts.disc);

        let empty = Document {
            label: 2,
            ..Default::default()
        };
        let parts = joint_nll(&p, &empty, 0.7).unwrap();
        assert_eq!(parts.gen, 0.0);
        let post = class_posterior(&p, &relu(&p.c));
        assert!((parts.disc + post[2].ln()).abs() < 1e-12);

        let bad = Document {
            label: 3,
            ..Default::default()
        };
        assert!(joint_nll(&p, &bad, 1.0).is_err());
    }

    #[test]
    fn cond_logprob_matches_direct_products() {
        let mut p = setup(7, 2, 3, 2, 5);
        randomize(&mut p, 21, 3.0);
        let h = [0.2, 1.5, 0.0, 0.9, 3.0];
        for v in 0..p.num_words() {
            let (nodes, bits) = p.tree.path(v).unwrap();
            let mut prob = 1.0;
            for (&t, &bit) in nodes.iter().zip(bits) {
                let x = p.b[t] + (0..5).map(|k| p.v[t * 5 + k] * h[k]).sum::<f64>();
                let s = 1.0 / (1.0 + (-x).exp());
                prob *= if bit == 1 { s } else { 1.0 - s };
            }
            let lp = cond_word_logprob(&p, &h, v).unwrap();
            assert!((lp.exp() - prob).abs() <= 1e-10 * prob);
        }
    }

    #[test]
    fn representation_examples() {
        let mut p = setup(4, 2, 3, 3, 6);
        randomize(&mut p, 4, 1.0);
        let empty = Document::default();
        assert_eq!(extract_representation(&p, &empty, false).unwrap(), relu(&p.c));

        let doc = Document {
            label: 0,
            tokens: vec![(3, 1), (0, 0), (2, 1), (3, 1)],
            annotations: vec![2, 0],
        };
        let full = extract_representation(&p, &doc, true).unwrap();
        let mut s = HiddenState::new(&p);
        for v in doc.joint_sequence(&p.vocab) {
            s.absorb(v, &p).unwrap();
        }
        for (x, y) in full.iter().zip(s.hidden()) {
            assert!((x - y).abs() < 1e-12);
        }
        let visual = extract_representation(&p, &doc, false).unwrap();
        assert_ne!(visual, full);
    }

    #[test]
    fn zero_params_prediction_ties() {
        let p = setup(3, 1, 5, 4, 2);
        let doc = Document {
            label: 1,
            tokens: vec![(1, 0)],
            annotations: vec![],
        };
        assert_eq!(predict_class(&p, &doc).unwrap().0, 0);
        // J = 8, every leaf at depth 3
        let ann = predict_annotations(&p, &doc, 5).unwrap();
        assert_eq!(ann.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(ann.iter().all(|x| (x.1 - 0.125f64.ln()).abs() < 1e-15));
        assert!(predict_annotations(&p, &doc, 6).is_err());
    }

    #[test]
    fn zero_params_rank_annotations_by_depth() {
        // J = 3 + 3 = 6: leaves at depths 3,3,2,3,3,2 in leaf order.
        let p = setup(3, 1, 3, 2, 2);
        let ann = predict_annotations(&p, &Document::default(), 3).unwrap();
        let depth = |a: usize| p.tree.path(3 + a).unwrap().0.len();
        for w in ann.windows(2) {
            let (x, y) = (w[0].0, w[1].0);
            assert!(depth(x) < depth(y) || (depth(x) == depth(y) && x < y));
        }
    }

    #[test]
    fn annotation_ranking_matches_brute_force() {
        let mut p = setup(4, 2, 9, 3, 5);
        randomize(&mut p, 31, 1.5);
        let doc = Document {
            label: 0,
            tokens: vec![(1, 0), (3, 1), (0, 1)],
            annotations: vec![4],
        };
        let got = predict_annotations(&p, &doc, 5).unwrap();
        assert!(got.iter().all(|x| x.1 <= 0.0));

        let h = extract_representation(&p, &doc, false).unwrap();
        let mut brute: Vec<(usize, f64)> = (0..9)
            .map(|a| {
                let (nodes, bits) = p.tree.path(8 + a).unwrap();
                let prob: f64 = nodes
                    .iter()
                    .zip(bits)
                    .map(|(&t, &bit)| {
                        let x = p.b[t] + (0..5).map(|k| p.v[t * 5 + k] * h[k]).sum::<f64>();
                        let s = 1.0 / (1.0 + (-x).exp());
                        if bit == 1 { s } else { 1.0 - s }
                    })
                    .product();
                (a, prob)
            })
            .collect();
        brute.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        assert_eq!(
            got.iter().map(|x| x.0).collect::<Vec<_>>(),
            brute.iter().take(5).map(|x| x.0).collect::<Vec<_>>()
        );
    }

    proptest! {
        #[test]
        fn predictions_ignore_token_order(seed in any::<u64>(), len in 0usize..40) {
            let mut p = setup(5, 3, 6, 4, 8);
            randomize(&mut p, seed, 1.0);
            let mut rng = seeded_rng(seed, 5);
            let doc = Document {
                label: 2,
                tokens: (0..len).map(|_| (rng.random_range(0..5), rng.random_range(0..3))).collect(),
                annotations: vec![1, 5],
            };
            let mut shuffled = doc.clone();
            shuffled.tokens.shuffle(&mut rng);
            shuffled.annotations.reverse();
            prop_assert_eq!(predict_class(&p, &doc).unwrap(), predict_class(&p, &shuffled).unwrap());
            prop_assert_eq!(
                predict_annotations(&p, &doc, 5).unwrap(),
                predict_annotations(&p, &shuffled, 5).unwrap()
            );
            prop_assert_eq!(
                extract_representation(&p, &doc, true).unwrap(),
                extract_representation(&p, &shuffled, true).unwrap()
            );
        }

        #[test]
        fn conditionals_normalize(seed in any::<u64>(), j in 2usize..=64) {
            let vocab = JointVocab::new(j, 1, 0, 2).unwrap();
            let tree = WordTree::build_balanced(j, seed).unwrap();
            let mut p = ModelParams::zeros(4, &vocab, &tree).unwrap();
            randomize(&mut p, seed, 2.0);
            let h = [0.0, 1.3, 0.4, 2.2];
            let total: f64 = (0..j).map(|v| cond_word_logprob(&p, &h, v).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn inspect_examples() {
        let mut p = setup(3, 2, 2, 2, 3);
        randomize(&mut p, 12, 1.0);
        let r = inspect_class_associations(&p, 1, 3, 8).unwrap();
        let mut means: Vec<(usize, f64)> = (0..8)
            .map(|v| (v, p.w_col(v).iter().sum::<f64>() / 3.0))
            .collect();
        means.sort_by(|x, y| y.1.total_cmp(&x.1));
        for (got, want) in r.words.iter().zip(&means) {
            assert_eq!(got.joint, want.0);
            assert!((got.score - want.1).abs() < 1e-12);
        }

        p.u = vec![0.0; 6];
        p.u[3 + 2] = 1.0;
        let r = inspect_class_associations(&p, 1, 1, 8).unwrap();
        assert_eq!(r.topics, vec![2]);
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&x, &y| p.w_col(y)[2].total_cmp(&p.w_col(x)[2]));
        assert_eq!(r.words.iter().map(|w| w.joint).collect::<Vec<_>>(), order);

        p.u = vec![0.0; 6];
        let r = inspect_class_associations(&p, 0, 2, 1).unwrap();
        assert_eq!(r.topics, vec![0, 1]);
        assert!(inspect_class_associations(&p, 2, 1, 1).is_err());
        assert!(inspect_class_associations(&p, 0, 4, 1).is_err());
    }

    #[test]
    fn vocab_mismatch_is_a_shape_error() {
        let p = setup(5, 2, 0, 2, 2);
        let other = JointVocab::new(6, 2, 0, 2).unwrap();
        assert!(matches!(p.check_vocab(&other), Err(Error::Shape(_))));
        assert!(p.check_vocab(&p.vocab.clone()).is_ok());
    }
}
