//! Reference oracles for the optimized code paths.
//!
//! Nothing here calls into [`crate::model`] or [`crate::trainer`] numerics:
//! hidden layers are recomputed from scratch, tree conditionals are plain
//! products of sigmoids and the class posterior is a direct softmax. These
//! routines are slow on purpose and exist to be compared against.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Serialize;

use crate::corpus::{Document, JointVocab};
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::trainer::{compute_gradients, Gradients};
use crate::wordtree::WordTree;
use crate::ModelParams;

const MAX_ENUMERATED_WORDS: usize = 1 << 16;
const MAX_ENUMERATED_SEQUENCES: usize = 1_000_000;

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(params: &ModelParams, t: usize, h: &[f64]) -> f64 {
    let mut x = params.b[t];
    for k in 0..params.hidden {
        x += params.v[t * params.hidden + k] * h[k];
    }
    x
}

/// Pre-activations `c + Σ_{k<i} W[:, v_k]` for every position, each summed
/// from scratch in document order. The last entry covers the whole sequence.
pub fn naive_preactivations(params: &ModelParams, tokens: &[usize]) -> Vec<Vec<f64>> {
    let hd = params.hidden;
    (0..=tokens.len())
        .map(|i| {
            let mut a = params.c.clone();
            for &v in &tokens[..i] {
                for k in 0..hd {
                    a[k] += params.w[v * hd + k];
                }
            }
            a
        })
        .collect()
}

/// Hidden layers `h_1 .. h_n`, recomputed from scratch (`O(H n²)`).
pub fn naive_hiddens(params: &ModelParams, tokens: &[usize]) -> Vec<Vec<f64>> {
    let mut pre = naive_preactivations(params, tokens);
    pre.pop();
    pre.into_iter()
        .map(|a| a.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect())
        .collect()
}

/// Probability of every leaf as a direct product of node probabilities.
pub fn enumerate_word_distribution(params: &ModelParams, h: &[f64]) -> Result<Vec<f64>> {
    let j = params.num_words();
    if j > MAX_ENUMERATED_WORDS {
        return Err(Error::InvalidArgument(format!(
            "refusing to enumerate {j} words (limit {MAX_ENUMERATED_WORDS})"
        )));
    }
    if h.len() != params.hidden {
        return Err(Error::DimensionMismatch {
            expected: params.hidden,
            got: h.len(),
        });
    }
    let node_p: Vec<f64> = (0..params.num_nodes()).map(|t| sigm(logit(params, t, h))).collect();
    Ok((0..j)
        .map(|v| {
            let (nodes, bits) = params.tree.path(v).expect("v < J");
            let mut p = 1.0;
            for (&t, &bit) in nodes.iter().zip(bits) {
                p *= if bit == 1 { node_p[t] } else { 1.0 - node_p[t] };
            }
            p
        })
        .collect())
}

/// Total probability mass over all `J^n` sequences of length `n`.
pub fn enumerate_sequence_mass(params: &ModelParams, n: usize) -> Result<f64> {
    let j = params.num_words();
    let count = (j as f64).powi(n as i32);
    if count > MAX_ENUMERATED_SEQUENCES as f64 {
        return Err(Error::InvalidArgument(format!(
            "refusing to enumerate {j}^{n} sequences"
        )));
    }
    let mut total = 0.0;
    let mut seq = vec![0usize; n];
    for code in 0..count as usize {
        let mut c = code;
        for s in seq.iter_mut() {
            *s = c % j;
            c /= j;
        }
        let mut p = 1.0;
        for (i, h) in naive_hiddens(params, &seq).iter().enumerate() {
            p *= enumerate_word_distribution(params, h)?[seq[i]];
        }
        total += p;
    }
    Ok(total)
}

/// Flat softmax conditional `softmax(bf + Wfᵀ h)` with `Wf` row-major `H×J`.
pub fn flat_softmax_conditional(wf: &[f64], bf: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    let j = bf.len();
    if j > MAX_ENUMERATED_WORDS {
        return Err(Error::InvalidArgument(format!("{j} words exceeds the oracle limit")));
    }
    if wf.len() != h.len() * j {
        return Err(Error::DimensionMismatch {
            expected: h.len() * j,
            got: wf.len(),
        });
    }
    let logits: Vec<f64> = (0..j)
        .map(|w| bf[w] + (0..h.len()).map(|k| wf[k * j + w] * h[k]).sum::<f64>())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// `(disc, gen, total)` of the hybrid loss, computed by brute force.
pub fn reference_nll(params: &ModelParams, tokens: &[usize], label: usize, lambda: f64) -> (f64, f64, f64) {
    let pre = naive_preactivations(params, tokens);
    let mut gen = 0.0;
    for (i, &v) in tokens.iter().enumerate() {
        let h: Vec<f64> = pre[i].iter().map(|&x| x.max(0.0)).collect();
        let (nodes, bits) = params.tree.path(v).expect("v < J");
        let mut p = 1.0;
        for (&t, &bit) in nodes.iter().zip(bits) {
            let s = sigm(logit(params, t, &h));
            p *= if bit == 1 { s } else { 1.0 - s };
        }
        gen -= p.ln();
    }
    let h_doc: Vec<f64> = pre[tokens.len()].iter().map(|&x| x.max(0.0)).collect();
    let hd = params.hidden;
    let scores: Vec<f64> = (0..params.num_classes())
        .map(|y| params.d[y] + (0..hd).map(|k| params.u[y * hd + k] * h_doc[k]).sum::<f64>())
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let disc = -(scores[label].exp() / z).ln();
    (disc, gen, disc + lambda * gen)
}

/// Central finite differences of the reference loss for every parameter
/// the sequence can reach; all other entries stay zero.
pub fn finite_diff(params: &ModelParams, tokens: &[usize], label: usize, lambda: f64, eps: f64) -> Gradients {
    let mut grads = Gradients::zeros(params);
    let mut work = params.clone();
    let hd = params.hidden;

    let mut words: Vec<usize> = tokens.to_vec();
    words.sort_unstable();
    words.dedup();
    let mut nodes: Vec<usize> = tokens
        .iter()
        .flat_map(|&v| params.tree.path(v).expect("v < J").0.to_vec())
        .collect();
    nodes.sort_unstable();
    nodes.dedup();

    let mut diff = |select: &dyn Fn(&mut ModelParams) -> &mut f64| -> f64 {
        let orig = *select(&mut work);
        *select(&mut work) = orig + eps;
        let up = reference_nll(&work, tokens, label, lambda).2;
        *select(&mut work) = orig - eps;
        let down = reference_nll(&work, tokens, label, lambda).2;
        *select(&mut work) = orig;
        (up - down) / (2.0 * eps)
    };

    for &v in &words {
        for k in 0..hd {
            grads.w[v * hd + k] = diff(&|p| &mut p.w[v * hd + k]);
        }
        grads.mark_word(v);
    }
    for &t in &nodes {
        for k in 0..hd {
            grads.v[t * hd + k] = diff(&|p| &mut p.v[t * hd + k]);
        }
        grads.b[t] = diff(&|p| &mut p.b[t]);
        grads.mark_node(t);
    }
    for k in 0..hd {
        grads.c[k] = diff(&|p| &mut p.c[k]);
    }
    for i in 0..params.u.len() {
        grads.u[i] = diff(&|p| &mut p.u[i]);
    }
    for i in 0..params.d.len() {
        grads.d[i] = diff(&|p| &mut p.d[i]);
    }
    grads
}

/// [`finite_diff`] on a document's canonical token order.
pub fn finite_diff_document(params: &ModelParams, doc: &Document, lambda: f64, eps: f64) -> Result<Gradients> {
    params
        .vocab
        .check_document(doc)
        .map_err(|msg| Error::InvalidDocument { doc: 0, msg })?;
    Ok(finite_diff(params, &doc.joint_sequence(&params.vocab), doc.label, lambda, eps))
}

/// Gradient magnitudes below this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(REL_ERROR_FLOOR);
    (a - b).abs() / scale
}

/// Maximum relative error per parameter block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BlockErrors {
    #[serde(rename = "W")]
    pub w: f64,
    pub c: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub b: f64,
    #[serde(rename = "U")]
    pub u: f64,
    pub d: f64,
}

impl BlockErrors {
    pub fn between(x: &Gradients, y: &Gradients) -> Self {
        let m = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| rel_error(*p, *q)).fold(0.0, f64::max);
        BlockErrors {
            w: m(&x.w, &y.w),
            c: m(&x.c, &y.c),
            v: m(&x.v, &y.v),
            b: m(&x.b, &y.b),
            u: m(&x.u, &y.u),
            d: m(&x.d, &y.d),
        }
    }

    pub fn max(&self) -> f64 {
        [self.w, self.c, self.v, self.b, self.u, self.d]
            .into_iter()
            .fold(0.0, f64::max)
    }

    fn merge(&mut self, o: &BlockErrors) {
        self.w = self.w.max(o.w);
        self.c = self.c.max(o.c);
        self.v = self.v.max(o.v);
        self.b = self.b.max(o.b);
        self.u = self.u.max(o.u);
        self.d = self.d.max(o.d);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: BlockErrors,
    pub max_overall: f64,
    pub tested: usize,
    pub skipped_kink: usize,
    pub attempted: usize,
    pub eps: f64,
}

/// Skip points with a pre-activation this close to the ReLU kink.
pub const KINK_MARGIN: f64 = 1e-3;
/// Skip points where a tree logit saturates the sigmoid.
pub const SATURATION_LOGIT: f64 = 30.0;

/// True when finite differences are unreliable at this point.
pub fn near_kink(params: &ModelParams, tokens: &[usize]) -> bool {
    let pre = naive_preactivations(params, tokens);
    if pre.iter().flatten().any(|a| a.abs() <= KINK_MARGIN) {
        return true;
    }
    tokens.iter().enumerate().any(|(i, &v)| {
        let h: Vec<f64> = pre[i].iter().map(|&x| x.max(0.0)).collect();
        let (nodes, _) = params.tree.path(v).expect("v < J");
        nodes.iter().any(|&t| logit(params, t, &h).abs() >= SATURATION_LOGIT)
    })
}

/// One random gradient-check case: parameters, token sequence, label.
pub fn random_case(hidden: usize, j: usize, classes: usize, seed: u64) -> Result<(ModelParams, Vec<usize>, usize)> {
    let a = j / 3;
    let vocab = JointVocab::new(j - a, 1, a, classes)?;
    let tree = WordTree::build_balanced(j, seed)?;
    let mut params = ModelParams::zeros(hidden, &vocab, &tree)?;
    let mut rng = seeded_rng(seed, 7);
    for x in params.w.iter_mut().chain(params.c.iter_mut()) {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in params
        .v
        .iter_mut()
        .chain(params.b.iter_mut())
        .chain(params.u.iter_mut())
        .chain(params.d.iter_mut())
    {
        *x = rng.random_range(-0.5..0.5);
    }
    let d = rng.random_range(0..=6);
    let mut tokens: Vec<usize> = (0..d).map(|_| rng.random_range(0..j - a)).collect();
    if a > 0 {
        let l = rng.random_range(0..=3);
        tokens.extend((0..l).map(|_| j - a + rng.random_range(0..a)));
    }
    tokens.shuffle(&mut rng);
    let label = rng.random_range(0..classes);
    Ok((params, tokens, label))
}

/// Lambdas cycled through by [`gradcheck`].
pub const GRADCHECK_LAMBDAS: [f64; 3] = [0.0, 0.37, 1.0];

/// Compares analytic gradients with finite differences on `trials` seeded
/// random cases, skipping points near a ReLU kink or a saturated node.
pub fn gradcheck(hidden: usize, j: usize, classes: usize, trials: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    if j < 2 {
        return Err(Error::InvalidArgument("vocabulary must have at least 2 words".into()));
    }
    let mut errors = BlockErrors::default();
    let mut tested = 0;
    let mut skipped = 0;
    for trial in 0..trials {
        let lambda = GRADCHECK_LAMBDAS[trial % GRADCHECK_LAMBDAS.len()];
        let (params, tokens, label) = random_case(hidden, j, classes, seed.wrapping_add(trial as u64))?;
        if near_kink(&params, &tokens) {
            skipped += 1;
            continue;
        }
        let (analytic, _) = compute_gradients(&params, &tokens, label, lambda)?;
        let numeric = finite_diff(&params, &tokens, label, lambda, eps);
        errors.merge(&BlockErrors::between(&analytic, &numeric));
        tested += 1;
    }
    Ok(GradCheckReport {
        max_overall: errors.max(),
        max_rel_error: errors,
        tested,
        skipped_kink: skipped,
        attempted: trials,
        eps,
    })
}

/// Monte-Carlo mean F-measure of `top_n` uniformly random distinct
/// predictions against `truth_size` uniformly random distinct words drawn
/// from a vocabulary of `a` annotation words.
pub fn chance_f_measure(a: usize, truth_size: usize, top_n: usize, trials: usize, seed: u64) -> Result<f64> {
    if truth_size > a || top_n > a || truth_size == 0 || top_n == 0 || trials == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 < truth ({truth_size}), top_n ({top_n}) <= A ({a}) and trials > 0"
        )));
    }
    let mut rng = seeded_rng(seed, 8);
    let mut total = 0.0;
    for _ in 0..trials {
        let truth = index::sample(&mut rng, a, truth_size).into_vec();
        let pred = index::sample(&mut rng, a, top_n).into_vec();
        let hits = pred.iter().filter(|p| truth.contains(p)).count() as f64;
        let (p, r) = (hits / top_n as f64, hits / truth_size as f64);
        if hits > 0.0 {
            total += 2.0 * p * r / (p + r);
        }
    }
    Ok(total / trials as f64)
}
