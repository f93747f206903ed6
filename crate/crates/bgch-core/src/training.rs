//! End-to-end optimization: dispersion, convolution, code scoring, the
//! two-term ranking objective, exact manual backpropagation with
//! estimator-substituted sign gradients, and Adam updates.
//!
//! Each step freezes the sampled projection before differentiating, so
//! gradients do not flow through the power iteration. The dispersion update
//! is symmetric, making its transpose the same rank-one operation, and the
//! normalized adjacency is symmetric, so the convolution transpose is another
//! multiplication by it.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::convhash::{rescale_factor, HashCodeTable, LayerStack};
use crate::dispersion::{disperse, sample_projection, DispersionConfig, ProjectionState};
use crate::estimators::{hard_sign, surrogate_grad, surrogate_value, EstimatorSpec};
use crate::graph::{BipartiteGraph, DataSplit, NormalizedAdjacency};
use crate::linalg::{dot, DenseMatrix};
use crate::math;
use crate::metrics::{MetricAccumulator, MetricSummary};
use crate::retrieval::{QueryCode, RetrievalIndex};
use crate::rng::{normal, normal_vec, stream, Stream};
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Probabilities are clamped to [SIGMA_FLOOR, 1 - SIGMA_FLOOR] before logs.
const SIGMA_FLOOR: f64 = 1e-7;
/// Standard deviation of the normal embedding initializer.
const INIT_STD: f64 = 0.1;

/// Switches that disable individual model components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    /// Skip feature dispersion (equivalent to epsilon = 0).
    pub no_fd: bool,
    /// Hash only the deepest layer instead of every layer.
    pub no_ah_ta: bool,
    /// Drop rescaling: all scale factors forced to 1.
    pub no_ah_rf: bool,
    /// Scale factors become a trained tensor instead of a derived one.
    pub learnable_factors: bool,
    /// Remove the ranking term from the objective.
    pub no_bpr: bool,
    /// Remove the reconstruction term from the objective.
    pub no_rec: bool,
}

/// How the score path treats the binarization point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Hard signs with rescale factors: the deployed model.
    Hash,
    /// The estimator's smooth surrogate replaces the hard sign, so the loss
    /// is differentiable and finite differences can check the backward pass.
    Surrogate,
    /// No binarization and unit scales: a plain graph-convolution model,
    /// smooth everywhere.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Embedding and code width in bits.
    pub dim: usize,
    /// Graph convolution layers.
    pub layers: usize,
    /// Dispersion power-iteration count; at most `layers`.
    pub power_iterations: usize,
    /// Dispersion strength in [0, 1).
    pub epsilon: f64,
    pub estimator: EstimatorSpec,
    /// Ranking-loss weight.
    pub lambda1: f64,
    /// L2 regularization weight.
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Negatives drawn per positive, shared by both loss terms.
    pub neg_samples: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation recall improvement.
    pub patience: Option<usize>,
    /// Cutoff for the per-epoch validation metrics.
    pub eval_top_n: usize,
    pub ablations: Ablations,
}

impl TrainConfig {
    pub fn new(dim: usize) -> Self {
        TrainConfig {
            dim,
            layers: 2,
            power_iterations: 2,
            epsilon: 0.5,
            estimator: EstimatorSpec::default_fourier(),
            lambda1: 1.0,
            lambda2: 1e-4,
            lr: 1e-2,
            batch_size: 1024,
            neg_samples: 1,
            epochs: 50,
            seed: 42,
            patience: Some(10),
            eval_top_n: 20,
            ablations: Ablations::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        if self.power_iterations > self.layers {
            return Err(Error::InvalidConfig(alloc::format!(
                "power_iterations ({}) must not exceed layers ({})",
                self.power_iterations,
                self.layers
            )));
        }
        DispersionConfig {
            power_iterations: self.power_iterations,
            epsilon: self.epsilon,
        }
        .validate()?;
        self.estimator.validate()?;
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::InvalidConfig("lambda1 must be finite and >= 0".into()));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::InvalidConfig("lambda2 must be finite and >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be finite and positive".into()));
        }
        if self.batch_size == 0 || self.neg_samples == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, neg_samples, and epochs must be positive".into(),
            ));
        }
        if self.eval_top_n == 0 {
            return Err(Error::InvalidConfig("eval_top_n must be positive".into()));
        }
        if self.ablations.no_rec && self.ablations.no_bpr {
            return Err(Error::InvalidConfig(
                "no_rec and no_bpr together leave no objective".into(),
            ));
        }
        if self.ablations.learnable_factors && self.ablations.no_ah_rf {
            return Err(Error::InvalidConfig(
                "learnable_factors contradicts no_ah_rf".into(),
            ));
        }
        Ok(())
    }

    fn effective_epsilon(&self) -> f64 {
        if self.ablations.no_fd {
            0.0
        } else {
            self.epsilon
        }
    }
}

/// One step's positive pairs plus their sampled negatives. `positives` holds
/// (x, y) with y in item space; `negatives` holds `neg_per_pos` item ids per
/// positive, flattened in order.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    positives: &'a [(u32, u32)],
    negatives: &'a [u32],
    neg_per_pos: usize,
    n1: u32,
}

impl<'a> Batch<'a> {
    pub fn new(
        positives: &'a [(u32, u32)],
        negatives: &'a [u32],
        neg_per_pos: usize,
        n1: u32,
    ) -> Result<Self> {
        if negatives.len() != positives.len() * neg_per_pos {
            return Err(Error::DimensionMismatch {
                expected: positives.len() * neg_per_pos,
                got: negatives.len(),
            });
        }
        Ok(Batch { positives, negatives, neg_per_pos, n1 })
    }

    pub fn positives(&self) -> &[(u32, u32)] {
        self.positives
    }

    /// Negatives belonging to positive `i`.
    pub fn negatives_of(&self, i: usize) -> &[u32] {
        &self.negatives[i * self.neg_per_pos..(i + 1) * self.neg_per_pos]
    }

    pub fn n1(&self) -> u32 {
        self.n1
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(SIGMA_FLOOR, 1.0 - SIGMA_FLOOR)
}

/// Cross-entropy reconstruction loss on the raw pre-convolution embeddings:
/// -ln sigma(v_x . v_y) per positive, -ln(1 - sigma(v_x . v_y')) per
/// negative, averaged over positives.
pub fn loss_rec(v0: &DenseMatrix, batch: &Batch) -> f64 {
    if batch.positives.is_empty() {
        return 0.0;
    }
    let n1 = batch.n1 as usize;
    let mut total = 0.0;
    for (i, &(x, y)) in batch.positives.iter().enumerate() {
        let vx = v0.row(x as usize);
        let s = math::sigmoid(dot(vx, v0.row(n1 + y as usize)));
        total -= math::ln(clamp_prob(s));
        for &yn in batch.negatives_of(i) {
            let s = math::sigmoid(dot(vx, v0.row(n1 + yn as usize)));
            total -= math::ln(1.0 - clamp_prob(s));
        }
    }
    total / batch.positives.len() as f64
}

/// Pairwise ranking loss: -ln sigma(pos - neg) averaged over all pairs.
/// `scores_neg` holds the negatives for `scores_pos[i]` contiguously, so its
/// length must be a multiple of `scores_pos.len()`.
pub fn loss_bpr(scores_pos: &[f64], scores_neg: &[f64]) -> Result<f64> {
    if scores_pos.is_empty() {
        return Ok(0.0);
    }
    if !scores_neg.len().is_multiple_of(scores_pos.len()) {
        return Err(Error::DimensionMismatch {
            expected: scores_pos.len(),
            got: scores_neg.len(),
        });
    }
    let per = scores_neg.len() / scores_pos.len();
    let mut total = 0.0;
    for (i, &sp) in scores_pos.iter().enumerate() {
        for &sn in &scores_neg[i * per..(i + 1) * per] {
            total -= math::ln(clamp_prob(math::sigmoid(sp - sn)));
        }
    }
    Ok(total / scores_neg.len() as f64)
}

/// Combined objective. Ablations remove their term entirely; the L2 term is
/// always present.
pub fn total_loss(rec: f64, bpr: f64, v0: &DenseMatrix, cfg: &TrainConfig) -> f64 {
    let mut total = cfg.lambda2 * v0.frobenius_sq();
    if !cfg.ablations.no_rec {
        total += rec;
    }
    if !cfg.ablations.no_bpr {
        total += cfg.lambda1 * bpr;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub rec: f64,
    pub bpr: f64,
    pub total: f64,
}

/// Activations cached by a forward pass: the convolution stack, one scale and
/// one code row per node per segment. In Hash mode scales are rounded through
/// f32 so scores agree bit for bit with the serialized code table.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: ForwardMode,
    estimator: EstimatorSpec,
    stack: LayerStack,
    /// Stack layer backing each segment (a single entry under no_ah_ta).
    segment_layers: Vec<usize>,
    /// nodes x segments.
    alphas: DenseMatrix,
    /// Per segment, nodes x dim: hard signs, surrogate values, or raw rows.
    q: Vec<DenseMatrix>,
    alpha_path: bool,
}

impl ForwardCache {
    fn build(
        stack: LayerStack,
        cfg: &TrainConfig,
        mode: ForwardMode,
        factors: Option<&DenseMatrix>,
    ) -> Result<Self> {
        let segment_layers: Vec<usize> = if cfg.ablations.no_ah_ta {
            vec![stack.depth()]
        } else {
            (0..=stack.depth()).collect()
        };
        let (nodes, dim) = (stack.nodes(), stack.dim());
        let unit_alpha = mode == ForwardMode::Linear || cfg.ablations.no_ah_rf;
        let mut alphas = DenseMatrix::zeros(nodes, segment_layers.len());
        let mut q = Vec::with_capacity(segment_layers.len());
        for (s, &l) in segment_layers.iter().enumerate() {
            let layer = stack.layer(l);
            let mut codes = DenseMatrix::zeros(nodes, dim);
            for node in 0..nodes {
                let row = layer.row(node);
                let mut alpha = if unit_alpha {
                    1.0
                } else {
                    match factors {
                        Some(f) => f.row(node)[s],
                        None => rescale_factor(row),
                    }
                };
                if mode == ForwardMode::Hash {
                    alpha = (alpha as f32) as f64;
                }
                alphas.row_mut(node)[s] = alpha;
                let out = codes.row_mut(node);
                match mode {
                    ForwardMode::Hash => {
                        for (o, &x) in out.iter_mut().zip(row) {
                            *o = hard_sign(x);
                        }
                    }
                    ForwardMode::Surrogate => {
                        for (o, &x) in out.iter_mut().zip(row) {
                            *o = surrogate_value(cfg.estimator, x)?;
                        }
                    }
                    ForwardMode::Linear => out.copy_from_slice(row),
                }
            }
            q.push(codes);
        }
        Ok(ForwardCache {
            mode,
            estimator: cfg.estimator,
            stack,
            segment_layers,
            alphas,
            q,
            alpha_path: !unit_alpha,
        })
    }

    /// Score between two unified node ids: per segment, the scale product
    /// times the code inner product, summed over segments.
    pub fn score(&self, a: usize, b: usize) -> f64 {
        let mut total = 0.0;
        for s in 0..self.q.len() {
            let alpha = self.alphas.row(a)[s] * self.alphas.row(b)[s];
            total += alpha * dot(self.q[s].row(a), self.q[s].row(b));
        }
        total
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn segments(&self) -> usize {
        self.segment_layers.len()
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }
}

/// Runs the forward pipeline for one frozen projection and batch, returning
/// losses and the activation cache. Deterministic: all randomness (the
/// projection, the negatives) is supplied by the caller.
pub fn evaluate_batch(
    adj: &NormalizedAdjacency,
    v0: &DenseMatrix,
    proj: &ProjectionState,
    cfg: &TrainConfig,
    mode: ForwardMode,
    factors: Option<&DenseMatrix>,
    batch: &Batch,
) -> Result<(BatchLosses, ForwardCache)> {
    let dispersed = disperse(v0, proj, cfg.effective_epsilon());
    let stack = LayerStack::convolve(adj, dispersed, cfg.layers);
    let cache = ForwardCache::build(stack, cfg, mode, factors)?;
    let rec = loss_rec(v0, batch);
    let (pos, neg) = pair_scores(&cache, batch);
    let bpr = loss_bpr(&pos, &neg)?;
    let total = total_loss(rec, bpr, v0, cfg);
    Ok((BatchLosses { rec, bpr, total }, cache))
}

/// Scores of every positive pair and every negative pair in the batch.
pub fn pair_scores(cache: &ForwardCache, batch: &Batch) -> (Vec<f64>, Vec<f64>) {
    let n1 = batch.n1 as usize;
    let mut pos = Vec::with_capacity(batch.positives.len());
    let mut neg = Vec::with_capacity(batch.negatives.len());
    for (i, &(x, y)) in batch.positives.iter().enumerate() {
        pos.push(cache.score(x as usize, n1 + y as usize));
        for &yn in batch.negatives_of(i) {
            neg.push(cache.score(x as usize, n1 + yn as usize));
        }
    }
    (pos, neg)
}

/// Everything one optimization step produces.
#[derive(Debug)]
pub struct StepOutput {
    pub losses: BatchLosses,
    pub grad: DenseMatrix,
    /// Gradient on the trained scale tensor, when one exists.
    pub factor_grad: Option<DenseMatrix>,
    pub cache: ForwardCache,
}

/// Forward plus exact reverse accumulation onto the embedding table.
pub fn batch_gradient(
    adj: &NormalizedAdjacency,
    v0: &DenseMatrix,
    proj: &ProjectionState,
    cfg: &TrainConfig,
    mode: ForwardMode,
    factors: Option<&DenseMatrix>,
    batch: &Batch,
) -> Result<StepOutput> {
    let (losses, cache) = evaluate_batch(adj, v0, proj, cfg, mode, factors, batch)?;
    let n1 = batch.n1 as usize;
    let mut grad = DenseMatrix::zeros(v0.rows(), v0.cols());

    if !cfg.ablations.no_rec && !batch.positives.is_empty() {
        let inv = 1.0 / batch.positives.len() as f64;
        for (i, &(x, y)) in batch.positives.iter().enumerate() {
            let xi = x as usize;
            let s = math::sigmoid(dot(v0.row(xi), v0.row(n1 + y as usize)));
            accumulate_pair(&mut grad, v0, xi, n1 + y as usize, (s - 1.0) * inv);
            for &yn in batch.negatives_of(i) {
                let s = math::sigmoid(dot(v0.row(xi), v0.row(n1 + yn as usize)));
                accumulate_pair(&mut grad, v0, xi, n1 + yn as usize, s * inv);
            }
        }
    }

    let mut factor_grad = None;
    if !cfg.ablations.no_bpr && !batch.positives.is_empty() {
        let pairs = score_pair_weights(&cache, batch, cfg.lambda1);
        let (score_grad, fg) = score_backward(adj, proj, cfg, &cache, &pairs, factors.is_some())?;
        grad.add_scaled(&score_grad, 1.0);
        factor_grad = fg;
    } else if factors.is_some() {
        factor_grad = Some(DenseMatrix::zeros(cache.alphas.rows(), cache.alphas.cols()));
    }

    grad.add_scaled(v0, 2.0 * cfg.lambda2);
    if let Some(node) = grad.first_non_finite_row() {
        return Err(Error::NonFinite { context: "gradient", node: Some(node) });
    }
    Ok(StepOutput { losses, grad, factor_grad, cache })
}

/// grad.row(a) += w * v0.row(b); grad.row(b) += w * v0.row(a)
fn accumulate_pair(grad: &mut DenseMatrix, v0: &DenseMatrix, a: usize, b: usize, w: f64) {
    for k in 0..v0.cols() {
        grad.row_mut(a)[k] += w * v0.row(b)[k];
        grad.row_mut(b)[k] += w * v0.row(a)[k];
    }
}

/// Upstream weights dL/dScore for every scored pair, in unified node ids.
fn score_pair_weights(cache: &ForwardCache, batch: &Batch, lambda1: f64) -> Vec<(u32, u32, f64)> {
    let n1 = batch.n1;
    let total_pairs = batch.negatives.len() as f64;
    let mut out = Vec::with_capacity(2 * batch.negatives.len());
    for (i, &(x, y)) in batch.positives.iter().enumerate() {
        let yu = n1 + y;
        let sp = cache.score(x as usize, yu as usize);
        for &yn in batch.negatives_of(i) {
            let ynu = n1 + yn;
            let sn = cache.score(x as usize, ynu as usize);
            let w = lambda1 * (math::sigmoid(sp - sn) - 1.0) / total_pairs;
            out.push((x, yu, w));
            out.push((x, ynu, -w));
        }
    }
    out
}

fn l1_subgradient(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pushes pair score gradients back to the embedding table: per-segment
/// accumulation through the code path (estimator gradient) and the scale
/// path (L1 subgradient over dim, or the factor tensor), then the reversed
/// convolution, then the dispersion transpose.
#[allow(clippy::needless_range_loop)]
fn score_backward(
    adj: &NormalizedAdjacency,
    proj: &ProjectionState,
    cfg: &TrainConfig,
    cache: &ForwardCache,
    pairs: &[(u32, u32, f64)],
    learnable: bool,
) -> Result<(DenseMatrix, Option<DenseMatrix>)> {
    let nodes = cache.stack.nodes();
    let dim = cache.stack.dim();
    let inv_dim = 1.0 / dim as f64;
    let segments = cache.segments();
    let mut per_segment: Vec<DenseMatrix> =
        (0..segments).map(|_| DenseMatrix::zeros(nodes, dim)).collect();
    let mut factor_grad = learnable.then(|| DenseMatrix::zeros(nodes, segments));

    for &(a, b, w) in pairs {
        let (a, b) = (a as usize, b as usize);
        for s in 0..segments {
            let layer = cache.stack.layer(cache.segment_layers[s]);
            let (alpha_a, alpha_b) = (cache.alphas.row(a)[s], cache.alphas.row(b)[s]);
            let code_w = w * alpha_a * alpha_b;
            let pair_dot = dot(cache.q[s].row(a), cache.q[s].row(b));
            for (node, other, alpha_other) in [(a, b, alpha_b), (b, a, alpha_a)] {
                let phi = layer.row(node);
                let q_other = cache.q[s].row(other);
                let out = per_segment[s].row_mut(node);
                match cache.mode {
                    ForwardMode::Linear => {
                        for k in 0..dim {
                            out[k] += w * q_other[k];
                        }
                    }
                    _ => {
                        for k in 0..dim {
                            out[k] += code_w * q_other[k] * surrogate_grad(cache.estimator, phi[k]);
                        }
                    }
                }
                if cache.alpha_path {
                    if let Some(fg) = factor_grad.as_mut() {
                        fg.row_mut(node)[s] += w * alpha_other * pair_dot;
                    } else {
                        let scale_w = w * alpha_other * pair_dot * inv_dim;
                        let out = per_segment[s].row_mut(node);
                        for k in 0..dim {
                            out[k] += scale_w * l1_subgradient(phi[k]);
                        }
                    }
                }
            }
        }
    }

    let depth = cache.stack.depth();
    let mut by_layer: Vec<DenseMatrix> =
        (0..=depth).map(|_| DenseMatrix::zeros(nodes, dim)).collect();
    for (s, g) in per_segment.into_iter().enumerate() {
        by_layer[cache.segment_layers[s]].add_scaled(&g, 1.0);
    }
    let mut g = by_layer.pop().expect("depth + 1 layers");
    for l in (0..depth).rev() {
        g = adj.spmm(&g);
        g.add_scaled(&by_layer[l], 1.0);
    }
    Ok((disperse(&g, proj, cfg.effective_epsilon()), factor_grad))
}

/// Uniform negative item for `x`: rejection against the observed neighbor
/// set, falling back to explicit complement enumeration so the draw stays
/// uniform even for high-degree nodes.
pub fn sample_negatives<R: Rng>(
    graph: &BipartiteGraph,
    x: u32,
    count: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let n1 = graph.n1();
    let n2 = graph.n2();
    let neighbors = graph.neighbors(x);
    let mut out = Vec::with_capacity(count);
    'next: for _ in 0..count {
        for _ in 0..64 {
            let y = rng.gen_range(0..n2);
            if neighbors.binary_search(&(n1 + y)).is_err() {
                out.push(y);
                continue 'next;
            }
        }
        let pool: Vec<u32> =
            (0..n2).filter(|y| neighbors.binary_search(&(n1 + y)).is_err()).collect();
        if pool.is_empty() {
            return Err(Error::InvalidConfig(alloc::format!(
                "node {x} is adjacent to every item; no negative exists"
            )));
        }
        out.push(pool[rng.gen_range(0..pool.len())]);
    }
    Ok(out)
}

fn adam_update(
    param: &mut DenseMatrix,
    m: &mut DenseMatrix,
    v: &mut DenseMatrix,
    grad: &DenseMatrix,
    lr: f64,
    t: u64,
) {
    let c1 = 1.0 - math::pow(ADAM_BETA1, t as f64);
    let c2 = 1.0 - math::pow(ADAM_BETA2, t as f64);
    let (p, m, v, g) =
        (param.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice(), grad.as_slice());
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (math::sqrt(v_hat) + ADAM_EPS);
    }
}

fn shuffle_indices<R: Rng>(xs: &mut [usize], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Per-epoch record: step-averaged losses and validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_bpr: f64,
    pub loss_total: f64,
    pub recall: f64,
    pub ndcg: f64,
}

struct FactorState {
    values: DenseMatrix,
    m: DenseMatrix,
    v: DenseMatrix,
}

/// Owns the trainable state and drives epochs over a fixed split.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    split: &'a DataSplit,
    graph: BipartiteGraph,
    adj: NormalizedAdjacency,
    v0: DenseMatrix,
    adam_m: DenseMatrix,
    adam_v: DenseMatrix,
    adam_t: u64,
    factors: Option<FactorState>,
    rng_disp: ChaCha12Rng,
    rng_samp: ChaCha12Rng,
    epoch: usize,
    history: Vec<EpochReport>,
    best_recall: f64,
    stale_epochs: usize,
    last_cache: Option<ForwardCache>,
}

impl<'a> Trainer<'a> {
    pub fn new(n1: u32, n2: u32, split: &'a DataSplit, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let graph = split.train_graph(n1, n2)?;
        let adj = graph.normalize();
        let nodes = graph.node_count();
        let mut rng_init = stream(cfg.seed, Stream::Init);
        let mut v0 = DenseMatrix::zeros(nodes, cfg.dim);
        for x in v0.as_mut_slice() {
            *x = INIT_STD * normal(&mut rng_init);
        }
        let mut trainer = Trainer {
            split,
            graph,
            adj,
            v0,
            adam_m: DenseMatrix::zeros(nodes, cfg.dim),
            adam_v: DenseMatrix::zeros(nodes, cfg.dim),
            adam_t: 0,
            factors: None,
            rng_disp: stream(cfg.seed, Stream::Dispersion),
            rng_samp: stream(cfg.seed, Stream::Sampling),
            epoch: 0,
            history: Vec::new(),
            best_recall: f64::NEG_INFINITY,
            stale_epochs: 0,
            last_cache: None,
            cfg,
        };
        trainer.init_factors()?;
        Ok(trainer)
    }

    /// Rebuilds a trainer around checkpointed embeddings and Adam moments.
    /// RNG streams restart from the seed; a resumed run is deterministic but
    /// does not replay the interrupted run's exact draws.
    #[allow(clippy::too_many_arguments)]
    pub fn with_state(
        n1: u32,
        n2: u32,
        split: &'a DataSplit,
        cfg: TrainConfig,
        v0: DenseMatrix,
        adam_m: DenseMatrix,
        adam_v: DenseMatrix,
        adam_t: u64,
    ) -> Result<Self> {
        let mut trainer = Self::new(n1, n2, split, cfg)?;
        for (name, m) in [("embeddings", &v0), ("adam_m", &adam_m), ("adam_v", &adam_v)] {
            if m.rows() != trainer.v0.rows() || m.cols() != trainer.v0.cols() {
                return Err(Error::InvalidConfig(alloc::format!(
                    "checkpoint {name} shape {}x{} does not match graph/config {}x{}",
                    m.rows(),
                    m.cols(),
                    trainer.v0.rows(),
                    trainer.v0.cols()
                )));
            }
        }
        trainer.v0 = v0;
        trainer.adam_m = adam_m;
        trainer.adam_v = adam_v;
        trainer.adam_t = adam_t;
        // Checkpoints carry no factor tensor, so re-derive it from the
        // restored embeddings with freshly seeded streams.
        trainer.rng_disp = stream(trainer.cfg.seed, Stream::Dispersion);
        trainer.rng_samp = stream(trainer.cfg.seed, Stream::Sampling);
        trainer.init_factors()?;
        Ok(trainer)
    }

    /// The trained-scale ablation initializes its tensor from the derived
    /// rescale values of the initial stack, before any update.
    fn init_factors(&mut self) -> Result<()> {
        if !self.cfg.ablations.learnable_factors {
            return Ok(());
        }
        let proj = sample_projection(&self.v0, self.cfg.power_iterations, &mut self.rng_disp)?;
        let dispersed = disperse(&self.v0, &proj, self.cfg.effective_epsilon());
        let stack = LayerStack::convolve(&self.adj, dispersed, self.cfg.layers);
        let layers: Vec<usize> = if self.cfg.ablations.no_ah_ta {
            vec![stack.depth()]
        } else {
            (0..=stack.depth()).collect()
        };
        let nodes = stack.nodes();
        let mut values = DenseMatrix::zeros(nodes, layers.len());
        for node in 0..nodes {
            for (s, &l) in layers.iter().enumerate() {
                values.row_mut(node)[s] = rescale_factor(stack.layer(l).row(node));
            }
        }
        self.factors = Some(FactorState {
            m: DenseMatrix::zeros(nodes, layers.len()),
            v: DenseMatrix::zeros(nodes, layers.len()),
            values,
        });
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.v0
    }

    pub fn adam_state(&self) -> (&DenseMatrix, &DenseMatrix, u64) {
        (&self.adam_m, &self.adam_v, self.adam_t)
    }

    pub fn history(&self) -> &[EpochReport] {
        &self.history
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled positives: per step, a fresh projection
    /// draw, fresh negatives, one Adam update. Ends with a validation pass on
    /// a stack built from the updated embeddings.
    pub fn epoch(&mut self) -> Result<EpochReport> {
        let positives = self.graph.edges().to_vec();
        let mut order: Vec<usize> = (0..positives.len()).collect();
        shuffle_indices(&mut order, &mut self.rng_samp);
        let (mut sum_rec, mut sum_bpr, mut sum_total) = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let proj =
                sample_projection(&self.v0, self.cfg.power_iterations, &mut self.rng_disp)?;
            let batch_pos: Vec<(u32, u32)> = chunk.iter().map(|&i| positives[i]).collect();
            let mut negatives = Vec::with_capacity(batch_pos.len() * self.cfg.neg_samples);
            for &(x, _) in &batch_pos {
                negatives.extend(sample_negatives(
                    &self.graph,
                    x,
                    self.cfg.neg_samples,
                    &mut self.rng_samp,
                )?);
            }
            let batch =
                Batch::new(&batch_pos, &negatives, self.cfg.neg_samples, self.graph.n1())?;
            let factors = self.factors.as_ref().map(|f| &f.values);
            let out = batch_gradient(
                &self.adj,
                &self.v0,
                &proj,
                &self.cfg,
                ForwardMode::Hash,
                factors,
                &batch,
            )?;
            if !out.losses.total.is_finite() {
                return Err(Error::Diverged { epoch: self.epoch });
            }
            self.adam_t += 1;
            adam_update(
                &mut self.v0,
                &mut self.adam_m,
                &mut self.adam_v,
                &out.grad,
                self.cfg.lr,
                self.adam_t,
            );
            if let (Some(f), Some(fg)) = (self.factors.as_mut(), out.factor_grad.as_ref()) {
                adam_update(&mut f.values, &mut f.m, &mut f.v, fg, self.cfg.lr, self.adam_t);
            }
            if let Some(node) = self.v0.first_non_finite_row() {
                return Err(Error::NonFinite { context: "embeddings", node: Some(node) });
            }
            sum_rec += out.losses.rec;
            sum_bpr += out.losses.bpr;
            sum_total += out.losses.total;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::EmptyTrainSet);
        }
        self.refresh_cache()?;
        let summary = self.validation_metrics()?;
        let report = EpochReport {
            epoch: self.epoch,
            loss_rec: sum_rec / steps as f64,
            loss_bpr: sum_bpr / steps as f64,
            loss_total: sum_total / steps as f64,
            recall: summary.recall,
            ndcg: summary.ndcg,
        };
        self.epoch += 1;
        if report.recall > self.best_recall {
            self.best_recall = report.recall;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        self.history.push(report.clone());
        log::debug!(
            "epoch {}: total {:.6} rec {:.6} bpr {:.6} recall {:.4}",
            report.epoch,
            report.loss_total,
            report.loss_rec,
            report.loss_bpr,
            report.recall
        );
        Ok(report)
    }

    pub fn should_stop(&self) -> bool {
        self.cfg.patience.is_some_and(|p| self.stale_epochs >= p)
    }

    /// Runs up to the configured epoch count, honoring early stopping.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.cfg.epochs && !self.should_stop() {
            self.epoch()?;
        }
        Ok(())
    }

    /// Builds a fresh Hash-mode cache from the current embeddings, consuming
    /// one projection draw.
    fn refresh_cache(&mut self) -> Result<()> {
        let proj =
            sample_projection(&self.v0, self.cfg.power_iterations, &mut self.rng_disp)?;
        let dispersed = disperse(&self.v0, &proj, self.cfg.effective_epsilon());
        let stack = LayerStack::convolve(&self.adj, dispersed, self.cfg.layers);
        let factors = self.factors.as_ref().map(|f| &f.values);
        self.last_cache =
            Some(ForwardCache::build(stack, &self.cfg, ForwardMode::Hash, factors)?);
        Ok(())
    }

    /// Serializable code table for the current model state.
    pub fn code_table(&mut self) -> Result<HashCodeTable> {
        if self.last_cache.is_none() {
            self.refresh_cache()?;
        }
        let cache = self.last_cache.as_ref().expect("cache just built");
        let mut table = if self.cfg.ablations.no_ah_ta {
            HashCodeTable::build_last_layer_only(cache.stack())?
        } else {
            HashCodeTable::build(cache.stack())?
        };
        if let Some(f) = &self.factors {
            table.set_scales(f.values.as_slice().iter().map(|&x| x as f32).collect())?;
        }
        if self.cfg.ablations.no_ah_rf {
            table.force_unit_scales();
        }
        Ok(table)
    }

    fn validation_metrics(&mut self) -> Result<MetricSummary> {
        let table = self.code_table()?;
        Ok(evaluate_hamming(&table, &self.graph, self.split, self.cfg.eval_top_n))
    }

    /// Held-out metrics for the current state (used by standalone evaluation
    /// of a loaded checkpoint).
    pub fn evaluate_current(&mut self) -> Result<MetricSummary> {
        if self.last_cache.is_none() {
            self.refresh_cache()?;
        }
        self.validation_metrics()
    }

    /// Loss surface scan: for every ordered magnitude pair, shift all
    /// embedding entries by (p_plus - p_minus) times the mean absolute
    /// embedding value and evaluate the chosen loss under the hashed and the
    /// sign-free forward paths. Projection seed vector and negatives are
    /// frozen across the grid.
    pub fn landscape_scan(&self, p_values: &[f64], kind: LossKind) -> Result<Vec<LandscapeCell>> {
        let mut rng_d = stream(self.cfg.seed, Stream::Dispersion);
        let p0 = normal_vec(&mut rng_d, self.cfg.dim);
        let mut rng_s = stream(self.cfg.seed, Stream::Sampling);
        let positives = self.graph.edges().to_vec();
        let mut negatives = Vec::with_capacity(positives.len() * self.cfg.neg_samples);
        for &(x, _) in &positives {
            negatives.extend(sample_negatives(
                &self.graph,
                x,
                self.cfg.neg_samples,
                &mut rng_s,
            )?);
        }
        let batch = Batch::new(&positives, &negatives, self.cfg.neg_samples, self.graph.n1())?;
        let mean_abs = self.v0.as_slice().iter().map(|x| math::abs(*x)).sum::<f64>()
            / self.v0.as_slice().len() as f64;
        let factors = self.factors.as_ref().map(|f| &f.values);

        let mut cells = Vec::with_capacity(p_values.len() * p_values.len());
        for &p_plus in p_values {
            for &p_minus in p_values {
                let delta = (p_plus - p_minus) * mean_abs;
                let mut shifted = self.v0.clone();
                if delta != 0.0 {
                    for x in shifted.as_mut_slice() {
                        *x += delta;
                    }
                }
                let proj =
                    crate::dispersion::power_iterate(&shifted, p0.clone(), self.cfg.power_iterations)?;
                let (hashed_losses, _) = evaluate_batch(
                    &self.adj,
                    &shifted,
                    &proj,
                    &self.cfg,
                    ForwardMode::Hash,
                    factors,
                    &batch,
                )?;
                let (smooth_losses, _) = evaluate_batch(
                    &self.adj,
                    &shifted,
                    &proj,
                    &self.cfg,
                    ForwardMode::Linear,
                    None,
                    &batch,
                )?;
                cells.push(LandscapeCell {
                    p_plus,
                    p_minus,
                    hashed: kind.pick(hashed_losses),
                    smooth: kind.pick(smooth_losses),
                });
            }
        }
        Ok(cells)
    }
}

/// Which objective component a landscape scan reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Rec,
    Bpr,
    Total,
}

impl LossKind {
    fn pick(self, losses: BatchLosses) -> f64 {
        match self {
            LossKind::Rec => losses.rec,
            LossKind::Bpr => losses.bpr,
            LossKind::Total => losses.total,
        }
    }
}

/// One landscape grid cell: both perturbation magnitudes and the loss under
/// each forward variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeCell {
    pub p_plus: f64,
    pub p_minus: f64,
    pub hashed: f64,
    pub smooth: f64,
}

/// Ranks all items for every query node with held-out positives, excluding
/// each query's observed training items, and averages recall and ndcg at
/// `top_n`.
pub fn evaluate_hamming(
    table: &HashCodeTable,
    train_graph: &BipartiteGraph,
    split: &DataSplit,
    top_n: usize,
) -> MetricSummary {
    let n1 = train_graph.n1();
    let n2 = train_graph.n2();
    let index = RetrievalIndex::from_table_range(table, n1 as usize, n2 as usize);
    let mut acc = MetricAccumulator::default();
    let mut ids = Vec::with_capacity(top_n);
    for x in split.query_nodes() {
        let held = split.held_out(x);
        if held.is_empty() {
            continue;
        }
        let query = QueryCode::from_table(table, x as usize);
        let neighbors = train_graph.neighbors(x);
        let ranked =
            index.top_n(&query, top_n, |c| neighbors.binary_search(&(n1 + c)).is_ok());
        ids.clear();
        ids.extend(ranked.iter().map(|(id, _)| *id));
        acc.push(&ids, held, top_n);
    }
    acc.finish()
}

#[cfg(test)]
// Expected values are frozen literals on purpose, even where they happen to
// match a library constant.
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::dispersion::power_iterate;
    use crate::graph::BipartiteGraph;
    use crate::synthetic::planted_two_cluster;
    use proptest::prelude::*;

    fn tiny_graph() -> BipartiteGraph {
        BipartiteGraph::from_edges(
            3,
            3,
            vec![(0, 0), (0, 2), (1, 0), (1, 1), (2, 0), (2, 2)],
        )
        .unwrap()
    }

    fn random_v0(nodes: usize, dim: usize, seed: u64) -> DenseMatrix {
        let mut rng = stream(seed, Stream::Init);
        let mut v = DenseMatrix::zeros(nodes, dim);
        for x in v.as_mut_slice() {
            *x = INIT_STD * normal(&mut rng);
        }
        v
    }

    fn fd_config(estimator: EstimatorSpec) -> TrainConfig {
        let mut cfg = TrainConfig::new(4);
        cfg.layers = 2;
        cfg.power_iterations = 1;
        cfg.epsilon = 0.4;
        cfg.estimator = estimator;
        cfg.lambda1 = 0.7;
        cfg.lambda2 = 1e-3;
        cfg
    }

    /// Deterministic non-neighbor per positive, for frozen-batch tests.
    fn first_non_neighbors(g: &BipartiteGraph) -> Vec<u32> {
        g.edges()
            .iter()
            .map(|&(x, _)| {
                (0..g.n2())
                    .find(|y| g.neighbors(x).binary_search(&(g.n1() + y)).is_err())
                    .expect("non-neighbor exists")
            })
            .collect()
    }

    #[test]
    fn config_validation_rejects_inconsistencies() {
        let mut cfg = TrainConfig::new(16);
        cfg.power_iterations = 3;
        assert!(cfg.validate().is_err(), "power iterations above layers");
        let mut cfg = TrainConfig::new(16);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(16);
        cfg.ablations.no_rec = true;
        cfg.ablations.no_bpr = true;
        assert!(cfg.validate().is_err(), "no objective left");
        let mut cfg = TrainConfig::new(16);
        cfg.ablations.learnable_factors = true;
        cfg.ablations.no_ah_rf = true;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(16);
        cfg.epsilon = 1.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::new(16).validate().is_ok());
    }

    #[test]
    fn rec_loss_frozen_values() {
        // Two nodes per side; v chosen so v_x . v_y = 0 for the positive.
        let mut v0 = DenseMatrix::zeros(4, 2);
        v0.row_mut(0).copy_from_slice(&[1.0, 1.0]);
        v0.row_mut(2).copy_from_slice(&[1.0, -1.0]);
        v0.row_mut(3).copy_from_slice(&[-1.0, 1.0]);
        let positives = [(0u32, 0u32)];
        let negatives = [1u32];
        let batch = Batch::new(&positives, &negatives, 1, 2).unwrap();
        // Positive and negative both sit at dot = 0: each contributes ln 2.
        let loss = loss_rec(&v0, &batch);
        assert!((loss - 2.0 * 0.6931471805599453).abs() < 1e-15, "{loss}");

        // Saturated positive: contribution collapses toward the clamp floor.
        let mut v0 = DenseMatrix::zeros(4, 2);
        v0.row_mut(0).copy_from_slice(&[8.0, 8.0]);
        v0.row_mut(2).copy_from_slice(&[8.0, 8.0]);
        v0.row_mut(3).copy_from_slice(&[-8.0, -8.0]);
        let loss = loss_rec(&v0, &batch);
        assert!(loss > 0.0 && loss < 1e-6, "{loss}");
    }

    #[test]
    fn bpr_loss_frozen_values() {
        let tie = loss_bpr(&[1.0], &[1.0]).unwrap();
        assert!((tie - 0.6931471805599453).abs() < 1e-15, "{tie}");
        let gap2 = loss_bpr(&[3.0], &[1.0]).unwrap();
        assert!((gap2 - 0.12692801104297263).abs() < 1e-15, "{gap2}");
        let saturated = loss_bpr(&[45.0], &[0.0]).unwrap();
        assert!(saturated > 0.0 && saturated < 2e-7, "{saturated}");
        // Mean over pairs: two pairs at the tie point.
        let two = loss_bpr(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((two - 0.6931471805599453).abs() < 1e-15);
        assert!(loss_bpr(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn total_loss_switch_semantics() {
        let v0 = DenseMatrix::zeros(2, 2);
        let mut cfg = TrainConfig::new(2);
        cfg.lambda1 = 0.5;
        cfg.lambda2 = 0.0;
        assert_eq!(total_loss(1.0, 2.0, &v0, &cfg), 2.0);

        let mut ones = DenseMatrix::zeros(10, 10);
        ones.fill(1.0);
        cfg.lambda2 = 1e-4;
        let with_l2 = total_loss(1.0, 2.0, &ones, &cfg);
        assert!((with_l2 - 2.01).abs() < 1e-15, "{with_l2}");

        cfg.ablations.no_bpr = true;
        let no_bpr = total_loss(1.0, 2.0, &ones, &cfg);
        assert_eq!(no_bpr, cfg.lambda2 * ones.frobenius_sq() + 1.0);
        cfg.ablations.no_bpr = false;
        cfg.ablations.no_rec = true;
        let no_rec = total_loss(1.0, 2.0, &ones, &cfg);
        assert_eq!(no_rec, cfg.lambda2 * ones.frobenius_sq() + 0.5 * 2.0);
    }

    /// Builds a Hash cache over a zero-depth stack with prescribed rows.
    fn cache_from_rows(rows: &[&[f64]], cfg: &TrainConfig) -> ForwardCache {
        let dim = rows[0].len();
        let mut m = DenseMatrix::zeros(rows.len(), dim);
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        let stack = LayerStack::from_layers(vec![m]);
        ForwardCache::build(stack, cfg, ForwardMode::Hash, None).unwrap()
    }

    #[test]
    fn score_examples_at_zero_depth() {
        let mut cfg = TrainConfig::new(2);
        cfg.layers = 0;
        cfg.power_iterations = 0;
        // x codes (+1, -1) scale 2; y codes (+1, +1) scale 3.
        let cache = cache_from_rows(&[&[2.0, -2.0], &[3.0, 3.0]], &cfg);
        assert_eq!(cache.score(0, 1), 0.0);

        let mut cfg8 = TrainConfig::new(8);
        cfg8.layers = 0;
        cfg8.power_iterations = 0;
        let row = [1.5; 8];
        let cache = cache_from_rows(&[&row, &row], &cfg8);
        assert_eq!(cache.score(0, 1), 1.5 * 1.5 * 8.0);

        cfg8.ablations.no_ah_rf = true;
        let cache = cache_from_rows(&[&row, &row], &cfg8);
        assert_eq!(cache.score(0, 1), 8.0);
    }

    #[test]
    fn hash_forward_matches_packed_retrieval_bit_for_bit() {
        let g = tiny_graph();
        let adj = g.normalize();
        let v0 = random_v0(g.node_count(), 12, 7);
        let mut cfg = TrainConfig::new(12);
        cfg.layers = 2;
        for no_ah_ta in [false, true] {
            cfg.ablations.no_ah_ta = no_ah_ta;
            let proj = power_iterate(&v0, vec![1.0; 12], cfg.power_iterations).unwrap();
            let positives = g.edges().to_vec();
            let negatives = first_non_neighbors(&g);
            let batch = Batch::new(&positives, &negatives, 1, g.n1()).unwrap();
            let (_, cache) =
                evaluate_batch(&adj, &v0, &proj, &cfg, ForwardMode::Hash, None, &batch).unwrap();
            let table = if no_ah_ta {
                HashCodeTable::build_last_layer_only(cache.stack()).unwrap()
            } else {
                HashCodeTable::build(cache.stack()).unwrap()
            };
            let index = RetrievalIndex::from_table(&table);
            for a in 0..g.node_count() {
                let q = QueryCode::from_table(&table, a);
                for b in 0..g.node_count() {
                    let float_path = cache.score(a, b);
                    let hamming_path = index.score(&q, b);
                    assert_eq!(
                        float_path.to_bits(),
                        hamming_path.to_bits(),
                        "pair {a},{b} no_ah_ta={no_ah_ta}: {float_path} vs {hamming_path}"
                    );
                }
            }
        }
    }

    #[test]
    fn rec_gradient_matches_logistic_form() {
        let g = tiny_graph();
        let adj = g.normalize();
        let v0 = random_v0(g.node_count(), 4, 3);
        let mut cfg = fd_config(EstimatorSpec::default_fourier());
        cfg.ablations.no_bpr = true;
        cfg.lambda2 = 0.0;
        let positives = [(1u32, 1u32)];
        let negatives = [2u32];
        let batch = Batch::new(&positives, &negatives, 1, g.n1()).unwrap();
        let proj = power_iterate(&v0, vec![1.0; 4], cfg.power_iterations).unwrap();
        let out =
            batch_gradient(&adj, &v0, &proj, &cfg, ForwardMode::Hash, None, &batch).unwrap();

        let (x, yu, ynu) = (1usize, 4usize, 5usize);
        let s_pos = math::sigmoid(dot(v0.row(x), v0.row(yu)));
        let s_neg = math::sigmoid(dot(v0.row(x), v0.row(ynu)));
        for k in 0..4 {
            let want_x = (s_pos - 1.0) * v0.row(yu)[k] + s_neg * v0.row(ynu)[k];
            assert!((out.grad.row(x)[k] - want_x).abs() < 1e-15);
            let want_y = (s_pos - 1.0) * v0.row(x)[k];
            assert!((out.grad.row(yu)[k] - want_y).abs() < 1e-15);
            // Rows not in the batch carry nothing.
            assert_eq!(out.grad.row(0)[k], 0.0);
            assert_eq!(out.grad.row(3)[k], 0.0);
        }
    }

    #[test]
    fn zero_upstream_weights_give_zero_gradient() {
        let g = tiny_graph();
        let adj = g.normalize();
        let v0 = random_v0(g.node_count(), 4, 5);
        let cfg = fd_config(EstimatorSpec::default_fourier());
        let proj = power_iterate(&v0, vec![1.0; 4], cfg.power_iterations).unwrap();
        let positives = g.edges().to_vec();
        let negatives = first_non_neighbors(&g);
        let batch = Batch::new(&positives, &negatives, 1, g.n1()).unwrap();
        let (_, cache) =
            evaluate_batch(&adj, &v0, &proj, &cfg, ForwardMode::Hash, None, &batch).unwrap();
        let pairs: Vec<(u32, u32, f64)> = vec![(0, 3, 0.0), (1, 4, 0.0), (2, 5, 0.0)];
        let (grad, _) = score_backward(&adj, &proj, &cfg, &cache, &pairs, false).unwrap();
        assert!(grad.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l2_term_contributes_exactly_two_lambda_v() {
        let g = tiny_graph();
        let adj = g.normalize();
        let v0 = random_v0(g.node_count(), 4, 9);
        let mut cfg = fd_config(EstimatorSpec::default_fourier());
        cfg.ablations.no_bpr = true;
        cfg.lambda2 = 0.3;
        let positives = [(1u32, 1u32)];
        let negatives = [2u32];
        let batch = Batch::new(&positives, &negatives, 1, g.n1()).unwrap();
        let proj = power_iterate(&v0, vec![1.0; 4], cfg.power_iterations).unwrap();
        let out =
            batch_gradient(&adj, &v0, &proj, &cfg, ForwardMode::Hash, None, &batch).unwrap();
        // Rows 0, 2, 3 are untouched by the single pair, so only the L2 term
        // reaches them.
        for r in [0usize, 2, 3] {
            for k in 0..4 {
                assert_eq!(out.grad.row(r)[k], 2.0 * 0.3 * v0.row(r)[k]);
            }
        }
    }

    fn fd_check(
        cfg: &TrainConfig,
        mode: ForwardMode,
        factors: Option<&DenseMatrix>,
        tol_scale: f64,
    ) {
        let g = tiny_graph();
        let adj = g.normalize();
        let dim = cfg.dim;
        let v0 = random_v0(g.node_count(), dim, 11);
        let mut rng = stream(23, Stream::Dispersion);
        let p0 = normal_vec(&mut rng, dim);
        let proj = power_iterate(&v0, p0, cfg.power_iterations).unwrap();
        let positives = g.edges().to_vec();
        let negatives = first_non_neighbors(&g);
        let batch = Batch::new(&positives, &negatives, 1, g.n1()).unwrap();

        // Keep every activation away from the estimator kinks: the sign and
        // L1 corners at zero and the clamp corners near the period edge.
        let out = batch_gradient(&adj, &v0, &proj, cfg, mode, factors, &batch).unwrap();
        let mut min_abs = f64::INFINITY;
        let mut max_abs: f64 = 0.0;
        for l in 0..=cfg.layers {
            for &x in out.cache.stack().layer(l).as_slice() {
                min_abs = min_abs.min(math::abs(x));
                max_abs = max_abs.max(math::abs(x));
            }
        }
        assert!(min_abs > 1e-3, "activation too close to a kink: {min_abs}");
        assert!(max_abs < 1.8, "activation too close to a clamp edge: {max_abs}");

        let h = 1e-5;
        let mut probe = v0.clone();
        for i in 0..probe.as_slice().len() {
            let base = probe.as_slice()[i];
            probe.as_mut_slice()[i] = base + h;
            let (up, _) =
                evaluate_batch(&adj, &probe, &proj, cfg, mode, factors, &batch).unwrap();
            probe.as_mut_slice()[i] = base - h;
            let (down, _) =
                evaluate_batch(&adj, &probe, &proj, cfg, mode, factors, &batch).unwrap();
            probe.as_mut_slice()[i] = base;
            let fd = (up.total - down.total) / (2.0 * h);
            let analytic = out.grad.as_slice()[i];
            assert!(
                (analytic - fd).abs() <= tol_scale * (1.0 + fd.abs()),
                "coordinate {i} ({}): analytic {analytic} vs fd {fd}",
                cfg.estimator.name()
            );
        }
    }

    #[test]
    fn surrogate_backward_matches_finite_differences_for_every_estimator() {
        for estimator in [
            EstimatorSpec::fourier(4, 2.0, false),
            EstimatorSpec::Ste { clip: 2.0 },
            EstimatorSpec::Tanh { temperature: 1.3 },
            EstimatorSpec::Sigmoid { temperature: 0.9 },
            EstimatorSpec::SignSwish { beta: 1.5 },
        ] {
            fd_check(&fd_config(estimator), ForwardMode::Surrogate, None, 1e-4);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences_tightly() {
        fd_check(
            &fd_config(EstimatorSpec::default_fourier()),
            ForwardMode::Linear,
            None,
            1e-6,
        );
    }

    #[test]
    fn factor_gradient_matches_finite_differences() {
        let mut cfg = fd_config(EstimatorSpec::Tanh { temperature: 1.1 });
        cfg.ablations.learnable_factors = true;
        let g = tiny_graph();
        let adj = g.normalize();
        let v0 = random_v0(g.node_count(), cfg.dim, 13);
        let mut rng = stream(29, Stream::Dispersion);
        let p0 = normal_vec(&mut rng, cfg.dim);
        let proj = power_iterate(&v0, p0, cfg.power_iterations).unwrap();
        let positives = g.edges().to_vec();
        let negatives = first_non_neighbors(&g);
        let batch = Batch::new(&positives, &negatives, 1, g.n1()).unwrap();
        let mut factors = DenseMatrix::zeros(g.node_count(), cfg.layers + 1);
        let mut frng = stream(31, Stream::Init);
        for x in factors.as_mut_slice() {
            *x = 0.8 + 0.1 * normal(&mut frng);
        }

        let out = batch_gradient(
            &adj,
            &v0,
            &proj,
            &cfg,
            ForwardMode::Surrogate,
            Some(&factors),
            &batch,
        )
        .unwrap();
        let analytic = out.factor_grad.expect("factor gradient present");
        let h = 1e-5;
        for i in 0..factors.as_slice().len() {
            let base = factors.as_slice()[i];
            factors.as_mut_slice()[i] = base + h;
            let (up, _) = evaluate_batch(
                &adj,
                &v0,
                &proj,
                &cfg,
                ForwardMode::Surrogate,
                Some(&factors),
                &batch,
            )
            .unwrap();
            factors.as_mut_slice()[i] = base - h;
            let (down, _) = evaluate_batch(
                &adj,
                &v0,
                &proj,
                &cfg,
                ForwardMode::Surrogate,
                Some(&factors),
                &batch,
            )
            .unwrap();
            factors.as_mut_slice()[i] = base;
            let fd = (up.total - down.total) / (2.0 * h);
            let a = analytic.as_slice()[i];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "factor {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    proptest! {
        #[test]
        fn sampled_negatives_are_never_observed_edges(
            seed in 0u64..200,
            n1 in 2u32..10,
            n2 in 3u32..12,
        ) {
            // Small draws can come out edgeless; those are not interesting.
            prop_assume!(planted_two_cluster(n1, n2, 0.7, 0.2, seed).is_ok());
            let g = planted_two_cluster(n1, n2, 0.7, 0.2, seed).unwrap();
            let mut rng = stream(seed, Stream::Sampling);
            for x in 0..n1 {
                if g.degree(x) == n2 as usize {
                    continue;
                }
                let negs = sample_negatives(&g, x, 4, &mut rng).unwrap();
                for y in negs {
                    prop_assert!(g.neighbors(x).binary_search(&(n1 + y)).is_err());
                }
            }
        }
    }

    #[test]
    fn negative_sampling_enumerates_when_almost_saturated() {
        // x = 0 observes every item except item 3.
        let g = BipartiteGraph::from_edges(1, 4, vec![(0, 0), (0, 1), (0, 2)]).unwrap();
        let mut rng = stream(1, Stream::Sampling);
        for _ in 0..20 {
            assert_eq!(sample_negatives(&g, 0, 1, &mut rng).unwrap(), vec![3]);
        }
    }

    #[test]
    fn fully_saturated_node_cannot_sample() {
        let g = BipartiteGraph::from_edges(1, 2, vec![(0, 0), (0, 1)]).unwrap();
        let mut rng = stream(1, Stream::Sampling);
        assert!(sample_negatives(&g, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut p = DenseMatrix::from_vec(1, 1, vec![1.0]);
        let mut m = DenseMatrix::zeros(1, 1);
        let mut v = DenseMatrix::zeros(1, 1);
        let g = DenseMatrix::from_vec(1, 1, vec![0.5]);
        adam_update(&mut p, &mut m, &mut v, &g, 0.1, 1);
        // After bias correction the first step is lr * g / (|g| + eps).
        let want = 1.0 - 0.1 * 0.5 / (0.5 + ADAM_EPS);
        assert!((p.as_slice()[0] - want).abs() < 1e-15);
    }

    fn planted_split(seed: u64) -> (BipartiteGraph, DataSplit) {
        let g = planted_two_cluster(20, 20, 0.8, 0.05, seed).unwrap();
        let split = g.split(0.25, seed).unwrap();
        (g, split)
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(16);
        cfg.seed = seed;
        cfg.epochs = 6;
        cfg.patience = None;
        cfg
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let (g, split) = planted_split(42);
        let run = |cfg: TrainConfig| {
            let mut t = Trainer::new(g.n1(), g.n2(), &split, cfg).unwrap();
            t.run().unwrap();
            let table = t.code_table().unwrap();
            (t.history().to_vec(), table.scales().to_vec(), table.codes().to_vec())
        };
        let (h1, s1, c1) = run(small_cfg(42));
        let (h2, s2, c2) = run(small_cfg(42));
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn no_fd_ablation_equals_epsilon_zero_bitwise() {
        let (g, split) = planted_split(7);
        let mut with_ablation = small_cfg(7);
        with_ablation.epsilon = 0.5;
        with_ablation.ablations.no_fd = true;
        let mut zero_eps = small_cfg(7);
        zero_eps.epsilon = 0.0;

        let run = |cfg: TrainConfig| {
            let mut t = Trainer::new(g.n1(), g.n2(), &split, cfg).unwrap();
            t.run().unwrap();
            (t.history().to_vec(), t.embeddings().clone())
        };
        let (ha, va) = run(with_ablation);
        let (hb, vb) = run(zero_eps);
        assert_eq!(ha, hb);
        assert_eq!(va.as_slice(), vb.as_slice());
    }

    #[test]
    fn planted_training_reduces_total_loss() {
        let (g, split) = planted_split(42);
        let mut cfg = small_cfg(42);
        cfg.epochs = 20;
        let mut t = Trainer::new(g.n1(), g.n2(), &split, cfg).unwrap();
        t.run().unwrap();
        let h = t.history();
        assert!(
            h.last().unwrap().loss_total < h[0].loss_total,
            "first {} last {}",
            h[0].loss_total,
            h.last().unwrap().loss_total
        );
    }

    #[test]
    fn early_stopping_halts_on_stagnant_recall() {
        let (g, split) = planted_split(3);
        let mut cfg = small_cfg(3);
        cfg.epochs = 60;
        cfg.patience = Some(3);
        let mut t = Trainer::new(g.n1(), g.n2(), &split, cfg).unwrap();
        t.run().unwrap();
        assert!(t.epochs_run() < 60, "ran {} epochs", t.epochs_run());
        assert!(t.should_stop());
    }

    #[test]
    fn single_segment_table_under_no_ah_ta() {
        let (g, split) = planted_split(5);
        let mut cfg = small_cfg(5);
        cfg.epochs = 2;
        cfg.ablations.no_ah_ta = true;
        let mut t = Trainer::new(g.n1(), g.n2(), &split, cfg).unwrap();
        t.run().unwrap();
        let table = t.code_table().unwrap();
        assert_eq!(table.segments(), 1);
        assert_eq!(table.dim(), 16);
    }

    #[test]
    fn learnable_factors_train_and_export() {
        let (g, split) = planted_split(6);
        let mut cfg = small_cfg(6);
        cfg.epochs = 3;
        cfg.ablations.learnable_factors = true;
        let mut t = Trainer::new(g.n1(), g.n2(), &split, cfg).unwrap();
        let initial = t.factors.as_ref().unwrap().values.clone();
        t.run().unwrap();
        let trained = t.factors.as_ref().unwrap().values.clone();
        assert_ne!(initial.as_slice(), trained.as_slice(), "factors never updated");
        let table = t.code_table().unwrap();
        for node in [0usize, 7, 25] {
            for s in 0..3 {
                assert_eq!(table.scale(node, s), trained.row(node)[s] as f32);
            }
        }
    }

    #[test]
    fn landscape_grid_shape_and_zero_perturbation_identity() {
        let (g, split) = planted_split(8);
        let mut cfg = small_cfg(8);
        cfg.epochs = 2;
        let mut t = Trainer::new(g.n1(), g.n2(), &split, cfg).unwrap();
        t.run().unwrap();
        let grid = t.landscape_scan(&[0.0, 0.1, 0.3], LossKind::Total).unwrap();
        assert_eq!(grid.len(), 9);
        let single = t.landscape_scan(&[0.0], LossKind::Total).unwrap();
        // Every diagonal cell shifts by zero, so all equal the unperturbed
        // evaluation bit for bit.
        for cell in grid.iter().filter(|c| c.p_plus == c.p_minus) {
            assert_eq!(cell.hashed, single[0].hashed);
            assert_eq!(cell.smooth, single[0].smooth);
        }
        assert!(grid.iter().all(|c| c.hashed.is_finite() && c.smooth.is_finite()));
    }

    #[test]
    fn batch_rejects_mismatched_negative_count() {
        let positives = [(0u32, 0u32), (1, 1)];
        let negatives = [2u32];
        assert!(Batch::new(&positives, &negatives, 1, 2).is_err());
    }
}
