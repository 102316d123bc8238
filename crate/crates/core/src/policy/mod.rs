//! Toy policy: six independent categorical heads, each linear in the
//! observation.
//!
//! A response is one token per head (template, category and four box-edge
//! bins). Because the heads are independent given the observation, the
//! log-probability of a response is the sum of per-head log-softmax values,
//! which keeps likelihood ratios, KL terms and gradients exact.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{BBox, Category};
use crate::parser::{render_output, StructuredOutput};
use crate::scalar::{log_softmax, Scalar};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy dimensions: {0}")]
    InvalidDims(String),
    #[error("observation has dimension {got}, policy expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token {token} out of range for {head:?} head of size {size}")]
    TokenOutOfRange { head: HeadKind, token: usize, size: usize },
    #[error("observation contains a non-finite value")]
    NonFiniteObservation,
    #[error("head shapes differ")]
    ShapeMismatch,
    #[error("learning rate must be non-negative")]
    NegativeLearningRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Template,
    Category,
    XMin,
    YMin,
    XMax,
    YMax,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] =
        [HeadKind::Template, HeadKind::Category, HeadKind::XMin, HeadKind::YMin, HeadKind::XMax, HeadKind::YMax];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Template => "template",
            HeadKind::Category => "category",
            HeadKind::XMin => "x_min",
            HeadKind::YMin => "y_min",
            HeadKind::XMax => "x_max",
            HeadKind::YMax => "y_max",
        }
    }
}

/// Shape of a policy: observation width, template count and bins per box edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub obs_dim: usize,
    pub templates: usize,
    pub bins: usize,
}

impl PolicyDims {
    pub fn new(obs_dim: usize, templates: usize, bins: usize) -> Result<Self, PolicyError> {
        if obs_dim == 0 || templates < 2 || bins < 2 {
            return Err(PolicyError::InvalidDims(format!(
                "obs_dim={obs_dim} templates={templates} bins={bins} (need obs_dim>=1, templates>=2, bins>=2)"
            )));
        }
        Ok(PolicyDims { obs_dim, templates, bins })
    }

    pub fn head_size(&self, head: HeadKind) -> usize {
        match head {
            HeadKind::Template => self.templates,
            HeadKind::Category => Category::COUNT,
            _ => self.bins,
        }
    }

    /// Number of distinct responses.
    pub fn response_count(&self) -> usize {
        HeadKind::ALL.iter().map(|&h| self.head_size(h)).product()
    }
}

/// Feature vector the policy conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T>(Vec<T>);

impl<T: Scalar> Observation<T> {
    pub fn new(features: Vec<T>) -> Result<Self, PolicyError> {
        if features.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::NonFiniteObservation);
        }
        Ok(Observation(features))
    }

    pub fn features(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// One sampled response: a token per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResponseTokens {
    pub template_id: usize,
    pub category_id: usize,
    pub box_bins: [usize; 4],
}

impl ResponseTokens {
    pub fn token(&self, head: HeadKind) -> usize {
        match head {
            HeadKind::Template => self.template_id,
            HeadKind::Category => self.category_id,
            HeadKind::XMin => self.box_bins[0],
            HeadKind::YMin => self.box_bins[1],
            HeadKind::XMax => self.box_bins[2],
            HeadKind::YMax => self.box_bins[3],
        }
    }

    fn from_tokens(t: [usize; 6]) -> Self {
        ResponseTokens { template_id: t[0], category_id: t[1], box_bins: [t[2], t[3], t[4], t[5]] }
    }

    pub fn check(&self, dims: &PolicyDims) -> Result<(), PolicyError> {
        for head in HeadKind::ALL {
            let (token, size) = (self.token(head), dims.head_size(head));
            if token >= size {
                return Err(PolicyError::TokenOutOfRange { head, token, size });
            }
        }
        Ok(())
    }

    /// Enumerates every response of the given shape, template head first.
    pub fn enumerate(dims: &PolicyDims) -> impl Iterator<Item = ResponseTokens> + '_ {
        (0..dims.response_count()).map(move |mut i| {
            let mut t = [0usize; 6];
            for (slot, head) in t.iter_mut().zip(HeadKind::ALL).rev() {
                let size = dims.head_size(head);
                *slot = i % size;
                i /= size;
            }
            ResponseTokens::from_tokens(t)
        })
    }
}

/// One linear head: `logits = weights · obs + bias`, weights row-major
/// `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub(crate) outputs: usize,
    pub(crate) inputs: usize,
    pub(crate) weights: Vec<T>,
    pub(crate) bias: Vec<T>,
}

impl<T: Scalar> Head<T> {
    fn zeros(outputs: usize, inputs: usize) -> Self {
        Head { outputs, inputs, weights: vec![T::zero(); outputs * inputs], bias: vec![T::zero(); outputs] }
    }

    pub fn logits(&self, obs: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(obs).fold(b, |acc, (&w, &x)| acc + w * x))
            .collect()
    }

    /// Adds `dlogits ⊗ obs` to the weights and `dlogits` to the bias.
    fn accumulate(&mut self, dlogits: &[T], obs: &[T]) {
        for ((row, bias), &g) in self.weights.chunks_exact_mut(self.inputs).zip(&mut self.bias).zip(dlogits) {
            if g == T::zero() {
                continue;
            }
            *bias += g;
            for (w, &x) in row.iter_mut().zip(obs) {
                *w += g * x;
            }
        }
    }
}

/// Parameters of all six heads; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub(crate) heads: Vec<Head<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(dims: &PolicyDims) -> Self {
        Params { heads: HeadKind::ALL.iter().map(|&h| Head::zeros(dims.head_size(h), dims.obs_dim)).collect() }
    }

    pub fn head(&self, head: HeadKind) -> &Head<T> {
        &self.heads[head as usize]
    }

    pub fn len(&self) -> usize {
        self.heads.iter().map(|h| h.weights.len() + h.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view: each head's weights then its bias, heads in [`HeadKind::ALL`] order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.heads.iter().flat_map(|h| h.weights.iter().chain(&h.bias))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.heads.iter_mut().flat_map(|h| h.weights.iter_mut().chain(h.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &Params<T>) -> bool {
        self.heads.len() == other.heads.len()
            && self.heads.iter().zip(&other.heads).all(|(a, b)| a.outputs == b.outputs && a.inputs == b.inputs)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Params<T>) {
        for (a, &b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in self.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn max_abs(&self) -> T {
        self.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

/// Policy parameters plus the dimensions and seed they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    dims: PolicyDims,
    seed: u64,
    init_scale: f64,
    params: Params<T>,
}

/// Per-head log-probabilities for one observation.
pub type HeadLogProbs<T> = [Vec<T>; 6];

pub fn init_policy<T: Scalar>(
    seed: u64,
    obs_dim: usize,
    templates: usize,
    bins: usize,
    scale: f64,
) -> Result<Policy<T>, PolicyError> {
    let dims = PolicyDims::new(obs_dim, templates, bins)?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(PolicyError::InvalidDims(format!("init scale {scale} must be finite and >= 0")));
    }
    let mut params = Params::zeros(&dims);
    if scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in params.iter_mut() {
            *p = T::of(rng.random_range(-scale..=scale));
        }
    }
    Ok(Policy { dims, seed, init_scale: scale, params })
}

impl<T: Scalar> Policy<T> {
    pub(crate) fn from_parts(dims: PolicyDims, seed: u64, init_scale: f64, params: Params<T>) -> Self {
        Policy { dims, seed, init_scale, params }
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn init_scale(&self) -> f64 {
        self.init_scale
    }
    pub fn params(&self) -> &Params<T> {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    fn check_obs(&self, obs: &Observation<T>) -> Result<(), PolicyError> {
        if obs.dim() != self.dims.obs_dim {
            return Err(PolicyError::DimensionMismatch { expected: self.dims.obs_dim, got: obs.dim() });
        }
        Ok(())
    }

    pub fn head_logits(&self, obs: &Observation<T>) -> Result<[Vec<T>; 6], PolicyError> {
        self.check_obs(obs)?;
        Ok(std::array::from_fn(|i| self.params.heads[i].logits(obs.features())))
    }

    pub fn head_log_probs(&self, obs: &Observation<T>) -> Result<HeadLogProbs<T>, PolicyError> {
        Ok(self.head_logits(obs)?.map(|z| log_softmax(&z)))
    }

    /// Argmax of each head; ties go to the lowest index.
    pub fn greedy(&self, obs: &Observation<T>) -> Result<ResponseTokens, PolicyError> {
        let logits = self.head_logits(obs)?;
        let t = logits.map(|z| {
            z.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        });
        Ok(ResponseTokens::from_tokens(t))
    }

    /// Adds `coeff * ∇ log π(tokens | obs)` into `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        obs: &Observation<T>,
        tokens: &ResponseTokens,
        coeff: T,
        grad: &mut Params<T>,
    ) -> Result<(), PolicyError> {
        tokens.check(&self.dims)?;
        let log_probs = self.head_log_probs(obs)?;
        for (i, head) in HeadKind::ALL.into_iter().enumerate() {
            let token = tokens.token(head);
            let dlogits: Vec<T> = log_probs[i]
                .iter()
                .enumerate()
                .map(|(k, &lp)| {
                    let indicator = if k == token { T::one() } else { T::zero() };
                    coeff * (indicator - lp.exp())
                })
                .collect();
            grad.heads[i].accumulate(&dlogits, obs.features());
        }
        Ok(())
    }

    /// Adds `coeff * ∂/∂θ` of a function of the per-head logits, given the
    /// gradients with respect to those logits.
    pub(crate) fn accumulate_logit_grad(
        &self,
        obs: &Observation<T>,
        dlogits: &[Vec<T>; 6],
        coeff: T,
        grad: &mut Params<T>,
    ) {
        for (i, d) in dlogits.iter().enumerate() {
            let scaled: Vec<T> = d.iter().map(|&g| coeff * g).collect();
            grad.heads[i].accumulate(&scaled, obs.features());
        }
    }
}

/// Frozen snapshot of a policy used as the KL anchor or as the sampling
/// policy of a step. There is no mutable access to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy<T>(Policy<T>);

impl<T> ReferencePolicy<T> {
    pub fn policy(&self) -> &Policy<T> {
        &self.0
    }
}

impl<T> std::ops::Deref for ReferencePolicy<T> {
    type Target = Policy<T>;

    fn deref(&self) -> &Policy<T> {
        &self.0
    }
}

pub fn snapshot_reference<T: Scalar>(policy: &Policy<T>) -> ReferencePolicy<T> {
    ReferencePolicy(policy.clone())
}

fn sample_index<T: Scalar, R: Rng + ?Sized>(log_probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.as_f64().exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    log_probs.iter().rposition(|lp| lp.as_f64() > f64::NEG_INFINITY).unwrap_or(log_probs.len() - 1)
}

/// Draws one token per head and returns the tokens with their log-probability.
pub fn sample_response<T: Scalar, R: Rng + ?Sized>(
    policy: &Policy<T>,
    obs: &Observation<T>,
    rng: &mut R,
) -> Result<(ResponseTokens, T), PolicyError> {
    let log_probs = policy.head_log_probs(obs)?;
    let t = std::array::from_fn(|i| sample_index(&log_probs[i], rng));
    let logprob = t.iter().zip(&log_probs).map(|(&k, lp)| lp[k]).sum();
    Ok((ResponseTokens::from_tokens(t), logprob))
}

pub fn response_logprob<T: Scalar>(
    policy: &Policy<T>,
    obs: &Observation<T>,
    tokens: &ResponseTokens,
) -> Result<T, PolicyError> {
    tokens.check(policy.dims())?;
    let log_probs = policy.head_log_probs(obs)?;
    Ok(HeadKind::ALL.iter().zip(&log_probs).map(|(&h, lp)| lp[tokens.token(h)]).sum())
}

/// Maps box-bin tokens onto a pixel canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDecoder {
    pub bins: usize,
    pub canvas_width: f64,
    pub canvas_height: f64,
}

impl BoxDecoder {
    pub fn new(bins: usize, canvas_width: f64, canvas_height: f64) -> Self {
        BoxDecoder { bins, canvas_width, canvas_height }
    }

    fn bin_width(&self, extent: f64) -> f64 {
        extent / self.bins as f64
    }

    pub fn bin_center(&self, bin: usize, extent: f64) -> f64 {
        (bin as f64 + 0.5) * self.bin_width(extent)
    }

    /// Index of the bin center nearest to `coord`.
    pub fn quantize(&self, coord: f64, extent: f64) -> usize {
        let b = (coord / self.bin_width(extent)).floor();
        if b <= 0.0 {
            0
        } else {
            (b as usize).min(self.bins - 1)
        }
    }

    fn decode_axis(&self, a: usize, b: usize, extent: f64) -> (f64, f64) {
        let (lo, hi) = (a.min(b), a.max(b));
        if lo == hi {
            let w = self.bin_width(extent);
            (lo as f64 * w, (lo + 1) as f64 * w)
        } else {
            (self.bin_center(lo, extent), self.bin_center(hi, extent))
        }
    }

    /// Decodes `[x_min, y_min, x_max, y_max]` bins into a valid box.
    ///
    /// Each edge sits at its bin center; an inverted pair is reordered, and
    /// a pair landing in the same bin expands to that bin's full extent.
    pub fn decode<T: Scalar>(&self, bins: [usize; 4]) -> BBox<T> {
        let (x0, x1) = self.decode_axis(bins[0], bins[2], self.canvas_width);
        let (y0, y1) = self.decode_axis(bins[1], bins[3], self.canvas_height);
        BBox::new(T::of(x0), T::of(y0), T::of(x1), T::of(y1)).expect("decoded bins form a valid box")
    }

    pub fn encode<T: Scalar>(&self, b: &BBox<T>) -> [usize; 4] {
        [
            self.quantize(b.x_min().as_f64(), self.canvas_width),
            self.quantize(b.y_min().as_f64(), self.canvas_height),
            self.quantize(b.x_max().as_f64(), self.canvas_width),
            self.quantize(b.y_max().as_f64(), self.canvas_height),
        ]
    }
}

/// The verdict a well-formed response encodes.
pub fn decode_response<T: Scalar>(tokens: &ResponseTokens, decoder: &BoxDecoder) -> StructuredOutput<T> {
    let category = Category::from_index(tokens.category_id).unwrap_or(Category::AllConsistent);
    let boxes = if category.image_manipulated() { vec![decoder.decode(tokens.box_bins)] } else { Vec::new() };
    StructuredOutput::new(Some(category_explanation(category).to_string()), category, boxes)
        .expect("canned explanations contain no closing tag")
}

/// Canned reasoning text for each category.
pub fn category_explanation(category: Category) -> &'static str {
    match category {
        Category::AllConsistent => "the image is original and both subtitles describe it faithfully",
        Category::ImageManipulated => "the image is manipulated and at least one subtitle does not match it",
        Category::BothMisaligned => "the image is original but both subtitles are manipulated",
        Category::ChineseMisaligned => {
            "the image is original, the english subtitle matches it and the chinese subtitle is manipulated"
        }
        Category::EnglishMisaligned => {
            "the image is original, the chinese subtitle matches it and the english subtitle is manipulated"
        }
        Category::AllInconsistent => "the image is manipulated and both subtitles are manipulated",
    }
}

/// Renders tokens as text. Template 0 is the well-formed renderer; every
/// other template yields a malformed string that fails the format check.
pub fn render_response(tokens: &ResponseTokens, decoder: &BoxDecoder) -> String {
    let valid = render_output(&decode_response::<f64>(tokens, decoder));
    match tokens.template_id {
        0 => valid,
        t if t % 3 == 1 => valid.trim_end_matches("</answer>").to_string(),
        t if t % 3 == 2 => format!("Answer: {valid}"),
        _ => {
            let label = Category::from_index(tokens.category_id).unwrap_or(Category::AllConsistent).label();
            format!("<answer>{{\"classification\": \"{label}\"}}</answer>")
        }
    }
}

/// Mean negative log-likelihood of `batch` and its gradient.
pub fn nll_and_grad<T: Scalar>(
    policy: &Policy<T>,
    batch: &[(Observation<T>, ResponseTokens)],
) -> Result<(T, Params<T>), PolicyError> {
    let mut grad = Params::zeros(policy.dims());
    if batch.is_empty() {
        return Ok((T::zero(), grad));
    }
    let n = T::of(batch.len() as f64);
    let mut total = T::zero();
    for (obs, tokens) in batch {
        total -= response_logprob(policy, obs, tokens)?;
        policy.accumulate_logprob_grad(obs, tokens, -T::one() / n, &mut grad)?;
    }
    Ok((total / n, grad))
}

pub fn mean_nll<T: Scalar>(policy: &Policy<T>, batch: &[(Observation<T>, ResponseTokens)]) -> Result<T, PolicyError> {
    Ok(nll_and_grad(policy, batch)?.0)
}

/// One gradient-descent step on the mean NLL of `batch`; returns the updated
/// policy and the NLL before the step.
pub fn sft_update<T: Scalar>(
    policy: &Policy<T>,
    batch: &[(Observation<T>, ResponseTokens)],
    lr: T,
) -> Result<(Policy<T>, T), PolicyError> {
    if lr < T::zero() {
        return Err(PolicyError::NegativeLearningRate);
    }
    let (nll, grad) = nll_and_grad(policy, batch)?;
    let mut next = policy.clone();
    next.params.axpy(-lr, &grad);
    Ok((next, nll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::check_format;

    fn obs(v: &[f64]) -> Observation<f64> {
        Observation::new(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_policy_logprob() {
        let p: Policy<f64> = init_policy(3, 4, 2, 8, 0.0).unwrap();
        let o = obs(&[0.3, -1.0, 2.0, 0.1]);
        let expected = -(2f64.ln() + 6f64.ln() + 4.0 * 8f64.ln());
        let tokens = ResponseTokens { template_id: 1, category_id: 5, box_bins: [0, 7, 3, 2] };
        assert!((response_logprob(&p, &o, &tokens).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a: Policy<f64> = init_policy(7, 10, 2, 16, 0.5).unwrap();
        let b: Policy<f64> = init_policy(7, 10, 2, 16, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a.params().iter().all(|x| x.abs() <= 0.5));
        let c: Policy<f64> = init_policy(8, 10, 2, 16, 0.5).unwrap();
        assert_ne!(a, c);
        assert!(init_policy::<f64>(1, 10, 1, 16, 0.1).is_err());
        assert!(init_policy::<f64>(1, 10, 2, 1, 0.1).is_err());
        assert!(init_policy::<f64>(1, 10, 2, 4, -1.0).is_err());
    }

    #[test]
    fn sampled_tokens_in_range() {
        let p: Policy<f64> = init_policy(1, 10, 2, 8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..10_000 {
            let o = obs(&(0..10).map(|j| ((i * 7 + j) % 13) as f64 / 6.0 - 1.0).collect::<Vec<_>>());
            let (t, lp) = sample_response(&p, &o, &mut rng).unwrap();
            t.check(p.dims()).unwrap();
            assert_eq!(lp, response_logprob(&p, &o, &t).unwrap());
        }
    }

    #[test]
    fn probabilities_normalize_over_all_responses() {
        let p: Policy<f64> = init_policy(11, 3, 2, 2, 1.5).unwrap();
        let o = obs(&[0.2, -0.7, 1.1]);
        assert_eq!(p.dims().response_count(), 192);
        let total: f64 = ResponseTokens::enumerate(p.dims()).map(|t| response_logprob(&p, &o, &t).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for lp in p.head_log_probs(&o).unwrap() {
            let s: f64 = lp.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_invariant_to_bias_shift() {
        let p: Policy<f64> = init_policy(2, 3, 3, 4, 1.0).unwrap();
        let mut q = p.clone();
        for b in q.params_mut().heads[2].bias.iter_mut() {
            *b += 17.0;
        }
        let o = obs(&[1.0, 2.0, -0.5]);
        for t in ResponseTokens::enumerate(p.dims()).step_by(97) {
            let (a, b) = (response_logprob(&p, &o, &t).unwrap(), response_logprob(&q, &o, &t).unwrap());
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logits_are_deterministic() {
        let mut p: Policy<f64> = init_policy(0, 1, 2, 4, 0.0).unwrap();
        for (h, head) in p.params_mut().heads.iter_mut().enumerate() {
            for (k, b) in head.bias.iter_mut().enumerate() {
                *b = if k == h % head.outputs { 50.0 } else { -50.0 };
            }
        }
        let o = obs(&[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (t, _) = sample_response(&p, &o, &mut rng).unwrap();
            assert_eq!(t, ResponseTokens { template_id: 0, category_id: 1, box_bins: [2, 3, 0, 1] });
        }
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let p: Policy<f64> = init_policy(0, 2, 2, 4, 0.0).unwrap();
        let bad = ResponseTokens { template_id: 0, category_id: 6, box_bins: [0; 4] };
        assert!(matches!(
            response_logprob(&p, &obs(&[0.0, 0.0]), &bad),
            Err(PolicyError::TokenOutOfRange { head: HeadKind::Category, .. })
        ));
        assert!(matches!(
            response_logprob(&p, &obs(&[0.0]), &ResponseTokens { template_id: 0, category_id: 0, box_bins: [0; 4] }),
            Err(PolicyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rendering_templates() {
        let d = BoxDecoder::new(16, 100.0, 100.0);
        let clean = ResponseTokens { template_id: 0, category_id: 0, box_bins: [3, 4, 9, 12] };
        let text = render_response(&clean, &d);
        assert!(check_format(&text).is_valid);
        assert!(text.contains("\"region\": []"));
        for template in 1..7 {
            let t = ResponseTokens { template_id: template, ..clean };
            assert!(!check_format(&render_response(&t, &d)).is_valid, "template {template}");
        }
        let spanning = ResponseTokens { template_id: 0, category_id: 1, box_bins: [0, 0, 15, 15] };
        let out = decode_response::<f64>(&spanning, &d);
        assert_eq!(out.boxes()[0].to_array(), [3.125, 3.125, 96.875, 96.875]);
        assert!(check_format(&render_response(&spanning, &d)).is_valid);
    }

    #[test]
    fn degenerate_and_inverted_bins_decode_to_valid_boxes() {
        let d = BoxDecoder::new(16, 100.0, 100.0);
        let b: BBox<f64> = d.decode([5, 5, 5, 2]);
        assert_eq!(b.to_array(), [31.25, 15.625, 37.5, 34.375]);
        assert_eq!(d.encode(&BBox::new(0.0, 6.25, 99.9, 100.0).unwrap()), [0, 1, 15, 15]);
    }

    #[test]
    fn sft_zero_lr_keeps_params() {
        let p: Policy<f64> = init_policy(4, 3, 2, 4, 0.3).unwrap();
        let batch =
            vec![(obs(&[1.0, 0.0, 0.5]), ResponseTokens { template_id: 0, category_id: 2, box_bins: [1, 2, 3, 0] })];
        let (q, nll) = sft_update(&p, &batch, 0.0).unwrap();
        assert_eq!(p, q);
        assert!(nll > 0.0);
        assert!(sft_update(&p, &batch, -1.0).is_err());
    }

    #[test]
    fn snapshot_is_independent() {
        let mut p: Policy<f64> = init_policy(4, 3, 2, 4, 0.3).unwrap();
        let r = snapshot_reference(&p);
        let o = obs(&[1.0, 0.0, 0.5]);
        let t = ResponseTokens { template_id: 1, category_id: 2, box_bins: [1, 2, 3, 0] };
        let before = response_logprob(&r, &o, &t).unwrap();
        p.params_mut().scale(3.0);
        assert_eq!(response_logprob(&r, &o, &t).unwrap(), before);
        assert_ne!(response_logprob(&p, &o, &t).unwrap(), before);
    }
}
