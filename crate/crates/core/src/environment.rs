//! Synthetic task generator and the JSONL benchmark manifest.
//!
//! A generated record picks real or manipulated versions of each modality,
//! draws a tampered-region box when the image is manipulated, and exposes
//! the record to the policy only through a noisy feature vector:
//! a one-hot category block followed by the normalized box corners, each
//! entry perturbed by Gaussian noise.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BBox, Category, DomainError, ModalityState, Sample};
use crate::grpo::Query;
use crate::policy::{category_explanation, BoxDecoder, Observation, ResponseTokens};
use crate::scalar::Scalar;

/// Width of the observation vector: six category indicators plus four box
/// coordinates.
pub const OBS_DIM: usize = Category::COUNT + 4;

/// Separates the observation stream from the label stream of the same seed.
const OBSERVATION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// The seven combinations with at least one manipulated modality, as
/// (image, English, Chinese).
pub const MANIPULATED_COMBINATIONS: [[ModalityState; 3]; 7] = {
    use ModalityState::{Manipulated as M, Original as O};
    [[O, O, M], [O, M, O], [O, M, M], [M, O, O], [M, O, M], [M, M, O], [M, M, M]]
};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub p_clean: f64,
    pub noise_sigma: f64,
    pub canvas_width: f64,
    pub canvas_height: f64,
    /// Side lengths of generated boxes are drawn from `[box_min_extent, box_max_extent]`.
    pub box_min_extent: f64,
    pub box_max_extent: f64,
    pub bins: usize,
    /// Ground-truth boxes per manipulated image. Only the first is observed
    /// and targeted.
    pub boxes_per_sample: usize,
    /// Relative weights of [`MANIPULATED_COMBINATIONS`]; uniform when `None`.
    pub manipulated_weights: Option<[f64; 7]>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 42,
            p_clean: 0.2,
            noise_sigma: 0.1,
            canvas_width: 100.0,
            canvas_height: 100.0,
            box_min_extent: 20.0,
            box_max_extent: 60.0,
            bins: 16,
            boxes_per_sample: 1,
            manipulated_weights: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.p_clean) {
            return bad(format!("p_clean {} outside [0, 1]", self.p_clean));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.canvas_width > 0.0 && self.canvas_height > 0.0) {
            return bad("canvas must have positive size".into());
        }
        let max_side = self.canvas_width.min(self.canvas_height);
        if !(self.box_min_extent > 0.0 && self.box_min_extent <= self.box_max_extent && self.box_max_extent <= max_side)
        {
            return bad(format!(
                "box extents [{}, {}] must satisfy 0 < min <= max <= canvas",
                self.box_min_extent, self.box_max_extent
            ));
        }
        if self.bins < 2 {
            return bad("bins must be >= 2".into());
        }
        if self.boxes_per_sample == 0 {
            return bad("boxes_per_sample must be >= 1".into());
        }
        if let Some(w) = &self.manipulated_weights {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return bad("manipulated_weights must be non-negative with a positive sum".into());
            }
        }
        Ok(())
    }

    pub fn decoder(&self) -> BoxDecoder {
        BoxDecoder::new(self.bins, self.canvas_width, self.canvas_height)
    }
}

/// A record with the policy's view of it and the ideal response.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample<T> {
    pub sample: Sample<T>,
    pub observation: Observation<T>,
    pub target: ResponseTokens,
}

impl<T: Scalar> ToySample<T> {
    pub fn query(&self) -> Query<'_, T> {
        Query { obs: &self.observation, gt: &self.sample }
    }
}

/// Picks modality states: all-original with probability `p_clean`, otherwise
/// one of the seven manipulated combinations uniformly.
pub fn assign_labels<R: Rng + ?Sized>(rng: &mut R, p_clean: f64) -> [ModalityState; 3] {
    assign_labels_weighted(rng, p_clean, None)
}

pub fn assign_labels_weighted<R: Rng + ?Sized>(
    rng: &mut R,
    p_clean: f64,
    weights: Option<&[f64; 7]>,
) -> [ModalityState; 3] {
    if rng.random::<f64>() < p_clean {
        return [ModalityState::Original; 3];
    }
    let index = match weights {
        None => rng.random_range(0..MANIPULATED_COMBINATIONS.len()),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            w.iter()
                .position(|&wi| {
                    u -= wi;
                    u < 0.0
                })
                .unwrap_or_else(|| w.iter().rposition(|&wi| wi > 0.0).unwrap_or(6))
        }
    };
    MANIPULATED_COMBINATIONS[index]
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn draw_box<T: Scalar, R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig) -> BBox<T> {
    let mut side = |extent: f64| {
        let len = rng.random_range(config.box_min_extent..=config.box_max_extent);
        let start = rng.random_range(0.0..=(extent - len));
        let lo = round3(start);
        let hi = round3(start + len).min(extent);
        (lo, hi)
    };
    let (x0, x1) = side(config.canvas_width);
    let (y0, y1) = side(config.canvas_height);
    BBox::new(T::of(x0), T::of(y0), T::of(x1), T::of(y1)).expect("generated box is valid")
}

fn subtitle(lang: &str, state: ModalityState, id: &str) -> String {
    match lang {
        "en" => format!("[{}] English subtitle for {id}", state.as_str()),
        _ => format!("[{}] 中文字幕 {id}", state.as_str()),
    }
}

/// Draws the ground-truth record for one id.
pub fn generate_record<T: Scalar, R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig, id: &str) -> Sample<T> {
    let states = assign_labels_weighted(rng, config.p_clean, config.manipulated_weights.as_ref());
    let boxes = if states[0].is_manipulated() {
        (0..config.boxes_per_sample).map(|_| draw_box(rng, config)).collect()
    } else {
        Vec::new()
    };
    let category = crate::domain::derive_category(states[0], states[1], states[2]);
    Sample::new(
        id,
        states,
        boxes,
        subtitle("en", states[1], id),
        subtitle("zh", states[2], id),
        Some(category_explanation(category).to_string()),
    )
    .expect("generated record satisfies its invariants")
}

/// Noisy feature vector for a record.
pub fn observe<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    sample: &Sample<T>,
    config: &GeneratorConfig,
) -> Observation<T> {
    let mut clean = vec![0.0; OBS_DIM];
    clean[sample.category().index()] = 1.0;
    if let Some(b) = sample.gt_boxes().first() {
        let [x0, y0, x1, y1] = b.to_array().map(Scalar::as_f64);
        clean[6] = x0 / config.canvas_width;
        clean[7] = y0 / config.canvas_height;
        clean[8] = x1 / config.canvas_width;
        clean[9] = y1 / config.canvas_height;
    }
    let features = if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("sigma validated");
        clean.into_iter().map(|x| T::of(x + normal.sample(rng))).collect()
    } else {
        clean.into_iter().map(T::of).collect()
    };
    Observation::new(features).expect("features are finite")
}

/// The ideal response: well-formed template, true category, and the first
/// ground-truth box quantized to bins (all zeros when there is no box).
pub fn target_tokens<T: Scalar>(sample: &Sample<T>, decoder: &BoxDecoder) -> ResponseTokens {
    ResponseTokens {
        template_id: 0,
        category_id: sample.category().index(),
        box_bins: sample.gt_boxes().first().map_or([0; 4], |b| decoder.encode(b)),
    }
}

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Observation and target for the `index`-th record of a data set. The
/// observation noise depends only on `(config.seed, index)`, so a manifest
/// reloaded from disk yields the same toy samples it was generated with.
pub fn toy_from_sample<T: Scalar>(sample: Sample<T>, config: &GeneratorConfig, index: usize) -> ToySample<T> {
    let mut rng = stream(config.seed ^ OBSERVATION_SALT, index);
    let observation = observe(&mut rng, &sample, config);
    let target = target_tokens(&sample, &config.decoder());
    ToySample { sample, observation, target }
}

pub fn toys_from_samples<T: Scalar>(samples: Vec<Sample<T>>, config: &GeneratorConfig) -> Vec<ToySample<T>> {
    samples.into_iter().enumerate().map(|(i, s)| toy_from_sample(s, config, i)).collect()
}

/// Record id used for the `index`-th generated sample.
pub fn sample_id(index: usize) -> String {
    format!("toy-{index:06}")
}

/// Generates one toy sample from an explicit generator.
pub fn generate_sample<T: Scalar, R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig, id: &str) -> ToySample<T> {
    let sample = generate_record(rng, config, id);
    let observation = observe(rng, &sample, config);
    let target = target_tokens(&sample, &config.decoder());
    ToySample { sample, observation, target }
}

/// Generates `n` toy samples; record `i` uses its own substream of
/// `config.seed`, so any prefix of a larger data set is identical.
pub fn generate_dataset<T: Scalar>(config: &GeneratorConfig, n: usize) -> Result<Vec<ToySample<T>>, GeneratorError> {
    config.validate()?;
    Ok((0..n)
        .map(|i| {
            let sample = generate_record(&mut stream(config.seed, i), config, &sample_id(i));
            toy_from_sample(sample, config, i)
        })
        .collect())
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest I/O: {0}")]
    Io(#[from] io::Error),
    #[error("manifest line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("manifest line {line}: {source}")]
    Invariant { line: usize, source: DomainError },
}

impl ManifestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ManifestError::Io(_) => None,
            ManifestError::Malformed { line, .. } | ManifestError::Invariant { line, .. } => Some(*line),
        }
    }
}

/// On-disk record layout; field order here is the serialized order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    image_state: ModalityState,
    en_state: ModalityState,
    zh_state: ModalityState,
    category: Category,
    gt_boxes: Vec<[f64; 4]>,
    en_text: String,
    zh_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    explanation_ref: Option<String>,
}

impl ManifestRecord {
    fn from_sample<T: Scalar>(s: &Sample<T>) -> Self {
        ManifestRecord {
            id: s.id().to_string(),
            image_state: s.image_state(),
            en_state: s.en_state(),
            zh_state: s.zh_state(),
            category: s.category(),
            gt_boxes: s.gt_boxes().iter().map(|b| b.to_array().map(Scalar::as_f64)).collect(),
            en_text: s.en_text().to_string(),
            zh_text: s.zh_text().to_string(),
            explanation_ref: s.explanation_ref().map(str::to_string),
        }
    }

    fn into_sample<T: Scalar>(self) -> Result<Sample<T>, DomainError> {
        let boxes = self.gt_boxes.iter().map(|b| BBox::from_array(b.map(T::of))).collect::<Result<Vec<_>, _>>()?;
        Sample::with_category(
            self.id,
            [self.image_state, self.en_state, self.zh_state],
            self.category,
            boxes,
            self.en_text,
            self.zh_text,
            self.explanation_ref,
        )
    }
}

/// Serializes one record as a single JSON line (without the newline).
pub fn manifest_line<T: Scalar>(sample: &Sample<T>) -> String {
    serde_json::to_string(&ManifestRecord::from_sample(sample)).expect("manifest records serialize")
}

pub fn parse_manifest_line<T: Scalar>(text: &str, line: usize) -> Result<Sample<T>, ManifestError> {
    let record: ManifestRecord =
        serde_json::from_str(text).map_err(|e| ManifestError::Malformed { line, msg: e.to_string() })?;
    record.into_sample().map_err(|source| ManifestError::Invariant { line, source })
}

pub fn write_manifest<T: Scalar>(samples: &[Sample<T>], path: &Path) -> Result<(), ManifestError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        writeln!(out, "{}", manifest_line(s))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and validates every record. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn load_manifest<T: Scalar>(path: &Path) -> Result<Vec<Sample<T>>, ManifestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_manifest_line(&line, i + 1)?);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::derive_category;
    use crate::reward::region_iou;

    #[test]
    fn extreme_clean_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            assert_eq!(assign_labels(&mut rng, 1.0), [ModalityState::Original; 3]);
            assert_ne!(assign_labels(&mut rng, 0.0), [ModalityState::Original; 3]);
        }
    }

    #[test]
    fn weights_select_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = [0.0; 7];
        w[4] = 1.0;
        for _ in 0..1000 {
            assert_eq!(assign_labels_weighted(&mut rng, 0.0, Some(&w)), MANIPULATED_COMBINATIONS[4]);
        }
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let config = GeneratorConfig { noise_sigma: 0.0, ..Default::default() };
        for t in generate_dataset::<f64>(&config, 200).unwrap() {
            let f = t.observation.features();
            for (k, &v) in f[..6].iter().enumerate() {
                assert_eq!(v, if k == t.sample.category().index() { 1.0 } else { 0.0 });
            }
            match t.sample.gt_boxes().first() {
                Some(b) => assert_eq!(f[6], b.x_min() / 100.0),
                None => assert!(f[6..].iter().all(|&x| x == 0.0)),
            }
        }
    }

    #[test]
    fn generated_samples_are_consistent() {
        let config = GeneratorConfig { boxes_per_sample: 2, ..Default::default() };
        for t in generate_dataset::<f64>(&config, 500).unwrap() {
            let s = &t.sample;
            assert_eq!(s.category(), derive_category(s.image_state(), s.en_state(), s.zh_state()));
            assert_eq!(s.gt_boxes().is_empty(), !s.image_state().is_manipulated());
            assert_eq!(s.gt_boxes().len(), if s.image_state().is_manipulated() { 2 } else { 0 });
            assert_eq!(t.target.category_id, s.category().index());
            for b in s.gt_boxes() {
                assert!(b.x_max() <= 100.0 && b.y_max() <= 100.0);
                let (w, h) = (b.x_max() - b.x_min(), b.y_max() - b.y_min());
                assert!((19.99..=60.01).contains(&w) && (19.99..=60.01).contains(&h), "{w} {h}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let config = GeneratorConfig::default();
        let a = generate_dataset::<f64>(&config, 50).unwrap();
        let b = generate_dataset::<f64>(&config, 80).unwrap();
        assert_eq!(a[..], b[..50]);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(generate_sample::<f64, _>(&mut r1, &config, "a"), generate_sample::<f64, _>(&mut r2, &config, "a"));
    }

    #[test]
    fn target_box_quantization_keeps_high_iou() {
        let config = GeneratorConfig { p_clean: 0.0, ..Default::default() };
        let decoder = config.decoder();
        let data = generate_dataset::<f64>(&config, 10_000).unwrap();
        let ious: Vec<f64> = data
            .iter()
            .filter(|t| t.sample.image_state().is_manipulated())
            .map(|t| region_iou(&[decoder.decode(t.target.box_bins)], &t.sample.gt_boxes()[..1]))
            .collect();
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!(mean >= 0.8, "mean quantized IoU {mean}");
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        assert!(GeneratorConfig { p_clean: 1.5, ..Default::default() }.validate().is_err());
        assert!(GeneratorConfig { noise_sigma: -0.1, ..Default::default() }.validate().is_err());
        assert!(GeneratorConfig { box_max_extent: 150.0, ..Default::default() }.validate().is_err());
        assert!(GeneratorConfig { bins: 1, ..Default::default() }.validate().is_err());
    }
}
