//! Reproducible runs over the toy misinformation-detection task.
//!
//! Each `cmd_*` function is one subcommand of the `misinfo-lab` binary. They
//! take a validated [`RunConfig`] and return what they wrote, so tests can
//! drive them without spawning processes.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use misinfo_core::context::{
    assemble_prompt, build_query, corrupt_chars, retrieve, FixtureRetriever, RetrievedContext, RetrieverClient,
    TimeoutRetriever,
};
use misinfo_core::environment::{
    generate_dataset, load_manifest, manifest_line, toys_from_samples, ManifestError, ToySample, OBS_DIM,
};
use misinfo_core::grpo::{GrpoError, GrpoTrainer};
use misinfo_core::metrics::{EvalItem, EvalReport, TokenF1};
use misinfo_core::policy::{
    decode_response, init_policy, load_checkpoint, mean_nll, render_response, sample_response, sft_update,
    write_checkpoint, CheckpointError, Policy, PolicyError,
};
use misinfo_core::{parse_output, reward_total, StructuredOutput};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{Decoding, RetrieverKind, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 1 for validation or parse failures, 2 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| CliError::Validation(format!("missing {what} path")))
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_toys(config: &RunConfig) -> Result<Vec<ToySample<f64>>, CliError> {
    let samples = load_manifest::<f64>(required(&config.manifest, "manifest")?)?;
    Ok(toys_from_samples(samples, &config.generator))
}

fn fresh_policy(config: &RunConfig) -> Result<Policy<f64>, CliError> {
    Ok(init_policy(config.generator.seed, OBS_DIM, config.templates, config.generator.bins, config.init_scale)?)
}

fn starting_policy(config: &RunConfig) -> Result<Policy<f64>, CliError> {
    match &config.checkpoint {
        Some(path) => {
            let policy = load_checkpoint::<f64>(path)?;
            let dims = policy.dims();
            if dims.obs_dim != OBS_DIM || dims.bins != config.generator.bins {
                return Err(CliError::Validation(format!(
                    "checkpoint dims (obs_dim {}, bins {}) do not match the task (obs_dim {OBS_DIM}, bins {})",
                    dims.obs_dim, dims.bins, config.generator.bins
                )));
            }
            Ok(policy)
        }
        None => fresh_policy(config),
    }
}

/// Writes `n_samples` generated samples as a manifest to `out`; returns the
/// manifest text.
pub fn cmd_gen_data(config: &RunConfig) -> Result<String, CliError> {
    config.validate()?;
    let out = required(&config.out, "out")?;
    let toys = generate_dataset::<f64>(&config.generator, config.n_samples)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut text = String::new();
    for t in &toys {
        text.push_str(&manifest_line(&t.sample));
        text.push('\n');
    }
    write_file(out, &text)?;
    Ok(text)
}

/// Output of [`cmd_sft`]: the checkpoint path and the per-epoch training NLL,
/// starting with the NLL before the first epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub checkpoint: PathBuf,
    pub nll_curve: Vec<f64>,
}

/// Supervised fine-tuning on the manifest targets. Writes the checkpoint to
/// `out` and the NLL curve to `out.nll` (or `log` if set).
pub fn cmd_sft(config: &RunConfig) -> Result<SftOutcome, CliError> {
    config.validate()?;
    let out = required(&config.out, "out")?.to_path_buf();
    let toys = load_toys(config)?;
    let data: Vec<_> = toys.iter().map(|t| (t.observation.clone(), t.target)).collect();
    let mut policy = starting_policy(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.generator.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = vec![mean_nll(&policy, &data)?];
    for _ in 0..config.sft_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.sft_batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            policy = sft_update(&policy, &batch, config.sft_lr)?.0;
        }
        curve.push(mean_nll(&policy, &data)?);
    }
    let mut log = String::new();
    for (epoch, nll) in curve.iter().enumerate() {
        let _ = writeln!(log, "epoch={epoch} mean_nll={nll:.9}");
    }
    write_file(&out, &write_checkpoint(&policy))?;
    write_file(&config.log.clone().unwrap_or_else(|| sibling(&out, ".nll")), &log)?;
    Ok(SftOutcome { checkpoint: out, nll_curve: curve })
}

/// GRPO training from `checkpoint` (or a fresh policy). Writes the checkpoint
/// to `out` and one stats line per step to `out.log` (or `log` if set).
/// Returns the stats log.
pub fn cmd_train_grpo(config: &RunConfig) -> Result<String, CliError> {
    config.validate()?;
    let out = required(&config.out, "out")?.to_path_buf();
    let toys = load_toys(config)?;
    let policy = starting_policy(config)?;
    let mut log = String::new();
    let trained = if config.grpo_steps == 0 || toys.is_empty() {
        policy
    } else {
        let queries = toys.iter().map(|t| t.query()).collect();
        let mut trainer = GrpoTrainer::new(
            policy,
            config.grpo,
            config.generator.decoder(),
            queries,
            config.batch_size,
            config.generator.seed,
        )?;
        for _ in 0..config.grpo_steps {
            log.push_str(&trainer.step()?.log_line());
            log.push('\n');
        }
        trainer.into_policy()
    };
    write_file(&out, &write_checkpoint(&trained))?;
    write_file(&config.log.clone().unwrap_or_else(|| sibling(&out, ".log")), &log)?;
    Ok(log)
}

/// Per-sample OCR corruption draws use streams with the top bit set, apart
/// from the decoding streams.
const OCR_STREAMS: u64 = 1 << 63;

/// Everything [`cmd_eval`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// JSON lines `{"id": .., "output": ..}` in manifest order.
    pub predictions: String,
    /// JSON lines `{"id": .., "prompt": .., "degraded": ..}` in manifest order.
    pub prompts: String,
    pub degraded: usize,
}

fn retriever_client(config: &RunConfig) -> Result<Option<Arc<dyn RetrieverClient>>, CliError> {
    Ok(match config.retriever {
        RetrieverKind::None => None,
        RetrieverKind::Timeout => Some(Arc::new(TimeoutRetriever)),
        RetrieverKind::Fixture => {
            let path = required(&config.fixtures, "fixtures")?;
            let fixture = FixtureRetriever::load(path).map_err(|e| match e {
                misinfo_core::context::FixtureError::Io(_) => CliError::Io(format!("{}: {e}", path.display())),
                _ => CliError::Validation(e.to_string()),
            })?;
            Some(Arc::new(fixture))
        }
    })
}

/// Evaluates `checkpoint` on `manifest`, greedy by default.
///
/// Metrics score the decoded category and boxes; rewards score the rendered
/// text, so format failures show up in `format_rate` and `mean_reward`.
///
/// Each sample's prompt is assembled from retrieved passages (when a
/// retriever is configured) and the subtitles, with `ocr_noise` applied to
/// the Chinese subtitle only. Predictions depend only on the policy and the
/// observation. When `out` is set, the report is written to `out`, its JSON
/// form to `out.json`, predictions to `out.predictions.jsonl` and prompts to
/// `out.prompts.jsonl`.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalOutcome, CliError> {
    config.validate()?;
    let toys = load_toys(config)?;
    if toys.is_empty() {
        return Err(CliError::Validation("manifest has no samples".into()));
    }
    let policy = load_checkpoint::<f64>(required(&config.checkpoint, "checkpoint")?)?;
    let decoder = config.generator.decoder();
    let client = retriever_client(config)?;
    let mut items = Vec::with_capacity(toys.len());
    let (mut reward_sum, mut format_sum, mut degraded) = (0.0, 0.0, 0usize);
    let (mut predictions, mut prompts) = (String::new(), String::new());
    for (index, toy) in toys.iter().enumerate() {
        let sample = &toy.sample;
        let mut ocr_rng = ChaCha8Rng::seed_from_u64(config.generator.seed);
        ocr_rng.set_stream(OCR_STREAMS | index as u64);
        let zh = if config.ocr_noise > 0.0 {
            corrupt_chars(sample.zh_text(), config.ocr_noise, &mut ocr_rng)
        } else {
            sample.zh_text().to_string()
        };
        let ctx = match (&client, build_query(sample.en_text(), &zh)) {
            (Some(c), Ok(q)) => retrieve(Arc::clone(c), &q, config.deadline_ms),
            _ => RetrievedContext::empty(),
        };
        if client.is_some() && ctx.degraded {
            degraded += 1;
        }
        let was_degraded = ctx.degraded;
        let prompt = assemble_prompt(ctx, sample.id(), sample.en_text(), &zh);

        let tokens = match config.decoding {
            Decoding::Greedy => policy.greedy(&toy.observation)?,
            Decoding::Sample => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.generator.seed);
                rng.set_stream(index as u64);
                sample_response(&policy, &toy.observation, &mut rng)?.0
            }
        };
        let text = render_response(&tokens, &decoder);
        let reward = reward_total(&text, sample);
        reward_sum += reward.total;
        format_sum += reward.format;
        let decoded: StructuredOutput<f64> = decode_response(&tokens, &decoder);
        items.push(EvalItem {
            pred: decoded.category(),
            gt: sample.category(),
            pred_boxes: decoded.boxes().to_vec(),
            gt_boxes: sample.gt_boxes().to_vec(),
            explanation: decoded.think().map(str::to_string),
            explanation_ref: sample.explanation_ref().map(str::to_string),
        });
        let _ = writeln!(predictions, "{}", serde_json::json!({ "id": sample.id(), "output": text }));
        let _ = writeln!(
            prompts,
            "{}",
            serde_json::json!({ "id": sample.id(), "prompt": prompt.flatten(), "degraded": was_degraded })
        );
    }
    let n = toys.len() as f64;
    let mut report = EvalReport::from_items(&items, &TokenF1).map_err(|e| CliError::Validation(e.to_string()))?;
    report.mean_reward = Some(reward_sum / n);
    report.format_rate = Some(format_sum / n);
    if let Some(out) = &config.out {
        write_file(out, &report.to_text())?;
        write_file(&sibling(out, ".json"), &report.to_json())?;
        write_file(&sibling(out, ".predictions.jsonl"), &predictions)?;
        write_file(&sibling(out, ".prompts.jsonl"), &prompts)?;
    }
    Ok(EvalOutcome { report, predictions, prompts, degraded })
}

/// Pretty JSON form of a parsed output.
pub fn pretty_record(out: &StructuredOutput<f64>) -> String {
    let region: Vec<_> = out.boxes().iter().map(|b| serde_json::json!({ "bbox": b.to_array() })).collect();
    let value = serde_json::json!({
        "think": out.think(),
        "classification": out.category().label(),
        "region": region,
    });
    serde_json::to_string_pretty(&value).expect("record serializes")
}

/// Result of parsing one response: the pretty record, or the failure name.
pub fn parse_one(text: &str) -> Result<String, String> {
    parse_output::<f64>(text).map(|o| pretty_record(&o)).map_err(|e| e.to_string())
}

/// Parses a single response. Returns the text to print and whether it was
/// valid.
pub fn cmd_parse_text(text: &str) -> (String, bool) {
    match parse_one(text) {
        Ok(record) => (record, true),
        Err(reason) => (reason, false),
    }
}

/// Parses every non-empty line of `input` as one response. Returns one
/// `line<TAB>verdict` row per line and whether every line was valid.
pub fn cmd_parse_batch(input: &str) -> (String, bool) {
    let mut out = String::new();
    let mut all_ok = true;
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_output::<f64>(line) {
            Ok(_) => {
                let _ = writeln!(out, "{}\tvalid", i + 1);
            }
            Err(e) => {
                all_ok = false;
                let _ = writeln!(out, "{}\t{e}", i + 1);
            }
        }
    }
    (out, all_ok)
}

/// Builds and flattens the prompt for one subtitle pair.
pub fn cmd_demo_retrieve(config: &RunConfig, en: &str, zh: &str, image_ref: &str) -> Result<String, CliError> {
    config.validate()?;
    let query = build_query(en, zh).map_err(|e| CliError::Validation(e.to_string()))?;
    let ctx = match retriever_client(config)? {
        Some(c) => retrieve(c, &query, config.deadline_ms),
        None => RetrievedContext::empty(),
    };
    let degraded = ctx.degraded;
    let mut s = format!("query = {query}\ndegraded = {degraded}\n");
    s.push_str(&assemble_prompt(ctx, image_ref, en, zh).flatten());
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
        assert_eq!(CliError::Io("x".into()).exit_code(), 2);
    }

    #[test]
    fn parse_single_and_batch() {
        let ok = "<think>t</think><answer>{\"classification\": \"all consistent\", \"region\": []}</answer>";
        let (text, valid) = cmd_parse_text(ok);
        assert!(valid);
        assert!(text.contains("\"classification\": \"all consistent\""));
        assert_eq!(cmd_parse_text("no tags"), ("MissingAnswerTag".to_string(), false));
        let (rows, all) = cmd_parse_batch(&format!("{ok}\n\nno tags\n"));
        assert!(!all);
        assert_eq!(rows, "1\tvalid\n3\tMissingAnswerTag\n");
    }

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(Path::new("a/b.ckpt"), ".log"), PathBuf::from("a/b.ckpt.log"));
    }
}
