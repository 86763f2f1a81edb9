pub mod data;
pub mod eval;
pub mod report;
pub mod rewards;
pub mod serve;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use refocus_core::dataset::{read_jsonl, Record};
use refocus_core::engine::{ItpConfig, OnMalformed};
use refocus_core::gateway::{
    ChatModel, CommandDecoder, CommandProber, FrameSource, HttpChatModel, InlineProber, MediaProber, MockModel,
    MockScript, ModelEndpoint, SyntheticFrames,
};
use refocus_core::metrics::{GqaRule, MetricOptions};
use refocus_core::sampling::SamplingConfig;

use crate::args::{FramesMode, GqaRuleArg, ItpArgs, MediaArgs, MetricArgs, ModelArgs, OnMalformedArg, ProbeMode};

/// Errors that map to exit code 1. Everything else exits with 2.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Invalid(String),
}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Failure::Invalid(msg.into()).into()
}

/// Loads every record, failing on the first malformed line.
pub fn load_dataset(path: &Path, media_root: Option<&Path>) -> Result<Vec<Record>> {
    if !path.is_file() {
        bail!("dataset {} does not exist", path.display());
    }
    let mut records = Vec::new();
    for line in read_jsonl(path).with_context(|| format!("reading {}", path.display()))? {
        let mut rec = line.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if let Some(root) = media_root {
            if Path::new(&rec.media.path).is_relative() {
                rec.media.path = root.join(&rec.media.path).display().to_string();
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn read_mock_script(path: &Path) -> Result<MockScript> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing mock script {}", path.display()))
}

pub struct ModelHandle {
    pub model: Arc<dyn ChatModel>,
    pub name: String,
}

pub fn build_model(args: &ModelArgs) -> Result<ModelHandle> {
    if let Some(path) = &args.mock_script {
        let script = read_mock_script(path)?;
        return Ok(ModelHandle {
            model: Arc::new(MockModel::new(script)),
            name: format!("mock:{}", path.file_name().unwrap_or_default().to_string_lossy()),
        });
    }
    let Some(base_url) = &args.endpoint else {
        bail!("either --endpoint or --mock-script is required");
    };
    let endpoint = ModelEndpoint {
        auth_env: args.auth_env.clone(),
        timeout_ms: args.timeout_ms,
        max_retries: args.max_retries,
        max_in_flight: args.max_in_flight,
        ..ModelEndpoint::new(base_url.clone(), args.model.clone())
    };
    Ok(ModelHandle {
        model: Arc::new(HttpChatModel::new(endpoint)?),
        name: args.model.clone(),
    })
}

pub fn build_frames(args: &MediaArgs) -> Result<Box<dyn FrameSource>> {
    Ok(match (args.frames, &args.frame_template, &args.image_template) {
        (FramesMode::Synthetic, _, _) => Box::new(SyntheticFrames),
        (FramesMode::Ffmpeg, Some(frame), Some(image)) => Box::new(CommandDecoder::new(frame, image)?),
        (FramesMode::Ffmpeg, _, _) => Box::new(CommandDecoder::ffmpeg()),
    })
}

pub fn build_prober(mode: ProbeMode) -> Box<dyn MediaProber> {
    match mode {
        ProbeMode::Ffprobe => Box::new(CommandProber::ffprobe()),
        ProbeMode::Inline => Box::new(InlineProber),
    }
}

pub fn build_itp(args: &ItpArgs) -> Result<ItpConfig> {
    let preset = SamplingConfig::preset(&args.preset)?;
    let mut cfg = match &args.itp_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let has_sampling = table.contains_key("sampling");
            let mut cfg: ItpConfig = table.try_into().with_context(|| format!("parsing {}", path.display()))?;
            if !has_sampling {
                cfg.sampling = preset;
            }
            cfg
        }
        None => ItpConfig {
            sampling: preset,
            ..ItpConfig::default()
        },
    };
    if let Some(k) = args.iterations {
        cfg.iterations = k;
    }
    if let Some(v) = args.key_ratio {
        cfg.sampling.key_ratio = v;
    }
    if let Some(v) = args.fps {
        cfg.sampling.fps = v;
    }
    if let Some(v) = args.min_frames {
        cfg.sampling.min_frames = v;
    }
    if let Some(v) = args.max_frames {
        cfg.sampling.max_frames = v;
    }
    if let Some(m) = args.on_malformed {
        cfg.on_malformed = match m {
            OnMalformedArg::ReusePreviousPlan => OnMalformed::ReusePreviousPlan,
            OnMalformedArg::FallbackUniform => OnMalformed::FallbackUniform,
        };
    }
    cfg.stop_on_repeat |= args.stop_on_repeat;
    if args.no_raw {
        cfg.record_raw = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn metric_options(args: &MetricArgs) -> MetricOptions {
    MetricOptions {
        strict: args.strict_thresholds,
        gqa_rule: match args.gqa_rule {
            GqaRuleArg::IopAtHalf => GqaRule::IopAtHalf,
            GqaRuleArg::IouAtHalf => GqaRule::IouAtHalf,
        },
    }
}

/// Writes `text` to `path` through a temporary sibling.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn itp_args() -> ItpArgs {
        ItpArgs {
            preset: "train".into(),
            itp_config: None,
            iterations: None,
            key_ratio: None,
            fps: None,
            min_frames: None,
            max_frames: None,
            on_malformed: None,
            stop_on_repeat: false,
            no_raw: false,
        }
    }

    #[test]
    fn preset_then_flags() {
        let cfg = build_itp(&ItpArgs {
            iterations: Some(5),
            key_ratio: Some(0.75),
            on_malformed: Some(OnMalformedArg::FallbackUniform),
            ..itp_args()
        })
        .unwrap();
        assert_eq!(cfg.sampling.max_frames, 768);
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.sampling.key_ratio, 0.75);
        assert_eq!(cfg.on_malformed, OnMalformed::FallbackUniform);
    }

    #[test]
    fn config_file_keeps_preset_unless_it_sets_sampling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("itp.toml");
        std::fs::write(&path, "iterations = 2\ncrop_margin = 0.2\n").unwrap();
        let cfg = build_itp(&ItpArgs { itp_config: Some(path.clone()), ..itp_args() }).unwrap();
        assert_eq!((cfg.iterations, cfg.crop_margin, cfg.sampling.max_frames), (2, 0.2, 768));

        std::fs::write(&path, "[sampling]\nmax_frames = 32\nmin_frames = 8\n").unwrap();
        let cfg = build_itp(&ItpArgs { itp_config: Some(path), ..itp_args() }).unwrap();
        assert_eq!((cfg.sampling.min_frames, cfg.sampling.max_frames), (8, 32));
    }

    #[test]
    fn bad_overrides_are_rejected() {
        assert!(build_itp(&ItpArgs { iterations: Some(0), ..itp_args() }).is_err());
        assert!(build_itp(&ItpArgs { preset: "nope".into(), ..itp_args() }).is_err());
    }

    #[test]
    fn media_root_applies_to_relative_paths_only() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        std::fs::write(
            &data,
            concat!(
                r#"{"id":"a","media":{"kind":"image","path":"x.jpg"},"task":"spatial_clue","question":"q","think":"t","clue":[1,2,3,4]}"#,
                "\n",
                r#"{"id":"b","media":{"kind":"image","path":"/abs/y.jpg"},"task":"spatial_clue","question":"q","think":"t","clue":[1,2,3,4]}"#,
                "\n"
            ),
        )
        .unwrap();
        let recs = load_dataset(&data, Some(Path::new("/media"))).unwrap();
        assert_eq!(recs[0].media.path, "/media/x.jpg");
        assert_eq!(recs[1].media.path, "/abs/y.jpg");
    }
}
