use std::collections::HashMap;
use std::path::Path;
use std::process::Stdio;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use futures::stream::{self, StreamExt, TryStreamExt};
use serde_json::Value;

use super::{EncodedImage, GatewayError};
use crate::dataset::{MediaProbe, MediaRef};
use crate::protocol::format_box;
use crate::sampling::Dims;
use crate::spacetime::BoundingBox;

pub const SYNTHETIC_MIME: &str = "image/x-synthetic";

pub const FFMPEG_FRAME_TEMPLATE: &str =
    "ffmpeg -nostdin -loglevel error -ss {timestamp} -i {input} -frames:v 1 -vf scale={width}:{height} -y {output}";
pub const FFMPEG_IMAGE_TEMPLATE: &str = "ffmpeg -nostdin -loglevel error -i {input} \
     -vf crop={crop_width}:{crop_height}:{x}:{y},scale={width}:{height} -frames:v 1 -y {output}";
pub const FFPROBE_TEMPLATE: &str = "ffprobe -v error -select_streams v:0 \
     -show_entries stream=width,height:format=duration -of default=noprint_wrappers=1 {input}";

/// Materializes frames and images at requested sizes.
#[async_trait]
pub trait FrameSource: Send + Sync {
    /// One image per timestamp, in input order.
    async fn extract_frames(
        &self,
        media: &MediaRef,
        timestamps: &[f64],
        dims: Dims,
    ) -> Result<Vec<EncodedImage>, GatewayError>;

    /// The still image, optionally cropped to `region` first, resized to `dims`.
    async fn render_image(
        &self,
        media: &MediaRef,
        region: Option<&BoundingBox>,
        dims: Dims,
    ) -> Result<EncodedImage, GatewayError>;
}

/// Timestamps must be finite, non-decreasing and inside `[0, duration]`.
pub fn check_timestamps(media: &MediaRef, timestamps: &[f64]) -> Result<(), GatewayError> {
    let mut prev = 0.0;
    for &t in timestamps {
        if !t.is_finite() || t < 0.0 {
            return Err(GatewayError::Precondition(format!("timestamp {t} is not a non-negative number")));
        }
        if t < prev {
            return Err(GatewayError::Precondition(format!("timestamps not sorted at {t}")));
        }
        if let Some(d) = media.duration {
            if t > d {
                return Err(GatewayError::Precondition(format!("timestamp {t} beyond duration {d}")));
            }
        }
        prev = t;
    }
    Ok(())
}

/// Deterministic placeholder images that encode their own request.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticFrames;

#[async_trait]
impl FrameSource for SyntheticFrames {
    async fn extract_frames(
        &self,
        media: &MediaRef,
        timestamps: &[f64],
        dims: Dims,
    ) -> Result<Vec<EncodedImage>, GatewayError> {
        check_timestamps(media, timestamps)?;
        Ok(timestamps
            .iter()
            .map(|&t| EncodedImage {
                mime: SYNTHETIC_MIME.into(),
                bytes: format!("{}@{t:.3}:{}x{}", media.path, dims.width, dims.height).into_bytes(),
                timestamp: Some(t),
                caption: None,
            })
            .collect())
    }

    async fn render_image(
        &self,
        media: &MediaRef,
        region: Option<&BoundingBox>,
        dims: Dims,
    ) -> Result<EncodedImage, GatewayError> {
        let crop = region.map(format_box).unwrap_or_else(|| "full".into());
        Ok(EncodedImage {
            mime: SYNTHETIC_MIME.into(),
            bytes: format!("{}#{crop}:{}x{}", media.path, dims.width, dims.height).into_bytes(),
            timestamp: None,
            caption: None,
        })
    }
}

/// Runs an external decoder per frame. Templates are split like a shell
/// command line and the placeholders `{input}`, `{timestamp}`, `{width}`,
/// `{height}`, `{output}` (plus `{x}`, `{y}`, `{crop_width}`,
/// `{crop_height}` for still images) are substituted inside each argument.
/// No shell is involved.
#[derive(Debug, Clone)]
pub struct CommandDecoder {
    frame_args: Vec<String>,
    image_args: Vec<String>,
    output_ext: String,
    parallelism: usize,
}

fn split_template(template: &str) -> Result<Vec<String>, GatewayError> {
    let args = shell_words::split(template).map_err(|e| GatewayError::InvalidEndpoint(format!("{template}: {e}")))?;
    if args.is_empty() {
        return Err(GatewayError::InvalidEndpoint("empty command template".into()));
    }
    Ok(args)
}

fn mime_for(ext: &str) -> &'static str {
    match ext.to_ascii_lowercase().as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "png" => "image/png",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    }
}

fn substitute(args: &[String], vars: &[(&str, String)]) -> Vec<String> {
    args.iter()
        .map(|a| vars.iter().fold(a.clone(), |acc, (k, v)| acc.replace(k, v)))
        .collect()
}

async fn run_decoder(args: Vec<String>, output: &Path) -> Result<Vec<u8>, String> {
    let out = tokio::process::Command::new(&args[0])
        .args(&args[1..])
        .stdin(Stdio::null())
        .output()
        .await
        .map_err(|e| format!("could not start {}: {e}", args[0]))?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(format!("{} exited with {}: {}", args[0], out.status, stderr.trim()));
    }
    match tokio::fs::read(output).await {
        Ok(bytes) if !bytes.is_empty() => Ok(bytes),
        Ok(_) => Err("decoder wrote an empty file".into()),
        Err(e) => Err(format!("decoder produced no output: {e}")),
    }
}

impl CommandDecoder {
    pub fn new(frame_template: &str, image_template: &str) -> Result<Self, GatewayError> {
        Ok(Self {
            frame_args: split_template(frame_template)?,
            image_args: split_template(image_template)?,
            output_ext: "jpg".into(),
            parallelism: 4,
        })
    }

    pub fn ffmpeg() -> Self {
        Self::new(FFMPEG_FRAME_TEMPLATE, FFMPEG_IMAGE_TEMPLATE).expect("built-in templates parse")
    }

    pub fn with_output_ext(mut self, ext: impl Into<String>) -> Self {
        self.output_ext = ext.into();
        self
    }

    /// Decoder processes run at once for one extraction call.
    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    async fn decode(&self, template: &[String], vars: Vec<(&str, String)>) -> Result<Vec<u8>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let output = dir.path().join(format!("out.{}", self.output_ext));
        let mut vars = vars;
        vars.push(("{output}", output.display().to_string()));
        run_decoder(substitute(template, &vars), &output).await
    }
}

#[async_trait]
impl FrameSource for CommandDecoder {
    async fn extract_frames(
        &self,
        media: &MediaRef,
        timestamps: &[f64],
        dims: Dims,
    ) -> Result<Vec<EncodedImage>, GatewayError> {
        check_timestamps(media, timestamps)?;
        let mime = mime_for(&self.output_ext);
        stream::iter(timestamps.iter().copied())
            .map(|t| async move {
                let vars = vec![
                    ("{input}", media.path.clone()),
                    ("{timestamp}", format!("{t:.3}")),
                    ("{width}", dims.width.to_string()),
                    ("{height}", dims.height.to_string()),
                ];
                let bytes = self
                    .decode(&self.frame_args, vars)
                    .await
                    .map_err(|diagnostics| GatewayError::DecodeFailed {
                        timestamp: Some(t),
                        diagnostics,
                    })?;
                Ok(EncodedImage {
                    mime: mime.into(),
                    bytes,
                    timestamp: Some(t),
                    caption: None,
                })
            })
            .buffered(self.parallelism)
            .try_collect()
            .await
    }

    async fn render_image(
        &self,
        media: &MediaRef,
        region: Option<&BoundingBox>,
        dims: Dims,
    ) -> Result<EncodedImage, GatewayError> {
        let (x, y, w, h) = match region {
            Some(b) => (b.x1(), b.y1(), b.width(), b.height()),
            None => (
                0.0,
                0.0,
                media.width.map_or(0.0, f64::from),
                media.height.map_or(0.0, f64::from),
            ),
        };
        if region.is_none() && (w == 0.0 || h == 0.0) {
            return Err(GatewayError::Precondition("image dimensions unknown".into()));
        }
        let vars = vec![
            ("{input}", media.path.clone()),
            ("{width}", dims.width.to_string()),
            ("{height}", dims.height.to_string()),
            ("{x}", format!("{}", x.round() as i64)),
            ("{y}", format!("{}", y.round() as i64)),
            ("{crop_width}", format!("{}", w.round() as i64)),
            ("{crop_height}", format!("{}", h.round() as i64)),
        ];
        let bytes = self
            .decode(&self.image_args, vars)
            .await
            .map_err(|diagnostics| GatewayError::DecodeFailed {
                timestamp: None,
                diagnostics,
            })?;
        Ok(EncodedImage {
            mime: mime_for(&self.output_ext).into(),
            bytes,
            timestamp: None,
            caption: None,
        })
    }
}

/// Looks up duration and dimensions of a media file.
#[async_trait]
pub trait MediaProber: Send + Sync {
    async fn probe(&self, media: &MediaRef) -> Result<MediaProbe, GatewayError>;
}

/// Trusts the values stored on the record.
#[derive(Debug, Clone, Copy, Default)]
pub struct InlineProber;

#[async_trait]
impl MediaProber for InlineProber {
    async fn probe(&self, media: &MediaRef) -> Result<MediaProbe, GatewayError> {
        Ok(media.inline_probe())
    }
}

/// Reads `duration`, `width` and `height` from either `key=value` lines or a
/// flat JSON object. Keys may carry a dotted prefix; the first value wins.
pub fn parse_probe_output(text: &str) -> MediaProbe {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(text.trim()) {
        for (k, v) in map {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            pairs.push((k, v));
        }
    } else {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
    }
    let mut probe = MediaProbe::default();
    for (k, v) in pairs {
        let key = k.rsplit('.').next().unwrap_or(&k);
        match key {
            "duration" if probe.duration.is_none() => probe.duration = v.parse().ok().filter(|d: &f64| d.is_finite()),
            "width" if probe.width.is_none() => probe.width = v.parse().ok(),
            "height" if probe.height.is_none() => probe.height = v.parse().ok(),
            _ => {}
        }
    }
    probe
}

/// Runs a probe command template (`{input}` placeholder) and caches the
/// result per media path.
pub struct CommandProber {
    args: Vec<String>,
    cache: Mutex<HashMap<String, MediaProbe>>,
    runs: AtomicUsize,
}

impl CommandProber {
    pub fn new(template: &str) -> Result<Self, GatewayError> {
        Ok(Self {
            args: split_template(template)?,
            cache: Mutex::new(HashMap::new()),
            runs: AtomicUsize::new(0),
        })
    }

    pub fn ffprobe() -> Self {
        Self::new(FFPROBE_TEMPLATE).expect("built-in template parses")
    }

    /// Number of probe processes started.
    pub fn runs(&self) -> usize {
        self.runs.load(Ordering::Relaxed)
    }
}

#[async_trait]
impl MediaProber for CommandProber {
    async fn probe(&self, media: &MediaRef) -> Result<MediaProbe, GatewayError> {
        if let Some(hit) = self.cache.lock().unwrap().get(&media.path) {
            return Ok(*hit);
        }
        let fail = |reason: String| GatewayError::MediaProbeFailed {
            path: media.path.clone(),
            reason,
        };
        let args = substitute(&self.args, &[("{input}", media.path.clone())]);
        self.runs.fetch_add(1, Ordering::Relaxed);
        let out = tokio::process::Command::new(&args[0])
            .args(&args[1..])
            .stdin(Stdio::null())
            .output()
            .await
            .map_err(|e| fail(format!("could not start {}: {e}", args[0])))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let probe = parse_probe_output(&String::from_utf8_lossy(&out.stdout));
        if probe == MediaProbe::default() {
            return Err(fail("probe output had no duration or dimensions".into()));
        }
        self.cache.lock().unwrap().insert(media.path.clone(), probe);
        Ok(probe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MediaKind;

    fn video(path: &str) -> MediaRef {
        MediaRef {
            kind: MediaKind::Video,
            path: path.into(),
            duration: Some(10.0),
            width: Some(64),
            height: Some(48),
        }
    }

    fn script(dir: &Path, name: &str, body: &str) -> String {
        use std::os::unix::fs::PermissionsExt;
        let p = dir.join(name);
        std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
        p.display().to_string()
    }

    #[tokio::test]
    async fn synthetic_frames_keep_order() {
        let ts = [0.5, 1.0, 2.5, 9.0];
        let out = SyntheticFrames.extract_frames(&video("v.mp4"), &ts, Dims::new(28, 28)).await.unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.iter().map(|i| i.timestamp.unwrap()).collect::<Vec<_>>(), ts);
    }

    #[tokio::test]
    async fn timestamp_beyond_duration_rejected_before_decode() {
        let dir = tempfile::tempdir().unwrap();
        let marker = dir.path().join("ran");
        let exe = script(dir.path(), "dec.sh", &format!("touch {}", marker.display()));
        let dec = CommandDecoder::new(&format!("{exe} {{output}}"), &format!("{exe} {{output}}")).unwrap();
        let err = dec.extract_frames(&video("v.mp4"), &[1.0, 11.0], Dims::new(28, 28)).await.unwrap_err();
        assert!(matches!(err, GatewayError::Precondition(_)));
        assert!(!marker.exists());
        assert!(check_timestamps(&video("v"), &[2.0, 1.0]).is_err());
    }

    #[tokio::test]
    async fn command_decoder_substitutes_placeholders_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let exe = script(dir.path(), "dec.sh", r#"printf '%s %s %sx%s' "$1" "$2" "$3" "$4" > "$5""#);
        let template = format!("{exe} {{input}} t={{timestamp}} {{width}} {{height}} {{output}}");
        let dec = CommandDecoder::new(&template, &template).unwrap().with_output_ext("png");
        let media = video("/data/my clip.mp4");
        let out = dec.extract_frames(&media, &[0.25, 3.0, 7.5], Dims::new(56, 28)).await.unwrap();
        let texts: Vec<String> = out.iter().map(|i| String::from_utf8(i.bytes.clone()).unwrap()).collect();
        assert_eq!(
            texts,
            vec![
                "/data/my clip.mp4 t=0.250 56x28",
                "/data/my clip.mp4 t=3.000 56x28",
                "/data/my clip.mp4 t=7.500 56x28"
            ]
        );
        assert_eq!(out[0].mime, "image/png");
    }

    #[tokio::test]
    async fn crop_placeholders() {
        let dir = tempfile::tempdir().unwrap();
        let exe = script(dir.path(), "img.sh", r#"printf '%s' "$1" > "$2""#);
        let dec = CommandDecoder::new(
            &format!("{exe} x {{output}}"),
            &format!("{exe} {{crop_width}}:{{crop_height}}:{{x}}:{{y}}/{{width}}x{{height}} {{output}}"),
        )
        .unwrap();
        let region = BoundingBox::new(10.0, 20.0, 40.0, 60.0).unwrap();
        let img = dec.render_image(&video("i.png"), Some(&region), Dims::new(56, 56)).await.unwrap();
        assert_eq!(img.bytes, b"30:40:10:20/56x56");
        let full = dec.render_image(&video("i.png"), None, Dims::new(28, 28)).await.unwrap();
        assert_eq!(full.bytes, b"64:48:0:0/28x28");
    }

    #[tokio::test]
    async fn nonzero_exit_is_decode_failed_with_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let exe = script(dir.path(), "bad.sh", "echo 'corrupt stream' >&2; exit 3");
        let dec = CommandDecoder::new(&format!("{exe} {{output}}"), &format!("{exe} {{output}}")).unwrap();
        match dec.extract_frames(&video("v"), &[1.0], Dims::new(28, 28)).await {
            Err(GatewayError::DecodeFailed { timestamp, diagnostics }) => {
                assert_eq!(timestamp, Some(1.0));
                assert!(diagnostics.contains("corrupt stream"), "{diagnostics}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probe_output_formats() {
        let kv = parse_probe_output("width=640\nheight=480\nduration=12.5\n");
        assert_eq!(kv, MediaProbe { duration: Some(12.5), width: Some(640), height: Some(480) });
        let js = parse_probe_output(r#"{"format.duration": "3.0", "width": 10, "height": 20}"#);
        assert_eq!(js, MediaProbe { duration: Some(3.0), width: Some(10), height: Some(20) });
        assert_eq!(parse_probe_output("duration=N/A").duration, None);
    }

    #[tokio::test]
    async fn probe_is_cached_per_path() {
        let dir = tempfile::tempdir().unwrap();
        let exe = script(dir.path(), "probe.sh", "echo width=32; echo height=16; echo duration=4.0");
        let prober = CommandProber::new(&format!("{exe} {{input}}")).unwrap();
        let a = prober.probe(&video("a.mp4")).await.unwrap();
        let b = prober.probe(&video("a.mp4")).await.unwrap();
        assert_eq!(a, b);
        assert_eq!(a.duration, Some(4.0));
        assert_eq!(prober.runs(), 1);

        let fail = script(dir.path(), "fail.sh", "exit 1");
        let prober = CommandProber::new(&format!("{fail} {{input}}")).unwrap();
        assert!(matches!(prober.probe(&video("a")).await, Err(GatewayError::MediaProbeFailed { .. })));
    }
}
