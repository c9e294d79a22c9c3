//! Config file and backend selection.
//!
//! ```toml
//! [backend]
//! url = "http://localhost:8000/v1/chat/completions"   # or "mock:compliant:7"
//! model = "my-model"
//! api_key_env = "LENGTHMARK_API_KEY"
//! continuation = "trailing_assistant"
//! idle_timeout_secs = 60
//!
//! [defaults]
//! schedule = "decaying"        # or "uniform:16"
//! format = "words"             # words | bare | remaining
//! attempts = 3
//! temperature = 0.5
//! templates = "./templates"
//! parallelism = 4
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use lengthmark::backend::{
    Backend, ContinuationStyle, HttpBackend, HttpConfig, MockBackend, MockBehavior,
};
use lengthmark::marker::{MarkerFormat, MarkerKind};
use lengthmark::schedule::ScheduleKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    pub url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub continuation: Option<ContinuationStyle>,
    pub idle_timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub schedule: Option<String>,
    pub format: Option<String>,
    pub attempts: Option<usize>,
    pub temperature: Option<f64>,
    pub templates: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub backend: BackendProfile,
    #[serde(default)]
    pub defaults: Defaults,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

pub fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    match s {
        "decaying" => Ok(ScheduleKind::Decaying),
        _ => {
            let k = s
                .strip_prefix("uniform:")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .ok_or_else(|| format!("unknown schedule {s:?} (decaying | uniform:K)"))?;
            Ok(ScheduleKind::Uniform { interval: k })
        }
    }
}

pub fn parse_format(s: &str) -> Result<MarkerFormat, String> {
    let kind = match s {
        "words" => MarkerKind::CountWithWordsLabel,
        "bare" => MarkerKind::BareCount,
        "remaining" => MarkerKind::RemainingCount,
        _ => {
            return Err(format!(
                "unknown marker format {s:?} (words | bare | remaining)"
            ))
        }
    };
    Ok(MarkerFormat::with_kind(kind))
}

/// A backend plus the description echoed into reports.
pub struct BackendChoice {
    pub backend: Arc<dyn Backend>,
    pub label: String,
    pub seed: u64,
}

/// `mock:<behavior>[,<behavior>...][:seed]`, e.g. `mock:compliant:7` or
/// `mock:undershoot=5,compliant`.
pub fn parse_mock_uri(uri: &str, format: &MarkerFormat) -> Result<BackendChoice, String> {
    let rest = uri.strip_prefix("mock:").ok_or("not a mock URI")?;
    let (spec, seed) = match rest.rsplit_once(':') {
        Some((spec, seed)) => (
            spec,
            seed.parse::<u64>()
                .map_err(|_| format!("invalid mock seed {seed:?} in {uri:?}"))?,
        ),
        None => (rest, 0),
    };
    let behaviors: Vec<MockBehavior> = spec
        .split(',')
        .map(|b| MockBehavior::parse(b).ok_or_else(|| format!("unknown mock behavior {b:?}")))
        .collect::<Result<_, _>>()?;
    let backend = MockBackend::sequence(behaviors, seed).with_marker_format(format.clone());
    Ok(BackendChoice {
        backend: Arc::new(backend),
        label: format!("mock:{spec}:{seed}"),
        seed,
    })
}

/// Builds the backend named by `uri` (flag) or the profile.
pub fn build_backend(
    uri: Option<&str>,
    model: Option<&str>,
    profile: &BackendProfile,
    format: &MarkerFormat,
) -> Result<BackendChoice, String> {
    let url = uri
        .map(str::to_string)
        .or_else(|| profile.url.clone())
        .ok_or("no backend given (use --backend or [backend] url in the config)")?;
    if url.starts_with("mock:") {
        return parse_mock_uri(&url, format);
    }
    if !(url.starts_with("http://") || url.starts_with("https://")) {
        return Err(format!(
            "unsupported backend {url:?} (mock:... or http(s)://...)"
        ));
    }
    let model = model
        .map(str::to_string)
        .or_else(|| profile.model.clone())
        .ok_or("an HTTP backend needs a model (--model or [backend] model)")?;
    let mut config = HttpConfig::new(url.clone(), model.clone());
    if let Some(var) = &profile.api_key_env {
        config.api_key = std::env::var(var).ok();
        if config.api_key.is_none() {
            log::warn!("environment variable {var} is not set; sending no API key");
        }
    }
    if let Some(c) = profile.continuation {
        config.continuation = c;
    }
    if let Some(s) = profile.idle_timeout_secs {
        config.idle_timeout = Duration::from_secs(s);
    }
    Ok(BackendChoice {
        backend: Arc::new(HttpBackend::new(config)),
        label: format!("{model}@{url}"),
        seed: 0,
    })
}
