//! Scalar rewards on decoded images.
//!
//! Local rewards are pure functions of the image. Remote rewards go through
//! the HTTP scoring protocol: `POST {endpoint}/score` with
//! `{"id", "reward", "prompt", "image_ppm_b64"}`, answered by `{"id", "score"}`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msvq::Image;

/// Environment variable naming the default scoring endpoint.
pub const SCORER_URL_ENV: &str = "SCALEGRPO_SCORER_URL";

pub const LUMA: [f64; 3] = [0.2989, 0.5870, 0.1140];

/// Mean luma `0.2989 R + 0.5870 G + 0.1140 B` over all pixels.
pub fn brightness(image: &Image) -> f64 {
    let n = (image.height() * image.width()) as f64;
    image
        .pixels()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .sum::<f64>()
        / n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Bright,
    Dark,
}

/// Bright: 1 iff `b >= threshold`. Dark: 1 iff `b < threshold`.
pub fn threshold_reward_at(b: f64, mode: ThresholdMode, threshold: f64) -> f64 {
    let hit = match mode {
        ThresholdMode::Bright => b >= threshold,
        ThresholdMode::Dark => b < threshold,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Threshold reward with the default cut-offs (0.8 bright, 0.2 dark).
pub fn threshold_reward(b: f64, mode: ThresholdMode) -> f64 {
    let t = match mode {
        ThresholdMode::Bright => BRIGHT_THRESHOLD,
        ThresholdMode::Dark => DARK_THRESHOLD,
    };
    threshold_reward_at(b, mode, t)
}

pub const BRIGHT_THRESHOLD: f64 = 0.8;
pub const DARK_THRESHOLD: f64 = 0.2;

fn bright_default() -> f64 {
    BRIGHT_THRESHOLD
}

fn dark_default() -> f64 {
    DARK_THRESHOLD
}

fn timeout_default() -> u64 {
    30_000
}

fn in_flight_default() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteReward {
    Aesthetic,
    Clip,
    EchoBrightness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSpec {
    /// Base URL; falls back to `SCALEGRPO_SCORER_URL`.
    #[serde(default)]
    pub endpoint: Option<String>,
    pub reward: RemoteReward,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default = "timeout_default")]
    pub timeout_ms: u64,
    #[serde(default = "in_flight_default")]
    pub max_in_flight: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedComponent {
    pub spec: RewardSpec,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    BrightnessRaw,
    BrightThreshold {
        #[serde(default = "bright_default")]
        threshold: f64,
    },
    DarkThreshold {
        #[serde(default = "dark_default")]
        threshold: f64,
    },
    Remote(RemoteSpec),
    WeightedSum {
        components: Vec<WeightedComponent>,
    },
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::BrightThreshold {
            threshold: BRIGHT_THRESHOLD,
        }
    }
}

impl RewardSpec {
    pub fn bright() -> Self {
        RewardSpec::default()
    }

    pub fn dark() -> Self {
        RewardSpec::DarkThreshold {
            threshold: DARK_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RewardSpec::BrightnessRaw => Ok(()),
            RewardSpec::BrightThreshold { threshold } | RewardSpec::DarkThreshold { threshold } => {
                if threshold.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("threshold must be finite"))
                }
            }
            RewardSpec::Remote(r) => {
                if r.max_in_flight == 0 {
                    return Err(Error::invalid("max_in_flight must be >= 1"));
                }
                if r.reward == RemoteReward::Clip && r.prompt.is_none() {
                    return Err(Error::invalid("clip reward needs a prompt"));
                }
                Ok(())
            }
            RewardSpec::WeightedSum { components } => {
                if components.is_empty() {
                    return Err(Error::invalid("weighted_sum needs at least one component"));
                }
                for c in components {
                    if !c.weight.is_finite() {
                        return Err(Error::invalid(format!("non-finite weight {}", c.weight)));
                    }
                    c.spec.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Every remote leaf in evaluation order.
    pub fn remote_leaves(&self) -> Vec<&RemoteSpec> {
        match self {
            RewardSpec::Remote(r) => vec![r],
            RewardSpec::WeightedSum { components } => {
                components.iter().flat_map(|c| c.spec.remote_leaves()).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn score(&self, image: &Image) -> Result<f64> {
        Ok(self.score_batch(&[image])?[0])
    }

    /// Scores in input order. Local leaves run in parallel; remote leaves keep
    /// at most `max_in_flight` requests open.
    pub fn score_batch(&self, images: &[&Image]) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            RewardSpec::BrightnessRaw => Ok(images.par_iter().map(|im| brightness(im)).collect()),
            RewardSpec::BrightThreshold { threshold } => Ok(images
                .par_iter()
                .map(|im| threshold_reward_at(brightness(im), ThresholdMode::Bright, *threshold))
                .collect()),
            RewardSpec::DarkThreshold { threshold } => Ok(images
                .par_iter()
                .map(|im| threshold_reward_at(brightness(im), ThresholdMode::Dark, *threshold))
                .collect()),
            RewardSpec::Remote(r) => RemoteScorer::from_spec(r)?.score_batch(images),
            RewardSpec::WeightedSum { components } => {
                let parts = components
                    .iter()
                    .map(|c| Ok((c.weight, c.spec.score_batch(images)?)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((0..images.len())
                    .map(|i| weighted_sum(parts.iter().map(|(w, s)| (s[i], *w))))
                    .collect())
            }
        }
    }
}

/// `Σ weight·score`, left to right.
pub fn weighted_sum(parts: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    parts.into_iter().fold(0.0, |acc, (score, w)| acc + w * score)
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    id: &'a str,
    reward: RemoteReward,
    prompt: Option<&'a str>,
    image_ppm_b64: String,
}

#[derive(Deserialize)]
struct ScoreResponse {
    id: String,
    score: f64,
}

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

fn next_id() -> String {
    format!("req-{}-{}", std::process::id(), REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed))
}

/// Client for one remote scorer.
#[derive(Clone, Debug)]
pub struct RemoteScorer {
    endpoint: String,
    reward: RemoteReward,
    prompt: Option<String>,
    timeout: Duration,
    max_in_flight: usize,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(endpoint: &str, reward: RemoteReward, prompt: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        RemoteScorer {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            reward,
            prompt,
            timeout,
            max_in_flight: 1,
            agent,
        }
    }

    pub fn from_spec(spec: &RemoteSpec) -> Result<Self> {
        let endpoint = resolve_endpoint(spec.endpoint.as_deref())?;
        let mut s = Self::new(
            &endpoint,
            spec.reward,
            spec.prompt.clone(),
            Duration::from_millis(spec.timeout_ms),
        );
        s.max_in_flight = spec.max_in_flight.max(1);
        Ok(s)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// `GET /health`; any HTTP answer counts as reachable.
    pub fn probe(&self) -> Result<()> {
        match self.agent.get(&format!("{}/health", self.endpoint)).call() {
            Ok(_) | Err(ureq::Error::Status(..)) => Ok(()),
            Err(e) => Err(Error::RewardUnavailable(format!(
                "scorer at {} unreachable: {e}",
                self.endpoint
            ))),
        }
    }

    pub fn score(&self, image: &Image) -> Result<f64> {
        let id = next_id();
        let body = ScoreRequest {
            id: &id,
            reward: self.reward,
            prompt: self.prompt.as_deref(),
            image_ppm_b64: base64::engine::general_purpose::STANDARD.encode(image.to_ppm()),
        };
        let url = format!("{}/score", self.endpoint);
        let mut attempt = 0;
        let response = loop {
            match self.agent.post(&url).send_json(&body) {
                Ok(r) => break r,
                Err(ureq::Error::Transport(t)) if attempt == 0 => {
                    log::warn!("scorer transport failure, retrying once: {t}");
                    attempt += 1;
                }
                Err(ureq::Error::Transport(t)) => {
                    return Err(Error::RewardUnavailable(format!("{url}: {t}")))
                }
                Err(ureq::Error::Status(503, _)) => {
                    return Err(Error::RewardUnavailable(format!("{url}: model not loaded (503)")))
                }
                Err(ureq::Error::Status(code, r)) => {
                    let text = r.into_string().unwrap_or_default();
                    return Err(Error::Protocol(format!("{url}: status {code}: {text}")));
                }
            }
        };
        let text = response
            .into_string()
            .map_err(|e| Error::RewardUnavailable(format!("{url}: reading body: {e}")))?;
        let parsed: ScoreResponse = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("{url}: malformed response ({e}): {text}")))?;
        if parsed.id != id {
            return Err(Error::Protocol(format!(
                "{url}: response id {:?} does not match request id {id:?}",
                parsed.id
            )));
        }
        if !parsed.score.is_finite() {
            return Err(Error::Protocol(format!("{url}: non-finite score")));
        }
        Ok(parsed.score)
    }

    pub fn score_batch(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.max_in_flight) {
            let results: Vec<Result<f64>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|im| s.spawn(|| self.score(im))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("scorer thread panicked".into()))))
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }
}

/// Explicit endpoint, else `SCALEGRPO_SCORER_URL`.
pub fn resolve_endpoint(explicit: Option<&str>) -> Result<String> {
    if let Some(e) = explicit {
        return Ok(e.to_string());
    }
    std::env::var(SCORER_URL_ENV).map_err(|_| {
        Error::RewardUnavailable(format!("no scorer endpoint configured and {SCORER_URL_ENV} is unset"))
    })
}

/// One-shot remote score.
pub fn remote_score(
    endpoint: &str,
    reward: RemoteReward,
    prompt: Option<&str>,
    image: &Image,
    timeout: Duration,
) -> Result<f64> {
    RemoteScorer::new(endpoint, reward, prompt.map(str::to_string), timeout).score(image)
}
