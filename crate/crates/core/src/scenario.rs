//! Seeded generators for pause, turn-taking, backchannel, and interruption
//! episodes, plus the episode JSONL format.
//!
//! All generated times sit on the frame grid so that frame-level user bits
//! and second-level user intervals describe exactly the same activity.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{IntervalSet, TimeInterval};
use crate::model::EpisodeInput;
use crate::reward::density_filter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Pause,
    TurnTaking,
    Backchannel,
    Interruption,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Pause,
        ScenarioKind::Backchannel,
        ScenarioKind::TurnTaking,
        ScenarioKind::Interruption,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Pause => "pause",
            ScenarioKind::TurnTaking => "turn_taking",
            ScenarioKind::Backchannel => "backchannel",
            ScenarioKind::Interruption => "interruption",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pause" => Ok(ScenarioKind::Pause),
            "turn_taking" | "turn-taking" => Ok(ScenarioKind::TurnTaking),
            "backchannel" => Ok(ScenarioKind::Backchannel),
            "interruption" => Ok(ScenarioKind::Interruption),
            other => Err(Error::Config(format!("unknown scenario kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub kind: ScenarioKind,
    /// Episode length in seconds.
    pub horizon: f64,
    pub cue_time: f64,
    pub eval_window: TimeInterval,
    pub user: IntervalSet,
    pub seed: u64,
    pub content_seed: Option<u64>,
    /// Leading seconds during which the model is forced to speak.
    pub forced_active: f64,
}

impl ScenarioSpec {
    pub fn horizon_frames(&self, delta_t: f64) -> usize {
        (self.horizon / delta_t).round() as usize
    }

    /// User activity per frame: 1 when the frame's midpoint lies inside a user interval.
    pub fn user_bits(&self, delta_t: f64) -> Vec<u8> {
        user_bits(&self.user, self.horizon_frames(delta_t), delta_t)
    }

    pub fn episode_input(&self, delta_t: f64) -> EpisodeInput {
        EpisodeInput {
            user_activity_bits: self.user_bits(delta_t),
            content_seed: self.content_seed,
            forced_active_frames: (self.forced_active / delta_t).round() as usize,
        }
    }

    fn validate(&self) -> Result<()> {
        let inside = |iv: &TimeInterval| iv.end() <= self.horizon + 1e-9;
        if !(self.horizon > 0.0) || !inside(&self.eval_window) || !self.user.iter().all(inside) {
            return Err(Error::Config(format!("{}: intervals exceed the {} s horizon", self.id, self.horizon)));
        }
        Ok(())
    }
}

pub fn user_bits(user: &IntervalSet, frames: usize, delta_t: f64) -> Vec<u8> {
    (0..frames)
        .map(|t| {
            let mid = (t as f64 + 0.5) * delta_t;
            u8::from(user.iter().any(|iv| iv.contains(mid)))
        })
        .collect()
}

/// Rebuild intervals from per-frame bits: each run of ones at `[a, b]`
/// becomes `[a·Δt, (b+1)·Δt)`.
pub fn intervals_from_bits(bits: &[u8], delta_t: f64) -> IntervalSet {
    crate::reward::active_runs(bits, 0)
        .into_iter()
        .map(|(a, b)| TimeInterval::new(a as f64 * delta_t, (b + 1) as f64 * delta_t).expect("positive run"))
        .collect::<Vec<_>>()
        .into()
}

/// Generator ranges, in seconds. Every range is sampled uniformly over the
/// frame-grid points it contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub delta_t: f64,
    pub horizon: f64,
    /// Length of the measurement window after the cue.
    pub window: f64,
    pub turn_taking_utterance: (f64, f64),
    pub pause_first: (f64, f64),
    pub pause_gap: (f64, f64),
    pub pause_second: (f64, f64),
    pub interruption_barge_in: (f64, f64),
    pub interruption_utterance: (f64, f64),
    pub interruption_context: f64,
    pub backchannel_utterance: (f64, f64),
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            delta_t: 0.08,
            horizon: 20.0,
            window: 2.0,
            turn_taking_utterance: (2.0, 6.0),
            pause_first: (2.0, 6.0),
            pause_gap: (0.4, 1.0),
            pause_second: (2.0, 4.0),
            interruption_barge_in: (1.0, 2.0),
            interruption_utterance: (1.5, 3.0),
            interruption_context: 2.0,
            backchannel_utterance: (10.0, 15.0),
        }
    }
}

impl ScenarioParams {
    fn frames(&self, seconds: f64) -> usize {
        (seconds / self.delta_t).round() as usize
    }

    fn time(&self, frames: usize) -> f64 {
        frames as f64 * self.delta_t
    }

    /// Uniform draw over grid frames inside `[lo, hi]` seconds.
    fn draw(&self, rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> Result<usize> {
        let a = (lo / self.delta_t - 1e-9).ceil() as usize;
        let b = (hi / self.delta_t + 1e-9).floor() as usize;
        if a > b || b == 0 {
            return Err(Error::Config(format!("range [{lo}, {hi}] s holds no positive frame")));
        }
        Ok(rng.random_range(a.max(1)..=b))
    }

    fn iv(&self, a: usize, b: usize) -> Result<TimeInterval> {
        TimeInterval::new(self.time(a), self.time(b))
    }

    fn finish(&self, spec: ScenarioSpec) -> Result<ScenarioSpec> {
        spec.validate()?;
        Ok(spec)
    }

    fn horizon_frames(&self) -> usize {
        self.frames(self.horizon)
    }
}

fn spec_id(kind: ScenarioKind, seed: u64) -> String {
    format!("{kind}-{seed}")
}

pub fn gen_turn_taking(params: &ScenarioParams, seed: u64) -> Result<ScenarioSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = params.draw(&mut rng, params.turn_taking_utterance)?;
    let w = params.frames(params.window);
    params.finish(ScenarioSpec {
        id: spec_id(ScenarioKind::TurnTaking, seed),
        kind: ScenarioKind::TurnTaking,
        horizon: params.time(params.horizon_frames()),
        cue_time: params.time(a),
        eval_window: params.iv(a, a + w)?,
        user: vec![params.iv(0, a)?].into(),
        seed,
        content_seed: None,
        forced_active: 0.0,
    })
}

pub fn gen_pause(params: &ScenarioParams, seed: u64) -> Result<ScenarioSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = params.draw(&mut rng, params.pause_first)?;
    let p = params.draw(&mut rng, params.pause_gap)?;
    let second = params.draw(&mut rng, params.pause_second)?;
    let b = a + p + second;
    params.finish(ScenarioSpec {
        id: spec_id(ScenarioKind::Pause, seed),
        kind: ScenarioKind::Pause,
        horizon: params.time(params.horizon_frames()),
        cue_time: params.time(a),
        eval_window: params.iv(a, a + p)?,
        user: vec![params.iv(0, a)?, params.iv(a + p, b)?].into(),
        seed,
        content_seed: None,
        forced_active: 0.0,
    })
}

pub fn gen_interruption(params: &ScenarioParams, seed: u64) -> Result<ScenarioSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tb = params.draw(&mut rng, params.interruption_barge_in)?;
    let d = params.draw(&mut rng, params.interruption_utterance)?;
    let content_seed = rng.random_range(0..1024u64);
    let cue = tb + d;
    let w = params.frames(params.window);
    params.finish(ScenarioSpec {
        id: spec_id(ScenarioKind::Interruption, seed),
        kind: ScenarioKind::Interruption,
        horizon: params.time(params.horizon_frames()),
        cue_time: params.time(cue),
        eval_window: params.iv(cue, cue + w)?,
        user: vec![params.iv(tb, cue)?].into(),
        seed,
        content_seed: Some(content_seed),
        forced_active: params.time(params.frames(params.interruption_context)),
    })
}

pub fn gen_backchannel(params: &ScenarioParams, seed: u64) -> Result<ScenarioSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = params.draw(&mut rng, params.backchannel_utterance)?;
    params.finish(ScenarioSpec {
        id: spec_id(ScenarioKind::Backchannel, seed),
        kind: ScenarioKind::Backchannel,
        horizon: params.time(params.horizon_frames()),
        cue_time: 0.0,
        eval_window: params.iv(0, l)?,
        user: vec![params.iv(0, l)?].into(),
        seed,
        content_seed: None,
        forced_active: 0.0,
    })
}

pub fn generate(kind: ScenarioKind, params: &ScenarioParams, seed: u64) -> Result<ScenarioSpec> {
    match kind {
        ScenarioKind::Pause => gen_pause(params, seed),
        ScenarioKind::TurnTaking => gen_turn_taking(params, seed),
        ScenarioKind::Backchannel => gen_backchannel(params, seed),
        ScenarioKind::Interruption => gen_interruption(params, seed),
    }
}

/// Per-episode seed for member `index` of a suite seeded with `seed`.
pub fn member_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_suite(kind: ScenarioKind, count: usize, seed: u64, params: &ScenarioParams) -> Result<Vec<ScenarioSpec>> {
    (0..count as u64)
        .map(|i| generate(kind, params, member_seed(seed, i)))
        .collect()
}

/// One line of an episode JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub kind: ScenarioKind,
    pub horizon_frames: usize,
    pub user_activity_bits: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_seed: Option<u64>,
    pub cue_time: f64,
    pub eval_window: TimeInterval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_intervals: Option<IntervalSet>,
    #[serde(default)]
    pub forced_active_frames: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EpisodeRecord {
    pub fn from_spec(spec: &ScenarioSpec, delta_t: f64) -> EpisodeRecord {
        let input = spec.episode_input(delta_t);
        EpisodeRecord {
            id: spec.id.clone(),
            kind: spec.kind,
            horizon_frames: input.horizon(),
            user_activity_bits: input.user_activity_bits,
            content_seed: spec.content_seed,
            cue_time: spec.cue_time,
            eval_window: spec.eval_window,
            user_intervals: Some(spec.user.clone()),
            forced_active_frames: input.forced_active_frames,
            seed: spec.seed,
        }
    }

    pub fn into_spec(self, delta_t: f64) -> Result<ScenarioSpec> {
        if self.user_activity_bits.len() != self.horizon_frames {
            return Err(Error::Config(format!(
                "{}: {} activity bits for a horizon of {} frames",
                self.id,
                self.user_activity_bits.len(),
                self.horizon_frames
            )));
        }
        if self.user_activity_bits.iter().any(|&b| b > 1) {
            return Err(Error::Config(format!("{}: activity bits must be 0 or 1", self.id)));
        }
        let user = self
            .user_intervals
            .unwrap_or_else(|| intervals_from_bits(&self.user_activity_bits, delta_t));
        let spec = ScenarioSpec {
            id: self.id,
            kind: self.kind,
            horizon: self.horizon_frames as f64 * delta_t,
            cue_time: self.cue_time,
            eval_window: self.eval_window,
            user,
            seed: self.seed,
            content_seed: self.content_seed,
            forced_active: self.forced_active_frames as f64 * delta_t,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEpisodes {
    pub specs: Vec<ScenarioSpec>,
    /// Records removed by the density filter.
    pub dropped: usize,
}

/// Parse episode JSONL. Blank lines are skipped; with `density_threshold`
/// set, episodes whose user speech covers less than that fraction of the
/// horizon are dropped and counted.
pub fn parse_episodes(reader: impl BufRead, delta_t: f64, density_threshold: Option<f64>) -> Result<LoadedEpisodes> {
    let mut specs = Vec::new();
    let mut dropped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let spec = record.into_spec(delta_t).map_err(|e| parse_err(e.to_string()))?;
        if let Some(threshold) = density_threshold {
            if !density_filter(&spec.user, spec.horizon, threshold).map_err(|e| parse_err(e.to_string()))? {
                dropped += 1;
                continue;
            }
        }
        specs.push(spec);
    }
    Ok(LoadedEpisodes { specs, dropped })
}

pub fn load_episodes(path: impl AsRef<Path>, delta_t: f64, density_threshold: Option<f64>) -> Result<LoadedEpisodes> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_episodes(BufReader::new(file), delta_t, density_threshold)
}

pub fn episodes_to_jsonl(specs: &[ScenarioSpec], delta_t: f64) -> String {
    let mut out = String::new();
    for spec in specs {
        out.push_str(&serde_json::to_string(&EpisodeRecord::from_spec(spec, delta_t)).expect("serializable"));
        out.push('\n');
    }
    out
}
