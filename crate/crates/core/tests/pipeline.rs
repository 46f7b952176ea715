use std::io::Cursor;

use duplex_rl::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use duplex_rl::scenario::{episodes_to_jsonl, generate_suite, parse_episodes, ScenarioKind, ScenarioParams};
use duplex_rl::trainer::{train, TrainConfig, TrainOutputs, TrainingEpisode, CURVE_HEADER, LOG_HEADER};
use duplex_rl::{Error, Policy, PolicyConfig};

fn small_params() -> ScenarioParams {
    ScenarioParams {
        horizon: 8.0,
        turn_taking_utterance: (1.0, 2.0),
        pause_first: (1.0, 1.5),
        pause_second: (0.5, 1.0),
        backchannel_utterance: (3.0, 4.0),
        ..Default::default()
    }
}

fn small_policy(seed: u64) -> Policy {
    Policy::init(PolicyConfig {
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        max_horizon: 128,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn jsonl_round_trip_keeps_every_field() {
    let p = small_params();
    let mut specs = Vec::new();
    for kind in ScenarioKind::ALL {
        specs.extend(generate_suite(kind, 5, 3, &p).unwrap());
    }
    let text = episodes_to_jsonl(&specs, p.delta_t);
    let loaded = parse_episodes(Cursor::new(text), p.delta_t, None).unwrap();
    assert_eq!(loaded.dropped, 0);
    assert_eq!(loaded.specs, specs);
}

#[test]
fn density_filter_drops_sparse_clips() {
    // 10 s clips: 5 s of speech is kept at exactly half, 1 s is dropped
    let line = |id: &str, speech_frames: usize| {
        let bits: Vec<u8> = (0..125).map(|t| u8::from(t < speech_frames)).collect();
        serde_json::json!({
            "id": id,
            "kind": "turn_taking",
            "horizon_frames": 125,
            "user_activity_bits": bits,
            "cue_time": 0.0,
            "eval_window": [0.0, 2.0],
        })
        .to_string()
    };
    let text = format!("{}\n\n{}\n", line("half", 62), line("sparse", 12));
    let half_frames = parse_episodes(Cursor::new(text.clone()), 0.08, Some(0.5)).unwrap();
    // 62 frames is 4.96 s, just under half of 10 s
    assert_eq!(half_frames.specs.len(), 0);
    assert_eq!(half_frames.dropped, 2);
    let text = format!("{}\n{}\n", line("half", 63), line("sparse", 12));
    let kept = parse_episodes(Cursor::new(text), 0.08, Some(0.5)).unwrap();
    assert_eq!(kept.specs.len(), 1);
    assert_eq!(kept.specs[0].id, "half");
    assert_eq!(kept.dropped, 1);
}

#[test]
fn malformed_episode_line_is_reported() {
    let err = parse_episodes(Cursor::new("\n{\"id\": 3}\n"), 0.08, None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let policy = small_policy(2);
    let path = dir.path().join("p.ckpt");
    save_checkpoint(&policy, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params(), policy.params());
    assert_eq!(loaded.config(), policy.config());

    let bytes = encode(&policy);
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(decode(&bad), Err(Error::Format(_))));
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn training_writes_log_curve_and_checkpoint() {
    let p = small_params();
    let mut specs = generate_suite(ScenarioKind::TurnTaking, 3, 5, &p).unwrap();
    specs.extend(generate_suite(ScenarioKind::Pause, 3, 6, &p).unwrap());
    let eps: Vec<TrainingEpisode> = specs.iter().map(|s| TrainingEpisode::from_spec(s, p.delta_t)).collect();
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 2,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs::in_dir(dir.path());
    let run = train(small_policy(3), &cfg, &eps, Some(&out), |_| {}).unwrap();
    let log = std::fs::read_to_string(&out.log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 1 + cfg.steps);
    let curve = std::fs::read_to_string(&out.curve).unwrap();
    assert_eq!(curve.lines().next(), Some(CURVE_HEADER));
    assert_eq!(curve.lines().count(), 1 + cfg.steps);
    assert_eq!(load_checkpoint(&out.checkpoint).unwrap().params(), run.policy.params());
    assert_ne!(run.policy.params(), small_policy(3).params());
}

#[test]
fn ten_records_four_sparse() {
    let record = |i: usize, frames: usize| {
        let bits: Vec<u8> = (0..100).map(|t| u8::from(t < frames)).collect();
        serde_json::json!({
            "id": format!("r{i}"),
            "kind": "backchannel",
            "horizon_frames": 100,
            "user_activity_bits": bits,
            "cue_time": 0.0,
            "eval_window": [0.0, 1.0],
        })
        .to_string()
    };
    let speech = [60, 10, 50, 80, 49, 100, 0, 55, 20, 70];
    let text: String = speech.iter().enumerate().map(|(i, &f)| record(i, f) + "\n").collect();
    let loaded = parse_episodes(Cursor::new(text), 0.08, Some(0.5)).unwrap();
    assert_eq!(loaded.dropped, 4);
    let ids: Vec<&str> = loaded.specs.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["r0", "r2", "r3", "r5", "r7", "r9"]);
}

#[test]
fn empty_file_and_reversed_interval() {
    let empty = parse_episodes(Cursor::new(""), 0.08, Some(0.5)).unwrap();
    assert!(empty.specs.is_empty());
    assert_eq!(empty.dropped, 0);
    let line = serde_json::json!({
        "id": "x",
        "kind": "pause",
        "horizon_frames": 2,
        "user_activity_bits": [0, 0],
        "cue_time": 0.0,
        "eval_window": [0.1, 0.0],
    });
    let err = parse_episodes(Cursor::new(line.to_string()), 0.08, None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}
