//! Train on a mixed turn-taking/pause suite and report held-out behavior.
//!
//! usage: toy_run [seed] [steps] [objective]

use std::time::Instant;

use duplex_rl::evaluate::{evaluate_specs, mean_total_reward, EVAL_TEMPERATURE};
use duplex_rl::metrics::{takeover_rate, EpisodeResult};
use duplex_rl::scenario::{generate_suite, ScenarioKind, ScenarioParams};
use duplex_rl::trainer::{train, TrainConfig, TrainingEpisode};
use duplex_rl::{Policy, PolicyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(Ok(0), |s| s.parse())?;
    let steps: usize = args.get(2).map_or(Ok(200), |s| s.parse())?;
    let objective = args.get(3).map_or(Ok(duplex_rl::trainer::Objective::Aspirin), |s| s.parse())?;
    let params = ScenarioParams::default();
    let mut train_specs = generate_suite(ScenarioKind::TurnTaking, 64, 1, &params)?;
    train_specs.extend(generate_suite(ScenarioKind::Pause, 64, 2, &params)?);
    let mut held = generate_suite(ScenarioKind::TurnTaking, 64, 1001, &params)?;
    held.extend(generate_suite(ScenarioKind::Pause, 64, 1002, &params)?);
    let episodes: Vec<TrainingEpisode> = train_specs.iter().map(|s| TrainingEpisode::from_spec(s, params.delta_t)).collect();

    let pcfg = PolicyConfig {
        embed_dim: 32,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        seed,
        ..Default::default()
    };
    let cfg = TrainConfig {
        steps,
        seed,
        objective,
        learning_rate: std::env::var("LR").map_or(Ok(1e-3), |s| s.parse())?,
        batch_size: std::env::var("BATCH").map_or(Ok(16), |s| s.parse())?,
        group_size: std::env::var("GROUP").map_or(Ok(2), |s| s.parse())?,
        ..Default::default()
    };
    let init = Policy::init(pcfg.clone())?;
    let part = cfg.partition(pcfg.vocab_size)?;
    let report = |p: &Policy, tag: &str| -> Result<(), Box<dyn std::error::Error>> {
        for temp in [EVAL_TEMPERATURE, 1.0] {
            let ev = evaluate_specs(p, &held, &part, &cfg.reward, temp, 7)?;
            let of = |k| -> Vec<EpisodeResult> { ev.iter().filter(|e| e.result.kind == k).map(|e| e.result.clone()).collect() };
            println!(
                "{tag} T={temp}: mean r_total {:.3}  tt TOR {:.3}  pause TOR {:.3}",
                mean_total_reward(&ev),
                takeover_rate(&of(ScenarioKind::TurnTaking))?,
                takeover_rate(&of(ScenarioKind::Pause))?
            );
        }
        Ok(())
    };
    report(&init, "init")?;
    let t0 = Instant::now();
    let run = train(init, &cfg, &episodes, None, |r| {
        if r.step % std::env::var("EVERY").map_or(100, |s| s.parse::<usize>().unwrap()) == 0 {
            println!(
                "step {:4} r_total {:.3} r_int {:.3} r_re {:.3} kl {:.2e} [{:.1}s]",
                r.step,
                r.mean_r_total,
                r.mean_r_int,
                r.mean_r_re,
                r.mean_kl,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("trained {steps} steps in {:.1}s", t0.elapsed().as_secs_f64());
    report(&run.policy, "final")?;
    if std::env::var_os("DUMP").is_some() {
        for spec in held.iter().step_by(16) {
            let ev = evaluate_specs(&run.policy, std::slice::from_ref(spec), &part, &cfg.reward, 1.0, 3)?;
            let bits = spec.user_bits(params.delta_t);
            let line = |f: &dyn Fn(usize) -> bool| (0..bits.len()).map(|t| if f(t) { '#' } else { '.' }).collect::<String>();
            println!("{} {:?}", spec.id, ev[0].reward.r_total);
            println!("  user  {}", line(&|t| bits[t] == 1));
            println!("  model {}", line(&|t| !part.is_pad(ev[0].tokens[t])));
        }
    }
    Ok(())
}
