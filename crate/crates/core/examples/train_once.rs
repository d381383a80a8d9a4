//! Trains one controller with the default configuration and prints the
//! learning curve and the greedy response from `[0.2, 1.8]`.
//!
//! `cargo run --release --example train_once -- [seed] [episodes] [config.toml]`

use std::time::Instant;

use nafchaos::harness::{self, TrainConfig};
use nafchaos::pipeline::Config;
use nafchaos::{GumowskiMira, RawState, Region};

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let episodes: usize = args.next().map_or(100, |s| s.parse().expect("episodes"));
    let base = match args.next() {
        Some(path) => {
            let text = std::fs::read_to_string(&path).expect("config file");
            Config::from_toml(&text).expect("config").train
        }
        None => TrainConfig::default(),
    };
    let map = GumowskiMira::default();
    let region = Region::new(RawState(vec![0.994, 0.001]), 1.0).unwrap();
    let cfg = TrainConfig {
        seed,
        episodes,
        ..base
    };
    let start = Instant::now();
    let trace = std::env::var("TRACE").is_ok();
    let result = harness::train_with(&map, &region, &cfg, |log, run| {
        if trace {
            let c = nafchaos::Controller { region: region.clone(), params: run.learner.main.clone() };
            let t = nafchaos::Controller { region: region.clone(), params: run.learner.target.clone() };
            let end = |c: &nafchaos::Controller| {
                let (rows, _) = harness::evaluate(&map, c, &RawState(vec![0.2, 1.8]), 10800);
                let l = rows.last().unwrap();
                format!("[{:8.4} {:8.4}] u={:7.4}", l.x[0], l.x[1], l.u[0])
            };
            println!("ep {:3} r {:9.5} main {} target {}", log.episode, log.mean_reward, end(&c), end(&t));
            return;
        }
        println!(
            "episode {:3}  mean reward {:9.5}  in-region {:5}  loss {:.5}  [{:.1}s]",
            log.episode,
            log.mean_reward,
            log.steps_in_region,
            log.mean_loss,
            start.elapsed().as_secs_f64()
        );
    })
    .expect("training");
    let mut target_ctl = result.controller.clone();
    target_ctl.params = result.target.clone();
    report("target", &map, &target_ctl);
    let (rows, err) = harness::evaluate(&map, &result.controller, &RawState(vec![0.2, 1.8]), 10800);
    let worst = rows[rows.len().saturating_sub(100)..]
        .iter()
        .map(|r| (r.x[0] - 1.0).abs().max(r.x[1].abs()))
        .fold(0.0, f64::max);
    let last = rows.last().unwrap();
    println!("final x = {:?}, u = {:?}, last-100 max dev = {worst:.2e}, err = {err:?}", last.x, last.u);
}

fn report(label: &str, map: &GumowskiMira, c: &nafchaos::Controller) {
    let (rows, _) = harness::evaluate(map, c, &RawState(vec![0.2, 1.8]), 10800);
    let last = rows.last().unwrap();
    println!("{label}: final x = {:?}, u = {:?}", last.x, last.u);
}
