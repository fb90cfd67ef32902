//! Search ratio with and without the search penalty on the synthetic world.

use gmner_agent::reward::RewardConfig;
use gmner_agent::synthetic::ablation::{train, AblationConfig};
use gmner_agent::synthetic::World;
use gmner_agent::Exec;

fn main() {
    let world = World::standard();
    let cfg = AblationConfig::default();
    let default = RewardConfig::default();
    let no_penalty = RewardConfig { lambda_search: 0.0, ..default };
    println!("seed  sr(λ=0)  sr(default)  p(λ=0)  p(default)");
    for seed in 0..5 {
        let a = train(&world, &no_penalty, &cfg, seed, Exec::default()).expect("run");
        let b = train(&world, &default, &cfg, seed, Exec::default()).expect("run");
        println!(
            "{seed:>4}  {:>7.3}  {:>11.3}  {:>6.3}  {:>10.3}",
            a.tail_ratio(10),
            b.tail_ratio(10),
            a.final_search_prob,
            b.final_search_prob
        );
    }
}
