use fedmlr_core::config::{ModelChoice, RunConfig};
use fedmlr_core::runner::execute_in_memory;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    for (strength, evals) in [(1.0, 400usize), (0.75, 600)] {
        let mut deg_f = vec![]; let mut deg_b = vec![];
        for seed in [1u64, 2, 3] {
            for model in [ModelChoice::Fedmpt, ModelChoice::Baseline] {
                let mut maps = vec![];
                for t in [10.0, 40.0, 100.0] {
                    let mut cfg = RunConfig::from_toml("").unwrap();
                    cfg.seed = seed;
                    cfg.model = model;
                    cfg.generator.train_samples = 900;
                    cfg.generator.eval_samples = evals;
                    cfg.encoder.alignment_strength = strength;
                    cfg.fed.rounds = 40;
                    cfg.eval_interval = 40;
                    cfg.partition.t_percent = t;
                    cfg.hyper.lr = 0.03;
                    let (r, _, _) = execute_in_memory(&cfg).unwrap();
                    maps.push(r.last().unwrap().map);
                }
                let deg = maps[0] - maps[2];
                match model { ModelChoice::Fedmpt => deg_f.push(deg), _ => deg_b.push(deg) }
                println!("s={strength} seed={seed} {model:?}: t10={:.4} t40={:.4} t100={:.4}", maps[0], maps[1], maps[2]);
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!("== s={strength}: c6 fedmpt={:.4} baseline={:.4} ==", mean(&deg_f), mean(&deg_b));
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
