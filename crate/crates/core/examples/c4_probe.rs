//! Scratch probe for the expert-vs-persistence acceptance setup.
use fnfm_core::dynamics::{
    build_environment_grid, simulate_environment, CoeffGrid, DatasetSpec, DynamicsKind,
};
use fnfm_core::forecaster::{
    eval_window_starts, evaluate_rmse, persistence_baseline, train_expert, ForecasterConfig,
};
use fnfm_core::graph::{generate_ba, spectral_radius};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args[1].parse().unwrap();
    let gamma: f64 = args[2].parse().unwrap();
    let dt: f64 = args[3].parse().unwrap();
    let epochs: usize = args[4].parse().unwrap();
    let lr: f64 = args[5].parse().unwrap();
    let channels: usize = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(8);
    let blocks: usize = args.get(7).map(|v| v.parse().unwrap()).unwrap_or(2);
    let g = generate_ba(30, 2, 5).unwrap();
    println!("lambda_max = {:.3}", spectral_radius(&g).unwrap());
    let spec = DatasetSpec {
        name: "probe".into(),
        graph: g.clone(),
        kind: DynamicsKind::Sis,
        coeffs: vec![CoeffGrid::fixed("beta", beta), CoeffGrid::fixed("gamma", gamma)],
        steps: 200,
        dt,
        x0_range: (0.01, 0.1),
        hill_damping: 1.0,
        train_time_frac: 0.7,
        split_fractions: (1.0, 0.0, 0.0),
    };
    let envs = build_environment_grid(&spec, 9).unwrap();
    let traj = simulate_environment(&spec, &envs[0]).unwrap();
    let n = 30;
    for s in [0usize, 50, 100, 140, 170, 199] {
        let f = traj.frame(s);
        let m: f64 = f.iter().sum::<f64>() / n as f64;
        println!("step {s}: mean state {m:.4}");
    }
    println!("traj mean {:.4} std {:.4}", traj.mean, traj.std);
    let cfg = ForecasterConfig {
        window: 20,
        horizon: 20,
        channels,
        kernel: 3,
        blocks,
        epochs,
        batch: 32,
        lr,
        stride: 1,
    };
    let starts = eval_window_starts(&cfg, &traj, spec.train_time_frac);
    println!("eval starts: {:?}", (starts.first(), starts.last(), starts.len()));
    let persist = persistence_baseline(&cfg, &traj, &starts).unwrap();
    println!("persistence rmse {persist:.6}");
    for seed in 0..3u64 {
        let t0 = std::time::Instant::now();
        let (store, rep) =
            train_expert(&cfg, &g, &traj, spec.train_time_frac, seed, seed).unwrap();
        let rmse = evaluate_rmse(&cfg, &store, &g, &traj, &starts).unwrap();
        let tr_starts: Vec<usize> = (0..=100).step_by(10).collect();
        let tr_rmse = evaluate_rmse(&cfg, &store, &g, &traj, &tr_starts).unwrap();
        let tr_persist = persistence_baseline(&cfg, &traj, &tr_starts).unwrap();
        println!("  train-window rmse {tr_rmse:.6} vs persistence {tr_persist:.6}");
        println!(
            "seed {seed}: model {rmse:.6} ratio {:.3} (first loss {:.4}, best {:.6}, windows {}, {:.1}s)",
            rmse / persist,
            rep.first_epoch_loss,
            rep.best_epoch_loss,
            rep.train_windows,
            t0.elapsed().as_secs_f64()
        );
    }
}
