//! Scratch probe for end-to-end ordering and robustness at acceptance scale.
use std::time::Instant;

use fnfm_core::pipeline::{
    cmd_ablate, cmd_evaluate, cmd_robustness, cmd_simulate, cmd_train_cfm, cmd_train_experts,
    cmd_train_vae, Ablation, ExperimentConfig, RobustnessMode,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let run_robustness = args.iter().any(|a| a == "--robustness");
    let run_ablate = args.iter().any(|a| a == "--ablate");
    let nums: Vec<f64> = args[1..].iter().filter_map(|a| a.parse().ok()).collect();
    let text = std::fs::read_to_string("/root/scratch/collab.toml").unwrap();
    let mut cfg: ExperimentConfig = toml::from_str(&text).unwrap();
    cfg.out_dir = std::path::PathBuf::from("/root/scratch/collab-out");
    if nums.len() >= 4 {
        cfg.cfm.epochs = nums[0] as usize;
        cfg.cfm.d_model = nums[1] as usize;
        cfg.cfm.heads = nums[2] as usize;
        cfg.cfm.lr = nums[3];
    }
    if nums.len() >= 5 {
        cfg.cfm.n_steps = nums[4] as usize;
    }
    cfg.validate().unwrap();

    if !cfg.dataset_dir().join("manifest").exists() {
        cmd_simulate(&cfg, false).unwrap();
    }
    let have = std::fs::read_dir(cfg.experts_dir())
        .map(|d| {
            d.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().map_or(false, |x| x == "ckpt"))
                .count()
        })
        .unwrap_or(0);
    if have < 19 {
        let t0 = Instant::now();
        cmd_train_experts(&cfg, 1, false).unwrap();
        println!("experts: {:.1}s", t0.elapsed().as_secs_f64());
    }
    if !cfg.vae_path().exists() {
        let t0 = Instant::now();
        cmd_train_vae(&cfg).unwrap();
        println!("vae: {:.1}s", t0.elapsed().as_secs_f64());
    }
    if !cfg.cfm_path().exists() {
        let t0 = Instant::now();
        cmd_train_cfm(&cfg).unwrap();
        println!("cfm: {:.1}s", t0.elapsed().as_secs_f64());
    }
    let t0 = Instant::now();
    let table = cmd_evaluate(&cfg).unwrap();
    println!("evaluate: {:.1}s", t0.elapsed().as_secs_f64());
    for method in ["fnfm", "one_per_env"] {
        for split in ["in_domain", "out_domain"] {
            if let Some((m, s)) = table.mean_std(method, split) {
                println!("{method} {split}: {m:.5} +- {s:.5}");
            }
        }
    }
    let (o, _) = table.mean_std("one_per_env", "in_domain").unwrap();
    let (f, _) = table.mean_std("fnfm", "in_domain").unwrap();
    println!("c7 part: oracle {o:.5} <= fnfm {f:.5} (x{:.2}) <= 2x? {}", f / o, o <= f && f <= 2.0 * o);
    if run_ablate {
        let t0 = Instant::now();
        let ab = cmd_ablate(&cfg, Ablation::Condition).unwrap();
        println!("ablate condition: {:.1}s", t0.elapsed().as_secs_f64());
        let (u, _) = ab.mean_std("unconditional", "in_domain").unwrap();
        println!("c7 full: fnfm {f:.5} < uncond {u:.5}? {}", f < u);
    }

    if run_robustness {
        let t0 = Instant::now();
        let rows = cmd_robustness(&cfg, RobustnessMode::CoeffNoise, &[0.0, 0.1, 0.2]).unwrap();
        let mean_at = |l: f64| {
            let v: Vec<f64> = rows.iter().filter(|r| r.level == l).map(|r| r.rmse).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let curve: Vec<f64> = [0.0, 0.1, 0.2].iter().map(|&l| mean_at(l)).collect();
        println!(
            "coeff_noise: {curve:?} ratio {:.3} ({:.1}s)",
            curve[2] / curve[0],
            t0.elapsed().as_secs_f64()
        );
        let t0 = Instant::now();
        let dr = cmd_robustness(&cfg, RobustnessMode::DataRatio, &[0.25, 1.0]).unwrap();
        let dmean = |l: f64| {
            let v: Vec<f64> = dr.iter().filter(|r| r.level == l).map(|r| r.rmse).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        println!(
            "data_ratio: 25% {:.5} vs 100% {:.5} (x{:.2}) ({:.1}s)",
            dmean(0.25),
            dmean(1.0),
            dmean(0.25) / dmean(1.0),
            t0.elapsed().as_secs_f64()
        );
    }
}
