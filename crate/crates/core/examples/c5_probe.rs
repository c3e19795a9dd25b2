//! Scratch probe for VAE reconstruction fidelity at acceptance scale.
use std::time::Instant;

use fnfm_core::container::Checkpoint;
use fnfm_core::dataset::load_dataset;
use fnfm_core::dynamics::Split;
use fnfm_core::forecaster::{eval_window_starts, evaluate_rmse};
use fnfm_core::nn::layers::ParamStore;
use fnfm_core::pipeline::{cmd_simulate, cmd_train_experts, cmd_train_vae, forecaster_template, ExperimentConfig};
use fnfm_core::tokenizer::derive_schema;
use fnfm_core::util::seeded_rng;
use fnfm_core::vae::{decode_latent, encode_payload, init_vae, TokenStats};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d_z: usize = args[1].parse().unwrap();
    let d_model: usize = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let lr: f64 = args[4].parse().unwrap();
    let text = std::fs::read_to_string("/root/scratch/collab.toml").unwrap();
    let mut cfg: ExperimentConfig = toml::from_str(&text).unwrap();
    cfg.out_dir = std::path::PathBuf::from("/root/scratch/collab-out");
    cfg.vae.d_z = d_z;
    cfg.vae.d_model = d_model;
    cfg.vae.epochs = epochs;
    cfg.vae.lr = lr;
    cfg.validate().unwrap();

    let t0 = Instant::now();
    if !cfg.dataset_dir().join("manifest").exists() {
        cmd_simulate(&cfg, false).unwrap();
    }
    println!("simulate: {:.1}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let have = std::fs::read_dir(cfg.experts_dir())
        .map(|d| d.filter_map(|e| e.ok()).filter(|e| e.path().extension().map_or(false, |x| x == "ckpt")).count())
        .unwrap_or(0);
    if have < 19 {
        cmd_train_experts(&cfg, 1, false).unwrap();
        println!("experts: {:.1}s", t0.elapsed().as_secs_f64());
    } else {
        println!("experts: cached ({have})");
    }
    let t0 = Instant::now();
    cmd_train_vae(&cfg).unwrap();
    println!("vae: {:.1}s", t0.elapsed().as_secs_f64());

    let ds = load_dataset(&cfg.dataset_dir()).unwrap();
    let template = forecaster_template(&cfg.forecaster).unwrap();
    let schema = derive_schema(&template).unwrap();
    let ckpt = Checkpoint::load_kind(&cfg.vae_path(), "vae").unwrap();
    let mut vae_store = ParamStore::new();
    let mut rng = seeded_rng(0, "vae-template");
    init_vae(&mut vae_store, &cfg.vae, &schema, &mut rng).unwrap();
    ckpt.into_store(&mut vae_store).unwrap();
    let stats = TokenStats::from_metadata(ckpt.meta("token_stats").unwrap()).unwrap();

    let mut orig_sum = 0.0;
    let mut recon_sum = 0.0;
    let mut count = 0usize;
    for env in ds.envs_in_split(Split::Train) {
        let expert = Checkpoint::load_kind(&cfg.expert_path(&env.id), "forecaster").unwrap();
        let mut store = template.clone();
        expert.into_store(&mut store).unwrap();
        let payload = store.flat_payload();
        let traj = ds.load_trajectory(&env.id).unwrap();
        let starts = eval_window_starts(&cfg.forecaster, &traj, ds.train_time_frac);
        let orig = evaluate_rmse(&cfg.forecaster, &store, &ds.graph, &traj, &starts).unwrap();
        let z = encode_payload(&cfg.vae, &schema, &vae_store, &stats, &payload).unwrap();
        let rp = decode_latent(&cfg.vae, &schema, &vae_store, &stats, &z).unwrap();
        let mut rs = template.clone();
        rs.load_flat_payload(&rp).unwrap();
        let recon = evaluate_rmse(&cfg.forecaster, &rs, &ds.graph, &traj, &starts).unwrap();
        println!("  env {}: orig {orig:.5} recon {recon:.5}", env.id);
        orig_sum += orig;
        recon_sum += recon;
        count += 1;
    }
    println!(
        "mean orig {:.5} recon {:.5} rel {:+.1}%",
        orig_sum / count as f64,
        recon_sum / count as f64,
        100.0 * (recon_sum - orig_sum) / orig_sum
    );
}
