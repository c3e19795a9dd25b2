//! Scratch diagnostics: latent organization by coefficient and
//! generation fidelity on training conditions.
use fnfm_core::dataset::load_dataset;
use fnfm_core::dynamics::Split;
use fnfm_core::forecaster::{eval_window_starts, evaluate_rmse};
use fnfm_core::pipeline::{cmd_export_latents, load_generative, ExperimentConfig};

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

fn main() {
    let text = std::fs::read_to_string("/root/scratch/collab.toml").unwrap();
    let mut cfg: ExperimentConfig = toml::from_str(&text).unwrap();
    cfg.out_dir = std::path::PathBuf::from("/root/scratch/collab-out");
    cfg.validate().unwrap();
    let ds = load_dataset(&cfg.dataset_dir()).unwrap();

    let (rows, pca) = cmd_export_latents(&cfg).unwrap();
    println!("explained: {:?}", pca.explained);
    let mut pc1 = Vec::new();
    let mut gamma = Vec::new();
    for r in rows.iter().filter(|r| r.role == "end") {
        pc1.push(r.pc1);
        gamma.push(ds.env(&r.env_id).unwrap().coeff("gamma").unwrap());
    }
    println!("end-point spearman(pc1, gamma) = {:.3}", spearman(&pc1, &gamma));

    // start points (encoded experts) for train envs only
    let mut spc1 = Vec::new();
    let mut sg = Vec::new();
    for r in rows.iter().filter(|r| r.role == "start") {
        spc1.push(r.pc1);
        sg.push(ds.env(&r.env_id).unwrap().coeff("gamma").unwrap());
    }
    println!(
        "encoded-expert spearman(pc1, gamma) = {:.3} over {}",
        spearman(&spc1, &sg),
        spc1.len()
    );

    // regenerate training experts from their own conditions
    let gen = load_generative(&cfg, &ds).unwrap();
    let mut expert_sum = 0.0;
    let mut gen_sum = 0.0;
    let mut n = 0;
    for env in ds.envs_in_split(Split::Train).into_iter().take(8) {
        let traj = ds.load_trajectory(&env.id).unwrap();
        let starts = eval_window_starts(&cfg.forecaster, &traj, ds.train_time_frac);
        let e = env.coeff_vector();
        let (payload, _) = gen.generate_payload(&e, 0).unwrap();
        let mut store = fnfm_core::pipeline::forecaster_template(&cfg.forecaster).unwrap();
        store.load_flat_payload(&payload).unwrap();
        let g_rmse = evaluate_rmse(&cfg.forecaster, &store, &ds.graph, &traj, &starts).unwrap();
        let expert = fnfm_core::container::Checkpoint::load_kind(
            &cfg.expert_path(&env.id),
            "forecaster",
        )
        .unwrap();
        let mut es = fnfm_core::pipeline::forecaster_template(&cfg.forecaster).unwrap();
        expert.into_store(&mut es).unwrap();
        let e_rmse = evaluate_rmse(&cfg.forecaster, &es, &ds.graph, &traj, &starts).unwrap();
        println!("  {}: expert {e_rmse:.5} generated {g_rmse:.5}", env.id);
        expert_sum += e_rmse;
        gen_sum += g_rmse;
        n += 1;
    }
    println!(
        "train-condition generation: experts {:.5} generated {:.5} (x{:.2})",
        expert_sum / n as f64,
        gen_sum / n as f64,
        gen_sum / expert_sum
    );
}
