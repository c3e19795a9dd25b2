//! Scratch probe: does the raw expert weight corpus organize by gamma?
use fnfm_core::container::Checkpoint;
use fnfm_core::dataset::load_dataset;
use fnfm_core::dynamics::Split;
use fnfm_core::pipeline::{cmd_simulate, cmd_train_experts, forecaster_template, ExperimentConfig, Pca2};

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
    cfg.out_dir = std::path::PathBuf::from(
        std::env::args().nth(1).unwrap_or("/root/scratch/collab-out".into()),
    );
    cfg.validate().unwrap();
    if !cfg.dataset_dir().join("manifest").exists() {
        cmd_simulate(&cfg, false).unwrap();
    }
    let have = std::fs::read_dir(cfg.experts_dir())
        .map(|d| d.filter_map(|e| e.ok()).filter(|e| e.path().extension().map_or(false, |x| x == "ckpt")).count())
        .unwrap_or(0);
    if have < 19 {
        let t0 = std::time::Instant::now();
        cmd_train_experts(&cfg, 1, false).unwrap();
        println!("experts: {:.1}s", t0.elapsed().as_secs_f64());
    }
    let ds = load_dataset(&cfg.dataset_dir()).unwrap();
    let template = forecaster_template(&cfg.forecaster).unwrap();

    let mut payloads = Vec::new();
    let mut gammas = Vec::new();
    for env in ds.envs_in_split(Split::Train) {
        let ckpt = Checkpoint::load_kind(&cfg.expert_path(&env.id), "forecaster").unwrap();
        let mut store = template.clone();
        ckpt.into_store(&mut store).unwrap();
        payloads.push(store.flat_payload());
        gammas.push(env.coeff("gamma").unwrap());
    }
    let pca = Pca2::fit(&payloads).unwrap();
    let pc1: Vec<f64> = payloads.iter().map(|p| pca.project(p).0).collect();
    let pc2: Vec<f64> = payloads.iter().map(|p| pca.project(p).1).collect();
    println!("explained: {:?}", pca.explained);
    println!("spearman(pc1, gamma) = {:.3}", spearman(&pc1, &gammas));
    println!("spearman(pc2, gamma) = {:.3}", spearman(&pc2, &gammas));

    // neighbor smoothness: mean weight distance between gamma-adjacent
    // experts vs random pairs
    let mut idx: Vec<usize> = (0..gammas.len()).collect();
    idx.sort_by(|&a, &b| gammas[a].partial_cmp(&gammas[b]).unwrap());
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut adj = 0.0;
    for w in idx.windows(2) {
        adj += dist(&payloads[w[0]], &payloads[w[1]]);
    }
    adj /= (idx.len() - 1) as f64;
    let mut far = 0.0;
    let mut nf = 0;
    for i in 0..idx.len() {
        for j in (i + 5)..idx.len() {
            far += dist(&payloads[idx[i]], &payloads[idx[j]]);
            nf += 1;
        }
    }
    far /= nf as f64;
    println!("adjacent-gamma dist {adj:.4} vs distant-gamma dist {far:.4} (ratio {:.3})", adj / far);
}
