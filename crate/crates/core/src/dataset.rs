//! On-disk dataset layout: a text manifest, the graph edge list, and one raw
//! little-endian f64 file per environment trajectory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dynamics::{
    simulate_environment, build_environment_grid, DatasetSpec, DynamicsKind, Environment, Split,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::graph::{load_edge_list, save_edge_list, Graph};
use crate::util::format_f64;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to reload a simulated dataset from a directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub kind: DynamicsKind,
    pub dt: f64,
    pub steps: usize,
    pub nodes: usize,
    pub train_time_frac: f64,
    pub graph: Graph,
    pub envs: Vec<Environment>,
    /// Per-environment standardization stats and clamp accounting,
    /// keyed by env id.
    pub stats: BTreeMap<String, EnvStats>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStats {
    pub mean: f64,
    pub std: f64,
    pub clamped_mass: f64,
}

impl Dataset {
    pub fn coeff_names(&self) -> Vec<String> {
        match self.envs.first() {
            Some(e) => e.coeffs.keys().cloned().collect(),
            None => vec![],
        }
    }

    /// Per-coefficient (min, max) over all environments, used to normalize
    /// conditioning vectors.
    pub fn coeff_ranges(&self) -> BTreeMap<String, (f64, f64)> {
        let mut out: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for env in &self.envs {
            for (k, v) in &env.coeffs {
                let e = out.entry(k.clone()).or_insert((*v, *v));
                e.0 = e.0.min(*v);
                e.1 = e.1.max(*v);
            }
        }
        out
    }

    pub fn env(&self, id: &str) -> Result<&Environment> {
        self.envs
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Artifact(format!("environment {id} not in dataset")))
    }

    pub fn envs_in_split(&self, split: Split) -> Vec<&Environment> {
        self.envs.iter().filter(|e| e.split == split).collect()
    }

    /// Load one trajectory from its binary file.
    pub fn load_trajectory(&self, id: &str) -> Result<Trajectory> {
        let stats = self
            .stats
            .get(id)
            .ok_or_else(|| Error::Artifact(format!("environment {id} not in manifest")))?;
        let path = self.dir.join(format!("{id}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expect = self.steps * self.nodes * 8;
        if bytes.len() != expect {
            return Err(Error::Artifact(format!(
                "{} has {} bytes, expected {expect}",
                path.display(),
                bytes.len()
            )));
        }
        let states: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::Artifact(format!("{} contains non-finite values", path.display())));
        }
        Ok(Trajectory {
            env_id: id.to_string(),
            dt: self.dt,
            states,
            steps: self.steps,
            nodes: self.nodes,
            mean: stats.mean,
            std: stats.std,
            clamped_mass: stats.clamped_mass,
        })
    }
}

/// Simulate every environment in the grid and write the dataset directory.
/// Refuses to overwrite an existing manifest unless `force`.
pub fn simulate_dataset(spec: &DatasetSpec, seed: u64, dir: &Path, force: bool) -> Result<Dataset> {
    let manifest_path = dir.join("manifest");
    if manifest_path.exists() && !force {
        return Err(Error::Artifact(format!(
            "{} already exists (use --force to overwrite)",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let envs = build_environment_grid(spec, seed)?;
    let mut stats = BTreeMap::new();
    for env in &envs {
        let traj = simulate_environment(spec, env)?;
        let path = dir.join(format!("{}.bin", env.id));
        let mut bytes = Vec::with_capacity(traj.states.len() * 8);
        for v in &traj.states {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        stats.insert(
            env.id.clone(),
            EnvStats { mean: traj.mean, std: traj.std, clamped_mass: traj.clamped_mass },
        );
    }
    save_edge_list(&spec.graph, &dir.join("graph.edges"))?;

    let mut m = String::new();
    m.push_str(&format!("fnfm-dataset v{MANIFEST_VERSION}\n"));
    m.push_str(&format!("name = {}\n", spec.name));
    m.push_str(&format!("kind = {}\n", spec.kind.as_str()));
    m.push_str(&format!("nodes = {}\n", spec.graph.n));
    m.push_str(&format!("steps = {}\n", spec.steps));
    m.push_str(&format!("dt = {}\n", format_f64(spec.dt)));
    m.push_str(&format!("train_time_frac = {}\n", format_f64(spec.train_time_frac)));
    for env in &envs {
        let s = &stats[&env.id];
        let coeffs: Vec<String> = env
            .coeffs
            .iter()
            .map(|(k, v)| format!("{k}={}", format_f64(*v)))
            .collect();
        m.push_str(&format!(
            "env {} split={} x0_seed={} mean={} std={} clamped={} {}\n",
            env.id,
            env.split.as_str(),
            env.x0_seed,
            format_f64(s.mean),
            format_f64(s.std),
            format_f64(s.clamped_mass),
            coeffs.join(" "),
        ));
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(m.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;

    load_dataset(dir)
}

/// Parse the manifest and edge list back into a `Dataset`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty manifest".into() })?;
    match header.strip_prefix("fnfm-dataset v") {
        Some(v) if v.trim() == MANIFEST_VERSION.to_string() => {}
        Some(v) => {
            return Err(Error::Artifact(format!(
                "unsupported dataset manifest version {v} (reader supports v{MANIFEST_VERSION})"
            )))
        }
        None => {
            return Err(Error::Parse { line: 1, msg: format!("bad manifest header '{header}'") })
        }
    }

    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut envs = Vec::new();
    let mut stats = BTreeMap::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        if let Some(rest) = line.strip_prefix("env ") {
            let mut parts = rest.split_whitespace();
            let id = parts
                .next()
                .ok_or_else(|| Error::Parse { line: lineno, msg: "env line missing id".into() })?
                .to_string();
            let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
            for p in parts {
                let (k, v) = p.split_once('=').ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("expected key=value, got '{p}'"),
                })?;
                kv.insert(k, v);
            }
            let take_f = |kv: &BTreeMap<&str, &str>, key: &str| -> Result<f64> {
                kv.get(key)
                    .ok_or_else(|| Error::Parse { line: lineno, msg: format!("missing {key}") })?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line: lineno, msg: format!("bad {key}: {e}") })
            };
            let split = Split::parse(
                kv.get("split")
                    .ok_or_else(|| Error::Parse { line: lineno, msg: "missing split".into() })?,
            )?;
            let x0_seed: u64 = kv
                .get("x0_seed")
                .ok_or_else(|| Error::Parse { line: lineno, msg: "missing x0_seed".into() })?
                .parse()
                .map_err(|e| Error::Parse { line: lineno, msg: format!("bad x0_seed: {e}") })?;
            let mean = take_f(&kv, "mean")?;
            let std = take_f(&kv, "std")?;
            let clamped = take_f(&kv, "clamped")?;
            let mut coeffs = BTreeMap::new();
            for (k, v) in &kv {
                if !matches!(*k, "split" | "x0_seed" | "mean" | "std" | "clamped") {
                    let val: f64 = v.parse().map_err(|e| Error::Parse {
                        line: lineno,
                        msg: format!("bad coefficient {k}: {e}"),
                    })?;
                    coeffs.insert(k.to_string(), val);
                }
            }
            stats.insert(id.clone(), EnvStats { mean, std, clamped_mass: clamped });
            envs.push(Environment {
                id,
                kind: DynamicsKind::Sis, // patched after fields are read
                coeffs,
                split,
                x0_seed,
            });
        } else if let Some((k, v)) = line.split_once(" = ") {
            fields.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(Error::Parse { line: lineno, msg: format!("unrecognized line '{line}'") });
        }
    }

    let field = |key: &str| -> Result<&String> {
        fields.get(key).ok_or_else(|| Error::Artifact(format!("manifest missing field {key}")))
    };
    let kind = DynamicsKind::parse(field("kind")?)?;
    for e in &mut envs {
        e.kind = kind;
        e.validate()?;
    }
    let parse_num = |key: &str| -> Result<f64> {
        field(key)?
            .parse::<f64>()
            .map_err(|e| Error::Artifact(format!("manifest field {key}: {e}")))
    };
    let nodes = parse_num("nodes")? as usize;
    let steps = parse_num("steps")? as usize;
    let graph = load_edge_list(&dir.join("graph.edges"))?;
    if graph.n != nodes {
        return Err(Error::Artifact(format!(
            "graph has {} nodes but manifest says {nodes}",
            graph.n
        )));
    }
    if envs.is_empty() {
        return Err(Error::Artifact("dataset manifest lists no environments".into()));
    }
    Ok(Dataset {
        name: field("name")?.clone(),
        kind,
        dt: parse_num("dt")?,
        steps,
        nodes,
        train_time_frac: parse_num("train_time_frac")?,
        graph,
        envs,
        stats,
        dir: dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::CoeffGrid;
    use crate::graph::generate_regular;

    fn toy_spec() -> DatasetSpec {
        DatasetSpec {
            name: "toy".into(),
            graph: generate_regular(6, 2, 0).unwrap(),
            kind: DynamicsKind::Sis,
            coeffs: vec![
                CoeffGrid::fixed("beta", 0.3),
                CoeffGrid::ranges("gamma", (0.2, 0.4), 10, Some((0.5, 0.6)), 3).unwrap(),
            ],
            steps: 20,
            dt: 0.5,
            x0_range: (0.01, 0.1),
            hill_damping: 1.0,
            train_time_frac: 0.8,
            split_fractions: (0.7, 0.1, 0.2),
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = toy_spec();
        let ds = simulate_dataset(&spec, 7, tmp.path(), false).unwrap();
        let ds2 = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.envs, ds2.envs);
        assert_eq!(ds.stats, ds2.stats);
        assert_eq!(ds.kind, DynamicsKind::Sis);
        assert_eq!(ds2.nodes, 6);
        let t = ds.load_trajectory(&ds.envs[0].id).unwrap();
        let t2 = ds2.load_trajectory(&ds.envs[0].id).unwrap();
        assert_eq!(t.states, t2.states);
        assert_eq!(t.states.len(), 20 * 6);
        assert!(t.std > 0.0);
    }

    #[test]
    fn byte_identical_across_runs() {
        let spec = toy_spec();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        simulate_dataset(&spec, 7, a.path(), false).unwrap();
        simulate_dataset(&spec, 7, b.path(), false).unwrap();
        for name in ["manifest", "graph.edges", "e0000.bin"] {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = toy_spec();
        simulate_dataset(&spec, 7, tmp.path(), false).unwrap();
        assert!(simulate_dataset(&spec, 7, tmp.path(), false).is_err());
        assert!(simulate_dataset(&spec, 7, tmp.path(), true).is_ok());
    }

    #[test]
    fn rejects_unknown_manifest_version() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = toy_spec();
        simulate_dataset(&spec, 7, tmp.path(), false).unwrap();
        let p = tmp.path().join("manifest");
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replace("fnfm-dataset v1", "fnfm-dataset v99")).unwrap();
        assert!(load_dataset(tmp.path()).is_err());
    }

    #[test]
    fn sis_states_stay_in_unit_interval() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = simulate_dataset(&toy_spec(), 3, tmp.path(), false).unwrap();
        for env in &ds.envs {
            let t = ds.load_trajectory(&env.id).unwrap();
            assert!(t.states.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
