//! Network topologies the dynamics evolve on.
//!
//! Generators produce connected, undirected, binary-weighted graphs that are
//! bit-deterministic for a fixed seed. Real topologies come in through the
//! edge-list loader.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::format_f64;

/// Undirected weighted graph stored as a dense adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub n: usize,
    /// Row-major n*n, symmetric, zero diagonal, entries finite and >= 0.
    pub adjacency: Vec<f64>,
    pub name: String,
}

impl Graph {
    pub fn new(n: usize, adjacency: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        if adjacency.len() != n * n {
            return Err(Error::Shape(format!(
                "adjacency length {} != n*n = {}",
                adjacency.len(),
                n * n
            )));
        }
        let g = Graph {
            n,
            adjacency,
            name: name.into(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.adjacency[i * self.n + i] != 0.0 {
                return Err(Error::Domain(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..self.n {
                let a = self.adjacency[i * self.n + j];
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::Domain(format!("invalid weight at ({i},{j}): {a}")));
                }
                if a != self.adjacency[j * self.n + i] {
                    return Err(Error::Domain(format!("asymmetric entry at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    pub fn edge_count(&self) -> usize {
        let mut c = 0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.weight(i, j) > 0.0 {
                    c += 1;
                }
            }
        }
        c
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.weight(i, j) > 0.0).count()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..self.n {
                if !seen[v] && self.weight(u, v) > 0.0 {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.n
    }

    /// Symmetric first-order normalized adjacency with self-loops:
    /// D^{-1/2} (A + I) D^{-1/2} with D = diag(rowsum(A + I)).
    pub fn norm_adjacency(&self) -> Vec<f64> {
        let n = self.n;
        let mut deg = vec![0.0f64; n];
        for i in 0..n {
            let mut s = 1.0; // self-loop
            for j in 0..n {
                s += self.weight(i, j);
            }
            deg[i] = s.sqrt();
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let a = self.weight(i, j) + if i == j { 1.0 } else { 0.0 };
                out[i * n + j] = a / (deg[i] * deg[j]);
            }
        }
        out
    }
}

/// Barabási–Albert preferential attachment; the seed graph is an (m+1)-clique.
pub fn generate_ba(n: usize, m: usize, seed: u64) -> Result<Graph> {
    if m < 1 || n <= m {
        return Err(Error::Config(format!(
            "barabasi-albert requires n > m >= 1, got n={n}, m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m0 = m + 1;
    let mut adj = vec![0.0; n * n];
    // endpoint multiset: each node appears once per incident edge
    let mut endpoints: Vec<usize> = Vec::with_capacity(2 * (m0 * (m0 - 1) / 2 + m * n));
    for i in 0..m0 {
        for j in (i + 1)..m0 {
            adj[i * n + j] = 1.0;
            adj[j * n + i] = 1.0;
            endpoints.push(i);
            endpoints.push(j);
        }
    }
    for v in m0..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let t = endpoints[rng.gen_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            adj[v * n + t] = 1.0;
            adj[t * n + v] = 1.0;
            endpoints.push(v);
            endpoints.push(t);
        }
    }
    Graph::new(n, adj, format!("ba_n{n}_m{m}_s{seed}"))
}

/// Random k-regular simple graph via the configuration model with rejection.
/// Regenerates with an incremented seed (up to 32 tries) until connected.
pub fn generate_regular(n: usize, k: usize, seed: u64) -> Result<Graph> {
    if k >= n || (n * k) % 2 != 0 {
        return Err(Error::Config(format!(
            "k-regular graph requires k < n and n*k even, got n={n}, k={k}"
        )));
    }
    for attempt in 0..32u64 {
        if let Some(adj) = try_regular(n, k, seed.wrapping_add(attempt)) {
            let g = Graph::new(n, adj, format!("reg_n{n}_k{k}_s{seed}"))?;
            if g.is_connected() {
                return Ok(g);
            }
        }
    }
    Err(Error::Config(format!(
        "failed to build a connected {k}-regular graph on {n} nodes from seed {seed}"
    )))
}

fn try_regular(n: usize, k: usize, seed: u64) -> Option<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let mut stubs: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        stubs.shuffle(&mut rng);
        let mut adj = vec![0.0; n * n];
        let mut ok = true;
        for pair in stubs.chunks(2) {
            let (u, v) = (pair[0], pair[1]);
            if u == v || adj[u * n + v] > 0.0 {
                ok = false;
                break;
            }
            adj[u * n + v] = 1.0;
            adj[v * n + u] = 1.0;
        }
        if ok {
            return Some(adj);
        }
    }
    None
}

/// Parse a whitespace-separated "u v [w]" edge list; duplicate edges collapse
/// to the maximum weight, self-loops are rejected.
pub fn parse_edge_list(text: &str, name: impl Into<String>) -> Result<Graph> {
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut max_node = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 'u v [w]', got {fields:?}"),
            });
        }
        let u: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid node id '{}'", fields[0]),
        })?;
        let v: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid node id '{}'", fields[1]),
        })?;
        let w: f64 = match fields.get(2) {
            Some(s) => s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("invalid weight '{s}'"),
            })?,
            None => 1.0,
        };
        if u == v {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("self-loop on node {u}"),
            });
        }
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("invalid weight {w}"),
            });
        }
        max_node = max_node.max(u).max(v);
        edges.push((u, v, w));
    }
    if edges.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "edge list contains no edges".into(),
        });
    }
    let n = max_node + 1;
    let mut adj = vec![0.0; n * n];
    for (u, v, w) in edges {
        let cur = adj[u * n + v];
        let w = w.max(cur);
        adj[u * n + v] = w;
        adj[v * n + u] = w;
    }
    Graph::new(n, adj, name)
}

pub fn load_edge_list(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "edge_list".into());
    parse_edge_list(&text, name)
}

/// Canonical edge-list text: edges with u < v, sorted, 17-significant-digit weights.
pub fn edge_list_text(g: &Graph) -> String {
    let mut out = String::new();
    for i in 0..g.n {
        for j in (i + 1)..g.n {
            let w = g.weight(i, j);
            if w > 0.0 {
                writeln!(out, "{i} {j} {}", format_f64(w)).unwrap();
            }
        }
    }
    out
}

pub fn save_edge_list(g: &Graph, path: &Path) -> Result<()> {
    std::fs::write(path, edge_list_text(g)).map_err(|e| Error::io(path, e))
}

/// Largest eigenvalue magnitude of the adjacency, by power iteration on
/// A + I (strictly dominant top eigenvalue for any nonnegative symmetric A).
pub fn spectral_radius(g: &Graph) -> Result<f64> {
    if g.n == 0 {
        return Err(Error::Domain("spectral radius of an empty graph".into()));
    }
    let n = g.n;
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0f64;
    let mut residual = f64::INFINITY;
    for _ in 0..10_000 {
        let mut y = x.clone(); // the +I term
        for i in 0..n {
            for j in 0..n {
                y[i] += g.adjacency[i * n + j] * x[j];
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for v in &mut y {
            *v /= norm;
        }
        let new_lambda = norm;
        residual = (new_lambda - lambda).abs() / new_lambda.max(1e-300);
        lambda = new_lambda;
        x = y;
        if residual < 1e-8 {
            return Ok(lambda - 1.0);
        }
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge; final residual {residual:.3e}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ba_minimal_is_triangle() {
        let g = generate_ba(3, 2, 0).unwrap();
        assert_eq!(g.edge_count(), 3);
        for i in 0..3 {
            assert_eq!(g.degree(i), 2);
        }
    }

    #[test]
    fn ba_handshake_and_edge_count() {
        let g = generate_ba(100, 2, 7).unwrap();
        let deg_sum: usize = (0..100).map(|i| g.degree(i)).sum();
        assert_eq!(deg_sum, 2 * g.edge_count());
        // 3-node seed clique plus m=2 edges per remaining node
        assert_eq!(g.edge_count(), 3 + 2 * 97);
        assert!(g.is_connected());
    }

    #[test]
    fn ba_rejects_bad_config() {
        assert!(generate_ba(3, 3, 0).is_err());
        assert!(generate_ba(2, 0, 0).is_err());
    }

    #[test]
    fn ba_deterministic() {
        let a = generate_ba(50, 2, 11).unwrap();
        let b = generate_ba(50, 2, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regular_degrees() {
        let g = generate_regular(4, 2, 0).unwrap();
        for i in 0..4 {
            assert_eq!(g.degree(i), 2);
        }
        let g = generate_regular(6, 3, 1).unwrap();
        assert_eq!(g.edge_count(), 9);
    }

    #[test]
    fn regular_rejects_parity() {
        assert!(generate_regular(5, 3, 0).is_err());
        assert!(generate_regular(4, 4, 0).is_err());
    }

    #[test]
    fn regular_spectral_radius_is_k() {
        let g = generate_regular(10, 4, 2).unwrap();
        let r = spectral_radius(&g).unwrap();
        assert!((r - 4.0).abs() < 1e-6, "spectral radius {r}");
    }

    #[test]
    fn spectral_radius_closed_forms() {
        // K_4: lambda_max = n - 1
        let mut adj = vec![1.0; 16];
        for i in 0..4 {
            adj[i * 4 + i] = 0.0;
        }
        let k4 = Graph::new(4, adj, "k4").unwrap();
        assert!((spectral_radius(&k4).unwrap() - 3.0).abs() < 1e-6);

        // C_4: lambda_max = 2
        let c4 = parse_edge_list("0 1\n1 2\n2 3\n3 0", "c4").unwrap();
        assert!((spectral_radius(&c4).unwrap() - 2.0).abs() < 1e-6);

        // single edge: eigenvalues +-1
        let e = parse_edge_list("0 1", "edge").unwrap();
        assert!((spectral_radius(&e).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn edge_list_parsing() {
        let g = parse_edge_list("0 1\n1 2", "path").unwrap();
        assert_eq!(g.n, 3);
        assert_eq!(g.edge_count(), 2);

        let g = parse_edge_list("0 1 2.0\n1 0 1.0", "dup").unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.weight(0, 1), 2.0);

        let err = parse_edge_list("0 0", "loop").unwrap_err();
        assert!(err.to_string().contains("node 0"), "{err}");

        let err = parse_edge_list("0 1\nbogus", "bad").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn edge_list_round_trip() {
        let g = generate_ba(20, 2, 3).unwrap();
        let text = edge_list_text(&g);
        let back = parse_edge_list(&text, g.name.clone()).unwrap();
        assert_eq!(g.adjacency, back.adjacency);
    }

    #[test]
    fn norm_adjacency_two_node_edge() {
        let g = parse_edge_list("0 1", "pair").unwrap();
        let a = g.norm_adjacency();
        for v in a {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }
}
