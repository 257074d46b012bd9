//! Dataset loading, synthetic graph generation, and train/val/test splits.
//!
//! Dataset directory format (all CSV, hand-inspectable):
//!   edges.csv    — one "src,dst" integer pair per line, 0-indexed
//!   features.csv — n lines, d comma-separated decimal reals
//!   labels.csv   — n lines, one integer each
//!   splits.json  — optional {"train":[...],"val":[...],"test":[...]}
//!
//! All randomness comes from ChaCha8 seeded with a 64-bit seed, so splits
//! and synthetic graphs reproduce across builds and platforms.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

/// Independent RNG stream derived from a master seed. Stream ids keep the
/// split / init / shuffle / mask / sbm draws decoupled: changing how one
/// consumer draws never shifts the others.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_MASK: u64 = 4;
pub const STREAM_SBM: u64 = 5;

/// Train/val/test node-index partition.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stochastic block model with Gaussian class-mean features.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub n: usize,
    pub c: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.feat_dim == 0 {
            return Err(Error::Config("sbm: n, c, feat_dim must be positive".into()));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("sbm: {} = {} outside [0,1]", name, p)));
            }
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sbm: sigma must be >= 0".into()));
        }
        Ok(())
    }
}

fn parse_usize(cell: &str, file: &str, line: usize) -> Result<usize> {
    cell.trim()
        .parse::<usize>()
        .map_err(|_| Error::Data(format!("{}:{}: non-integer cell '{}'", file, line + 1, cell)))
}

/// Load a graph from a dataset directory. Duplicate and self-loop edges are
/// stripped and the edge set is symmetrized. The class count is inferred as
/// max(label) + 1.
pub fn load_graph(dir: &Path) -> Result<Graph> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))
    };

    let features_txt = read("features.csv")?;
    let mut x = Vec::new();
    let mut d = 0usize;
    let mut n = 0usize;
    for (i, line) in features_txt.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("features.csv:{}: non-numeric cell '{}'", i + 1, cell))
                })
            })
            .collect::<Result<_>>()?;
        if n == 0 {
            d = row.len();
        } else if row.len() != d {
            return Err(Error::Data(format!(
                "features.csv:{}: {} columns, expected {}",
                i + 1,
                row.len(),
                d
            )));
        }
        x.extend(row);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("features.csv is empty".into()));
    }

    let labels_txt = read("labels.csv")?;
    let mut y = Vec::with_capacity(n);
    for (i, line) in labels_txt.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        y.push(parse_usize(line, "labels.csv", i)?);
    }
    if y.len() != n {
        return Err(Error::Data(format!(
            "labels.csv has {} labels for {} feature rows",
            y.len(),
            n
        )));
    }
    let c = y.iter().max().copied().unwrap_or(0) + 1;

    let edges_txt = read("edges.csv")?;
    let mut edges = Vec::new();
    for (i, line) in edges_txt.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let src = parse_usize(parts.next().unwrap_or(""), "edges.csv", i)?;
        let dst = parse_usize(
            parts
                .next()
                .ok_or_else(|| Error::Data(format!("edges.csv:{}: missing dst", i + 1)))?,
            "edges.csv",
            i,
        )?;
        edges.push((src, dst));
    }

    Graph::from_edges(n, &edges, x, d, y, c)
}

/// Write a graph back out in the dataset directory format.
pub fn save_graph(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut edges = String::new();
    for (a, b) in g.undirected_edges() {
        edges.push_str(&format!("{},{}\n", a, b));
    }
    fs::write(dir.join("edges.csv"), edges)?;
    let mut feats = String::new();
    for v in 0..g.n {
        let row: Vec<String> = g.feature_row(v).iter().map(|f| format!("{:?}", f)).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    fs::write(dir.join("features.csv"), feats)?;
    let labels: String = g.y.iter().map(|l| format!("{}\n", l)).collect();
    fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<SplitSpec> {
    let txt = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    serde_json::from_str(&txt).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

pub fn save_splits(split: &SplitSpec, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(split).unwrap())?;
    Ok(())
}

/// Generate a stochastic block model graph. Node i belongs to class
/// i % c; an edge is drawn with probability p_in within a class and p_out
/// across classes. Features of class k are N(mu * e_{k mod d}, sigma^2 I).
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, STREAM_SBM);
    let n = spec.n;
    let y: Vec<usize> = (0..n).map(|i| i % spec.c).collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if y[i] == y[j] { spec.p_in } else { spec.p_out };
            if p > 0.0 && rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let d = spec.feat_dim;
    let mut x = vec![0.0f64; n * d];
    for i in 0..n {
        let axis = y[i] % d;
        for f in 0..d {
            let mean = if f == axis { spec.mu } else { 0.0 };
            x[i * d + f] = mean + spec.sigma * sample_standard_normal(&mut rng);
        }
    }

    Graph::from_edges(n, &edges, x, d, y, spec.c)
}

/// Box-Muller; two uniforms per draw keeps the stream layout simple.
fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Randomly partition [0, n) by the given ratios. With `stratify_labels`,
/// the permutation and partition happen per class, keeping every part
/// class-balanced within one node per class.
pub fn make_split(
    n: usize,
    ratios: (f64, f64, f64),
    seed: u64,
    stratify_labels: Option<&[usize]>,
) -> Result<SplitSpec> {
    if n < 3 {
        return Err(Error::Config(format!("cannot split {} nodes", n)));
    }
    let (r0, r1, r2) = ratios;
    if (r0 + r1 + r2 - 1.0).abs() > 1e-9 || r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios {:?} must be positive and sum to 1",
            ratios
        )));
    }
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    let groups: Vec<Vec<usize>> = match stratify_labels {
        None => vec![(0..n).collect()],
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::Config("stratify labels length != n".into()));
            }
            let c = labels.iter().max().copied().unwrap_or(0) + 1;
            let mut groups = vec![Vec::new(); c];
            for (i, &l) in labels.iter().enumerate() {
                groups[l].push(i);
            }
            groups
        }
    };
    let mut split = SplitSpec {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut group in groups {
        group.shuffle(&mut rng);
        let g = group.len();
        let n_train = (r0 * g as f64).round() as usize;
        let n_val = (r1 * g as f64).round() as usize;
        let n_val = n_val.min(g - n_train);
        split.train.extend(&group[..n_train]);
        split.val.extend(&group[n_train..n_train + n_val]);
        split.test.extend(&group[n_train + n_val..]);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::homophily_ratio;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn write_dataset(dir: &Path, edges: &str, feats: &str, labels: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("edges.csv"), edges).unwrap();
        fs::write(dir.join("features.csv"), feats).unwrap();
        fs::write(dir.join("labels.csv"), labels).unwrap();
    }

    #[test]
    fn load_triangle() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "0,1\n1,2\n2,0\n",
            "1.0,0.0\n0.0,1.0\n1.0,1.0\n",
            "0\n1\n0\n",
        );
        let g = load_graph(dir.path()).unwrap();
        assert_eq!(g.n, 3);
        assert_eq!(g.edge_count(), 3);
        assert_eq!(g.d, 2);
        assert_eq!(g.c, 2);
    }

    #[test]
    fn load_symmetrizes_duplicate_directions() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "0,1\n1,0\n", "0.5\n0.5\n", "0\n0\n");
        let g = load_graph(dir.path()).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn load_rejects_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "0,1\n", "1.0\nfoo\n", "0\n0\n");
        assert!(matches!(load_graph(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn load_rejects_out_of_range_node() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "0,9\n", "1.0\n2.0\n", "0\n0\n");
        assert!(matches!(load_graph(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn load_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_graph(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn round_trip_save_load() {
        let spec = SbmSpec {
            n: 40,
            c: 3,
            p_in: 0.3,
            p_out: 0.05,
            feat_dim: 4,
            mu: 1.0,
            sigma: 0.5,
            seed: 7,
        };
        let g = generate_sbm(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_graph(&g, dir.path()).unwrap();
        let g2 = load_graph(dir.path()).unwrap();
        assert_eq!(g, g2);
        assert_eq!(g.checksum(), g2.checksum());
    }

    #[test]
    fn sbm_two_cliques_homophily_one() {
        let spec = SbmSpec {
            n: 20,
            c: 2,
            p_in: 1.0,
            p_out: 0.0,
            feat_dim: 2,
            mu: 1.0,
            sigma: 0.1,
            seed: 1,
        };
        let g = generate_sbm(&spec).unwrap();
        assert_eq!(homophily_ratio(&g).unwrap(), 1.0);
    }

    #[test]
    fn sbm_bipartite_homophily_zero() {
        let spec = SbmSpec {
            n: 20,
            c: 2,
            p_in: 0.0,
            p_out: 1.0,
            feat_dim: 2,
            mu: 1.0,
            sigma: 0.1,
            seed: 1,
        };
        let g = generate_sbm(&spec).unwrap();
        assert_eq!(homophily_ratio(&g).unwrap(), 0.0);
    }

    #[test]
    fn sbm_homophilic_ratio_in_expected_band() {
        let spec = SbmSpec {
            n: 400,
            c: 2,
            p_in: 0.05,
            p_out: 0.005,
            feat_dim: 4,
            mu: 1.0,
            sigma: 1.0,
            seed: 3,
        };
        let g = generate_sbm(&spec).unwrap();
        let h = homophily_ratio(&g).unwrap();
        assert!((0.85..0.95).contains(&h), "homophily {} outside (0.85, 0.95)", h);
    }

    #[test]
    fn sbm_deterministic_under_seed() {
        let spec = SbmSpec {
            n: 50,
            c: 2,
            p_in: 0.2,
            p_out: 0.02,
            feat_dim: 3,
            mu: 1.0,
            sigma: 0.5,
            seed: 11,
        };
        assert_eq!(generate_sbm(&spec).unwrap(), generate_sbm(&spec).unwrap());
    }

    #[test]
    fn sbm_homophilic_beats_half_over_seeds() {
        // p_in > p_out should give homophily > 0.5 essentially always at n >= 200
        let mut ok = 0;
        for seed in 0..20u64 {
            let spec = SbmSpec {
                n: 200,
                c: 2,
                p_in: 0.05,
                p_out: 0.02,
                feat_dim: 2,
                mu: 0.0,
                sigma: 1.0,
                seed,
            };
            let g = generate_sbm(&spec).unwrap();
            if homophily_ratio(&g).unwrap() > 0.5 {
                ok += 1;
            }
        }
        assert!(ok >= 20, "only {}/20 seeds homophilic", ok);
    }

    #[test]
    fn split_deterministic() {
        let a = make_split(10, (0.6, 0.2, 0.2), 42, None).unwrap();
        let b = make_split(10, (0.6, 0.2, 0.2), 42, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes_100() {
        let s = make_split(100, (0.6, 0.2, 0.2), 0, None).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
    }

    #[test]
    fn split_rejects_tiny_n() {
        assert!(make_split(2, (0.6, 0.2, 0.2), 0, None).is_err());
    }

    #[test]
    fn stratified_split_balanced() {
        let labels: Vec<usize> = [vec![0usize; 50], vec![1usize; 50]].concat();
        let s = make_split(100, (0.6, 0.2, 0.2), 5, Some(&labels)).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let c0 = part.iter().filter(|&&i| labels[i] == 0).count();
            let c1 = part.len() - c0;
            assert!(c0.abs_diff(c1) <= 1, "unbalanced part: {} vs {}", c0, c1);
        }
    }

    #[test]
    fn splits_json_round_trip() {
        let s = make_split(30, (0.6, 0.2, 0.2), 9, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splits.json");
        save_splits(&s, &path).unwrap();
        assert_eq!(load_splits(&path).unwrap(), s);
    }

    proptest! {
        #[test]
        fn split_partitions_disjoint_and_complete(n in 3usize..200, seed in 0u64..50) {
            let s = make_split(n, (0.6, 0.2, 0.2), seed, None).unwrap();
            let all: Vec<usize> = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
            let set: HashSet<usize> = all.iter().copied().collect();
            prop_assert_eq!(set.len(), n);
            prop_assert!(all.iter().all(|&i| i < n));
            let want = (0.6 * n as f64).round() as usize;
            prop_assert!(s.train.len().abs_diff(want) <= 1);
        }
    }
}
