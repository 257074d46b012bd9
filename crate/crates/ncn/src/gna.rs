//! Grid-like neighborhood aggregation: hop-stacked feature tensors computed
//! entirely before training.
//!
//! The propagation never materializes an n x n weight matrix. For the
//! personalized-PageRank scheme it runs the recurrence
//!   B(0) = X,  B(k) = (1 - gamma) * A_hat * B(k-1) + gamma * X
//! which telescopes to the closed-form truncated series; for the random-walk
//! scheme B(k) = A_hat * B(k-1). Hops are computed in f64 and rounded to f32
//! for storage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NormAdj};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Personalized-PageRank weights with teleport probability gamma.
    Ppr,
    /// Plain random-walk powers of the normalized adjacency.
    Rw,
}

impl Scheme {
    fn tag(self) -> u8 {
        match self {
            Scheme::Ppr => 0,
            Scheme::Rw => 1,
        }
    }
    fn from_tag(t: u8) -> Result<Scheme> {
        match t {
            0 => Ok(Scheme::Ppr),
            1 => Ok(Scheme::Rw),
            _ => Err(Error::Data(format!("unknown scheme tag {}", t))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PropagationSpec {
    pub scheme: Scheme,
    pub k: usize,
    pub gamma: f64,
}

impl PropagationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("propagation step K must be >= 1".into()));
        }
        if self.scheme == Scheme::Ppr && !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "teleport probability gamma = {} outside (0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-node hop-stacked aggregated features: n rows, each a (K+1) x d
/// matrix with hop 0 (the raw features) first.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub scheme: Scheme,
    pub gamma: f64,
    pub graph_checksum: u64,
    /// Row-major: node, then hop, then feature.
    pub data: Vec<f32>,
}

impl GridTensor {
    pub fn hop_stride(&self) -> usize {
        (self.k + 1) * self.d
    }

    /// Hop slice (k x d row for every node is interleaved; this returns the
    /// k-th hop of node v).
    pub fn node_hop(&self, v: usize, hop: usize) -> &[f32] {
        let base = v * self.hop_stride() + hop * self.d;
        &self.data[base..base + self.d]
    }

    /// Gather rows for a batch, in the given order. Output is
    /// |ids| x (K+1) x d, row-major.
    pub fn slice_batch(&self, ids: &[usize]) -> Result<Vec<f32>> {
        let stride = self.hop_stride();
        let mut out = Vec::with_capacity(ids.len() * stride);
        for &v in ids {
            if v >= self.n {
                return Err(Error::Data(format!("node id {} >= n = {}", v, self.n)));
            }
            out.extend_from_slice(&self.data[v * stride..(v + 1) * stride]);
        }
        Ok(out)
    }

    pub fn ensure_matches(&self, g: &Graph) -> Result<()> {
        if self.graph_checksum != g.checksum() {
            return Err(Error::Data(
                "grid tensor checksum does not match the supplied graph".into(),
            ));
        }
        Ok(())
    }
}

/// All hop matrices in f64, each n x d. Hop 0 is X itself.
pub fn propagate_hops_f64(
    adj: &NormAdj,
    x: &[f64],
    d: usize,
    spec: &PropagationSpec,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if x.len() != adj.n * d {
        return Err(Error::Shape(format!(
            "features have {} values, expected {}x{}",
            x.len(),
            adj.n,
            d
        )));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite input feature {}", v)));
    }
    let mut hops = Vec::with_capacity(spec.k + 1);
    hops.push(x.to_vec());
    for _ in 1..=spec.k {
        let prev = hops.last().unwrap();
        let propagated = adj.matvec_rows(prev, d)?;
        let next: Vec<f64> = match spec.scheme {
            Scheme::Rw => propagated,
            Scheme::Ppr => propagated
                .iter()
                .zip(x)
                .map(|(&p, &xi)| (1.0 - spec.gamma) * p + spec.gamma * xi)
                .collect(),
        };
        hops.push(next);
    }
    Ok(hops)
}

/// Run the propagation and assemble the per-node grid tensor.
pub fn propagate(g: &Graph, adj: &NormAdj, spec: &PropagationSpec) -> Result<GridTensor> {
    let hops = propagate_hops_f64(adj, &g.x, g.d, spec)?;
    let (n, d, k) = (g.n, g.d, spec.k);
    let stride = (k + 1) * d;
    let mut data = vec![0.0f32; n * stride];
    for (hop, m) in hops.iter().enumerate() {
        for v in 0..n {
            let dst = v * stride + hop * d;
            for f in 0..d {
                data[dst + f] = m[v * d + f] as f32;
            }
        }
    }
    Ok(GridTensor {
        n,
        k,
        d,
        scheme: spec.scheme,
        gamma: spec.gamma,
        graph_checksum: g.checksum(),
        data,
    })
}

const MAGIC: &[u8; 4] = b"NCNT";
const VERSION: u32 = 1;

/// Grid tensor file: magic "NCNT", u32 version, u64 n, u32 K, u32 d,
/// u8 scheme tag, f64 gamma, u64 graph checksum, then n*(K+1)*d
/// little-endian f32 values.
pub fn save_grid(t: &GridTensor, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.n as u64).to_le_bytes())?;
    w.write_all(&(t.k as u32).to_le_bytes())?;
    w.write_all(&(t.d as u32).to_le_bytes())?;
    w.write_all(&[t.scheme.tag()])?;
    w.write_all(&t.gamma.to_le_bytes())?;
    w.write_all(&t.graph_checksum.to_le_bytes())?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<GridTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a grid tensor file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Data(format!("unsupported grid file version {}", version)));
    }
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let k = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let d = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut tag = [0u8; 1];
    read_exact(&mut r, &mut tag)?;
    let scheme = Scheme::from_tag(tag[0])?;
    let gamma = f64::from_le_bytes(read_array(&mut r)?);
    let graph_checksum = u64::from_le_bytes(read_array(&mut r)?);
    let count = n
        .checked_mul(k + 1)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Data("grid dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        read_exact(&mut r, &mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Data("trailing bytes after grid tensor data".into()));
    }
    Ok(GridTensor {
        n,
        k,
        d,
        scheme,
        gamma,
        graph_checksum,
        data,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data("truncated grid tensor file".into()))
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
