//! The NCN architecture: per-hop dimension reduction, two convolutional
//! blocks over the hop-stacked grid, a raw-feature branch, adaptive fusion
//! with mask training, and an MLP head. Ablation variants and the plain MLP
//! baseline share the same interface.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gna::GridTensor;
use crate::graph::Graph;
use crate::tensor::{Elem, Tape, Tensor, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full model: fusion of raw and neighborhood branches, mask training.
    Full,
    /// Adaptive fusion removed; classify from the neighborhood branch alone.
    NoRa,
    /// Full architecture but the mask strategy is bypassed.
    NoMask,
    /// Plain MLP on the raw features (no grid input at all).
    MlpBaseline,
}

impl Variant {
    pub fn uses_grid(self) -> bool {
        !matches!(self, Variant::MlpBaseline)
    }
    pub fn uses_fusion(self) -> bool {
        matches!(self, Variant::Full | Variant::NoMask)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw feature dimension.
    pub d: usize,
    /// Hidden dimension d'.
    pub d_prime: usize,
    /// Propagation step K. Must be even: the grid height K+1 collapses to
    /// exactly 1 after the two conv blocks only when K is even.
    pub k: usize,
    /// Class count.
    pub c: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Height of the tall conv kernel, floor(K/2) + 1.
    pub fn kernel_h(&self) -> usize {
        self.k / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 || self.c == 0 {
            return Err(Error::Config("d, d_prime, c must be positive".into()));
        }
        if self.variant.uses_grid() && (self.k < 2 || self.k % 2 != 0) {
            return Err(Error::Config(format!(
                "propagation step K = {} must be even and >= 2",
                self.k
            )));
        }
        Ok(())
    }
}

/// Per-node mask role for one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRole {
    Keep,
    /// Node in N0: the raw-branch gate a0 is zeroed.
    ZeroRaw,
    /// Node in N1: the neighborhood-branch gate a1 is zeroed.
    ZeroNbr,
}

/// Epoch partition of the training set into N0 / N1 / N2.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    roles: std::collections::HashMap<usize, MaskRole>,
}

impl MaskPlan {
    pub fn role(&self, node: usize) -> MaskRole {
        self.roles.get(&node).copied().unwrap_or(MaskRole::Keep)
    }

    pub fn count(&self, role: MaskRole) -> usize {
        self.roles.values().filter(|&&r| r == role).count()
    }
}

/// Partition train ids into N0, N1 (each floor(beta * |V_l|) nodes) and the
/// remainder N2, uniformly without replacement.
pub fn sample_mask_plan(train_ids: &[usize], beta: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::Config(format!("beta = {} outside [0, 0.5)", beta)));
    }
    let mut ids = train_ids.to_vec();
    use rand::seq::SliceRandom;
    ids.shuffle(rng);
    let n0 = (beta * train_ids.len() as f64).floor() as usize;
    let mut roles = std::collections::HashMap::new();
    for (i, &v) in ids.iter().enumerate() {
        let role = if i < n0 {
            MaskRole::ZeroRaw
        } else if i < 2 * n0 {
            MaskRole::ZeroNbr
        } else {
            MaskRole::Keep
        };
        roles.insert(v, role);
    }
    Ok(MaskPlan { roles })
}

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
}

/// Model parameters plus the static configuration they were built for.
#[derive(Debug, Clone)]
pub struct NcnModel<E> {
    pub cfg: ModelConfig,
    pub params: Vec<Param<E>>,
}

/// One recorded forward pass. The tape stays alive so the caller can attach
/// a loss and run backward; `param_ids` aligns with `NcnModel::params`.
pub struct ForwardPass<E> {
    pub tape: Tape<E>,
    pub logits: VarId,
    /// Pre-mask fusion weights [B, 2]; None for variants without fusion.
    pub weights: Option<VarId>,
    pub param_ids: Vec<VarId>,
}

impl<E: Elem> NcnModel<E> {
    /// Fresh model with uniform fan-in initialization (weights in
    /// +-sqrt(1/fan_in), biases zero).
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<NcnModel<E>> {
        cfg.validate()?;
        let dp = cfg.d_prime;
        let kh = cfg.kernel_h();
        // (name, fan_in, weight shape); each entry contributes a weight and
        // a zero bias whose length is the leading output dimension
        let layers: Vec<(&str, usize, Vec<usize>, usize)> = match cfg.variant {
            Variant::Full | Variant::NoMask => vec![
                ("reduce", cfg.d, vec![cfg.d, dp], dp),
                ("block1.conv_a", dp * kh, vec![dp, dp, kh, 1], dp),
                ("block1.conv_b", dp, vec![dp, dp, 1, 1], dp),
                ("block2.conv_a", dp * kh, vec![dp, dp, kh, 1], dp),
                ("block2.conv_b", dp, vec![dp, dp, 1, 1], dp),
                ("raw", cfg.d, vec![cfg.d, dp], dp),
                ("fusion", 2 * dp, vec![2 * dp, 2], 2),
                ("head1", 2 * dp, vec![2 * dp, dp], dp),
                ("head2", dp, vec![dp, cfg.c], cfg.c),
            ],
            Variant::NoRa => vec![
                ("reduce", cfg.d, vec![cfg.d, dp], dp),
                ("block1.conv_a", dp * kh, vec![dp, dp, kh, 1], dp),
                ("block1.conv_b", dp, vec![dp, dp, 1, 1], dp),
                ("block2.conv_a", dp * kh, vec![dp, dp, kh, 1], dp),
                ("block2.conv_b", dp, vec![dp, dp, 1, 1], dp),
                ("head1", dp, vec![dp, dp], dp),
                ("head2", dp, vec![dp, cfg.c], cfg.c),
            ],
            Variant::MlpBaseline => vec![
                ("head1", cfg.d, vec![cfg.d, dp], dp),
                ("head2", dp, vec![dp, cfg.c], cfg.c),
            ],
        };
        let mut params = Vec::with_capacity(layers.len() * 2);
        for (name, fan_in, shape, bias_len) in layers {
            let bound = (1.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data: Vec<E> = (0..numel)
                .map(|_| E::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound).unwrap())
                .collect();
            params.push(Param {
                name: format!("{}.w", name),
                value: Tensor { shape, data },
            });
            params.push(Param {
                name: format!("{}.b", name),
                value: Tensor::zeros(vec![bias_len]),
            });
        }
        Ok(NcnModel { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn param_id(&self, ids: &[VarId], name: &str) -> VarId {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named {}", name));
        ids[idx]
    }

    /// Record one forward pass over a batch.
    ///
    /// `grid_batch` is B x (K+1) x d (ignored by the MLP baseline),
    /// `raw_batch` is B x d, `roles` has one entry per batch row. A masked
    /// branch is zeroed both in the fusion-weight input and in the fused
    /// representation, so logits of a gated-off branch are exactly
    /// independent of that branch's input.
    pub fn forward(
        &self,
        grid_batch: &Tensor<E>,
        raw_batch: &Tensor<E>,
        roles: &[MaskRole],
    ) -> Result<ForwardPass<E>> {
        let b = raw_batch.shape.first().copied().unwrap_or(0);
        if raw_batch.shape != [b, self.cfg.d] {
            return Err(Error::Shape(format!(
                "raw batch shape {:?}, expected [{}, {}]",
                raw_batch.shape, b, self.cfg.d
            )));
        }
        if roles.len() != b {
            return Err(Error::Shape(format!("{} roles for batch {}", roles.len(), b)));
        }
        let mut tape: Tape<E> = Tape::new();
        let param_ids: Vec<VarId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let ids = &param_ids;

        let logits;
        let mut weights = None;
        match self.cfg.variant {
            Variant::MlpBaseline => {
                let raw = tape.leaf(raw_batch.clone());
                logits = self.mlp_head(&mut tape, ids, raw)?;
            }
            Variant::NoRa => {
                let h_n = self.neighborhood_branch(&mut tape, ids, grid_batch, b)?;
                logits = self.mlp_head(&mut tape, ids, h_n)?;
            }
            Variant::Full | Variant::NoMask => {
                let h_n = self.neighborhood_branch(&mut tape, ids, grid_batch, b)?;
                let raw = tape.leaf(raw_batch.clone());
                let w_r = self.param_id(ids, "raw.w");
                let b_r = self.param_id(ids, "raw.b");
                let h_r0 = tape.matmul(raw, w_r)?;
                let h_r = tape.add_bias(h_r0, b_r)?;

                let dp = self.cfg.d_prime;
                let any_masked = roles.iter().any(|&r| r != MaskRole::Keep);
                let (h_r, h_n) = if any_masked {
                    let mut mr = vec![E::one(); b * dp];
                    let mut mn = vec![E::one(); b * dp];
                    for (i, &r) in roles.iter().enumerate() {
                        let dst = match r {
                            MaskRole::Keep => continue,
                            MaskRole::ZeroRaw => &mut mr,
                            MaskRole::ZeroNbr => &mut mn,
                        };
                        dst[i * dp..(i + 1) * dp].fill(E::zero());
                    }
                    let mr = tape.leaf(Tensor::new(vec![b, dp], mr)?);
                    let mn = tape.leaf(Tensor::new(vec![b, dp], mn)?);
                    (tape.mul(h_r, mr)?, tape.mul(h_n, mn)?)
                } else {
                    (h_r, h_n)
                };

                let cat = tape.concat_last_dim(h_r, h_n)?;
                let w_a = self.param_id(ids, "fusion.w");
                let b_a = self.param_id(ids, "fusion.b");
                let phi0 = tape.matmul(cat, w_a)?;
                let phi = tape.add_bias(phi0, b_a)?;
                let a_pre = tape.softmax_last_dim(phi)?;
                weights = Some(a_pre);
                let a = if any_masked {
                    let mut m2 = vec![E::one(); b * 2];
                    for (i, &r) in roles.iter().enumerate() {
                        match r {
                            MaskRole::Keep => {}
                            MaskRole::ZeroRaw => m2[i * 2] = E::zero(),
                            MaskRole::ZeroNbr => m2[i * 2 + 1] = E::zero(),
                        }
                    }
                    let m2 = tape.leaf(Tensor::new(vec![b, 2], m2)?);
                    tape.mul(a_pre, m2)?
                } else {
                    a_pre
                };
                let f_r = tape.row_scale(h_r, a, 0)?;
                let f_n = tape.row_scale(h_n, a, 1)?;
                let h_f = tape.concat_last_dim(f_r, f_n)?;
                logits = self.mlp_head(&mut tape, ids, h_f)?;
            }
        }
        Ok(ForwardPass {
            tape,
            logits,
            weights,
            param_ids,
        })
    }

    /// Reduction layer plus the two conv blocks, down to H^N: [B, d'].
    fn neighborhood_branch(
        &self,
        tape: &mut Tape<E>,
        ids: &[VarId],
        grid_batch: &Tensor<E>,
        b: usize,
    ) -> Result<VarId> {
        let (k, d, dp) = (self.cfg.k, self.cfg.d, self.cfg.d_prime);
        if grid_batch.shape != [b, k + 1, d] {
            return Err(Error::Shape(format!(
                "grid batch shape {:?}, expected [{}, {}, {}]",
                grid_batch.shape,
                b,
                k + 1,
                d
            )));
        }
        let grid = tape.leaf(grid_batch.clone());
        let w = self.param_id(ids, "reduce.w");
        let bb = self.param_id(ids, "reduce.b");
        let red0 = tape.matmul(grid, w)?;
        let red = tape.add_bias(red0, bb)?; // [B, K+1, d']
        let chan = tape.swap_axes_12(red)?; // [B, d', K+1]
        let mut x = tape.reshape(chan, vec![b, dp, k + 1, 1])?;
        for (i, block) in ["block1", "block2"].iter().enumerate() {
            let ka = self.param_id(ids, &format!("{}.conv_a.w", block));
            let ba = self.param_id(ids, &format!("{}.conv_a.b", block));
            let kb = self.param_id(ids, &format!("{}.conv_b.w", block));
            let bbv = self.param_id(ids, &format!("{}.conv_b.b", block));
            let a = tape.conv2d_hx1(x, ka, ba)?;
            let a = tape.relu(a);
            let bout = tape.conv2d_hx1(a, kb, bbv)?;
            x = if i == 0 { tape.relu(bout) } else { bout };
        }
        let shape = tape.value(x).shape.clone();
        if shape[2] != 1 {
            return Err(Error::Shape(format!(
                "conv stack output height {} != 1",
                shape[2]
            )));
        }
        tape.reshape(x, vec![b, dp])
    }

    fn mlp_head(&self, tape: &mut Tape<E>, ids: &[VarId], input: VarId) -> Result<VarId> {
        let w1 = self.param_id(ids, "head1.w");
        let b1 = self.param_id(ids, "head1.b");
        let w2 = self.param_id(ids, "head2.w");
        let b2 = self.param_id(ids, "head2.b");
        let h0 = tape.matmul(input, w1)?;
        let h = tape.add_bias(h0, b1)?;
        let h = tape.relu(h);
        let l0 = tape.matmul(h, w2)?;
        tape.add_bias(l0, b2)
    }

    /// Argmax predictions for a batch (masking disabled).
    pub fn predict(&self, grid_batch: &Tensor<E>, raw_batch: &Tensor<E>) -> Result<Vec<usize>> {
        let b = raw_batch.shape[0];
        let fp = self.forward(grid_batch, raw_batch, &vec![MaskRole::Keep; b])?;
        let logits = fp.tape.value(fp.logits);
        Ok(argmax_rows(&logits.data, self.cfg.c))
    }
}

pub fn argmax_rows<E: Elem>(data: &[E], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Batch inputs for a set of node ids: grid rows as [B, K+1, d] and raw
/// feature rows as [B, d].
pub fn gather_batch<E: Elem>(
    grid: &GridTensor,
    graph: &Graph,
    ids: &[usize],
) -> Result<(Tensor<E>, Tensor<E>)> {
    let rows = grid.slice_batch(ids)?;
    let grid_batch = Tensor::from_f32(vec![ids.len(), grid.k + 1, grid.d], &rows)?;
    let mut raw = Vec::with_capacity(ids.len() * graph.d);
    for &v in ids {
        // raw branch consumes the same f32 rounding the grid stores
        raw.extend(graph.feature_row(v).iter().map(|&f| f as f32));
    }
    let raw_batch = Tensor::from_f32(vec![ids.len(), graph.d], &raw)?;
    Ok((grid_batch, raw_batch))
}

/// Unmasked per-node fusion weights (node_id, a0, a1).
pub fn export_fusion_weights<E: Elem>(
    model: &NcnModel<E>,
    grid: &GridTensor,
    graph: &Graph,
    node_ids: &[usize],
) -> Result<Vec<(usize, f64, f64)>> {
    if !model.cfg.variant.uses_fusion() {
        return Err(Error::Config(format!(
            "variant {:?} has no fusion weights",
            model.cfg.variant
        )));
    }
    let mut out = Vec::with_capacity(node_ids.len());
    for chunk in node_ids.chunks(1024.max(1)) {
        let (gb, rb) = gather_batch::<E>(grid, graph, chunk)?;
        let fp = model.forward(&gb, &rb, &vec![MaskRole::Keep; chunk.len()])?;
        let a = fp.tape.value(fp.weights.expect("fusion variant"));
        for (i, &v) in chunk.iter().enumerate() {
            out.push((
                v,
                a.data[i * 2].to_f64().unwrap(),
                a.data[i * 2 + 1].to_f64().unwrap(),
            ));
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    model: ModelConfig,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

/// Checkpoint file: u64 LE manifest length, JSON manifest (config, names,
/// shapes), then one raw little-endian f32 blob per parameter in manifest
/// order.
pub fn save_checkpoint(model: &NcnModel<f32>, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        version: 1,
        model: model.cfg,
        params: model
            .params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape.clone(),
            })
            .collect(),
    };
    let manifest = serde_json::to_vec(&manifest).unwrap();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for p in &model.params {
        for v in &p.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NcnModel<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)
        .map_err(|_| Error::Data("truncated checkpoint".into()))?;
    let len = u64::from_le_bytes(len_buf) as usize;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest)
        .map_err(|_| Error::Data("truncated checkpoint manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest)
        .map_err(|e| Error::Data(format!("bad checkpoint manifest: {}", e)))?;
    if manifest.version != 1 {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    let mut buf = [0u8; 4];
    for meta in manifest.params {
        let numel: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Data("truncated checkpoint blob".into()))?;
            data.push(f32::from_le_bytes(buf));
        }
        params.push(Param {
            name: meta.name,
            value: Tensor::new(meta.shape, data)?,
        });
    }
    manifest.model.validate()?;
    Ok(NcnModel {
        cfg: manifest.model,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::stream_rng;
    use rand::SeedableRng;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            d: 6,
            d_prime: 8,
            k: 4,
            c: 3,
            variant,
        }
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    fn model(variant: Variant, seed: u64) -> NcnModel<f64> {
        let mut rng = stream_rng(seed, 2);
        NcnModel::init(cfg(variant), &mut rng).unwrap()
    }

    #[test]
    fn odd_k_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = ModelConfig { k: 3, ..cfg(Variant::Full) };
        assert!(NcnModel::<f32>::init(bad, &mut rng).is_err());
    }

    #[test]
    fn shape_theorem_even_k() {
        // two valid convs of height floor(K/2)+1 collapse K+1 to exactly 1
        for k in [2usize, 4, 6, 8, 10] {
            let c = ModelConfig { k, ..cfg(Variant::Full) };
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let m: NcnModel<f64> = NcnModel::init(c, &mut rng).unwrap();
            let grid = rand_tensor(vec![2, k + 1, 6], 1);
            let raw = rand_tensor(vec![2, 6], 2);
            let fp = m.forward(&grid, &raw, &[MaskRole::Keep; 2]).unwrap();
            assert_eq!(fp.tape.value(fp.logits).shape, vec![2, 3]);
        }
    }

    #[test]
    fn fusion_weights_sum_to_one() {
        let m = model(Variant::Full, 3);
        let grid = rand_tensor(vec![4, 5, 6], 5);
        let raw = rand_tensor(vec![4, 6], 6);
        let fp = m.forward(&grid, &raw, &[MaskRole::Keep; 4]).unwrap();
        let a = fp.tape.value(fp.weights.unwrap());
        for row in a.data.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            assert!(row[0] >= 0.0 && row[1] >= 0.0);
        }
    }

    #[test]
    fn zero_nbr_gate_ignores_grid_bitwise() {
        let m = model(Variant::Full, 4);
        let raw = rand_tensor(vec![3, 6], 7);
        let grid_a = rand_tensor(vec![3, 5, 6], 8);
        let grid_b = rand_tensor(vec![3, 5, 6], 9);
        let roles = [MaskRole::ZeroNbr; 3];
        let la = m.forward(&grid_a, &raw, &roles).unwrap();
        let lb = m.forward(&grid_b, &raw, &roles).unwrap();
        assert_eq!(
            la.tape.value(la.logits).data,
            lb.tape.value(lb.logits).data
        );
    }

    #[test]
    fn zero_raw_gate_ignores_raw_bitwise() {
        let m = model(Variant::Full, 4);
        let grid = rand_tensor(vec![3, 5, 6], 8);
        let raw_a = rand_tensor(vec![3, 6], 10);
        let raw_b = rand_tensor(vec![3, 6], 11);
        let roles = [MaskRole::ZeroRaw; 3];
        let la = m.forward(&grid, &raw_a, &roles).unwrap();
        let lb = m.forward(&grid, &raw_b, &roles).unwrap();
        assert_eq!(
            la.tape.value(la.logits).data,
            lb.tape.value(lb.logits).data
        );
    }

    #[test]
    fn no_ra_ignores_raw() {
        let m = model(Variant::NoRa, 5);
        let grid = rand_tensor(vec![2, 5, 6], 1);
        let la = m.forward(&grid, &rand_tensor(vec![2, 6], 2), &[MaskRole::Keep; 2]).unwrap();
        let lb = m.forward(&grid, &rand_tensor(vec![2, 6], 3), &[MaskRole::Keep; 2]).unwrap();
        assert_eq!(
            la.tape.value(la.logits).data,
            lb.tape.value(lb.logits).data
        );
        assert!(la.weights.is_none());
    }

    #[test]
    fn mlp_baseline_ignores_grid() {
        let m = model(Variant::MlpBaseline, 6);
        let raw = rand_tensor(vec![2, 6], 4);
        let la = m.forward(&rand_tensor(vec![2, 5, 6], 1), &raw, &[MaskRole::Keep; 2]).unwrap();
        let lb = m.forward(&rand_tensor(vec![2, 5, 6], 2), &raw, &[MaskRole::Keep; 2]).unwrap();
        assert_eq!(
            la.tape.value(la.logits).data,
            lb.tape.value(lb.logits).data
        );
    }

    #[test]
    fn identical_branches_give_half_half_weights() {
        // symmetric init is not guaranteed, but equal branch inputs plus a
        // fusion layer whose two output columns see the same input must give
        // a = softmax of two numbers; force symmetry by zeroing fusion.w
        let mut m = model(Variant::Full, 7);
        for p in &mut m.params {
            if p.name == "fusion.w" || p.name == "fusion.b" {
                p.value.data.fill(0.0);
            }
        }
        let grid = rand_tensor(vec![2, 5, 6], 3);
        let raw = rand_tensor(vec![2, 6], 4);
        let fp = m.forward(&grid, &raw, &[MaskRole::Keep; 2]).unwrap();
        let a = fp.tape.value(fp.weights.unwrap());
        for row in a.data.chunks(2) {
            assert_eq!(row, [0.5, 0.5]);
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let m = model(Variant::Full, 8);
        let grid = rand_tensor(vec![4, 5, 6], 5);
        let raw = rand_tensor(vec![4, 6], 6);
        let fp = m.forward(&grid, &raw, &[MaskRole::Keep; 4]).unwrap();
        let logits = fp.tape.value(fp.logits).data.clone();
        // reverse the batch
        let perm: Vec<usize> = (0..4).rev().collect();
        let gather = |t: &Tensor<f64>, stride: usize| -> Tensor<f64> {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(&t.data[i * stride..(i + 1) * stride]);
            }
            Tensor::new(t.shape.clone(), data).unwrap()
        };
        let fp2 = m
            .forward(&gather(&grid, 30), &gather(&raw, 6), &[MaskRole::Keep; 4])
            .unwrap();
        let logits2 = fp2.tape.value(fp2.logits).data.clone();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(&logits2[i * 3..(i + 1) * 3], &logits[src * 3..(src + 1) * 3]);
        }
    }

    #[test]
    fn mask_plan_sizes() {
        let ids: Vec<usize> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = sample_mask_plan(&ids, 0.3, &mut rng).unwrap();
        assert_eq!(plan.count(MaskRole::ZeroRaw), 30);
        assert_eq!(plan.count(MaskRole::ZeroNbr), 30);
        assert_eq!(plan.count(MaskRole::Keep), 40);

        let empty = sample_mask_plan(&ids, 0.0, &mut rng).unwrap();
        assert_eq!(empty.count(MaskRole::ZeroRaw), 0);
        assert_eq!(empty.count(MaskRole::ZeroNbr), 0);

        assert!(sample_mask_plan(&ids, 0.5, &mut rng).is_err());
    }

    #[test]
    fn mask_plan_frequency() {
        let ids: Vec<usize> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let beta = 0.2;
        let mut hits = vec![0usize; 50];
        let resamples = 1000;
        for _ in 0..resamples {
            let plan = sample_mask_plan(&ids, beta, &mut rng).unwrap();
            for &v in &ids {
                if plan.role(v) == MaskRole::ZeroRaw {
                    hits[v] += 1;
                }
            }
        }
        for &h in &hits {
            let freq = h as f64 / resamples as f64;
            assert!((freq - beta).abs() < 0.05, "frequency {}", freq);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: NcnModel<f32> = NcnModel::init(cfg(Variant::Full), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let m2 = load_checkpoint(&path).unwrap();
        assert_eq!(m.params.len(), m2.params.len());
        for (a, b) in m.params.iter().zip(&m2.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(m.cfg.k, m2.cfg.k);
    }
}
