//! Mini-batch training loop, evaluation, multi-run aggregation, propagation-
//! step sweeps, and epoch-time benchmarking.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_split, stream_rng, SplitSpec, STREAM_INIT, STREAM_MASK, STREAM_SHUFFLE};
use crate::error::{Error, Result};
use crate::gna::{propagate, GridTensor, PropagationSpec, Scheme};
use crate::graph::{normalize_adjacency, Graph};
use crate::model::{
    argmax_rows, gather_batch, sample_mask_plan, MaskRole, ModelConfig, NcnModel, Variant,
};
use crate::tensor::{adamw_step, AdamState, AdamWConfig, Tensor};

fn default_batch_size() -> usize {
    1000
}
fn default_patience() -> usize {
    50
}
fn default_max_epochs() -> usize {
    1000
}
fn default_runs() -> usize {
    10
}
fn default_gamma() -> f64 {
    0.1
}
fn default_scheme() -> Scheme {
    Scheme::Ppr
}
fn default_variant() -> Variant {
    Variant::Full
}

/// Every training hyperparameter. Defaults follow the reference setup:
/// batch size 1000, early-stopping patience 50, ten runs with random splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d_prime: usize,
    pub beta: f64,
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub stratify: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_prime == 0 {
            return Err(Error::Config("d_prime must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 0.5)", self.beta)));
        }
        if self.variant.uses_grid() && (self.k < 2 || self.k % 2 != 0) {
            return Err(Error::Config(format!("K = {} must be even and >= 2", self.k)));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("lr must be >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.runs == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, runs must be positive".into(),
            ));
        }
        self.propagation().validate()
    }

    pub fn propagation(&self) -> PropagationSpec {
        PropagationSpec {
            scheme: self.scheme,
            k: self.k,
            gamma: self.gamma,
        }
    }

    pub fn model_config(&self, graph: &Graph) -> ModelConfig {
        ModelConfig {
            d: graph.d,
            d_prime: self.d_prime,
            k: self.k,
            c: graph.c,
            variant: self.variant,
        }
    }
}

/// Record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    pub wall_time_secs: f64,
}

/// Train one model on the given split per the mini-batch loop: every epoch
/// resamples the mask partition, shuffles train ids, and steps AdamW per
/// batch; validation accuracy drives early stopping and the best-validation
/// parameters are restored at the end.
pub fn train(
    graph: &Graph,
    grid: &GridTensor,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<(NcnModel<f32>, RunMetrics)> {
    cfg.validate()?;
    if grid.k != cfg.k {
        return Err(Error::Config(format!(
            "grid tensor has K = {}, config has K = {}",
            grid.k, cfg.k
        )));
    }
    grid.ensure_matches(graph)?;
    if split.train.is_empty() {
        return Err(Error::Config("empty train set".into()));
    }
    let start = Instant::now();
    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut model: NcnModel<f32> = NcnModel::init(cfg.model_config(graph), &mut init_rng)?;
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut mask_rng = stream_rng(cfg.seed, STREAM_MASK);

    let adam = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let mut states: Vec<AdamState<f32>> =
        model.params.iter().map(|p| AdamState::new(p.value.numel())).collect();
    let mut step = 0usize;

    let mut train_ids = split.train.clone();
    let mut metrics = RunMetrics {
        seed: cfg.seed,
        train_loss: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        test_accuracy: 0.0,
        epochs_run: 0,
        wall_time_secs: 0.0,
    };
    let mut best_params: Option<Vec<Tensor<f32>>> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        // the mask path is fully bypassed unless the full variant asks for it
        let plan = if cfg.variant == Variant::Full && cfg.beta > 0.0 {
            Some(sample_mask_plan(&split.train, cfg.beta, &mut mask_rng)?)
        } else {
            None
        };
        use rand::seq::SliceRandom;
        train_ids.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in train_ids.chunks(cfg.batch_size) {
            let roles: Vec<MaskRole> = match &plan {
                Some(p) => batch.iter().map(|&v| p.role(v)).collect(),
                None => vec![MaskRole::Keep; batch.len()],
            };
            let (gb, rb) = gather_batch::<f32>(grid, graph, batch)?;
            let targets: Vec<usize> = batch.iter().map(|&v| graph.y[v]).collect();
            let mut fp = model.forward(&gb, &rb, &roles)?;
            let logp = fp.tape.log_softmax_last_dim(fp.logits)?;
            let loss = fp.tape.nll_loss(logp, &targets)?;
            let loss_val = fp.tape.value(loss).data[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {}", loss_val)));
            }
            fp.tape.backward(loss)?;
            step += 1;
            if cfg.lr > 0.0 {
                for ((param, state), &id) in
                    model.params.iter_mut().zip(&mut states).zip(&fp.param_ids)
                {
                    adamw_step(&mut param.value.data, fp.tape.grad(id), state, &adam, step)?;
                }
            }
            loss_sum += loss_val * batch.len() as f64;
            loss_count += batch.len();
        }
        metrics.train_loss.push(loss_sum / loss_count as f64);

        let val_acc = evaluate(&model, grid, graph, &split.val)?;
        metrics.val_accuracy.push(val_acc);
        metrics.epochs_run = epoch + 1;
        if val_acc > metrics.best_val_accuracy {
            metrics.best_val_accuracy = val_acc;
            metrics.best_epoch = epoch;
            best_params = Some(model.params.iter().map(|p| p.value.clone()).collect());
            stale = 0;
        } else {
            // ties do not reset patience
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for (p, v) in model.params.iter_mut().zip(best) {
            p.value = v;
        }
    }
    metrics.test_accuracy = evaluate(&model, grid, graph, &split.test)?;
    metrics.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, metrics))
}

/// Fraction of argmax-correct predictions over the given nodes, masking
/// disabled.
pub fn evaluate(
    model: &NcnModel<f32>,
    grid: &GridTensor,
    graph: &Graph,
    node_ids: &[usize],
) -> Result<f64> {
    if node_ids.is_empty() {
        return Err(Error::Config("evaluate on empty node set".into()));
    }
    let mut correct = 0usize;
    for chunk in node_ids.chunks(1024) {
        let (gb, rb) = gather_batch::<f32>(grid, graph, chunk)?;
        let fp = model.forward(&gb, &rb, &vec![MaskRole::Keep; chunk.len()])?;
        let preds = argmax_rows(&fp.tape.value(fp.logits).data, model.cfg.c);
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|&(&p, &v)| p == graph.y[v])
            .count();
    }
    Ok(correct as f64 / node_ids.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiRunResult {
    pub runs: Vec<RunMetrics>,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run `cfg.runs` independent trainings with fresh random splits; run i uses
/// master seed `cfg.seed + i`. Runs execute in parallel, each with isolated
/// parameters and RNG streams.
pub fn run_many(graph: &Graph, grid: &GridTensor, cfg: &TrainConfig) -> Result<MultiRunResult> {
    cfg.validate()?;
    let runs: Vec<RunMetrics> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let labels = cfg.stratify.then_some(graph.y.as_slice());
            let split = make_split(graph.n, (0.6, 0.2, 0.2), seed, labels)?;
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let (_, metrics) = train(graph, grid, &split, &run_cfg)?;
            Ok(metrics)
        })
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(MultiRunResult {
        runs,
        mean_test_accuracy: mean,
        std_test_accuracy: std,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Re-run preprocessing and the full multi-run evaluation for each K.
/// Output rows are sorted ascending by K.
pub fn sweep_k(graph: &Graph, cfg: &TrainConfig, k_values: &[usize]) -> Result<Vec<SweepRow>> {
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    let adj = normalize_adjacency(graph);
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let k_cfg = TrainConfig { k, ..cfg.clone() };
        let grid = propagate(graph, &adj, &k_cfg.propagation())?;
        let result = run_many(graph, &grid, &k_cfg)?;
        rows.push(SweepRow {
            k,
            mean_accuracy: result.mean_test_accuracy,
            std_accuracy: result.std_test_accuracy,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochTimeRow {
    pub edges: usize,
    pub preprocess_ms: f64,
    pub mean_epoch_ms: f64,
}

/// Measure per-epoch training time with the grid prebuilt outside the timed
/// region, one row per graph. Used to check that training cost tracks node
/// count, not edge count.
pub fn benchmark_epoch_time(
    graphs: &[Graph],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochTimeRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(graphs.len());
    for graph in graphs {
        let pre_start = Instant::now();
        let adj = normalize_adjacency(graph);
        let grid = propagate(graph, &adj, &cfg.propagation())?;
        let preprocess_ms = pre_start.elapsed().as_secs_f64() * 1e3;

        let split = make_split(graph.n, (0.6, 0.2, 0.2), cfg.seed, None)?;
        let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
        let mut model: NcnModel<f32> = NcnModel::init(cfg.model_config(graph), &mut init_rng)?;
        let adam = AdamWConfig::new(cfg.lr, cfg.weight_decay);
        let mut states: Vec<AdamState<f32>> =
            model.params.iter().map(|p| AdamState::new(p.value.numel())).collect();
        let mut step = 0usize;
        // one warm-up epoch outside the timed region
        let mut total = 0.0;
        for epoch in 0..=epochs {
            let t0 = Instant::now();
            for batch in split.train.chunks(cfg.batch_size) {
                let (gb, rb) = gather_batch::<f32>(&grid, graph, batch)?;
                let targets: Vec<usize> = batch.iter().map(|&v| graph.y[v]).collect();
                let mut fp = model.forward(&gb, &rb, &vec![MaskRole::Keep; batch.len()])?;
                let logp = fp.tape.log_softmax_last_dim(fp.logits)?;
                let loss = fp.tape.nll_loss(logp, &targets)?;
                fp.tape.backward(loss)?;
                step += 1;
                for ((param, state), &id) in
                    model.params.iter_mut().zip(&mut states).zip(&fp.param_ids)
                {
                    adamw_step(&mut param.value.data, fp.tape.grad(id), state, &adam, step)?;
                }
            }
            if epoch > 0 {
                total += t0.elapsed().as_secs_f64() * 1e3;
            }
        }
        rows.push(EpochTimeRow {
            edges: graph.edge_count(),
            preprocess_ms,
            mean_epoch_ms: total / epochs as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_sbm, SbmSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            d_prime: 16,
            beta: 0.1,
            k: 2,
            lr: 1e-3,
            weight_decay: 1e-4,
            gamma: 0.1,
            scheme: Scheme::Ppr,
            batch_size: 1000,
            patience: 10,
            max_epochs: 30,
            seed: 17,
            variant: Variant::Full,
            runs: 2,
            stratify: false,
        }
    }

    fn sbm_graph(seed: u64) -> Graph {
        generate_sbm(&SbmSpec {
            n: 120,
            c: 2,
            p_in: 0.1,
            p_out: 0.01,
            feat_dim: 8,
            mu: 1.5,
            sigma: 1.0,
            seed,
        })
        .unwrap()
    }

    fn grid_for(graph: &Graph, cfg: &TrainConfig) -> GridTensor {
        let adj = normalize_adjacency(graph);
        propagate(graph, &adj, &cfg.propagation()).unwrap()
    }

    #[test]
    fn fixed_seed_reproduces_exactly() {
        let g = sbm_graph(1);
        let cfg = TrainConfig { max_epochs: 5, ..small_cfg() };
        let grid = grid_for(&g, &cfg);
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        let (_, m1) = train(&g, &grid, &split, &cfg).unwrap();
        let (_, m2) = train(&g, &grid, &split, &cfg).unwrap();
        assert_eq!(m1.train_loss, m2.train_loss);
        assert_eq!(m1.val_accuracy, m2.val_accuracy);
        assert_eq!(m1.test_accuracy, m2.test_accuracy);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let g = sbm_graph(2);
        let cfg = TrainConfig { lr: 0.0, max_epochs: 4, ..small_cfg() };
        let grid = grid_for(&g, &cfg);
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        let (model, metrics) = train(&g, &grid, &split, &cfg).unwrap();
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let fresh: NcnModel<f32> = NcnModel::init(cfg.model_config(&g), &mut rng).unwrap();
        for (a, b) in model.params.iter().zip(&fresh.params) {
            assert_eq!(a.value, b.value);
        }
        assert!(metrics.val_accuracy.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn first_epoch_loss_near_ln_c() {
        let g = sbm_graph(3);
        let cfg = TrainConfig { max_epochs: 1, ..small_cfg() };
        let grid = grid_for(&g, &cfg);
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        let (_, metrics) = train(&g, &grid, &split, &cfg).unwrap();
        let ln_c = (g.c as f64).ln();
        assert!(
            (metrics.train_loss[0] - ln_c).abs() < 0.1 * ln_c,
            "first-epoch loss {} vs ln(c) {}",
            metrics.train_loss[0],
            ln_c
        );
    }

    #[test]
    fn loss_trend_non_increasing() {
        let g = sbm_graph(4);
        let cfg = TrainConfig { max_epochs: 20, patience: 20, ..small_cfg() };
        let grid = grid_for(&g, &cfg);
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        let (_, metrics) = train(&g, &grid, &split, &cfg).unwrap();
        // best-fit slope over the first 20 epochs
        let ys = &metrics.train_loss;
        let n = ys.len() as f64;
        let mean_x = (n - 1.0) / 2.0;
        let mean_y = ys.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, y) in ys.iter().enumerate() {
            num += (i as f64 - mean_x) * (y - mean_y);
            den += (i as f64 - mean_x).powi(2);
        }
        assert!(num / den <= 0.0, "loss slope {} > 0", num / den);
    }

    #[test]
    fn best_params_reproduce_best_val_accuracy() {
        let g = sbm_graph(5);
        let cfg = TrainConfig { max_epochs: 15, ..small_cfg() };
        let grid = grid_for(&g, &cfg);
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        let (model, metrics) = train(&g, &grid, &split, &cfg).unwrap();
        let re_eval = evaluate(&model, &grid, &g, &split.val).unwrap();
        assert_eq!(re_eval, metrics.best_val_accuracy);
    }

    #[test]
    fn no_mask_equals_beta_zero() {
        let g = sbm_graph(6);
        let base = TrainConfig { max_epochs: 6, ..small_cfg() };
        let grid = grid_for(&g, &base);
        let split = make_split(g.n, (0.6, 0.2, 0.2), base.seed, None).unwrap();
        let no_mask = TrainConfig { variant: Variant::NoMask, beta: 0.3, ..base.clone() };
        let beta_zero = TrainConfig { beta: 0.0, ..base };
        let (_, m1) = train(&g, &grid, &split, &no_mask).unwrap();
        let (_, m2) = train(&g, &grid, &split, &beta_zero).unwrap();
        assert_eq!(m1.train_loss, m2.train_loss);
        assert_eq!(m1.test_accuracy, m2.test_accuracy);
    }

    #[test]
    fn k_mismatch_rejected() {
        let g = sbm_graph(7);
        let cfg = small_cfg();
        let grid = grid_for(&g, &TrainConfig { k: 4, ..cfg.clone() });
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        assert!(matches!(
            train(&g, &grid, &split, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_train_set_rejected() {
        let g = sbm_graph(8);
        let cfg = small_cfg();
        let grid = grid_for(&g, &cfg);
        let split = SplitSpec {
            train: vec![],
            val: vec![0, 1],
            test: vec![2, 3],
        };
        assert!(train(&g, &grid, &split, &cfg).is_err());
    }

    #[test]
    fn evaluate_trivial_cases() {
        let g = sbm_graph(9);
        let cfg = small_cfg();
        let grid = grid_for(&g, &cfg);
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        let (model, _) = train(&g, &grid, &split, &TrainConfig { max_epochs: 2, ..cfg }).unwrap();
        assert!(evaluate(&model, &grid, &g, &[]).is_err());
        let acc = evaluate(&model, &grid, &g, &split.test).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn mlp_baseline_learns_separable_features() {
        let g = generate_sbm(&SbmSpec {
            n: 200,
            c: 2,
            p_in: 0.05,
            p_out: 0.05,
            feat_dim: 8,
            mu: 3.0,
            sigma: 0.5,
            seed: 10,
        })
        .unwrap();
        let cfg = TrainConfig {
            variant: Variant::MlpBaseline,
            max_epochs: 60,
            patience: 60,
            ..small_cfg()
        };
        let grid = grid_for(&g, &cfg);
        let split = make_split(g.n, (0.6, 0.2, 0.2), cfg.seed, None).unwrap();
        let (model, _) = train(&g, &grid, &split, &cfg).unwrap();
        let train_acc = evaluate(&model, &grid, &g, &split.train).unwrap();
        assert!(train_acc > 0.95, "train accuracy {}", train_acc);
    }

    #[test]
    fn sweep_single_k() {
        let g = sbm_graph(11);
        let cfg = TrainConfig { max_epochs: 3, runs: 1, ..small_cfg() };
        let rows = sweep_k(&g, &cfg, &[2]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].k, 2);
    }
}
