//! Training: L1 loss against stored marginal estimates, reverse-mode
//! gradients through soft marginals, softmax, and the MLP, and the
//! full-batch descent loop with early stopping.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{GeneratorModel, Layer};
use crate::error::{Error, Result};
use crate::exec;
use crate::store::MeasurementStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Gradient steps per round.
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Stop once the relative loss change stays below this...
    pub early_stop_tol: f64,
    /// ...for this many consecutive iterations.
    pub early_stop_patience: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 100,
            learning_rate: 1e-3,
            early_stop_tol: 1e-4,
            early_stop_patience: 10,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::config("max_iters must be >= 1"));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::config("early_stop_patience must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.early_stop_tol.is_finite() && self.early_stop_tol >= 0.0) {
            return Err(Error::config(format!(
                "early_stop_tol must be nonnegative, got {}",
                self.early_stop_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitRoundOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iters_used: usize,
}

/// One measurement's normalized target, with the layout needed to walk it.
struct Target {
    cols: Vec<usize>,
    strides: Vec<usize>,
    values: Vec<f64>,
}

fn build_targets(model: &GeneratorModel, store: &MeasurementStore, n: f64) -> Result<Vec<Target>> {
    if store.is_empty() {
        return Err(Error::config("training requires a nonempty store"));
    }
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::config(format!("record count must be positive, got {n}")));
    }
    let schema = model.schema();
    store
        .measurements()
        .map(|m| {
            let size = m.query.domain_size(schema)?;
            if m.estimate.values.len() != size {
                return Err(Error::data(format!(
                    "stored estimate for {} has {} cells, expected {size}",
                    m.query,
                    m.estimate.values.len()
                )));
            }
            Ok(Target {
                cols: m.query.columns().to_vec(),
                strides: m.query.strides(schema)?,
                values: m.estimate.values.iter().map(|v| v / n).collect(),
            })
        })
        .collect()
}

/// Mean L1 distance between the model's soft marginals and the stored
/// estimates normalized by `n`.
pub fn loss(model: &GeneratorModel, store: &MeasurementStore, n: f64) -> Result<f64> {
    let targets = build_targets(model, store, n)?;
    let rows = model.forward()?;
    let schema = model.schema();
    let terms = exec::map_ordered(&targets, |t| {
        let q = crate::table::MarginalQuery::new(t.cols.clone());
        let soft = rows.soft_marginal(&q, schema).expect("validated query");
        soft.values
            .iter()
            .zip(&t.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    });
    Ok(terms.iter().sum::<f64>() / targets.len() as f64)
}

/// Loss plus its gradient for every parameter, flattened in
/// `flat_params` order. Exposed for gradient verification.
pub fn loss_gradients(
    model: &GeneratorModel,
    store: &MeasurementStore,
    n: f64,
) -> Result<(f64, Vec<f64>)> {
    let targets = build_targets(model, store, n)?;
    let (loss, grads) = evaluate(model, &targets)?;
    Ok((loss, grads.flat()))
}

pub(crate) struct Grads {
    layers: Vec<LayerGrad>,
}

struct LayerGrad {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Grads {
    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }
}

struct ForwardCache {
    /// acts[l] is the input to layer l; acts[0] is the latent batch.
    acts: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer, for the ReLU mask.
    pres: Vec<Array2<f64>>,
    blocks: Vec<Array2<f64>>,
}

fn forward_cached(model: &GeneratorModel) -> Result<ForwardCache> {
    let last = model.layers.len() - 1;
    let mut acts = vec![model.z().clone()];
    let mut pres = Vec::with_capacity(last);
    for layer in &model.layers[..last] {
        let pre = acts.last().unwrap().dot(&layer.w) + &layer.b;
        let mut act = pre.clone();
        act.mapv_inplace(|v| v.max(0.0));
        pres.push(pre);
        acts.push(act);
    }
    let logits = acts.last().unwrap().dot(&model.layers[last].w) + &model.layers[last].b;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "non-finite activation in forward pass; reduce the learning rate",
        ));
    }
    let blocks = super::split_softmax(&logits, model.schema());
    Ok(ForwardCache { acts, pres, blocks })
}

/// Loss and parameter gradients at the model's current weights.
fn evaluate(model: &GeneratorModel, targets: &[Target]) -> Result<(f64, Grads)> {
    let cache = forward_cached(model)?;
    let batch = model.batch_size();
    let scale = 1.0 / targets.len() as f64;

    // Per-target passes are independent; each yields its raw L1 term and
    // the adjoints of the blocks it touches. The fold below runs in target
    // order, so the result is identical with and without parallelism.
    let passes = exec::map_ordered(targets, |t| target_pass(&cache.blocks, t, scale, batch));

    let mut dblocks: Vec<Array2<f64>> = cache
        .blocks
        .iter()
        .map(|b| Array2::zeros(b.raw_dim()))
        .collect();
    let mut total = 0.0;
    for (term, contribs) in passes {
        total += term;
        for (col, contrib) in contribs {
            dblocks[col] += &contrib;
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, backward(model, &cache, &dblocks)))
}

/// One measurement's loss term (raw L1) and block adjoints, with the
/// 1/|M| loss scaling already folded into the adjoints.
fn target_pass(
    blocks: &[Array2<f64>],
    target: &Target,
    scale: f64,
    batch: usize,
) -> (f64, Vec<(usize, Array2<f64>)>) {
    let involved: Vec<&Array2<f64>> = target.cols.iter().map(|&c| &blocks[c]).collect();
    let mut dblocks: Vec<Array2<f64>> = involved
        .iter()
        .map(|b| Array2::zeros(b.raw_dim()))
        .collect();
    let ones = vec![1.0; batch];
    let mut term = 0.0;
    grad_rec(
        &involved,
        &target.strides,
        0,
        &ones,
        &mut dblocks,
        &target.values,
        &mut term,
        scale,
        1.0 / batch as f64,
        batch,
    );
    (term, target.cols.iter().copied().zip(dblocks).collect())
}

/// Walks the query's cell tree once. Downward it carries the running
/// product over earlier factors; at each leaf it scores the cell; upward
/// it returns the collapsed vector R with R[b] = Σ_cells g_cell · (product
/// of later factors for row b), which is exactly what the chain rule needs
/// to credit each block column: dC_v = prefix ⊙ R_child.
#[allow(clippy::too_many_arguments)]
fn grad_rec(
    blocks: &[&Array2<f64>],
    strides: &[usize],
    base: usize,
    prefix: &[f64],
    dblocks: &mut [Array2<f64>],
    tvals: &[f64],
    term: &mut f64,
    scale: f64,
    inv_b: f64,
    batch: usize,
) -> Vec<f64> {
    let Some((block, rest_blocks)) = blocks.split_first() else {
        let soft: f64 = prefix.iter().sum::<f64>() * inv_b;
        let diff = soft - tvals[base];
        *term += diff.abs();
        // L1 subgradient: zero exactly at the kink.
        let g = if diff > 0.0 {
            scale
        } else if diff < 0.0 {
            -scale
        } else {
            0.0
        };
        return vec![g * inv_b; batch];
    };
    let (&stride, rest_strides) = strides.split_first().unwrap();
    let (dblock, rest_dblocks) = dblocks.split_first_mut().unwrap();
    let mut collapsed = vec![0.0; batch];
    let mut child = vec![0.0; batch];
    for v in 0..block.ncols() {
        let col = block.column(v);
        for ((c, &p), &cv) in child.iter_mut().zip(prefix).zip(col.iter()) {
            *c = p * cv;
        }
        let r = grad_rec(
            rest_blocks,
            rest_strides,
            base + v * stride,
            &child,
            rest_dblocks,
            tvals,
            term,
            scale,
            inv_b,
            batch,
        );
        let mut dcol = dblock.column_mut(v);
        for ((d, &p), &rv) in dcol.iter_mut().zip(prefix).zip(r.iter()) {
            *d += p * rv;
        }
        for ((cl, &cv), &rv) in collapsed.iter_mut().zip(col.iter()).zip(r.iter()) {
            *cl += cv * rv;
        }
    }
    collapsed
}

fn backward(model: &GeneratorModel, cache: &ForwardCache, dblocks: &[Array2<f64>]) -> Grads {
    let batch = model.batch_size();
    let offsets = model.block_offsets();

    // Softmax jacobian per row: dlogit_i = p_i · (dp_i − Σ_j dp_j p_j).
    let mut dlogits = Array2::zeros((batch, model.schema().total_width()));
    for (j, dblock) in dblocks.iter().enumerate() {
        let probs = &cache.blocks[j];
        let k = probs.ncols();
        for row in 0..batch {
            let mut dot = 0.0;
            for i in 0..k {
                dot += dblock[(row, i)] * probs[(row, i)];
            }
            for i in 0..k {
                dlogits[(row, offsets[j] + i)] = probs[(row, i)] * (dblock[(row, i)] - dot);
            }
        }
    }

    let n_layers = model.layers.len();
    let mut layers: Vec<LayerGrad> = Vec::with_capacity(n_layers);
    let mut dcur = dlogits;
    for l in (0..n_layers).rev() {
        let input = &cache.acts[l];
        layers.push(LayerGrad {
            w: input.t().dot(&dcur),
            b: dcur.sum_axis(Axis(0)),
        });
        if l > 0 {
            let mut dprev = dcur.dot(&model.layers[l].w.t());
            dprev.zip_mut_with(&cache.pres[l - 1], |d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
            dcur = dprev;
        }
    }
    layers.reverse();
    Grads { layers }
}

enum OptState {
    Sgd,
    Adam {
        m: Vec<LayerGrad>,
        v: Vec<LayerGrad>,
        step: u64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptState {
    fn new(model: &GeneratorModel, optimizer: Optimizer) -> Self {
        match optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => {
                let zeros = || {
                    model
                        .layers
                        .iter()
                        .map(|l| LayerGrad {
                            w: Array2::zeros(l.w.raw_dim()),
                            b: Array1::zeros(l.b.raw_dim()),
                        })
                        .collect()
                };
                OptState::Adam {
                    m: zeros(),
                    v: zeros(),
                    step: 0,
                    beta1,
                    beta2,
                    eps,
                }
            }
        }
    }

    fn apply(&mut self, layers: &mut [Layer], grads: &Grads, lr: f64) {
        match self {
            OptState::Sgd => {
                for (layer, g) in layers.iter_mut().zip(&grads.layers) {
                    layer.w.zip_mut_with(&g.w, |w, &gw| *w -= lr * gw);
                    layer.b.zip_mut_with(&g.b, |b, &gb| *b -= lr * gb);
                }
            }
            OptState::Adam {
                m,
                v,
                step,
                beta1,
                beta2,
                eps,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for ((layer, g), (ms, vs)) in
                    layers.iter_mut().zip(&grads.layers).zip(m.iter_mut().zip(v.iter_mut()))
                {
                    adam_update(
                        layer.w.as_slice_mut().unwrap(),
                        g.w.as_slice().unwrap(),
                        ms.w.as_slice_mut().unwrap(),
                        vs.w.as_slice_mut().unwrap(),
                        lr,
                        *beta1,
                        *beta2,
                        *eps,
                        bc1,
                        bc2,
                    );
                    adam_update(
                        layer.b.as_slice_mut().unwrap(),
                        g.b.as_slice().unwrap(),
                        ms.b.as_slice_mut().unwrap(),
                        vs.b.as_slice_mut().unwrap(),
                        lr,
                        *beta1,
                        *beta2,
                        *eps,
                        bc1,
                        bc2,
                    );
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Runs up to `max_iters` full-batch steps against the store's estimates,
/// stopping early once the relative loss change stays below the tolerance
/// for `patience` consecutive iterations. Returns the losses bracketing
/// the round and the number of parameter updates applied.
pub fn fit_round(
    model: &mut GeneratorModel,
    store: &MeasurementStore,
    n: f64,
    cfg: &TrainConfig,
) -> Result<FitRoundOutcome> {
    cfg.validate()?;
    let targets = build_targets(model, store, n)?;
    let mut opt = OptState::new(model, cfg.optimizer);
    let mut initial = 0.0;
    let mut prev: Option<f64> = None;
    let mut streak = 0usize;
    let mut iters = 0usize;
    for i in 0..cfg.max_iters {
        let (cur, grads) =
            evaluate(model, &targets).map_err(|e| Error::numeric(format!("iteration {i}: {e}")))?;
        if prev.is_none() {
            initial = cur;
        }
        if let Some(p) = prev {
            let rel = (cur - p).abs() / p.max(1e-12);
            if rel < cfg.early_stop_tol {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak >= cfg.early_stop_patience {
                return Ok(FitRoundOutcome {
                    initial_loss: initial,
                    final_loss: cur,
                    iters_used: iters,
                });
            }
        }
        prev = Some(cur);
        opt.apply(&mut model.layers, &grads, cfg.learning_rate);
        iters = i + 1;
    }
    let final_loss = loss_of(model, &targets)?;
    Ok(FitRoundOutcome {
        initial_loss: initial,
        final_loss,
        iters_used: iters,
    })
}

fn loss_of(model: &GeneratorModel, targets: &[Target]) -> Result<f64> {
    let cache = forward_cached(model)?;
    let batch = model.batch_size();
    let terms = exec::map_ordered(targets, |t| target_loss(&cache.blocks, t, batch));
    Ok(terms.iter().sum::<f64>() / targets.len() as f64)
}

fn target_loss(blocks: &[Array2<f64>], target: &Target, batch: usize) -> f64 {
    let involved: Vec<&Array2<f64>> = target.cols.iter().map(|&c| &blocks[c]).collect();
    let ones = vec![1.0; batch];
    loss_rec(&involved, &target.strides, 0, &ones, &target.values, 1.0 / batch as f64)
}

fn loss_rec(
    blocks: &[&Array2<f64>],
    strides: &[usize],
    base: usize,
    prefix: &[f64],
    tvals: &[f64],
    inv_b: f64,
) -> f64 {
    let Some((block, rest_blocks)) = blocks.split_first() else {
        let soft: f64 = prefix.iter().sum::<f64>() * inv_b;
        return (soft - tvals[base]).abs();
    };
    let (&stride, rest_strides) = strides.split_first().unwrap();
    let mut total = 0.0;
    let mut child = vec![0.0; prefix.len()];
    for v in 0..block.ncols() {
        let col = block.column(v);
        for ((c, &p), &cv) in child.iter_mut().zip(prefix).zip(col.iter()) {
            *c = p * cv;
        }
        total += loss_rec(rest_blocks, rest_strides, base + v * stride, &child, tvals, inv_b);
    }
    total
}
