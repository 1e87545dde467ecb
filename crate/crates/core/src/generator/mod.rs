//! Generator network: a fixed Gaussian latent batch mapped through a small
//! ReLU MLP to per-column categorical distributions.
//!
//! Soft marginals of those distributions are differentiable stand-ins for
//! sampled marginals, so the model trains directly against noisy marginal
//! estimates. Discrete tables are sampled from fresh latents afterwards.

mod train;

pub use train::{fit_round, loss, loss_gradients, FitRoundOutcome, Optimizer, TrainConfig};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::table::{DiscreteTable, MarginalQuery, MarginalVector, Space};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Rows drawn per forward pass while sampling.
const SAMPLE_CHUNK: usize = 8192;

/// RNG streams carved out of the model seed.
const STREAM_WEIGHTS: u64 = 0;
const STREAM_LATENT: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// The generator: fixed latent batch `z` (B x latent_dim) plus an MLP whose
/// output width is the sum of column cardinalities.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    schema: Schema,
    latent_dim: usize,
    hidden_dims: Vec<usize>,
    batch_size: usize,
    seed: u64,
    /// Row count of the fitting data, when known; lets sampling default to
    /// the original size. Public metadata, not a measurement.
    n_rows: Option<u64>,
    z: Array2<f64>,
    pub(crate) layers: Vec<Layer>,
}

impl GeneratorModel {
    /// Initializes weights (scaled-uniform by fan-in) and the fixed latent
    /// batch from `seed`. Deterministic given all arguments.
    pub fn init(
        schema: &Schema,
        latent_dim: Option<usize>,
        hidden_dims: Option<Vec<usize>>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = schema.arity();
        if d == 0 {
            return Err(Error::config("schema has no columns"));
        }
        let latent_dim = latent_dim.unwrap_or(d);
        let hidden_dims = hidden_dims.unwrap_or_else(|| vec![(4 * d).max(128); 2]);
        let out_width = schema.total_width();
        if batch_size == 0 {
            return Err(Error::config("latent batch size must be >= 1"));
        }
        if latent_dim == 0 || hidden_dims.iter().any(|&h| h == 0) || out_width == 0 {
            return Err(Error::config("generator layers must all have width >= 1"));
        }

        let mut dims = vec![latent_dim];
        dims.extend_from_slice(&hidden_dims);
        dims.push(out_width);

        let mut wrng = ChaCha20Rng::seed_from_u64(seed);
        wrng.set_stream(STREAM_WEIGHTS);
        let layers = dims
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut uniform = || wrng.random::<f64>() * 2.0 * bound - bound;
                let w = Array2::from_shape_fn((fan_in, fan_out), |_| uniform());
                let b = Array1::from_shape_fn(fan_out, |_| uniform());
                Layer { w, b }
            })
            .collect();

        let mut zrng = ChaCha20Rng::seed_from_u64(seed);
        zrng.set_stream(STREAM_LATENT);
        let z = Array2::from_shape_fn((batch_size, latent_dim), |_| {
            zrng.sample::<f64, _>(StandardNormal)
        });

        Ok(GeneratorModel {
            schema: schema.clone(),
            latent_dim,
            hidden_dims,
            batch_size,
            seed,
            n_rows: None,
            z,
            layers,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> Option<u64> {
        self.n_rows
    }

    pub fn set_n_rows(&mut self, n: u64) {
        self.n_rows = Some(n);
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn z(&self) -> &Array2<f64> {
        &self.z
    }

    /// Start offset of each column's block in the output layer.
    pub(crate) fn block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.schema.arity());
        let mut acc = 0usize;
        for k in self.schema.cardinalities() {
            offsets.push(acc);
            acc += k;
        }
        offsets
    }

    /// Pushes arbitrary latent rows through the network to per-column
    /// probability blocks.
    fn forward_on(&self, latents: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let mut act = latents.clone();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            act = act.dot(&layer.w) + &layer.b;
            act.mapv_inplace(|v| v.max(0.0));
        }
        let logits = act.dot(&self.layers[last].w) + &self.layers[last].b;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "non-finite activation in forward pass; reduce the learning rate",
            ));
        }
        Ok(split_softmax(&logits, &self.schema))
    }

    /// The fixed latent batch through the network.
    pub fn forward(&self) -> Result<SoftRows> {
        Ok(SoftRows {
            blocks: self.forward_on(&self.z)?,
        })
    }

    /// Draws `n_out` discrete rows from fresh standard-normal latents. The
    /// fixed training batch is not reused, so output is exchangeable and
    /// unbounded in size.
    pub fn sample<R: Rng>(&self, n_out: usize, rng: &mut R) -> Result<DiscreteTable> {
        let d = self.schema.arity();
        let mut columns: Vec<Vec<u32>> = vec![Vec::with_capacity(n_out); d];
        let mut produced = 0usize;
        while produced < n_out {
            let chunk = (n_out - produced).min(SAMPLE_CHUNK);
            let latents = Array2::from_shape_fn((chunk, self.latent_dim), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let blocks = self.forward_on(&latents)?;
            for row in 0..chunk {
                for (j, block) in blocks.iter().enumerate() {
                    let u = rng.random::<f64>();
                    columns[j].push(sample_categorical(block.row(row), u));
                }
            }
            produced += chunk;
        }
        DiscreteTable::new(self.schema.clone(), columns)
    }

    /// [`GeneratorModel::sample`] with a self-seeded deterministic stream.
    pub fn sample_seeded(&self, n_out: usize, seed: u64) -> Result<DiscreteTable> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.sample(n_out, &mut rng)
    }

    /// All weights and biases flattened, layer by layer, row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in layer.b.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
        Ok(())
    }

    fn same_architecture(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.latent_dim == other.latent_dim
            && self.hidden_dims == other.hidden_dims
            && self.batch_size == other.batch_size
    }

    /// Parameter-space exponential moving average over `models` in order:
    /// the average starts at the first model and folds each later one in
    /// with weight 1 - decay. The latent batch comes from the first model.
    pub fn ema_combine(models: &[Self], decay: f64) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::config("EMA over an empty model list"))?;
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!("EMA decay must lie in [0,1), got {decay}")));
        }
        let mut avg = first.flat_params();
        for (i, model) in models.iter().enumerate().skip(1) {
            if !first.same_architecture(model) {
                return Err(Error::config(format!(
                    "EMA model {i} differs in architecture from model 0"
                )));
            }
            for (a, w) in avg.iter_mut().zip(model.flat_params()) {
                *a = decay * *a + (1.0 - decay) * w;
            }
        }
        let mut out = first.clone();
        out.set_flat_params(&avg)?;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Inverse-CDF draw from one probability row.
fn sample_categorical(probs: ndarray::ArrayView1<'_, f64>, u: f64) -> u32 {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// Splits logits into per-column blocks and applies a row-wise softmax
/// (max-subtracted) to each.
fn split_softmax(logits: &Array2<f64>, schema: &Schema) -> Vec<Array2<f64>> {
    let mut blocks = Vec::with_capacity(schema.arity());
    let mut offset = 0usize;
    for k in schema.cardinalities() {
        let mut block = logits
            .slice(ndarray::s![.., offset..offset + k])
            .to_owned();
        for mut row in block.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        blocks.push(block);
        offset += k;
    }
    blocks
}

/// Per-column row-stochastic probability blocks (each B x K_j).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRows {
    blocks: Vec<Array2<f64>>,
}

impl SoftRows {
    pub fn batch(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn block(&self, col: usize) -> &Array2<f64> {
        &self.blocks[col]
    }

    /// Builds soft rows directly from probability blocks. Each block must
    /// be row-stochastic; used by tests and the brute-force oracles.
    pub fn from_blocks(blocks: Vec<Array2<f64>>) -> Result<Self> {
        let b = blocks.first().map_or(0, |m| m.nrows());
        for (j, block) in blocks.iter().enumerate() {
            if block.nrows() != b {
                return Err(Error::config(format!("block {j} has a mismatched batch size")));
            }
            for row in block.rows() {
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
                    return Err(Error::config(format!("block {j} is not row-stochastic")));
                }
            }
        }
        Ok(SoftRows { blocks })
    }

    /// Soft marginal of a query: cell value (1/B) Σ_b Π_{j in q} p_b[j][v_j].
    /// Always normalized (sums to 1 up to float rounding).
    pub fn soft_marginal(&self, query: &MarginalQuery, schema: &Schema) -> Result<MarginalVector> {
        let size = query.domain_size(schema)?;
        let b = self.batch();
        let mut out = vec![0.0; size];
        if query.is_empty() {
            out[0] = 1.0;
            return Ok(MarginalVector::new(query.clone(), out, Space::Normalized));
        }
        let strides = query.strides(schema)?;
        let cols = query.columns();
        // Per-depth running-product buffers, so recursion never allocates.
        let mut scratch: Vec<Vec<f64>> = (0..cols.len()).map(|_| vec![0.0; b]).collect();
        let ones = vec![1.0; b];
        self.soft_marginal_rec(cols, &strides, 0, 0, &ones, &mut scratch, &mut out, 1.0 / b as f64);
        Ok(MarginalVector::new(query.clone(), out, Space::Normalized))
    }

    #[allow(clippy::too_many_arguments)]
    fn soft_marginal_rec(
        &self,
        cols: &[usize],
        strides: &[usize],
        depth: usize,
        base: usize,
        prefix: &[f64],
        scratch: &mut [Vec<f64>],
        out: &mut [f64],
        inv_b: f64,
    ) {
        let (head, tail) = scratch.split_first_mut().unwrap();
        let block = &self.blocks[cols[depth]];
        for v in 0..block.ncols() {
            let col = block.column(v);
            for ((dst, &p), &c) in head.iter_mut().zip(prefix).zip(col.iter()) {
                *dst = p * c;
            }
            let cell = base + v * strides[depth];
            if depth + 1 == cols.len() {
                out[cell] = head.iter().sum::<f64>() * inv_b;
            } else {
                self.soft_marginal_rec(cols, strides, depth + 1, cell, head, tail, out, inv_b);
            }
        }
    }
}

impl Serialize for GeneratorModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ModelFile::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GeneratorModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = ModelFile::deserialize(deserializer)?;
        file.into_model().map_err(serde::de::Error::custom)
    }
}

/// On-disk model layout: flattened weight arrays plus enough structure to
/// rebuild the network. Round-trips bit-exactly at double precision.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    schema: Schema,
    latent_dim: usize,
    hidden_dims: Vec<usize>,
    batch_size: usize,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_rows: Option<u64>,
    z: Vec<f64>,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFile {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&GeneratorModel> for ModelFile {
    fn from(m: &GeneratorModel) -> Self {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            schema: m.schema.clone(),
            latent_dim: m.latent_dim,
            hidden_dims: m.hidden_dims.clone(),
            batch_size: m.batch_size,
            seed: m.seed,
            n_rows: m.n_rows,
            z: m.z.iter().copied().collect(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    in_dim: l.w.nrows(),
                    out_dim: l.w.ncols(),
                    weights: l.w.iter().copied().collect(),
                    bias: l.b.to_vec(),
                })
                .collect(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<GeneratorModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported model format_version {}",
                self.format_version
            )));
        }
        self.schema.validate()?;
        let mut dims = vec![self.latent_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.schema.total_width());
        if self.layers.len() + 1 != dims.len() {
            return Err(Error::config(format!(
                "model has {} layers, expected {}",
                self.layers.len(),
                dims.len() - 1
            )));
        }
        let layers: Result<Vec<Layer>> = self
            .layers
            .into_iter()
            .zip(dims.windows(2))
            .map(|(lf, io)| {
                if lf.in_dim != io[0] || lf.out_dim != io[1] {
                    return Err(Error::config(format!(
                        "layer shape {}x{} does not match architecture {}x{}",
                        lf.in_dim, lf.out_dim, io[0], io[1]
                    )));
                }
                let w = Array2::from_shape_vec((lf.in_dim, lf.out_dim), lf.weights)
                    .map_err(|e| Error::config(format!("bad weight array: {e}")))?;
                let b = Array1::from_vec(lf.bias);
                if b.len() != lf.out_dim {
                    return Err(Error::config(format!(
                        "bias length {} does not match layer width {}",
                        b.len(),
                        lf.out_dim
                    )));
                }
                Ok(Layer { w, b })
            })
            .collect();
        let z = Array2::from_shape_vec((self.batch_size, self.latent_dim), self.z)
            .map_err(|e| Error::config(format!("bad latent batch: {e}")))?;
        Ok(GeneratorModel {
            schema: self.schema,
            latent_dim: self.latent_dim,
            hidden_dims: self.hidden_dims,
            batch_size: self.batch_size,
            seed: self.seed,
            n_rows: self.n_rows,
            z,
            layers: layers?,
        })
    }
}
