//! The select-measure-generate loop.
//!
//! Adaptive mode closes the workload downward, seeds the model from noisy
//! 1-way marginals, then repeatedly: scores candidates against the current
//! model, selects one privately, measures it with Gaussian noise, folds it
//! into the store (with closure), retrains, and halves the noise scale when
//! the newly measured marginal stopped moving. Rounds run while the budget
//! affords them, with one final round calibrated to the exact remainder.
//!
//! Baseline mode is the ablation: raw workload, even budget split, a fixed
//! round count, no initialization, filtering, closure, or annealing, and an
//! EMA over the last half of the per-round models.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{
    calibrate_round, eps_delta_to_rho, exp_mech_select, gaussian_cost, gaussian_measure,
    NoiseParams, PrivacyAccountant,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::generator::{fit_round, GeneratorModel, TrainConfig};
use crate::store::MeasurementStore;
use crate::table::{DiscreteTable, MarginalQuery, MarginalVector, Space};
use crate::workload::Workload;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// sqrt(2/pi): expected absolute value of a standard Gaussian.
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// Remainders below this are float dust, not a spendable budget.
const MIN_REMAINDER: f64 = 1e-12;

/// RNG stream for the engine's mechanisms (selection and measurement).
const STREAM_ENGINE: u64 = 2;

/// ExpMech sensitivity of the selection score: one record moves the L1
/// term by at most 1 and the penalty term not at all.
const SCORE_SENSITIVITY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full loop: closure, 1-way init, filtering, annealing.
    Adaptive,
    /// Ablation: raw workload, even split, fixed rounds, EMA.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub mode: Mode,
    /// Fraction of each round's budget spent on measurement.
    pub alpha: f64,
    /// Adaptive mode plans T = rounds_multiplier * d rounds.
    pub rounds_multiplier: usize,
    /// Baseline mode runs exactly this many rounds.
    pub baseline_rounds: usize,
    pub anneal_enabled: bool,
    /// Annealing threshold; `None` selects the scale-aware automatic value
    /// sqrt(2/pi) * sigma * n_q / n.
    pub gamma: Option<f64>,
    pub filtering: bool,
    pub marginal_closure: bool,
    /// `None` resolves by mode: off for adaptive, on for baseline.
    pub ema: Option<bool>,
    pub ema_decay: f64,
    pub rng_seed: u64,
    /// Replaces the built-in (epsilon, delta) -> rho conversion when set,
    /// so tighter conversions can be supplied without code changes.
    pub rho_total_override: Option<f64>,
    /// Latent batch size B.
    pub batch_size: usize,
    pub latent_dim: Option<usize>,
    pub hidden_dims: Option<Vec<usize>>,
    pub train: TrainConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: Mode::Adaptive,
            alpha: 0.9,
            rounds_multiplier: 16,
            baseline_rounds: 100,
            anneal_enabled: true,
            gamma: None,
            filtering: true,
            marginal_closure: true,
            ema: None,
            ema_decay: 0.9,
            rng_seed: 0,
            rho_total_override: None,
            batch_size: 500,
            latent_dim: None,
            hidden_dims: None,
            train: TrainConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.rounds_multiplier < 1 {
            return Err(Error::config("rounds_multiplier must be >= 1"));
        }
        if self.baseline_rounds < 1 {
            return Err(Error::config("baseline_rounds must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!(
                "ema_decay must lie in [0,1), got {}",
                self.ema_decay
            )));
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::config(format!("gamma must be nonnegative, got {g}")));
            }
        }
        if let Some(r) = self.rho_total_override {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::config(format!(
                    "rho_total_override must be positive, got {r}"
                )));
            }
        }
        self.train.validate()
    }
}

/// Selection score: L1 distance between exact and model counts, minus the
/// expected noise magnitude sqrt(2/pi) * sigma * n_q. With sigma = 0 this
/// is the raw L1 score the baseline uses.
pub fn selection_score(
    real: &MarginalVector,
    synth: &MarginalVector,
    sigma: f64,
    n_q: usize,
) -> Result<f64> {
    if real.len() != n_q {
        return Err(Error::config(format!(
            "query size {n_q} does not match marginal length {}",
            real.len()
        )));
    }
    let l1 = real.l1_distance(synth)?;
    Ok(l1 - SQRT_2_OVER_PI * sigma * n_q as f64)
}

/// True when the marginal moved by at most gamma in L1.
pub fn anneal_check(prev: &MarginalVector, curr: &MarginalVector, gamma: f64) -> Result<bool> {
    if prev.space != Space::Normalized || curr.space != Space::Normalized {
        return Err(Error::config("anneal check expects normalized marginals"));
    }
    Ok(prev.l1_distance(curr)? <= gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl ScoreSummary {
    fn from_scores(scores: &[f64]) -> Self {
        let count = scores.len();
        ScoreSummary {
            count,
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: scores.iter().sum::<f64>() / count as f64,
        }
    }
}

/// One audit-trail entry: the initialization pass logs as round 0 with no
/// selected query; every later entry records one select-measure round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub selected: Option<MarginalQuery>,
    pub sigma: f64,
    pub tau: Option<f64>,
    pub scores: Option<ScoreSummary>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub train_iters: usize,
    pub annealed: bool,
    pub rho_charged: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug)]
pub struct FitResult {
    pub model: GeneratorModel,
    pub logs: Vec<RoundLog>,
    pub accountant: PrivacyAccountant,
    pub store: MeasurementStore,
}

/// Serializable progress of a fit: everything needed to resume except the
/// dataset itself (exact marginals are recomputed on demand).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    model: GeneratorModel,
    store: MeasurementStore,
    accountant: PrivacyAccountant,
    sigma: f64,
    tau: f64,
    round: usize,
    init_done: bool,
    finale_done: bool,
    done: bool,
    ema_snapshots: VecDeque<GeneratorModel>,
    logs: Vec<RoundLog>,
    rng_word_pos: (u64, u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub state: FitState,
}

/// Mode-resolved settings the loop actually runs with.
#[derive(Debug, Clone)]
struct Resolved {
    mode: Mode,
    alpha: f64,
    /// Planned round count; a hard bound in baseline mode only.
    rounds: usize,
    anneal: bool,
    gamma: Option<f64>,
    filtering: bool,
    closure: bool,
    ema: bool,
    ema_decay: f64,
    /// Penalty scale feeds the selection score only in adaptive mode.
    score_penalty: bool,
    seed: u64,
    train: TrainConfig,
}

impl Resolved {
    fn from_config(cfg: &EngineConfig, d: usize) -> Resolved {
        match cfg.mode {
            Mode::Adaptive => Resolved {
                mode: Mode::Adaptive,
                alpha: cfg.alpha,
                rounds: cfg.rounds_multiplier * d,
                anneal: cfg.anneal_enabled,
                gamma: cfg.gamma,
                filtering: cfg.filtering,
                closure: cfg.marginal_closure,
                ema: cfg.ema.unwrap_or(false),
                ema_decay: cfg.ema_decay,
                score_penalty: true,
                seed: cfg.rng_seed,
                train: cfg.train,
            },
            // The ablation pins every deviation from the adaptive loop,
            // whatever the surrounding config says.
            Mode::Baseline => Resolved {
                mode: Mode::Baseline,
                alpha: 0.5,
                rounds: cfg.baseline_rounds,
                anneal: false,
                gamma: None,
                filtering: false,
                closure: false,
                ema: cfg.ema.unwrap_or(true),
                ema_decay: cfg.ema_decay,
                score_penalty: false,
                seed: cfg.rng_seed,
                train: cfg.train,
            },
        }
    }
}

pub struct Fitter<'a> {
    data: &'a DiscreteTable,
    pool: Workload,
    resolved: Resolved,
    n: f64,
    exact_cache: BTreeMap<MarginalQuery, MarginalVector>,
    rng: ChaCha20Rng,
    state: FitState,
}

impl<'a> Fitter<'a> {
    pub fn new(
        data: &'a DiscreteTable,
        workload: &Workload,
        epsilon: f64,
        delta: f64,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        workload.validate(data.schema())?;
        if workload.is_empty() {
            return Err(Error::config("workload is empty"));
        }
        if data.n_rows() == 0 {
            return Err(Error::data("cannot fit an empty table"));
        }
        let rho_total = match cfg.rho_total_override {
            Some(r) => r,
            None => eps_delta_to_rho(epsilon, delta)?,
        };
        let d = data.schema().arity();
        let resolved = Resolved::from_config(cfg, d);
        let pool = match resolved.mode {
            Mode::Adaptive => workload.downward_closure(),
            Mode::Baseline => workload.clone(),
        };
        let rho_round = rho_total / resolved.rounds as f64;
        let params = calibrate_round(rho_round, resolved.alpha)?;
        let model = GeneratorModel::init(
            data.schema(),
            cfg.latent_dim,
            cfg.hidden_dims.clone(),
            cfg.batch_size,
            resolved.seed,
        )?;
        let mut rng = ChaCha20Rng::seed_from_u64(resolved.seed);
        rng.set_stream(STREAM_ENGINE);
        let state = FitState {
            model,
            store: MeasurementStore::new(),
            accountant: PrivacyAccountant::new(rho_total)?,
            sigma: params.sigma,
            tau: params.tau,
            round: 0,
            init_done: resolved.mode == Mode::Baseline,
            finale_done: false,
            done: false,
            ema_snapshots: VecDeque::new(),
            logs: Vec::new(),
            rng_word_pos: (0, 0),
        };
        Ok(Fitter {
            data,
            pool,
            resolved,
            n: data.n_rows() as f64,
            exact_cache: BTreeMap::new(),
            rng,
            state,
        })
    }

    /// Restores a fit from a checkpoint taken with the same data, workload,
    /// and config. The exact-marginal cache is rebuilt lazily.
    pub fn resume(
        data: &'a DiscreteTable,
        workload: &Workload,
        epsilon: f64,
        delta: f64,
        cfg: &EngineConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format_version {}",
                checkpoint.format_version
            )));
        }
        let mut fitter = Fitter::new(data, workload, epsilon, delta, cfg)?;
        if checkpoint.state.model.schema() != data.schema() {
            return Err(Error::config(
                "checkpoint schema does not match the dataset",
            ));
        }
        let (lo, hi) = checkpoint.state.rng_word_pos;
        fitter.rng.set_word_pos((hi as u128) << 64 | lo as u128);
        fitter.state = checkpoint.state;
        Ok(fitter)
    }

    /// Snapshot of the current progress.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        let pos = self.rng.get_word_pos();
        state.rng_word_pos = (pos as u64, (pos >> 64) as u64);
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            state,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.state.logs
    }

    fn exact(&mut self, query: &MarginalQuery) -> Result<MarginalVector> {
        if let Some(v) = self.exact_cache.get(query) {
            return Ok(v.clone());
        }
        let v = self.data.evaluate_marginal(query)?;
        self.exact_cache.insert(query.clone(), v.clone());
        Ok(v)
    }

    fn round_params(&self) -> NoiseParams {
        NoiseParams {
            sigma: self.state.sigma,
            tau: self.state.tau,
        }
    }

    /// Measures every 1-way marginal in the pool and fits the initial
    /// model. Logged as round 0.
    fn run_init(&mut self) -> Result<()> {
        let one_ways: Vec<MarginalQuery> = self
            .pool
            .queries()
            .filter(|q| q.arity() == 1)
            .cloned()
            .collect();
        let sigma = self.state.sigma;
        let mut charged = 0.0;
        for q in &one_ways {
            let exact = self.exact(q)?;
            let noisy = gaussian_measure(
                &exact,
                sigma,
                &mut self.state.accountant,
                &format!("init q={q}"),
                &mut self.rng,
            )?;
            self.state.store.record(&noisy, sigma, self.data.schema())?;
            charged += gaussian_cost(sigma);
        }
        let outcome = fit_round(&mut self.state.model, &self.state.store, self.n, &self.resolved.train)?;
        self.state.logs.push(RoundLog {
            round: 0,
            selected: None,
            sigma,
            tau: None,
            scores: None,
            loss_before: outcome.initial_loss,
            loss_after: outcome.final_loss,
            train_iters: outcome.iters_used,
            annealed: false,
            rho_charged: charged,
            note: Some(format!("initialization: {} one-way measurements", one_ways.len())),
        });
        self.state.init_done = true;
        Ok(())
    }

    fn candidates(&self) -> Vec<MarginalQuery> {
        if self.resolved.filtering {
            self.state
                .store
                .candidates(&self.pool)
                .queries()
                .cloned()
                .collect()
        } else {
            self.pool.queries().cloned().collect()
        }
    }

    /// One select-measure-fit round at the given noise scales.
    fn run_round(&mut self, params: NoiseParams, note: Option<String>) -> Result<()> {
        let round = self.state.round + 1;
        let candidates = self.candidates();
        debug_assert!(!candidates.is_empty());

        // Exact marginals are cached up front so scoring can stay pure.
        for q in &candidates {
            self.exact(q)?;
        }
        let rows = self.state.model.forward()?;
        let schema = self.data.schema();
        let n = self.n;
        let penalty_sigma = if self.resolved.score_penalty { params.sigma } else { 0.0 };
        let cache = &self.exact_cache;
        let scores_r: Vec<Result<f64>> = exec::map_ordered(&candidates, |q| {
            let exact = cache.get(q).expect("cached above");
            let soft = rows.soft_marginal(q, schema)?;
            let synth = MarginalVector::new(
                q.clone(),
                soft.values.iter().map(|p| p * n).collect(),
                Space::Counts,
            );
            selection_score(exact, &synth, penalty_sigma, exact.len())
        });
        let scores = scores_r.into_iter().collect::<Result<Vec<f64>>>()?;

        let idx = exp_mech_select(
            &scores,
            params.tau,
            SCORE_SENSITIVITY,
            &mut self.state.accountant,
            &format!("select t={round}"),
            &mut self.rng,
        )?;
        let selected = candidates[idx].clone();

        let exact = self.exact(&selected)?;
        let noisy = gaussian_measure(
            &exact,
            params.sigma,
            &mut self.state.accountant,
            &format!("measure t={round} q={selected}"),
            &mut self.rng,
        )?;
        let prev_soft = rows.soft_marginal(&selected, schema)?;
        if self.resolved.closure {
            self.state.store.record(&noisy, params.sigma, schema)?;
        } else {
            self.state.store.record_direct(&noisy, params.sigma)?;
        }

        let outcome = fit_round(&mut self.state.model, &self.state.store, n, &self.resolved.train)?;

        let mut annealed = false;
        if self.resolved.anneal {
            let curr_soft = self
                .state
                .model
                .forward()?
                .soft_marginal(&selected, schema)?;
            let gamma = self.resolved.gamma.unwrap_or_else(|| {
                SQRT_2_OVER_PI * params.sigma * exact.len() as f64 / n
            });
            if anneal_check(&prev_soft, &curr_soft, gamma)? {
                annealed = true;
                self.state.sigma /= 2.0;
                self.state.tau *= 2.0;
            }
        }

        if self.resolved.ema {
            let cap = self.resolved.rounds.div_ceil(2).max(1);
            self.state.ema_snapshots.push_back(self.state.model.clone());
            while self.state.ema_snapshots.len() > cap {
                self.state.ema_snapshots.pop_front();
            }
        }

        self.state.logs.push(RoundLog {
            round,
            selected: Some(selected),
            sigma: params.sigma,
            tau: Some(params.tau),
            scores: Some(ScoreSummary::from_scores(&scores)),
            loss_before: outcome.initial_loss,
            loss_after: outcome.final_loss,
            train_iters: outcome.iters_used,
            annealed,
            rho_charged: params.round_cost(),
            note,
        });
        self.state.round = round;
        Ok(())
    }

    /// Advances the fit by one phase (initialization or one round).
    /// Returns true while there is more to do.
    pub fn step(&mut self) -> Result<bool> {
        if self.state.done {
            return Ok(false);
        }
        if !self.state.init_done {
            self.run_init()?;
            return Ok(true);
        }
        if self.resolved.mode == Mode::Baseline && self.state.round >= self.resolved.rounds {
            self.state.done = true;
            return Ok(false);
        }
        if self.candidates().is_empty() {
            if let Some(last) = self.state.logs.last_mut() {
                let notice = "candidate set exhausted before the budget".to_string();
                last.note = Some(match last.note.take() {
                    Some(n) => format!("{n}; {notice}"),
                    None => notice,
                });
            }
            self.state.done = true;
            return Ok(false);
        }
        let params = self.round_params();
        if self.state.accountant.can_afford(params.round_cost()) {
            self.run_round(params, None)?;
            return Ok(true);
        }
        // Remainder too small for a regular round: spend it exactly once.
        let remaining = self.state.accountant.remaining();
        if remaining > MIN_REMAINDER && !self.state.finale_done && self.resolved.mode == Mode::Adaptive
        {
            let params = calibrate_round(remaining, self.resolved.alpha)?;
            self.state.finale_done = true;
            self.run_round(params, Some("final remainder round".to_string()))?;
        }
        self.state.done = true;
        Ok(false)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    /// Finalizes into a result, applying EMA combination when enabled.
    pub fn finish(mut self) -> Result<FitResult> {
        if !self.state.done {
            self.run()?;
        }
        let mut model = if self.resolved.ema && !self.state.ema_snapshots.is_empty() {
            let snapshots: Vec<GeneratorModel> =
                self.state.ema_snapshots.iter().cloned().collect();
            GeneratorModel::ema_combine(&snapshots, self.resolved.ema_decay)?
        } else {
            self.state.model
        };
        model.set_n_rows(self.data.n_rows() as u64);
        Ok(FitResult {
            model,
            logs: self.state.logs,
            accountant: self.state.accountant,
            store: self.state.store,
        })
    }
}

/// Runs the full adaptive loop.
pub fn fit_adaptive(
    data: &DiscreteTable,
    workload: &Workload,
    epsilon: f64,
    delta: f64,
    cfg: &EngineConfig,
) -> Result<FitResult> {
    let cfg = EngineConfig {
        mode: Mode::Adaptive,
        ..cfg.clone()
    };
    Fitter::new(data, workload, epsilon, delta, &cfg)?.finish()
}

/// Runs the ablation baseline.
pub fn fit_baseline(
    data: &DiscreteTable,
    workload: &Workload,
    epsilon: f64,
    delta: f64,
    cfg: &EngineConfig,
) -> Result<FitResult> {
    let cfg = EngineConfig {
        mode: Mode::Baseline,
        ..cfg.clone()
    };
    Fitter::new(data, workload, epsilon, delta, &cfg)?.finish()
}
