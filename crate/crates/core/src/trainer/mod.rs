//! The training loop.
//!
//! One step, in order: encode the batch, build the angle matrix, mine
//! triplets, update the angle statistics, compute weights (all ones while
//! warming up), take the batch powers, update the power expectations, build
//! the pseudo loss with the updated expectations, backpropagate, and apply
//! SGD.

mod checkpoint;
mod optim;

pub use checkpoint::Checkpoint;
pub use optim::{lr_at, sgd_step, OptimState};

use std::io::Write;

use ndarray::{s, Array2, ArrayView2};

use crate::autodiff::{Tape, Var};
use crate::data::{sample_batch, AugmentConfig, PairBatch, PatchDataset};
use crate::encoder::{self, bind_params, EncoderConfig, Mode, ParamSet};
use crate::error::{Error, Result};
use crate::geometry::angle_matrix_rows;
use crate::mining::{mine_triplets, TripletBatch};
use crate::modulation::{compute_weights, LossScales, ModulationConfig, WeightBatch};
use crate::rng::{stream_rng, Stream};
use crate::stats::{update_angle_stats, update_power_stats, StatState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: u64,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Leading fraction of iterations trained with unit weights.
    pub warmup_fraction: f64,
    pub modulation: ModulationConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            total_iterations: 2000,
            lr_init: 1.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_fraction: 0.1,
            modulation: ModulationConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.total_iterations == 0 {
            return Err(Error::Config(
                "batch_size must be at least 2 and total_iterations positive".into(),
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        self.modulation.validate()
    }

    pub fn lr_at(&self, iteration: u64) -> Result<f64> {
        lr_at(iteration, self.total_iterations, self.lr_init)
    }

    pub fn is_warming(&self, iteration: u64) -> bool {
        (iteration as f64) < self.warmup_fraction * self.total_iterations as f64
    }
}

/// Encoder architecture plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        let params = encoder::init_params(&config)?;
        Ok(Self { config, params })
    }

    /// Inference-mode raw descriptors, one per row of `patches`.
    pub fn encode(&self, patches: ArrayView2<f64>) -> Result<Array2<f64>> {
        encoder::encode_batch(patches, &self.params, &self.config)
    }
}

/// Everything a training run mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub stats: StatState,
    pub optim: OptimState,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let optim = OptimState::new(&model.params);
        Self {
            model,
            stats: StatState::new(),
            optim,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.optim.iteration
    }
}

/// Mined triplets, weights and statistics for one step: everything the
/// pseudo loss treats as constant.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub iteration: u64,
    pub lr: f64,
    pub warming: bool,
    pub triplets: TripletBatch,
    pub weights: WeightBatch,
    pub scales: LossScales,
    /// Statistics after both EMA updates of this step.
    pub stats: StatState,
}

/// Outcome of a completed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub plan: StepPlan,
    pub pseudo_loss: f64,
}

fn dropout_mode(cfg: &TrainConfig, iteration: u64) -> Mode {
    Mode::Train {
        seed: cfg.seed,
        iteration,
    }
}

/// Records encoder and row normalization for the stacked batch.
fn record_units(tape: &mut Tape, model: &Model, params: &[Var], pairs: &PairBatch, mode: Mode) -> Result<Var> {
    let raw = encoder::forward(tape, &model.config, params, pairs.stacked(), mode)?;
    tape.normalize_rows(raw)
}

fn plan_from_units(
    units: ArrayView2<f64>,
    stats: &StatState,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<StepPlan> {
    let n = units.nrows() / 2;
    let lr = cfg.lr_at(iteration)?;
    let matrix = angle_matrix_rows(units.slice(s![..n, ..]), units.slice(s![n.., ..]))?;
    let triplets = mine_triplets(&matrix, cfg.modulation.tau)?;
    let stats = update_angle_stats(stats, &triplets)?;
    let warming = cfg.is_warming(iteration);
    let weights = compute_weights(&triplets, &stats, &cfg.modulation, warming)?;
    let stats = update_power_stats(&stats, weights.p_pos, weights.p_neg)?;
    let scales = LossScales::new(&stats, &cfg.modulation, triplets.num_valid())?;
    Ok(StepPlan {
        iteration,
        lr,
        warming,
        triplets,
        weights,
        scales,
        stats,
    })
}

/// Adds `scale⁺·Σ wᵢ⁺θᵢ⁺ − scale⁻·Σ wᵢ⁻θᵢ⁻` on top of the unit descriptors
/// (anchors in rows `0..n`, positives in `n..2n`).
fn record_pseudo_loss(tape: &mut Tape, units: Var, plan: &StepPlan) -> Result<Var> {
    let t = &plan.triplets;
    let n = t.len();
    let valid: Vec<usize> = t.valid_indices().collect();
    let mut pairs = Vec::with_capacity(2 * valid.len());
    let mut coeffs = Vec::with_capacity(2 * valid.len());
    for &i in &valid {
        pairs.push((i, n + i));
        coeffs.push(plan.scales.pos * plan.weights.w_pos[i]);
    }
    for &i in &valid {
        let (a, p) = t.neg_source[i].expect("valid triplet has a source").pair(i);
        pairs.push((a, n + p));
        coeffs.push(-plan.scales.neg * plan.weights.w_neg[i]);
    }
    let k = coeffs.len();
    let angles = tape.pair_angles(units, units, pairs)?;
    tape.weighted_sum(angles, Array2::from_shape_vec((k, 1), coeffs).expect("column"))
}

/// Runs the forward half of a step without touching `state`.
pub fn plan_step(state: &TrainState, pairs: &PairBatch, cfg: &TrainConfig) -> Result<StepPlan> {
    let iteration = state.iteration();
    let mut tape = Tape::new();
    let vars: Vec<Var> = state.model.params.values().iter().map(|v| tape.constant(v.clone())).collect();
    let units = record_units(&mut tape, &state.model, &vars, pairs, dropout_mode(cfg, iteration))?;
    plan_from_units(tape.value(units).view(), &state.stats, cfg, iteration)
}

/// Pseudo loss and its flattened parameter gradient at `params`, with the
/// triplets, weights and dropout masks of `plan` held fixed.
pub fn frozen_loss_and_grad(
    model: &Model,
    params: &ParamSet,
    pairs: &PairBatch,
    plan: &StepPlan,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    frozen_loss_and_grad_on(Tape::new(), model, params, pairs, plan, cfg)
}

/// [`frozen_loss_and_grad`] recorded on a caller-supplied (possibly
/// fault-injected) tape.
pub fn frozen_loss_and_grad_on(
    mut tape: Tape,
    model: &Model,
    params: &ParamSet,
    pairs: &PairBatch,
    plan: &StepPlan,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let vars = bind_params(&mut tape, params);
    let units = record_units(&mut tape, model, &vars, pairs, dropout_mode(cfg, plan.iteration))?;
    let loss = record_pseudo_loss(&mut tape, units, plan)?;
    let grads = tape.backward(loss)?;
    let flat = vars
        .iter()
        .zip(params.values())
        .flat_map(|(v, t)| grads.get_or_zeros(*v, t.dim()).into_iter())
        .collect();
    Ok((tape.scalar(loss), flat))
}

/// One full step. When fewer than two triplets survive mining, the
/// iteration counter still advances and `InsufficientData` is returned.
pub fn train_step(state: &mut TrainState, pairs: &PairBatch, cfg: &TrainConfig) -> Result<StepReport> {
    let iteration = state.iteration();
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &state.model.params);
    let units = record_units(&mut tape, &state.model, &vars, pairs, dropout_mode(cfg, iteration))?;
    let plan = match plan_from_units(tape.value(units).view(), &state.stats, cfg, iteration) {
        Err(e @ Error::InsufficientData { .. }) => {
            state.optim.iteration += 1;
            return Err(e);
        }
        other => other?,
    };
    let loss = record_pseudo_loss(&mut tape, units, &plan)?;
    let grads = tape.backward(loss)?;
    let grad_set = ParamSet::new(
        state.model.params.names().to_vec(),
        vars.iter()
            .zip(state.model.params.values())
            .map(|(v, t)| grads.get_or_zeros(*v, t.dim()))
            .collect(),
    )?;
    sgd_step(
        &mut state.model.params,
        &grad_set,
        &mut state.optim,
        plan.lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    state.stats = plan.stats;
    state.optim.iteration += 1;
    Ok(StepReport {
        pseudo_loss: tape.scalar(loss),
        plan,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub lr: f64,
    /// NaN for skipped steps.
    pub pseudo_loss: f64,
    pub valid_triplets: usize,
    pub stats: StatState,
}

impl MetricsRow {
    pub fn header() -> Vec<&'static str> {
        let mut h = vec!["iteration", "lr", "pseudo_loss", "valid_triplets"];
        h.extend(StatState::CSV_FIELDS);
        h
    }

    /// Field values in [`MetricsRow::header`] order.
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.iteration.to_string(),
            self.lr.to_string(),
            self.pseudo_loss.to_string(),
            self.valid_triplets.to_string(),
        ];
        r.extend(self.stats.fields().iter().map(f64::to_string));
        r
    }
}

/// Writes rows as CSV with [`MetricsRow::header`].
pub fn write_metrics(out: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io {
        path: "<metrics>".into(),
        source: e.into(),
    };
    w.write_record(MetricsRow::header()).map_err(io)?;
    for row in rows {
        w.write_record(row.record()).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))
}

/// Batch for `iteration`, drawn from its own data stream.
pub fn batch_for(
    dataset: &PatchDataset,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    iteration: u64,
) -> Result<PairBatch> {
    let mut rng = stream_rng(cfg.seed, Stream::Data, iteration, 0);
    sample_batch(dataset, cfg.batch_size, augment, &mut rng)
}

/// Trains from the current iteration up to `stop_at` (exclusive, capped at
/// the configured total). `on_step` sees the state after every iteration,
/// skipped ones included.
pub fn run(
    state: &mut TrainState,
    dataset: &PatchDataset,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    stop_at: u64,
    mut on_step: impl FnMut(&TrainState, &MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    augment.validate()?;
    let classes = dataset.trainable_classes().len();
    if classes < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {classes} classes with at least two patches",
            cfg.batch_size
        )));
    }
    if dataset.patch_size() * dataset.patch_size() != state.model.config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "{0}x{0} patches for an encoder with {1} inputs",
            dataset.patch_size(),
            state.model.config.input_dim
        )));
    }
    let stop = stop_at.min(cfg.total_iterations);
    let mut rows = Vec::new();
    while state.iteration() < stop {
        let iteration = state.iteration();
        let pairs = batch_for(dataset, cfg, augment, iteration)?;
        let row = match train_step(state, &pairs, cfg) {
            Ok(report) => MetricsRow {
                iteration,
                lr: report.plan.lr,
                pseudo_loss: report.pseudo_loss,
                valid_triplets: report.plan.triplets.num_valid(),
                stats: state.stats,
            },
            Err(Error::InsufficientData { got, .. }) => MetricsRow {
                iteration,
                lr: cfg.lr_at(iteration)?,
                pseudo_loss: f64::NAN,
                valid_triplets: got,
                stats: state.stats,
            },
            Err(e) => return Err(e),
        };
        on_step(state, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::modulation::pseudo_loss_scaled;
    use approx::assert_relative_eq;

    fn setup(batch: usize) -> (PatchDataset, TrainConfig, TrainState) {
        let ds = generate_synthetic(&SynthConfig {
            num_classes: 40,
            patches_per_class: 3,
            patch_size: 8,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            batch_size: batch,
            total_iterations: 50,
            seed: 4,
            ..Default::default()
        };
        let model = Model::init(EncoderConfig {
            input_dim: 64,
            widths: vec![24, 16],
            output_dim: 8,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        (ds, cfg, TrainState::new(model))
    }

    #[test]
    fn warmup_step_has_unit_weights() {
        let (ds, cfg, mut state) = setup(16);
        let pairs = batch_for(&ds, &cfg, &AugmentConfig::none(), 0).unwrap();
        let report = train_step(&mut state, &pairs, &cfg).unwrap();
        let plan = &report.plan;
        assert!(plan.warming);
        let valid = plan.triplets.num_valid() as f64;
        assert_eq!(plan.weights.p_pos, valid);
        assert_eq!(plan.weights.p_neg, valid);
        assert_eq!(state.iteration(), 1);
        // Logged loss agrees with the pseudo loss recomputed from the batch angles.
        let offline = pseudo_loss_scaled(&plan.triplets, &plan.weights, plan.scales);
        assert_relative_eq!(report.pseudo_loss, offline, max_relative = 1e-12);
    }

    #[test]
    fn step_gradient_matches_finite_differences() {
        let (ds, cfg, state) = setup(12);
        // Past warm-up so every weight term is active.
        let mut state = state;
        state.optim.iteration = 20;
        state.stats = StatState::from_fields([0.9, 0.2, 1.3, 0.1, -0.4, 0.25, 40.0, 30.0], true);
        let pairs = batch_for(&ds, &cfg, &AugmentConfig::none(), 20).unwrap();
        let plan = plan_step(&state, &pairs, &cfg).unwrap();
        assert!(!plan.warming);
        let model = &state.model;
        let (_, analytic) = frozen_loss_and_grad(model, &model.params, &pairs, &plan, &cfg).unwrap();
        assert!(analytic.iter().any(|g| *g != 0.0));
        let flat = model.params.flatten();
        let f = |x: &[f64]| frozen_loss_and_grad(model, &model.params.with_flat(x).unwrap(), &pairs, &plan, &cfg).unwrap().0;
        let report = finite_diff_check(f, &flat, &analytic, 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn plan_matches_train_step() {
        let (ds, cfg, state) = setup(16);
        let pairs = batch_for(&ds, &cfg, &AugmentConfig::none(), 0).unwrap();
        let plan = plan_step(&state, &pairs, &cfg).unwrap();
        let mut s2 = state.clone();
        let report = train_step(&mut s2, &pairs, &cfg).unwrap();
        assert_eq!(plan, report.plan);
        assert_ne!(s2.model.params, state.model.params);
    }

    #[test]
    fn replay_from_saved_state_is_bitwise() {
        let (ds, cfg, mut state) = setup(16);
        let aug = AugmentConfig::default();
        run(&mut state, &ds, &cfg, &aug, 1, |_, _| Ok(())).unwrap();
        let saved = state.clone();
        let a = run(&mut state, &ds, &cfg, &aug, 3, |_, _| Ok(())).unwrap();
        let mut resumed = saved;
        let b = run(&mut resumed, &ds, &cfg, &aug, 3, |_, _| Ok(())).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(state, resumed);
    }

    #[test]
    fn full_warmup_run_keeps_unit_weights() {
        let (ds, mut cfg, mut state) = setup(16);
        cfg.total_iterations = 10;
        cfg.warmup_fraction = 1.0;
        let aug = AugmentConfig::none();
        for it in 0..10 {
            let pairs = batch_for(&ds, &cfg, &aug, it).unwrap();
            match train_step(&mut state, &pairs, &cfg) {
                Ok(r) => {
                    assert!(r.plan.warming);
                    assert!(r.plan.weights.w_coupled.iter().zip(&r.plan.triplets.valid_mask).all(|(w, v)| !v || *w == 1.0));
                }
                Err(Error::InsufficientData { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(state.iteration(), 10);
    }

    #[test]
    fn infeasible_batch_is_a_config_error() {
        let (ds, mut cfg, mut state) = setup(16);
        cfg.batch_size = 41;
        assert!(matches!(
            run(&mut state, &ds, &cfg, &AugmentConfig::none(), 5, |_, _| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn metrics_csv_has_all_columns() {
        let row = MetricsRow {
            iteration: 3,
            lr: 0.5,
            pseudo_loss: -0.25,
            valid_triplets: 7,
            stats: StatState::new(),
        };
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 12);
        assert!(lines.next().unwrap().starts_with("3,0.5,-0.25,7,"));
    }
}
