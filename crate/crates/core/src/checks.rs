//! The numerical self-check suite behind `sdgm gradcheck`.
//!
//! Every check compares an analytic quantity with central differences and
//! reports the largest relative error against a fixed tolerance.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{finite_diff_check, numerical_gradient, relative_error, AdjointFault, OpKind, Tape};
use crate::data::{generate_synthetic, sample_batch, AugmentConfig, SynthConfig};
use crate::encoder::{self, bind_params, EncoderConfig, Mode};
use crate::error::Result;
use crate::geometry::{clamped_acos, grad_magnitude, normalize, Metric, RawDescriptor, UnitDescriptor};
use crate::mining::mine_triplets;
use crate::modulation::{modulated_gradient, pseudo_loss_at, LossScales, ModulationConfig, WeightBatch};
use crate::rng::{stream_rng, Stream};
use crate::stats::StatState;
use crate::trainer::{frozen_loss_and_grad, frozen_loss_and_grad_on, plan_step, Model, TrainConfig, TrainState};

pub const MAGNITUDE_TOLERANCE: f64 = 1e-6;
pub const PSEUDO_LOSS_TOLERANCE: f64 = 1e-6;
pub const PARAM_TOLERANCE: f64 = 1e-4;

/// The fault installed by `--force-bug`: every matrix-product adjoint is
/// scaled by 1%.
pub const FORCED_BUG: AdjointFault = AdjointFault {
    kind: OpKind::MatMul,
    factor: 1.01,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of compared values.
    pub checked: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub use_frn: bool,
    pub dropout_rate: f64,
    pub modulation: ModulationConfig,
    pub fault: Option<AdjointFault>,
}

impl SuiteConfig {
    /// Reduced widths keep the parameter-space differences cheap.
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.patch_size * self.patch_size,
            widths: vec![32, 16],
            output_dim: 8,
            dropout_rate: self.dropout_rate,
            use_frn: self.use_frn,
            seed: self.seed,
        }
    }

    fn tape(&self) -> Tape {
        match self.fault {
            Some(f) => Tape::new().with_adjoint_fault(f),
            None => Tape::new(),
        }
    }
}

/// Names of the checks, in report order.
pub const CHECK_NAMES: [&str; 6] = [
    "angle_grad_magnitude",
    "similarity_grad_magnitude",
    "l2_grad_magnitude",
    "pseudo_loss_equivalence",
    "encoder_param_grad",
    "pipeline_param_grad",
];

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, metric) in CHECK_NAMES.iter().zip([Metric::Angle, Metric::Similarity, Metric::L2]) {
        out.push(magnitude_check(name, metric, cfg.seed)?);
    }
    out.push(pseudo_loss_check(cfg.seed)?);
    out.push(encoder_check(cfg)?);
    out.push(pipeline_check(cfg)?);
    Ok(out)
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Raw `x` of random length and a raw `y` at angle `theta` from it.
pub fn pair_at_angle(rng: &mut impl Rng, dim: usize, theta: f64) -> (Vec<f64>, Vec<f64>) {
    let x = gaussian(rng, dim);
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let xh: Vec<f64> = x.iter().map(|v| v / xn).collect();
    // Gram-Schmidt a second direction against x̂.
    let mut u = gaussian(rng, dim);
    let proj: f64 = u.iter().zip(&xh).map(|(a, b)| a * b).sum();
    u.iter_mut().zip(&xh).for_each(|(a, b)| *a -= proj * b);
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let len_x = rng.random_range(0.5..3.0);
    let len_y = rng.random_range(0.5..3.0);
    let y = xh
        .iter()
        .zip(&u)
        .map(|(a, b)| len_y * (theta.cos() * a + theta.sin() * b / un))
        .collect();
    (xh.iter().map(|v| v * len_x).collect(), y)
}

fn metric_value(metric: Metric, x: &[f64], y: &UnitDescriptor) -> f64 {
    let x = normalize(&RawDescriptor::new(x.to_vec()).expect("finite")).expect("nonzero");
    let s: f64 = x.unit().iter().zip(y.unit()).map(|(a, b)| a * b).sum();
    match metric {
        Metric::Angle => clamped_acos(s),
        Metric::Similarity => s,
        Metric::L2 => x.unit().iter().zip(y.unit()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
    }
}

fn magnitude_check(name: &'static str, metric: Metric, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream_rng(seed, Stream::Check, 1, metric as u64);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for dim in [2, 8, 32] {
        for _ in 0..100 {
            let theta = rng.random_range(0.05..std::f64::consts::PI - 0.05);
            let (x, y) = pair_at_angle(&mut rng, dim, theta);
            let yu = normalize(&RawDescriptor::new(y)?)?;
            let magnitude = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let g = numerical_gradient(|p| metric_value(metric, p, &yu), &x, 1e-6 * magnitude);
            let numeric = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = metric_value(metric, &x, &yu);
            worst = worst.max(relative_error(grad_magnitude(metric, magnitude, d)?, numeric));
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        name,
        max_rel_err: worst,
        tolerance: MAGNITUDE_TOLERANCE,
        checked,
    })
}

fn units_of(rows: &[Vec<f64>]) -> Result<Vec<UnitDescriptor>> {
    rows.iter().map(|r| normalize(&RawDescriptor::new(r.clone())?)).collect()
}

/// Largest `‖a − n‖ / max(‖a‖, ‖n‖)` over consecutive rows of `dim`
/// values. Whole-descriptor errors stay meaningful where single tangent
/// coordinates are close to zero.
pub fn row_relative_error(analytic: &[f64], numeric: &[f64], dim: usize) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    analytic
        .chunks(dim)
        .zip(numeric.chunks(dim))
        .map(|(a, n)| {
            let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
            let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
            diff / scale.max(crate::autodiff::gradcheck::REL_FLOOR)
        })
        .fold(0.0, f64::max)
}

fn pseudo_loss_check(seed: u64) -> Result<CheckOutcome> {
    let (n, dim) = (32, 8);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for b in 0..20 {
        let mut rng = stream_rng(seed, Stream::Check, 2, b);
        let anchors: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut rng, dim)).collect();
        let positives: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| a.iter().map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let (au, pu) = (units_of(&anchors)?, units_of(&positives)?);
        let matrix = crate::geometry::angle_matrix(&au, &pu)?;
        let batch = mine_triplets(&matrix, 0.6)?;
        let mut draw = || -> Vec<f64> { (0..n).map(|_| rng.random_range(0.0..1.0)).collect() };
        let (w_pos, w_neg) = (draw(), draw());
        let weights = WeightBatch {
            w_self_pos: w_pos.clone(),
            w_self_neg: w_neg.clone(),
            w_coupled: vec![1.0; n],
            p_pos: w_pos.iter().sum(),
            p_neg: w_neg.iter().sum(),
            w_pos,
            w_neg,
        };
        let mut stats = StatState::new();
        stats.e_power_pos = rng.random_range(1.0..100.0);
        stats.e_power_neg = rng.random_range(1.0..100.0);
        let scales = LossScales::power_adjusted(&stats, rng.random_range(0.5..1.0))?;
        let (ga, gp) = modulated_gradient(&au, &pu, &batch, &weights, scales)?;
        let analytic: Vec<f64> = ga.into_iter().chain(gp).flatten().collect();
        let flat: Vec<f64> = anchors.iter().chain(&positives).flatten().copied().collect();
        let loss = |p: &[f64]| {
            let rows: Vec<Vec<f64>> = p.chunks(dim).map(<[f64]>::to_vec).collect();
            let a = units_of(&rows[..n]).expect("nonzero rows");
            let q = units_of(&rows[n..]).expect("nonzero rows");
            pseudo_loss_at(&a, &q, &batch, &weights, scales).expect("consistent shapes")
        };
        // Round-off dominates below h = 1e-5 for a 64-term loss.
        let numeric = numerical_gradient(loss, &flat, 1e-4);
        worst = worst.max(row_relative_error(&analytic, &numeric, dim));
        checked += 2 * n;
    }
    Ok(CheckOutcome {
        name: "pseudo_loss_equivalence",
        max_rel_err: worst,
        tolerance: PSEUDO_LOSS_TOLERANCE,
        checked,
    })
}

fn encoder_check(cfg: &SuiteConfig) -> Result<CheckOutcome> {
    let enc = cfg.encoder();
    let params = encoder::init_params(&enc)?;
    let mut rng = stream_rng(cfg.seed, Stream::Check, 3, 0);
    let input = Array2::from_shape_fn((6, enc.input_dim), |_| rng.random_range(0.0..1.0));
    let weights = Array2::from_shape_fn((6, enc.output_dim), |_| rng.sample::<f64, _>(StandardNormal));
    let mode = Mode::Train {
        seed: cfg.seed,
        iteration: 0,
    };
    let eval = |tape: &mut Tape, p: &crate::encoder::ParamSet| -> Result<(f64, Vec<f64>)> {
        let vars = bind_params(tape, p);
        let out = encoder::forward(tape, &enc, &vars, input.clone(), mode)?;
        let loss = tape.weighted_sum(out, weights.clone())?;
        let grads = tape.backward(loss)?;
        let flat = vars
            .iter()
            .zip(p.values())
            .flat_map(|(v, t)| grads.get_or_zeros(*v, t.dim()).into_iter())
            .collect();
        Ok((tape.scalar(loss), flat))
    };
    let (_, analytic) = eval(&mut cfg.tape(), &params)?;
    let f = |flat: &[f64]| eval(&mut Tape::new(), &params.with_flat(flat).expect("same layout")).expect("forward").0;
    let report = finite_diff_check(f, &params.flatten(), &analytic, 1e-5)?;
    Ok(CheckOutcome {
        name: "encoder_param_grad",
        max_rel_err: report.max_rel_err,
        tolerance: PARAM_TOLERANCE,
        checked: report.checked,
    })
}

fn pipeline_check(cfg: &SuiteConfig) -> Result<CheckOutcome> {
    let ds = generate_synthetic(&SynthConfig {
        num_classes: 16,
        patches_per_class: 2,
        patch_size: cfg.patch_size,
        seed: cfg.seed,
        ..Default::default()
    })?;
    let train = TrainConfig {
        batch_size: 8,
        total_iterations: 10,
        warmup_fraction: 0.0,
        modulation: cfg.modulation,
        seed: cfg.seed,
        ..Default::default()
    };
    let state = TrainState::new(Model::init(cfg.encoder())?);
    let mut rng = stream_rng(cfg.seed, Stream::Check, 4, 0);
    let pairs = sample_batch(&ds, train.batch_size, &AugmentConfig::default(), &mut rng)?;
    let plan = plan_step(&state, &pairs, &train)?;
    let model = &state.model;
    let (_, analytic) = frozen_loss_and_grad_on(cfg.tape(), model, &model.params, &pairs, &plan, &train)?;
    let f = |flat: &[f64]| {
        let p = model.params.with_flat(flat).expect("same layout");
        frozen_loss_and_grad(model, &p, &pairs, &plan, &train).expect("forward").0
    };
    let report = finite_diff_check(f, &model.params.flatten(), &analytic, 1e-4)?;
    Ok(CheckOutcome {
        name: "pipeline_param_grad",
        max_rel_err: report.max_rel_err,
        tolerance: PARAM_TOLERANCE,
        checked: report.checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(fault: Option<AdjointFault>) -> SuiteConfig {
        SuiteConfig {
            seed: 3,
            patch_size: 8,
            use_frn: true,
            dropout_rate: 0.3,
            modulation: ModulationConfig::default(),
            fault,
        }
    }

    #[test]
    fn clean_suite_passes_and_names_every_check() {
        let out = run_suite(&config(None)).unwrap();
        let names: Vec<_> = out.iter().map(|c| c.name).collect();
        assert_eq!(names, CHECK_NAMES);
        for c in &out {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn forced_bug_is_caught() {
        let out = run_suite(&config(Some(FORCED_BUG))).unwrap();
        let failed: Vec<_> = out.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
        assert_eq!(failed, ["encoder_param_grad", "pipeline_param_grad"]);
    }

    #[test]
    fn pair_at_angle_hits_the_angle() {
        let mut rng = stream_rng(0, Stream::Check, 0, 0);
        for dim in [2, 5] {
            let (x, y) = pair_at_angle(&mut rng, dim, 1.3);
            let (x, y) = (normalize(&RawDescriptor::new(x).unwrap()).unwrap(), normalize(&RawDescriptor::new(y).unwrap()).unwrap());
            assert!((crate::geometry::angle(&x, &y) - 1.3).abs() < 1e-12);
        }
    }
}
