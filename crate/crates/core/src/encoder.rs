//! A small fully connected descriptor encoder.
//!
//! ```text
//! patch ─ FRN ─┬─ dense ─ FRN ─ TLU ─┐ (per hidden layer)
//!              └─────────────────────┴─ dropout ─ dense (no bias) ─ raw descriptor
//! ```
//!
//! The input block normalizes the raw patch without a threshold. Hidden
//! layers use filter response normalization over the feature vector of each
//! sample followed by a learned threshold. Dropout sits right before the
//! final projection, which has neither bias nor activation.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::RawDescriptor;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    /// FRN + TLU blocks (and the input FRN). Plain ReLU layers otherwise.
    pub use_frn: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16 * 16,
            widths: vec![256, 128],
            output_dim: 32,
            dropout_rate: 0.3,
            use_frn: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("encoder needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim < 2 || self.widths.contains(&0) {
            return Err(Error::Config(
                "encoder dimensions must be positive (output at least 2)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, (usize, usize))> {
        let mut layout = Vec::new();
        if self.use_frn {
            layout.push(("input.gamma".into(), (1, self.input_dim)));
            layout.push(("input.beta".into(), (1, self.input_dim)));
        }
        let mut fan_in = self.input_dim;
        for (l, &w) in self.widths.iter().enumerate() {
            layout.push((format!("hidden{l}.weight"), (fan_in, w)));
            layout.push((format!("hidden{l}.bias"), (1, w)));
            if self.use_frn {
                layout.push((format!("hidden{l}.gamma"), (1, w)));
                layout.push((format!("hidden{l}.beta"), (1, w)));
                layout.push((format!("hidden{l}.tau"), (1, w)));
            }
            fan_in = w;
        }
        layout.push(("output.weight".into(), (fan_in, self.output_dim)));
        layout
    }
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, values: Vec<Array2<f64>>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} names for {} tensors",
                names.len(),
                values.len()
            )));
        }
        Ok(Self { names, values })
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            names: other.names.clone(),
            values: other.values.iter().map(|v| Array2::zeros(v.dim())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    /// Same layout, values taken from `flat` in [`flatten`](Self::flatten) order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch(format!(
                "{} scalars for a parameter set of {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        let values = self
            .values
            .iter()
            .map(|v| {
                let n = v.len();
                let t = Array2::from_shape_vec(v.dim(), flat[offset..offset + n].to_vec()).expect("shape");
                offset += n;
                t
            })
            .collect();
        Ok(Self {
            names: self.names.clone(),
            values,
        })
    }

    /// Checks names and shapes against a config's layout.
    pub fn check_layout(&self, cfg: &EncoderConfig) -> Result<()> {
        let layout = cfg.param_layout();
        let matches = layout.len() == self.len()
            && layout
                .iter()
                .zip(self.names.iter().zip(&self.values))
                .all(|((ln, ls), (n, v))| ln == n && *ls == v.dim());
        if !matches {
            return Err(Error::ShapeMismatch(
                "parameter tensors do not match the encoder configuration".into(),
            ));
        }
        Ok(())
    }
}

/// He-normal hidden weights, unit-variance output projection, FRN scales at
/// one and shifts, thresholds and biases at zero.
pub fn init_params(cfg: &EncoderConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (name, (rows, cols)) in cfg.param_layout() {
        let value = if name.ends_with(".weight") {
            let gain = if name.starts_with("output") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / rows as f64).sqrt()).expect("valid std");
            Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
        } else if name.ends_with(".gamma") {
            Array2::ones((rows, cols))
        } else {
            Array2::zeros((rows, cols))
        };
        names.push(name);
        values.push(value);
    }
    ParamSet::new(names, values)
}

/// Dropout draws are keyed by `(seed, iteration, layer)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, iteration: u64 },
    Eval,
}

/// Puts every parameter on the tape.
pub fn bind_params(tape: &mut Tape, params: &ParamSet) -> Vec<Var> {
    params.values().iter().map(|v| tape.param(v.clone())).collect()
}

/// Records the encoder on `tape` for a batch of flattened patches (one per
/// row) and returns the raw descriptors node.
pub fn forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &[Var],
    input: Array2<f64>,
    mode: Mode,
) -> Result<Var> {
    if input.ncols() != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} inputs per patch, got {}",
            cfg.input_dim,
            input.ncols()
        )));
    }
    if params.len() != cfg.param_layout().len() {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} parameter tensors, got {}",
            cfg.param_layout().len(),
            params.len()
        )));
    }
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("layout checked");
    let mut h = tape.constant(input);
    if cfg.use_frn {
        let (g, b) = (next(), next());
        h = tape.frn(h, g, b)?;
    }
    for &width in &cfg.widths {
        let (w, b) = (next(), next());
        h = tape.dense(h, w, Some(b))?;
        h = if cfg.use_frn {
            let (g, beta, tau) = (next(), next(), next());
            tape.frn_tlu(h, g, beta, tau)?
        } else {
            let zero = tape.constant(Array2::zeros((1, width)));
            tape.tlu(h, zero)?
        };
    }
    if let Mode::Train { seed, iteration } = mode {
        let mut rng = stream_rng(seed, Stream::Dropout, iteration, cfg.widths.len() as u64);
        h = tape.dropout(h, cfg.dropout_rate, &mut rng, true)?;
    }
    let w = next();
    tape.dense(h, w, None)
}

/// Inference-mode descriptors for a batch of patches (one per row).
pub fn encode_batch(patches: ArrayView2<f64>, params: &ParamSet, cfg: &EncoderConfig) -> Result<Array2<f64>> {
    params.check_layout(cfg)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.values().iter().map(|v| tape.constant(v.clone())).collect();
    let out = forward(&mut tape, cfg, &vars, patches.to_owned(), Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// Single-patch convenience wrapper around [`forward`].
pub fn encode(patch: &[f64], params: &ParamSet, cfg: &EncoderConfig, mode: Mode) -> Result<RawDescriptor> {
    params.check_layout(cfg)?;
    let input = Array2::from_shape_vec((1, patch.len()), patch.to_vec()).expect("row vector");
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.values().iter().map(|v| tape.constant(v.clone())).collect();
    let out = forward(&mut tape, cfg, &vars, input, mode)?;
    RawDescriptor::new(tape.value(out).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 16,
            widths: vec![12, 8],
            output_dim: 6,
            dropout_rate: 0.3,
            use_frn: true,
            seed: 3,
        }
    }

    #[test]
    fn layout_and_validation() {
        let cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        let names: Vec<_> = cfg.param_layout().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "input.gamma");
        assert_eq!(names.last().unwrap(), "output.weight");
        assert!(!names.iter().any(|n| n == "output.bias"));
        assert!(EncoderConfig { widths: vec![], ..cfg.clone() }.validate().is_err());
        assert!(EncoderConfig { dropout_rate: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn identity_layer_passes_through() {
        let cfg = EncoderConfig {
            input_dim: 4,
            widths: vec![4],
            output_dim: 4,
            dropout_rate: 0.0,
            use_frn: false,
            seed: 0,
        };
        let mut params = init_params(&cfg).unwrap();
        *params.get_mut("hidden0.weight").unwrap() = Array2::eye(4);
        *params.get_mut("output.weight").unwrap() = Array2::eye(4);
        let patch = [0.1, 0.9, 0.4, 0.0];
        let d = encode(&patch, &params, &cfg, Mode::Eval).unwrap();
        assert_eq!(d.values(), &patch);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = small_cfg();
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = EncoderConfig { seed: 4, ..cfg.clone() };
        assert_ne!(init_params(&cfg).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn dropout_is_keyed_by_iteration() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let patch: Vec<f64> = (0..16).map(|k| k as f64 / 16.0).collect();
        let train = |it| encode(&patch, &params, &cfg, Mode::Train { seed: 1, iteration: it }).unwrap();
        assert_eq!(train(5), train(5));
        assert_ne!(train(5), train(6));
        let eval = encode(&patch, &params, &cfg, Mode::Eval).unwrap();
        assert_eq!(eval, encode(&patch, &params, &cfg, Mode::Eval).unwrap());
    }

    #[test]
    fn wrong_input_size_is_a_shape_mismatch() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        assert!(matches!(
            encode(&[0.5; 9], &params, &cfg, Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
        let other = EncoderConfig { widths: vec![10, 8], ..cfg };
        assert!(matches!(
            encode(&[0.5; 16], &params, &other, Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = Array2::from_shape_simple_fn((5, 16), || rng.random_range(0.0..1.0));
        let weights = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-1.0..1.0));
        let mode = Mode::Train { seed: 9, iteration: 2 };
        let loss = |p: &ParamSet| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let vars = bind_params(&mut tape, p);
            let out = forward(&mut tape, &cfg, &vars, input.clone(), mode).unwrap();
            let l = tape.weighted_sum(out, weights.clone()).unwrap();
            let g = tape.backward(l).unwrap();
            let flat = vars
                .iter()
                .zip(p.values())
                .flat_map(|(v, t)| g.get_or_zeros(*v, t.dim()).into_iter())
                .collect();
            (tape.scalar(l), flat)
        };
        let (_, analytic) = loss(&params);
        let flat = params.flatten();
        let report = finite_diff_check(|x| loss(&params.with_flat(x).unwrap()).0, &flat, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn flat_round_trip() {
        let params = init_params(&small_cfg()).unwrap();
        let flat = params.flatten();
        assert_eq!(params.with_flat(&flat).unwrap(), params);
        assert!(params.with_flat(&flat[1..]).is_err());
    }
}
