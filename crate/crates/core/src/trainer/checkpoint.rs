//! Versioned binary checkpoints. Every float is stored bit-exact, so a
//! resumed run continues exactly where the saved one stopped.

use std::path::Path;

use ndarray::Array2;

use super::{Model, OptimState, TrainState};
use crate::container::{Reader, Writer};
use crate::encoder::{EncoderConfig, ParamSet};
use crate::error::{Error, Result};
use crate::stats::StatState;

const MAGIC: &[u8; 8] = b"SDGMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration (TOML text) that produced the state.
    pub run_config: String,
    pub state: TrainState,
}

fn write_params(w: &mut Writer, p: &ParamSet) {
    w.u64(p.len() as u64);
    for (name, v) in p.names().iter().zip(p.values()) {
        w.str(name);
        w.u64(v.nrows() as u64);
        w.u64(v.ncols() as u64);
        w.f64s(v.as_standard_layout().as_slice().expect("standard layout"));
    }
}

fn read_params(r: &mut Reader, path: &Path) -> Result<ParamSet> {
    let n = r.u64()? as usize;
    let mut names = Vec::new();
    let mut values = Vec::new();
    for _ in 0..n {
        names.push(r.str()?);
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let data = r.f64s()?;
        values.push(Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::format(path, e.to_string()))?);
    }
    ParamSet::new(names, values)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        let enc = &self.state.model.config;
        w.u64(enc.input_dim as u64);
        w.u64s(&enc.widths.iter().map(|x| *x as u64).collect::<Vec<_>>());
        w.u64(enc.output_dim as u64);
        w.f64(enc.dropout_rate);
        w.bool(enc.use_frn);
        w.u64(enc.seed);
        w.str(&self.run_config);
        write_params(&mut w, &self.state.model.params);
        write_params(&mut w, &self.state.optim.momentum);
        w.u64(self.state.optim.iteration);
        w.f64s(&self.state.stats.fields());
        w.bool(self.state.stats.initialized);
        w.into_bytes()
    }

    pub fn from_bytes(path: &Path, bytes: Vec<u8>) -> Result<Self> {
        let mut r = Reader::from_bytes(path, bytes, MAGIC, VERSION)?;
        let config = EncoderConfig {
            input_dim: r.u64()? as usize,
            widths: r.u64s()?.into_iter().map(|x| x as usize).collect(),
            output_dim: r.u64()? as usize,
            dropout_rate: r.f64()?,
            use_frn: r.bool()?,
            seed: r.u64()?,
        };
        let run_config = r.str()?;
        let params = read_params(&mut r, path)?;
        let momentum = read_params(&mut r, path)?;
        let iteration = r.u64()?;
        let fields: [f64; 8] = r
            .f64s()?
            .try_into()
            .map_err(|_| Error::format(path, "expected 8 statistics"))?;
        let initialized = r.bool()?;
        r.finish()?;
        config.validate()?;
        params.check_layout(&config)?;
        momentum.check_layout(&config)?;
        Ok(Self {
            run_config,
            state: TrainState {
                model: Model { config, params },
                stats: StatState::from_fields(fields, initialized),
                optim: OptimState { momentum, iteration },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, bytes)
    }
}
