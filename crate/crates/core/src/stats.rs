//! Global statistics tracked with a fixed-rate exponential moving average.
//!
//! `β_t = 0.999·β_{t−1} + 0.001·μ_t`, where `μ_t` is the in-batch estimate.
//! Angle statistics are seeded from the first batch; the power expectations
//! start at [`POWER_INIT`] and only ever move through the update.

use crate::error::{Error, Result};
use crate::mining::TripletBatch;

/// Weight kept from the previous estimate.
pub const EMA_KEEP: f64 = 0.999;
/// Replacement rate for the batch estimate.
pub const EMA_RATE: f64 = 0.001;
/// Initial `E[P⁺]` and `E[P⁻]`.
pub const POWER_INIT: f64 = 10_000.0;

#[inline]
pub fn ema_update(beta_prev: f64, mu_t: f64) -> f64 {
    EMA_KEEP * beta_prev + EMA_RATE * mu_t
}

/// Mean and population standard deviation over unmasked entries.
pub fn batch_moments(values: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if values.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values vs {} mask entries",
            values.len(),
            mask.len()
        )));
    }
    let (count, sum) = values
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0usize, 0.0), |(c, s), (v, _)| (c + 1, s + v));
    if count < 2 {
        return Err(Error::InsufficientData { needed: 2, got: count });
    }
    let mean = sum / count as f64;
    let var = values
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| (v - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    Ok((mean, var.sqrt()))
}

/// The tracked statistics vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatState {
    pub e_theta_pos: f64,
    pub std_theta_pos: f64,
    pub e_theta_neg: f64,
    pub std_theta_neg: f64,
    pub e_theta_rel: f64,
    pub std_theta_rel: f64,
    pub e_power_pos: f64,
    pub e_power_neg: f64,
    /// Set once the angle statistics have seen a batch.
    pub initialized: bool,
}

impl Default for StatState {
    fn default() -> Self {
        Self::new()
    }
}

impl StatState {
    pub fn new() -> Self {
        Self {
            e_theta_pos: 0.0,
            std_theta_pos: 0.0,
            e_theta_neg: 0.0,
            std_theta_neg: 0.0,
            e_theta_rel: 0.0,
            std_theta_rel: 0.0,
            e_power_pos: POWER_INIT,
            e_power_neg: POWER_INIT,
            initialized: false,
        }
    }

    pub const CSV_FIELDS: [&'static str; 8] = [
        "e_theta_pos",
        "std_theta_pos",
        "e_theta_neg",
        "std_theta_neg",
        "e_theta_rel",
        "std_theta_rel",
        "e_power_pos",
        "e_power_neg",
    ];

    pub fn fields(&self) -> [f64; 8] {
        [
            self.e_theta_pos,
            self.std_theta_pos,
            self.e_theta_neg,
            self.std_theta_neg,
            self.e_theta_rel,
            self.std_theta_rel,
            self.e_power_pos,
            self.e_power_neg,
        ]
    }

    pub fn from_fields(fields: [f64; 8], initialized: bool) -> Self {
        let [a, b, c, d, e, f, g, h] = fields;
        Self {
            e_theta_pos: a,
            std_theta_pos: b,
            e_theta_neg: c,
            std_theta_neg: d,
            e_theta_rel: e,
            std_theta_rel: f,
            e_power_pos: g,
            e_power_neg: h,
            initialized,
        }
    }
}

/// EMA-updates the six angle statistics from the valid triplets of `batch`.
pub fn update_angle_stats(state: &StatState, batch: &TripletBatch) -> Result<StatState> {
    let mask = &batch.valid_mask;
    let (mp, sp) = batch_moments(&batch.theta_pos, mask)?;
    let (mn, sn) = batch_moments(&batch.theta_neg, mask)?;
    let (mr, sr) = batch_moments(&batch.theta_rel, mask)?;
    let mut next = *state;
    if state.initialized {
        next.e_theta_pos = ema_update(state.e_theta_pos, mp);
        next.std_theta_pos = ema_update(state.std_theta_pos, sp);
        next.e_theta_neg = ema_update(state.e_theta_neg, mn);
        next.std_theta_neg = ema_update(state.std_theta_neg, sn);
        next.e_theta_rel = ema_update(state.e_theta_rel, mr);
        next.std_theta_rel = ema_update(state.std_theta_rel, sr);
    } else {
        next.e_theta_pos = mp;
        next.std_theta_pos = sp;
        next.e_theta_neg = mn;
        next.std_theta_neg = sn;
        next.e_theta_rel = mr;
        next.std_theta_rel = sr;
        next.initialized = true;
    }
    Ok(next)
}

/// EMA-updates the power expectations with the batch powers.
pub fn update_power_stats(state: &StatState, p_pos: f64, p_neg: f64) -> Result<StatState> {
    for p in [p_pos, p_neg] {
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::Domain {
                value: p,
                domain: "[0, inf)",
            });
        }
    }
    let mut next = *state;
    next.e_power_pos = ema_update(state.e_power_pos, p_pos);
    next.e_power_neg = ema_update(state.e_power_neg, p_neg);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn moments_examples() {
        assert_eq!(batch_moments(&[1.0, 1.0, 1.0], &[true; 3]).unwrap(), (1.0, 0.0));
        assert_eq!(batch_moments(&[0.0, 2.0], &[true; 2]).unwrap(), (1.0, 1.0));
        assert_eq!(
            batch_moments(&[0.0, 100.0, 2.0], &[true, false, true]).unwrap(),
            (1.0, 1.0)
        );
        assert!(matches!(
            batch_moments(&[1.0, 2.0], &[true, false]),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..10_000).map(|_| rng.random_range(-3.0..5.0)).collect();
        let mask = vec![true; v.len()];
        let (mean, std) = batch_moments(&v, &mask).unwrap();
        // Oracle: Kahan-summed mean, then Kahan-summed squared deviations.
        let kahan = |it: &mut dyn Iterator<Item = f64>| {
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for x in it {
                let y = x - c;
                let t = s + y;
                c = (t - s) - y;
                s = t;
            }
            s
        };
        let m = kahan(&mut v.iter().copied()) / v.len() as f64;
        let var = kahan(&mut v.iter().map(|x| (x - m) * (x - m))) / v.len() as f64;
        assert!((mean - m).abs() <= 1e-12);
        assert!((std - var.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn ema_examples() {
        assert_relative_eq!(ema_update(10_000.0, 300.0), 9990.3, max_relative = 1e-14);
        for c in [0.0, 1.0, -0.34, 279.0] {
            assert_relative_eq!(ema_update(c, c), c, max_relative = 1e-15);
        }
    }

    #[test]
    fn ema_constant_input_matches_loop_oracle() {
        let (c, b0) = (0.5, 3.0);
        let mut beta = b0;
        let mut oracle = b0;
        for _ in 0..5000 {
            beta = ema_update(beta, c);
            oracle = 0.999 * oracle + 0.001 * c;
        }
        assert_eq!(beta.to_bits(), oracle.to_bits());
        assert_relative_eq!(beta - c, 0.999f64.powi(5000) * (b0 - c), max_relative = 1e-9);
    }

    fn batch(pos: &[f64], neg: &[f64]) -> TripletBatch {
        TripletBatch::from_angles(pos.to_vec(), neg.to_vec()).unwrap()
    }

    #[test]
    fn first_batch_seeds_angle_stats() {
        let b = batch(&[0.6, 1.0], &[1.2, 1.4]);
        let s = update_angle_stats(&StatState::new(), &b).unwrap();
        assert!(s.initialized);
        assert_relative_eq!(s.e_theta_pos, 0.8, epsilon = 1e-15);
        assert_relative_eq!(s.std_theta_pos, 0.2, epsilon = 1e-15);
        assert_relative_eq!(s.e_theta_neg, 1.3, epsilon = 1e-15);
        assert_relative_eq!(s.e_theta_rel, -0.5, epsilon = 1e-15);
        assert_eq!(s.e_power_pos, POWER_INIT);
    }

    #[test]
    fn later_batches_use_ema() {
        let mut s = StatState::new();
        s.initialized = true;
        s.e_theta_pos = 0.84;
        let b = batch(&[0.7, 0.9], &[1.2, 1.4]);
        let s = update_angle_stats(&s, &b).unwrap();
        assert_relative_eq!(s.e_theta_pos, 0.83996, epsilon = 1e-12);
    }

    #[test]
    fn insufficient_valid_triplets_propagate() {
        let mut b = batch(&[0.6, 1.0, 0.3], &[1.2, 1.4, 1.0]);
        b.valid_mask = vec![false, true, false];
        assert!(matches!(
            update_angle_stats(&StatState::new(), &b),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn power_stats_examples() {
        let s = update_power_stats(&StatState::new(), 300.0, 300.0).unwrap();
        assert_relative_eq!(s.e_power_pos, 9990.3, max_relative = 1e-14);
        assert_eq!(s.e_power_pos, s.e_power_neg);
        assert!(update_power_stats(&s, -1.0, 0.0).is_err());

        let mut s = StatState::new();
        for _ in 0..30_000 {
            s = update_power_stats(&s, 280.0, 64.0).unwrap();
        }
        assert!((s.e_power_pos - 280.0).abs() < 1.0);
        assert!((s.e_power_neg - 64.0).abs() < 1.0);
    }

    #[test]
    fn stationary_relative_angle_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rel = Normal::new(-0.34, 0.22).unwrap();
        let mut s = StatState::new();
        for _ in 0..10_000 {
            let pos: Vec<f64> = (0..64).map(|_| rng.random_range(0.6..1.0)).collect();
            let neg: Vec<f64> = pos.iter().map(|p| p - rel.sample(&mut rng)).collect();
            s = update_angle_stats(&s, &batch(&pos, &neg)).unwrap();
        }
        assert!((s.e_theta_rel + 0.34).abs() <= 0.01, "{}", s.e_theta_rel);
        assert!((s.std_theta_rel - 0.22).abs() <= 0.01, "{}", s.std_theta_rel);
    }
}
