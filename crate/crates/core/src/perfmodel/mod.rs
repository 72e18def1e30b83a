//! Closed-form timing of tile-query batches and the benchmark harness that
//! measures the same quantity in simulated time.

pub mod bench;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("calibration needs at least two distinct item counts")]
    Degenerate,
    #[error("scenario: {0}")]
    Scenario(String),
}

/// Per-query processing constants shared by engines and the query handler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessingCosts {
    #[serde(rename = "C1")]
    pub c1_ms: f64,
    #[serde(rename = "C2")]
    pub c2_ms: f64,
    #[serde(rename = "C3")]
    pub c3_ms: f64,
    #[serde(rename = "Pdb")]
    pub pdb: f64,
    #[serde(rename = "Pqh")]
    pub pqh: f64,
    #[serde(rename = "Ds")]
    pub ds_bytes: f64,
    #[serde(rename = "Bw")]
    pub bw_bps: f64,
}

impl Default for ProcessingCosts {
    fn default() -> Self {
        ProcessingCosts { c1_ms: 3.0, c2_ms: 0.008, c3_ms: 20.0, pdb: 0.85, pqh: 0.15, ds_bytes: 55.0, bw_bps: 200e6 }
    }
}

impl ProcessingCosts {
    pub fn tq(&self, ni: usize) -> f64 {
        self.c1_ms + self.c2_ms * ni as f64
    }

    /// Engine share of one tile-query.
    pub fn engine_ms(&self, ni: usize) -> f64 {
        self.pdb * self.tq(ni)
    }

    /// Query-handler share of one response, including moving its items.
    pub fn handler_ms(&self, ni: usize) -> f64 {
        self.pqh * self.tq(ni) + self.transfer_ms(ni)
    }

    pub fn transfer_ms(&self, ni: usize) -> f64 {
        ni as f64 * self.ds_bytes * 8.0 / self.bw_bps * 1000.0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [self.c1_ms, self.c2_ms, self.c3_ms, self.pdb, self.pqh, self.ds_bytes];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) || !(self.bw_bps > 0.0) {
            return Err(ModelError::Invalid("costs must be finite and non-negative, Bw positive".into()));
        }
        if (self.pdb + self.pqh - 1.0).abs() > 1e-9 {
            return Err(ModelError::Invalid(format!("Pdb + Pqh = {} (must be 1)", self.pdb + self.pqh)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(flatten)]
    pub costs: ProcessingCosts,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "Ndb")]
    pub ndb: usize,
    #[serde(rename = "Nq")]
    pub nq: usize,
    #[serde(rename = "Ni")]
    pub ni: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { costs: ProcessingCosts::default(), h: 0.0, ndb: 1, nq: 500, ni: 100 }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.costs.validate()?;
        if !(0.0..=1.0).contains(&self.h) {
            return Err(ModelError::Invalid(format!("H = {} outside [0, 1]", self.h)));
        }
        if self.ndb == 0 {
            return Err(ModelError::Invalid("Ndb must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn tq_processing(p: &ModelParams) -> f64 {
    p.costs.tq(p.ni)
}

pub fn batch_duration(p: &ModelParams) -> f64 {
    let c = &p.costs;
    let nq = p.nq as f64;
    c.c3_ms + nq * ((1.0 - p.h) * c.pdb / p.ndb as f64 + c.pqh) * tq_processing(p) + p.nq as f64 * c.transfer_ms(p.ni)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(rename = "C1")]
    pub c1_ms: f64,
    #[serde(rename = "C2")]
    pub c2_ms: f64,
    /// Per-sample `measured - fitted`.
    pub residuals: Vec<f64>,
    #[serde(rename = "rmsResidual")]
    pub rms_residual: f64,
}

/// Least-squares line through `(Ni, measured TQp)` samples.
pub fn calibrate(samples: &[(usize, f64)]) -> Result<Calibration, ModelError> {
    let n = samples.len() as f64;
    let distinct: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.0).collect();
    if distinct.len() < 2 {
        return Err(ModelError::Degenerate);
    }
    let mx = samples.iter().map(|s| s.0 as f64).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 as f64 - mx).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 as f64 - mx) * (s.1 - my)).sum();
    let c2 = sxy / sxx;
    let c1 = my - c2 * mx;
    let residuals: Vec<f64> = samples.iter().map(|s| s.1 - (c1 + c2 * s.0 as f64)).collect();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    Ok(Calibration { c1_ms: c1, c2_ms: c2, residuals, rms_residual: rms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn anchor() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn eq1_values() {
        let mut p = anchor();
        p.ni = 1;
        assert!((tq_processing(&p) - 3.008).abs() < 1e-12);
        p.ni = 100;
        assert!((tq_processing(&p) - 3.8).abs() < 1e-12);
        p.ni = 0;
        assert_eq!(tq_processing(&p), 3.0);
    }

    #[test]
    fn eq2_anchor_points() {
        let p = anchor();
        assert!((batch_duration(&p) - 2030.0).abs() < 1e-9);
        let h1 = ModelParams { h: 1.0, ..p };
        assert!((batch_duration(&h1) - 415.0).abs() < 1e-9);
        let empty = ModelParams { nq: 0, ..p };
        assert_eq!(batch_duration(&empty), 20.0);
    }

    #[test]
    fn one_big_beats_ten_small() {
        let big = ModelParams { nq: 1, ni: 100, h: 0.0, ..anchor() };
        let small = ModelParams { nq: 10, ni: 10, ..big };
        assert!(batch_duration(&big) < batch_duration(&small));
    }

    #[test]
    fn validation() {
        assert!(anchor().validate().is_ok());
        assert!(ModelParams { h: 1.5, ..anchor() }.validate().is_err());
        assert!(ModelParams { ndb: 0, ..anchor() }.validate().is_err());
        let mut p = anchor();
        p.costs.pqh = 0.2;
        assert!(p.validate().is_err());
    }

    #[test]
    fn calibrate_exact_and_noisy() {
        let exact: Vec<(usize, f64)> = [1, 10, 50, 100].iter().map(|&n| (n, 3.0 + 0.008 * n as f64)).collect();
        let c = calibrate(&exact).unwrap();
        assert!((c.c1_ms - 3.0).abs() / 3.0 < 1e-9);
        assert!((c.c2_ms - 0.008).abs() / 0.008 < 1e-9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noisy: Vec<(usize, f64)> =
            (0..400).map(|i| (1 + i % 200, 3.0 + 0.008 * (1 + i % 200) as f64 + rng.gen_range(-0.05..0.05))).collect();
        let c = calibrate(&noisy).unwrap();
        assert!((c.c1_ms - 3.0).abs() < 0.02);
        assert!((c.c2_ms - 0.008).abs() < 0.0002);
        assert!(c.rms_residual < 0.05);
        assert_eq!(calibrate(&[(5, 1.0), (5, 2.0)]), Err(ModelError::Degenerate));
    }

    proptest! {
        #[test]
        fn monotone_in_ndb_and_h(ndb in 1usize..8, h in 0.0f64..0.9, nq in 1usize..1000, ni in 0usize..500) {
            let p = ModelParams { ndb, h, nq, ni, ..ModelParams::default() };
            let more_db = ModelParams { ndb: ndb + 1, ..p };
            let more_h = ModelParams { h: h + 0.1, ..p };
            prop_assert!(batch_duration(&more_db) <= batch_duration(&p));
            prop_assert!(batch_duration(&more_h) <= batch_duration(&p));
        }

        #[test]
        fn linear_in_nq(nq in 0usize..1000, ni in 0usize..500) {
            let p = ModelParams { nq, ni, ..ModelParams::default() };
            let a = batch_duration(&p);
            let b = batch_duration(&ModelParams { nq: nq + 1, ..p });
            let c = batch_duration(&ModelParams { nq: nq + 2, ..p });
            prop_assert!(((c - b) - (b - a)).abs() < 1e-6);
        }
    }
}
