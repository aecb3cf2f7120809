//! Behavior divergence between policies, measured on a scalar feature of the
//! trajectory: the ego speed at each step. Episodes become fixed-bin density
//! histograms; two behaviors compare via the absolute density difference
//! integrated over the feature range, which is symmetric, zero on identical
//! inputs, satisfies the triangle inequality, and is bounded by 2.
//!
//! The shaping term a pseudo-agent receives at episode end is
//! `-α / (metric + δ)` per reference: large when it mimics the reference,
//! vanishing as the behaviors separate. With the defaults (α = 1, δ = 0.1)
//! the penalty spans −10 (identical) to about −0.48 (fully disjoint).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::mdp::Snapshot;
use crate::{Error, Result};

/// Bin count of the speed histogram; one bin per m/s over [0, 30].
pub const SPEED_BINS: usize = 30;
pub const SPEED_LO: f64 = 0.0;
pub const SPEED_HI: f64 = 30.0;

/// The behavior feature observed at each trajectory step.
pub fn phi(snapshot: &Snapshot) -> f64 {
    snapshot.speed
}

/// Fixed-bin density histogram over a closed feature interval. Bins are
/// half-open `[lo + k·w, lo + (k+1)·w)`; a value sitting exactly on an
/// interior edge belongs to the upper bin, the top edge to the last bin, and
/// out-of-range values clamp to the boundary bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHistogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
    total: u64,
}

impl FeatureHistogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins >= 1 && hi > lo && lo.is_finite() && hi.is_finite());
        FeatureHistogram {
            lo,
            hi,
            counts: vec![0; bins],
            total: 0,
        }
    }

    /// The standard speed binning used everywhere in this crate.
    pub fn speed_bins() -> Self {
        FeatureHistogram::new(SPEED_LO, SPEED_HI, SPEED_BINS)
    }

    pub fn from_speeds(values: &[f64]) -> Self {
        let mut h = FeatureHistogram::speed_bins();
        h.add_samples(values.iter().copied());
        h
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, bin: usize) -> u64 {
        self.counts[bin]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// No samples yet: densities are undefined and comparisons must skip it.
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn bin_index(&self, value: f64) -> usize {
        assert!(value.is_finite(), "histogram fed a non-finite feature");
        let v = value.clamp(self.lo, self.hi);
        let idx = ((v - self.lo) / self.bin_width()).floor() as usize;
        idx.min(self.counts.len() - 1)
    }

    pub fn add_sample(&mut self, value: f64) {
        let bin = self.bin_index(value);
        self.counts[bin] += 1;
        self.total += 1;
    }

    pub fn add_samples(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.add_sample(v);
        }
    }

    /// Normalized density of one bin; integrates to one over the range.
    pub fn density(&self, bin: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts[bin] as f64 / (self.total as f64 * self.bin_width())
    }

    fn same_binning(&self, other: &FeatureHistogram) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.counts.len() == other.counts.len()
    }

    /// Plain-text export, one row per bin.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_lo,bin_hi,count,density")?;
        for b in 0..self.counts.len() {
            let lo = self.lo + b as f64 * self.bin_width();
            let hi = self.lo + (b + 1) as f64 * self.bin_width();
            writeln!(w, "{lo},{hi},{},{}", self.counts[b], self.density(b))?;
        }
        Ok(())
    }
}

/// Integrated absolute density difference `Σ_b |μ1(b) − μ2(b)| · Δφ`.
/// Rejects mismatched binning and histograms with no samples.
pub fn metric(h1: &FeatureHistogram, h2: &FeatureHistogram) -> Result<f64> {
    if !h1.same_binning(h2) {
        return Err(Error::Contract(format!(
            "histogram binning mismatch: [{}, {}]x{} vs [{}, {}]x{}",
            h1.lo,
            h1.hi,
            h1.counts.len(),
            h2.lo,
            h2.hi,
            h2.counts.len()
        )));
    }
    if h1.is_empty() || h2.is_empty() {
        return Err(Error::Contract(
            "behavior metric over an empty histogram".into(),
        ));
    }
    let w = h1.bin_width();
    let mut m = 0.0;
    for b in 0..h1.counts.len() {
        m += (h1.density(b) - h2.density(b)).abs() * w;
    }
    // Each density integrates to 1, so the true value is at most 2; summing
    // the per-bin quotients can overshoot that bound by a few ulp when the
    // supports are disjoint.
    Ok(m.min(2.0))
}

/// Parameters of the divergence-shaped terminal reward, the `[shaping]`
/// table of a run config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingParams {
    /// Penalty scale; zero disables shaping entirely.
    pub alpha: f64,
    /// Saturation offset keeping the penalty finite at zero divergence.
    pub delta: f64,
    /// Reporting threshold: behaviors at least this far apart count as
    /// meaningfully different.
    pub threshold: f64,
}

impl Default for ShapingParams {
    fn default() -> Self {
        ShapingParams {
            alpha: 1.0,
            delta: 0.1,
            threshold: 1.1,
        }
    }
}

impl ShapingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha {} must be non-negative",
                self.alpha
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta {} outside (0, 1)",
                self.delta
            )));
        }
        if !(self.threshold > 0.0 && self.threshold <= 2.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 2]",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Terminal shaping term for one reference at the given divergence.
    pub fn pseudo_reward(&self, metric: f64) -> f64 {
        -self.alpha / (metric + self.delta)
    }

    pub fn sufficiently_different(&self, metric: f64) -> bool {
        metric >= self.threshold
    }
}

/// Pool every stored episode of a reference agent into one histogram.
/// Counts are additive, so the result ignores episode order.
pub fn pooled_speed_histogram<'a>(
    episodes: impl IntoIterator<Item = &'a [f64]>,
) -> FeatureHistogram {
    let mut h = FeatureHistogram::speed_bins();
    for ep in episodes {
        h.add_samples(ep.iter().copied());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_mass_density_is_reciprocal_bin_width() {
        let h = FeatureHistogram::from_speeds(&[5.3; 100]);
        for b in 0..SPEED_BINS {
            let want = if b == 5 { 1.0 } else { 0.0 };
            assert_eq!(h.density(b), want);
        }
        assert_eq!(h.total(), 100);
    }

    #[test]
    fn edge_values_land_in_upper_bin() {
        let mut h = FeatureHistogram::speed_bins();
        h.add_sample(7.0);
        assert_eq!(h.count(7), 1);
        h.add_sample(0.0);
        assert_eq!(h.count(0), 1);
        h.add_sample(29.0);
        assert_eq!(h.count(29), 1);
        // the top edge closes the last bin instead of opening a new one
        h.add_sample(30.0);
        assert_eq!(h.count(29), 2);
        // out-of-range clamps
        h.add_sample(31.5);
        assert_eq!(h.count(29), 3);
        h.add_sample(-2.0);
        assert_eq!(h.count(0), 2);
        h.add_sample(6.999999);
        assert_eq!(h.count(6), 1);
    }

    #[test]
    fn uniform_samples_fill_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vals: Vec<f64> = (0..30_000).map(|_| rng.random_range(0.0..30.0)).collect();
        let h = FeatureHistogram::from_speeds(&vals);
        for b in 0..SPEED_BINS {
            let dev = (h.density(b) - 1.0 / 30.0).abs() / (1.0 / 30.0);
            assert!(dev < 0.2, "bin {b} density {} off by {dev}", h.density(b));
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let n = rng.random_range(1..500);
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..31.0)).collect();
            let h = FeatureHistogram::from_speeds(&vals);
            let integral: f64 = (0..SPEED_BINS).map(|b| h.density(b) * h.bin_width()).sum();
            assert!((integral - 1.0).abs() < 1e-12, "integral {integral}");
        }
    }

    #[test]
    fn identical_behaviors_diverge_zero() {
        let h = FeatureHistogram::from_speeds(&[1.0, 4.5, 12.0, 29.9]);
        assert_eq!(metric(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_behaviors_diverge_two() {
        let a = FeatureHistogram::from_speeds(&[2.5; 40]);
        let b = FeatureHistogram::from_speeds(&[9.1; 7]);
        assert!((metric(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_half_overlap() {
        // a: half mass in bin 0, half in bin 1; b: all mass in bin 1
        let a = FeatureHistogram::from_speeds(&[0.5, 1.5]);
        let b = FeatureHistogram::from_speeds(&[1.5, 1.5]);
        // |0.5-0| + |0.5-1| = 1.0
        assert!((metric(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_rejects_mismatched_binning_and_empty() {
        let a = FeatureHistogram::new(0.0, 30.0, 30);
        let b = FeatureHistogram::new(0.0, 30.0, 15);
        assert!(metric(&a, &b).is_err());
        let mut c = FeatureHistogram::speed_bins();
        c.add_sample(3.0);
        let empty = FeatureHistogram::speed_bins();
        assert!(metric(&c, &empty).is_err());
        assert!(empty.is_empty() && !c.is_empty());
    }

    #[test]
    fn zero_divergence_saturates_the_penalty() {
        let p = ShapingParams::default();
        assert!((p.pseudo_reward(0.0) - -10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_means_zero_shaping() {
        let p = ShapingParams {
            alpha: 0.0,
            ..ShapingParams::default()
        };
        for m in [0.0, 0.3, 1.7, 2.0] {
            assert_eq!(p.pseudo_reward(m), 0.0);
        }
    }

    #[test]
    fn hand_computed_penalties() {
        let p = ShapingParams::default();
        assert!((p.pseudo_reward(0.9) - -1.0).abs() < 1e-12);
        // two references at 0.9 and 1.9 sum to -1.5
        let total = p.pseudo_reward(0.9) + p.pseudo_reward(1.9);
        assert!((total - -1.5).abs() < 1e-12);
    }

    #[test]
    fn penalty_stays_within_bounds() {
        let p = ShapingParams::default();
        let floor = -p.alpha / p.delta;
        let mut m = 0.0;
        while m <= 2.0 {
            let r = p.pseudo_reward(m);
            assert!(r >= floor && r < 0.0, "m={m} r={r}");
            m += 0.01;
        }
    }

    #[test]
    fn threshold_classification() {
        let p = ShapingParams::default();
        assert!(!p.sufficiently_different(0.4));
        assert!(!p.sufficiently_different(1.0999));
        assert!(p.sufficiently_different(1.1));
        assert!(p.sufficiently_different(2.0));
    }

    fn random_histogram(rng: &mut ChaCha8Rng) -> FeatureHistogram {
        let n = rng.random_range(1..200);
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
        FeatureHistogram::from_speeds(&vals)
    }

    #[test]
    fn metric_is_a_pseudometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..1000 {
            let (a, b, c) = (
                random_histogram(&mut rng),
                random_histogram(&mut rng),
                random_histogram(&mut rng),
            );
            let (ab, ba) = (metric(&a, &b).unwrap(), metric(&b, &a).unwrap());
            assert_eq!(ab, ba, "symmetry");
            assert_eq!(metric(&a, &a).unwrap(), 0.0, "identity");
            let (ac, bc) = (metric(&a, &c).unwrap(), metric(&b, &c).unwrap());
            assert!(ac <= ab + bc + 1e-12, "triangle: {ac} > {ab} + {bc}");
            assert!((0.0..=2.0 + 1e-12).contains(&ab), "range: {ab}");
        }
    }

    #[test]
    fn pooled_histogram_ignores_episode_order() {
        let eps: Vec<Vec<f64>> = vec![vec![1.0, 2.0, 3.0], vec![15.5; 10], vec![29.0, 0.2]];
        let fwd = pooled_speed_histogram(eps.iter().map(|e| e.as_slice()));
        let rev = pooled_speed_histogram(eps.iter().rev().map(|e| e.as_slice()));
        assert_eq!(fwd, rev);
        assert_eq!(fwd.total(), 15);
    }

    #[test]
    fn csv_export_golden() {
        let mut h = FeatureHistogram::new(0.0, 3.0, 3);
        h.add_samples([0.5, 0.7, 2.2, 2.9]);
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "bin_lo,bin_hi,count,density\n0,1,2,0.5\n1,2,0,0\n2,3,2,0.5\n"
        );
    }

    #[test]
    fn shaping_params_validation() {
        assert!(ShapingParams::default().validate().is_ok());
        assert!(ShapingParams {
            alpha: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ShapingParams {
            delta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ShapingParams {
            delta: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ShapingParams {
            threshold: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ShapingParams {
            threshold: 2.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
