//! Token masking plans: gaze-guided, uniform random and tube masking.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::TokenGazeMass;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Gaze,
    Random,
    Tube,
}

impl MaskStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Gaze => "gaze",
            MaskStrategy::Random => "random",
            MaskStrategy::Tube => "tube",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaze" => Ok(MaskStrategy::Gaze),
            "random" => Ok(MaskStrategy::Random),
            "tube" => Ok(MaskStrategy::Tube),
            other => Err(Error::Config(format!(
                "unknown masking strategy `{other}` (expected gaze, random or tube)"
            ))),
        }
    }
}

/// Number of tokens masked per time index, `floor(rho * n_spatial)`.
pub fn masked_per_row(rho: f64, n_spatial: usize) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("masking ratio must be in (0, 1], got {rho}")));
    }
    // Absorb representation error such as 0.85 * 20 = 16.999999999999996.
    let k = (rho * n_spatial as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "masking ratio {rho} hides no token out of {n_spatial}"
        )));
    }
    Ok(k.min(n_spatial))
}

/// Per-time-index masking probabilities `softmax(d[t, .] / tau)`, kept in log
/// space so that sharp temperatures never underflow to zero probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDistribution {
    pub log_pi: Array2<f64>,
    pub tau: f64,
}

impl MaskDistribution {
    pub fn pi(&self) -> Array2<f64> {
        self.log_pi.mapv(f64::exp)
    }

    /// (N_r, N_s)
    pub fn dim(&self) -> (usize, usize) {
        self.log_pi.dim()
    }

    pub fn uniform(n_temporal: usize, n_spatial: usize) -> Self {
        Self {
            log_pi: Array2::from_elem((n_temporal, n_spatial), -(n_spatial as f64).ln()),
            tau: 1.0,
        }
    }
}

pub fn masking_distribution(mass: &TokenGazeMass, tau: f64) -> Result<MaskDistribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut log_pi = mass.d.mapv(|v| v / tau);
    for mut row in log_pi.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    Ok(MaskDistribution { log_pi, tau })
}

/// Boolean `N_r x N_s` mask, `true` = hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub mask: Array2<bool>,
    pub rho: f64,
    pub strategy: MaskStrategy,
}

impl MaskPlan {
    pub fn n_temporal(&self) -> usize {
        self.mask.nrows()
    }

    pub fn n_spatial(&self) -> usize {
        self.mask.ncols()
    }

    pub fn masked_counts(&self) -> Vec<usize> {
        self.mask
            .axis_iter(Axis(0))
            .map(|row| row.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Flat (time-major) indices of visible tokens, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }

    /// Flat (time-major) indices of masked tokens, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn total_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Run-length text encoding.
    ///
    /// ```text
    /// maskplan v1 strategy=<gaze|random|tube> rho=<f64> rows=<N_r> cols=<N_s>
    /// <row 0 runs>
    /// ...
    /// ```
    ///
    /// Each row line is a sequence of `<count><v|m>` runs covering all `N_s`
    /// tokens in spatial order, e.g. `3v2m11v` (`v` visible, `m` masked).
    pub fn to_rle(&self) -> String {
        let mut out = format!(
            "maskplan v1 strategy={} rho={} rows={} cols={}\n",
            self.strategy,
            self.rho,
            self.n_temporal(),
            self.n_spatial()
        );
        for row in self.mask.axis_iter(Axis(0)) {
            let mut iter = row.iter().peekable();
            while let Some(&m) = iter.next() {
                let mut run = 1;
                while iter.peek() == Some(&&m) {
                    iter.next();
                    run += 1;
                }
                out.push_str(&format!("{run}{}", if m { 'm' } else { 'v' }));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_rle(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("malformed mask plan: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("maskplan") || fields.next() != Some("v1") {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        let (mut strategy, mut rho, mut rows, mut cols) = (None, None, None, None);
        for field in fields {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header field `{field}`")))?;
            let num_err = |_| bad(format!("bad value in `{field}`"));
            match k {
                "strategy" => strategy = Some(v.parse::<MaskStrategy>()?),
                "rho" => rho = Some(v.parse::<f64>().map_err(|_| bad(format!("bad rho `{v}`")))?),
                "rows" => rows = Some(v.parse::<usize>().map_err(num_err)?),
                "cols" => cols = Some(v.parse::<usize>().map_err(num_err)?),
                _ => return Err(bad(format!("unknown header field `{k}`"))),
            }
        }
        let (Some(strategy), Some(rho), Some(rows), Some(cols)) = (strategy, rho, rows, cols) else {
            return Err(bad("header is missing a field".into()));
        };
        let mut mask = Array2::from_elem((rows, cols), false);
        for r in 0..rows {
            let line = lines.next().ok_or_else(|| bad(format!("missing row {r}")))?;
            let mut col = 0;
            let mut digits = String::new();
            for ch in line.trim().chars() {
                if ch.is_ascii_digit() {
                    digits.push(ch);
                    continue;
                }
                let run: usize = digits
                    .parse()
                    .map_err(|_| bad(format!("row {r}: run without length")))?;
                digits.clear();
                let masked = match ch {
                    'm' => true,
                    'v' => false,
                    other => return Err(bad(format!("row {r}: unexpected `{other}`"))),
                };
                if col + run > cols {
                    return Err(bad(format!("row {r} is longer than {cols}")));
                }
                for c in col..col + run {
                    mask[[r, c]] = masked;
                }
                col += run;
            }
            if col != cols || !digits.is_empty() {
                return Err(bad(format!("row {r} covers {col} of {cols} tokens")));
            }
        }
        Ok(Self { mask, rho, strategy })
    }
}

/// Draws `floor(rho * N_s)` distinct tokens per time index by Gumbel-top-k:
/// perturb `log pi` with i.i.d. Gumbel(0, 1) noise and keep the `k` largest,
/// which is distributed as `k` sequential multinomial draws without replacement.
pub fn sample_gaze_mask(dist: &MaskDistribution, rho: f64, seed: u64) -> Result<MaskPlan> {
    let (n_temporal, n_spatial) = dist.dim();
    let k = masked_per_row(rho, n_spatial)?;
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let mut mask = Array2::from_elem((n_temporal, n_spatial), false);
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(n_spatial);
    for (t, log_pi) in dist.log_pi.axis_iter(Axis(0)).enumerate() {
        let mut rng = seed::rng(seed::derive(seed, t as u64));
        keys.clear();
        keys.extend(
            log_pi
                .iter()
                .enumerate()
                .map(|(s, &lp)| (lp + gumbel.sample(&mut rng), s)),
        );
        if k < n_spatial {
            keys.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
        }
        for &(_, s) in &keys[..k] {
            mask[[t, s]] = true;
        }
    }
    Ok(MaskPlan {
        mask,
        rho,
        strategy: MaskStrategy::Gaze,
    })
}

fn uniform_row(n_spatial: usize, k: usize, seed: u64) -> Vec<usize> {
    index::sample(&mut seed::rng(seed), n_spatial, k).into_vec()
}

/// Independent uniform selection of `floor(rho * N_s)` tokens per time index.
pub fn sample_random_mask(n_temporal: usize, n_spatial: usize, rho: f64, seed: u64) -> Result<MaskPlan> {
    let k = masked_per_row(rho, n_spatial)?;
    let mut mask = Array2::from_elem((n_temporal, n_spatial), false);
    for t in 0..n_temporal {
        for s in uniform_row(n_spatial, k, seed::derive(seed, t as u64)) {
            mask[[t, s]] = true;
        }
    }
    Ok(MaskPlan {
        mask,
        rho,
        strategy: MaskStrategy::Random,
    })
}

/// One uniform spatial selection shared by every time index.
pub fn sample_tube_mask(n_temporal: usize, n_spatial: usize, rho: f64, seed: u64) -> Result<MaskPlan> {
    let k = masked_per_row(rho, n_spatial)?;
    let mut mask = Array2::from_elem((n_temporal, n_spatial), false);
    for s in uniform_row(n_spatial, k, seed) {
        mask.column_mut(s).fill(true);
    }
    Ok(MaskPlan {
        mask,
        rho,
        strategy: MaskStrategy::Tube,
    })
}

/// Builds a plan of the requested strategy. `mass` is only read for
/// [`MaskStrategy::Gaze`].
pub fn plan_for(
    strategy: MaskStrategy,
    mass: &TokenGazeMass,
    rho: f64,
    tau: f64,
    seed: u64,
) -> Result<MaskPlan> {
    let (n_temporal, n_spatial) = mass.d.dim();
    match strategy {
        MaskStrategy::Gaze => sample_gaze_mask(&masking_distribution(mass, tau)?, rho, seed),
        MaskStrategy::Random => sample_random_mask(n_temporal, n_spatial, rho, seed),
        MaskStrategy::Tube => sample_tube_mask(n_temporal, n_spatial, rho, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TokenGeometry;
    use ndarray::array;
    use proptest::prelude::*;

    fn mass(d: Array2<f64>) -> TokenGazeMass {
        TokenGazeMass {
            d,
            geometry: TokenGeometry::new(1, 1, 1),
        }
    }

    #[test]
    fn constant_mass_gives_uniform_distribution() {
        let dist = masking_distribution(&mass(Array2::from_elem((2, 5), 3.7)), 0.5).unwrap();
        assert!(dist.pi().iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn analytic_softmax_values() {
        let ln2 = 2f64.ln();
        let dist = masking_distribution(&mass(array![[0.0, ln2, 0.0, 0.0]]), 1.0).unwrap();
        let pi = dist.pi();
        for (p, e) in pi.iter().zip([0.2, 0.4, 0.2, 0.2]) {
            assert!((p - e).abs() < 1e-12);
        }

        let dist = masking_distribution(&mass(array![[1.0, 2.0]]), 0.5).unwrap();
        let e2 = 2f64.exp();
        let pi = dist.pi();
        assert!((pi[[0, 0]] - 1.0 / (1.0 + e2)).abs() < 1e-12);
        assert!((pi[[0, 1]] - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((pi[[0, 0]] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn sharp_temperature_stays_finite() {
        let dist = masking_distribution(&mass(array![[0.0, 900.0, 450.0]]), 0.5).unwrap();
        assert!(dist.log_pi.iter().all(|v| v.is_finite()));
        assert!((dist.pi().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_tau_is_rejected() {
        assert!(masking_distribution(&mass(array![[1.0]]), 0.0).is_err());
        assert!(masking_distribution(&mass(array![[1.0]]), -2.0).is_err());
    }

    #[test]
    fn ratio_one_masks_everything() {
        let dist = masking_distribution(&mass(array![[5.0, 0.0, 1.0, 2.0]]), 0.5).unwrap();
        let plan = sample_gaze_mask(&dist, 1.0, 3).unwrap();
        assert!(plan.mask.iter().all(|&m| m));
    }

    #[test]
    fn ratio_hiding_nothing_is_rejected() {
        let dist = MaskDistribution::uniform(1, 4);
        assert!(matches!(sample_gaze_mask(&dist, 0.2, 0), Err(Error::Config(_))));
        assert!(sample_random_mask(1, 4, 0.0, 0).is_err());
        assert!(sample_tube_mask(1, 4, 1.5, 0).is_err());
    }

    #[test]
    fn vit_small_grid_counts() {
        assert_eq!(masked_per_row(0.9, 196).unwrap(), 176);
        let plan = sample_random_mask(5, 196, 0.9, 1).unwrap();
        assert_eq!(plan.masked_counts(), vec![176; 5]);
        assert_eq!(plan.visible_indices().len(), 100);
        let plan = sample_gaze_mask(&MaskDistribution::uniform(5, 196), 0.9, 1).unwrap();
        assert_eq!(plan.masked_counts(), vec![176; 5]);
    }

    #[test]
    fn random_rows_differ_and_tube_rows_repeat() {
        let plan = sample_random_mask(5, 196, 0.9, 17).unwrap();
        for t in 1..5 {
            assert_ne!(plan.mask.row(0), plan.mask.row(t));
        }
        let tube = sample_tube_mask(5, 196, 0.9, 17).unwrap();
        for t in 1..5 {
            assert_eq!(tube.mask.row(0), tube.mask.row(t));
        }
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let dist = masking_distribution(&mass(Array2::from_shape_fn((3, 16), |(t, s)| (t + s) as f64 / 4.0)), 0.5).unwrap();
        assert_eq!(sample_gaze_mask(&dist, 0.75, 8).unwrap(), sample_gaze_mask(&dist, 0.75, 8).unwrap());
        assert_eq!(sample_random_mask(3, 16, 0.75, 8).unwrap(), sample_random_mask(3, 16, 0.75, 8).unwrap());
        assert_eq!(sample_tube_mask(3, 16, 0.75, 8).unwrap(), sample_tube_mask(3, 16, 0.75, 8).unwrap());
        assert_ne!(sample_random_mask(3, 16, 0.75, 8).unwrap(), sample_random_mask(3, 16, 0.75, 9).unwrap());
    }

    #[test]
    fn uniform_gaze_inclusion_is_one_half() {
        let dist = MaskDistribution::uniform(1, 4);
        let mut counts = [0usize; 4];
        for seed in 0..10_000 {
            let plan = sample_gaze_mask(&dist, 0.5, seed).unwrap();
            for s in plan.masked_indices() {
                counts[s] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.5).abs() <= 0.02);
        }
    }

    #[test]
    fn rle_matches_documented_example() {
        let plan = MaskPlan {
            mask: array![[false, false, false, true, true, false]],
            rho: 0.5,
            strategy: MaskStrategy::Random,
        };
        assert_eq!(plan.to_rle(), "maskplan v1 strategy=random rho=0.5 rows=1 cols=6\n3v2m1v\n");
    }

    #[test]
    fn rle_rejects_short_rows() {
        assert!(MaskPlan::from_rle("maskplan v1 strategy=tube rho=0.5 rows=1 cols=4\n2m1v\n").is_err());
        assert!(MaskPlan::from_rle("maskplan v2 strategy=tube rho=0.5 rows=1 cols=4\n2m2v\n").is_err());
    }

    proptest! {
        #[test]
        fn exact_count_for_every_strategy(n_spatial in 1usize..80, n_temporal in 1usize..5, rho in 0.05f64..=1.0, seed in any::<u64>()) {
            let k = (rho * n_spatial as f64 + 1e-9).floor() as usize;
            prop_assume!(k >= 1);
            let d = Array2::from_shape_fn((n_temporal, n_spatial), |(t, s)| ((t * 31 + s * 7) % 11) as f64);
            for strategy in [MaskStrategy::Gaze, MaskStrategy::Random, MaskStrategy::Tube] {
                let plan = plan_for(strategy, &mass(d.clone()), rho, 0.5, seed).unwrap();
                prop_assert_eq!(plan.masked_counts(), vec![k; n_temporal]);
            }
        }

        #[test]
        fn scaling_mass_and_temperature_together_is_invariant(c in 0.1f64..10.0, tau in 0.1f64..3.0, seed in 0u64..100) {
            let d = Array2::from_shape_fn((2, 9), |(t, s)| ((seed as usize + t * 5 + s * 3) % 13) as f64 * 0.3);
            let a = masking_distribution(&mass(d.clone()), tau).unwrap().pi();
            let b = masking_distribution(&mass(d * c), tau * c).unwrap().pi();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            for row in a.axis_iter(Axis(0)) {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn rle_round_trips(n_temporal in 1usize..6, n_spatial in 1usize..40, seed in any::<u64>()) {
            let plan = sample_random_mask(n_temporal, n_spatial, 1.0, seed).unwrap();
            prop_assert_eq!(MaskPlan::from_rle(&plan.to_rle()).unwrap(), plan);
            if n_spatial >= 2 {
                let plan = sample_random_mask(n_temporal, n_spatial, 0.5, seed).unwrap();
                prop_assert_eq!(MaskPlan::from_rle(&plan.to_rle()).unwrap(), plan);
            }
        }
    }
}
