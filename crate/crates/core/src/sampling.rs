//! Seeded random voxel selection and the acquisition-time model of a
//! compressed measurement.
//!
//! All randomness flows through SplitMix64 so that identical seeds give
//! identical masks on every platform and in every language that follows the
//! same recurrence.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::hypercube::{flatten, HyperCube, WavenumberAxis};

/// One SplitMix64 step: advances the state by the golden-gamma increment and
/// finalizes with two xorshift-multiply rounds.
pub fn splitmix64_next(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (state, z ^ (z >> 31))
}

/// SplitMix64 generator. Not cryptographic; it is fully specified by its
/// constants, which is what reproducible sampling needs.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (state, out) = splitmix64_next(self.state);
        self.state = state;
        out
    }

    /// Uniform integer in `[0, n)` by Lemire's multiply-shift reduction:
    /// `(x * n) >> 64` on the full 64-bit output. Rejection-free, so the
    /// residual bias is at most `n / 2^64` — negligible for mask drawing.
    pub fn bounded(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let x = self.next_u64();
        ((x as u128 * n as u128) >> 64) as u64
    }

    /// Uniform f64 in (0, 1], from the top 53 bits.
    pub fn unit_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal deviate via Box–Muller.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.unit_f64();
        let u2 = self.unit_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Observation set Ω: the flat voxel indices `v = p*nbands + j` that were
/// measured, sorted ascending and distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub nx: usize,
    pub ny: usize,
    pub nbands: usize,
    indices: Vec<usize>,
}

impl SamplingMask {
    pub fn new(nx: usize, ny: usize, nbands: usize, indices: Vec<usize>) -> Result<Self> {
        let n = nx * ny * nbands;
        if indices.is_empty() {
            return Err(Error::Parameter("sampling mask must not be empty".into()));
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Parameter(
                    "mask indices must be strictly increasing".into(),
                ));
            }
        }
        if *indices.last().unwrap() >= n {
            return Err(Error::Index(format!(
                "mask index {} outside 0..{n}",
                indices.last().unwrap()
            )));
        }
        Ok(Self { nx, ny, nbands, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nbands
    }
}

/// Measured voxel values aligned with a mask, plus the spectral axis of the
/// parent cube.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledData {
    pub mask: SamplingMask,
    pub values: Vec<f64>,
    pub axis: WavenumberAxis,
}

impl SampledData {
    pub fn new(mask: SamplingMask, values: Vec<f64>, axis: WavenumberAxis) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} values for {} mask indices",
                values.len(),
                mask.len()
            )));
        }
        if axis.count != mask.nbands {
            return Err(Error::Shape(format!(
                "axis has {} bands, mask declares {}",
                axis.count, mask.nbands
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "sampled value {i} is not finite"
            )));
        }
        Ok(Self { mask, values, axis })
    }

    pub fn n_pixels(&self) -> usize {
        self.mask.nx * self.mask.ny
    }

    pub fn n_bands(&self) -> usize {
        self.mask.nbands
    }
}

/// Draws `round(fraction * N)` distinct voxels uniformly without replacement
/// via a partial Fisher–Yates shuffle over `[0, N)`. Rounding is half-up,
/// so the count is identical on every platform.
pub fn draw_mask(
    nx: usize,
    ny: usize,
    nbands: usize,
    fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "sampling fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nbands))
        .ok_or_else(|| Error::Parameter("cube dimensions overflow".into()))?;
    if n == 0 {
        return Err(Error::Parameter("cube has no voxels".into()));
    }
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Err(Error::Parameter(format!(
            "fraction {fraction} of {n} voxels rounds to zero samples"
        )));
    }

    let mut rng = SplitMix64::new(seed);
    // Sparse Fisher–Yates: only displaced slots are stored, so memory is
    // O(count) rather than O(N).
    let mut displaced: HashMap<u64, u64> = HashMap::new();
    let mut picked = Vec::with_capacity(count);
    let n = n as u64;
    for i in 0..count as u64 {
        let j = i + rng.bounded(n - i);
        let at_j = displaced.get(&j).copied().unwrap_or(j);
        let at_i = displaced.get(&i).copied().unwrap_or(i);
        picked.push(at_j as usize);
        displaced.insert(j, at_i);
    }
    picked.sort_unstable();
    SamplingMask::new(nx, ny, nbands, picked)
}

/// Gathers the cube values at the mask's voxels.
pub fn apply_mask(cube: &HyperCube, mask: &SamplingMask) -> Result<SampledData> {
    if mask.nx != cube.nx() || mask.ny != cube.ny() || mask.nbands != cube.nbands() {
        return Err(Error::Parameter(format!(
            "mask dims {}x{}x{} do not match cube dims {}x{}x{}",
            mask.nx,
            mask.ny,
            mask.nbands,
            cube.nx(),
            cube.ny(),
            cube.nbands()
        )));
    }
    let payload = cube.values();
    let values = mask.indices.iter().map(|&v| payload[v]).collect();
    SampledData::new(mask.clone(), values, *cube.axis())
}

/// Acquisition-time proxy in seconds: each voxel costs an equal share
/// `seconds_per_spectrum / nbands` of the per-spectrum dwell. This is a
/// linear-in-voxels proxy for a continuous-motion scan, not a scan-path
/// model.
pub fn acquisition_time(n_observed_voxels: usize, nbands: usize, seconds_per_spectrum: f64) -> f64 {
    debug_assert!(nbands > 0 && seconds_per_spectrum > 0.0);
    n_observed_voxels as f64 * (seconds_per_spectrum / nbands as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::HyperCube;
    use proptest::prelude::*;

    #[test]
    fn splitmix64_reference_sequence() {
        // Published reference outputs of splitmix64 for seed 0.
        let (s1, o1) = splitmix64_next(0);
        let (s2, o2) = splitmix64_next(s1);
        let (_, o3) = splitmix64_next(s2);
        assert_eq!(o1, 0xE220_A839_7B1D_CDAF);
        assert_eq!(o2, 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(o3, 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn splitmix64_seeds_differ() {
        let (_, a) = splitmix64_next(1);
        let (_, b) = splitmix64_next(2);
        assert_eq!(a, 0x910A_2DEC_8902_5CC1);
        assert_eq!(b, 0x9758_35DE_1C97_56CE);
        assert_ne!(a, b);
    }

    #[test]
    fn splitmix64_is_deterministic() {
        let mut a = SplitMix64::new(99);
        let mut b = SplitMix64::new(99);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn full_fraction_selects_every_voxel() {
        let mask = draw_mask(3, 2, 4, 1.0, 7).unwrap();
        assert_eq!(mask.indices(), (0..24).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn paper_scale_five_percent_count() {
        let mask = draw_mask(134, 50, 148, 0.05, 1).unwrap();
        assert_eq!(mask.len(), 49_580);
    }

    #[test]
    fn same_seed_same_mask() {
        let a = draw_mask(10, 10, 16, 0.2, 123).unwrap();
        let b = draw_mask(10, 10, 16, 0.2, 123).unwrap();
        assert_eq!(a, b);
        let c = draw_mask(10, 10, 16, 0.2, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_fraction_is_rejected() {
        assert!(draw_mask(4, 4, 4, 0.0, 0).is_err());
        assert!(draw_mask(4, 4, 4, 1.5, 0).is_err());
        assert!(draw_mask(4, 4, 4, f64::NAN, 0).is_err());
        // Rounds to zero samples.
        assert!(draw_mask(4, 4, 4, 0.001, 0).is_err());
    }

    fn ramp_cube(nx: usize, ny: usize, nb: usize) -> HyperCube {
        let axis = WavenumberAxis::new(1894.0, -4.0, nb).unwrap();
        let values = (0..nx * ny * nb).map(|i| i as f64).collect();
        HyperCube::new(nx, ny, axis, values).unwrap()
    }

    #[test]
    fn full_mask_recovers_flat_payload() {
        let cube = ramp_cube(3, 2, 5);
        let mask = draw_mask(3, 2, 5, 1.0, 0).unwrap();
        let data = apply_mask(&cube, &mask).unwrap();
        assert_eq!(data.values, cube.values());
        // Same content as the flattened matrix, row by row.
        let m = flatten(&cube);
        let flat: Vec<f64> = m.iter().copied().collect();
        assert_eq!(data.values, flat);
    }

    #[test]
    fn single_voxel_mask() {
        let cube = ramp_cube(3, 2, 5);
        let mask = SamplingMask::new(3, 2, 5, vec![17]).unwrap();
        let data = apply_mask(&cube, &mask).unwrap();
        assert_eq!(data.values, vec![17.0]);
    }

    #[test]
    fn five_percent_mask_value_count() {
        let cube = ramp_cube(20, 10, 25);
        let mask = draw_mask(20, 10, 25, 0.05, 3).unwrap();
        let data = apply_mask(&cube, &mask).unwrap();
        assert_eq!(data.values.len(), 250);
        for (t, &v) in mask.indices().iter().enumerate() {
            assert_eq!(data.values[t], v as f64);
        }
    }

    #[test]
    fn mask_dims_must_match_cube() {
        let cube = ramp_cube(3, 2, 5);
        let mask = draw_mask(3, 2, 4, 1.0, 0).unwrap();
        assert!(apply_mask(&cube, &mask).is_err());
    }

    #[test]
    fn acquisition_time_examples() {
        // Full cube: 6700 spectra of 148 bands at 8 s per spectrum.
        assert_eq!(acquisition_time(6700 * 148, 148, 8.0), 53_600.0);
        // 5% of the voxels comes in under one hour.
        assert_eq!(acquisition_time(49_580, 148, 8.0), 2_680.0);
        assert!(acquisition_time(49_580, 148, 8.0) < 3600.0);
        assert_eq!(acquisition_time(0, 148, 8.0), 0.0);
    }

    #[test]
    fn acquisition_time_is_linear() {
        let t = |n| acquisition_time(n, 148, 8.0);
        for (a, b) in [(100, 250), (1, 999), (40_000, 9_580)] {
            let lhs = t(a + b);
            let rhs = t(a) + t(b);
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn mask_histogram_is_uniform() {
        // 2000 draws of 20-of-100; every voxel's hit count must stay within
        // 5 sigma of the binomial expectation.
        let (nx, ny, nb) = (10, 5, 2);
        let n = nx * ny * nb;
        let draws = 2000usize;
        let fraction = 0.2;
        let mut counts = vec![0usize; n];
        for seed in 0..draws as u64 {
            let mask = draw_mask(nx, ny, nb, fraction, seed).unwrap();
            assert_eq!(mask.len(), 20);
            for &v in mask.indices() {
                counts[v] += 1;
            }
        }
        let mean = draws as f64 * fraction;
        let sigma = (draws as f64 * fraction * (1.0 - fraction)).sqrt();
        for (v, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - mean).abs();
            assert!(
                dev <= 5.0 * sigma,
                "voxel {v} hit {c} times, expected {mean:.1} ± {:.1}",
                5.0 * sigma
            );
        }
    }

    proptest! {
        #[test]
        fn mask_indices_sorted_distinct_in_range(
            nx in 1usize..8, ny in 1usize..8, nb in 1usize..8,
            fraction in 0.05f64..1.0, seed in any::<u64>()
        ) {
            let n = nx * ny * nb;
            prop_assume!((fraction * n as f64).round() >= 1.0);
            let mask = draw_mask(nx, ny, nb, fraction, seed).unwrap();
            prop_assert_eq!(mask.len(), (fraction * n as f64).round() as usize);
            for w in mask.indices().windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            prop_assert!(*mask.indices().last().unwrap() < n);
        }
    }
}
