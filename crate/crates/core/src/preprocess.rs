//! Spectral preprocessing: Savitzky-Golay smoothing/differentiation and
//! max-normalization.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;

/// Savitzky-Golay parameters. The window must be odd so the stencil is
/// centered; derivatives up to the polynomial order are available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SGParams {
    pub window: usize,
    pub polyorder: usize,
    pub deriv: usize,
}

impl SGParams {
    pub fn new(window: usize, polyorder: usize, deriv: usize) -> Result<Self> {
        if window % 2 == 0 {
            return Err(Error::Parameter(format!(
                "SG window must be odd, got {window}"
            )));
        }
        if window < polyorder + 1 {
            return Err(Error::Parameter(format!(
                "SG window {window} too small for polynomial order {polyorder}"
            )));
        }
        if deriv > polyorder {
            return Err(Error::Parameter(format!(
                "derivative order {deriv} exceeds polynomial order {polyorder}"
            )));
        }
        Ok(Self { window, polyorder, deriv })
    }

    fn half(&self) -> usize {
        self.window / 2
    }
}

/// Convolution weights for the centered local polynomial fit: fitting a
/// degree-`polyorder` polynomial over offsets -h..h and taking the deriv-th
/// derivative at the center is linear in the window values.
fn sg_weights(params: &SGParams) -> Vec<f64> {
    let w = params.window;
    let m = params.polyorder;
    let h = params.half() as isize;

    // Normal matrix G[j][k] = sum_t t^(j+k) over the window offsets.
    let mut g = DMatrix::<f64>::zeros(m + 1, m + 1);
    for j in 0..=m {
        for k in 0..=m {
            let mut s = 0.0;
            for t in -h..=h {
                s += (t as f64).powi((j + k) as i32);
            }
            g[(j, k)] = s;
        }
    }
    let mut e = nalgebra::DVector::<f64>::zeros(m + 1);
    e[params.deriv] = 1.0;
    let z = g
        .cholesky()
        .expect("SG normal matrix is positive definite for window >= polyorder+1")
        .solve(&e);

    let d_factorial: f64 = (1..=params.deriv).map(|k| k as f64).product();
    (0..w)
        .map(|i| {
            let t = i as isize - h;
            let mut poly = 0.0;
            for (j, &zj) in z.iter().enumerate() {
                poly += zj * (t as f64).powi(j as i32);
            }
            d_factorial * poly
        })
        .collect()
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn apply_weights(spectrum: &[f64], weights: &[f64], half: usize, scale: f64, out: &mut [f64]) {
    let n = spectrum.len();
    for (c, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &wi) in weights.iter().enumerate() {
            let idx = mirror(c as isize + i as isize - half as isize, n);
            acc += wi * spectrum[idx];
        }
        *slot = acc * scale;
    }
}

/// Savitzky-Golay filter of one spectrum. The output is the deriv-th
/// derivative of the local least-squares polynomial at each point, scaled by
/// `step^-deriv` so derivatives are per physical axis unit. Edges use
/// mirror padding (`s[-i] = s[i]`), which keeps the output length equal to
/// the input length.
pub fn savitzky_golay(spectrum: &[f64], params: &SGParams, step: f64) -> Result<Vec<f64>> {
    if spectrum.len() < params.window {
        return Err(Error::Parameter(format!(
            "spectrum of {} points shorter than SG window {}",
            spectrum.len(),
            params.window
        )));
    }
    if step == 0.0 || !step.is_finite() {
        return Err(Error::Parameter(format!("invalid axis step {step}")));
    }
    let weights = sg_weights(params);
    let scale = step.powi(-(params.deriv as i32));
    let mut out = vec![0.0; spectrum.len()];
    apply_weights(spectrum, &weights, params.half(), scale, &mut out);
    Ok(out)
}

/// Second-derivative cube: applies the SG filter with `deriv = 2` (window
/// and polynomial order from `params`) to every pixel spectrum.
pub fn second_derivative_cube(cube: &HyperCube, params: &SGParams) -> Result<HyperCube> {
    let params = SGParams::new(params.window, params.polyorder, 2)?;
    if cube.nbands() < params.window {
        return Err(Error::Parameter(format!(
            "cube has {} bands, SG window is {}",
            cube.nbands(),
            params.window
        )));
    }
    let nb = cube.nbands();
    let weights = sg_weights(&params);
    let scale = cube.axis().step.powi(-2);
    let half = params.half();

    let mut values = vec![0.0; cube.n_voxels()];
    values
        .par_chunks_mut(nb)
        .enumerate()
        .for_each(|(p, out)| {
            apply_weights(cube.pixel_spectrum(p), &weights, half, scale, out);
        });
    HyperCube::new(cube.nx(), cube.ny(), *cube.axis(), values)
}

/// Scales a spectrum so its maximum is exactly 1.
pub fn normalize_max(spectrum: &[f64]) -> Result<Vec<f64>> {
    let max = spectrum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Degenerate(format!(
            "spectrum maximum {max} is not positive, cannot max-normalize"
        )));
    }
    Ok(spectrum.iter().map(|&v| v / max).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::WavenumberAxis;
    use crate::sampling::SplitMix64;

    /// Brute-force oracle: fit the window polynomial explicitly for every
    /// output point and differentiate it at the center.
    fn sg_oracle(spectrum: &[f64], params: &SGParams, step: f64) -> Vec<f64> {
        let n = spectrum.len();
        let h = params.half() as isize;
        let m = params.polyorder;
        (0..n)
            .map(|c| {
                let rows = params.window;
                let mut a = DMatrix::<f64>::zeros(rows, m + 1);
                let mut y = nalgebra::DVector::<f64>::zeros(rows);
                for (r, t) in (-h..=h).enumerate() {
                    for j in 0..=m {
                        a[(r, j)] = (t as f64).powi(j as i32);
                    }
                    y[r] = spectrum[mirror(c as isize + t, n)];
                }
                let coeffs = (a.transpose() * &a)
                    .lu()
                    .solve(&(a.transpose() * y))
                    .unwrap();
                let d_fact: f64 = (1..=params.deriv).map(|k| k as f64).product();
                d_fact * coeffs[params.deriv] * step.powi(-(params.deriv as i32))
            })
            .collect()
    }

    #[test]
    fn quadratic_second_derivative_is_two() {
        let params = SGParams::new(5, 2, 2).unwrap();
        let s: Vec<f64> = (0..20).map(|i| (i as f64).powi(2)).collect();
        let d = savitzky_golay(&s, &params, 1.0).unwrap();
        // Exact away from the trailing edge; mirror padding reflects i^2
        // exactly at the leading edge (the vertex sits on sample 0) but not
        // at the trailing one.
        for (i, &v) in d.iter().take(d.len() - 2).enumerate() {
            assert!((v - 2.0).abs() < 1e-10, "point {i}: {v}");
        }
        // Trailing-edge values still match the declared mirror-padded fit.
        let oracle = sg_oracle(&s, &params, 1.0);
        for (a, b) in d.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn step_scaling_gives_physical_units() {
        // s(nu) = nu^2 sampled on a descending axis: d2s/dnu2 = 2 everywhere
        // the stencil is interior.
        let axis = WavenumberAxis::new(1894.0, -4.0, 30).unwrap();
        let s: Vec<f64> = (0..30).map(|i| axis.value(i).powi(2)).collect();
        let params = SGParams::new(7, 2, 2).unwrap();
        let d = savitzky_golay(&s, &params, axis.step).unwrap();
        for &v in &d[3..27] {
            assert!((v - 2.0).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let params = SGParams::new(7, 2, 0).unwrap();
        let s = vec![3.25; 15];
        let d = savitzky_golay(&s, &params, -4.0).unwrap();
        for &v in &d {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = SplitMix64::new(5);
        let s: Vec<f64> = (0..20).map(|_| rng.unit_f64() * 10.0 - 5.0).collect();
        let params = SGParams::new(7, 2, 1).unwrap();
        let got = savitzky_golay(&s, &params, 1.0).unwrap();
        let want = sg_oracle(&s, &params, 1.0);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn reproduces_polynomials_on_interior() {
        // deriv=0 on a cubic with a cubic-capable window: interior points are
        // reproduced to machine precision.
        let params = SGParams::new(9, 3, 0).unwrap();
        let s: Vec<f64> = (0..25)
            .map(|i| {
                let x = i as f64;
                0.5 * x.powi(3) - 2.0 * x.powi(2) + x - 7.0
            })
            .collect();
        let d = savitzky_golay(&s, &params, 1.0).unwrap();
        let h = params.half();
        for i in h..s.len() - h {
            assert!((d[i] - s[i]).abs() < 1e-9 * s[i].abs().max(1.0), "point {i}");
        }
    }

    #[test]
    fn filter_is_linear() {
        let mut rng = SplitMix64::new(17);
        let s: Vec<f64> = (0..18).map(|_| rng.unit_f64()).collect();
        let t: Vec<f64> = (0..18).map(|_| rng.unit_f64()).collect();
        let (a, b) = (2.5, -1.25);
        let combo: Vec<f64> = s.iter().zip(&t).map(|(x, y)| a * x + b * y).collect();
        let params = SGParams::new(5, 2, 2).unwrap();
        let fs = savitzky_golay(&s, &params, 1.0).unwrap();
        let ft = savitzky_golay(&t, &params, 1.0).unwrap();
        let fc = savitzky_golay(&combo, &params, 1.0).unwrap();
        for i in 0..18 {
            assert!((fc[i] - (a * fs[i] + b * ft[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn short_spectrum_rejected() {
        let params = SGParams::new(7, 2, 2).unwrap();
        assert!(savitzky_golay(&[1.0; 6], &params, 1.0).is_err());
    }

    #[test]
    fn bad_params_rejected() {
        assert!(SGParams::new(10, 2, 2).is_err()); // even window
        assert!(SGParams::new(3, 4, 2).is_err()); // window < order+1
        assert!(SGParams::new(7, 2, 3).is_err()); // deriv > order
    }

    fn cube_from_spectrum(nx: usize, ny: usize, s: &[f64]) -> HyperCube {
        let axis = WavenumberAxis::new(1894.0, -4.0, s.len()).unwrap();
        let mut values = Vec::with_capacity(nx * ny * s.len());
        for _ in 0..nx * ny {
            values.extend_from_slice(s);
        }
        HyperCube::new(nx, ny, axis, values).unwrap()
    }

    #[test]
    fn identical_spectra_give_identical_derivatives() {
        let mut rng = SplitMix64::new(3);
        let s: Vec<f64> = (0..16).map(|_| rng.unit_f64()).collect();
        let cube = cube_from_spectrum(3, 2, &s);
        let params = SGParams::new(5, 2, 2).unwrap();
        let d = second_derivative_cube(&cube, &params).unwrap();
        let first = d.pixel_spectrum(0).to_vec();
        for p in 1..d.n_pixels() {
            assert_eq!(d.pixel_spectrum(p), first.as_slice());
        }
    }

    #[test]
    fn affine_spectrum_has_zero_second_derivative_interior() {
        let axis = WavenumberAxis::new(1894.0, -4.0, 20).unwrap();
        let s: Vec<f64> = (0..20).map(|i| 3.0 + 0.125 * axis.value(i)).collect();
        let cube = cube_from_spectrum(2, 2, &s);
        let params = SGParams::new(5, 2, 2).unwrap();
        let d = second_derivative_cube(&cube, &params).unwrap();
        let h = 2;
        for p in 0..d.n_pixels() {
            let spec = d.pixel_spectrum(p);
            for &v in &spec[h..20 - h] {
                assert!(v.abs() < 1e-10, "{v}");
            }
        }
    }

    #[test]
    fn cube_derivative_matches_single_spectrum_calls() {
        let mut rng = SplitMix64::new(9);
        let axis = WavenumberAxis::new(1894.0, -4.0, 16).unwrap();
        let values: Vec<f64> = (0..3 * 2 * 16).map(|_| rng.unit_f64()).collect();
        let cube = HyperCube::new(3, 2, axis, values).unwrap();
        let params = SGParams::new(5, 2, 2).unwrap();
        let d = second_derivative_cube(&cube, &params).unwrap();
        for p in 0..cube.n_pixels() {
            let single = savitzky_golay(cube.pixel_spectrum(p), &params, axis.step).unwrap();
            assert_eq!(d.pixel_spectrum(p), single.as_slice());
        }
    }

    #[test]
    fn normalize_max_examples() {
        assert_eq!(normalize_max(&[2.0, 4.0, 8.0]).unwrap(), vec![0.25, 0.5, 1.0]);
        let already = vec![0.25, 0.5, 1.0];
        assert_eq!(normalize_max(&already).unwrap(), already);
        assert!(matches!(normalize_max(&[0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_max_preserves_ratios() {
        let s = vec![0.2, 1.4, 0.9, 3.1];
        let n = normalize_max(&s).unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                assert!((n[i] / n[j] - s[i] / s[j]).abs() < 1e-12);
            }
        }
    }
}
