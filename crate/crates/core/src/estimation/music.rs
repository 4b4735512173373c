//! Spatial MUSIC over a uniform linear array.
//!
//! The pseudospectrum is `P(θ) = 1 / ‖E_nᴴ a(θ)‖²` with `a` normalized to unit
//! norm. The scan evaluates the noise-subspace energy through the signal
//! subspace (`1 - ‖E_sᴴ a‖²`), which is cheaper when `K ≪ M`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::periodogram::parabolic_offset;
use crate::error::{Error, Result};
use crate::waveform::CsiTensor;

/// 0.01° in radians.
pub const DEFAULT_GRID_STEP: f64 = 0.01 * PI / 180.0;

/// Uniform linear array manifold `a_n(θ) = e^{j2π d n sinθ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformLinearArray {
    pub num_elements: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl UniformLinearArray {
    pub fn half_wavelength(num_elements: usize) -> Self {
        Self {
            num_elements,
            spacing: 0.5,
        }
    }

    pub fn steering(&self, angle: f64) -> DVector<Complex64> {
        let phase = 2.0 * PI * self.spacing * angle.sin();
        DVector::from_fn(self.num_elements, |n, _| {
            Complex64::from_polar(1.0, phase * n as f64)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AoaEstimate {
    /// radians from broadside
    pub angle: f64,
    pub pseudospectrum_peak: f64,
}

/// Eigen-structure of a sample covariance split into signal and noise parts.
#[derive(Clone, Debug)]
pub struct SubspaceModel {
    pub covariance: DMatrix<Complex64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Columns: leading `K` eigenvectors.
    pub signal: DMatrix<Complex64>,
    /// Columns: remaining `M - K` eigenvectors.
    pub noise: DMatrix<Complex64>,
    pub array: UniformLinearArray,
}

impl SubspaceModel {
    /// Build from an `elements × snapshots` matrix.
    pub fn from_snapshots(
        snapshots: &DMatrix<Complex64>,
        num_sources: usize,
        array: UniformLinearArray,
    ) -> Result<Self> {
        let m = snapshots.nrows();
        let s = snapshots.ncols();
        if m != array.num_elements {
            return Err(Error::Precondition(format!(
                "snapshot rows ({m}) do not match array size ({})",
                array.num_elements
            )));
        }
        if num_sources == 0 || num_sources >= m {
            return Err(Error::Precondition(format!(
                "need 1 <= K < num_elements, got K={num_sources}, M={m}"
            )));
        }
        if s < 2 * num_sources {
            return Err(Error::Precondition(format!(
                "need at least 2K = {} snapshots, got {s}",
                2 * num_sources
            )));
        }
        let covariance = snapshots * snapshots.adjoint() / Complex64::new(s as f64, 0.0);
        let eig = covariance.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let largest = eigenvalues[0];
        let kth = eigenvalues[num_sources - 1];
        if !(largest > 0.0) || kth <= 1e-10 * largest {
            return Err(Error::RankDeficient { eigenvalue: kth });
        }
        let pick = |cols: &[usize]| {
            DMatrix::from_fn(m, cols.len(), |r, c| eig.eigenvectors[(r, cols[c])])
        };
        Ok(Self {
            signal: pick(&order[..num_sources]),
            noise: pick(&order[num_sources..]),
            covariance,
            eigenvalues,
            array,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.signal.ncols()
    }

    /// Mean of the noise eigenvalues.
    pub fn noise_floor(&self) -> f64 {
        let tail = &self.eigenvalues[self.num_sources()..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// `‖E_nᴴ a(θ)‖²` for unit-norm `a`, computed from the noise eigenvectors.
    pub fn noise_projection(&self, angle: f64) -> f64 {
        let a = self.array.steering(angle).normalize();
        (self.noise.adjoint() * a).norm_squared()
    }

    /// Same quantity through the signal subspace.
    fn null_spectrum(&self, a: &DVector<Complex64>) -> f64 {
        let inv_norm = 1.0 / a.norm_squared();
        let mut signal_energy = 0.0;
        for k in 0..self.signal.ncols() {
            let col = self.signal.column(k);
            let mut acc = Complex64::new(0.0, 0.0);
            for (e, x) in col.iter().zip(a.iter()) {
                acc += e.conj() * x;
            }
            signal_energy += acc.norm_sqr();
        }
        (1.0 - signal_energy * inv_norm).max(0.0)
    }
}

/// Output of a MUSIC scan.
#[derive(Clone, Debug)]
pub struct MusicResult {
    /// Sorted by ascending angle.
    pub estimates: Vec<AoaEstimate>,
    /// Scanned angles, radians.
    pub grid: Vec<f64>,
    /// Pseudospectrum on `grid`.
    pub spectrum: Vec<f64>,
    pub model: SubspaceModel,
}

impl MusicResult {
    /// Spectrum scaled so its maximum is 1.
    pub fn normalized_spectrum(&self) -> Vec<f64> {
        let max = self.spectrum.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            self.spectrum.iter().map(|p| p / max).collect()
        } else {
            self.spectrum.clone()
        }
    }
}

/// Scan `[-90°, 90°]` in steps of `grid_step` and return the `K` strongest peaks.
pub fn music(
    snapshots: &DMatrix<Complex64>,
    num_sources: usize,
    array: UniformLinearArray,
    grid_step: f64,
) -> Result<MusicResult> {
    if !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(Error::Precondition("grid step must be positive".into()));
    }
    let model = SubspaceModel::from_snapshots(snapshots, num_sources, array)?;
    let count = (PI / grid_step).floor() as usize + 1;
    let grid: Vec<f64> = (0..count).map(|i| -PI / 2.0 + i as f64 * grid_step).collect();
    let null: Vec<f64> = grid
        .iter()
        .map(|&th| model.null_spectrum(&array.steering(th)))
        .collect();
    let floor = f64::MIN_POSITIVE;
    let spectrum: Vec<f64> = null.iter().map(|d| 1.0 / d.max(floor)).collect();

    // Local minima of the null spectrum, endpoints included.
    let n = null.len();
    let mut minima: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = if i == 0 { f64::INFINITY } else { null[i - 1] };
            let right = if i + 1 == n { f64::INFINITY } else { null[i + 1] };
            null[i] < left && null[i] <= right
        })
        .collect();
    minima.sort_by(|&a, &b| null[a].total_cmp(&null[b]).then(a.cmp(&b)));
    minima.truncate(num_sources);

    let mut estimates: Vec<AoaEstimate> = minima
        .into_iter()
        .map(|i| {
            let offset = if i > 0 && i + 1 < n {
                parabolic_offset(null[i - 1], null[i], null[i + 1])
            } else {
                0.0
            };
            AoaEstimate {
                angle: (grid[i] + offset * grid_step).clamp(-PI / 2.0, PI / 2.0),
                pseudospectrum_peak: spectrum[i],
            }
        })
        .collect();
    estimates.sort_by(|a, b| a.angle.total_cmp(&b.angle));
    Ok(MusicResult {
        estimates,
        grid,
        spectrum,
        model,
    })
}

/// Least-squares source powers at the given angles, noise floor removed.
pub fn estimate_source_powers(model: &SubspaceModel, angles: &[f64]) -> Vec<f64> {
    let m = model.array.num_elements;
    let a = DMatrix::from_fn(m, angles.len(), |r, c| model.array.steering(angles[c])[r]);
    let Some(pinv) = a.clone().pseudo_inverse(1e-12).ok() else {
        return vec![0.0; angles.len()];
    };
    let centered =
        &model.covariance - DMatrix::<Complex64>::identity(m, m) * Complex64::new(model.noise_floor(), 0.0);
    let p = &pinv * centered * pinv.adjoint();
    (0..angles.len()).map(|k| p[(k, k)].re.max(0.0)).collect()
}

/// Spatial MUSIC on CSI: every `(subcarrier, symbol)` slice is one snapshot
/// of the half-wavelength receive array.
pub fn estimate_aoas(
    csi: &CsiTensor,
    num_sources: usize,
    grid_step: f64,
) -> Result<Vec<AoaEstimate>> {
    let (nm, nn, nl) = csi.dims();
    let snapshots = DMatrix::from_fn(nm, nn * nl, |m, c| csi.get(m, c / nl, c % nl));
    Ok(music(
        &snapshots,
        num_sources,
        UniformLinearArray::half_wavelength(nm),
        grid_step,
    )?
    .estimates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::scene::RadioConfig;
    use crate::waveform::{synthesize_paths, PathParams};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn snapshots(
        array: UniformLinearArray,
        angles: &[f64],
        count: usize,
        snr_db: f64,
        seed: u64,
    ) -> DMatrix<Complex64> {
        let mut rng = rng_from(seed);
        let sigma = (10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
        let mut x = DMatrix::zeros(array.num_elements, count);
        for b in 0..count {
            for &th in angles {
                let s = Complex64::from_polar(1.0, rng.random_range(-PI..PI));
                let a = array.steering(th);
                for m in 0..array.num_elements {
                    x[(m, b)] += a[m] * s;
                }
            }
            for m in 0..array.num_elements {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                x[(m, b)] += Complex64::new(re * sigma, im * sigma);
            }
        }
        x
    }

    fn radio() -> RadioConfig {
        RadioConfig {
            carrier_frequency: 3e9,
            bandwidth: 1e8,
            num_subcarriers: 32,
            num_symbols: 4,
            symbol_duration: 1e-5,
            noise_power: 0.0,
        }
    }

    #[test]
    fn broadside_source_from_csi() {
        let p = PathParams {
            delay: 2e-7,
            aoa: 0.0,
            doppler: 0.0,
            complex_gain: Complex64::new(0.3, -0.2),
        };
        let csi = synthesize_paths(&[p], 8, &radio(), 0.0, 0);
        let step = 0.1f64.to_radians();
        let est = estimate_aoas(&csi, 1, step).unwrap();
        assert!(est[0].angle.abs() <= step);
    }

    #[test]
    fn noise_subspace_orthogonal_to_true_steering() {
        let array = UniformLinearArray::half_wavelength(8);
        let th = 0.37;
        let x = snapshots(array, &[th], 50, 300.0, 1);
        let model = SubspaceModel::from_snapshots(&x, 1, array).unwrap();
        assert!(model.noise_projection(th).sqrt() <= 1e-6);
    }

    /// Independent route: full noise-subspace projection on a 0.001° grid.
    fn exhaustive_peaks(model: &SubspaceModel, lo: f64, hi: f64) -> f64 {
        let step = 0.001f64.to_radians();
        let mut best = (f64::INFINITY, lo);
        let mut th = lo;
        while th <= hi {
            let d = model.noise_projection(th);
            if d < best.0 {
                best = (d, th);
            }
            th += step;
        }
        best.1
    }

    #[test]
    fn two_sources_16_antennas() {
        let array = UniformLinearArray::half_wavelength(16);
        let truth = [(-30f64).to_radians(), 30f64.to_radians()];
        let x = snapshots(array, &truth, 200, 20.0, 7);
        let res = music(&x, 2, array, DEFAULT_GRID_STEP).unwrap();
        let oracle = [
            exhaustive_peaks(&res.model, (-35f64).to_radians(), (-25f64).to_radians()),
            exhaustive_peaks(&res.model, 25f64.to_radians(), 35f64.to_radians()),
        ];
        for ((e, o), t) in res.estimates.iter().zip(oracle).zip(truth) {
            assert!((e.angle - t).abs() < 0.5f64.to_radians());
            assert!((e.angle - o).abs() < 0.01f64.to_radians(), "scan disagrees with oracle");
        }
    }

    #[test]
    fn subspace_dimension_precondition() {
        let array = UniformLinearArray::half_wavelength(4);
        let x = snapshots(array, &[0.1], 20, 20.0, 0);
        assert!(matches!(music(&x, 4, array, 0.01), Err(Error::Precondition(_))));
        assert!(matches!(music(&x.columns(0, 3).into_owned(), 2, array, 0.01), Err(Error::Precondition(_))));
    }

    #[test]
    fn rank_deficiency_detected() {
        let array = UniformLinearArray::half_wavelength(6);
        let x = snapshots(array, &[0.2], 30, 400.0, 3);
        assert!(matches!(
            SubspaceModel::from_snapshots(&x, 2, array),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn aoa_scale_invariant() {
        let array = UniformLinearArray::half_wavelength(10);
        let truth = [-0.4, 0.5];
        let x = snapshots(array, &truth, 100, 15.0, 5);
        let a = music(&x, 2, array, 0.001).unwrap();
        let b = music(&(x * Complex64::new(2.0, -7.0)), 2, array, 0.001).unwrap();
        for (p, q) in a.estimates.iter().zip(&b.estimates) {
            assert!((p.angle - q.angle).abs() < 1e-9);
        }
    }

    #[test]
    fn source_powers_ordering() {
        let array = UniformLinearArray::half_wavelength(16);
        let mut x = snapshots(array, &[0.3], 400, 30.0, 2);
        let y = snapshots(array, &[-0.6], 400, 30.0, 3) * Complex64::new(2.0, 0.0);
        x += y;
        let model = SubspaceModel::from_snapshots(&x, 2, array).unwrap();
        let p = estimate_source_powers(&model, &[0.3, -0.6]);
        assert!((p[0] - 1.0).abs() < 0.2, "{p:?}");
        assert!((p[1] - 4.0).abs() < 0.6, "{p:?}");
    }
}
