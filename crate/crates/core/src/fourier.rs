//! Fourier amplitude mixing.
//!
//! Images are decomposed into per-channel amplitude and phase spectra with an
//! unshifted 2-D FFT (DC component at index `[0, 0]`). Amplitudes of a source
//! and a counterpart image are blended pixel-wise under a significance mask,
//! the source phase is kept, and the inverse transform reconstructs the
//! augmented image. Keeping the phase preserves object structure while the
//! amplitude blend shifts low-level appearance statistics toward the
//! counterpart's domain.
//!
//! Two mask flavors exist: the Gaussian mask (`ag`) whose per-pixel weight is
//! a bivariate Gaussian over the spectrum grid scaled to `[-t, t]`, and the
//! constant-λ mask (`am`) that reproduces plain linear amplitude
//! interpolation as an ablation arm.

use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::Rng;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

/// Paired amplitude/phase spectra of one channel stack.
///
/// `amplitude` is nonnegative everywhere; `phase` lies in `(-π, π]`.
#[derive(Debug, Clone)]
pub struct Spectrum<T: Scalar> {
    pub amplitude: Array3<T>,
    pub phase: Array3<T>,
}

/// Parameters a mask was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskParams<T: Scalar> {
    Gaussian { sigma: T, mu1: T, mu2: T, t: T, eta: T },
    Constant { lambda: T },
}

/// Per-pixel significance mask controlling amplitude mixing magnitude.
#[derive(Debug, Clone)]
pub struct SigMask<T: Scalar> {
    pub values: Array2<T>,
    pub params: MaskParams<T>,
}

impl<T: Scalar> SigMask<T> {
    /// Largest mask value.
    pub fn peak(&self) -> T {
        self.values.iter().cloned().fold(T::zero(), T::max)
    }

    /// Constant mask of the given value (λ for the `am` arm, or 0/1 probes).
    pub fn constant(h: usize, w: usize, lambda: T) -> Self {
        Self {
            values: Array2::from_elem((h, w), lambda),
            params: MaskParams::Constant { lambda },
        }
    }
}

/// Which mixing mask the strong augmentation draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Gaussian significance mask.
    Ag,
    /// Constant λ drawn uniformly (linear amplitude interpolation).
    Am,
}

/// Configuration of the strong augmentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Upper bound of σ (lower bound is fixed at 1/√(2π) so mask values stay
    /// in `[0, 1]`).
    pub eta: f64,
    /// Scaled half-extent of the grid coordinates.
    pub t: f64,
    /// Draw μ₁, μ₂ ~ U(-t/2, t/2) instead of pinning the peak to the center.
    pub adaptive_mu: bool,
    /// Draw t ~ U(0.2, 0.8) per mask instead of using the fixed `t`.
    pub sample_t: bool,
    /// Read `eta` as a bound on σ² instead of σ (both readings coincide at
    /// eta = 1).
    pub eta_bounds_variance: bool,
    pub mask_mode: MaskMode,
    /// λ ~ U(0, am_lambda_max) for the `am` arm.
    pub am_lambda_max: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            t: 0.5,
            adaptive_mu: true,
            sample_t: false,
            eta_bounds_variance: false,
            mask_mode: MaskMode::Ag,
            am_lambda_max: 1.0,
        }
    }
}

/// Lower bound of σ; the Gaussian peak 1/(2πσ²) reaches exactly 1 here.
pub fn sigma_lower_bound() -> f64 {
    1.0 / (2.0 * std::f64::consts::PI).sqrt()
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let sigma_max = if self.eta_bounds_variance { self.eta.sqrt() } else { self.eta };
        if !(sigma_max >= sigma_lower_bound()) {
            return Err(Error::config(format!(
                "eta {} puts the sigma upper bound below the lower bound {:.6}",
                self.eta,
                sigma_lower_bound()
            )));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::config(format!("t must lie in (0, 1], got {}", self.t)));
        }
        if !(0.0..=1.0).contains(&self.am_lambda_max) {
            return Err(Error::config(format!(
                "am_lambda_max must lie in [0, 1], got {}",
                self.am_lambda_max
            )));
        }
        Ok(())
    }
}

fn fft2<T: Scalar>(data: &mut Array2<Complex<T>>, direction: FftDirection) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(w, direction);
    row_fft.process(data.as_slice_mut().expect("standard layout"));
    let mut cols = data.t().as_standard_layout().into_owned();
    let col_fft = planner.plan_fft(h, direction);
    col_fft.process(cols.as_slice_mut().expect("standard layout"));
    data.assign(&cols.t());
}

/// Split an image into amplitude and phase spectra, channel by channel.
///
/// The transform is unnormalized and unshifted: a constant image `c` on an
/// `H×W` grid puts `c·H·W` at `[0, 0]` and zero elsewhere.
pub fn decompose<T: Scalar>(image: &ImageTensor<T>) -> Result<Spectrum<T>> {
    decompose_array(image.data())
}

/// [`decompose`] on a bare array; accepts values outside `[0, 1]` so
/// pre-clamp signals can be inspected.
pub fn decompose_array<T: Scalar>(data: &Array3<T>) -> Result<Spectrum<T>> {
    let (h, w, c) = data.dim();
    if h < 2 || w < 2 {
        return Err(Error::invalid_input(format!(
            "spectral decomposition needs H, W >= 2, got {h}x{w}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("non-finite image value"));
    }
    let mut amplitude = Array3::zeros((h, w, c));
    let mut phase = Array3::zeros((h, w, c));
    let pi = T::PI();
    for ch in 0..c {
        let mut buf =
            Array2::from_shape_fn((h, w), |(i, j)| Complex::new(data[[i, j, ch]], T::zero()));
        fft2(&mut buf, FftDirection::Forward);
        for i in 0..h {
            for j in 0..w {
                let z = buf[[i, j]];
                amplitude[[i, j, ch]] = z.norm();
                let mut p = z.arg();
                if p == -pi {
                    p = pi;
                }
                phase[[i, j, ch]] = p;
            }
        }
    }
    Ok(Spectrum { amplitude, phase })
}

/// Inverse transform of `amplitude·e^{i·phase}` without the final clamp.
///
/// The imaginary residue of the inverse transform is discarded; for spectra
/// of real images it is at rounding level, for mixed spectra it is the
/// antisymmetric part of the blend, which the real projection folds back into
/// a symmetrized amplitude with the phase untouched.
pub fn reconstruct_unclamped<T: Scalar>(spectrum: &Spectrum<T>) -> Result<Array3<T>> {
    let (h, w, c) = spectrum.amplitude.dim();
    if spectrum.phase.dim() != (h, w, c) {
        return Err(Error::shape(format!(
            "amplitude {:?} vs phase {:?}",
            spectrum.amplitude.dim(),
            spectrum.phase.dim()
        )));
    }
    if spectrum.amplitude.iter().any(|&a| a < T::zero()) {
        return Err(Error::invalid_input("negative amplitude"));
    }
    let norm = T::cast(h as f64 * w as f64);
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        let mut buf = Array2::from_shape_fn((h, w), |(i, j)| {
            Complex::from_polar(spectrum.amplitude[[i, j, ch]], spectrum.phase[[i, j, ch]])
        });
        fft2(&mut buf, FftDirection::Inverse);
        for i in 0..h {
            for j in 0..w {
                out[[i, j, ch]] = buf[[i, j]].re / norm;
            }
        }
    }
    Ok(out)
}

/// Inverse transform clamped into `[0, 1]`.
pub fn reconstruct<T: Scalar>(spectrum: &Spectrum<T>) -> Result<ImageTensor<T>> {
    ImageTensor::from_unclamped(reconstruct_unclamped(spectrum)?)
}

/// Draw a significance mask for an `h×w` spectrum.
///
/// Draw order is fixed: `t` (when sampled), then σ, then μ₁, μ₂ (when
/// adaptive), all from the stream in f64 before casting, so masks are
/// bit-reproducible per seed. Row and column indices are mapped affinely onto
/// `[-t, t]` independently of aspect ratio, and the Gaussian
/// `M(a,b) = 1/(2πσ²)·exp(-((a-μ₁)² + (b-μ₂)²)/(2σ²))` is evaluated at every
/// grid point. In `am` mode the mask is a constant λ ~ U(0, am_lambda_max).
pub fn sample_sigmask<T: Scalar>(
    h: usize,
    w: usize,
    cfg: &AugConfig,
    rng: &mut impl Rng,
) -> Result<SigMask<T>> {
    cfg.validate()?;
    if h < 2 || w < 2 {
        return Err(Error::invalid_input(format!(
            "mask needs H, W >= 2, got {h}x{w}"
        )));
    }
    match cfg.mask_mode {
        MaskMode::Am => {
            let lambda = if cfg.am_lambda_max > 0.0 {
                rng.random_range(0.0..cfg.am_lambda_max)
            } else {
                0.0
            };
            Ok(SigMask::constant(h, w, T::cast(lambda)))
        }
        MaskMode::Ag => {
            let t = if cfg.sample_t {
                rng.random_range(0.2..0.8)
            } else {
                cfg.t
            };
            let lo = sigma_lower_bound();
            let hi = if cfg.eta_bounds_variance { cfg.eta.sqrt() } else { cfg.eta };
            let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let (mu1, mu2) = if cfg.adaptive_mu {
                let m1 = rng.random_range(-t / 2.0..t / 2.0);
                let m2 = rng.random_range(-t / 2.0..t / 2.0);
                (m1, m2)
            } else {
                (0.0, 0.0)
            };
            Ok(gaussian_mask(h, w, T::cast(sigma), T::cast(mu1), T::cast(mu2), T::cast(t), T::cast(cfg.eta)))
        }
    }
}

/// Evaluate the Gaussian mask at explicit parameters.
pub fn gaussian_mask<T: Scalar>(h: usize, w: usize, sigma: T, mu1: T, mu2: T, t: T, eta: T) -> SigMask<T> {
    let two = T::two();
    let peak = T::one() / (two * T::PI() * sigma * sigma);
    let denom = two * sigma * sigma;
    let coord = |i: usize, n: usize| -> T {
        // affine map of 0..n-1 onto [-t, t]
        -t + two * t * T::cast(i as f64) / T::cast((n - 1) as f64)
    };
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        let a = coord(i, h) - mu1;
        let b = coord(j, w) - mu2;
        peak * (-(a * a + b * b) / denom).exp()
    });
    SigMask {
        values,
        params: MaskParams::Gaussian { sigma, mu1, mu2, t, eta },
    }
}

/// Blend amplitudes under the mask, keep the source phase.
///
/// `Â = (1-M)⊙A_src + M⊙A_cp`, with the mask broadcast over channels.
pub fn mix_amplitude<T: Scalar>(
    src: &Spectrum<T>,
    counterpart: &Spectrum<T>,
    mask: &SigMask<T>,
) -> Result<Spectrum<T>> {
    let dim = src.amplitude.dim();
    if counterpart.amplitude.dim() != dim {
        return Err(Error::shape(format!(
            "source spectrum {:?} vs counterpart {:?}",
            dim,
            counterpart.amplitude.dim()
        )));
    }
    if mask.values.dim() != (dim.0, dim.1) {
        return Err(Error::shape(format!(
            "spectrum {:?} vs mask {:?}",
            dim,
            mask.values.dim()
        )));
    }
    let one = T::one();
    let mut amplitude = Array3::zeros(dim);
    for ch in 0..dim.2 {
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let m = mask.values[[i, j]];
                amplitude[[i, j, ch]] = (one - m) * src.amplitude[[i, j, ch]]
                    + m * counterpart.amplitude[[i, j, ch]];
            }
        }
    }
    Ok(Spectrum { amplitude, phase: src.phase.clone() })
}

/// Full strong augmentation: decompose both images, draw a mask, mix, rebuild.
pub fn augment_strong<T: Scalar>(
    src: &ImageTensor<T>,
    counterpart: &ImageTensor<T>,
    cfg: &AugConfig,
    rng: &mut impl Rng,
) -> Result<ImageTensor<T>> {
    let (h, w, _) = src.data().dim();
    let mask = sample_sigmask::<T>(h, w, cfg, rng)?;
    augment_with_mask(src, counterpart, &mask)
}

/// Strong augmentation with an explicit mask.
pub fn augment_with_mask<T: Scalar>(
    src: &ImageTensor<T>,
    counterpart: &ImageTensor<T>,
    mask: &SigMask<T>,
) -> Result<ImageTensor<T>> {
    ImageTensor::from_unclamped(augment_with_mask_unclamped(src, counterpart, mask)?)
}

/// Strong augmentation with an explicit mask, before the output clamp.
pub fn augment_with_mask_unclamped<T: Scalar>(
    src: &ImageTensor<T>,
    counterpart: &ImageTensor<T>,
    mask: &SigMask<T>,
) -> Result<Array3<T>> {
    if src.data().dim() != counterpart.data().dim() {
        return Err(Error::shape(format!(
            "source {:?} vs counterpart {:?}",
            src.data().dim(),
            counterpart.data().dim()
        )));
    }
    let src_spec = decompose(src)?;
    let cp_spec = decompose(counterpart)?;
    let mixed = mix_amplitude(&src_spec, &cp_spec, mask)?;
    reconstruct_unclamped(&mixed)
}


#[cfg(test)]
mod timing {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    #[ignore]
    fn profile_augmentation() {
        let mut r = rng::stream(0, "bench");
        let img: Vec<ImageTensor<f32>> = (0..3)
            .map(|_| {
                ImageTensor::new(ndarray::Array3::from_shape_fn((64, 64, 3), |_| {
                    r.random_range(0.0..1.0)
                }))
                .unwrap()
            })
            .collect();
        let cfg = AugConfig::default();
        let reps = 20;

        let t = std::time::Instant::now();
        for _ in 0..reps {
            for im in &img {
                let _ = decompose(im).unwrap();
            }
        }
        println!("decompose 64x64x3: {:.2} ms", t.elapsed().as_secs_f64() / (reps * 3) as f64 * 1000.0);

        let specs: Vec<_> = img.iter().map(|im| decompose(im).unwrap()).collect();
        let t = std::time::Instant::now();
        let mut rr = rng::stream(1, "m");
        for _ in 0..reps {
            for i in 0..3 {
                for j in 0..3 {
                    let mask = sample_sigmask::<f32>(64, 64, &cfg, &mut rr).unwrap();
                    let mixed = mix_amplitude(&specs[i], &specs[j], &mask).unwrap();
                    let _ = reconstruct(&mixed).unwrap();
                }
            }
        }
        println!("mask+mix+reconstruct x9: {:.2} ms/iter", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);

        let mask = crate::sdf::BinaryMask::new(ndarray::Array3::from_shape_fn((64, 64, 2), |(i, j, c)| {
            u8::from((i as i32 - 32).pow(2) + (j as i32 - 32).pow(2) < if c == 0 { 100 } else { 300 })
        })).unwrap();
        let t = std::time::Instant::now();
        for _ in 0..reps {
            for _ in 0..3 {
                let _ = crate::sdf::mask_to_boundary::<f32>(&mask);
            }
        }
        println!("boundary EDT x3: {:.2} ms/iter", t.elapsed().as_secs_f64() / reps as f64 * 1000.0);
    }
}
