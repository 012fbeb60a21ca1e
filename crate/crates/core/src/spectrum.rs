//! Fourier-domain machinery: the 2D DFT, projection of an image onto the set
//! of images sharing the exemplar's Fourier modulus, and the spectrum loss.
//!
//! For an image `Î` and exemplar `I` with transforms `X = F(Î)` and
//! `A = F(I)`, the projection keeps the exemplar modulus and takes its phase
//! from the current iterate:
//!
//! ```text
//! Ĩ = F⁻¹( φ · A ),   φ = X·A* / |X·A*|
//! ```
//!
//! All transforms run in `f64` whatever the network precision.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub type Complex64 = Complex<f64>;

/// Bins whose phase-factor magnitude falls below this fraction of the largest
/// one keep the exemplar phase (`φ = 1`).
const ZERO_BIN_RATIO: f64 = 1e-12;

/// Largest tolerated imaginary residue of an inverse transform, relative to
/// the real part.
const IMAG_RESIDUE: f64 = 1e-6;

/// Planned row and column transforms for one image size.
#[derive(Clone)]
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fft2({}x{})", self.height, self.width)
    }
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn run(&self, buf: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.height, self.width);
        rows.process(buf);
        let mut t = transpose(buf, h, w);
        cols.process(&mut t);
        buf.copy_from_slice(&transpose(&t, w, h));
    }

    /// Unnormalized forward transform of a row-major `height × width` image.
    pub fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.height * self.width);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, &self.row_fwd, &self.col_fwd);
        buf
    }

    /// Inverse transform, normalized by `1 / (height · width)`.
    pub fn inverse(&self, bins: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(bins.len(), self.height * self.width);
        let mut buf = bins.to_vec();
        self.run(&mut buf, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.height * self.width) as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
        buf
    }
}

fn transpose(src: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Unnormalized 2D DFT.
pub fn dft2(x: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    Fft2::new(height, width).forward(x)
}

/// Inverse of [`dft2`].
pub fn idft2(bins: &[Complex64], height: usize, width: usize) -> Vec<Complex64> {
    Fft2::new(height, width).inverse(bins)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Unweighted mean of the three color channels.
pub fn to_gray<T: Real>(img: &Tensor<T>) -> Result<GrayImage> {
    if img.channels() != 3 {
        return Err(Error::config(format!(
            "gray conversion needs 3 channels, got {}",
            img.channels()
        )));
    }
    Ok(channel_mean(img))
}

fn channel_mean<T: Real>(img: &Tensor<T>) -> GrayImage {
    let c = img.channels() as f64;
    let values = (0..img.plane_len())
        .map(|i| (0..img.channels()).map(|ch| img.plane(ch)[i].as_f64()).sum::<f64>() / c)
        .collect();
    GrayImage {
        height: img.height(),
        width: img.width(),
        values,
    }
}

/// How the common phase factor of a color image is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PhaseRule {
    /// `φ = phase(Σ_c X_c·A_c*)`. This is the exact nearest point among
    /// images `F⁻¹(φ·A_c)` with one phase factor shared by all channels, so
    /// `Î − Ĩ` is the exact gradient of `½‖Î − Ĩ‖²`. Coincides with
    /// [`PhaseRule::Gray`] when the exemplar's channels are equal.
    #[default]
    Joint,
    /// `φ = phase(X_gray·A_gray*)`: the phase is computed on gray-level
    /// images and imposed on every channel.
    Gray,
}

impl std::str::FromStr for PhaseRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint" => Ok(PhaseRule::Joint),
            "gray" | "grey" => Ok(PhaseRule::Gray),
            other => Err(Error::config(format!("unknown phase rule `{other}`"))),
        }
    }
}

/// Fourier data of the exemplar.
#[derive(Clone, Debug)]
pub struct SpectrumTarget {
    height: usize,
    width: usize,
    channels: Vec<Vec<Complex64>>,
    gray: Vec<Complex64>,
    rule: PhaseRule,
    fft: Fft2,
}

impl SpectrumTarget {
    /// Transforms of every channel and of the channel mean. One- and
    /// three-channel images are accepted.
    pub fn new<T: Real>(exemplar: &Tensor<T>, rule: PhaseRule) -> Result<Self> {
        let (c, h, w) = exemplar.shape();
        if c != 1 && c != 3 {
            return Err(Error::config(format!(
                "spectrum target needs 1 or 3 channels, got {c}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::config("spectrum target of an empty image"));
        }
        let fft = Fft2::new(h, w);
        let channels: Vec<_> = (0..c)
            .map(|ch| {
                let plane: Vec<f64> = exemplar.plane(ch).iter().map(|v| v.as_f64()).collect();
                fft.forward(&plane)
            })
            .collect();
        let gray = mean_bins(&channels);
        Ok(SpectrumTarget {
            height: h,
            width: w,
            channels,
            gray,
            rule,
            fft,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rule(&self) -> PhaseRule {
        self.rule
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        &self.channels[c]
    }

    pub fn gray(&self) -> &[Complex64] {
        &self.gray
    }

    fn check_dims<T: Real>(&self, img: &Tensor<T>) -> Result<()> {
        if img.height() != self.height || img.width() != self.width {
            return Err(Error::SpectrumSize {
                got_h: img.height(),
                got_w: img.width(),
                want_h: self.height,
                want_w: self.width,
            });
        }
        if img.channels() != self.channels.len() {
            return Err(Error::config(format!(
                "image has {} channels, spectrum target {}",
                img.channels(),
                self.channels.len()
            )));
        }
        Ok(())
    }
}

fn mean_bins(channels: &[Vec<Complex64>]) -> Vec<Complex64> {
    let c = channels.len() as f64;
    (0..channels[0].len())
        .map(|k| channels.iter().map(|ch| ch[k]).sum::<Complex64>() / c)
        .collect()
}

/// Nearest image (under the target's phase rule) whose channels have the
/// exemplar's Fourier modulus.
pub fn project_spectrum<T: Real>(img: &Tensor<T>, target: &SpectrumTarget) -> Result<Tensor<T>> {
    Ok(project_f64(img, target)?.cast())
}

fn project_f64<T: Real>(img: &Tensor<T>, target: &SpectrumTarget) -> Result<Tensor<f64>> {
    target.check_dims(img)?;
    let fft = &target.fft;
    let transforms: Vec<Vec<Complex64>> = (0..img.channels())
        .map(|c| {
            let plane: Vec<f64> = img.plane(c).iter().map(|v| v.as_f64()).collect();
            fft.forward(&plane)
        })
        .collect();

    let n = target.height * target.width;
    let z: Vec<Complex64> = match target.rule {
        PhaseRule::Joint => (0..n)
            .map(|k| {
                transforms
                    .iter()
                    .zip(&target.channels)
                    .map(|(x, a)| x[k] * a[k].conj())
                    .sum()
            })
            .collect(),
        PhaseRule::Gray => {
            let gray = mean_bins(&transforms);
            gray.iter()
                .zip(&target.gray)
                .map(|(x, a)| x * a.conj())
                .collect()
        }
    };
    let max = z.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let eps = ZERO_BIN_RATIO * max;
    let phase: Vec<Complex64> = z
        .iter()
        .map(|&v| {
            let r = v.norm();
            if r > eps && r > 0.0 {
                v / r
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .collect();

    let mut out = Tensor::zeros(img.channels(), target.height, target.width);
    for (c, a) in target.channels.iter().enumerate() {
        let bins: Vec<Complex64> = phase.iter().zip(a).map(|(p, a)| p * a).collect();
        let back = fft.inverse(&bins);
        let re: f64 = back.iter().map(|v| v.re * v.re).sum::<f64>().sqrt();
        let im: f64 = back.iter().map(|v| v.im * v.im).sum::<f64>().sqrt();
        if im > IMAG_RESIDUE * re.max(f64::MIN_POSITIVE) && im > 1e-300 {
            return Err(Error::Numerical(format!(
                "projection of channel {c} left an imaginary residue of {:.3e} (real norm {:.3e})",
                im, re
            )));
        }
        for (o, v) in out.plane_mut(c).iter_mut().zip(&back) {
            *o = v.re;
        }
    }
    Ok(out)
}

/// `L = ½‖Î − Ĩ‖²` and its gradient `Î − Ĩ`.
pub fn spectrum_loss_and_grad<T: Real>(
    img: &Tensor<T>,
    target: &SpectrumTarget,
) -> Result<(f64, Tensor<T>)> {
    let projected = project_f64(img, target)?;
    let mut grad = Tensor::<T>::zeros(img.channels(), img.height(), img.width());
    let mut ss = 0.0;
    for ((g, &x), &p) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(img.as_slice())
        .zip(projected.as_slice())
    {
        let d = x.as_f64() - p;
        ss += d * d;
        *g = T::of_f64(d);
    }
    Ok((0.5 * ss, grad))
}
