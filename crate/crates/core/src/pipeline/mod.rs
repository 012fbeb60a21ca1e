//! End-to-end synthesis: preprocessing, exemplar analysis, noise
//! initialization, the combined objective `L = L_cnn + β·L_spe` under
//! L-BFGS, and export of the result.

mod diagnostics;
mod preprocess;

use std::io::Write;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use diagnostics::{dominant_radius, log_magnitude_image, radial_spectrum_profile, write_profile_csv};
pub use preprocess::{image_to_tensor, postprocess, preprocess, rescaled_dims};

use crate::error::{Error, Result};
use crate::gram::{total_cnn_loss, GramTarget};
use crate::lbfgs::{self, OptimizerOptions, OptimizerReport};
use crate::network::{vgg19_layout, NetworkSpec, DEFAULT_CAPTURE};
use crate::real::Real;
use crate::spectrum::{spectrum_loss_and_grad, PhaseRule, SpectrumTarget};
use crate::tensor::Tensor;
use crate::weights::WeightSet;

pub const DEFAULT_LAYER_WEIGHT: f64 = 1e9;
pub const DEFAULT_BETA: f64 = 1e5;
pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_SCALE: u32 = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseInit {
    /// Zero-mean Gaussian with the exemplar's per-channel standard deviation.
    #[default]
    MatchExemplar,
    /// Zero-mean, unit-variance Gaussian.
    Unit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisConfig {
    pub capture_layers: Vec<String>,
    /// One weight per capture layer.
    pub layer_weights: Vec<f64>,
    pub beta: f64,
    pub spectrum: bool,
    pub phase_rule: PhaseRule,
    pub iterations: usize,
    pub seed: u64,
    /// Longest side after rescaling; `None` keeps the input size.
    pub scale: Option<u32>,
    pub noise: NoiseInit,
    /// L-BFGS settings; `max_iterations` is taken from `iterations`.
    pub optimizer: OptimizerOptions,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            capture_layers: DEFAULT_CAPTURE.iter().map(|s| s.to_string()).collect(),
            layer_weights: vec![DEFAULT_LAYER_WEIGHT; DEFAULT_CAPTURE.len()],
            beta: DEFAULT_BETA,
            spectrum: true,
            phase_rule: PhaseRule::default(),
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            scale: Some(DEFAULT_SCALE),
            noise: NoiseInit::default(),
            optimizer: OptimizerOptions {
                grad_tolerance: 0.0,
                ..OptimizerOptions::default()
            },
        }
    }
}

impl SynthesisConfig {
    /// Whether the spectrum term takes part in the objective.
    pub fn spectrum_active(&self) -> bool {
        self.spectrum && self.beta > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.capture_layers.is_empty() {
            return Err(Error::config("no capture layers"));
        }
        if self.capture_layers.len() != self.layer_weights.len() {
            return Err(Error::config(format!(
                "{} capture layers but {} layer weights",
                self.capture_layers.len(),
                self.layer_weights.len()
            )));
        }
        if let Some(w) = self.layer_weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::config(format!("layer weight {w} is not a finite value ≥ 0")));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config(format!("beta = {} is not a finite value ≥ 0", self.beta)));
        }
        if !self.spectrum_active() && self.layer_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::config(
                "no active constraint: all layer weights are zero and the spectrum term is off",
            ));
        }
        self.optimizer.validate()
    }
}

/// Everything computed once from the exemplar.
#[derive(Clone, Debug)]
pub struct ExemplarTargets {
    pub gram: GramTarget,
    pub spectrum: Option<SpectrumTarget>,
    pub height: usize,
    pub width: usize,
    /// Means subtracted during preprocessing.
    pub means: [f32; 3],
    /// Per-channel standard deviation of the preprocessed exemplar.
    pub channel_std: Vec<f64>,
}

fn channel_std<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    (0..t.channels())
        .map(|c| {
            let p = t.plane(c);
            let n = p.len() as f64;
            let mean = p.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            (p.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Gram matrices at every capture layer and the spectrum target of the
/// preprocessed exemplar.
pub fn analyze_exemplar<T: Real>(
    exemplar: &Tensor<T>,
    net: &NetworkSpec<T>,
    config: &SynthesisConfig,
    means: [f32; 3],
) -> Result<ExemplarTargets> {
    let trace = net.forward_capture(exemplar)?;
    let gram = GramTarget::from_trace(&trace, &config.layer_weights)?;
    let spectrum = if config.spectrum_active() {
        Some(SpectrumTarget::new(exemplar, config.phase_rule)?)
    } else {
        None
    };
    Ok(ExemplarTargets {
        gram,
        spectrum,
        height: exemplar.height(),
        width: exemplar.width(),
        means,
        channel_std: channel_std(exemplar),
    })
}

/// I.i.d. zero-mean Gaussian noise; channel `c` has standard deviation
/// `std[c]` (1 when `std` is `None`). Draws are channel-major from a
/// ChaCha8 stream seeded with `seed`.
pub fn init_noise<T: Real>(
    (channels, height, width): (usize, usize, usize),
    seed: u64,
    std: Option<&[f64]>,
) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(channels, height, width, |c, _, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::of_f64(z * std.map_or(1.0, |s| s[c]))
    })
}

/// Loss components of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cnn: f64,
    /// The weighted term `β·L_spe`.
    pub spectrum: f64,
}

/// The combined objective `L = L_cnn + β·L_spe` with gradient
/// `Δ = Δ_cnn + β·Δ_spe`.
pub struct CombinedObjective<'a, T> {
    net: &'a NetworkSpec<T>,
    targets: &'a ExemplarTargets,
    beta: f64,
}

impl<'a, T: Real> CombinedObjective<'a, T> {
    pub fn new(net: &'a NetworkSpec<T>, targets: &'a ExemplarTargets, beta: f64) -> Self {
        CombinedObjective { net, targets, beta }
    }

    pub fn evaluate(&self, image: &Tensor<T>) -> Result<(LossParts, Tensor<T>)> {
        let trace = self.net.forward_capture(image)?;
        let (cnn, grads) = total_cnn_loss(&self.targets.gram, &trace)?;
        let mut grad = self.net.backward_to_image(&trace, &grads)?;
        let mut spectrum = 0.0;
        if let Some(target) = self.targets.spectrum.as_ref().filter(|_| self.beta > 0.0) {
            let (l_spe, d_spe) = spectrum_loss_and_grad(image, target)?;
            spectrum = self.beta * l_spe;
            grad.axpy(T::of_f64(self.beta), &d_spe)?;
        }
        Ok((
            LossParts {
                total: cnn + spectrum,
                cnn,
                spectrum,
            },
            grad,
        ))
    }
}

/// One objective evaluation, as written to the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub eval: usize,
    pub total: f64,
    pub cnn: f64,
    pub spectrum: f64,
    /// `false` for line-search probes that were not taken.
    pub accepted: bool,
}

pub const LOSS_CSV_HEADER: &str = "iter,eval,total,cnn,spectrum,accepted";

pub fn write_loss_csv(history: &[LossRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in history {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{}",
            r.iter, r.eval, r.total, r.cnn, r.spectrum, r.accepted as u8
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub image: RgbImage,
    /// The optimized tensor before export.
    pub tensor: Tensor<f64>,
    pub history: Vec<LossRecord>,
    pub report: OptimizerReport,
}

impl SynthesisResult {
    pub fn final_loss(&self) -> Option<LossRecord> {
        self.history.iter().rev().find(|r| r.accepted).copied()
    }
}

/// Builds the VGG-19-layout network named by `config` from `weights`. Channel
/// widths are taken from the weight file.
pub fn build_network<T: Real>(weights: &WeightSet, config: &SynthesisConfig) -> Result<NetworkSpec<T>> {
    NetworkSpec::from_layout(&vgg19_layout(), weights, &config.capture_layers)
}

pub fn synthesize<T: Real>(
    exemplar: &RgbImage,
    config: &SynthesisConfig,
    weights: &WeightSet,
) -> Result<SynthesisResult> {
    config.validate()?;
    let net = build_network::<T>(weights, config)?;
    synthesize_with(exemplar, config, &net, weights.means, |_, _| {})
}

/// Runs synthesis on a prebuilt network. `observer(iteration, image)` sees
/// the current iterate after every accepted step.
pub fn synthesize_with<T: Real>(
    exemplar: &RgbImage,
    config: &SynthesisConfig,
    net: &NetworkSpec<T>,
    means: [f32; 3],
    mut observer: impl FnMut(usize, &Tensor<T>),
) -> Result<SynthesisResult> {
    config.validate()?;
    let names: Vec<&str> = net.capture_names().collect();
    let wanted: Vec<String> = config
        .capture_layers
        .iter()
        .map(|n| crate::network::canonical_layer_name(n))
        .collect();
    if names != wanted {
        return Err(Error::config(format!(
            "network captures {names:?} but the configuration asks for {wanted:?}"
        )));
    }

    let ex = preprocess::<T>(exemplar, means, config.scale)?;
    let targets = analyze_exemplar(&ex, net, config, means)?;
    let shape = ex.shape();
    let std = match config.noise {
        NoiseInit::MatchExemplar => Some(targets.channel_std.as_slice()),
        NoiseInit::Unit => None,
    };
    let x0: Vec<f64> = init_noise::<T>(shape, config.seed, std)
        .as_slice()
        .iter()
        .map(|v| v.as_f64())
        .collect();

    let objective = CombinedObjective::new(net, &targets, config.beta);
    let to_tensor = |x: &[f64]| {
        Tensor::from_vec(shape.0, shape.1, shape.2, x.iter().map(|&v| T::of_f64(v)).collect())
    };
    let mut parts: Vec<LossParts> = Vec::new();
    let mut failure: Option<Error> = None;
    let f = |x: &[f64]| -> (f64, Vec<f64>) {
        let result = to_tensor(x).and_then(|t| objective.evaluate(&t));
        match result {
            Ok((p, g)) => {
                parts.push(p);
                (p.total, g.as_slice().iter().map(|v| v.as_f64()).collect())
            }
            Err(e) => {
                parts.push(LossParts::default());
                failure.get_or_insert(e);
                (f64::NAN, vec![f64::NAN; x.len()])
            }
        }
    };
    let opts = OptimizerOptions {
        max_iterations: config.iterations,
        ..config.optimizer.clone()
    };
    let observe = |iteration: usize, x: &[f64], _loss: f64| {
        if let Ok(t) = to_tensor(x) {
            observer(iteration, &t);
        }
    };
    let outcome = lbfgs::minimize_with_observer(f, x0, &opts, observe);
    if let Some(e) = failure {
        return Err(e);
    }
    let (x, report) = outcome?;

    let history = report
        .evaluations
        .iter()
        .zip(&parts)
        .enumerate()
        .map(|(eval, (e, p))| LossRecord {
            iter: e.iteration,
            eval,
            total: p.total,
            cnn: p.cnn,
            spectrum: p.spectrum,
            accepted: e.accepted,
        })
        .collect();
    let out = to_tensor(&x)?;
    Ok(SynthesisResult {
        image: postprocess(&out, means)?,
        tensor: out.cast(),
        history,
        report,
    })
}
