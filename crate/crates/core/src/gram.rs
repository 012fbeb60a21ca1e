//! Gram statistics of feature maps and the CNN texture loss built on them.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::ForwardTrace;
use crate::real::Real;
use crate::tensor::Tensor;

/// `G[p, q] = Σ_i f_p(i)·f_q(i)` over the `m × N` rows of a feature map.
/// Stored in `f64` regardless of the network precision.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    maps: usize,
    stimuli: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn from_values(maps: usize, stimuli: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != maps * maps {
            return Err(Error::config(format!(
                "gram matrix needs {} values, got {}",
                maps * maps,
                values.len()
            )));
        }
        Ok(GramMatrix {
            maps,
            stimuli,
            values,
        })
    }

    /// `m_l`, the number of feature maps.
    pub fn maps(&self) -> usize {
        self.maps
    }

    /// `N_l`, the number of spatial positions the products were summed over.
    pub fn stimuli(&self) -> usize {
        self.stimuli
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.maps + q]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn check_compatible(&self, other: &GramMatrix) -> Result<()> {
        if self.maps != other.maps || self.stimuli != other.stimuli {
            return Err(Error::config(format!(
                "gram dimensions differ: ({}, {}) vs ({}, {})",
                self.maps, self.stimuli, other.maps, other.stimuli
            )));
        }
        Ok(())
    }
}

/// Unnormalized Gram matrix of a feature map, each channel flattened over
/// its spatial positions. Products accumulate in `f64`; only `p ≤ q` is
/// computed and mirrored, so the result is exactly symmetric.
pub fn gram_matrix<T: Real>(f: &Tensor<T>) -> GramMatrix {
    let m = f.channels();
    let upper: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|p| {
            let fp = f.plane(p);
            (p..m)
                .map(|q| {
                    fp.iter()
                        .zip(f.plane(q))
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut values = vec![0.0; m * m];
    for (p, row) in upper.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let q = p + k;
            values[p * m + q] = v;
            values[q * m + p] = v;
        }
    }
    GramMatrix {
        maps: m,
        stimuli: f.plane_len(),
        values,
    }
}

fn normalizer(g: &GramMatrix) -> f64 {
    let n = g.stimuli as f64;
    let m = g.maps as f64;
    n * n * m * m
}

/// `E = 1/(4 N² m²) · Σ_{p,q} (G[p,q] − Ĝ[p,q])²`.
pub fn layer_loss(target: &GramMatrix, generated: &GramMatrix) -> Result<f64> {
    target.check_compatible(generated)?;
    let ss: f64 = target
        .values
        .iter()
        .zip(&generated.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / (4.0 * normalizer(target)))
}

/// Gradient of [`layer_loss`] with respect to the generated feature map:
/// `∂E/∂f̂_p(i) = 1/(N² m²) · Σ_q f̂_q(i)·(Ĝ[p,q] − G[p,q])`.
///
/// `generated_gram` must be `gram_matrix(generated)`. There is no ReLU mask
/// here; masking happens when the gradient passes back through the ReLU.
pub fn layer_loss_grad<T: Real>(
    generated: &Tensor<T>,
    target: &GramMatrix,
    generated_gram: &GramMatrix,
) -> Result<Tensor<T>> {
    target.check_compatible(generated_gram)?;
    if generated.channels() != target.maps || generated.plane_len() != target.stimuli {
        return Err(Error::config(format!(
            "feature map {:?} does not match gram dimensions ({}, {})",
            generated.shape(),
            target.maps,
            target.stimuli
        )));
    }
    let m = target.maps;
    let n = target.stimuli;
    let scale = 1.0 / normalizer(target);
    let diff: Vec<f64> = generated_gram
        .values
        .iter()
        .zip(&target.values)
        .map(|(g, t)| (g - t) * scale)
        .collect();
    let (c, h, w) = generated.shape();
    let mut out = Tensor::zeros(c, h, w);
    out.as_mut_slice()
        .par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(p, dst)| {
            let mut acc = vec![0.0f64; n];
            for q in 0..m {
                let d = diff[p * m + q];
                if d == 0.0 {
                    continue;
                }
                for (a, v) in acc.iter_mut().zip(generated.plane(q)) {
                    *a += d * v.as_f64();
                }
            }
            for (o, a) in dst.iter_mut().zip(acc) {
                *o = T::of_f64(a);
            }
        });
    Ok(out)
}

/// Exemplar Gram matrices for every capture layer with their loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GramTarget {
    layers: Vec<TargetLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetLayer {
    pub name: String,
    pub gram: GramMatrix,
    pub weight: f64,
}

impl GramTarget {
    /// Gram matrices of every captured feature map in `trace`, paired with
    /// `weights` in capture order.
    pub fn from_trace<T: Real>(trace: &ForwardTrace<T>, weights: &[f64]) -> Result<Self> {
        let features: Vec<_> = trace.features().collect();
        if features.len() != weights.len() {
            return Err(Error::config(format!(
                "{} capture layers but {} layer weights",
                features.len(),
                weights.len()
            )));
        }
        let layers = features
            .into_iter()
            .zip(weights)
            .map(|((name, f), &weight)| TargetLayer {
                name: name.to_owned(),
                gram: gram_matrix(f),
                weight,
            })
            .collect();
        Ok(GramTarget { layers })
    }

    pub fn new(layers: Vec<TargetLayer>) -> Self {
        GramTarget { layers }
    }

    pub fn layers(&self) -> &[TargetLayer] {
        &self.layers
    }

    pub fn get(&self, name: &str) -> Option<&TargetLayer> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// `L_cnn = Σ_l w_l E_l` and, per capture layer, `w_l ∂E_l/∂f̂_l`.
/// Layers with zero weight contribute neither loss nor gradient.
pub fn total_cnn_loss<T: Real>(
    targets: &GramTarget,
    trace: &ForwardTrace<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for layer in &targets.layers {
        let f = trace.feature(&layer.name).ok_or_else(|| {
            Error::config(format!("trace has no capture layer `{}`", layer.name))
        })?;
        if layer.weight == 0.0 {
            continue;
        }
        let g = gram_matrix(f);
        total += layer.weight * layer_loss(&layer.gram, &g)?;
        let mut grad = layer_loss_grad(f, &layer.gram, &g)?;
        let w = T::of_f64(layer.weight);
        grad.as_mut_slice().iter_mut().for_each(|v| *v = *v * w);
        grads.insert(layer.name.clone(), grad);
    }
    Ok((total, grads))
}
