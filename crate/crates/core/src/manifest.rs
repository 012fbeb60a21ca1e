//! The exporter's plain-text manifest: `key=value` lines, `#` comments.
//!
//! ```text
//! source=vgg19-imagenet
//! output=vgg19.vggw
//! layers=conv1_1,conv1_2,...
//! checksum.conv1_1=0x1a2b3c4d
//! reference.image=probe.png
//! reference.image_crc32=0x0badf00d
//! reference.conv1_1.sum=1.25e6
//! reference.conv1_1.l2=3.5e3
//! ```
//!
//! Checksums are CRC-32 over a record's kernel then bias values as
//! little-endian f32 (see [`ConvRecord::checksum`]). Reference activations
//! are taken on the reference image with the weight file's means subtracted
//! and no rescaling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::network::{vgg19_layout, NetworkSpec};
use crate::pipeline::preprocess;
use crate::weights::{ConvRecord, WeightSet};

/// Relative L2 tolerance for activation agreement.
pub const ACTIVATION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationStats {
    pub sum: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportManifest {
    pub source: String,
    pub output: String,
    pub layers: Vec<String>,
    pub checksums: BTreeMap<String, u32>,
    pub reference_image: Option<String>,
    pub reference_image_crc32: Option<u32>,
    /// Keyed by capture layer name.
    pub reference: BTreeMap<String, ActivationStats>,
}

fn parse_u32(key: &str, v: &str) -> Result<u32> {
    let parsed = match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => v.parse(),
    };
    parsed.map_err(|_| Error::Format(format!("manifest key {key}: bad integer {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .ok()
        .filter(|x: &f64| x.is_finite())
        .ok_or_else(|| Error::Format(format!("manifest key {key}: bad number {v:?}")))
}

impl ExportManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = ExportManifest::default();
        let mut sums = BTreeMap::new();
        let mut norms = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Format(format!("manifest line {}: missing '='", lineno + 1)))?;
            match key {
                "source" => m.source = value.to_string(),
                "output" => m.output = value.to_string(),
                "layers" => {
                    m.layers = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "reference.image" => m.reference_image = Some(value.to_string()),
                "reference.image_crc32" => m.reference_image_crc32 = Some(parse_u32(key, value)?),
                _ => {
                    if let Some(layer) = key.strip_prefix("checksum.") {
                        m.checksums.insert(layer.to_string(), parse_u32(key, value)?);
                    } else if let Some(rest) = key.strip_prefix("reference.") {
                        match rest.rsplit_once('.') {
                            Some((layer, "sum")) => {
                                sums.insert(layer.to_string(), parse_f64(key, value)?);
                            }
                            Some((layer, "l2")) => {
                                norms.insert(layer.to_string(), parse_f64(key, value)?);
                            }
                            _ => return Err(Error::Format(format!("unknown manifest key {key}"))),
                        }
                    } else {
                        return Err(Error::Format(format!("unknown manifest key {key}")));
                    }
                }
            }
        }
        for (layer, l2) in norms {
            let sum = sums
                .remove(&layer)
                .ok_or_else(|| Error::Format(format!("reference.{layer}.l2 without reference.{layer}.sum")))?;
            m.reference.insert(layer, ActivationStats { sum, l2 });
        }
        if let Some(layer) = sums.keys().next() {
            return Err(Error::Format(format!("reference.{layer}.sum without reference.{layer}.l2")));
        }
        if m.layers.is_empty() {
            return Err(Error::Format("manifest lists no layers".into()));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "source={}", self.source);
        let _ = writeln!(s, "output={}", self.output);
        let _ = writeln!(s, "layers={}", self.layers.join(","));
        for (layer, crc) in &self.checksums {
            let _ = writeln!(s, "checksum.{layer}=0x{crc:08x}");
        }
        if let Some(img) = &self.reference_image {
            let _ = writeln!(s, "reference.image={img}");
        }
        if let Some(crc) = self.reference_image_crc32 {
            let _ = writeln!(s, "reference.image_crc32=0x{crc:08x}");
        }
        for (layer, st) in &self.reference {
            let _ = writeln!(s, "reference.{layer}.sum={:e}", st.sum);
            let _ = writeln!(s, "reference.{layer}.l2={:e}", st.l2);
        }
        s
    }

    /// Checks that `weights` holds exactly the listed layers, in order, with
    /// matching value checksums.
    pub fn verify_weights(&self, weights: &WeightSet) -> Result<()> {
        let names: Vec<&str> = weights.records.iter().map(|r| r.name.as_str()).collect();
        if names != self.layers {
            return Err(Error::Format(format!(
                "manifest lists layers {:?} but the weight file holds {names:?}",
                self.layers
            )));
        }
        for layer in &self.layers {
            let stored = *self
                .checksums
                .get(layer)
                .ok_or_else(|| Error::Format(format!("manifest has no checksum for {layer}")))?;
            let computed = weights.record(layer).map(ConvRecord::checksum).unwrap_or_default();
            if stored != computed {
                return Err(Error::weights(
                    layer,
                    format!("checksum 0x{computed:08x} differs from manifest 0x{stored:08x}"),
                ));
            }
        }
        Ok(())
    }
}

/// Engine-side statistics next to the manifest's for one capture layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCheck {
    pub layer: String,
    pub expected: ActivationStats,
    pub actual: ActivationStats,
}

impl ActivationCheck {
    pub fn l2_rel_err(&self) -> f64 {
        (self.actual.l2 - self.expected.l2).abs() / self.expected.l2.abs().max(f64::MIN_POSITIVE)
    }

    pub fn passes(&self) -> bool {
        self.l2_rel_err() < ACTIVATION_TOLERANCE
    }
}

/// Activation sum and L2 norm at `layers` for `image` (means subtracted,
/// no rescaling), computed in f64.
pub fn activation_stats(
    weights: &WeightSet,
    image: &RgbImage,
    layers: &[String],
) -> Result<BTreeMap<String, ActivationStats>> {
    let net: NetworkSpec<f64> = NetworkSpec::from_layout(&vgg19_layout(), weights, layers)?;
    let input = preprocess::<f64>(image, weights.means, None)?;
    let trace = net.forward_capture(&input)?;
    Ok(trace
        .features()
        .map(|(name, f)| {
            let sum = f.as_slice().iter().sum();
            (name.to_string(), ActivationStats { sum, l2: f.norm() })
        })
        .collect())
}

/// Compares the engine's activations on `image` against every reference
/// record in the manifest.
pub fn check_reference_activations(
    manifest: &ExportManifest,
    weights: &WeightSet,
    image: &RgbImage,
) -> Result<Vec<ActivationCheck>> {
    if manifest.reference.is_empty() {
        return Err(Error::Format("manifest has no reference activations".into()));
    }
    let layers: Vec<String> = manifest.reference.keys().cloned().collect();
    let mut actual = activation_stats(weights, image, &layers)?;
    Ok(manifest
        .reference
        .iter()
        .map(|(layer, &expected)| ActivationCheck {
            layer: layer.clone(),
            expected,
            actual: actual.remove(&crate::network::canonical_layer_name(layer)).unwrap_or(ActivationStats {
                sum: f64::NAN,
                l2: f64::NAN,
            }),
        })
        .collect())
}
