//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Optional tiers, enabled by environment variables:
//! - `SPECTEX_VGG_WEIGHTS`: VGGW file with real VGG-19 weights for the
//!   full-scale run. `SPECTEX_FULL_EXEMPLAR` picks the exemplar (default: a
//!   256² checkerboard of period 32) and `SPECTEX_FULL_ITERATIONS` the budget.
//! - `SPECTEX_EXPORT_MANIFEST`: exporter manifest; its `output` and
//!   `reference.image` paths are resolved relative to the manifest.

mod common;

use std::collections::BTreeMap;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spectex::lbfgs::{minimize, OptimizerOptions, Termination};
use spectex::manifest::{check_reference_activations, ExportManifest};
use spectex::network::{vgg19_conv_shapes, vgg19_layout, NetworkSpec};
use spectex::pipeline::{
    analyze_exemplar, dominant_radius, image_to_tensor, preprocess, radial_spectrum_profile, synthesize,
    CombinedObjective, SynthesisConfig,
};
use spectex::spectrum::{dft2, idft2, project_spectrum, Complex64, PhaseRule, SpectrumTarget};
use spectex::weights::load_weights;
use spectex::Tensor;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn outcome(r: Result<String, String>) -> Outcome {
    match r {
        Ok(s) => Outcome::Pass(s),
        Err(s) => Outcome::Fail(s),
    }
}

fn gaussian(seed: u64, (c, h, w): (usize, usize, usize), std: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(c, h, w, |_, _, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b).unwrap();
    d.norm() / b.norm().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    outcome((|| {
        let weights = common::random_weights(101, 2, 4);
        let layers = vec!["conv1_1".to_string(), "pool1".to_string()];
        let net: NetworkSpec<f64> =
            NetworkSpec::from_layout(&vgg19_layout(), &weights, &layers).map_err(|e| e.to_string())?;
        let config = SynthesisConfig {
            layer_weights: vec![1e9; 2],
            capture_layers: layers,
            ..SynthesisConfig::default()
        };
        let exemplar = gaussian(1, (3, 8, 8), 50.0);
        let targets = analyze_exemplar(&exemplar, &net, &config, [0.0; 3]).map_err(|e| e.to_string())?;
        let objective = CombinedObjective::new(&net, &targets, config.beta);
        let x = gaussian(2, (3, 8, 8), 50.0);
        let (parts, grad) = objective.evaluate(&x).map_err(|e| e.to_string())?;
        ensure(parts.cnn > 0.0 && parts.spectrum > 0.0, || format!("degenerate losses {parts:?}"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (c, y, xx) = (rng.gen_range(0..3), rng.gen_range(0..8), rng.gen_range(0..8));
            let at = |delta: f64| {
                let mut p = x.clone();
                p.set(c, y, xx, p.get(c, y, xx) + delta);
                objective.evaluate(&p).map(|(l, _)| l.total)
            };
            let fd = (at(h).map_err(|e| e.to_string())? - at(-h).map_err(|e| e.to_string())?) / (2.0 * h);
            let an = grad.get(c, y, xx);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(err);
        }
        ensure(worst < 1e-4, || format!("max relative error {worst:.3e} ≥ 1e-4"))?;
        Ok(format!(
            "max rel err {worst:.2e} over 20 pixels (L_cnn {:.3e}, β·L_spe {:.3e})",
            parts.cnn, parts.spectrum
        ))
    })())
}

fn shifted(t: &Tensor<f64>, dy: usize, dx: usize) -> Tensor<f64> {
    let (c, h, w) = t.shape();
    Tensor::from_fn(c, h, w, |c, y, x| t.get(c, (y + h - dy) % h, (x + w - dx) % w))
}

/// Random member of the exemplar's spectrum set: the exemplar moduli under a
/// common Hermitian-symmetric random phase.
fn random_member(seed: u64, target: &SpectrumTarget) -> Tensor<f64> {
    let (h, w) = (target.height(), target.width());
    let noise = gaussian(seed, (1, h, w), 1.0);
    let phase: Vec<Complex64> = dft2(noise.plane(0), h, w)
        .into_iter()
        .map(|z| if z.norm() > 0.0 { z / z.norm() } else { Complex64::new(1.0, 0.0) })
        .collect();
    let mut out = Tensor::zeros(3, h, w);
    for c in 0..3 {
        let bins: Vec<Complex64> = target
            .channel(c)
            .iter()
            .zip(&phase)
            .map(|(a, p)| Complex64::new(a.norm(), 0.0) * p)
            .collect();
        for (o, v) in out.plane_mut(c).iter_mut().zip(idft2(&bins, h, w)) {
            *o = v.re;
        }
    }
    out
}

fn spectrum_projection() -> Outcome {
    outcome((|| {
        let mut notes = Vec::new();
        let mut worst_modulus: f64 = 0.0;
        let mut worst_idem: f64 = 0.0;
        let mut worst_fixed: f64 = 0.0;
        for trial in 0..5u64 {
            let exemplar = gaussian(10 + trial, (3, 8, 8), 1.0);
            let target = SpectrumTarget::new(&exemplar, PhaseRule::Joint).map_err(|e| e.to_string())?;
            let x = gaussian(20 + trial, (3, 8, 8), 1.0);
            let p = project_spectrum(&x, &target).map_err(|e| e.to_string())?;

            for c in 0..3 {
                let got = dft2(p.plane(c), 8, 8);
                let (mut num, mut den) = (0.0, 0.0);
                for (g, a) in got.iter().zip(target.channel(c)) {
                    num += (g.norm() - a.norm()).powi(2);
                    den += a.norm_sqr();
                }
                worst_modulus = worst_modulus.max((num / den).sqrt());
            }

            let pp = project_spectrum(&p, &target).map_err(|e| e.to_string())?;
            worst_idem = worst_idem.max(rel(&pp, &p));

            for (dy, dx) in [(0, 0), (1, 0), (0, 3), (5, 2), (7, 7)] {
                let member = shifted(&exemplar, dy, dx);
                let proj = project_spectrum(&member, &target).map_err(|e| e.to_string())?;
                worst_fixed = worst_fixed.max(rel(&proj, &member));
            }

            let mut to_p = x.clone();
            to_p.axpy(-1.0, &p).map_err(|e| e.to_string())?;
            let best = to_p.norm();
            for m in 0..100 {
                let member = random_member(1000 * trial + m, &target);
                let mut d = x.clone();
                d.axpy(-1.0, &member).map_err(|e| e.to_string())?;
                ensure(best <= d.norm() * (1.0 + 1e-12), || {
                    format!("trial {trial}: member {m} is closer ({} < {best})", d.norm())
                })?;
            }
        }
        ensure(worst_modulus < 1e-9, || format!("modulus rel err {worst_modulus:.3e}"))?;
        ensure(worst_idem < 1e-9, || format!("idempotence rel err {worst_idem:.3e}"))?;
        ensure(worst_fixed < 1e-9, || format!("fixed-point rel err {worst_fixed:.3e}"))?;
        notes.push(format!("modulus {worst_modulus:.1e}"));
        notes.push(format!("idempotence {worst_idem:.1e}"));
        notes.push(format!("fixed points {worst_fixed:.1e}"));
        notes.push("minimal vs 5×100 random members".into());
        Ok(notes.join(", "))
    })())
}

fn optimizer_suite() -> Outcome {
    outcome((|| {
        let opts = OptimizerOptions { grad_tolerance: 1e-8, ..OptimizerOptions::default() };

        let a = [3.0, -1.0, 0.5, 7.0, 2.0];
        let quad = |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x - a).collect();
            (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
        };
        let (_, rq) = minimize(quad, vec![0.0; 5], &opts).map_err(|e| e.to_string())?;
        ensure(rq.termination == Termination::Converged && rq.final_grad_norm < 1e-8, || {
            format!("quadratic: {} with ‖∇‖ = {:.2e}", rq.termination, rq.final_grad_norm)
        })?;
        ensure(rq.iterations <= 5, || format!("quadratic took {} iterations", rq.iterations))?;

        let rosen = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            (f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
        };
        let ropts = OptimizerOptions { grad_tolerance: 1e-10, ..opts.clone() };
        let (xr, rr) = minimize(rosen, vec![-1.2, 1.0], &ropts).map_err(|e| e.to_string())?;
        let dist = ((xr[0] - 1.0).abs()).max((xr[1] - 1.0).abs());
        ensure(dist < 1e-6, || format!("Rosenbrock ended {dist:.2e} from (1, 1)"))?;
        ensure(rr.iterations <= 200, || format!("Rosenbrock took {} iterations", rr.iterations))?;

        for r in [&rq, &rr] {
            for s in &r.steps {
                ensure(s.satisfies_strong_wolfe(opts.c1, opts.c2), || format!("step violates strong Wolfe: {s:?}"))?;
            }
            ensure(r.losses.windows(2).all(|w| w[1] <= w[0]), || "loss history increased".into())?;
        }
        Ok(format!(
            "quadratic {} it, Rosenbrock {} it (dist {dist:.1e}), {} Wolfe steps checked",
            rq.iterations,
            rr.iterations,
            rq.steps.len() + rr.steps.len()
        ))
    })())
}

fn regularity_experiment() -> Outcome {
    outcome((|| {
        let exemplar = common::checkerboard(64, 8);
        let weights = common::random_weights(202, 2, 8);
        let base = SynthesisConfig {
            capture_layers: vec!["conv1_1".into(), "pool1".into()],
            layer_weights: vec![1e9; 2],
            iterations: 300,
            scale: None,
            seed: 1,
            ..SynthesisConfig::default()
        };
        let ex_profile = radial_spectrum_profile(
            &preprocess::<f64>(&exemplar, weights.means, None).map_err(|e| e.to_string())?,
        );
        let ex_peak = dominant_radius(&ex_profile).ok_or("exemplar has no peak")?;

        let mut peaks = BTreeMap::new();
        for beta in [1e5, 0.0] {
            let config = SynthesisConfig { beta, ..base.clone() };
            let r = synthesize::<f32>(&exemplar, &config, &weights).map_err(|e| e.to_string())?;
            let accepted: Vec<f64> = r.history.iter().filter(|h| h.accepted).map(|h| h.total).collect();
            ensure(accepted.windows(2).all(|w| w[1] <= w[0]), || format!("β = {beta}: loss increased"))?;
            let profile = radial_spectrum_profile(&image_to_tensor::<f64>(&r.image));
            peaks.insert(beta.to_bits(), dominant_radius(&profile).ok_or("output has no peak")?);
        }
        let with = peaks[&1e5f64.to_bits()];
        let without = peaks[&0f64.to_bits()];
        ensure(with.abs_diff(ex_peak) <= 1, || {
            format!("β = 1e5 peak at radius {with}, exemplar at {ex_peak}")
        })?;
        Ok(format!("exemplar peak r = {ex_peak}, β = 1e5 peak r = {with}, β = 0 peak r = {without} (reported)"))
    })())
}

fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

fn determinism() -> Outcome {
    outcome((|| {
        let exemplar = common::stripes(24);
        let weights = common::random_weights(303, 2, 6);
        let config = SynthesisConfig {
            capture_layers: vec!["conv1_1".into(), "pool1".into()],
            layer_weights: vec![1.0; 2],
            beta: 1e-3,
            iterations: 20,
            scale: None,
            seed: 7,
            ..SynthesisConfig::default()
        };
        let a = synthesize::<f32>(&exemplar, &config, &weights).map_err(|e| e.to_string())?;
        let b = synthesize::<f32>(&exemplar, &config, &weights).map_err(|e| e.to_string())?;
        ensure(png_bytes(&a.image) == png_bytes(&b.image), || "in-process runs differ".into())?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ex = dir.path().join("ex.png");
        let w = dir.path().join("w.vggw");
        exemplar.save(&ex).map_err(|e| e.to_string())?;
        weights.save(&w).map_err(|e| e.to_string())?;
        let run = |out: &Path| {
            Command::new(env!("CARGO_BIN_EXE_spectex"))
                .args(["synth", "--exemplar"])
                .arg(&ex)
                .arg("--weights")
                .arg(&w)
                .arg("--out")
                .arg(out)
                .args(["--scale", "0", "--layers", "conv1_1,pool1", "--layer-weight", "1", "--beta", "1e-3"])
                .args(["--iterations", "20", "--seed", "7", "--threads", "2"])
                .output()
        };
        let (o1, o2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        for o in [&o1, &o2] {
            let out = run(o).map_err(|e| e.to_string())?;
            ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        }
        let (b1, b2) = (std::fs::read(&o1).map_err(|e| e.to_string())?, std::fs::read(&o2).map_err(|e| e.to_string())?);
        ensure(b1 == b2, || "CLI runs differ".into())?;
        Ok(format!("in-process and CLI outputs byte-identical ({} bytes)", b1.len()))
    })())
}

fn full_reproduction() -> Outcome {
    let Ok(weights_path) = std::env::var("SPECTEX_VGG_WEIGHTS") else {
        return Outcome::Skip("set SPECTEX_VGG_WEIGHTS to run".into());
    };
    outcome((|| {
        let weights = load_weights(&weights_path).map_err(|e| e.to_string())?;
        let exemplar = match std::env::var("SPECTEX_FULL_EXEMPLAR") {
            Ok(p) => image::open(&p).map_err(|e| format!("{p}: {e}"))?.to_rgb8(),
            Err(_) => common::checkerboard(256, 32),
        };
        let iterations = std::env::var("SPECTEX_FULL_ITERATIONS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1000);
        let base = SynthesisConfig { iterations, ..SynthesisConfig::default() };
        let ex = preprocess::<f64>(&exemplar, weights.means, base.scale).map_err(|e| e.to_string())?;
        let ex_peak = dominant_radius(&radial_spectrum_profile(&ex)).ok_or("exemplar has no peak")?;
        let mut notes = vec![format!("exemplar peak r = {ex_peak}")];
        let mut with = None;
        for beta in [1e5, 0.0] {
            let start = Instant::now();
            let config = SynthesisConfig { beta, ..base.clone() };
            let r = synthesize::<f32>(&exemplar, &config, &weights).map_err(|e| e.to_string())?;
            let peak = dominant_radius(&radial_spectrum_profile(&image_to_tensor::<f64>(&r.image)));
            notes.push(format!("β = {beta:e}: peak r = {peak:?}, {:.0}s", start.elapsed().as_secs_f64()));
            if beta > 0.0 {
                with = peak;
            }
        }
        let with = with.ok_or("output has no peak")?;
        ensure(with.abs_diff(ex_peak) <= 1, || notes.join(", "))?;
        Ok(notes.join(", "))
    })())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn exporter_round_trip() -> Outcome {
    let Ok(manifest_path) = std::env::var("SPECTEX_EXPORT_MANIFEST") else {
        return Outcome::Skip("set SPECTEX_EXPORT_MANIFEST to run".into());
    };
    outcome((|| {
        let manifest = ExportManifest::load(&manifest_path).map_err(|e| e.to_string())?;
        let dir = Path::new(&manifest_path).parent().unwrap_or(Path::new("."));
        let weights = load_weights(resolve(dir, &manifest.output)).map_err(|e| e.to_string())?;
        let chain: Vec<_> = vgg19_conv_shapes().into_iter().take(12).collect();
        weights.validate_against(&chain).map_err(|e| e.to_string())?;
        manifest.verify_weights(&weights).map_err(|e| e.to_string())?;
        let image_path = manifest.reference_image.as_deref().ok_or("manifest has no reference image")?;
        let bytes = std::fs::read(resolve(dir, image_path)).map_err(|e| e.to_string())?;
        if let Some(crc) = manifest.reference_image_crc32 {
            ensure(crc32fast::hash(&bytes) == crc, || "reference image checksum mismatch".into())?;
        }
        let image = image::load_from_memory(&bytes).map_err(|e| e.to_string())?.to_rgb8();
        let checks = check_reference_activations(&manifest, &weights, &image).map_err(|e| e.to_string())?;
        let summary: Vec<String> =
            checks.iter().map(|c| format!("{} rel err {:.2e}", c.layer, c.l2_rel_err())).collect();
        ensure(checks.iter().all(|c| c.passes()), || summary.join(", "))?;
        Ok(summary.join(", "))
    })())
}

fn main() -> ExitCode {
    let checks: [(&str, &str, Check); 7] = [
        ("required", "gradient correctness", gradient_correctness),
        ("required", "spectrum projection suite", spectrum_projection),
        ("required", "optimizer suite", optimizer_suite),
        ("required", "desk-scale regularity experiment", regularity_experiment),
        ("required", "determinism", determinism),
        ("optional", "full reproduction", full_reproduction),
        ("exporter", "exporter round trip", exporter_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (tier, name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let t = fmt_time(start.elapsed());
        match result {
            Outcome::Pass(s) => println!("PASS [{tier}] {name} ({t}): {s}"),
            Outcome::Fail(s) => {
                failed += 1;
                println!("FAIL [{tier}] {name} ({t}): {s}");
            }
            Outcome::Skip(s) => println!("SKIP [{tier}] {name}: {s}"),
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn fmt_time(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}
