//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function returns a JSON document. The logic lives in the
//! `*_json` functions, which also run natively so they can be tested
//! without a browser.

use cdeflow::cdeint::{make_field, rk4_solve, RecordMode};
use cdeflow::nn::{Activation, Mlp};
use cdeflow::path::SmoothRetime;
use cdeflow::signature::{signature_cde, signature_oracle_extrapolated, SignatureTensor};
use cdeflow::timeseries::{drop_observations, gen_toy_curves};
use cdeflow::{fit_natural_cubic, seeded_rng, ControlPath, Error, PiecewiseLinear, Result};
use rand::Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Points sampled along each curve sent to the page.
fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).min(b))
        .collect()
}

/// Channel-major copy of `rows`, skipping missing cells.
fn columns(times: &[f64], rows: &[Vec<Option<f64>>]) -> Vec<Value> {
    let channels = rows.first().map_or(0, Vec::len);
    (0..channels)
        .map(|c| {
            let (t, x): (Vec<f64>, Vec<f64>) = times
                .iter()
                .zip(rows)
                .filter_map(|(&t, r)| r[c].map(|x| (t, x)))
                .unzip();
            json!({ "t": t, "x": x })
        })
        .collect()
}

/// A toy curve of class `seed % 2`, the same curve with `fraction` of its
/// interior points dropped, and the natural cubic spline through what
/// remains, sampled at `resolution` points.
pub fn spline_demo_json(
    seed: u64,
    length: usize,
    fraction: f64,
    resolution: usize,
) -> Result<String> {
    let mut rng = seeded_rng(seed);
    let pair = gen_toy_curves(2, 2, length, &mut rng)?;
    let full = &pair.samples()[(seed % 2) as usize];
    let kept = drop_observations(full, fraction, &mut rng)?;
    let spline = fit_natural_cubic(&kept)?;
    let ts = linspace(kept.start(), kept.end(), resolution);
    let channels = kept.channel_count();
    let mut curves = vec![Vec::with_capacity(ts.len()); channels];
    for &t in &ts {
        for (c, x) in spline.evaluate(t)?.into_iter().take(channels).enumerate() {
            curves[c].push(x);
        }
    }
    Ok(json!({
        "label": full.label(),
        "full": columns(full.times(), full.values()),
        "kept": columns(kept.times(), kept.values()),
        "spline": { "t": ts, "x": curves },
    })
    .to_string())
}

/// A polyline through `(xs[i], ys[i])` at evenly spaced times on `[0, 1]`.
fn drawn_path(xs: &[f64], ys: &[f64]) -> Result<PiecewiseLinear> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config(
            "need at least two points with matching coordinates".into(),
        ));
    }
    let points = xs.iter().zip(ys).map(|(&x, &y)| vec![x, y]).collect();
    PiecewiseLinear::uniform(points)
}

fn levels(sig: &SignatureTensor) -> Vec<Vec<f64>> {
    (0..=sig.depth).map(|l| sig.level(l).to_vec()).collect()
}

/// Depth-`depth` signature of the drawn path with time appended, from the
/// CDE backend and from the extrapolated iterated-sum oracle, with their largest
/// entrywise difference.
pub fn signature_demo_json(xs: &[f64], ys: &[f64], depth: usize) -> Result<String> {
    if !(1..=4).contains(&depth) {
        return Err(Error::Config("depth must lie in 1..=4".into()));
    }
    let path = drawn_path(xs, ys)?.with_time_channel();
    let segments = xs.len() - 1;
    let cde = signature_cde(&path, depth, 0.25 / segments as f64)?;
    let oracle = signature_oracle_extrapolated(&path, depth, (4_000 / segments).max(20));
    let difference = cde
        .flat
        .iter()
        .zip(&oracle.flat)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(json!({
        "channels": ["x", "y", "t"],
        "cde": levels(&cde),
        "oracle": levels(&oracle),
        "max_difference": difference,
    })
    .to_string())
}

/// Hidden trajectory of a randomly initialized CDE driven by the drawn path
/// (no time channel) and by the same path traversed at a varying speed
/// controlled by `alpha` in (−1, 1). Terminal states agree even though the
/// trajectories differ in time.
pub fn cde_demo_json(
    xs: &[f64],
    ys: &[f64],
    seed: u64,
    hidden: usize,
    alpha: f64,
) -> Result<String> {
    if !(1..=8).contains(&hidden) {
        return Err(Error::Config("hidden size must lie in 1..=8".into()));
    }
    let path = drawn_path(xs, ys)?;
    let mut rng = seeded_rng(seed);
    let field = Mlp::init(
        &[hidden, 16, hidden * 2],
        Activation::Tanh,
        Activation::Tanh,
        &mut rng,
    )?;
    let z0: Vec<f64> = (0..hidden).map(|_| rng.random_range(-0.5..0.5)).collect();
    let step = 0.25 / (xs.len() - 1) as f64;
    let retimed = SmoothRetime::new(&path, alpha)?;

    let (t_a, z_a) = trajectory(&field, &path, &z0, step)?;
    let (t_b, z_b) = trajectory(&field, &retimed, &z0, step)?;
    let end_a = z_a.last().expect("trajectory is nonempty");
    let end_b = z_b.last().expect("trajectory is nonempty");
    let difference = end_a
        .iter()
        .zip(end_b)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(json!({
        "original": { "t": t_a, "z": z_a },
        "retimed": { "t": t_b, "z": z_b },
        "terminal_difference": difference,
    })
    .to_string())
}

fn trajectory<P: ControlPath>(
    field: &Mlp,
    path: &P,
    z0: &[f64],
    step: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let f = make_field(field, path)?;
    let (a, b) = path.domain();
    let rec = rk4_solve(&f, z0, a, b, step, RecordMode::Trajectory)?;
    Ok((rec.times, rec.states))
}

#[wasm_bindgen]
pub fn spline_demo(
    seed: u32,
    length: u32,
    fraction: f64,
    resolution: u32,
) -> Result<String, JsError> {
    Ok(spline_demo_json(
        seed.into(),
        length as usize,
        fraction,
        resolution as usize,
    )?)
}

#[wasm_bindgen]
pub fn signature_demo(xs: &[f64], ys: &[f64], depth: u32) -> Result<String, JsError> {
    Ok(signature_demo_json(xs, ys, depth as usize)?)
}

#[wasm_bindgen]
pub fn cde_demo(
    xs: &[f64],
    ys: &[f64],
    seed: u32,
    hidden: u32,
    alpha: f64,
) -> Result<String, JsError> {
    Ok(cde_demo_json(xs, ys, seed.into(), hidden as usize, alpha)?)
}
