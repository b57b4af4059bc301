//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Built with `harness = false`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sarcd_core::association::{bce_loss, confidence_ground_truth, filter_by_confidence, assemble_enhanced};
use sarcd_core::blocks::{
    depth_loss, train_msgnet, train_rcanet, Afb, AfbConfig, Bound, ConfidenceSample, DepthSample, ParamStore, Saeb,
    SaebConfig, ToyMsgNet, ToyNetConfig, ToyRcaNet, TrainConfig,
};
use sarcd_core::dilation::{structure_aware_dilate, structure_aware_dilate_with};
use sarcd_core::interpolation::scaffold_interpolate;
use sarcd_core::metrics::{evaluate, evaluate_buckets, DEFAULT_RANGES};
use sarcd_core::synth::oracle::{oracle_bce, oracle_confidence, oracle_depth_loss, oracle_dilate, oracle_metrics};
use sarcd_core::synth::{generate_scene, SceneSpec};
use sarcd_core::tensor::{finite_diff_grad, max_relative_error, Tape, Tensor, TensorResult, Var};
use sarcd_core::{
    ConfidenceMap, Connectivity, DepthMap, EnhancedRadarDepth, EnhancementParams, Execution, MapKind, RoiLabelMap,
    ValidMask,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn blocky_mono(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthMap {
    // a few rectangles on a quantized ramp; quantization produces exact ties
    let base: f32 = rng.gen_range(5.0..40.0);
    let slope: f32 = rng.gen_range(0.0..0.3);
    let mut m = DepthMap::from_fn(w, h, MapKind::Dense, |r, _| ((base + slope * r as f32) * 10.0).round() / 10.0);
    for _ in 0..rng.gen_range(1..6) {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = (rng.gen_range(r0..h), rng.gen_range(c0..w));
        let d = (rng.gen_range(2.0f32..60.0) * 10.0).round() / 10.0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                m.set(r, c, if rng.gen_bool(0.02) { 0.0 } else { d });
            }
        }
    }
    m
}

fn sparse_radar(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> DepthMap {
    let mut radar = DepthMap::zeros(w, h, MapKind::Sparse);
    for _ in 0..n {
        let d = (rng.gen_range(1.0f32..60.0) * 4.0).round() / 4.0;
        radar.set(rng.gen_range(0..h), rng.gen_range(0..w), d);
    }
    radar
}

// ---------------------------------------------------------------------------

fn dilation_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD11A);
    let taus = [0.05, 0.2, 1.0];
    let mut covered = [[false; 3]; 2];
    let mut contested = 0;
    for case in 0..100usize {
        let (w, h) = (rng.gen_range(8..=64), rng.gen_range(8..=64));
        let n = rng.gen_range(1..=20);
        let (radar, mono) = if case % 2 == 0 {
            let spec = SceneSpec { width: w, height: h, radar_points: n, seed: case as u64, ..Default::default() };
            let s = generate_scene(&spec).map_err(|e| e.to_string())?;
            (s.radar, s.mono)
        } else {
            (sparse_radar(&mut rng, w, h, n), blocky_mono(&mut rng, w, h))
        };
        let ti = case % 3;
        let ci = (case / 3) % 2;
        covered[ci][ti] = true;
        let params = EnhancementParams {
            tau1: taus[ti],
            connectivity: if ci == 0 { Connectivity::Four } else { Connectivity::Eight },
            max_radius: rng.gen_range(1..=64),
            ..Default::default()
        };
        let got = structure_aware_dilate(&radar, &mono, &params).map_err(|e| e.to_string())?;
        let (want, roi) = oracle_dilate(&radar, &mono, &params).map_err(|e| e.to_string())?;
        ensure(got.roi.mask() == roi.mask(), || format!("case {case}: ROI sets differ"))?;
        ensure(got.depth.values() == want.values(), || format!("case {case}: dilated depths differ"))?;
        contested += got.stats.contested_pixels;
    }
    ensure(covered.iter().flatten().all(|c| *c), || "connectivity/tau1 grid not covered".into())?;
    let el = t0.elapsed();
    ensure(el < Duration::from_secs(30), || format!("suite took {el:?}"))?;
    Ok(format!("100 scenes exact, {contested} contested pixels, {el:.2?}"))
}

// ---------------------------------------------------------------------------

fn formula_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let (w, h) = (rng.gen_range(4..48), rng.gen_range(4..48));
        let n = w * h;

        let ddr = DepthMap::from_fn(w, h, MapKind::Sparse, |_, _| {
            if rng.gen_bool(0.6) { rng.gen_range(1.0..60.0) } else { 0.0 }
        });
        let dint = DepthMap::from_fn(w, h, MapKind::Dense, |r, c| {
            let d = ddr.get(r, c);
            match rng.gen_range(0..4) {
                0 => 0.0,
                1 if d > 0.0 => d + rng.gen_range(-0.4f32..0.4),
                _ => rng.gen_range(1.0..60.0),
            }
        });
        let roi_bits: Vec<bool> = (0..n).map(|i| ddr.values()[i] > 0.0 || rng.gen_bool(0.1)).collect();
        let roi_mask = ValidMask::from_bits(w, h, roi_bits).unwrap();
        let roi = RoiLabelMap::from_mask(roi_mask.clone());
        let tau2 = rng.gen_range(0.1..1.0);
        let t = confidence_ground_truth(&ddr, &dint, &roi, tau2).map_err(|e| e.to_string())?;
        let (ov, om) = oracle_confidence(&ddr, &dint, &roi_mask, tau2);
        ensure(t.confidence.validity().bits() == om.as_slice(), || format!("case {case}: confidence validity"))?;
        for i in 0..n {
            if om[i] {
                let e = (f64::from(t.confidence.values()[i]) - ov[i]).abs();
                ensure(e == 0.0, || format!("case {case}: confidence value at {i}"))?;
            }
        }

        let valid = t.confidence.validity().clone();
        if valid.count() > 0 {
            let pv: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
            let pred = ConfidenceMap::new(w, h, pv, valid.clone()).unwrap();
            let got = bce_loss(&pred, &t.confidence, &roi).map_err(|e| e.to_string())?;
            let want = oracle_bce(pred.values(), t.confidence.values(), valid.bits());
            worst = worst.max(rel(got, want));
        }

        let dhat = DepthMap::from_fn(w, h, MapKind::Dense, |_, _| rng.gen_range(0.5..80.0));
        let dacc = DepthMap::from_fn(w, h, MapKind::Sparse, |_, _| {
            if rng.gen_bool(0.2) { rng.gen_range(1.0..80.0) } else { 0.0 }
        });
        let lambda = rng.gen_range(0.0..4.0);
        match (depth_loss(&dhat, &dacc, &dint, lambda), oracle_depth_loss(dhat.values(), dacc.values(), dint.values(), lambda)) {
            (Ok(a), Some(b)) => worst = worst.max(rel(a, b)),
            (Err(_), None) => {}
            _ => return Err(format!("case {case}: depth loss defined-ness differs")),
        }

        let gt = DepthMap::from_fn(w, h, MapKind::Sparse, |_, _| {
            if rng.gen_bool(0.4) { rng.gen_range(0.5..100.0) } else { 0.0 }
        });
        for r in DEFAULT_RANGES {
            let (mae, rmse, cnt) = oracle_metrics(dhat.values(), gt.values(), r);
            match evaluate(&dhat, &gt, r) {
                Ok(m) => {
                    ensure(m.n_pixels == cnt, || format!("case {case}: pixel count"))?;
                    worst = worst.max(rel(m.mae_mm, mae)).max(rel(m.rmse_mm, rmse));
                }
                Err(_) => ensure(cnt == 0, || format!("case {case}: evaluate failed with {cnt} pixels"))?,
            }
        }
    }
    ensure(worst < 1e-6, || format!("max relative error {worst:e}"))?;
    Ok(format!("50 inputs x 4 formulas, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn scaled(mut t: Tensor, k: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= k);
    t
}

/// Values bounded away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

/// Pairwise separated values, so max selections are stable under probing.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    levels.shuffle(rng);
    Tensor::new(shape.to_vec(), levels.iter().map(|&k| k as f64 * 0.02 - 0.5).collect()).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> TensorResult<Var>;

/// Gradient of `sum(out * probe)` for every input, analytic vs central
/// differences; returns the worst normwise relative error.
fn grad_check(inputs: &[Tensor], build: &Build, seed: u64) -> Result<f64, String> {
    let eval = |xs: &[Tensor], want_grads: bool| -> TensorResult<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37);
        let probe = tape.constant(rand_tensor(&mut prng, tape.shape(out)));
        let weighted = tape.mul(out, probe)?;
        let loss = tape.sum(weighted);
        let value = tape.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|v| g.get(*v).unwrap().clone()).collect()))
    };
    let (_, analytic) = eval(inputs, true).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let f = |t: &Tensor| {
            let mut xs = inputs.to_vec();
            xs[k] = t.clone();
            eval(&xs, false).unwrap().0
        };
        worst = worst.max(max_relative_error(a, &finite_diff_grad(f, &inputs[k], 1e-3)));
    }
    Ok(worst)
}

type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>, Box<Build>);

fn op_cases() -> Vec<Case> {
    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8))
    }
    fn even(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (2 * rng.gen_range(1..=4), 2 * rng.gen_range(1..=4), rng.gen_range(1..=8))
    }
    fn pair(rng: &mut ChaCha8Rng, s: &[usize]) -> Vec<Tensor> {
        vec![rand_tensor(rng, s), rand_tensor(rng, s)]
    }
    vec![
        ("add", Box::new(|r| { let (h, w, c) = dims(r); pair(r, &[h, w, c]) }), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", Box::new(|r| { let (h, w, c) = dims(r); pair(r, &[h, w, c]) }), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", Box::new(|r| { let (h, w, c) = dims(r); pair(r, &[h, w, c]) }), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c])] }), Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "add_bias",
            Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c]), rand_tensor(r, &[c])] }),
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        ),
        ("sigmoid", Box::new(|r| { let (h, w, c) = dims(r); vec![scaled(rand_tensor(r, &[h, w, c]), 3.0)] }), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("relu", Box::new(|r| { let (h, w, c) = dims(r); vec![away_from_zero(r, &[h, w, c])] }), Box::new(|t, v| Ok(t.relu(v[0])))),
        (
            "concat",
            Box::new(|r| { let (h, w, c) = dims(r); let c2 = r.gen_range(1..=8); vec![rand_tensor(r, &[h, w, c]), rand_tensor(r, &[h, w, c2])] }),
            Box::new(|t, v| t.concat(v[0], v[1])),
        ),
        (
            "conv2d",
            Box::new(|r| {
                let (h, w, c) = dims(r);
                let k = [1, 3, 5][r.gen_range(0..3)];
                let co = r.gen_range(1..=8);
                vec![rand_tensor(r, &[h, w, c]), rand_tensor(r, &[k, k, c, co]), rand_tensor(r, &[co])]
            }),
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
        ),
        ("global_avg_pool", Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c])] }), Box::new(|t, v| t.global_avg_pool(v[0]))),
        ("global_max_pool", Box::new(|r| { let (h, w, c) = dims(r); vec![distinct(r, &[h, w, c])] }), Box::new(|t, v| t.global_max_pool(v[0]))),
        ("channel_mean", Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c])] }), Box::new(|t, v| t.channel_mean(v[0]))),
        ("channel_max", Box::new(|r| { let (h, w, c) = dims(r); vec![distinct(r, &[h, w, c])] }), Box::new(|t, v| t.channel_max(v[0]))),
        (
            "matmul",
            Box::new(|r| { let (m, k, n) = dims(r); vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])] }),
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        ("transpose", Box::new(|r| { let (m, n, _) = dims(r); vec![rand_tensor(r, &[m, n])] }), Box::new(|t, v| t.transpose(v[0]))),
        ("softmax", Box::new(|r| { let (m, n, _) = dims(r); vec![scaled(rand_tensor(r, &[m, n]), 2.0)] }), Box::new(|t, v| t.softmax(v[0]))),
        (
            "broadcast_mul/channel",
            Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c]), rand_tensor(r, &[1, 1, c])] }),
            Box::new(|t, v| t.broadcast_mul(v[0], v[1])),
        ),
        (
            "broadcast_mul/spatial",
            Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c]), rand_tensor(r, &[h, w, 1])] }),
            Box::new(|t, v| t.broadcast_mul(v[0], v[1])),
        ),
        (
            "reshape",
            Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c])] }),
            Box::new(|t, v| { let n = t.shape(v[0]).iter().product::<usize>(); t.reshape(v[0], &[n]) }),
        ),
        ("sum", Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c])] }), Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", Box::new(|r| { let (h, w, c) = dims(r); vec![rand_tensor(r, &[h, w, c])] }), Box::new(|t, v| Ok(t.mean(v[0])))),
        ("avg_pool2", Box::new(|r| { let (h, w, c) = even(r); vec![rand_tensor(r, &[h, w, c])] }), Box::new(|t, v| t.avg_pool2(v[0]))),
        (
            "upsample2",
            Box::new(|r| { let (h, w, c) = even(r); vec![rand_tensor(r, &[h / 2, w / 2, c])] }),
            Box::new(|t, v| t.upsample2(v[0])),
        ),
        ("layer_norm", Box::new(|r| { let (m, n, _) = dims(r); vec![rand_tensor(r, &[m, n.max(2)])] }), Box::new(|t, v| t.layer_norm(v[0]))),
    ]
}

/// Loss ops take fixed targets and masks; their inputs are generated so the
/// L1 kink and empty masks are avoided.
fn loss_check(rng: &mut ChaCha8Rng, seed: u64, which: &str) -> Result<f64, String> {
    let (h, w, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let x = rand_tensor(rng, &[h, w, c]);
    let n = x.len();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    mask[rng.gen_range(0..n)] = true;
    let target: Vec<f64> = match which {
        "masked_l1" => x
            .data()
            .iter()
            .map(|v| v + if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.05..1.0))
            .collect(),
        _ => (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
    };
    let which = which.to_string();
    let build = move |t: &mut Tape, v: &[Var]| {
        if which == "masked_l1" {
            t.masked_l1(v[0], &target, &mask)
        } else {
            t.bce_with_logits(v[0], &target, &mask)
        }
    };
    grad_check(&[x], &build, seed)
}

fn store_tensors(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store.iter().map(|(k, v)| (k.clone(), v.clone())).unzip()
}

fn rebuild(names: &[String], values: &[Tensor]) -> ParamStore {
    let mut s = ParamStore::default();
    for (k, v) in names.iter().zip(values) {
        s.insert(k.clone(), v.clone());
    }
    s
}

const FD_STEP: f64 = 1e-3;

/// Gradient check of a block over its feature inputs and every parameter.
///
/// With `screen`, returns `None` when the point lies within one step of a
/// max or relu switch: there the central difference at `FD_STEP` disagrees
/// with the one at a quarter step, whatever the analytic gradient says.
fn block_check(
    screen: bool,
    features: Vec<Tensor>,
    store: &ParamStore,
    seed: u64,
    forward: impl Fn(&mut Tape, &Bound, Var, Var) -> sarcd_core::Result<Var>,
) -> Result<Option<f64>, String> {
    let (names, params) = store_tensors(store);
    let nf = features.len();
    let all: Vec<Tensor> = features.into_iter().chain(params).collect();
    let eval = |xs: &[Tensor], want: bool| -> sarcd_core::Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let a = tape.leaf(xs[0].clone());
        let b = tape.leaf(xs[1].clone());
        let bound = Bound::new(&mut tape, &rebuild(&names, &xs[nf..]), true);
        let out = forward(&mut tape, &bound, a, b)?;
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
        let probe = tape.constant(rand_tensor(&mut prng, tape.shape(out)));
        let weighted = tape.mul(out, probe)?;
        let loss = tape.sum(weighted);
        let value = tape.value(loss).item();
        if !want {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let pg = bound.gradients(&tape, &g);
        let mut grads = vec![g.get(a).unwrap().clone(), g.get(b).unwrap().clone()];
        grads.extend(names.iter().map(|k| pg.get(k).unwrap().clone()));
        Ok((value, grads))
    };
    let (_, analytic) = eval(&all, true).map_err(|e| e.to_string())?;
    let mut numeric = Vec::with_capacity(all.len());
    for k in 0..all.len() {
        let f = |t: &Tensor| {
            let mut xs = all.clone();
            xs[k] = t.clone();
            eval(&xs, false).unwrap().0
        };
        let coarse = finite_diff_grad(f, &all[k], FD_STEP);
        if screen && max_relative_error(&coarse, &finite_diff_grad(f, &all[k], FD_STEP / 4.0)) > 1e-4 {
            return Ok(None);
        }
        numeric.push(coarse);
    }
    Ok(Some(analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max(max_relative_error(a, n)))))
}

/// Run `check` on successive seeds until `want` of them are accepted.
fn over_seeds(
    want: usize,
    mut check: impl FnMut(u64) -> Result<Option<f64>, String>,
) -> Result<(f64, usize), String> {
    let (mut worst, mut accepted, mut skipped) = (0.0f64, 0, 0);
    let mut seed = 0;
    while accepted < want {
        if skipped > want {
            return Err(format!("{skipped} seeds straddle a non-differentiable point"));
        }
        match check(seed)? {
            Some(e) => {
                worst = worst.max(e);
                accepted += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    Ok((worst, skipped))
}

fn gradient_checks() -> Outcome {
    const SEEDS: u64 = 20;
    let mut report = Vec::new();
    let mut fail = Vec::new();
    let mut record = |name: &str, worst: f64| {
        if !(worst < 1e-3) {
            fail.push(format!("{name} {worst:.2e}"));
        }
        report.push((name.to_string(), worst));
    };
    for (name, gen, build) in op_cases() {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let inputs = gen(&mut rng);
            worst = worst.max(grad_check(&inputs, build.as_ref(), seed)?);
        }
        record(name, worst);
    }
    for name in ["masked_l1", "bce_with_logits"] {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            worst = worst.max(loss_check(&mut rng, seed, name)?);
        }
        record(name, worst);
    }

    let (worst, saeb_skipped) = over_seeds(SEEDS as usize, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let (c_m, c_r) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let block = Saeb { c_m, c_r, cfg: SaebConfig { reduction: 2, spatial_kernel: 3 } };
        let mut store = ParamStore::init(&block.params("s"), seed);
        // non-zero biases so every term of the block is exercised
        let names = store_tensors(&store).0;
        for k in names.iter().filter(|k| k.ends_with(".b")) {
            let t = store.get_mut(k).unwrap();
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let feats = vec![distinct(&mut rng, &[h, w, c_m]), distinct(&mut rng, &[h, w, c_r])];
        block_check(true, feats, &store, seed, |t, b, fm, fr| Saeb::forward(t, b, "s", fm, fr))
    })?;
    record("saeb_forward", worst);

    let (worst, _) = over_seeds(SEEDS as usize, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3000);
        let dim = rng.gen_range(2..=8);
        let afb = Afb { cfg: AfbConfig { modules: 1, dim, head_dim: rng.gen_range(1..=8) } };
        let store = ParamStore::init(&afb.params("a"), seed);
        let (n_i, n_r) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let feats = vec![rand_tensor(&mut rng, &[n_i, dim]), rand_tensor(&mut rng, &[n_r, dim])];
        block_check(false, feats, &store, seed, |t, b, fi, fr| afb.forward(t, b, "a", fi, fr))
    })?;
    record("afb_forward(N=1)", worst);

    let overall = report.iter().fold(0.0f64, |m, (_, v)| m.max(*v));
    if fail.is_empty() {
        Ok(format!(
            "{} ops/blocks x {SEEDS} seeds, worst relative error {overall:.2e} \
             (saeb seeds skipped as kink-straddling: {saeb_skipped})",
            report.len()
        ))
    } else {
        Err(fail.join(", "))
    }
}

// ---------------------------------------------------------------------------

fn structural_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5747);

    // zero-weight depth network is the identity on mono
    for seed in 0..10 {
        let size = [8, 16, 24, 32][seed % 4];
        let spec = SceneSpec { width: size, height: size, seed: seed as u64, ..Default::default() };
        let s = generate_scene(&spec).map_err(|e| e.to_string())?;
        let net = ToyMsgNet::new(ToyNetConfig::default()).map_err(|e| e.to_string())?;
        let er = EnhancedRadarDepth::new(s.radar.clone(), s.radar.clone()).map_err(|e| e.to_string())?;
        let out = net.forward(&net.zeros(), &s.mono, &er).map_err(|e| e.to_string())?;
        ensure(out.values() == s.mono.values(), || format!("seed {seed}: zero network is not the identity"))?;
    }

    for case in 0..100 {
        let (w, h) = (rng.gen_range(8..48), rng.gen_range(8..48));
        let n = rng.gen_range(1..15);
        let radar = sparse_radar(&mut rng, w, h, n);
        let mono = blocky_mono(&mut rng, w, h);
        let conn = if case % 2 == 0 { Connectivity::Four } else { Connectivity::Eight };

        // ROI grows with tau1
        let mut prev: Option<ValidMask> = None;
        for tau1 in [0.01, 0.05, 0.2, 0.5, 1.0, 5.0] {
            let p = EnhancementParams { tau1, connectivity: conn, max_radius: 16, ..Default::default() };
            let roi = structure_aware_dilate(&radar, &mono, &p).map_err(|e| e.to_string())?.roi.mask().clone();
            if let Some(prev) = &prev {
                ensure(prev.is_subset_of(&roi), || format!("case {case}: ROI shrank at tau1 {tau1}"))?;
            }
            prev = Some(roi);
        }

        // filtering twice equals filtering once
        let d = structure_aware_dilate(&radar, &mono, &EnhancementParams::default()).map_err(|e| e.to_string())?;
        let mask = ValidMask::from_bits(w, h, (0..w * h).map(|_| rng.gen_bool(0.8)).collect()).unwrap();
        let cv = (0..w * h).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
        let conf = ConfidenceMap::new(w, h, cv, mask).unwrap();
        let tau3 = rng.gen_range(0.05..0.95);
        let once = filter_by_confidence(&d.depth, &conf, tau3).map_err(|e| e.to_string())?;
        let twice = filter_by_confidence(&once, &conf, tau3).map_err(|e| e.to_string())?;
        ensure(once == twice, || format!("case {case}: filter not idempotent"))?;

        // rmse >= mae in every bucket
        let pred = DepthMap::from_fn(w, h, MapKind::Dense, |_, _| rng.gen_range(0.0..90.0));
        if let Ok(rep) = evaluate_buckets(&pred, &mono, &DEFAULT_RANGES) {
            for b in rep.buckets {
                ensure(b.rmse_mm + 1e-9 >= b.mae_mm, || format!("case {case}: rmse < mae"))?;
            }
        }

        // interpolation reproduces its nodes
        let sparse = DepthMap::from_fn(w, h, MapKind::Sparse, |_, _| {
            if rng.gen_bool(0.08) { rng.gen_range(1.0..80.0) } else { 0.0 }
        });
        if let Ok(dense) = scaffold_interpolate(&sparse) {
            for (r, c, v) in sparse.valid_iter() {
                ensure(dense.get(r, c) == v, || format!("case {case}: node ({r}, {c}) moved"))?;
            }
        }
    }
    Ok("zero-net identity (10), tau1 monotonicity, filter idempotence, rmse>=mae, node exactness (100 each)".into())
}

// ---------------------------------------------------------------------------

fn toy_descent() -> Outcome {
    let t0 = Instant::now();
    let seed = 7;
    let scene = generate_scene(&SceneSpec { seed, ..Default::default() }).map_err(|e| e.to_string())?;
    let params = EnhancementParams::default();
    let acc = scene.accumulated_lidar().map_err(|e| e.to_string())?;
    let int = scene.interpolated_lidar().map_err(|e| e.to_string())?;
    let dil = structure_aware_dilate(&scene.radar, &scene.mono, &params).map_err(|e| e.to_string())?;
    let targets = confidence_ground_truth(&dil.depth, &int, &dil.roi, params.tau2).map_err(|e| e.to_string())?;
    let cfg = ToyNetConfig::default();
    let train_cfg = TrainConfig::default();

    let rca = ToyRcaNet::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut wr = rca.init(seed);
    let cs = ConfidenceSample { image: scene.image.clone(), ddr: dil.depth.clone(), targets: targets.confidence };
    let conf_curve = train_rcanet(&rca, &mut wr, &cs, &train_cfg).map_err(|e| e.to_string())?;

    let conf = rca.forward(&wr, &scene.image, &dil.depth).map_err(|e| e.to_string())?;
    let filtered = filter_by_confidence(&dil.depth, &conf, params.tau3).map_err(|e| e.to_string())?;
    let er = assemble_enhanced(&scene.radar, &filtered).map_err(|e| e.to_string())?;
    let msg = ToyMsgNet::new(cfg).map_err(|e| e.to_string())?;
    let mut wm = msg.init(seed);
    let ds = DepthSample { mono: scene.mono.clone(), radar: er.clone(), acc, int, lambda: params.lambda };
    let depth_curve = train_msgnet(&msg, &mut wm, &ds, &train_cfg).map_err(|e| e.to_string())?;

    let pred = msg.forward(&wm, &scene.mono, &er).map_err(|e| e.to_string())?;
    let mae = evaluate(&pred, &scene.lidar_sparse, 80.0).map_err(|e| e.to_string())?.mae_mm;
    let mono_mae = evaluate(&scene.mono, &scene.lidar_sparse, 80.0).map_err(|e| e.to_string())?.mae_mm;
    let el = t0.elapsed();
    let msg = format!(
        "L_conf -{:.1}%, L_depth -{:.1}%, MAE {mae:.1} mm vs mono {mono_mae:.1} mm, {el:.1?}",
        100.0 * conf_curve.reduction(),
        100.0 * depth_curve.reduction()
    );
    ensure(
        conf_curve.reduction() >= 0.5 && depth_curve.reduction() >= 0.5 && mae < mono_mae && el < Duration::from_secs(300),
        || msg.clone(),
    )?;
    Ok(msg)
}

// ---------------------------------------------------------------------------

fn dilation_speed() -> Outcome {
    let spec = SceneSpec { width: 1600, height: 900, radar_points: 50, seed: 3, ..Default::default() };
    let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
    let params = EnhancementParams { tau1: 0.2, max_radius: 64, ..Default::default() };
    let mut times = Vec::new();
    let mut roi = 0;
    for _ in 0..7 {
        let t0 = Instant::now();
        let d = structure_aware_dilate_with(&scene.radar, &scene.mono, &params, Execution::Sequential)
            .map_err(|e| e.to_string())?;
        times.push(t0.elapsed());
        roi = d.stats.roi_pixels;
    }
    times.sort();
    let median = times[times.len() / 2];
    let msg = format!("900x1600, 50 points, single-threaded median {median:.2?} ({roi} ROI pixels)");
    ensure(median <= Duration::from_millis(500), || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------------------

fn filtering_helps() -> Outcome {
    let params = EnhancementParams::default();
    let (mut mae_dr, mut mae_fr, mut n_r, mut n_fr) = (0.0, 0.0, 0.0, 0.0);
    const SCENES: u64 = 20;
    let per_pixel_mae = |d: &DepthMap, truth: &DepthMap| -> f64 {
        let errs: Vec<f64> = d.valid_iter().map(|(r, c, v)| (f64::from(v) - f64::from(truth.get(r, c))).abs()).collect();
        errs.iter().sum::<f64>() / errs.len().max(1) as f64
    };
    for seed in 0..SCENES {
        let spec = SceneSpec { radar_sigma: 0.5, outlier_fraction: 0.2, seed, ..Default::default() };
        let s = generate_scene(&spec).map_err(|e| e.to_string())?;
        let int = s.interpolated_lidar().map_err(|e| e.to_string())?;
        let dil = structure_aware_dilate(&s.radar, &s.mono, &params).map_err(|e| e.to_string())?;
        let t = confidence_ground_truth(&dil.depth, &int, &dil.roi, params.tau2).map_err(|e| e.to_string())?;
        let dfr = filter_by_confidence(&dil.depth, &t.confidence, params.tau3).map_err(|e| e.to_string())?;
        mae_dr += per_pixel_mae(&dil.depth, &s.truth);
        mae_fr += per_pixel_mae(&dfr, &s.truth);
        n_r += s.radar.valid_count() as f64;
        n_fr += dfr.valid_count() as f64;
    }
    let k = SCENES as f64;
    let (mae_dr, mae_fr, n_r, n_fr) = (mae_dr / k, mae_fr / k, n_r / k, n_fr / k);
    let msg = format!(
        "MAE filtered {:.3} m vs dilated {:.3} m; valid {n_fr:.0} vs radar {n_r:.0} ({:.1}x)",
        mae_fr,
        mae_dr,
        n_fr / n_r
    );
    ensure(mae_fr < mae_dr && n_fr >= 5.0 * n_r, || msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("dilation oracle equivalence", dilation_oracle),
        ("loss and metric fidelity", formula_fidelity),
        ("gradient checks", gradient_checks),
        ("structural identities", structural_identities),
        ("toy learning descent", toy_descent),
        ("dilation runtime", dilation_speed),
        ("filtering improves radar", filtering_helps),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
