//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use air_core::analysis::{spearman, SyntheticFamily, SYNTHETIC_AMPLITUDES};
use air_core::embedding::{EncoderBackend, Token};
use air_core::engine::{anchor_schedule, list_checkpoints, AdaptationConfig, Backends, RunState, Trainer};
use air_core::eval::{frechet_distance, intra_lpips, kmedoids, misalignment_vs_ground_truth, GaussianStats};
use air_core::losses::{direction_loss, loss_gradient, LossGradient, Wrt};
use air_core::prompt::learn_anchor_prompt;
use air_core::world::{World, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn world(seed: u64) -> World {
    World::build(WorldConfig {
        seed,
        ..WorldConfig::default()
    })
    .expect("default world builds")
}

fn backends(w: &World) -> Backends<'_> {
    Backends {
        encoder: &w.encoder,
        source: &w.source,
    }
}

fn run_to_end(trainer: &Trainer<'_>, dir: Option<&Path>) -> RunState {
    let state = trainer.initial_state(dir).expect("initial state");
    trainer.run(state).expect("run completes")
}

// 1 ---------------------------------------------------------------------

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for d in [2, 8, 64] {
        for _ in 0..100 {
            let x = gaussian_vec(&mut rng, d);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let same = direction_loss(std::slice::from_ref(&x), &x)
                .map_err(|e| e.to_string())?
                .value;
            let anti = direction_loss(std::slice::from_ref(&x), &neg)
                .map_err(|e| e.to_string())?
                .value;
            worst = worst.max(same.abs()).max((anti - 2.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("300 vectors, max deviation {worst:.1e}"))
}

// 2 ---------------------------------------------------------------------

const FD_H: f64 = 1e-4;

/// `|analytic - fd|_inf / |fd|_inf`.
fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let num = analytic.iter().zip(fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
    let den = fd.iter().map(|f| f.abs()).fold(0.0, f64::max).max(1e-12);
    num / den
}

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[k] += FD_H;
            m[k] -= FD_H;
            (f(&p) - f(&m)) / (2.0 * FD_H)
        })
        .collect()
}

/// Directional loss over a batch of image offsets against a fixed text offset.
fn direction_gradient_instance(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let batch = 2 + (seed as usize % 3);
    let offsets: Vec<Vec<f64>> = (0..batch).map(|_| gaussian_vec(&mut rng, d)).collect();
    let text = gaussian_vec(&mut rng, d);

    let LossGradient::ImageOffsets(gi) =
        loss_gradient(&offsets, &text, Wrt::ImageOffsets).map_err(|e| e.to_string())?
    else {
        return Err("wrong gradient variant".into());
    };
    let flat: Vec<f64> = offsets.concat();
    let fd = central_diff(&flat, |x| {
        let rows: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
        direction_loss(&rows, &text).unwrap().value
    });
    let e1 = rel_err(&gi.concat(), &fd);

    let LossGradient::TextOffset(gt) = loss_gradient(&offsets, &text, Wrt::TextOffset).map_err(|e| e.to_string())?
    else {
        return Err("wrong gradient variant".into());
    };
    let fd = central_diff(&text, |x| direction_loss(&offsets, x).unwrap().value);
    Ok(e1.max(rel_err(&gt, &fd)))
}

/// Prompt alignment loss `1 - cos(E_T(P) - E_T(P_prev), dI)` differentiated
/// with respect to the context tokens of `P` through the twisted toy encoder.
fn alignment_gradient_instance(seed: u64) -> Result<f64, String> {
    let w = world(seed);
    let enc = &w.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let d = enc.token_dim();
    let m = 4;
    let ctx: Vec<Token> = (0..m).map(|_| gaussian_vec(&mut rng, d)).collect();
    let label = gaussian_vec(&mut rng, d);
    let prev: Vec<Token> = (0..=m).map(|_| gaussian_vec(&mut rng, d)).collect();
    let prev_emb = enc.encode_tokens(&prev).map_err(|e| e.to_string())?;
    let image_offset = gaussian_vec(&mut rng, enc.dim());

    let loss = |flat: &[f64]| -> f64 {
        let mut seq: Vec<Token> = flat.chunks(d).map(<[f64]>::to_vec).collect();
        seq.push(label.clone());
        let delta: Vec<f64> = enc
            .encode_tokens(&seq)
            .unwrap()
            .iter()
            .zip(&prev_emb)
            .map(|(a, b)| a - b)
            .collect();
        direction_loss(&[delta], &image_offset).unwrap().value
    };
    let flat = ctx.concat();
    let mut seq = ctx.clone();
    seq.push(label.clone());
    let delta: Vec<f64> = enc
        .encode_tokens(&seq)
        .map_err(|e| e.to_string())?
        .iter()
        .zip(&prev_emb)
        .map(|(a, b)| a - b)
        .collect();
    let LossGradient::ImageOffsets(g) =
        loss_gradient(&[delta], &image_offset, Wrt::ImageOffsets).map_err(|e| e.to_string())?
    else {
        return Err("wrong gradient variant".into());
    };
    let tokens = enc.tokens_vjp(&seq, &g[0]).map_err(|e| e.to_string())?;
    let analytic = tokens[..m].concat();
    Ok(rel_err(&analytic, &central_diff(&flat, loss)))
}

fn gradient_oracle() -> Outcome {
    let mut dir_worst: f64 = 0.0;
    let mut align_worst: f64 = 0.0;
    for seed in 0..10 {
        dir_worst = dir_worst.max(direction_gradient_instance(seed)?);
        align_worst = align_worst.max(alignment_gradient_instance(seed)?);
    }
    ensure(dir_worst < 1e-4 && align_worst < 1e-4, || {
        format!("max relative error direction {dir_worst:e}, alignment {align_worst:e}")
    })?;
    Ok(format!(
        "10+10 instances, max relative error direction {dir_worst:.1e}, alignment {align_worst:.1e}"
    ))
}

// 3 ---------------------------------------------------------------------

fn schedule_trace() -> Outcome {
    let w = world(0);
    let cfg = AdaptationConfig {
        t_int: 2,
        t_thresh: 5,
        n_pairs: 64,
        k_iter: 20,
        ..w.adaptation_config(10)
    };
    let trainer = Trainer::new(cfg, backends(&w)).map_err(|e| e.to_string())?;
    let mut state = trainer.initial_state(None).map_err(|e| e.to_string())?;
    let mut anchors = BTreeSet::new();
    let mut adaptive = BTreeSet::new();
    while state.t < 10 {
        let r = trainer.step(&mut state).map_err(|e| e.to_string())?;
        if r.anchor_sampled.is_some() {
            anchors.insert(r.t);
        }
        if r.loss_adaptive.is_some() {
            adaptive.insert(r.t);
        }
    }
    ensure(anchors == BTreeSet::from([2, 4, 6, 8]), || {
        format!("anchors {anchors:?}")
    })?;
    ensure(adaptive == BTreeSet::from([6, 7, 8, 9]), || {
        format!("adaptive {adaptive:?}")
    })?;

    let big = AdaptationConfig {
        t_int: 200,
        t_thresh: 1000,
        ..AdaptationConfig::with_t_adapt(2000)
    };
    let s = anchor_schedule(&big).map_err(|e| e.to_string())?;
    let expected: Vec<usize> = (1..=9).map(|k| 200 * k).collect();
    ensure(s.anchors == expected, || {
        format!("(2000, 200, 1000) anchors {:?}", s.anchors)
    })?;
    Ok("traced anchors {2,4,6,8}, adaptive {6,7,8,9}; (2000,200,1000) anchors 200..1800".into())
}

// 4 ---------------------------------------------------------------------

fn label_regularizer() -> Outcome {
    let w = world(2);
    let cfg = AdaptationConfig {
        n_pairs: 200,
        ..w.adaptation_config(100)
    };
    let trainer = Trainer::new(cfg.clone(), backends(&w)).map_err(|e| e.to_string())?;
    let state = run_to_end(&trainer, None);
    let (ys, yt) = trainer.labels();
    for a in &state.anchors {
        let p = a.t_i as f64 / cfg.t_adapt as f64;
        let expected: Vec<f64> = ys.iter().zip(yt).map(|(s, t)| (1.0 - p) * s + p * t).collect();
        let same = a
            .prompt
            .label
            .iter()
            .zip(&expected)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || {
            format!("anchor {} label differs from the interpolation", a.index)
        })?;
    }
    ensure(!state.anchors.is_empty(), || "no anchors in the traced run".into())?;

    // Prompt-learning steps move the context tokens and never the label.
    let a = state.anchors.last().unwrap();
    let label: Token = a.prompt.label.iter().map(|v| v + 0.01).collect();
    let out = learn_anchor_prompt(
        a.generator.as_ref(),
        state.generator.as_ref(),
        &a.prompt,
        label.clone(),
        a.index + 1,
        &cfg.prompt_config(),
        &trainer.prompt_latents(a.t_i + 1),
        &w.encoder,
    )
    .map_err(|e| e.to_string())?;
    let untouched = out
        .prompt
        .label
        .iter()
        .zip(&label)
        .all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(untouched, || "label changed during prompt learning".into())?;
    ensure(out.prompt.tokens != a.prompt.tokens, || {
        "context tokens did not move".into()
    })?;
    Ok(format!(
        "{} anchors bit-exact; label fixed across {} prompt steps",
        state.anchors.len(),
        cfg.k_iter
    ))
}

// 5 ---------------------------------------------------------------------

fn misalignment_correlation() -> Outcome {
    let mut rhos = Vec::new();
    for amp in SYNTHETIC_AMPLITUDES {
        let family = SyntheticFamily {
            amplitude: amp,
            ..SyntheticFamily::default()
        };
        let rho = family
            .study(2000, 5)
            .map_err(|e| e.to_string())?
            .rho
            .ok_or("rho undefined")?;
        rhos.push(rho);
    }
    let desc = format!(
        "rho at amplitudes {:?}: {:?}",
        SYNTHETIC_AMPLITUDES,
        rhos.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    ensure(rhos.iter().all(|&r| r >= 0.8), || desc.clone())?;
    ensure(rhos.windows(2).all(|w| w[1] > w[0]), || format!("not monotone: {desc}"))?;
    Ok(desc)
}

// 6 and 7 ---------------------------------------------------------------

#[derive(Clone)]
struct PairedRun {
    air_distance: f64,
    baseline_distance: f64,
    air_misalignment: f64,
    source_misalignment: f64,
}

const EVAL_SAMPLES: usize = 1000;

fn paired_run(seed: u64) -> Result<PairedRun, String> {
    let w = world(seed);
    let cfg = w.adaptation_config(300);
    let air_trainer = Trainer::new(cfg.clone(), backends(&w)).map_err(|e| e.to_string())?;
    let air = run_to_end(&air_trainer, None);
    let base_cfg = AdaptationConfig {
        baseline_mode: true,
        ..cfg
    };
    let base_trainer = Trainer::new(base_cfg, backends(&w)).map_err(|e| e.to_string())?;
    let base = run_to_end(&base_trainer, None);

    let eval_seed = 0xe7a1 + seed;
    let air_distance = w
        .distance_to_target(air.generator.as_ref(), EVAL_SAMPLES, eval_seed)
        .map_err(|e| e.to_string())?;
    let baseline_distance = w
        .distance_to_target(base.generator.as_ref(), EVAL_SAMPLES, eval_seed)
        .map_err(|e| e.to_string())?;

    let src = w
        .embed_samples(&w.source, EVAL_SAMPLES, eval_seed)
        .map_err(|e| e.to_string())?;
    let real = w
        .embed_samples(&w.target, EVAL_SAMPLES, eval_seed ^ 1)
        .map_err(|e| e.to_string())?;
    let last = air.latest_anchor().ok_or("AIR run sampled no anchor")?;
    let refined = air_trainer.anchor_text_offset(last).map_err(|e| e.to_string())?;
    let air_misalignment = misalignment_vs_ground_truth(&refined, &src, &real).map_err(|e| e.to_string())?;
    let source_misalignment =
        misalignment_vs_ground_truth(air_trainer.source_text_offset(), &src, &real).map_err(|e| e.to_string())?;
    Ok(PairedRun {
        air_distance,
        baseline_distance,
        air_misalignment,
        source_misalignment,
    })
}

fn air_beats_baseline(runs: &[PairedRun]) -> Outcome {
    let no_worse = runs.iter().all(|r| r.air_distance <= r.baseline_distance);
    let strict = runs.iter().filter(|r| r.air_distance < r.baseline_distance).count();
    let desc = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.air_distance, r.baseline_distance))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(no_worse && strict >= 4, || format!("AIR/baseline distances {desc}"))?;
    Ok(format!("AIR/baseline clip distance per seed {desc}; strict {strict}/5"))
}

fn alleviation(runs: &[PairedRun]) -> Outcome {
    let better = runs
        .iter()
        .filter(|r| r.air_misalignment < r.source_misalignment)
        .count();
    let desc = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.air_misalignment, r.source_misalignment))
        .collect::<Vec<_>>()
        .join(" ");
    ensure(better == runs.len(), || {
        format!("last-anchor/source misalignment {desc}")
    })?;
    Ok(format!("last-anchor/source misalignment per seed {desc}"))
}

// 8 ---------------------------------------------------------------------

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for mut rest in combinations(n, k - 1) {
            if rest.iter().all(|&r| r > first) {
                rest.insert(0, first);
                out.push(rest);
            }
        }
    }
    out
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for inst in 0..50 {
        let n = rng.random_range(2..=8usize);
        let k = rng.random_range(1..=n.min(3));
        let pts: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, 2)).collect();
        let d: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| {
                pts.iter()
                    .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                    .collect()
            })
            .collect();
        let brute = combinations(n, k)
            .iter()
            .map(|m| {
                (0..n)
                    .map(|i| m.iter().map(|&j| d[i][j]).fold(f64::INFINITY, f64::min))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        let got = kmedoids(&d, k, inst).map_err(|e| e.to_string())?.cost;
        ensure(got == brute, || {
            format!("instance {inst} (n={n}, K={k}): PAM {got} vs exhaustive {brute}")
        })?;
    }
    // Points 0, 1, 3, 7: pairwise distances 1, 3, 7, 2, 6, 4.
    let line = [0.0f64, 1.0, 3.0, 7.0];
    let v = intra_lpips(&line, 1, |a: &f64, b: &f64| (a - b).abs(), 0).map_err(|e| e.to_string())?;
    let hand = (1.0 + 3.0 + 7.0 + 2.0 + 6.0 + 4.0) / 6.0;
    ensure(v == hand, || format!("collinear intra_lpips {v} vs {hand}"))?;
    Ok(format!("50 instances exact; collinear case {v:.6} = 23/6"))
}

// 9 ---------------------------------------------------------------------

/// Rank = number strictly below + (number equal + 1) / 2.
fn naive_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|x| {
            let below = xs.iter().filter(|y| *y < x).count() as f64;
            let equal = xs.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

fn spearman_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut with_ties = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=50usize);
        // Small integer support forces ties.
        let levels = rng.random_range(2..=12i32);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        if BTreeSet::from_iter(xs.iter().map(|v| *v as i64)).len() < n {
            with_ties += 1;
        }
        let expected = naive_pearson(&naive_ranks(&xs), &naive_ranks(&ys));
        match (spearman(&xs, &ys), expected) {
            (Ok(r), Some(e)) => worst = worst.max((r - e).abs()),
            (Err(_), None) => {}
            (got, want) => return Err(format!("spearman {got:?} vs oracle {want:?}")),
        }
    }
    ensure(worst <= 1e-10, || format!("max abs difference {worst:e}"))?;
    Ok(format!(
        "100 lists ({with_ties} with ties), max abs difference {worst:.1e}"
    ))
}

// 10 --------------------------------------------------------------------

fn frechet_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    let mut self_worst: f64 = 0.0;
    for i in 0..50 {
        let d = if i < 25 { 1 } else { rng.random_range(2..=6usize) };
        let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
            let mu = gaussian_vec(rng, d);
            let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..4.0)).collect();
            (mu, var)
        };
        let (ma, va) = draw(&mut rng);
        let (mb, vb) = draw(&mut rng);
        let diag = |v: &[f64]| -> Vec<Vec<f64>> {
            (0..d)
                .map(|r| (0..d).map(|c| if r == c { v[r] } else { 0.0 }).collect())
                .collect()
        };
        let a = GaussianStats::new(ma.clone(), diag(&va)).map_err(|e| e.to_string())?;
        let b = GaussianStats::new(mb.clone(), diag(&vb)).map_err(|e| e.to_string())?;
        let closed: f64 = (0..d)
            .map(|k| (ma[k] - mb[k]).powi(2) + (va[k].sqrt() - vb[k].sqrt()).powi(2))
            .sum();
        let got = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - closed).abs());
        self_worst = self_worst.max(frechet_distance(&a, &a).map_err(|e| e.to_string())?.abs());
    }
    ensure(worst <= 1e-8 && self_worst <= 1e-8, || {
        format!("max deviation {worst:e}, self distance {self_worst:e}")
    })?;
    Ok(format!(
        "25 1-D + 25 diagonal, max deviation {worst:.1e}; max |frechet(a,a)| {self_worst:.1e}"
    ))
}

// 11 --------------------------------------------------------------------

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

fn determinism_and_resume() -> Outcome {
    let w = world(11);
    let cfg = AdaptationConfig {
        n_pairs: 200,
        ..w.adaptation_config(60)
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trainer = Trainer::new(cfg, backends(&w)).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_to_end(&trainer, Some(&a));
    run_to_end(&trainer, Some(&b));
    let history = fs::read(a.join("history.csv")).map_err(|e| e.to_string())?;
    ensure(
        history == fs::read(b.join("history.csv")).map_err(|e| e.to_string())?,
        || "history.csv differs between identical runs".into(),
    )?;

    let ckpts = list_checkpoints(&a).map_err(|e| e.to_string())?;
    let mut resumed = 0;
    for (i, ckpt) in ckpts.iter().enumerate() {
        let dir = tmp.path().join(format!("resume_{i}"));
        copy_dir(&a, &dir).map_err(|e| e.to_string())?;
        let state = trainer
            .resume(&dir.join("checkpoints").join(ckpt.file_name().unwrap()))
            .map_err(|e| e.to_string())?;
        if state.t >= trainer.config().t_adapt {
            continue;
        }
        trainer.run(state).map_err(|e| e.to_string())?;
        let again = fs::read(dir.join("history.csv")).map_err(|e| e.to_string())?;
        ensure(again == history, || format!("resume from {} diverged", ckpt.display()))?;
        resumed += 1;
    }
    ensure(resumed > 0, || "no anchor checkpoint to resume from".into())?;
    Ok(format!(
        "identical history.csv; {resumed} anchor checkpoints resumed bit-exactly"
    ))
}

// 12 --------------------------------------------------------------------

fn prompt_validity() -> Outcome {
    let w = world(12);
    let cfg = w.adaptation_config(300);
    let trainer = Trainer::new(cfg, backends(&w)).map_err(|e| e.to_string())?;
    let state = run_to_end(&trainer, None);
    let mut worst_margin = f64::INFINITY;
    for a in &state.anchors {
        let emb: Vec<Vec<f64>> = trainer
            .prompt_latents(a.t_i)
            .iter()
            .map(|z| w.encoder.encode_image(&a.generator.generate(z)?))
            .collect::<air_core::Result<_>>()
            .map_err(|e| e.to_string())?;
        let text = a.prompt.encode(&w.encoder).map_err(|e| e.to_string())?;
        for (k, &x) in text.iter().enumerate() {
            let lo = emb.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
            let hi = emb.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
            // Box scaled by 1.1 about its center.
            let pad = 0.05 * (hi - lo);
            let margin = (x - (lo - pad)).min((hi + pad) - x);
            worst_margin = worst_margin.min(margin);
            ensure(margin >= 0.0, || {
                format!(
                    "anchor {} coordinate {k}: {x:.4} outside [{:.4}, {:.4}]",
                    a.index,
                    lo - pad,
                    hi + pad
                )
            })?;
        }
    }
    ensure(!state.anchors.is_empty(), || "no anchors".into())?;
    Ok(format!(
        "{} anchors inside their boxes, smallest margin {worst_margin:.3}",
        state.anchors.len()
    ))
}

fn main() {
    let start = Instant::now();
    let paired: Result<Vec<PairedRun>, String> = (0..5).map(paired_run).collect();
    let paired_time = start.elapsed();
    let criteria: Vec<Criterion> = vec![
        (1, "loss identities", Box::new(loss_identities)),
        (2, "gradient oracle", Box::new(gradient_oracle)),
        (3, "schedule trace", Box::new(schedule_trace)),
        (4, "label regularizer", Box::new(label_regularizer)),
        (
            5,
            "misalignment-distance correlation",
            Box::new(misalignment_correlation),
        ),
        (
            6,
            "AIR beats baseline",
            Box::new(|| paired.clone().and_then(|r| air_beats_baseline(&r))),
        ),
        (
            7,
            "misalignment alleviation",
            Box::new(|| paired.clone().and_then(|r| alleviation(&r))),
        ),
        (8, "clustering oracle", Box::new(clustering_oracle)),
        (9, "spearman oracle", Box::new(spearman_oracle)),
        (10, "frechet oracle", Box::new(frechet_oracle)),
        (11, "determinism and resume", Box::new(determinism_and_resume)),
        (12, "prompt validity", Box::new(prompt_validity)),
    ];
    let mut failed = 0;
    for (id, name, check) in &criteria {
        let t0 = Instant::now();
        let outcome = check();
        let mut secs = t0.elapsed().as_secs_f64();
        if *id == 6 {
            secs += paired_time.as_secs_f64();
        }
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
