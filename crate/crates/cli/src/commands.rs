use std::fs;
use std::path::{Path, PathBuf};

use air_core::analysis::{
    augmentation_csv, evaluate_pairs, prompt_augmentation_study, render_template, run_misalignment_study, write_study,
    ConceptDataset, StudyConfig, SyntheticFamily, DEFAULT_TEMPLATE,
};
use air_core::embedding::{cache_load, EmbeddingVector, EncoderBackend, ToyBackend};
use air_core::engine::{list_checkpoints, run_adaptation, AdaptationConfig, Backends, Generator, RunState, Trainer};
use air_core::eval::{
    clip_distance, concept_shift_curve, curve_csv, frechet_distance, intra_lpips, misalignment_vs_ground_truth,
    write_reports, DistanceReport, GaussianStats, ShiftMetric,
};
use air_core::world::{World, WorldConfig};
use air_core::AirError;

use crate::config::parse_config;
use crate::{CliError, Command, Common, ResolvedConfig, CACHE_ENV};

type Result<T> = std::result::Result<T, CliError>;

// Latent streams for evaluation samples, kept apart from training streams.
const EVAL_STREAM: u64 = 0xe7a1_0000;
const REF_STREAM: u64 = 0x7ef0_0000;

const TOKEN_DIM: usize = 16;

const STUDY_TEMPLATES: [&str; 4] = [
    "a photo of a {}",
    "a {}",
    "a picture of a {}",
    "a close-up photo of a {}",
];

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Analyze {
            common,
            dataset,
            pairs,
            template,
        } => analyze(&common, &dataset, pairs, &template),
        Command::Adapt { common, baseline } => adapt(&common, baseline),
        Command::Evaluate {
            common,
            run,
            samples,
            k,
        } => evaluate(&common, &run, samples, k),
        Command::PromptStudy {
            common,
            templates,
            samples,
        } => prompt_study(&common, templates, samples),
        Command::Report { common, run, samples } => report(&common, &run, samples),
    }
}

fn resolve(common: &Common, fallback_config: Option<&Path>) -> Result<ResolvedConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(b) = &common.backend {
        overrides.push(format!("backend=\"{b}\""));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let path = common.config.as_deref().or(fallback_config);
    parse_config(path, &overrides)
}

fn out_dir(common: &Common, default: Option<&Path>) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| default.map(Path::to_path_buf))
        .ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn world_for(cfg: &AdaptationConfig) -> Result<World> {
    Ok(World::build(WorldConfig {
        seed: cfg.seed,
        source_text: cfg.source_text.clone(),
        target_text: cfg.target_text.clone(),
        ..WorldConfig::default()
    })?)
}

fn analyze(common: &Common, dataset: &str, pairs: usize, template: &str) -> Result<()> {
    let resolved = resolve(common, None)?;
    let out = out_dir(common, None)?;
    resolved.write_snapshot(&out.join("analyze.config.json"))?;
    let seed = resolved.adaptation.seed;
    let study = StudyConfig {
        dataset: dataset.to_string(),
        n_pairs: pairs,
        seed,
        templates: vec![template.to_string()],
        ..StudyConfig::default()
    };
    study.validate()?;

    let (outcome, encoder) = if dataset == "synthetic" {
        let family = SyntheticFamily::default();
        let records = family.pairs(pairs, seed)?;
        let refs: Vec<_> = records.iter().map(|(a, b)| (a, b)).collect();
        (evaluate_pairs(&refs)?, "synthetic".to_string())
    } else {
        let dir = std::env::var_os(CACHE_ENV).map(PathBuf::from).ok_or_else(|| {
            CliError::Usage(format!(
                "dataset `{dataset}` needs {CACHE_ENV} to point at a cache directory"
            ))
        })?;
        let cache = cache_load(&dir.join(format!("{dataset}.bin")))?;
        let encoder = ToyBackend::new(seed, cache.dim(), cache.dim(), TOKEN_DIM);
        let data = ConceptDataset::from_cache(dataset, &cache, template, &encoder)?;
        (run_misalignment_study(&study, &data)?, encoder.name().to_string())
    };
    write_study(&out, &outcome, &study, &encoder)?;
    match outcome.rho {
        Some(rho) => eprintln!("{} pairs, spearman rho {rho:.4}", outcome.records.len()),
        None => eprintln!("{} pairs, spearman rho undefined", outcome.records.len()),
    }
    Ok(())
}

fn adapt(common: &Common, baseline: bool) -> Result<()> {
    let mut resolved = resolve(common, None)?;
    if baseline {
        resolved.adaptation.baseline_mode = true;
    }
    let out = out_dir(common, None)?;
    resolved.write_snapshot(&out.join("config.json"))?;
    let cfg = &resolved.adaptation;
    let world = world_for(cfg)?;
    let backends = Backends {
        encoder: &world.encoder,
        source: &world.source,
    };
    let state = run_adaptation(cfg, backends, Some(&out))?;
    let d = world.distance_to_target(state.generator.as_ref(), 200, cfg.seed ^ EVAL_STREAM)?;
    eprintln!(
        "{} iterations, {} anchors, distance to target {d:.4}",
        state.t,
        state.anchors.len()
    );
    Ok(())
}

/// Final state of a run directory together with its world.
fn load_run(resolved: &ResolvedConfig, run: &Path) -> Result<(World, Vec<PathBuf>)> {
    let world = world_for(&resolved.adaptation)?;
    let ckpts = list_checkpoints(run)?;
    if ckpts.is_empty() {
        return Err(CliError::Runtime(AirError::Checkpoint(format!(
            "no checkpoints under {}",
            run.display()
        ))));
    }
    Ok((world, ckpts))
}

fn resume(trainer: &Trainer<'_>, path: &Path) -> Result<RunState> {
    Ok(trainer.resume(path)?)
}

fn final_offset(trainer: &Trainer<'_>, state: &RunState) -> Result<Vec<f64>> {
    Ok(match state.latest_anchor() {
        Some(a) => trainer.anchor_text_offset(a)?,
        None => trainer.source_text_offset().to_vec(),
    })
}

fn run_id(run: &Path) -> String {
    run.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into())
}

fn evaluate(common: &Common, run: &Path, samples: usize, k: usize) -> Result<()> {
    let resolved = resolve(common, Some(&run.join("config.json")))?;
    let out = out_dir(common, Some(run))?;
    resolved.write_snapshot(&out.join("evaluate.config.json"))?;
    if samples < 2 {
        return Err(CliError::Usage("--samples must be >= 2".into()));
    }
    let cfg = &resolved.adaptation;
    let (world, ckpts) = load_run(&resolved, run)?;
    let trainer = Trainer::new(
        cfg.clone(),
        Backends {
            encoder: &world.encoder,
            source: &world.source,
        },
    )?;
    let state = resume(&trainer, ckpts.last().expect("non-empty"))?;
    let gen: &dyn Generator = state.generator.as_ref();

    let gen_emb = world.embed_samples(gen, samples, cfg.seed ^ EVAL_STREAM)?;
    let ref_emb = world.embed_samples(&world.target, samples, cfg.seed ^ REF_STREAM)?;
    let src_emb = world.embed_samples(&world.source, samples, cfg.seed ^ EVAL_STREAM)?;
    let encoder = world.encoder.name().to_string();
    let report = |metric: &str, value: f64, enc: &str| DistanceReport {
        metric: metric.into(),
        value,
        n_generated: samples,
        n_reference: samples,
        encoder: enc.into(),
    };

    let images = world.generate_samples(gen, samples, cfg.seed ^ EVAL_STREAM)?;
    let euclid = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let reports = vec![
        report("clip_distance", clip_distance(&gen_emb, &ref_emb)?, &encoder),
        report(
            "frechet_distance",
            frechet_distance(
                &GaussianStats::from_samples(&gen_emb)?,
                &GaussianStats::from_samples(&ref_emb)?,
            )?,
            &encoder,
        ),
        report(
            "intra_lpips",
            intra_lpips(&images, k.min(samples), euclid, cfg.seed)?,
            "euclidean",
        ),
        report(
            "misalignment_vs_ground_truth",
            misalignment_vs_ground_truth(&final_offset(&trainer, &state)?, &src_emb, &ref_emb)?,
            &encoder,
        ),
    ];
    write_reports(&out.join("metrics.csv"), &reports, &run_id(run))?;
    for r in &reports {
        eprintln!("{:<30} {:.6}", r.metric, r.value);
    }
    Ok(())
}

fn prompt_study(common: &Common, templates: Vec<String>, samples: usize) -> Result<()> {
    let resolved = resolve(common, None)?;
    let out = out_dir(common, None)?;
    resolved.write_snapshot(&out.join("prompt-study.config.json"))?;
    let cfg = &resolved.adaptation;
    let world = world_for(cfg)?;
    let templates = if templates.is_empty() {
        STUDY_TEMPLATES.iter().map(|s| s.to_string()).collect()
    } else {
        templates
    };
    let embed = |g: &dyn Generator, seed: u64| -> Result<Vec<EmbeddingVector>> {
        world
            .embed_samples(g, samples, seed)?
            .iter()
            .map(|v| EmbeddingVector::from_f64(v))
            .collect::<air_core::Result<Vec<_>>>()
            .map_err(Into::into)
    };
    let alpha = embed(&world.source, cfg.seed ^ EVAL_STREAM)?;
    let beta = embed(&world.target, cfg.seed ^ REF_STREAM)?;
    let source_text = render_template(DEFAULT_TEMPLATE, &cfg.source_text);
    let rows = prompt_augmentation_study(
        &source_text,
        &cfg.target_text,
        &templates,
        &alpha,
        &beta,
        &world.encoder,
    )?;
    fs::write(out.join("augmentation.csv"), augmentation_csv(&rows)?)?;
    Ok(())
}

fn report(common: &Common, run: &Path, samples: usize) -> Result<()> {
    let resolved = resolve(common, Some(&run.join("config.json")))?;
    let out = out_dir(common, Some(run))?;
    resolved.write_snapshot(&out.join("report.config.json"))?;
    if samples < 2 {
        return Err(CliError::Usage("--samples must be >= 2".into()));
    }
    let cfg = &resolved.adaptation;
    let (world, ckpts) = load_run(&resolved, run)?;
    let trainer = Trainer::new(
        cfg.clone(),
        Backends {
            encoder: &world.encoder,
            source: &world.source,
        },
    )?;
    let seed = cfg.seed ^ EVAL_STREAM;
    let reference = world.embed_samples(&world.target, samples, cfg.seed ^ REF_STREAM)?;
    let src_emb = world.embed_samples(&world.source, samples, seed)?;

    let mut points = Vec::new();
    let mut last = None;
    for path in &ckpts {
        let state = resume(&trainer, path)?;
        points.push((state.t, world.embed_samples(state.generator.as_ref(), samples, seed)?));
        last = Some(state);
    }
    for metric in [ShiftMetric::Clip, ShiftMetric::Frechet] {
        let series = concept_shift_curve(&points, &reference, metric)?;
        let name = match metric {
            ShiftMetric::Clip => "shift_clip.csv",
            ShiftMetric::Frechet => "shift_frechet.csv",
        };
        fs::write(out.join(name), curve_csv(&series, metric)?)?;
    }

    let state = last.expect("at least one checkpoint");
    let mut lines = vec!["offset,t,misalignment,angle_deg".to_string()];
    let source = trainer.source_text_offset().to_vec();
    let mut offsets = vec![("source".to_string(), 0, source)];
    for a in &state.anchors {
        offsets.push((format!("anchor_{}", a.index), a.t_i, trainer.anchor_text_offset(a)?));
    }
    for (name, t, off) in offsets {
        let m = misalignment_vs_ground_truth(&off, &src_emb, &reference)?;
        lines.push(format!("{name},{t},{m},{}", world.angle_to_truth(&off)?));
    }
    lines.push(String::new());
    fs::write(out.join("alleviation.csv"), lines.join("\n"))?;
    Ok(())
}
