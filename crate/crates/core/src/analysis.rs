//! Offset-misalignment study: concept distance, offset misalignment, pair
//! sampling, rank correlation and the prompt-augmentation table.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_distance, mean_rows, norm, sub, EmbeddingCache, EmbeddingVector, EncoderBackend};
use crate::error::{AirError, Result};

pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";
pub const DEFAULT_MIN_IMAGES: usize = 10;

pub const STUDY_HEADER: [&str; 6] = ["concept_a", "concept_b", "distance", "misalignment", "n_a", "n_b"];
pub const SUMMARY_HEADER: [&str; 5] = ["spearman_rho", "n_pairs", "encoder", "dataset", "seed"];

/// Fills a template's `{}` (or `{ }`) slot with the label; templates without a
/// slot get the label appended.
pub fn render_template(template: &str, label: &str) -> String {
    for slot in ["{}", "{ }"] {
        if template.contains(slot) {
            return template.replacen(slot, label, 1);
        }
    }
    format!("{} {}", template.trim_end(), label)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptRecord {
    pub label: String,
    pub images: Vec<EmbeddingVector>,
    pub text_embedding: EmbeddingVector,
    pub template: String,
}

impl ConceptRecord {
    pub fn new(
        label: impl Into<String>,
        images: Vec<EmbeddingVector>,
        text_embedding: EmbeddingVector,
        template: impl Into<String>,
    ) -> Result<Self> {
        let first = images.first().ok_or(AirError::EmptySet)?;
        let d = first.dim();
        for v in images.iter().chain(std::iter::once(&text_embedding)) {
            if v.dim() != d {
                return Err(AirError::DimMismatch {
                    expected: d,
                    got: v.dim(),
                });
            }
        }
        Ok(Self {
            label: label.into(),
            images,
            text_embedding,
            template: template.into(),
        })
    }

    /// Text embedding is `encoder.encode_text(template with label)`.
    pub fn from_encoder(
        label: &str,
        images: Vec<EmbeddingVector>,
        template: &str,
        encoder: &dyn EncoderBackend,
    ) -> Result<Self> {
        let text = encoder.encode_text(&render_template(template, label))?;
        Self::new(label, images, EmbeddingVector::from_f64(&text)?, template)
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    /// Mean image embedding accumulated in 64-bit.
    pub fn image_mean(&self) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = self.images.iter().map(EmbeddingVector::to_f64).collect();
        mean_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentRecord {
    pub concept_a: String,
    pub concept_b: String,
    pub distance: f64,
    pub misalignment: f64,
    pub n_a: usize,
    pub n_b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub dataset: String,
    pub n_pairs: usize,
    pub seed: u64,
    pub min_images: usize,
    pub templates: Vec<String>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset".into(),
            n_pairs: 5000,
            seed: 0,
            min_images: DEFAULT_MIN_IMAGES,
            templates: vec![DEFAULT_TEMPLATE.into()],
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(AirError::config("n_pairs", "must be >= 1"));
        }
        if self.templates.is_empty() {
            return Err(AirError::config("templates", "at least one template is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDataset {
    pub name: String,
    pub concepts: Vec<ConceptRecord>,
}

impl ConceptDataset {
    /// Groups cached image rows by label; text embeddings come from `template`.
    pub fn from_cache(
        name: &str,
        cache: &EmbeddingCache,
        template: &str,
        encoder: &dyn EncoderBackend,
    ) -> Result<Self> {
        let concepts = cache
            .by_label()?
            .into_iter()
            .map(|(label, images)| ConceptRecord::from_encoder(&label, images, template, encoder))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.into(),
            concepts,
        })
    }
}

/// `D = 1 - cos(mean I_b, mean I_a)`.
pub fn concept_distance(a: &ConceptRecord, b: &ConceptRecord) -> Result<f64> {
    cosine_distance(&b.image_mean()?, &a.image_mean()?)
}

/// `M = 1 - cos(mean I_b - mean I_a, T_b - T_a)`.
pub fn offset_misalignment(a: &ConceptRecord, b: &ConceptRecord) -> Result<f64> {
    let di = sub(&b.image_mean()?, &a.image_mean()?);
    let dt = sub(&b.text_embedding.to_f64(), &a.text_embedding.to_f64());
    cosine_distance(&di, &dt)
}

pub fn misalignment_record(a: &ConceptRecord, b: &ConceptRecord) -> Result<MisalignmentRecord> {
    Ok(MisalignmentRecord {
        concept_a: a.label.clone(),
        concept_b: b.label.clone(),
        distance: concept_distance(a, b)?,
        misalignment: offset_misalignment(a, b)?,
        n_a: a.n_images(),
        n_b: b.n_images(),
    })
}

/// Index pairs drawn uniformly over unordered class pairs, with replacement
/// across draws. Classes with fewer than `min_images` images are excluded.
pub fn sample_pair_indices(cfg: &StudyConfig, dataset: &ConceptDataset) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let eligible: Vec<usize> = dataset
        .concepts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.n_images() >= cfg.min_images)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < 2 {
        return Err(AirError::InsufficientClasses {
            min_images: cfg.min_images,
            found: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = eligible.len();
    Ok((0..cfg.n_pairs)
        .map(|_| loop {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                let (lo, hi) = (a.min(b), a.max(b));
                break (eligible[lo], eligible[hi]);
            }
        })
        .collect())
}

pub fn sample_concept_pairs<'a>(
    cfg: &StudyConfig,
    dataset: &'a ConceptDataset,
) -> Result<Vec<(&'a ConceptRecord, &'a ConceptRecord)>> {
    Ok(sample_pair_indices(cfg, dataset)?
        .into_iter()
        .map(|(a, b)| (&dataset.concepts[a], &dataset.concepts[b]))
        .collect())
}

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AirError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(AirError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(AirError::ConstantInput);
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutcome {
    pub records: Vec<MisalignmentRecord>,
    /// `None` when the correlation is undefined (constant ranks).
    pub rho: Option<f64>,
}

/// Evaluates pairs in parallel; records keep the input order.
pub fn evaluate_pairs(pairs: &[(&ConceptRecord, &ConceptRecord)]) -> Result<StudyOutcome> {
    let records = pairs
        .par_iter()
        .map(|(a, b)| misalignment_record(a, b))
        .collect::<Result<Vec<_>>>()?;
    let d: Vec<f64> = records.iter().map(|r| r.distance).collect();
    let m: Vec<f64> = records.iter().map(|r| r.misalignment).collect();
    let rho = match spearman(&d, &m) {
        Ok(r) => Some(r),
        Err(AirError::ConstantInput) => None,
        Err(e) => return Err(e),
    };
    Ok(StudyOutcome { records, rho })
}

pub fn run_misalignment_study(cfg: &StudyConfig, dataset: &ConceptDataset) -> Result<StudyOutcome> {
    evaluate_pairs(&sample_concept_pairs(cfg, dataset)?)
}

fn lf_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| AirError::Io(std::io::Error::other(e.to_string())))
}

pub fn study_csv(records: &[MisalignmentRecord]) -> Result<Vec<u8>> {
    let mut w = lf_writer();
    w.write_record(STUDY_HEADER)?;
    for r in records {
        w.write_record([
            r.concept_a.clone(),
            r.concept_b.clone(),
            r.distance.to_string(),
            r.misalignment.to_string(),
            r.n_a.to_string(),
            r.n_b.to_string(),
        ])?;
    }
    finish(w)
}

pub fn summary_csv(outcome: &StudyOutcome, cfg: &StudyConfig, encoder: &str) -> Result<Vec<u8>> {
    let mut w = lf_writer();
    w.write_record(SUMMARY_HEADER)?;
    w.write_record([
        outcome.rho.map(|r| r.to_string()).unwrap_or_default(),
        outcome.records.len().to_string(),
        encoder.to_string(),
        cfg.dataset.clone(),
        cfg.seed.to_string(),
    ])?;
    finish(w)
}

/// Two columns, `distance,misalignment`.
pub fn scatter_csv(records: &[MisalignmentRecord]) -> Result<Vec<u8>> {
    let mut w = lf_writer();
    w.write_record(["distance", "misalignment"])?;
    for r in records {
        w.write_record([r.distance.to_string(), r.misalignment.to_string()])?;
    }
    finish(w)
}

/// Writes `study.csv`, `summary.csv` and `scatter.csv` into `dir`.
pub fn write_study(dir: &Path, outcome: &StudyOutcome, cfg: &StudyConfig, encoder: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("study.csv"), study_csv(&outcome.records)?)?;
    fs::write(dir.join("summary.csv"), summary_csv(outcome, cfg, encoder)?)?;
    fs::write(dir.join("scatter.csv"), scatter_csv(&outcome.records)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRow {
    pub template: String,
    pub text: String,
    /// `None` when an offset vanished; see `flag`.
    pub misalignment: Option<f64>,
    pub flag: Option<String>,
}

/// Misalignment of the fixed image offset `mean(beta) - mean(alpha)` against
/// the text offset from `source_text` to each rendered target template.
/// Rows stay in template order; degenerate rows are flagged, not fatal.
pub fn prompt_augmentation_study(
    source_text: &str,
    target_label: &str,
    templates: &[String],
    alpha_images: &[EmbeddingVector],
    beta_images: &[EmbeddingVector],
    encoder: &dyn EncoderBackend,
) -> Result<Vec<AugmentationRow>> {
    if templates.is_empty() {
        return Err(AirError::config("templates", "at least one template is required"));
    }
    let mean = |set: &[EmbeddingVector]| -> Result<Vec<f64>> {
        mean_rows(&set.iter().map(EmbeddingVector::to_f64).collect::<Vec<_>>())
    };
    let image_offset = sub(&mean(beta_images)?, &mean(alpha_images)?);
    let source = encoder.encode_text(source_text)?;
    templates
        .iter()
        .map(|template| {
            let text = render_template(template, target_label);
            let target = encoder.encode_text(&text)?;
            let (misalignment, flag) = match cosine_distance(&image_offset, &sub(&target, &source)) {
                Ok(m) => (Some(m), None),
                Err(e @ AirError::ZeroNorm(_)) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
            Ok(AugmentationRow {
                template: template.clone(),
                text,
                misalignment,
                flag,
            })
        })
        .collect()
}

pub fn augmentation_csv(rows: &[AugmentationRow]) -> Result<Vec<u8>> {
    let mut w = lf_writer();
    w.write_record(["template", "text", "misalignment", "flag"])?;
    for r in rows {
        w.write_record([
            r.template.clone(),
            r.text.clone(),
            r.misalignment.map(|m| m.to_string()).unwrap_or_default(),
            r.flag.clone().unwrap_or_default(),
        ])?;
    }
    finish(w)
}

/// Parameters of the synthetic misalignment family.
///
/// Each pair gets two class means of norm `radius` at a random angle, a
/// handful of images around each mean, and text embeddings whose offset is
/// the image offset plus noise orthogonal to it, of size
/// `base_noise + amplitude * D(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFamily {
    pub dim: usize,
    pub radius: f64,
    pub images_per_class: usize,
    pub image_noise: f64,
    pub base_noise: f64,
    pub amplitude: f64,
}

/// Amplitudes used for the correlation check; rho rises with amplitude.
pub const SYNTHETIC_AMPLITUDES: [f64; 3] = [2.0, 4.0, 8.0];

impl Default for SyntheticFamily {
    fn default() -> Self {
        Self {
            dim: 64,
            radius: 1.0,
            images_per_class: DEFAULT_MIN_IMAGES,
            image_noise: 0.01,
            base_noise: 0.02,
            amplitude: 2.0,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

impl SyntheticFamily {
    /// `n` independent concept pairs, reproducible from `seed`.
    pub fn pairs(&self, n: usize, seed: u64) -> Result<Vec<(ConceptRecord, ConceptRecord)>> {
        if self.dim < 2 || self.images_per_class == 0 {
            return Err(AirError::config("dim", "synthetic family needs dim >= 2 and images"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let u = unit(gaussian(&mut rng, self.dim));
                let w = unit(gaussian(&mut rng, self.dim));
                // Angle spread over (0, pi / 2] so D covers [0, 1].
                let theta = rng.random_range(0.02..std::f64::consts::FRAC_PI_2);
                let w_perp = unit(sub(
                    &w,
                    &u.iter().map(|x| x * crate::embedding::dot(&w, &u)).collect::<Vec<_>>(),
                ));
                let mu_a: Vec<f64> = u.iter().map(|x| x * self.radius).collect();
                let mu_b: Vec<f64> = u
                    .iter()
                    .zip(&w_perp)
                    .map(|(a, p)| self.radius * (a * theta.cos() + p * theta.sin()))
                    .collect();
                let d = 1.0 - theta.cos();
                let di = sub(&mu_b, &mu_a);
                let z = gaussian(&mut rng, self.dim);
                let along = crate::embedding::dot(&z, &di) / crate::embedding::dot(&di, &di);
                let noise = unit(z.iter().zip(&di).map(|(zk, dk)| zk - along * dk).collect());
                let scale = self.base_noise + self.amplitude * d;
                let text_a = gaussian(&mut rng, self.dim);
                let text_b: Vec<f64> = text_a
                    .iter()
                    .zip(&di)
                    .zip(&noise)
                    .map(|((t, d), z)| t + d + scale * z)
                    .collect();
                let mut images = |mu: &[f64]| -> Result<Vec<EmbeddingVector>> {
                    (0..self.images_per_class)
                        .map(|_| {
                            let v: Vec<f64> = mu
                                .iter()
                                .map(|m| {
                                    let z: f64 = StandardNormal.sample(&mut rng);
                                    m + self.image_noise * z
                                })
                                .collect();
                            EmbeddingVector::from_f64(&v)
                        })
                        .collect()
                };
                let ia = images(&mu_a)?;
                let ib = images(&mu_b)?;
                Ok((
                    ConceptRecord::new(
                        format!("a{i}"),
                        ia,
                        EmbeddingVector::from_f64(&text_a)?,
                        DEFAULT_TEMPLATE,
                    )?,
                    ConceptRecord::new(
                        format!("b{i}"),
                        ib,
                        EmbeddingVector::from_f64(&text_b)?,
                        DEFAULT_TEMPLATE,
                    )?,
                ))
            })
            .collect()
    }

    /// Study over `n` synthetic pairs.
    pub fn study(&self, n: usize, seed: u64) -> Result<StudyOutcome> {
        let pairs = self.pairs(n, seed)?;
        let refs: Vec<(&ConceptRecord, &ConceptRecord)> = pairs.iter().map(|(a, b)| (a, b)).collect();
        evaluate_pairs(&refs)
    }
}
