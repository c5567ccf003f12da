//! Denoiser training on the 2-D mixture, prompt-conditioned sampling, and
//! the matched/mismatched guidance evaluation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DiffusionSample, SyntheticSpec};
use crate::decompose::{decompose, CategoryLexicon};
use crate::diffusion::{
    build_conditions, ddpm_train_step, model::PARAM_NAMES, sample, DenoiserConfig, DenoiserParams, DiffusionSchedule,
    GuidanceCondition, Oracle, Point,
};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

use super::checkpoint::Checkpoint;
use super::classify::{encoders_checkpoint, encoders_from_checkpoint};
use super::config::TrainConfig;
use super::optim::Adam;

/// A caption split into its two prompts and turned into a condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub caption: String,
    pub style_text: String,
    pub category_text: String,
    pub condition: GuidanceCondition,
}

impl Prompt {
    pub fn new(caption: &str, enc: &Encoders, lexicon: &CategoryLexicon, alpha: f64, tokens: usize) -> Result<Self> {
        let d = decompose(caption, lexicon);
        if d.style_text.is_empty() || d.category_text.is_empty() {
            return Err(Error::InvalidInput(format!(
                "caption {caption:?} does not split into a style prompt and a category prompt"
            )));
        }
        let condition = build_conditions(&d.style_text, &d.category_text, caption, enc, alpha, tokens)?;
        Ok(Prompt {
            caption: caption.to_string(),
            style_text: d.style_text,
            category_text: d.category_text,
            condition,
        })
    }

    /// The prompt for cell `(style, category)` of the synthetic set.
    pub fn for_cell(
        cfg: &TrainConfig,
        enc: &Encoders,
        lexicon: &CategoryLexicon,
        style: usize,
        category: usize,
    ) -> Result<Self> {
        Self::new(
            &cfg.data.caption(style, category),
            enc,
            lexicon,
            cfg.diffusion.alpha,
            cfg.diffusion.tokens,
        )
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionTraining {
    pub params: DenoiserParams,
    /// Batch loss of every step.
    pub losses: Vec<f64>,
}

fn denoiser_config(cfg: &TrainConfig, enc: &Encoders, schedule: &DiffusionSchedule) -> DenoiserConfig {
    DenoiserConfig {
        width: cfg.diffusion.width,
        cond_dim: enc.backbone.dim(),
        tokens: cfg.diffusion.tokens,
        steps: schedule.steps(),
    }
}

pub fn init_denoiser(cfg: &TrainConfig, enc: &Encoders) -> Result<DenoiserParams> {
    let schedule = DiffusionSchedule::default();
    DenoiserParams::init(
        &denoiser_config(cfg, enc, &schedule),
        &mut rng::stream(cfg.seed, streams::DENOISER_INIT),
    )
}

/// Trains a fresh denoiser for `cfg.diffusion.steps` Adam steps on batches
/// drawn with replacement. Every distinct caption in `data` becomes one
/// condition.
pub fn train_diffusion(
    cfg: &TrainConfig,
    enc: &Encoders,
    data: &[DiffusionSample],
    lexicon: &CategoryLexicon,
) -> Result<DiffusionTraining> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty diffusion dataset".into()));
    }
    let schedule = DiffusionSchedule::default();
    let mut params = init_denoiser(cfg, enc)?;
    let mut captions: Vec<&str> = Vec::new();
    let mut points = Vec::with_capacity(data.len());
    for d in data {
        let cond = match captions.iter().position(|c| *c == d.caption) {
            Some(i) => i,
            None => {
                captions.push(&d.caption);
                captions.len() - 1
            }
        };
        points.push(Point { xy: [d.x, d.y], cond });
    }
    let conds = captions
        .iter()
        .map(|c| Prompt::new(c, enc, lexicon, cfg.diffusion.alpha, cfg.diffusion.tokens).map(|p| p.condition))
        .collect::<Result<Vec<_>>>()?;

    let mut r = rng::stream(cfg.seed, streams::DIFFUSION_TRAIN);
    let mut adam = Adam::new(crate::train::optim::AdamConfig {
        lr: cfg.diffusion.lr,
        ..cfg.optimizer.clone()
    });
    let mut losses = Vec::with_capacity(cfg.diffusion.steps);
    let mut batch = Vec::with_capacity(cfg.diffusion.batch_size);
    for _ in 0..cfg.diffusion.steps {
        batch.clear();
        batch.extend((0..cfg.diffusion.batch_size).map(|_| points[r.random_range(0..points.len())]));
        let (loss, grads) = ddpm_train_step(&batch, &schedule, &params, &conds, &mut r)?;
        adam.step(params.tensors_mut(), &grads);
        losses.push(loss);
    }
    Ok(DiffusionTraining { params, losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub x: f64,
    pub y: f64,
    pub style_prompt: String,
    pub category_prompt: String,
    pub oracle_style: String,
    pub oracle_category: String,
}

/// `n` samples for `prompt`, each labeled by the mixture oracle. `stream`
/// separates independent sampling runs under the same seed.
pub fn sample_prompt(
    cfg: &TrainConfig,
    params: &DenoiserParams,
    prompt: &Prompt,
    n: usize,
    stream: u64,
) -> Result<Vec<SampleRow>> {
    let schedule = DiffusionSchedule::default();
    let mut r = rng::stream(rng::derive_seed(cfg.seed, streams::SAMPLING), stream);
    let pts = sample(n, &prompt.condition, &schedule, params, &mut r)?;
    let spec = &cfg.data;
    let oracle = Oracle::new(&cfg.diffusion.mixture, spec.num_styles(), spec.num_categories());
    Ok(pts
        .into_iter()
        .map(|[x, y]| {
            let (s, c) = oracle.classify([x, y]);
            SampleRow {
                x,
                y,
                style_prompt: prompt.style_text.clone(),
                category_prompt: prompt.category_text.clone(),
                oracle_style: spec.styles[s].clone(),
                oracle_category: spec.categories[c].clone(),
            }
        })
        .collect())
}

pub fn write_samples(path: &Path, rows: &[SampleRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{other:?}")),
    })?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Oracle accuracy against target cell `(style, category)` for samples
/// generated from prompt cell `(prompt_style, prompt_category)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRow {
    pub style: String,
    pub category: String,
    pub prompt_style: String,
    pub prompt_category: String,
    pub matched: bool,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceReport {
    pub rows: Vec<GuidanceRow>,
}

impl GuidanceReport {
    fn accuracies(&self, matched: bool) -> impl Iterator<Item = f64> + '_ {
        self.rows
            .iter()
            .filter(move |r| r.matched == matched)
            .map(|r| r.accuracy)
    }

    pub fn matched_mean(&self) -> f64 {
        mean(self.accuracies(true))
    }

    pub fn matched_min(&self) -> f64 {
        self.accuracies(true).fold(f64::INFINITY, f64::min)
    }

    pub fn mismatched_mean(&self) -> f64 {
        mean(self.accuracies(false))
    }

    pub fn mismatched_max(&self) -> f64 {
        self.accuracies(false).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// For every cell, samples once with the matching prompt and once with the
/// prompt of cell `(style + 1, category + 1)` (both factors wrong), and
/// scores both against the cell.
pub fn guidance_eval(
    cfg: &TrainConfig,
    enc: &Encoders,
    params: &DenoiserParams,
    lexicon: &CategoryLexicon,
    samples_per_prompt: usize,
) -> Result<GuidanceReport> {
    let spec: &SyntheticSpec = &cfg.data;
    let (ks, kc) = (spec.num_styles(), spec.num_categories());
    let oracle = Oracle::new(&cfg.diffusion.mixture, ks, kc);
    let mut rows = Vec::new();
    for (s, c) in spec.cells() {
        for matched in [true, false] {
            let (ps, pc) = if matched { (s, c) } else { ((s + 1) % ks, (c + 1) % kc) };
            let prompt = Prompt::for_cell(cfg, enc, lexicon, ps, pc)?;
            let stream = 2 * (c * ks + s) as u64 + u64::from(!matched);
            let mut r = rng::stream(rng::derive_seed(cfg.seed, streams::SAMPLING), stream);
            let pts = sample(
                samples_per_prompt,
                &prompt.condition,
                &DiffusionSchedule::default(),
                params,
                &mut r,
            )?;
            let hits = pts.iter().filter(|p| oracle.classify(**p) == (s, c)).count();
            rows.push(GuidanceRow {
                style: spec.styles[s].clone(),
                category: spec.categories[c].clone(),
                prompt_style: spec.styles[ps].clone(),
                prompt_category: spec.categories[pc].clone(),
                matched,
                accuracy: hits as f64 / samples_per_prompt.max(1) as f64,
                samples: samples_per_prompt,
            });
        }
    }
    Ok(GuidanceReport { rows })
}

pub fn write_guidance(path: &Path, report: &GuidanceReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{other:?}")),
    })?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Encoder arrays plus `denoiser.*`.
pub fn diffusion_checkpoint(cfg: &TrainConfig, enc: &Encoders, params: &DenoiserParams) -> Checkpoint {
    let mut ck = encoders_checkpoint(cfg, enc);
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors()) {
        ck.push(format!("denoiser.{name}"), t);
    }
    ck
}

pub fn diffusion_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Encoders, DenoiserParams)> {
    let (cfg, enc) = encoders_from_checkpoint(ck)?;
    let tensors = PARAM_NAMES
        .iter()
        .map(|n| ck.require(&format!("denoiser.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let params = DenoiserParams::from_vec(tensors).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if params.tokens() != cfg.diffusion.tokens || params.width() != cfg.diffusion.width {
        return Err(Error::Checkpoint(
            "denoiser shape disagrees with the embedded config".into(),
        ));
    }
    Ok((cfg, enc, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_diffusion_dataset;
    use crate::train::classify::build_encoders;

    fn small() -> (TrainConfig, Encoders, CategoryLexicon, Vec<DiffusionSample>) {
        let mut cfg = TrainConfig::default();
        cfg.data.train_per_cell = 8;
        cfg.diffusion.steps = 5;
        cfg.diffusion.batch_size = 16;
        let enc = build_encoders(&cfg, &[]).unwrap();
        let lex = CategoryLexicon::new(cfg.data.categories.iter()).unwrap();
        let data = generate_diffusion_dataset(&cfg.data, &cfg.diffusion.mixture).unwrap();
        (cfg, enc, lex, data)
    }

    #[test]
    fn prompts_split_generated_captions() {
        let (cfg, enc, lex, _) = small();
        let p = Prompt::for_cell(&cfg, &enc, &lex, 1, 2).unwrap();
        assert_eq!(p.style_text, "a neon style");
        assert_eq!(p.category_text, "car");
        assert!(Prompt::new("a neon style", &enc, &lex, 0.1, 1).is_err());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let (cfg, enc, lex, data) = small();
        let a = train_diffusion(&cfg, &enc, &data, &lex).unwrap();
        let b = train_diffusion(&cfg, &enc, &data, &lex).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses.len(), 5);
        let ck = diffusion_checkpoint(&cfg, &enc, &a.params);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let (cfg2, _, p2) = diffusion_from_checkpoint(&back).unwrap();
        assert_eq!(cfg2, cfg);
        for (x, y) in a.params.tensors().iter().zip(p2.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!((*u as f32) as f64, *v);
            }
        }
        assert_eq!(
            diffusion_checkpoint(&cfg2, &enc, &p2).to_bytes().unwrap(),
            back.to_bytes().unwrap()
        );
    }

    #[test]
    fn sampling_honors_count_and_seed() {
        let (cfg, enc, lex, _) = small();
        let params = init_denoiser(&cfg, &enc).unwrap();
        let p = Prompt::for_cell(&cfg, &enc, &lex, 0, 0).unwrap();
        let a = sample_prompt(&cfg, &params, &p, 7, 0).unwrap();
        assert_eq!(a.len(), 7);
        assert_eq!(a, sample_prompt(&cfg, &params, &p, 7, 0).unwrap());
        assert_ne!(a, sample_prompt(&cfg, &params, &p, 7, 1).unwrap());
        assert!(sample_prompt(&cfg, &params, &p, 0, 0).unwrap().is_empty());
        assert_eq!(a[0].style_prompt, "a sketch style");
    }

    #[test]
    fn guidance_report_has_both_kinds_per_cell() {
        let (cfg, enc, lex, _) = small();
        let params = init_denoiser(&cfg, &enc).unwrap();
        let rep = guidance_eval(&cfg, &enc, &params, &lex, 3).unwrap();
        assert_eq!(rep.rows.len(), 24);
        assert_eq!(rep.rows.iter().filter(|r| r.matched).count(), 12);
        let mm = rep.rows.iter().find(|r| !r.matched).unwrap();
        assert_ne!(mm.style, mm.prompt_style);
        assert_ne!(mm.category, mm.prompt_category);
    }
}
