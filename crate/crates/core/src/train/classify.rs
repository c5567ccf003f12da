//! Encoder training, classification evaluation, and ablation sweeps.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::backbone::{Backbone, Feature, FrozenWeights};
use crate::datagen::{ClassificationSample, SyntheticSpec};
use crate::decompose::{decompose, CategoryLexicon};
use crate::encoders::{feature_matrix, AdapterParams, Encoders, Factor};
use crate::error::{Error, Result};
use crate::losses::{
    self, category_labeled_loss, category_triplet_loss, style_labeled_loss, style_triplet_loss, LabeledBatch,
    LossConfig, PromptBank, UnlabeledBatch,
};
use crate::rng::{self, streams};
use crate::tensor::{Graph, Tensor};

use super::checkpoint::Checkpoint;
use super::config::{TrainConfig, TrainMode};
use super::metrics::MetricsRow;
use super::optim::Adam;

/// Backbone (optionally contrastively pretrained on `train`) plus freshly
/// initialized adapters.
pub fn build_encoders(cfg: &TrainConfig, train: &[ClassificationSample]) -> Result<Encoders> {
    let mut backbone = Backbone::build(&cfg.backbone, &cfg.data)?;
    if cfg.pretrain_contrastive {
        backbone.pretrain_contrastive(train, &cfg.pretrain)?;
    }
    Encoders::new(backbone, cfg.seed)
}

/// Keeps `shots` samples of every (style, category) cell, chosen by seed.
pub fn select_shots(train: &[ClassificationSample], shots: Option<usize>, seed: u64) -> Vec<ClassificationSample> {
    let Some(k) = shots else {
        return train.to_vec();
    };
    let mut cells: Vec<((usize, usize), Vec<&ClassificationSample>)> = Vec::new();
    for s in train {
        let key = (s.category, s.style);
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(s),
            None => cells.push((key, vec![s])),
        }
    }
    cells.sort_by_key(|(k, _)| *k);
    let mut r = rng::stream(seed, streams::SHOTS);
    let mut out = Vec::new();
    for (_, mut v) in cells {
        v.shuffle(&mut r);
        out.extend(v.into_iter().take(k).cloned());
    }
    out
}

pub fn image_features(enc: &Encoders, samples: &[ClassificationSample]) -> Result<Vec<Feature>> {
    enc.backbone.embed_images(samples)
}

pub fn prompt_bank(enc: &Encoders, spec: &SyntheticSpec) -> Result<PromptBank> {
    Ok(PromptBank {
        style: feature_matrix(&enc.frozen_prototypes(Factor::Style, &spec.styles)?)?,
        category: feature_matrix(&enc.frozen_prototypes(Factor::Category, &spec.categories)?)?,
    })
}

/// Encoder outputs for each row of `x`, computed without gradients.
pub fn encode_rows(p: &AdapterParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = p.attach_frozen(&mut g);
    let xv = g.constant(x.clone());
    let out = vars.encode(&mut g, xv)?;
    Ok(g.value(out).clone())
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), d, data).expect("consistent rows")
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} loss became {v}")))
    }
}

/// Frozen inputs for one training run.
enum Prepared {
    Labeled {
        images: Tensor,
        style: Vec<usize>,
        category: Vec<usize>,
        prompts: PromptBank,
    },
    Unlabeled(UnlabeledBatch),
}

impl Prepared {
    fn len(&self) -> usize {
        match self {
            Prepared::Labeled { style, .. } => style.len(),
            Prepared::Unlabeled(b) => b.images.rows(),
        }
    }
}

/// Decomposes captions into the text halves fed to each encoder. Samples
/// whose caption lacks either half are skipped.
pub fn unlabeled_batch(
    enc: &Encoders,
    samples: &[ClassificationSample],
    lexicon: &CategoryLexicon,
) -> Result<UnlabeledBatch> {
    let mut st = Vec::new();
    let mut ct = Vec::new();
    let mut im = Vec::new();
    for s in samples {
        let d = decompose(&s.caption, lexicon);
        if d.style_text.is_empty() || d.category_text.is_empty() {
            continue;
        }
        st.push(enc.backbone.embed_str(&d.style_text)?);
        ct.push(enc.backbone.embed_str(&d.category_text)?);
        im.push(enc.backbone.embed_image(&s.grid)?);
    }
    if im.is_empty() {
        return Err(Error::InvalidInput(
            "no caption splits into both style and category text with this lexicon".into(),
        ));
    }
    Ok(UnlabeledBatch {
        style_text: feature_matrix(&st)?,
        category_text: feature_matrix(&ct)?,
        images: feature_matrix(&im)?,
    })
}

fn prepare(
    cfg: &TrainConfig,
    enc: &Encoders,
    train: &[ClassificationSample],
    lexicon: Option<&CategoryLexicon>,
) -> Result<Prepared> {
    let (ks, kc) = (cfg.data.num_styles(), cfg.data.num_categories());
    if let Some(s) = train.iter().find(|s| s.style >= ks || s.category >= kc) {
        return Err(Error::InvalidInput(format!(
            "sample labels ({}, {}) outside the configured {ks} styles and {kc} categories",
            s.style, s.category
        )));
    }
    match cfg.mode {
        TrainMode::Labeled => Ok(Prepared::Labeled {
            images: feature_matrix(&image_features(enc, train)?)?,
            style: train.iter().map(|s| s.style).collect(),
            category: train.iter().map(|s| s.category).collect(),
            prompts: prompt_bank(enc, &cfg.data)?,
        }),
        TrainMode::Unlabeled => {
            let lexicon = lexicon.ok_or_else(|| Error::Config("unlabeled mode requires a category lexicon".into()))?;
            Ok(Prepared::Unlabeled(unlabeled_batch(enc, train, lexicon)?))
        }
    }
}

/// Loss values: style (total, primary, adversarial), then category.
type LossValues = [f64; 6];

/// One optimization step per encoder on the rows `idx`, or a pure
/// evaluation when `opt` is `None`.
fn step(
    enc: &mut Encoders,
    data: &Prepared,
    idx: &[usize],
    cfg: &LossConfig,
    mut opt: Option<(&mut Adam, &mut Adam)>,
) -> Result<LossValues> {
    let mut out = [0.0; 6];
    for (slot, factor) in [(0usize, Factor::Style), (3, Factor::Category)] {
        let mut g = Graph::new();
        let vars = enc.adapter(factor).attach(&mut g);
        let (total, primary, adversarial) = match data {
            Prepared::Labeled {
                images,
                style,
                category,
                prompts,
            } => {
                let batch = LabeledBatch {
                    images: rows(images, idx),
                    style: idx.iter().map(|&i| style[i]).collect(),
                    category: idx.iter().map(|&i| category[i]).collect(),
                };
                let parts = match factor {
                    Factor::Style => style_labeled_loss(&mut g, &vars, &batch, prompts, cfg)?,
                    Factor::Category => category_labeled_loss(&mut g, &vars, &batch, prompts, cfg)?,
                };
                (parts.total, Some(parts.ce), Some(parts.confusion))
            }
            Prepared::Unlabeled(b) => {
                let images = rows(&b.images, idx);
                let own_text = rows(
                    if factor == Factor::Style {
                        &b.style_text
                    } else {
                        &b.category_text
                    },
                    idx,
                );
                let other_text = rows(
                    if factor == Factor::Style {
                        &b.category_text
                    } else {
                        &b.style_text
                    },
                    idx,
                );
                let other = encode_rows(enc.adapter(factor.other()), &other_text)?;
                let x = g.constant(own_text);
                let f = vars.encode(&mut g, x)?;
                let l = match factor {
                    Factor::Style => style_triplet_loss(&mut g, f, &images, &other, cfg.margin1)?,
                    Factor::Category => category_triplet_loss(&mut g, f, &images, &other, cfg.margin2)?,
                };
                (l, None, None)
            }
        };
        let t = check_finite(g.value(total).item(), factor.name())?;
        out[slot] = t;
        out[slot + 1] = primary.map_or(t, |v| g.value(v).item());
        out[slot + 2] = adversarial.map_or(0.0, |v| g.value(v).item());
        if let Some((a_s, a_c)) = opt.as_mut() {
            g.backward(total)?;
            let grads = vars.grads(&g);
            let adam = if factor == Factor::Style {
                &mut **a_s
            } else {
                &mut **a_c
            };
            adam.step(enc.adapter_mut(factor).tensors_mut(), &grads);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EncoderTraining {
    pub encoders: Encoders,
    /// Row 0 is the untrained state; row `e` follows epoch `e`.
    pub metrics: Vec<MetricsRow>,
}

impl EncoderTraining {
    pub fn initial_loss(&self) -> f64 {
        let r = &self.metrics[0];
        r.loss_style + r.loss_category
    }

    pub fn final_loss(&self) -> f64 {
        let r = self.metrics.last().expect("at least one row");
        r.loss_style + r.loss_category
    }
}

/// Trains both adapters, alternating a style step and a category step per
/// batch. Losses logged per epoch are full passes over the training set
/// after the epoch's updates; accuracies are on `test` at the configured
/// residual ratios.
pub fn train_encoders(
    cfg: &TrainConfig,
    mut enc: Encoders,
    train: &[ClassificationSample],
    test: &[ClassificationSample],
    lexicon: Option<&CategoryLexicon>,
) -> Result<EncoderTraining> {
    cfg.validate()?;
    let start = Instant::now();
    let train = select_shots(train, cfg.shots, cfg.seed);
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let frozen = enc.frozen_checksum();
    let data = prepare(cfg, &enc, &train, lexicon)?;
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let mut order = all.clone();
    let mut r = rng::stream(cfg.seed, streams::SHUFFLE);
    let mut adam_s = Adam::new(cfg.optimizer.clone());
    let mut adam_c = Adam::new(cfg.optimizer.clone());

    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut log = |epoch: usize, enc: &mut Encoders| -> Result<()> {
        let l = step(enc, &data, &all, &cfg.loss, None)?;
        let (s, c) = evaluate_classification(enc, &cfg.data, test, cfg.alpha_style, cfg.alpha_category)?;
        metrics.push(MetricsRow {
            epoch,
            split: "test".into(),
            style_top1: s,
            category_top1: c,
            loss_style: l[0],
            loss_style_primary: l[1],
            loss_style_adversarial: l[2],
            loss_category: l[3],
            loss_category_primary: l[4],
            loss_category_adversarial: l[5],
            alpha_style: cfg.alpha_style,
            alpha_category: cfg.alpha_category,
            lambda1: cfg.loss.lambda1,
            lambda2: cfg.loss.lambda2,
            seed: cfg.seed,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        Ok(())
    };
    log(0, &mut enc)?;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(cfg.batch_size) {
            step(&mut enc, &data, batch, &cfg.loss, Some((&mut adam_s, &mut adam_c)))?;
        }
        log(epoch, &mut enc)?;
    }
    if enc.frozen_checksum() != frozen {
        return Err(Error::Numerical(
            "frozen backbone weights changed during training".into(),
        ));
    }
    Ok(EncoderTraining { encoders: enc, metrics })
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn top1(images: &[Feature], labels: impl Iterator<Item = usize>, prototypes: &[Feature]) -> f64 {
    let n = images.len();
    if n == 0 {
        return 0.0;
    }
    let hits = images
        .iter()
        .zip(labels)
        .filter(|(f, y)| argmax(prototypes.iter().map(|p| f.cosine(p))) == *y)
        .count();
    hits as f64 / n as f64
}

/// Nearest-prototype accuracy of the image features against each factor's
/// prompts, as adapted by that factor's encoder and blended with the frozen
/// prompts at the given residual ratio.
pub fn evaluate_classification(
    enc: &Encoders,
    spec: &SyntheticSpec,
    test: &[ClassificationSample],
    alpha_style: f64,
    alpha_category: f64,
) -> Result<(f64, f64)> {
    let images = image_features(enc, test)?;
    evaluate_features(enc, spec, &images, test, alpha_style, alpha_category)
}

pub fn evaluate_features(
    enc: &Encoders,
    spec: &SyntheticSpec,
    images: &[Feature],
    test: &[ClassificationSample],
    alpha_style: f64,
    alpha_category: f64,
) -> Result<(f64, f64)> {
    let ps = enc.blended_prototypes(Factor::Style, Factor::Style, &spec.styles, alpha_style)?;
    let pc = enc.blended_prototypes(Factor::Category, Factor::Category, &spec.categories, alpha_category)?;
    Ok((
        top1(images, test.iter().map(|s| s.style), &ps),
        top1(images, test.iter().map(|s| s.category), &pc),
    ))
}

fn names(spec: &SyntheticSpec, f: Factor) -> &[String] {
    match f {
        Factor::Style => &spec.styles,
        Factor::Category => &spec.categories,
    }
}

fn label(s: &ClassificationSample, f: Factor) -> usize {
    match f {
        Factor::Style => s.style,
        Factor::Category => s.category,
    }
}

/// How `encoder` alone (no blending) classifies `target`: top-1 accuracy
/// and the mean entropy of its softmax predictions at the given logit
/// scale.
pub fn encoder_predictions(
    enc: &Encoders,
    spec: &SyntheticSpec,
    test: &[ClassificationSample],
    encoder: Factor,
    target: Factor,
    scale: f64,
) -> Result<(f64, f64)> {
    let images = image_features(enc, test)?;
    let protos = enc.blended_prototypes(encoder, target, names(spec, target), 1.0)?;
    let acc = top1(&images, test.iter().map(|s| label(s, target)), &protos);
    let mut entropy = 0.0;
    for f in &images {
        let logits = losses::class_logits(f, &protos, scale);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        entropy -= logits
            .iter()
            .map(|l| {
                let lp = l - m - z.ln();
                lp.exp() * lp
            })
            .sum::<f64>();
    }
    Ok((acc, entropy / images.len().max(1) as f64))
}

/// Per-sample triplet margins on held-out data:
/// `(‖f_s−f_c‖ − ‖f_s−f_i‖, ‖f_c−f_s‖ − ‖f_c−f_i‖)`.
pub fn triplet_margins(
    enc: &Encoders,
    test: &[ClassificationSample],
    lexicon: &CategoryLexicon,
) -> Result<Vec<(f64, f64)>> {
    let b = unlabeled_batch(enc, test, lexicon)?;
    let fs = encode_rows(&enc.style, &b.style_text)?;
    let fc = encode_rows(&enc.category, &b.category_text)?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok((0..fs.rows())
        .map(|i| {
            let (s, c, im) = (fs.row(i), fc.row(i), b.images.row(i));
            (dist(s, c) - dist(s, im), dist(c, s) - dist(c, im))
        })
        .collect())
}

/// A test-split metrics row with only accuracies filled in.
pub fn evaluation_row(
    cfg: &TrainConfig,
    epoch: usize,
    (s, c): (f64, f64),
    alpha_style: f64,
    alpha_category: f64,
) -> MetricsRow {
    MetricsRow {
        epoch,
        split: "test".into(),
        style_top1: s,
        category_top1: c,
        loss_style: 0.0,
        loss_style_primary: 0.0,
        loss_style_adversarial: 0.0,
        loss_category: 0.0,
        loss_category_primary: 0.0,
        loss_category_adversarial: 0.0,
        alpha_style,
        alpha_category,
        lambda1: cfg.loss.lambda1,
        lambda2: cfg.loss.lambda2,
        seed: cfg.seed,
        wall_ms: 0,
    }
}

/// One row per α, used for both factors.
pub fn sweep_alpha(
    cfg: &TrainConfig,
    enc: &Encoders,
    test: &[ClassificationSample],
    grid: &[f64],
) -> Result<Vec<MetricsRow>> {
    let images = image_features(enc, test)?;
    grid.iter()
        .map(|&a| {
            let acc = evaluate_features(enc, &cfg.data, &images, test, a, a)?;
            Ok(evaluation_row(cfg, cfg.epochs, acc, a, a))
        })
        .collect()
}

/// Retrains from scratch with `λ₁ = λ₂ = λ` for each grid point, then
/// evaluates at the configured residual ratios.
pub fn sweep_lambda(
    cfg: &TrainConfig,
    train: &[ClassificationSample],
    test: &[ClassificationSample],
    lexicon: Option<&CategoryLexicon>,
    grid: &[f64],
) -> Result<Vec<MetricsRow>> {
    grid.iter()
        .map(|&lambda| {
            let mut c = cfg.clone();
            c.loss.lambda1 = lambda;
            c.loss.lambda2 = lambda;
            let enc = build_encoders(&c, train)?;
            let run = train_encoders(&c, enc, train, test, lexicon)?;
            let acc = evaluate_classification(&run.encoders, &c.data, test, c.alpha_style, c.alpha_category)?;
            Ok(evaluation_row(&c, c.epochs, acc, c.alpha_style, c.alpha_category))
        })
        .collect()
}

const ADAPTER_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
const BACKBONE_NAMES: [&str; 3] = ["token_embedding", "image_projection", "image_bias"];

/// Adapters always; backbone weights only when they were pretrained, since
/// otherwise the config's seed rebuilds them exactly.
pub fn encoders_checkpoint(cfg: &TrainConfig, enc: &Encoders) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.to_json());
    for f in [Factor::Style, Factor::Category] {
        for (name, t) in ADAPTER_NAMES.iter().zip(enc.adapter(f).tensors()) {
            ck.push(format!("{}.{name}", f.name()), t);
        }
    }
    if cfg.pretrain_contrastive {
        let w = enc.backbone.weights();
        for (name, t) in BACKBONE_NAMES
            .iter()
            .zip([&w.token_embedding, &w.image_projection, &w.image_bias])
        {
            ck.push(format!("backbone.{name}"), t);
        }
    }
    ck
}

pub fn encoders_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Encoders)> {
    let cfg = TrainConfig::from_json(&ck.config).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let backbone = if ck.has_prefix("backbone.") {
        let get = |n: &str| ck.require(&format!("backbone.{n}"));
        Backbone::with_weights(
            &cfg.backbone,
            &cfg.data,
            FrozenWeights {
                token_embedding: get("token_embedding")?,
                image_projection: get("image_projection")?,
                image_bias: get("image_bias")?,
            },
        )?
    } else {
        Backbone::build(&cfg.backbone, &cfg.data)?
    };
    let adapter = |f: Factor| -> Result<AdapterParams> {
        AdapterParams::from_vec(
            ADAPTER_NAMES
                .iter()
                .map(|n| ck.require(&format!("{}.{n}", f.name())))
                .collect::<Result<Vec<_>>>()?,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))
    };
    let enc = Encoders {
        backbone,
        style: adapter(Factor::Style)?,
        category: adapter(Factor::Category)?,
    };
    Ok((cfg, enc))
}
