//! Frozen text/image encoders standing in for a pretrained dual encoder.
//!
//! The backbone is aligned by construction. Every style and every category
//! owns an orthonormal code vector; a factor word's token embedding is its
//! code plus seeded noise, and the image projection is a ridge regression
//! from rendered grids onto the codes of the grid's (style, category) cell.
//! The image side sees slightly mixed codes (`domain_gap`), so zero-shot
//! prompt matching is informative but imperfect, which is the regime the
//! adapters are meant to improve on.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{self, ClassificationSample, SyntheticSpec, GRID_LEN};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{self, Graph, Tensor};

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const DEFAULT_DIM: usize = 32;

/// Unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature(Vec<f64>);

impl Feature {
    /// Normalizes `v`; a zero vector is rejected.
    pub fn from_unnormalized(v: Vec<f64>) -> Result<Self> {
        let norm = tensor::dot(&v, &v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numerical(format!("cannot normalize vector of norm {norm}")));
        }
        Ok(Feature(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Feature) -> f64 {
        tensor::dot(&self.0, &other.0)
    }

    pub fn distance(&self, other: &Feature) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Stacks features into an n×D matrix.
pub fn stack(features: &[Feature]) -> Result<Tensor> {
    Tensor::from_rows(&features.iter().map(|f| f.as_slice()).collect::<Vec<_>>())
}

pub fn unstack(t: &Tensor) -> Result<Vec<Feature>> {
    (0..t.rows())
        .map(|i| Feature::from_unnormalized(t.row(i).to_vec()))
        .collect()
}

/// Token inventory; id 0 is reserved for unknown words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocab {
            words: vec![UNKNOWN_TOKEN.to_string()],
            ids: HashMap::from([(UNKNOWN_TOKEN.to_string(), 0)]),
        };
        for w in words {
            let w = w.to_lowercase();
            if !v.ids.contains_key(&w) {
                v.ids.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    /// Template words, then style names, then category names.
    pub fn for_spec(spec: &SyntheticSpec) -> Self {
        Self::from_words(
            datagen::TEMPLATE_WORDS
                .iter()
                .copied()
                .chain(spec.styles.iter().map(String::as_str))
                .chain(spec.categories.iter().map(String::as_str)),
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lowercases and splits on anything that is not alphanumeric.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.id(w))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub dim: usize,
    pub seed: u64,
    /// Per-coordinate std of the noise added to factor-word embeddings.
    pub token_noise: f64,
    /// Norm scale of the embeddings of template/unknown words.
    pub filler_scale: f64,
    /// Fraction of each image-side code borrowed from the next class's code.
    pub domain_gap: f64,
    pub fit_per_cell: usize,
    pub ridge: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: DEFAULT_DIM,
            seed: 0,
            token_noise: 0.05,
            filler_scale: 0.5,
            domain_gap: 0.45,
            fit_per_cell: 40,
            ridge: 1.0,
        }
    }
}

/// Weights that no optimizer ever touches.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    /// V×D
    pub token_embedding: Tensor,
    /// GRID_LEN×D
    pub image_projection: Tensor,
    /// D
    pub image_bias: Tensor,
}

impl FrozenWeights {
    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in [&self.token_embedding, &self.image_projection, &self.image_bias] {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    vocab: Vocab,
    weights: FrozenWeights,
}

fn orthonormal_codes(count: usize, dim: usize, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(count);
    while codes.len() < count {
        let mut v = Tensor::normal(&[dim], 1.0, rng).into_data();
        for c in &codes {
            let p = tensor::dot(&v, c);
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
        if tensor::dot(&v, &v).sqrt() > 1e-6 {
            tensor::normalize_in_place(&mut v);
            codes.push(v);
        }
    }
    codes
}

impl Backbone {
    pub fn build(config: &BackboneConfig, spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (ks, kc, d) = (spec.num_styles(), spec.num_categories(), config.dim);
        if d < ks + kc {
            return Err(Error::Config(format!(
                "backbone dim {d} cannot hold {} orthogonal factor codes",
                ks + kc
            )));
        }
        if !(0.0..1.0).contains(&config.domain_gap) {
            return Err(Error::Config(format!(
                "domain_gap {} outside [0, 1)",
                config.domain_gap
            )));
        }
        let mut r = rng::stream(config.seed, streams::BACKBONE);
        let codes = orthonormal_codes(ks + kc, d, &mut r);
        let (style_codes, cat_codes) = codes.split_at(ks);

        let vocab = Vocab::for_spec(spec);
        let mut table = Tensor::zeros(&[vocab.len(), d]);
        for id in 0..vocab.len() {
            let word = vocab.word(id).unwrap_or(UNKNOWN_TOKEN);
            let code = spec
                .styles
                .iter()
                .position(|s| s == word)
                .map(|i| &style_codes[i])
                .or_else(|| spec.categories.iter().position(|c| c == word).map(|i| &cat_codes[i]));
            let row = match code {
                Some(code) => {
                    let noise = Tensor::normal(&[d], config.token_noise, &mut r);
                    code.iter().zip(noise.data()).map(|(c, n)| c + n).collect::<Vec<_>>()
                }
                None => Tensor::normal(&[d], config.filler_scale / (d as f64).sqrt(), &mut r).into_data(),
            };
            table.row_mut(id).copy_from_slice(&row);
        }

        let mix = |codes: &[Vec<f64>], i: usize| -> Vec<f64> {
            let next = &codes[(i + 1) % codes.len()];
            codes[i]
                .iter()
                .zip(next)
                .map(|(a, b)| (1.0 - config.domain_gap) * a + config.domain_gap * b)
                .collect()
        };
        let target = |s: usize, c: usize| -> Vec<f64> {
            mix(style_codes, s)
                .iter()
                .zip(mix(cat_codes, c))
                .map(|(a, b)| a + b)
                .collect()
        };

        let mut fit_rng = rng::stream(config.seed, streams::BACKBONE_FIT);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..kc {
            for s in 0..ks {
                let t = target(s, c);
                for _ in 0..config.fit_per_cell.max(1) {
                    xs.push(datagen::render_noisy(s, c, spec.noise, &mut fit_rng));
                    ys.push(t.clone());
                }
            }
        }
        let (image_projection, image_bias) = ridge_fit(&xs, &ys, config.ridge)?;

        Ok(Backbone {
            config: config.clone(),
            vocab,
            weights: FrozenWeights {
                token_embedding: table,
                image_projection,
                image_bias,
            },
        })
    }

    /// Rebuilds a backbone around explicit weights (e.g. a checkpoint of a
    /// contrastively pretrained one).
    pub fn with_weights(config: &BackboneConfig, spec: &SyntheticSpec, weights: FrozenWeights) -> Result<Self> {
        let vocab = Vocab::for_spec(spec);
        let d = config.dim;
        if weights.token_embedding.shape() != [vocab.len(), d]
            || weights.image_projection.shape() != [GRID_LEN, d]
            || weights.image_bias.shape() != [d]
        {
            return Err(Error::Config("backbone weight shapes do not match the config".into()));
        }
        Ok(Backbone {
            config: config.clone(),
            vocab,
            weights,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn weights(&self) -> &FrozenWeights {
        &self.weights
    }

    /// Mean of the token embeddings, normalized.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Feature> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty token list".into()));
        }
        let d = self.dim();
        let mut acc = vec![0.0; d];
        for &t in tokens {
            if t >= self.vocab.len() {
                return Err(Error::InvalidInput(format!("token id {t} outside vocabulary")));
            }
            acc.iter_mut()
                .zip(self.weights.token_embedding.row(t))
                .for_each(|(a, v)| *a += v);
        }
        let n = tokens.len() as f64;
        Feature::from_unnormalized(acc.into_iter().map(|v| v / n).collect())
    }

    pub fn embed_str(&self, text: &str) -> Result<Feature> {
        self.embed_text(&self.vocab.tokenize(text))
            .map_err(|e| Error::InvalidInput(format!("embedding {text:?}: {e}")))
    }

    /// Projects an 8×8×3 grid with values in [0, 1]. The projection carries
    /// a bias, so even the all-zero grid maps to a valid unit feature.
    pub fn embed_image(&self, grid: &[f64]) -> Result<Feature> {
        if grid.len() != GRID_LEN {
            return Err(Error::InvalidInput(format!(
                "image grid has {} values, expected {GRID_LEN}",
                grid.len()
            )));
        }
        if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        let d = self.dim();
        let w = &self.weights.image_projection;
        let mut out = self.weights.image_bias.data().to_vec();
        for (p, &x) in grid.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &w.data()[p * d..(p + 1) * d];
            out.iter_mut().zip(row).for_each(|(o, wv)| *o += x * wv);
        }
        Feature::from_unnormalized(out)
    }

    pub fn embed_images(&self, samples: &[ClassificationSample]) -> Result<Vec<Feature>> {
        samples.iter().map(|s| self.embed_image(&s.grid)).collect()
    }

    /// One prototype per class name rendered through `template`, whose
    /// `{}` marks where the name goes.
    pub fn embed_prompt_prototypes(&self, names: &[String], template: &str) -> Result<Vec<Feature>> {
        names
            .iter()
            .map(|n| self.embed_str(&template.replace("{}", n)))
            .collect()
    }

    /// Symmetric InfoNCE over (image, caption) pairs, updating the token
    /// table and image projection before they are frozen. Only for
    /// experiments; the default pipeline never calls it.
    pub fn pretrain_contrastive(&mut self, data: &[ClassificationSample], opts: &PretrainOptions) -> Result<()> {
        use rand::seq::SliceRandom;

        if data.is_empty() {
            return Err(Error::InvalidInput("contrastive pretraining needs data".into()));
        }
        let mut r = rng::stream(opts.seed, streams::PRETRAIN);
        let mut params = vec![
            self.weights.token_embedding.clone(),
            self.weights.image_projection.clone(),
            self.weights.image_bias.clone(),
        ];
        let mut adam = crate::train::optim::Adam::new(crate::train::optim::AdamConfig {
            lr: opts.lr,
            ..Default::default()
        });
        let v = self.vocab.len();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..opts.steps {
            order.shuffle(&mut r);
            let batch: Vec<&ClassificationSample> = order
                .iter()
                .take(opts.batch.min(data.len()))
                .map(|&i| &data[i])
                .collect();
            let n = batch.len();
            let mut avg = Tensor::zeros(&[n, v]);
            let mut images = Tensor::zeros(&[n, GRID_LEN]);
            for (i, s) in batch.iter().enumerate() {
                let toks = self.vocab.tokenize(&s.caption);
                for &t in &toks {
                    avg.row_mut(i)[t] += 1.0 / toks.len() as f64;
                }
                images.row_mut(i).copy_from_slice(&s.grid);
            }
            let mut g = Graph::new();
            let table = g.param(params[0].clone());
            let proj = g.param(params[1].clone());
            let bias = g.param(params[2].clone());
            let avg = g.constant(avg);
            let images = g.constant(images);
            let txt = g.matmul(avg, table)?;
            let txt = g.normalize_rows(txt);
            let img = g.matmul(images, proj)?;
            let img = g.add_row(img, bias)?;
            let img = g.normalize_rows(img);
            let txt_t = g.transpose(txt)?;
            let sim = g.matmul(img, txt_t)?;
            let logits = g.scale(sim, 1.0 / opts.temperature);
            let diag: Vec<usize> = (0..n).collect();
            let rows = g.log_softmax(logits, 1)?;
            let rows = g.pick(rows, &diag)?;
            let cols = g.log_softmax(logits, 0)?;
            let cols_t = g.transpose(cols)?;
            let cols = g.pick(cols_t, &diag)?;
            let both = g.add(rows, cols)?;
            let mean = g.mean(both);
            let loss = g.scale(mean, -0.5);
            g.backward(loss)?;
            let grads: Vec<Tensor> = [table, proj, bias]
                .iter()
                .map(|&p| g.grad(p).cloned().expect("trainable leaf has a gradient"))
                .collect();
            adam.step(&mut params, &grads);
        }
        let [table, proj, bias]: [Tensor; 3] = params.try_into().expect("three tensors");
        self.weights = FrozenWeights {
            token_embedding: table,
            image_projection: proj,
            image_bias: bias,
        };
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub steps: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 100,
            temperature: 0.07,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

/// Ridge regression with an unpenalized intercept: returns (W, b) with
/// `y ≈ x W + b`.
fn ridge_fit(xs: &[Vec<f64>], ys: &[Vec<f64>], ridge: f64) -> Result<(Tensor, Tensor)> {
    let n = xs.len();
    let p = xs[0].len();
    let d = ys[0].len();
    let mut x_mean = vec![0.0; p];
    let mut y_mean = vec![0.0; d];
    for (x, y) in xs.iter().zip(ys) {
        x_mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n as f64);
        y_mean.iter_mut().zip(y).for_each(|(m, v)| *m += v / n as f64);
    }
    let xc = DMatrix::from_fn(n, p, |i, j| xs[i][j] - x_mean[j]);
    let yc = DMatrix::from_fn(n, d, |i, j| ys[i][j] - y_mean[j]);
    let mut gram = xc.transpose() * &xc;
    for i in 0..p {
        gram[(i, i)] += ridge;
    }
    let rhs = xc.transpose() * yc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge system is not positive definite".into()))?;
    let w = chol.solve(&rhs);
    let xm = DVector::from_column_slice(&x_mean);
    let b = DVector::from_column_slice(&y_mean) - w.transpose() * xm;
    let mut wdata = Vec::with_capacity(p * d);
    for i in 0..p {
        for j in 0..d {
            wdata.push(w[(i, j)]);
        }
    }
    Ok((
        Tensor::matrix(p, d, wdata)?,
        Tensor::vector(b.iter().copied().collect()),
    ))
}
