//! Style and category encoders: frozen text features refined by a small
//! residual adapter each, plus the residual blend with the frozen feature.

use rand::Rng;

use crate::backbone::{self, Backbone, Feature};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{self, Graph, Tensor, Var};

pub const STYLE_TEMPLATE: &str = "a photo of {} style";
pub const CATEGORY_TEMPLATE: &str = "a photo of a {}";

pub const DEFAULT_STYLE_ALPHA: f64 = 0.8;
pub const DEFAULT_CATEGORY_ALPHA: f64 = 0.4;
pub const GENERATION_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Factor {
    Style,
    Category,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Style => "style",
            Factor::Category => "category",
        }
    }

    pub fn other(self) -> Factor {
        match self {
            Factor::Style => Factor::Category,
            Factor::Category => Factor::Style,
        }
    }
}

/// `A(f) = relu(f W1 + b1) W2 + b2`, applied to row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AdapterParams {
    /// `W1 ~ U(±1/√D)`, everything else zero, so the adapter starts as the
    /// zero map.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "adapter dims must be positive (D={dim}, H={hidden})"
            )));
        }
        Ok(AdapterParams {
            w1: Tensor::uniform(&[dim, hidden], 1.0 / (dim as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        })
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        AdapterParams {
            w1: Tensor::zeros(&[dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn from_vec(mut v: Vec<Tensor>) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::InvalidInput(format!("adapter needs 4 tensors, got {}", v.len())));
        }
        let b2 = v.pop().unwrap();
        let w2 = v.pop().unwrap();
        let b1 = v.pop().unwrap();
        let w1 = v.pop().unwrap();
        let p = AdapterParams { w1, b1, w2, b2 };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let (d, h) = (self.dim(), self.hidden());
        if self.w1.rank() != 2 || self.b1.shape() != [h] || self.w2.shape() != [h, d] || self.b2.shape() != [d] {
            return Err(Error::InvalidInput("inconsistent adapter shapes".into()));
        }
        Ok(())
    }

    pub fn attach(&self, g: &mut Graph) -> AdapterVars {
        AdapterVars {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
        }
    }

    /// Same as [`AdapterParams::attach`] but with every tensor frozen.
    pub fn attach_frozen(&self, g: &mut Graph) -> AdapterVars {
        AdapterVars {
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl AdapterVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars()
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect()
    }

    /// Adapter output for each row of `x` (n×D), not normalized.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.relu(h);
        let a = g.matmul(h, self.w2)?;
        g.add_row(a, self.b2)
    }

    /// `normalize(x + A(x))` row-wise: the encoder output.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.forward(g, x)?;
        let r = g.add(x, a)?;
        Ok(g.normalize_rows(r))
    }
}

/// Plain evaluation of the adapter on one feature.
pub fn adapter_forward(f: &[f64], p: &AdapterParams) -> Result<Vec<f64>> {
    if f.len() != p.dim() {
        return Err(Error::Shape {
            op: "adapter_forward",
            left: vec![f.len()],
            right: p.w1.shape().to_vec(),
        });
    }
    let x = Tensor::matrix(1, f.len(), f.to_vec())?;
    let mut h = tensor::matmul(&x, &p.w1)?;
    h.data_mut()
        .iter_mut()
        .zip(p.b1.data())
        .for_each(|(v, b)| *v = (*v + b).max(0.0));
    let mut a = tensor::matmul(&h, &p.w2)?;
    a.data_mut().iter_mut().zip(p.b2.data()).for_each(|(v, b)| *v += b);
    Ok(a.into_data())
}

/// Encoder output for a frozen text feature: `normalize(f + A(f))`.
pub fn adapt(f: &Feature, p: &AdapterParams) -> Result<Feature> {
    let a = adapter_forward(f.as_slice(), p)?;
    Feature::from_unnormalized(f.as_slice().iter().zip(&a).map(|(x, y)| x + y).collect())
}

/// `normalize(α·adapted + (1−α)·frozen)`. The endpoints return their input
/// unchanged.
pub fn blend(adapted: &Feature, frozen: &Feature, alpha: f64) -> Result<Feature> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("residual ratio {alpha} outside [0, 1]")));
    }
    if adapted.dim() != frozen.dim() {
        return Err(Error::Shape {
            op: "blend",
            left: vec![adapted.dim()],
            right: vec![frozen.dim()],
        });
    }
    if alpha == 0.0 {
        return Ok(frozen.clone());
    }
    if alpha == 1.0 {
        return Ok(adapted.clone());
    }
    Feature::from_unnormalized(
        adapted
            .as_slice()
            .iter()
            .zip(frozen.as_slice())
            .map(|(a, f)| alpha * a + (1.0 - alpha) * f)
            .collect(),
    )
}

/// The frozen backbone plus one adapter per factor.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub backbone: Backbone,
    pub style: AdapterParams,
    pub category: AdapterParams,
}

impl Encoders {
    /// Hidden width defaults to D/4.
    pub fn new(backbone: Backbone, seed: u64) -> Result<Self> {
        let d = backbone.dim();
        let h = (d / 4).max(1);
        let mut r = rng::stream(seed, streams::ADAPTER_INIT);
        let style = AdapterParams::init(d, h, &mut r)?;
        let category = AdapterParams::init(d, h, &mut r)?;
        Ok(Encoders {
            backbone,
            style,
            category,
        })
    }

    pub fn adapter(&self, f: Factor) -> &AdapterParams {
        match f {
            Factor::Style => &self.style,
            Factor::Category => &self.category,
        }
    }

    pub fn adapter_mut(&mut self, f: Factor) -> &mut AdapterParams {
        match f {
            Factor::Style => &mut self.style,
            Factor::Category => &mut self.category,
        }
    }

    pub fn encode(&self, factor: Factor, tokens: &[usize]) -> Result<Feature> {
        adapt(&self.backbone.embed_text(tokens)?, self.adapter(factor))
    }

    pub fn encode_style(&self, tokens: &[usize]) -> Result<Feature> {
        self.encode(Factor::Style, tokens)
    }

    pub fn encode_category(&self, tokens: &[usize]) -> Result<Feature> {
        self.encode(Factor::Category, tokens)
    }

    pub fn encode_str(&self, factor: Factor, text: &str) -> Result<Feature> {
        adapt(&self.backbone.embed_str(text)?, self.adapter(factor))
    }

    pub fn template(factor: Factor) -> &'static str {
        match factor {
            Factor::Style => STYLE_TEMPLATE,
            Factor::Category => CATEGORY_TEMPLATE,
        }
    }

    /// Frozen prompt features for the classes of `factor`.
    pub fn frozen_prototypes(&self, factor: Factor, names: &[String]) -> Result<Vec<Feature>> {
        self.backbone.embed_prompt_prototypes(names, Self::template(factor))
    }

    /// Prototypes for `factor`'s classes as seen by `encoder`, blended with
    /// the frozen ones at `alpha`.
    pub fn blended_prototypes(
        &self,
        encoder: Factor,
        factor: Factor,
        names: &[String],
        alpha: f64,
    ) -> Result<Vec<Feature>> {
        self.frozen_prototypes(factor, names)?
            .iter()
            .map(|f| blend(&adapt(f, self.adapter(encoder))?, f, alpha))
            .collect()
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.backbone.weights().checksum()
    }
}

/// Stacks features for use as graph constants.
pub fn feature_matrix(features: &[Feature]) -> Result<Tensor> {
    backbone::stack(features)
}
