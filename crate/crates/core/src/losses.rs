//! Training objectives. Every loss is built on a [`Graph`] so the trainer
//! and the gradient checker share one implementation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Feature;
use crate::encoders::AdapterVars;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialMode {
    /// Cross-entropy against the uniform distribution.
    #[default]
    UniformKl,
    /// The opposing attribute's cross-entropy, negated.
    NegatedCe,
}

impl FromStr for AdversarialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-kl" => Ok(AdversarialMode::UniformKl),
            "negated-ce" => Ok(AdversarialMode::NegatedCe),
            other => Err(Error::Config(format!(
                "unknown adversarial mode {other:?} (expected uniform-kl or negated-ce)"
            ))),
        }
    }
}

impl fmt::Display for AdversarialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversarialMode::UniformKl => "uniform-kl",
            AdversarialMode::NegatedCe => "negated-ce",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin1: f64,
    pub margin2: f64,
    pub adversarial_mode: AdversarialMode,
    pub logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.2,
            lambda2: 0.3,
            margin1: 0.3,
            margin2: 0.3,
            adversarial_mode: AdversarialMode::UniformKl,
            logit_scale: 20.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(Error::Config("lambda1/lambda2 must be finite and >= 0".into()));
        }
        if !ok(self.margin1) || !ok(self.margin2) {
            return Err(Error::Config("margins must be finite and >= 0".into()));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// `s · cos(f, p_k)` for each prototype.
pub fn class_logits(f: &Feature, prototypes: &[Feature], scale: f64) -> Vec<f64> {
    prototypes.iter().map(|p| scale * f.cosine(p)).collect()
}

/// Scaled cosine logits between the rows of two unit-row matrices:
/// features n×D against prototypes K×D gives n×K.
pub fn logits(g: &mut Graph, features: Var, prototypes: Var, scale: f64) -> Result<Var> {
    let pt = g.transpose(prototypes)?;
    let sim = g.matmul(features, pt)?;
    Ok(g.scale(sim, scale))
}

/// Mean over the batch of `−log_softmax(logits)[label]`.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = g.log_softmax(logits, 1)?;
    let picked = g.pick(ls, labels)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Pushes predictions toward uniform. `labels` only matter in
/// [`AdversarialMode::NegatedCe`].
pub fn confusion_loss(g: &mut Graph, logits: Var, labels: &[usize], mode: AdversarialMode) -> Result<Var> {
    match mode {
        AdversarialMode::UniformKl => {
            let ls = g.log_softmax(logits, 1)?;
            let m = g.mean(ls);
            Ok(g.neg(m))
        }
        AdversarialMode::NegatedCe => {
            let ce = ce_loss(g, logits, labels)?;
            Ok(g.neg(ce))
        }
    }
}

/// Mean over rows of `max(‖a − p‖ − ‖a − n‖ + m, 0)`.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let dp = g.row_l2_distance(anchor, positive)?;
    let dn = g.row_l2_distance(anchor, negative)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// Style triplet: the style feature is pulled to the image and pushed from
/// the category feature. `f_c` enters as data, so no gradient reaches the
/// category encoder.
pub fn style_triplet_loss(g: &mut Graph, f_s: Var, f_i: &Tensor, f_c: &Tensor, margin1: f64) -> Result<Var> {
    let fi = g.constant(f_i.clone());
    let fc = g.constant(f_c.clone());
    triplet_loss(g, f_s, fi, fc, margin1)
}

/// Mirror of [`style_triplet_loss`] with the roles swapped.
pub fn category_triplet_loss(g: &mut Graph, f_c: Var, f_i: &Tensor, f_s: &Tensor, margin2: f64) -> Result<Var> {
    let fi = g.constant(f_i.clone());
    let fs = g.constant(f_s.clone());
    triplet_loss(g, f_c, fi, fs, margin2)
}

/// Frozen inputs of a labeled step.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    /// n×D frozen image features.
    pub images: Tensor,
    pub style: Vec<usize>,
    pub category: Vec<usize>,
}

/// Frozen prompt features for every class, K_s×D and K_c×D.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub style: Tensor,
    pub category: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub confusion: Var,
}

/// Logits of the image features against the prompts of one factor, as
/// adapted by `adapter`.
pub fn adapted_logits(g: &mut Graph, adapter: &AdapterVars, images: Var, prompts: &Tensor, scale: f64) -> Result<Var> {
    let p = g.constant(prompts.clone());
    let protos = adapter.encode(g, p)?;
    logits(g, images, protos, scale)
}

fn labeled_loss(
    g: &mut Graph,
    adapter: &AdapterVars,
    batch: &LabeledBatch,
    own: (&Tensor, &[usize]),
    other: (&Tensor, &[usize]),
    lambda: f64,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let images = g.constant(batch.images.clone());
    let own_logits = adapted_logits(g, adapter, images, own.0, cfg.logit_scale)?;
    let ce = ce_loss(g, own_logits, own.1)?;
    let other_logits = adapted_logits(g, adapter, images, other.0, cfg.logit_scale)?;
    let confusion = confusion_loss(g, other_logits, other.1, cfg.adversarial_mode)?;
    let total = if lambda == 0.0 {
        ce
    } else {
        let weighted = g.scale(confusion, lambda);
        g.add(ce, weighted)?
    };
    Ok(LossParts { total, ce, confusion })
}

/// `CE(style) + λ₁ · confusion(category)` for the style encoder.
pub fn style_labeled_loss(
    g: &mut Graph,
    style: &AdapterVars,
    batch: &LabeledBatch,
    prompts: &PromptBank,
    cfg: &LossConfig,
) -> Result<LossParts> {
    labeled_loss(
        g,
        style,
        batch,
        (&prompts.style, &batch.style),
        (&prompts.category, &batch.category),
        cfg.lambda1,
        cfg,
    )
}

/// `CE(category) + λ₂ · confusion(style)` for the category encoder.
pub fn category_labeled_loss(
    g: &mut Graph,
    category: &AdapterVars,
    batch: &LabeledBatch,
    prompts: &PromptBank,
    cfg: &LossConfig,
) -> Result<LossParts> {
    labeled_loss(
        g,
        category,
        batch,
        (&prompts.category, &batch.category),
        (&prompts.style, &batch.style),
        cfg.lambda2,
        cfg,
    )
}

/// Frozen inputs of an unlabeled step: per-sample text features of the
/// decomposed caption halves and the image features, all n×D.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub style_text: Tensor,
    pub category_text: Tensor,
    pub images: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error, DEFAULT_EPS};
    use std::f64::consts::LN_2;

    fn eval(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = build(&mut g);
        g.value(v).item()
    }

    fn unit(v: &[f64]) -> Feature {
        Feature::from_unnormalized(v.to_vec()).unwrap()
    }

    #[test]
    fn logits_examples() {
        let protos = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let l = class_logits(&unit(&[1.0, 0.0]), &protos, 20.0);
        assert!(l[0] > l[1]);
        let f = unit(&[0.3, 0.7]);
        for s in [0.5, 1.0, 20.0, 100.0] {
            let l = class_logits(&f, &protos, s);
            assert!(l[1] > l[0]);
        }
        let tiny = class_logits(&f, &protos, 1e-12);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(tiny));
        let sm = g.softmax(v, 0).unwrap();
        assert!(g.value(sm).data().iter().all(|p| (p - 0.5).abs() < 1e-9));
    }

    #[test]
    fn ce_examples() {
        for k in [2usize, 3, 4, 7] {
            let v = eval(|g| {
                let l = g.constant(Tensor::zeros(&[1, k]));
                ce_loss(g, l, &[0]).unwrap()
            });
            assert!((v - (k as f64).ln()).abs() < 1e-12);
        }
        let v = eval(|g| {
            let l = g.constant(Tensor::matrix(1, 3, vec![1000.0, 0.0, 0.0]).unwrap());
            ce_loss(g, l, &[0]).unwrap()
        });
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn confusion_examples() {
        let k = 4usize;
        let uni = |mode| {
            eval(|g| {
                let l = g.constant(Tensor::zeros(&[2, k]));
                confusion_loss(g, l, &[1, 2], mode).unwrap()
            })
        };
        assert!((uni(AdversarialMode::UniformKl) - (k as f64).ln()).abs() < 1e-12);
        assert!((uni(AdversarialMode::NegatedCe) + (k as f64).ln()).abs() < 1e-12);
        let sat = eval(|g| {
            let l = g.constant(Tensor::matrix(1, 4, vec![50.0, 0.0, 0.0, 0.0]).unwrap());
            confusion_loss(g, l, &[0], AdversarialMode::UniformKl).unwrap()
        });
        assert!(sat > (k as f64).ln());
        assert!("bogus".parse::<AdversarialMode>().is_err());
        assert_eq!(
            "negated-ce".parse::<AdversarialMode>().unwrap(),
            AdversarialMode::NegatedCe
        );
    }

    #[test]
    fn minimizing_uniform_kl_reaches_uniform() {
        let mut x = Tensor::vector(vec![2.0, -1.0, 0.5, 3.0]).reshape(vec![1, 4]).unwrap();
        for _ in 0..200 {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let l = confusion_loss(&mut g, v, &[0], AdversarialMode::UniformKl).unwrap();
            g.backward(l).unwrap();
            let grad = g.grad(v).unwrap().clone();
            x.data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(a, b)| *a -= 2.0 * b);
        }
        let mut g = Graph::new();
        let v = g.constant(x);
        let sm = g.softmax(v, 1).unwrap();
        assert!(g.value(sm).data().iter().all(|p| (p - 0.25).abs() < 1e-3));
    }

    fn triplet(dp: f64, dn: f64, m: f64) -> f64 {
        eval(|g| {
            let a = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
            let p = g.constant(Tensor::matrix(1, 2, vec![dp, 0.0]).unwrap());
            let n = g.constant(Tensor::matrix(1, 2, vec![0.0, dn]).unwrap());
            triplet_loss(g, a, p, n, m).unwrap()
        })
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet(0.1, 0.5, 0.3), 0.0);
        assert_eq!(triplet(0.5, 0.1, 0.3), f64::max(0.5 - 0.1 + 0.3, 0.0));
        let v = eval(|g| {
            let f = Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap();
            let fs = g.constant(f.clone());
            style_triplet_loss(g, fs, &f, &f, 0.3).unwrap()
        });
        assert_eq!(v, 0.3);
        assert_eq!(triplet(0.2, 0.5, 0.3), 0.0);
    }

    #[test]
    fn triplet_does_not_reach_the_negative() {
        let mut g = Graph::new();
        let fs = g.param(Tensor::matrix(1, 2, vec![0.5, 0.1]).unwrap());
        let fi = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let fc = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let l = style_triplet_loss(&mut g, fs, &fi, &fc, 0.3).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(fs).unwrap().clone();
        let fd = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let v = g.constant(t.clone());
                let l = style_triplet_loss(&mut g, v, &fi, &fc, 0.3).unwrap();
                g.value(l).item()
            },
            &Tensor::matrix(1, 2, vec![0.5, 0.1]).unwrap(),
            DEFAULT_EPS,
        );
        assert!(relative_error(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn lambda_zero_is_plain_ce() {
        use crate::encoders::AdapterParams;
        use crate::rng;
        let mut r = rng::stream(4, 0);
        let p = AdapterParams::init(6, 2, &mut r).unwrap();
        let norm_rows = |t: Tensor| {
            let mut t = t;
            for i in 0..t.rows() {
                crate::tensor::normalize_in_place(t.row_mut(i));
            }
            t
        };
        let prompts = PromptBank {
            style: norm_rows(Tensor::normal(&[3, 6], 1.0, &mut r)),
            category: norm_rows(Tensor::normal(&[4, 6], 1.0, &mut r)),
        };
        let batch = LabeledBatch {
            images: norm_rows(Tensor::normal(&[5, 6], 1.0, &mut r)),
            style: vec![0, 1, 2, 0, 1],
            category: vec![3, 2, 1, 0, 0],
        };
        let cfg = LossConfig {
            lambda1: 0.0,
            ..Default::default()
        };
        let mut g = Graph::new();
        let vars = p.attach(&mut g);
        let parts = style_labeled_loss(&mut g, &vars, &batch, &prompts, &cfg).unwrap();
        let mut g2 = Graph::new();
        let vars2 = p.attach(&mut g2);
        let images = g2.constant(batch.images.clone());
        let l = adapted_logits(&mut g2, &vars2, images, &prompts.style, cfg.logit_scale).unwrap();
        let ce = ce_loss(&mut g2, l, &batch.style).unwrap();
        assert_eq!(g.value(parts.total).item().to_bits(), g2.value(ce).item().to_bits());
        assert!(LossConfig {
            lambda1: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ln2_sanity() {
        let v = eval(|g| {
            let l = g.constant(Tensor::zeros(&[3, 2]));
            ce_loss(g, l, &[0, 1, 1]).unwrap()
        });
        assert!((v - LN_2).abs() < 1e-12);
    }
}
