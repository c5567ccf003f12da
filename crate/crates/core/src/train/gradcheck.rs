//! Finite-difference audit of every training objective and of the split
//! cross-attention block.
//!
//! Each component is checked on `seeds` random configurations. Near a ReLU
//! or hinge kink the central difference is meaningless, so a configuration
//! whose difference quotient changes between `eps` and `2·eps` is redrawn.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    ddpm_loss, noise_batch, split_cross_attention, DenoiserConfig, DenoiserParams, DenoiserVars, DiffusionSchedule,
    GuidanceCondition, Point,
};
use crate::encoders::AdapterVars;
use crate::error::{Error, Result};
use crate::losses::{
    category_labeled_loss, category_triplet_loss, style_labeled_loss, style_triplet_loss, AdversarialMode,
    LabeledBatch, LossConfig, LossParts, PromptBank,
};
use crate::rng::{self, streams};
use crate::tensor::{finite_diff_grad, relative_error, Graph, Tensor, Var, DEFAULT_EPS};

pub const DEFAULT_SEEDS: usize = 20;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const MAX_REDRAWS: usize = 50;

pub const COMPONENTS: [&str; 12] = [
    "style_ce",
    "style_confusion_uniform_kl",
    "style_confusion_negated_ce",
    "style_labeled",
    "category_ce",
    "category_confusion_uniform_kl",
    "category_confusion_negated_ce",
    "category_labeled",
    "style_triplet",
    "category_triplet",
    "split_cross_attention",
    "ddpm_loss",
];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the reverse-mode gradient of the named component before
    /// comparison. Used to confirm the suite can fail.
    pub inject_sign_flip: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: DEFAULT_SEEDS,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            inject_sign_flip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub worst_error: f64,
    pub configurations: usize,
    pub redraws: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>12} {:>8} {:>8}  result",
            "component", "worst_rel", "configs", "redraws"
        )?;
        for c in &self.components {
            writeln!(
                f,
                "{:<32} {:>12.3e} {:>8} {:>8}  {}",
                c.name,
                c.worst_error,
                c.configurations,
                c.redraws,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "tolerance {:.0e}: {}",
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Problem {
    params: Vec<Tensor>,
    build: Build,
}

fn unit_rows(n: usize, d: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::normal(&[n, d], 1.0, r);
    for i in 0..n {
        crate::tensor::normalize_in_place(t.row_mut(i));
    }
    t
}

fn labels(n: usize, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

fn adapter_params(d: usize, h: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        Tensor::normal(&[d, h], 0.5, r),
        Tensor::normal(&[h], 0.3, r),
        Tensor::normal(&[h, d], 0.5, r),
        Tensor::normal(&[d], 0.3, r),
    ]
}

fn adapter_vars(v: &[Var]) -> AdapterVars {
    AdapterVars {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    }
}

const D: usize = 8;
const H: usize = 3;

fn labeled_problem(name: &str, r: &mut ChaCha8Rng) -> Problem {
    let n = 6;
    let batch = LabeledBatch {
        images: unit_rows(n, D, r),
        style: labels(n, 3, r),
        category: labels(n, 4, r),
    };
    let prompts = PromptBank {
        style: unit_rows(3, D, r),
        category: unit_rows(4, D, r),
    };
    let mode = if name.ends_with("negated_ce") {
        AdversarialMode::NegatedCe
    } else {
        AdversarialMode::UniformKl
    };
    let cfg = LossConfig {
        lambda1: r.random_range(0.1..1.0),
        lambda2: r.random_range(0.1..1.0),
        adversarial_mode: mode,
        logit_scale: r.random_range(2.0..20.0),
        ..LossConfig::default()
    };
    let style = name.starts_with("style");
    let part: fn(&LossParts) -> Var = if name.ends_with("_ce") && !name.contains("confusion") {
        |p| p.ce
    } else if name.contains("confusion") {
        |p| p.confusion
    } else {
        |p| p.total
    };
    Problem {
        params: adapter_params(D, H, r),
        build: Box::new(move |g, v| {
            let a = adapter_vars(v);
            let parts = if style {
                style_labeled_loss(g, &a, &batch, &prompts, &cfg)?
            } else {
                category_labeled_loss(g, &a, &batch, &prompts, &cfg)?
            };
            Ok(part(&parts))
        }),
    }
}

fn triplet_problem(style: bool, r: &mut ChaCha8Rng) -> Problem {
    let n = 6;
    let text = unit_rows(n, D, r);
    let images = unit_rows(n, D, r);
    let other = unit_rows(n, D, r);
    // A wide margin keeps most hinges active.
    let margin = r.random_range(0.3..2.0);
    Problem {
        params: adapter_params(D, H, r),
        build: Box::new(move |g, v| {
            let a = adapter_vars(v);
            let x = g.constant(text.clone());
            let f = a.encode(g, x)?;
            if style {
                style_triplet_loss(g, f, &images, &other, margin)
            } else {
                category_triplet_loss(g, f, &images, &other, margin)
            }
        }),
    }
}

fn small_denoiser(r: &mut ChaCha8Rng) -> Result<DenoiserParams> {
    let cfg = DenoiserConfig {
        width: 5,
        cond_dim: 4,
        tokens: 2,
        steps: 8,
    };
    let mut p = DenoiserParams::init(&cfg, r)?;
    for t in p.tensors_mut() {
        let noise = Tensor::normal(t.shape(), 0.3, r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    Ok(p)
}

fn condition(r: &mut ChaCha8Rng, tokens: usize, dim: usize) -> GuidanceCondition {
    GuidanceCondition {
        style: unit_rows(tokens, dim, r),
        category: unit_rows(tokens, dim, r),
    }
}

fn denoiser_vars(v: &[Var]) -> DenoiserVars {
    DenoiserVars {
        temb: v[0],
        w_in: v[1],
        b_in: v[2],
        w_q: v[3],
        w_k: v[4],
        w_v: v[5],
        w_o: v[6],
        w1: v[7],
        b1: v[8],
        w2: v[9],
        b2: v[10],
        pos: v[11],
        b_o: v[12],
    }
}

/// The block's output contracted with a fixed random matrix; the hidden
/// input is checked along with the block's own parameters.
fn attention_problem(r: &mut ChaCha8Rng) -> Result<Problem> {
    let p = small_denoiser(r)?;
    let cond = condition(r, 2, 4);
    let n = 4;
    let h = Tensor::normal(&[n, 5], 1.0, r);
    let weights = Tensor::normal(&[n, 5], 1.0, r);
    let mut params: Vec<Tensor> = p.tensors().iter().map(|t| (*t).clone()).collect();
    params.push(h);
    Ok(Problem {
        params,
        build: Box::new(move |g, v| {
            let dv = denoiser_vars(v);
            let out = split_cross_attention(g, v[13], &cond, &dv)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        }),
    })
}

fn ddpm_problem(r: &mut ChaCha8Rng) -> Result<Problem> {
    let p = small_denoiser(r)?;
    let conds = vec![condition(r, 2, 4), condition(r, 2, 4)];
    let schedule = DiffusionSchedule::linear(8, 1e-4, 0.02)?;
    let n = 6;
    let batch: Vec<Point> = (0..n)
        .map(|i| Point {
            xy: [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
            cond: i % 2,
        })
        .collect();
    let t: Vec<usize> = (0..n).map(|_| r.random_range(0..8)).collect();
    let eps = Tensor::normal(&[n, 2], 1.0, r);
    let nb = noise_batch(&batch, &t, &eps, &schedule)?;
    Ok(Problem {
        params: p.tensors().iter().map(|t| (*t).clone()).collect(),
        build: Box::new(move |g, v| ddpm_loss(g, &denoiser_vars(v), &nb, &conds)),
    })
}

fn problem(name: &str, r: &mut ChaCha8Rng) -> Result<Problem> {
    Ok(match name {
        "style_triplet" => triplet_problem(true, r),
        "category_triplet" => triplet_problem(false, r),
        "split_cross_attention" => attention_problem(r)?,
        "ddpm_loss" => ddpm_problem(r)?,
        other if other.starts_with("style_") || other.starts_with("category_") => labeled_problem(other, r),
        other => return Err(Error::InvalidInput(format!("unknown gradcheck component {other:?}"))),
    })
}

fn evaluate(p: &Problem, params: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    match (p.build)(&mut g, &vars) {
        Ok(v) => g.value(v).item(),
        Err(_) => f64::NAN,
    }
}

fn numeric(p: &Problem, i: usize, eps: f64) -> Tensor {
    let mut params = p.params.clone();
    finite_diff_grad(
        |x| {
            params[i] = x.clone();
            evaluate(p, &params)
        },
        &p.params[i],
        eps,
    )
}

/// Worst per-tensor relative error, or `None` when a kink sits within the
/// difference stencil.
fn check(p: &Problem, flip: bool, tolerance: f64) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = p.params.iter().map(|t| g.param(t.clone())).collect();
    let loss = (p.build)(&mut g, &vars)?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let mut analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.params[i].shape()));
        if flip {
            analytic = analytic.map(|x| -x);
        }
        let fd = numeric(p, i, DEFAULT_EPS);
        if !fd.all_finite() || !analytic.all_finite() {
            return Err(Error::Numerical("non-finite gradient during gradcheck".into()));
        }
        if relative_error(&fd, &numeric(p, i, 2.0 * DEFAULT_EPS)) > tolerance / 10.0 {
            return Ok(None);
        }
        worst = worst.max(relative_error(&analytic, &fd));
    }
    Ok(Some(worst))
}

pub fn run_component(name: &str, opts: &GradcheckOptions) -> Result<ComponentResult> {
    let index = COMPONENTS
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown gradcheck component {name:?}")))?;
    let flip = opts.inject_sign_flip.as_deref() == Some(name);
    let mut r = rng::stream(rng::derive_seed(opts.seed, streams::GRADCHECK), index as u64);
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    for _ in 0..opts.seeds {
        loop {
            let p = problem(name, &mut r)?;
            match check(&p, flip, opts.tolerance)? {
                Some(e) => {
                    worst = worst.max(e);
                    break;
                }
                None if redraws < MAX_REDRAWS * opts.seeds.max(1) => redraws += 1,
                None => {
                    return Err(Error::Numerical(format!(
                        "{name}: could not draw a kink-free configuration"
                    )));
                }
            }
        }
    }
    Ok(ComponentResult {
        name: name.to_string(),
        worst_error: worst,
        configurations: opts.seeds,
        redraws,
        passed: worst < opts.tolerance,
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if let Some(f) = &opts.inject_sign_flip {
        if !COMPONENTS.contains(&f.as_str()) {
            return Err(Error::InvalidInput(format!("unknown gradcheck component {f:?}")));
        }
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        components: COMPONENTS
            .iter()
            .map(|c| run_component(c, opts))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(seeds: usize) -> GradcheckOptions {
        GradcheckOptions {
            seeds,
            ..Default::default()
        }
    }

    #[test]
    fn every_component_passes() {
        let rep = run_gradcheck(&opts(3)).unwrap();
        assert!(rep.passed(), "{rep}");
        assert_eq!(rep.components.len(), COMPONENTS.len());
    }

    #[test]
    fn sign_flip_is_caught() {
        for name in ["style_triplet", "category_labeled", "split_cross_attention"] {
            let o = GradcheckOptions {
                inject_sign_flip: Some(name.into()),
                ..opts(2)
            };
            let c = run_component(name, &o).unwrap();
            assert!(!c.passed);
            assert!(c.worst_error > 1.0);
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert!(run_component("nope", &opts(1)).is_err());
        let o = GradcheckOptions {
            inject_sign_flip: Some("nope".into()),
            ..opts(1)
        };
        assert!(run_gradcheck(&o).is_err());
    }
}
