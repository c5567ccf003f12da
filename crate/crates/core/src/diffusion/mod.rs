//! Toy conditional DDPM on 2-D points, conditioned through split
//! cross-attention: keys come from the style condition and values from the
//! category condition.

pub mod model;
pub mod oracle;
pub mod schedule;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoders::{blend, Encoders, Factor};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub use model::{
    attention, cross_attention, denoise, split_cross_attention, DenoiserConfig, DenoiserParams, DenoiserVars, Segment,
};
pub use oracle::{oracle_classify, Oracle};
pub use schedule::DiffusionSchedule;

/// Condition tokens for the two attention inputs, each L×D with unit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceCondition {
    pub style: Tensor,
    pub category: Tensor,
}

/// `τ_style = blend(f_s, f_text, α)` and `τ_category = blend(f_c, f_text, α)`,
/// with `f_text` the frozen embedding of the full caption. Each is repeated
/// into `tokens` rows.
pub fn build_conditions(
    style_text: &str,
    category_text: &str,
    caption: &str,
    encoders: &Encoders,
    alpha: f64,
    tokens: usize,
) -> Result<GuidanceCondition> {
    if tokens == 0 {
        return Err(Error::Config("condition needs at least one token".into()));
    }
    let f_text = encoders.backbone.embed_str(caption)?;
    let f_s = encoders.encode_str(Factor::Style, style_text)?;
    let f_c = encoders.encode_str(Factor::Category, category_text)?;
    let ts = blend(&f_s, &f_text, alpha)?;
    let tc = blend(&f_c, &f_text, alpha)?;
    let rep = |f: &crate::backbone::Feature| Tensor::from_rows(&vec![f.as_slice(); tokens]);
    Ok(GuidanceCondition {
        style: rep(&ts)?,
        category: rep(&tc)?,
    })
}

/// One training example for the denoiser: a clean point and the index of its
/// condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub xy: [f64; 2],
    pub cond: usize,
}

/// Noised inputs of one step: `z_t`, the steps, the true noise, and the row
/// segments per condition. Rows are grouped by condition.
pub struct NoisedBatch {
    pub z_t: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub segments: Vec<(usize, usize)>,
}

/// Groups `batch` by condition and forms `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε`.
pub fn noise_batch(batch: &[Point], t: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<NoisedBatch> {
    let n = batch.len();
    if t.len() != n || eps.shape() != [n, 2] {
        return Err(Error::InvalidInput(
            "noise_batch: mismatched batch, steps, and noise".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (batch[i].cond, i));
    let mut z = Tensor::zeros(&[n, 2]);
    let mut e = Tensor::zeros(&[n, 2]);
    let mut ts = Vec::with_capacity(n);
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for (row, &i) in order.iter().enumerate() {
        let ab = schedule.alpha_bars[t[i]];
        for d in 0..2 {
            e.row_mut(row)[d] = eps.row(i)[d];
            z.row_mut(row)[d] = ab.sqrt() * batch[i].xy[d] + (1.0 - ab).sqrt() * eps.row(i)[d];
        }
        ts.push(t[i]);
        match segments.last_mut() {
            Some((c, len)) if *c == batch[i].cond => *len += 1,
            _ => segments.push((batch[i].cond, 1)),
        }
    }
    Ok(NoisedBatch {
        z_t: z,
        t: ts,
        eps: e,
        segments,
    })
}

/// `mean over rows of ‖ε̂ − ε‖²` on a graph.
pub fn ddpm_loss(g: &mut Graph, p: &DenoiserVars, nb: &NoisedBatch, conds: &[GuidanceCondition]) -> Result<Var> {
    if let Some((c, _)) = nb.segments.iter().find(|(c, _)| *c >= conds.len()) {
        return Err(Error::InvalidInput(format!("condition index {c} out of range")));
    }
    let segs: Vec<Segment> = nb
        .segments
        .iter()
        .map(|&(c, len)| Segment { cond: &conds[c], len })
        .collect();
    let z = g.constant(nb.z_t.clone());
    let pred = denoise(g, p, z, &nb.t, &segs)?;
    let eps = g.constant(nb.eps.clone());
    let diff = g.sub(pred, eps)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / nb.t.len() as f64))
}

/// Draws steps and noise for `batch`, then returns the loss and gradients
/// (in [`DenoiserParams::tensors`] order).
pub fn ddpm_train_step<R: Rng + ?Sized>(
    batch: &[Point],
    schedule: &DiffusionSchedule,
    params: &DenoiserParams,
    conds: &[GuidanceCondition],
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty diffusion batch".into()));
    }
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..schedule.steps())).collect();
    let eps = Tensor::normal(&[n, 2], 1.0, rng);
    let nb = noise_batch(batch, &t, &eps, schedule)?;
    let mut g = Graph::new();
    let vars = params.attach(&mut g);
    let loss = ddpm_loss(&mut g, &vars, &nb, conds)?;
    g.backward(loss)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("diffusion loss is {value}")));
    }
    Ok((value, vars.grads(&g)))
}

/// Ancestral sampling from `z_T ~ N(0, I)` with posterior variance noise.
pub fn sample<R: Rng + ?Sized>(
    n: usize,
    cond: &GuidanceCondition,
    schedule: &DiffusionSchedule,
    params: &DenoiserParams,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if params.steps() != schedule.steps() {
        return Err(Error::Config(format!(
            "denoiser trained for {} steps, schedule has {}",
            params.steps(),
            schedule.steps()
        )));
    }
    let mut z = Tensor::normal(&[n, 2], 1.0, rng);
    for t in (0..schedule.steps()).rev() {
        let mut g = Graph::new();
        let vars = params.attach_frozen(&mut g);
        let zv = g.constant(z.clone());
        let eps = denoise(&mut g, &vars, zv, &vec![t; n], &[Segment { cond, len: n }])?;
        let eps = g.value(eps);
        let (beta, ab) = (schedule.betas[t], schedule.alpha_bars[t]);
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / schedule.alpha(t).sqrt();
        let sd = schedule.posterior_variance(t).sqrt();
        for i in 0..n {
            for d in 0..2 {
                let mean = inv * (z.row(i)[d] - coef * eps.row(i)[d]);
                let noise: f64 = if t > 0 { rng.sample(StandardNormal) } else { 0.0 };
                z.row_mut(i)[d] = mean + sd * noise;
            }
        }
        if !z.all_finite() {
            return Err(Error::Numerical(format!("non-finite sample at step {t}")));
        }
    }
    Ok((0..n).map(|i| [z.row(i)[0], z.row(i)[1]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::datagen::SyntheticSpec;
    use crate::rng;
    use crate::tensor::{finite_diff_grad, relative_error, DEFAULT_EPS};

    fn small_params(seed: u64) -> DenoiserParams {
        let cfg = DenoiserConfig {
            width: 5,
            cond_dim: 4,
            tokens: 2,
            steps: 8,
        };
        DenoiserParams::init(&cfg, &mut rng::stream(seed, 0)).unwrap()
    }

    fn cond(seed: u64, dim: usize, tokens: usize) -> GuidanceCondition {
        let mut r = rng::stream(seed, 1);
        let mut unit = || {
            let mut t = Tensor::normal(&[tokens, dim], 1.0, &mut r);
            for i in 0..tokens {
                crate::tensor::normalize_in_place(t.row_mut(i));
            }
            t
        };
        GuidanceCondition {
            style: unit(),
            category: unit(),
        }
    }

    #[test]
    fn conditions_reduce_to_frozen_text() {
        let spec = SyntheticSpec::default();
        let enc = Encoders::new(Backbone::build(&BackboneConfig::default(), &spec).unwrap(), 0).unwrap();
        let caption = spec.caption(0, 1);
        let close = |t: &Tensor, f: &crate::backbone::Feature| {
            t.row(0)
                .iter()
                .zip(f.as_slice())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                < 1e-12
        };
        let f_text = enc.backbone.embed_str(&caption).unwrap();
        let c = build_conditions("a sketch style", "dog", &caption, &enc, 0.0, 1).unwrap();
        assert!(close(&c.style, &f_text) && close(&c.category, &f_text));
        // Untrained adapters are the identity on the frozen text features.
        let f_style = enc.backbone.embed_str("a sketch style").unwrap();
        let f_cat = enc.backbone.embed_str("dog").unwrap();
        for alpha in [0.1, 0.7] {
            let c = build_conditions("a sketch style", "dog", &caption, &enc, alpha, 1).unwrap();
            assert!(close(&c.style, &blend(&f_style, &f_text, alpha).unwrap()));
            assert!(close(&c.category, &blend(&f_cat, &f_text, alpha).unwrap()));
        }
        let c = build_conditions("a sketch style", "dog", &caption, &enc, 1.0, 1).unwrap();
        assert!(close(&c.style, &f_style));
        let c = build_conditions("a sketch style", "dog", &caption, &enc, 0.1, 2).unwrap();
        assert_eq!(c.style.shape(), &[2, 32]);
        assert!(build_conditions("a sketch style", "dog", &caption, &enc, 1.5, 1).is_err());
    }

    #[test]
    fn loss_of_exact_and_zero_predictors() {
        let sched = DiffusionSchedule::linear(8, 1e-4, 0.02).unwrap();
        let mut p = small_params(1);
        for t in [&mut p.w2, &mut p.b2] {
            *t = Tensor::zeros(t.shape());
        }
        let conds = vec![cond(2, 4, 2)];
        let mut r = rng::stream(3, 0);
        let n = 4000;
        let batch: Vec<Point> = (0..n)
            .map(|i| Point {
                xy: [i as f64 * 1e-3, 1.0],
                cond: 0,
            })
            .collect();
        let t: Vec<usize> = (0..n).map(|i| i % 8).collect();
        let eps = Tensor::normal(&[n, 2], 1.0, &mut r);
        let nb = noise_batch(&batch, &t, &eps, &sched).unwrap();
        let mut g = Graph::new();
        let vars = p.attach(&mut g);
        let l = ddpm_loss(&mut g, &vars, &nb, &conds).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 0.1);

        let mut g = Graph::new();
        let pred = g.constant(nb.eps.clone());
        let truth = g.constant(nb.eps.clone());
        let d = g.sub(pred, truth).unwrap();
        let sq = g.mul(d, d).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn ddpm_loss_gradients_match_finite_differences() {
        let sched = DiffusionSchedule::linear(8, 1e-4, 0.02).unwrap();
        let mut p = small_params(4);
        let mut r = rng::stream(5, 0);
        p.w2 = Tensor::normal(p.w2.shape(), 0.3, &mut r);
        let conds = vec![cond(6, 4, 2), cond(7, 4, 2)];
        let batch: Vec<Point> = (0..5)
            .map(|i| Point {
                xy: [i as f64 * 0.3 - 0.5, 0.2],
                cond: i % 2,
            })
            .collect();
        let t = vec![0, 3, 7, 5, 1];
        let eps = Tensor::normal(&[5, 2], 1.0, &mut r);
        let nb = noise_batch(&batch, &t, &eps, &sched).unwrap();
        let eval = |p: &DenoiserParams| {
            let mut g = Graph::new();
            let vars = p.attach(&mut g);
            let l = ddpm_loss(&mut g, &vars, &nb, &conds).unwrap();
            g.backward(l).unwrap();
            (g.value(l).item(), vars.grads(&g))
        };
        let (_, grads) = eval(&p);
        for k in 0..13 {
            let fd = finite_diff_grad(
                |x| {
                    let mut q = p.clone();
                    *q.tensors_mut()[k] = x.clone();
                    eval(&q).0
                },
                p.tensors()[k],
                DEFAULT_EPS,
            );
            assert!(relative_error(&grads[k], &fd) < 1e-4, "{}", model::PARAM_NAMES[k]);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let sched = DiffusionSchedule::linear(8, 1e-4, 0.02).unwrap();
        let p = small_params(8);
        let c = cond(9, 4, 2);
        let a = sample(5, &c, &sched, &p, &mut rng::stream(1, 0)).unwrap();
        let b = sample(5, &c, &sched, &p, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(a, b);
        assert!(sample(0, &c, &sched, &p, &mut rng::stream(1, 0)).unwrap().is_empty());
        assert!(sample(3, &c, &DiffusionSchedule::default(), &p, &mut rng::stream(1, 0)).is_err());
    }

    #[test]
    fn grouping_keeps_rows_together() {
        let sched = DiffusionSchedule::linear(8, 1e-4, 0.02).unwrap();
        let batch: Vec<Point> = [2, 0, 2, 1, 0]
            .iter()
            .map(|&c| Point {
                xy: [c as f64, 0.0],
                cond: c,
            })
            .collect();
        let nb = noise_batch(&batch, &[0; 5], &Tensor::zeros(&[5, 2]), &sched).unwrap();
        assert_eq!(nb.segments, vec![(0, 2), (1, 1), (2, 2)]);
    }
}
