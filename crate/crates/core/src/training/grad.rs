//! Reverse-mode gradients of the batch loss through every unrolled step.

use rayon::prelude::*;

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::ModelParams;
use crate::solvers::check_mask;
use crate::tensor::{Image, PaddingMode};

use super::data::Sample;
use super::loss::{check_alpha, loss_node, LossKind, MsSsimConfig};

pub const GROUP_NAMES: [&str; 4] = ["w_e", "w_d", "theta", "d"];

/// Gradients laid out exactly like the corresponding [`ModelParams`] fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub w_e: Vec<f64>,
    pub w_d: Vec<f64>,
    pub theta: Vec<f64>,
    pub d: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            w_e: vec![0.0; p.w_e.data().len()],
            w_d: vec![0.0; p.w_d.data().len()],
            theta: vec![0.0; p.theta.len()],
            d: vec![0.0; p.d.data().len()],
        }
    }

    pub fn groups(&self) -> [&[f64]; 4] {
        [&self.w_e, &self.w_d, &self.theta, &self.d]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w_e, &mut self.w_d, &mut self.theta, &mut self.d]
    }

    fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, f: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= f);
        }
    }

    /// Errors with the name of the first group holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (name, g) in GROUP_NAMES.iter().zip(self.groups()) {
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric { group: (*name).into(), detail: format!("gradient entry {k} is {}", g[k]) });
            }
        }
        Ok(())
    }
}

/// How a reconstruction is scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha: f64,
    pub ms_ssim: MsSsimConfig,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { kind: LossKind::Combined, alpha: 0.8, ms_ssim: MsSsimConfig::default() }
    }
}

struct ParamVars {
    w_e: Var,
    w_d: Var,
    theta: Var,
    d: Var,
}

fn bank_shape(b: &crate::tensor::FilterBank) -> Shape {
    Shape::new(b.size(), b.size(), b.in_channels() * b.out_channels())
}

/// Build the unrolled network and its loss on `tape`. Returns the parameter
/// leaves, the loss node and the reconstruction node.
fn build_graph(
    tape: &mut Tape,
    p: &ModelParams,
    sample: &Sample,
    loss: &LossSpec,
    mode: PaddingMode,
    scales: usize,
) -> (ParamVars, Var, Var) {
    let s = p.d.size();
    let (h, w, c) = sample.input.dims();
    let m = p.theta.len();
    let vars = ParamVars {
        w_e: tape.leaf(p.w_e.data().to_vec(), bank_shape(&p.w_e), true),
        w_d: tape.leaf(p.w_d.data().to_vec(), bank_shape(&p.w_d), true),
        theta: tape.leaf(p.theta.clone(), Shape::new(1, 1, m), true),
        d: tape.leaf(p.d.data().to_vec(), bank_shape(&p.d), true),
    };
    let k_e = tape.flip_bank(vars.w_e, s, c, m);
    let k_d = tape.flip_bank(vars.w_d, s, m, c);
    let k_dec = tape.flip_bank(vars.d, s, m, c);
    let img_shape = Shape::new(h, w, c);
    let x = tape.constant(sample.input.data().to_vec(), img_shape);
    let mask = sample.mask.as_ref().map(|mk| tape.constant(mk.data().to_vec(), img_shape));

    let mut z: Option<Var> = None;
    for _ in 0..p.unroll {
        let mut resid = match z {
            None => x,
            Some(zk) => {
                let recon = tape.correlate(zk, k_d, s, mode);
                tape.sub(x, recon)
            }
        };
        if let Some(mk) = mask {
            resid = tape.mul(resid, mk);
        }
        let mut pre = tape.correlate(resid, k_e, s, mode);
        if let Some(zk) = z {
            pre = tape.add(zk, pre);
        }
        z = Some(tape.soft_threshold(pre, vars.theta));
    }
    let x_hat = tape.correlate(z.expect("unroll >= 1"), k_dec, s, mode);
    let target = tape.constant(sample.target.data().to_vec(), img_shape);
    let loss_var = loss_node(tape, target, x_hat, loss.kind, loss.alpha, &loss.ms_ssim, scales);
    (vars, loss_var, x_hat)
}

fn check_batch(batch: &[Sample], p: &ModelParams, loss: &LossSpec) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::Data("batch is empty".into()));
    };
    p.validate()?;
    check_alpha(loss.alpha)?;
    let (h, w, c) = first.input.dims();
    if c != p.d.out_channels() {
        return Err(shape_err(format!("model expects {} channels, batch has {c}", p.d.out_channels())));
    }
    for s in batch {
        if s.input.dims() != (h, w, c) || s.target.dims() != (h, w, c) {
            return Err(shape_err("batch samples must share one shape"));
        }
        if let Some(m) = &s.mask {
            check_mask(m, &s.input)?;
        }
    }
    match loss.kind {
        LossKind::Combined if loss.alpha > 0.0 => loss.ms_ssim.effective_scales(h, w),
        _ => Ok(0),
    }
}

fn sample_grads(p: &ModelParams, sample: &Sample, loss: &LossSpec, mode: PaddingMode, scales: usize) -> (ParamGrads, f64) {
    let mut tape = Tape::new();
    let (vars, loss_var, _) = build_graph(&mut tape, p, sample, loss, mode, scales);
    let value = tape.scalar(loss_var);
    let mut g = tape.backward(loss_var);
    let mut take = |v: Var, n: usize| g.take(v).unwrap_or_else(|| vec![0.0; n]);
    let grads = ParamGrads {
        w_e: take(vars.w_e, p.w_e.data().len()),
        w_d: take(vars.w_d, p.w_d.data().len()),
        theta: take(vars.theta, p.theta.len()),
        d: take(vars.d, p.d.data().len()),
    };
    (grads, value)
}

/// Mean batch loss and its exact gradient with respect to all four
/// parameter groups. Per-sample work runs on the current rayon pool; the
/// reduction is summed in batch order when `deterministic` is set.
pub fn backward(batch: &[Sample], p: &ModelParams, loss: &LossSpec, mode: PaddingMode, deterministic: bool) -> Result<(ParamGrads, f64)> {
    let scales = check_batch(batch, p, loss)?;
    let (mut total, mut value) = if deterministic {
        let per: Vec<(ParamGrads, f64)> = batch.par_iter().map(|s| sample_grads(p, s, loss, mode, scales)).collect();
        let mut acc = ParamGrads::zeros_like(p);
        let mut v = 0.0;
        for (g, l) in &per {
            acc.add_assign(g);
            v += l;
        }
        (acc, v)
    } else {
        batch.par_iter().map(|s| sample_grads(p, s, loss, mode, scales)).reduce(
            || (ParamGrads::zeros_like(p), 0.0),
            |(mut ga, la), (gb, lb)| {
                ga.add_assign(&gb);
                (ga, la + lb)
            },
        )
    };
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    value /= n;
    if !value.is_finite() {
        return Err(Error::Numeric { group: "loss".into(), detail: format!("batch loss is {value}") });
    }
    total.check_finite()?;
    Ok((total, value))
}

/// Reconstruction produced by the training graph; used to check it agrees
/// with the inference path.
pub fn graph_reconstruction(p: &ModelParams, input: &Image, mask: Option<&Image>, mode: PaddingMode) -> Result<Image> {
    let sample = Sample { input: input.clone(), target: input.clone(), mask: mask.cloned() };
    let spec = LossSpec { kind: LossKind::L2, ..Default::default() };
    check_batch(std::slice::from_ref(&sample), p, &spec)?;
    let mut tape = Tape::new();
    let (_, _, x_hat) = build_graph(&mut tape, p, &sample, &spec, mode, 0);
    let (h, w, c) = input.dims();
    Image::from_vec(h, w, c, tape.value(x_hat).to_vec())
}
