use crate::error::{shape_err, Error, Result};
use crate::model::ModelParams;

use super::grad::{ParamGrads, GROUP_NAMES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for each parameter group plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub t: u64,
}

impl AdamState {
    pub fn new(p: &ModelParams) -> Self {
        Self { m: ParamGrads::zeros_like(p), v: ParamGrads::zeros_like(p), t: 0 }
    }
}

/// One bias-corrected Adam update of a flat slice. `t` is the already
/// incremented step count.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, hp: &AdamHyper) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for k in 0..w.len() {
        m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
        v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
        let mh = m[k] / c1;
        let vh = v[k] / c2;
        w[k] -= lr * mh / (vh.sqrt() + hp.eps);
    }
}

/// Adam step on every group, then projection of the thresholds onto θ ≥ 0.
pub fn adam_step(p: &mut ModelParams, g: &ParamGrads, st: &mut AdamState, lr: f64, hp: &AdamHyper) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
    }
    let expected = ParamGrads::zeros_like(p);
    for ((name, a), (b, (m, v))) in
        GROUP_NAMES.iter().zip(expected.groups()).zip(g.groups().into_iter().zip(st.m.groups().into_iter().zip(st.v.groups())))
    {
        if a.len() != b.len() || a.len() != m.len() || a.len() != v.len() {
            return Err(shape_err(format!("{name}: gradient or state does not match parameter shape")));
        }
    }
    g.check_finite()?;
    st.t += 1;
    let t = st.t;
    let [mw_e, mw_d, mth, md] = st.m.groups_mut();
    let [vw_e, vw_d, vth, vd] = st.v.groups_mut();
    adam_update(p.w_e.data_mut(), &g.w_e, mw_e, vw_e, t, lr, hp);
    adam_update(p.w_d.data_mut(), &g.w_d, mw_d, vw_d, t, lr, hp);
    adam_update(&mut p.theta, &g.theta, mth, vth, t, lr, hp);
    adam_update(p.d.data_mut(), &g.d, md, vd, t, lr, hp);
    p.theta.iter_mut().for_each(|th| *th = th.max(0.0));
    Ok(())
}
