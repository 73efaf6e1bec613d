use std::collections::BTreeMap;

use crate::autodiff::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

use super::TrainConfig;

/// AdamW moments for every parameter that has received a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW step over the parameters named in `grads`:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("`{name}` is {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, (pv, gv)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
            let gi = gv.as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let old = pv.as_f64();
            *pv = T::of(old - lr * mhat / (vhat.sqrt() + state.eps) - lr * wd * old);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v])).unwrap();
        p
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::vector(vec![g]))])
    }

    #[test]
    fn decay_only_step() {
        let cfg = TrainConfig::default();
        let mut p = scalar_set(2.0);
        adamw_step(&mut p, &grads(0.0), &mut OptimizerState::default(), &cfg).unwrap();
        let expect = 2.0 - cfg.learning_rate * cfg.weight_decay * 2.0;
        assert_eq!(p.get("w").unwrap().values()[0], expect);
    }

    #[test]
    fn first_step_is_sign_sized() {
        let cfg = TrainConfig::default();
        let mut p = scalar_set(0.5);
        adamw_step(&mut p, &grads(-3.0), &mut OptimizerState::default(), &cfg).unwrap();
        let expect = 0.5 + cfg.learning_rate * 3.0 / (3.0 + 1e-8) - cfg.learning_rate * cfg.weight_decay * 0.5;
        assert!((p.get("w").unwrap().values()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_set(0.7);
        adamw_step(&mut p, &grads(1.3), &mut OptimizerState::default(), &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().values()[0], 0.7);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = scalar_set(0.7);
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(adamw_step(&mut p, &g, &mut OptimizerState::default(), &TrainConfig::default()).is_err());
    }
}
