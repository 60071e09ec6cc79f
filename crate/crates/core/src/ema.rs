//! Exponential moving average of parameters.

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new(decay: f64, shadow: BTreeMap<String, Tensor>) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Range {
                what: "EMA decay",
                detail: format!("{decay} is outside [0, 1]"),
            });
        }
        Ok(Self { decay, shadow })
    }

    /// Shadow initialized to the current live values.
    pub fn from_store(decay: f64, store: &ParamStore) -> Result<Self> {
        Self::new(decay, store.snapshot()?)
    }

    /// `shadow <- decay * shadow + (1 - decay) * live` for every parameter.
    pub fn update(&mut self, live: &BTreeMap<String, Tensor>) -> Result<()> {
        *self = ema_update(live, self)?;
        Ok(())
    }

    pub fn update_from_store(&mut self, store: &ParamStore) -> Result<()> {
        let live: BTreeMap<String, Tensor> = store
            .named_vars()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect();
        self.update(&live)
    }
}

pub fn ema_update(live: &BTreeMap<String, Tensor>, ema: &EmaState) -> Result<EmaState> {
    if live.len() != ema.shadow.len() {
        return Err(Error::Shape(format!(
            "EMA tracks {} parameters, live set has {}",
            ema.shadow.len(),
            live.len()
        )));
    }
    let b = ema.decay;
    let mut shadow = BTreeMap::new();
    for (name, s) in &ema.shadow {
        let l = live
            .get(name)
            .ok_or_else(|| Error::Shape(format!("live parameters lack `{name}`")))?;
        if l.dims() != s.dims() {
            return Err(Error::Shape(format!(
                "EMA shadow `{name}` is {:?}, live is {:?}",
                s.dims(),
                l.dims()
            )));
        }
        let next = if b == 1.0 {
            s.clone()
        } else if b == 0.0 {
            l.detach().copy()?
        } else {
            ((s * b)? + (l.detach() * (1.0 - b))?)?
        };
        shadow.insert(name.clone(), next);
    }
    Ok(EmaState { decay: b, shadow })
}
