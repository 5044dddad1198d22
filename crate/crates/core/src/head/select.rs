use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LtdError, Result};
use crate::tensor::{c, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Gumbel-perturbed, straight-through.
    Train,
    /// Deterministic argmax of the logits.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub start_index: usize,
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(len: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[i] = 1.0;
    v
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x - lse).collect()
}

/// `C` draws of `−ln(−ln u)`, `u ~ U(0, 1)` open on both ends.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check(pi: &[f64], tau: f64) -> Result<()> {
    if pi.is_empty() {
        return Err(LtdError::Config("no candidate windows (C < 1)".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(LtdError::Config(format!("tau {tau} must be positive")));
    }
    if pi.iter().any(|v| !v.is_finite()) {
        return Err(LtdError::Numeric("non-finite window logits".into()));
    }
    Ok(())
}

/// Selection with explicit Gumbel noise `g` (train mode) or none (infer mode).
pub fn select_with_noise(pi: &[f64], tau: f64, gumbel: Option<&[f64]>) -> Result<SelectionResult> {
    check(pi, tau)?;
    let (soft, start_index) = match gumbel {
        Some(g) => {
            if g.len() != pi.len() {
                return Err(LtdError::Dimension(format!(
                    "{} noise values for {} logits",
                    g.len(),
                    pi.len()
                )));
            }
            let z: Vec<f64> = log_softmax(pi).iter().zip(g).map(|(l, g)| (l + g) / tau).collect();
            let soft = softmax(&z);
            let i = argmax(&soft);
            (soft, i)
        }
        None => {
            let z: Vec<f64> = pi.iter().map(|p| p / tau).collect();
            (softmax(&z), argmax(pi))
        }
    };
    Ok(SelectionResult {
        hard: one_hot(pi.len(), start_index),
        soft,
        start_index,
    })
}

/// Window selection; `rng` is required in train mode.
pub fn select_window<R: Rng + ?Sized>(
    pi: &[f64],
    tau: f64,
    mode: SelectMode,
    rng: Option<&mut R>,
) -> Result<SelectionResult> {
    match mode {
        SelectMode::Infer => select_with_noise(pi, tau, None),
        SelectMode::Train => {
            let rng = rng.ok_or_else(|| LtdError::Contract("train-mode selection needs an rng".into()))?;
            let g = sample_gumbel(rng, pi.len());
            select_with_noise(pi, tau, Some(&g))
        }
    }
}

/// Records the selection on the tape. Returns the straight-through weights
/// (hard forward, soft backward) and the chosen start index.
pub fn select_on_tape<T: Real>(
    tape: &mut Tape<T>,
    pi: Var,
    tau: f64,
    gumbel: Option<&[f64]>,
) -> Result<(Var, SelectionResult)> {
    let pi_vals: Vec<f64> = tape.value(pi).data().iter().map(|v| v.to_f64_lossy()).collect();
    let c_len = pi_vals.len();
    let z = match gumbel {
        Some(g) => {
            if g.len() != c_len {
                return Err(LtdError::Dimension(format!(
                    "{} noise values for {c_len} logits",
                    g.len()
                )));
            }
            let ls = tape.log_softmax(pi)?;
            let noise = tape.constant(Tensor::new(vec![c_len], g.iter().map(|&v| c(v)).collect())?);
            tape.add(ls, noise)?
        }
        None => pi,
    };
    let z = tape.scale(z, c(1.0 / tau))?;
    let soft = tape.softmax(z, 0)?;
    let soft_vals: Vec<f64> = tape.value(soft).data().iter().map(|v| v.to_f64_lossy()).collect();
    let start_index = match gumbel {
        Some(_) => argmax(&soft_vals),
        None => argmax(&pi_vals),
    };
    let hard = one_hot(c_len, start_index);
    let hard_t = Tensor::new(vec![c_len], hard.iter().map(|&v| c(v)).collect())?;
    let w = tape.straight_through(hard_t, soft)?;
    Ok((
        w,
        SelectionResult {
            hard,
            soft: soft_vals,
            start_index,
        },
    ))
}
