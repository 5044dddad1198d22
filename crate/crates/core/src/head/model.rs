//! Window gathering, layer differencing, branch assembly and the head forward pass.

use rayon::prelude::*;

use super::config::HeadConfig;
use super::params::{HeadVars, LtdHeadParams};
use super::select::{select_on_tape, SelectionResult};
use crate::autodiff::{sigmoid, Tape, Var};
use crate::backbone::LayerFeatures;
use crate::block::Activation;
use crate::data::FAKE;
use crate::error::{dim_err, LtdError, Result};
use crate::tensor::{Real, Tensor};

/// Adjacent-layer differences over the selected window, `(n−1) × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDiscrepancy<T = f32>(pub Tensor<T>);

/// Token sequences entering the per-branch blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchSequences<T = f32> {
    /// `(n+1) × D`.
    pub seq_f: Option<Tensor<T>>,
    /// `n × D`.
    pub seq_d: Option<Tensor<T>>,
}

/// Every candidate window `lo+i .. lo+i+n`, one per start index.
pub fn candidate_windows<T: Real>(features: &LayerFeatures, cfg: &HeadConfig) -> Result<Vec<Tensor<T>>> {
    if features.width() != cfg.width {
        return dim_err(format!(
            "feature width {} != head width {}",
            features.width(),
            cfg.width
        ));
    }
    if cfg.layer_hi >= features.layers() {
        return dim_err(format!(
            "layer {} out of range for {} layers",
            cfg.layer_hi,
            features.layers()
        ));
    }
    (0..cfg.candidates())
        .map(|i| {
            features
                .tensor()
                .slice_rows(cfg.layer_lo + i, cfg.window)
                .map(|t| t.cast())
        })
        .collect()
}

/// Rows `layer_lo + start .. layer_lo + start + n`.
pub fn gather_window<T: Real>(features: &LayerFeatures, sel: &SelectionResult, cfg: &HeadConfig) -> Result<Tensor<T>> {
    if sel.start_index >= cfg.candidates() || cfg.layer_lo + sel.start_index + cfg.window > features.layers() {
        return dim_err(format!("window start {} out of range", cfg.layer_lo + sel.start_index));
    }
    Ok(features
        .tensor()
        .slice_rows(cfg.layer_lo + sel.start_index, cfg.window)?
        .cast())
}

/// `row k = window[k+1] − window[k]`.
pub fn compute_ltd<T: Real>(window: &Tensor<T>) -> Result<TransitionDiscrepancy<T>> {
    let n = window.rows();
    if window.shape().len() != 2 || n < 2 {
        return dim_err(format!("differencing needs ≥2 rows, got shape {:?}", window.shape()));
    }
    let d = window.cols();
    let data = window.data();
    let out = (0..(n - 1) * d).map(|i| data[i + d] - data[i]).collect();
    Ok(TransitionDiscrepancy(Tensor::new(vec![n - 1, d], out)?))
}

fn prepend_and_add<T: Real>(cls: &Tensor<T>, rows: &Tensor<T>, pos: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let d = rows.cols();
    if cls.numel() != d {
        return dim_err(format!("class token width {} != {d}", cls.numel()));
    }
    let mut data = cls.data().to_vec();
    data.extend_from_slice(rows.data());
    let len = rows.rows() + 1;
    if let Some(p) = pos {
        if p.shape() != [len, d] {
            return dim_err(format!("positional embedding {:?} != [{len}, {d}]", p.shape()));
        }
        for (x, &e) in data.iter_mut().zip(p.data()) {
            *x = *x + e;
        }
    }
    Tensor::new(vec![len, d], data)
}

/// `seq_f = [f_cls; window] + f_pos`, `seq_d = [d_cls; ltd] + d_pos`.
pub fn assemble_branches<T: Real>(
    window: &Tensor<T>,
    ltd: &TransitionDiscrepancy<T>,
    params: &LtdHeadParams<T>,
) -> Result<BranchSequences<T>> {
    let seq_f = match &params.f_cls {
        Some(cls) => Some(prepend_and_add(cls, window, params.f_pos.as_ref())?),
        None => None,
    };
    let seq_d = match &params.d_cls {
        Some(cls) => Some(prepend_and_add(cls, &ltd.0, params.d_pos.as_ref())?),
        None => None,
    };
    Ok(BranchSequences { seq_f, seq_d })
}

/// How the window weights are produced for one forward pass.
#[derive(Clone, Debug)]
pub enum Selection<'a, T> {
    Infer,
    Train {
        gumbel: &'a [f64],
    },
    /// Fixed mixture weights, recorded as a differentiable leaf.
    Weights(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct HeadForward {
    pub logit: Var,
    /// Window mixture weights actually used.
    pub weights: Var,
    pub start_index: usize,
    pub soft: Vec<f64>,
    pub vars: HeadVars,
}

fn branch_on_tape<T: Real>(
    tape: &mut Tape<T>,
    cls: Var,
    rows: Var,
    pos: Option<Var>,
    stack: &[crate::block::BlockVars],
) -> Result<Var> {
    let mut x = tape.concat_rows(&[cls, rows])?;
    if let Some(p) = pos {
        x = tape.add(x, p)?;
    }
    for blk in stack {
        x = blk.forward(tape, x, Activation::Gelu)?;
    }
    tape.slice_rows(x, 0, 1)
}

/// Records the full head on `tape` and returns the scalar logit.
pub fn forward_head<T: Real>(
    tape: &mut Tape<T>,
    params: &LtdHeadParams<T>,
    features: &LayerFeatures,
    selection: Selection<'_, T>,
) -> Result<HeadForward> {
    let cfg = &params.config;
    let vars = params.bind(tape);
    let items = candidate_windows::<T>(features, cfg)?;
    let (weights, start_index, soft) = match selection {
        Selection::Infer => {
            let (w, s) = select_on_tape(tape, vars.pi, cfg.tau, None)?;
            (w, s.start_index, s.soft)
        }
        Selection::Train { gumbel } => {
            let (w, s) = select_on_tape(tape, vars.pi, cfg.tau, Some(gumbel))?;
            (w, s.start_index, s.soft)
        }
        Selection::Weights(w) => {
            if w.numel() != items.len() {
                return dim_err(format!("{} weights for {} windows", w.numel(), items.len()));
            }
            let vals: Vec<f64> = w.data().iter().map(|v| v.to_f64_lossy()).collect();
            let i = super::select::argmax(&vals);
            (tape.param(&w), i, vals)
        }
    };
    let window = tape.mixture(weights, items)?;
    let stack_raw = &vars.stacks[0];
    let stack_ltd = vars.stacks.last().expect("at least one stack");

    let mut cls_outputs = Vec::with_capacity(2);
    if let Some(f_cls) = vars.f_cls {
        cls_outputs.push(branch_on_tape(tape, f_cls, window, vars.f_pos, stack_raw)?);
    }
    if let Some(d_cls) = vars.d_cls {
        let n = cfg.window;
        let hi = tape.slice_rows(window, 1, n - 1)?;
        let lo = tape.slice_rows(window, 0, n - 1)?;
        let ltd = tape.sub(hi, lo)?;
        cls_outputs.push(branch_on_tape(tape, d_cls, ltd, vars.d_pos, stack_ltd)?);
    }
    let joined = if cls_outputs.len() == 1 {
        cls_outputs[0]
    } else {
        tape.concat_cols(&cls_outputs)?
    };
    let h = tape.linear(joined, vars.fc1_w, vars.fc1_b)?;
    let h = tape.gelu(h)?;
    let logit = tape.linear(h, vars.fc2_w, vars.fc2_b)?;
    Ok(HeadForward {
        logit,
        weights,
        start_index,
        soft,
        vars,
    })
}

/// Deterministic logit for one image.
pub fn infer_logit(params: &LtdHeadParams<f32>, features: &LayerFeatures) -> Result<f32> {
    let mut tape = Tape::<f32>::new();
    let out = forward_head(&mut tape, params, features, Selection::Infer)?;
    Ok(tape.value(out.logit).data()[0])
}

/// Per-image logits, computed in parallel; independent of batch order.
pub fn infer_logits(params: &LtdHeadParams<f32>, features: &[LayerFeatures]) -> Result<Vec<f32>> {
    features.par_iter().map(|f| infer_logit(params, f)).collect()
}

/// `(sigmoid(logit), label)` with label fake iff probability > threshold.
pub fn predict(logit: f64, threshold: f64) -> Result<(f64, u8)> {
    if !logit.is_finite() {
        return Err(LtdError::Numeric(format!("non-finite logit {logit}")));
    }
    let p = sigmoid(logit);
    Ok((p, if p > threshold { FAKE } else { crate::data::REAL }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::REAL;
    use crate::head::select::{one_hot, select_with_noise};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn features(layers: usize, d: usize, seed: u64) -> LayerFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..layers * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        LayerFeatures::new(Tensor::new(vec![layers, d], data).unwrap()).unwrap()
    }

    fn toy_cfg() -> HeadConfig {
        let mut cfg = HeadConfig::default_for(8, 16);
        cfg.heads = 4;
        cfg
    }

    fn randomized(cfg: &HeadConfig, seed: u64) -> LtdHeadParams<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LtdHeadParams::<f32>::init(cfg, &mut rng);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1f32..0.1);
            }
        }
        p
    }

    #[test]
    fn gather_rows() {
        let f = features(8, 4, 0);
        let cfg = HeadConfig::default_for(8, 4);
        let sel = select_with_noise(&[0.0, 5.0, 0.0], 1.0, None).unwrap();
        let w: Tensor<f32> = gather_window(&f, &sel, &cfg).unwrap();
        for k in 0..3 {
            assert_eq!(w.row(k), f.row(3 + k));
        }
    }

    #[test]
    fn ltd_hand_example() {
        let w = Tensor::from_rows(&[vec![1.0f32, 2.0], vec![1.0, 2.0], vec![4.0, 6.0]]).unwrap();
        let d = compute_ltd(&w).unwrap();
        assert_eq!(d.0.to_vec2(), vec![vec![0.0, 0.0], vec![3.0, 4.0]]);
        let same = Tensor::from_rows(&vec![vec![0.5f32, -1.0]; 4]).unwrap();
        assert!(compute_ltd(&same).unwrap().0.data().iter().all(|&v| v == 0.0));
        assert!(compute_ltd(&Tensor::<f32>::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn branch_shapes_and_additivity() {
        let mut cfg = toy_cfg();
        cfg.window = 5;
        cfg.layer_lo = 1;
        cfg.width = 32;
        let mut p = randomized(&cfg, 1);
        let f = features(8, 32, 2);
        let sel = select_with_noise(&vec![0.0; cfg.candidates()], 1.0, None).unwrap();
        let w = gather_window(&f, &sel, &cfg).unwrap();
        let ltd = compute_ltd(&w).unwrap();
        let b = assemble_branches(&w, &ltd, &p).unwrap();
        assert_eq!(b.seq_f.as_ref().unwrap().shape(), &[6, 32]);
        assert_eq!(b.seq_d.as_ref().unwrap().shape(), &[5, 32]);

        p.f_pos = Some(Tensor::zeros(&[6, 32]));
        let b0 = assemble_branches(&w, &ltd, &p).unwrap();
        assert_eq!(b0.seq_f.as_ref().unwrap().row(0), p.f_cls.as_ref().unwrap().data());

        let mut p2 = p.clone();
        p2.f_pos.as_mut().unwrap().set(&[2, 7], 0.25);
        let b1 = assemble_branches(&w, &ltd, &p2).unwrap();
        let (a, c) = (b0.seq_f.unwrap(), b1.seq_f.unwrap());
        for (i, (x, y)) in a.data().iter().zip(c.data()).enumerate() {
            if i == 2 * 32 + 7 {
                assert_eq!(*y, *x + 0.25);
            } else {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn zero_classifier_gives_bias() {
        let cfg = toy_cfg();
        let mut p = randomized(&cfg, 3);
        p.fc2_w = Tensor::zeros(&[cfg.head_hidden, 1]);
        p.fc2_b = Tensor::new(vec![1], vec![0.375]).unwrap();
        for s in 0..3 {
            assert_eq!(infer_logit(&p, &features(8, 16, s)).unwrap(), 0.375);
        }
    }

    #[test]
    fn infer_is_deterministic_and_order_free() {
        let cfg = toy_cfg();
        let p = randomized(&cfg, 4);
        let feats: Vec<_> = (0..6).map(|s| features(8, 16, s)).collect();
        let a = infer_logits(&p, &feats).unwrap();
        let mut rev = feats.clone();
        rev.reverse();
        let mut b = infer_logits(&p, &rev).unwrap();
        b.reverse();
        assert_eq!(a, b);
        assert_eq!(a[2], infer_logit(&p, &feats[2]).unwrap());
    }

    #[test]
    fn forward_window_equals_hard_mixture() {
        let cfg = toy_cfg();
        let p = randomized(&cfg, 5);
        let f = features(8, 16, 6);
        let g = [0.3, -0.2, 1.1];
        let mut tape = Tape::<f32>::new();
        let out = forward_head(&mut tape, &p, &f, Selection::Train { gumbel: &g }).unwrap();
        let hard = tape.value(out.weights).data().to_vec();
        assert_eq!(hard.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(hard.iter().sum::<f32>(), 1.0);

        let onehot: Vec<f32> = one_hot(3, out.start_index).iter().map(|&v| v as f32).collect();
        let mut tape2 = Tape::<f32>::new();
        let fixed = forward_head(
            &mut tape2,
            &p,
            &f,
            Selection::Weights(Tensor::new(vec![3], onehot).unwrap()),
        )
        .unwrap();
        assert_eq!(tape.value(out.logit).data(), tape2.value(fixed.logit).data());
    }

    #[test]
    fn single_candidate_gives_zero_pi_gradient() {
        let mut cfg = toy_cfg();
        cfg.layer_lo = 2;
        cfg.layer_hi = 4;
        let p = randomized(&cfg, 7);
        assert_eq!(cfg.candidates(), 1);
        let f = features(8, 16, 8);
        let mut tape = Tape::<f64>::new();
        let p64 = p.cast::<f64>();
        let out = forward_head(&mut tape, &p64, &f, Selection::Train { gumbel: &[0.4] }).unwrap();
        let loss = tape.bce_with_logits(out.logit, 1.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(out.vars.pi, &tape), vec![0.0]);
        let w: Tensor<f32> = gather_window(&f, &select_with_noise(&[0.0], 1.0, None).unwrap(), &cfg).unwrap();
        assert_eq!(w.row(0), f.row(2));
    }

    #[test]
    fn straight_through_pi_gradient_equals_soft_mixture_gradient() {
        let cfg = toy_cfg();
        let p = randomized(&cfg, 9).cast::<f64>();
        let f = features(8, 16, 10);
        let g = [0.1, 0.9, -0.4];

        let mut tape = Tape::<f64>::new();
        let out = forward_head(&mut tape, &p, &f, Selection::Train { gumbel: &g }).unwrap();
        let loss = tape.bce_with_logits(out.logit, 1.0).unwrap();
        let st = tape.backward(loss).unwrap().wrt(out.vars.pi, &tape);

        // Explicit graph: gradient of the loss w.r.t. the mixture weights at
        // the hard point, pushed through the soft path by hand.
        let hard = Tensor::new(vec![3], tape.value(out.weights).data().to_vec()).unwrap();
        let mut t2 = Tape::<f64>::new();
        let fixed = forward_head(&mut t2, &p, &f, Selection::Weights(hard)).unwrap();
        let l2 = t2.bce_with_logits(fixed.logit, 1.0).unwrap();
        let gw = t2.backward(l2).unwrap().wrt(fixed.weights, &t2);

        let mut t3 = Tape::<f64>::new();
        let pi = t3.param(&p.pi);
        let (w, _) = select_on_tape(&mut t3, pi, cfg.tau, Some(&g)).unwrap();
        let gw_t = t3.constant(Tensor::new(vec![3], gw).unwrap());
        let s = t3.dot(w, gw_t).unwrap();
        let expect = t3.backward(s).unwrap().wrt(pi, &t3);
        for (a, b) in st.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{st:?} vs {expect:?}");
        }
        assert!(st.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(0.0, 0.5).unwrap(), (0.5, REAL));
        assert_eq!(predict(100.0, 0.5).unwrap().1, FAKE);
        let (p, l) = predict(-3.0, 0.5).unwrap();
        assert!((p - 0.0474).abs() < 5e-5);
        assert_eq!(l, REAL);
        assert!(matches!(predict(f64::NAN, 0.5), Err(LtdError::Numeric(_))));
        assert!(matches!(predict(f64::INFINITY, 0.5), Err(LtdError::Numeric(_))));
    }
}
