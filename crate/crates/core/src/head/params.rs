use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::HeadConfig;
use crate::archive::Archive;
use crate::autodiff::{Tape, Var};
use crate::block::{BlockParams, BlockVars};
use crate::error::{ArchiveError, LtdError, Result};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "head/";
const INIT_STD: f64 = 0.02;

/// Every trainable tensor of the detector head.
///
/// With a shared block both branches run through `stacks[0]`, so the shared
/// weights appear once here and once in the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct LtdHeadParams<T = f32> {
    pub config: HeadConfig,
    /// Window-start logits, length `C`.
    pub pi: Tensor<T>,
    pub f_cls: Option<Tensor<T>>,
    pub d_cls: Option<Tensor<T>>,
    /// `(n+1) × D`.
    pub f_pos: Option<Tensor<T>>,
    /// `n × D`.
    pub d_pos: Option<Tensor<T>>,
    pub stacks: Vec<Vec<BlockParams<T>>>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Real> LtdHeadParams<T> {
    /// Truncated normal (0.02) for tokens, embeddings and projections; zero
    /// final classifier layer; `π = 0`.
    pub fn init<R: Rng + ?Sized>(config: &HeadConfig, rng: &mut R) -> Self {
        let d = config.width;
        let n = config.window;
        let b = config.branches;
        let f_cls = b.has_raw().then(|| Tensor::trunc_normal(&[d], INIT_STD, rng));
        let d_cls = b.has_ltd().then(|| Tensor::trunc_normal(&[d], INIT_STD, rng));
        let f_pos = (b.has_raw() && config.pos_enc).then(|| Tensor::trunc_normal(&[n + 1, d], INIT_STD, rng));
        let d_pos = (b.has_ltd() && config.pos_enc).then(|| Tensor::trunc_normal(&[n, d], INIT_STD, rng));
        let stacks = (0..config.stacks())
            .map(|_| {
                (0..config.trainable_blocks)
                    .map(|_| BlockParams::init(config.block_shape(), INIT_STD, rng))
                    .collect()
            })
            .collect();
        let h = config.head_hidden;
        LtdHeadParams {
            config: config.clone(),
            pi: Tensor::zeros(&[config.candidates()]),
            f_cls,
            d_cls,
            f_pos,
            d_pos,
            stacks,
            fc1_w: Tensor::trunc_normal(&[config.classifier_in(), h], INIT_STD, rng),
            fc1_b: Tensor::zeros(&[h]),
            fc2_w: Tensor::zeros(&[h, 1]),
            fc2_b: Tensor::zeros(&[1]),
        }
    }

    fn stack_name(&self, s: usize) -> &'static str {
        if self.stacks.len() == 1 {
            "shared"
        } else if s == 0 {
            "raw"
        } else {
            "ltd"
        }
    }

    /// (name, tensor) in canonical order; names carry the `head/` prefix.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![(format!("{PREFIX}pi"), &self.pi)];
        let opt = [
            ("f_cls", &self.f_cls),
            ("d_cls", &self.d_cls),
            ("f_pos", &self.f_pos),
            ("d_pos", &self.d_pos),
        ];
        for (name, t) in opt {
            if let Some(t) = t {
                out.push((format!("{PREFIX}{name}"), t));
            }
        }
        for (s, stack) in self.stacks.iter().enumerate() {
            for (i, blk) in stack.iter().enumerate() {
                out.extend(blk.named(&format!("{PREFIX}blocks.{}.{i}.", self.stack_name(s))));
            }
        }
        out.push((format!("{PREFIX}classifier.fc1.weight"), &self.fc1_w));
        out.push((format!("{PREFIX}classifier.fc1.bias"), &self.fc1_b));
        out.push((format!("{PREFIX}classifier.fc2.weight"), &self.fc2_w));
        out.push((format!("{PREFIX}classifier.fc2.bias"), &self.fc2_b));
        out
    }

    /// Same order as [`LtdHeadParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.pi];
        for t in [&mut self.f_cls, &mut self.d_cls, &mut self.f_pos, &mut self.d_pos]
            .into_iter()
            .flatten()
        {
            out.push(t);
        }
        for stack in self.stacks.iter_mut() {
            for blk in stack.iter_mut() {
                out.extend(blk.tensors_mut());
            }
        }
        out.extend([&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(|t| t.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> LtdHeadParams<U> {
        let cast_opt = |t: &Option<Tensor<T>>| t.as_ref().map(Tensor::cast);
        LtdHeadParams {
            config: self.config.clone(),
            pi: self.pi.cast(),
            f_cls: cast_opt(&self.f_cls),
            d_cls: cast_opt(&self.d_cls),
            f_pos: cast_opt(&self.f_pos),
            d_pos: cast_opt(&self.d_pos),
            stacks: self
                .stacks
                .iter()
                .map(|s| s.iter().map(BlockParams::cast).collect())
                .collect(),
            fc1_w: self.fc1_w.cast(),
            fc1_b: self.fc1_b.cast(),
            fc2_w: self.fc2_w.cast(),
            fc2_b: self.fc2_b.cast(),
        }
    }

    /// Registers every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> HeadVars {
        let pi = tape.param(&self.pi);
        let mut opt = |t: &Option<Tensor<T>>| t.as_ref().map(|t| tape.param(t));
        let f_cls = opt(&self.f_cls);
        let d_cls = opt(&self.d_cls);
        let f_pos = opt(&self.f_pos);
        let d_pos = opt(&self.d_pos);
        let stacks = self
            .stacks
            .iter()
            .map(|s| s.iter().map(|b| BlockVars::bind(tape, b, true)).collect())
            .collect();
        HeadVars {
            pi,
            f_cls,
            d_cls,
            f_pos,
            d_pos,
            stacks,
            fc1_w: tape.param(&self.fc1_w),
            fc1_b: tape.param(&self.fc1_b),
            fc2_w: tape.param(&self.fc2_w),
            fc2_b: tape.param(&self.fc2_b),
        }
    }
}

impl LtdHeadParams<f32> {
    pub fn to_archive_into(&self, archive: &mut Archive) {
        for (name, t) in self.named() {
            archive.insert(name, t);
        }
    }

    /// Reads tensors named under `prefix` (normally `head/`) for `config`.
    pub fn from_archive(config: &HeadConfig, archive: &mut Archive, prefix: &str) -> Result<Self> {
        let template = LtdHeadParams::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut out = template.clone();
        let names: Vec<(String, Vec<usize>)> = template
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(out.tensors_mut()) {
            let key = format!("{prefix}{}", &name[PREFIX.len()..]);
            *slot = archive.take(&key, &shape)?;
        }
        if let Some(k) = archive.tensors.keys().find(|k| k.starts_with(prefix)) {
            return Err(ArchiveError::UnexpectedTensor(k.clone()).into());
        }
        Ok(out)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(LtdError::Numeric(format!("non-finite head parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Tape handles mirroring [`LtdHeadParams`].
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub pi: Var,
    pub f_cls: Option<Var>,
    pub d_cls: Option<Var>,
    pub f_pos: Option<Var>,
    pub d_pos: Option<Var>,
    pub stacks: Vec<Vec<BlockVars>>,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl HeadVars {
    /// Same order as [`LtdHeadParams::named`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.pi];
        out.extend([self.f_cls, self.d_cls, self.f_pos, self.d_pos].into_iter().flatten());
        for stack in &self.stacks {
            for b in stack {
                out.extend(b.vars);
            }
        }
        out.extend([self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::config::Branches;

    fn params(cfg: &HeadConfig) -> LtdHeadParams<f32> {
        LtdHeadParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn count_matches_closed_form_for_all_variants() {
        for shared in [true, false] {
            for pos in [true, false] {
                for br in [Branches::Both, Branches::Raw, Branches::Ltd] {
                    for blocks in [1, 2] {
                        let mut cfg = HeadConfig::default_for(8, 32);
                        cfg.shared_block = shared;
                        cfg.pos_enc = pos;
                        cfg.branches = br;
                        cfg.trainable_blocks = blocks;
                        let p = params(&cfg);
                        assert_eq!(p.param_count(), cfg.param_count(), "{cfg:?}");
                        assert_eq!(p.named().len(), p.clone().tensors_mut().len());
                    }
                }
            }
        }
    }

    #[test]
    fn init_values() {
        let p = params(&HeadConfig::default_for(8, 32));
        assert!(p.pi.data().iter().all(|&v| v == 0.0));
        assert!(p.fc2_w.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.fc2_b.data(), &[0.0]);
        assert_eq!(p.f_pos.as_ref().unwrap().shape(), &[4, 32]);
        assert_eq!(p.d_pos.as_ref().unwrap().shape(), &[3, 32]);
    }

    #[test]
    fn bind_order_matches_names() {
        let p = params(&HeadConfig::default_for(8, 32));
        let mut tape = Tape::<f32>::new();
        let vars = p.bind(&mut tape);
        let flat = vars.flat();
        let named = p.named();
        assert_eq!(flat.len(), named.len());
        for (v, (_, t)) in flat.iter().zip(&named) {
            assert_eq!(tape.value(*v).data(), t.data());
        }
    }

    #[test]
    fn archive_round_trip() {
        let mut cfg = HeadConfig::default_for(8, 32);
        cfg.shared_block = false;
        let p = params(&cfg);
        let mut a = Archive::new(serde_json::Value::Null, None);
        p.to_archive_into(&mut a);
        let back = LtdHeadParams::from_archive(&cfg, &mut a, PREFIX).unwrap();
        assert_eq!(back, p);
        assert!(a.tensors.is_empty());
    }
}
