//! Mini-batch optimisation of a named subset of parameters.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lip::PreparedRois;
use crate::lm::{loss_graph, ModelConfig, TokenizedSample};
use crate::tensor::{no_grad, Binder, Graph, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball momentum with decoupled weight decay.
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global L2 norm the gradient is clipped to.
    pub grad_clip: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Stops early once this many updates have been made.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            weight_decay: 0.02,
            batch_size: 32,
            epochs: 2,
            seed: 0,
            grad_clip: 1.0,
            momentum: 0.9,
            optimizer: Optimizer::Sgd,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.grad_clip > 0.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

/// One teacher-forced sample and, for the lip-conditioned model, its crops.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub sample: TokenizedSample,
    pub rois: Option<PreparedRois>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("step,loss,grad_norm,seconds\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{:.3}\n", r.step, r.loss, r.grad_norm, r.seconds));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Which tensors move and which of those decay.
pub struct Partition<'a> {
    pub trainable: &'a dyn Fn(&str) -> bool,
    pub decays: &'a dyn Fn(&str) -> bool,
}

/// Summed masked loss and gradients of `batch`, normalised by its total
/// number of loss positions.
pub fn batch_gradients(
    params: &ParamSet,
    trainable: &dyn Fn(&str) -> bool,
    cfg: &ModelConfig,
    batch: &[&TrainExample],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let denom: usize = batch.iter().map(|e| e.sample.masked()).sum();
    if denom == 0 {
        return Err(Error::Precondition("batch has no loss positions".into()));
    }
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for ex in batch {
        let mut g = Graph::new();
        let mut b = Binder::new(params, trainable);
        let loss = loss_graph(&mut g, &mut b, cfg, &ex.sample, ex.rois.as_ref(), denom as f64)?;
        total += g.value(loss).item();
        let mut gr = g.backward(loss);
        for (name, t) in b.collect(&mut gr) {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    Ok((total, grads))
}

/// Mean masked loss over `examples`.
pub fn evaluate_loss(params: &ParamSet, cfg: &ModelConfig, examples: &[TrainExample]) -> Result<f64> {
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let denom: usize = examples.iter().map(|e| e.sample.masked()).sum();
    if denom == 0 {
        return Err(Error::Precondition("no loss positions".into()));
    }
    let mut total = 0.0;
    for ex in refs {
        let mut g = Graph::new();
        let mut b = Binder::new(params, &no_grad);
        let l = loss_graph(&mut g, &mut b, cfg, &ex.sample, ex.rois.as_ref(), denom as f64)?;
        total += g.value(l).item();
    }
    Ok(total)
}

struct OptState {
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    t: i32,
}

fn apply_update(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    scale: f64,
    part: &Partition<'_>,
    cfg: &TrainConfig,
    st: &mut OptState,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    st.t += 1;
    let lr = cfg.learning_rate;
    for (name, p) in params.iter_mut() {
        if !(part.trainable)(name) {
            continue;
        }
        let wd = if (part.decays)(name) { cfg.weight_decay } else { 0.0 };
        let (r, c) = p.shape();
        let g = grads.get(name);
        let m = st.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
        let grad_at = |i: usize| g.map_or(0.0, |g| g.data()[i] * scale);
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (i, (w, v)) in p.data_mut().iter_mut().zip(m.data_mut()).enumerate() {
                    *v = cfg.momentum * *v + grad_at(i);
                    *w -= lr * (*v + wd * *w);
                }
            }
            Optimizer::AdamW => {
                let s = st.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
                let (c1, c2) = (1.0 - B1.powi(st.t), 1.0 - B2.powi(st.t));
                let data = p.data_mut();
                for i in 0..data.len() {
                    let gi = grad_at(i);
                    let mi = &mut m.data_mut()[i];
                    *mi = B1 * *mi + (1.0 - B1) * gi;
                    let si = &mut s.data_mut()[i];
                    *si = B2 * *si + (1.0 - B2) * gi * gi;
                    let update = (*mi / c1) / ((*si / c2).sqrt() + EPS);
                    data[i] -= lr * (update + wd * data[i]);
                }
            }
        }
    }
}

/// Optimises the trainable partition of `params` in place. The example
/// order is a seeded shuffle per epoch. On a non-finite loss or gradient
/// the parameters are left at the last good update and an error returned.
pub fn train(
    examples: &[TrainExample],
    params: &mut ParamSet,
    part: &Partition<'_>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval: Option<&[TrainExample]>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Precondition("no training examples".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut st = OptState {
        first: BTreeMap::new(),
        second: BTreeMap::new(),
        t: 0,
    };
    let mut log = TrainLog::default();
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_gradients(params, part.trainable, model_cfg, &batch)?;
            let norm = grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
            }
            let scale = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            let backup = params.clone();
            apply_update(params, &grads, scale, part, cfg, &mut st);
            if !params.is_finite() {
                *params = backup;
                return Err(Error::Numeric(format!("parameters diverged at step {step}")));
            }
            let rec = StepLog {
                step,
                loss,
                grad_norm: norm,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_step(&rec);
            log.steps.push(rec);
            step += 1;
        }
        let eval_loss = match eval {
            Some(e) if !e.is_empty() => Some(evaluate_loss(params, model_cfg, e)?),
            _ => None,
        };
        log.epochs.push(EpochLog { epoch, eval_loss });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lip::LipEncoderConfig;
    use crate::lm::{decays, init_adapter, init_base, is_trainable};

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            max_len: 16,
            prefix_len: 2,
            prompt_layers: 1,
            lip: LipEncoderConfig {
                roi_size: 8,
                stem_channels: 2,
                blocks: 1,
                tcn_levels: 1,
                lip_dim: 4,
                lip_len: 3,
                ..Default::default()
            },
        }
    }

    fn examples() -> Vec<TrainExample> {
        (0..4)
            .map(|i| TrainExample {
                sample: TokenizedSample {
                    inputs: vec![1, 4 + i, 5],
                    targets: vec![4 + i, 5, 2],
                    mask: vec![false, true, true],
                },
                rois: Some(PreparedRois {
                    frames: 2,
                    height: 8,
                    width: 8,
                    pixels: (0..128).map(|p| ((p * (i + 1)) % 7) as f64 / 7.0 - 0.5).collect(),
                }),
            })
            .collect()
    }

    fn params() -> ParamSet {
        let mut p = init_base(&cfg(), 10, 0).unwrap();
        p.extend(init_adapter(&cfg(), 1).unwrap());
        p
    }

    const PART: Partition<'static> = Partition {
        trainable: &is_trainable,
        decays: &decays,
    };

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut p = params();
        let before = p.clone();
        let tc = TrainConfig { learning_rate: 0.0, max_steps: Some(1), ..Default::default() };
        train(&examples(), &mut p, &PART, &cfg(), &tc, None, |_| {}).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_moves_exactly_the_trainable_tensors() {
        let mut p = params();
        let before = p.clone();
        let tc = TrainConfig { max_steps: Some(1), ..Default::default() };
        let log = train(&examples(), &mut p, &PART, &cfg(), &tc, None, |_| {}).unwrap();
        assert_eq!(log.steps.len(), 1);
        for (name, t) in p.iter() {
            let old = before.expect(name);
            if is_trainable(name) {
                assert_ne!(t, old, "{name} did not move");
            } else {
                assert_eq!(t, old, "{name} moved");
            }
        }
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let tc = TrainConfig { batch_size: 2, epochs: 2, ..Default::default() };
        let (mut a, mut b) = (params(), params());
        let la = train(&examples(), &mut a, &PART, &cfg(), &tc, Some(&examples()), |_| {}).unwrap();
        let lb = train(&examples(), &mut b, &PART, &cfg(), &tc, None, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.steps.len(), 4);
        assert!(la.steps.windows(2).all(|w| w[0].step < w[1].step));
        assert!(la.epochs[1].eval_loss.is_some());
        assert_eq!(la.steps.iter().map(|s| s.loss).collect::<Vec<_>>(), lb.steps.iter().map(|s| s.loss).collect::<Vec<_>>());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        la.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss,grad_norm,seconds\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn gates_do_not_decay() {
        let mut p = params();
        p.insert("adapter.layer0.gate", Tensor::scalar(0.5));
        let mut grads = BTreeMap::new();
        for (n, t) in p.iter() {
            grads.insert(n.clone(), Tensor::zeros(t.rows(), t.cols()));
        }
        let tc = TrainConfig { weight_decay: 0.5, ..Default::default() };
        let mut st = OptState { first: BTreeMap::new(), second: BTreeMap::new(), t: 0 };
        let before = p.clone();
        apply_update(&mut p, &grads, 1.0, &PART, &tc, &mut st);
        assert_eq!(p.expect("adapter.layer0.gate").item(), 0.5);
        assert_ne!(p.expect("adapter.layer0.p_v"), before.expect("adapter.layer0.p_v"));
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_parameters() {
        let mut p = params();
        p.get_mut("lm.out.w").unwrap().data_mut()[0] = f64::NAN;
        let before = p.clone();
        let err = train(&examples(), &mut p, &PART, &cfg(), &TrainConfig::default(), None, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(format!("{p:?}"), format!("{before:?}"));
    }
}
