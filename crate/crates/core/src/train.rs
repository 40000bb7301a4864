//! Adam, the training loop, and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{Dataset, Family, Question, IMAGE_LEN, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::params::{Forward, Mode, ParamGrads, ParamStore};
use crate::tensor::{Rng, Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.shape()).expect("valid shape"))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        let grads = grads.all();
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
        let (one, eps) = (T::one(), T::from_f64(ADAM_EPS));
        let c1 = T::from_f64(1.0 - BETA1.powi(t));
        let c2 = T::from_f64(1.0 - BETA2.powi(t));
        let lr = T::from_f64(self.lr);
        for (i, (p, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 64,
            lr: 5e-4,
            seed: 1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch size {} < 2", self.batch)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.eval_every == 0 {
            return Err(Error::Config(
                "learning rate must be finite and non-negative, eval_every positive".into(),
            ));
        }
        Ok(())
    }
}

/// Inputs of one minibatch.
pub struct Batch<T: Scalar = f32> {
    pub images: Option<Tensor<T>>,
    pub questions: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    /// Images are only copied when `with_images`.
    pub fn gather(data: &Dataset, indices: &[usize], with_images: bool) -> Result<Self> {
        let images = if with_images {
            let mut buf = Vec::with_capacity(indices.len() * IMAGE_LEN);
            for &i in indices {
                buf.extend(data.samples[i].image.iter().map(|&v| T::from_f64(v as f64)));
            }
            Some(Tensor::new(&[indices.len(), 3, IMAGE_SIZE, IMAGE_SIZE], buf)?)
        } else {
            None
        };
        Ok(Self {
            images,
            questions: indices
                .iter()
                .map(|&i| data.samples[i].tokens.iter().map(|&t| t as usize).collect())
                .collect(),
            targets: indices.iter().map(|&i| data.samples[i].answer as usize).collect(),
        })
    }
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::for_stream(seed ^ 0x5348_5546_464c_4521, epoch as u64).shuffle(&mut order);
    order
}

/// Batches of `order`; a trailing batch smaller than 2 is dropped.
pub fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|c| c.len() >= 2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// One optimizer step on `batch`: train-mode forward, backward, Adam,
/// then running-statistic updates.
pub fn train_step<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    batch: &Batch<T>,
) -> Result<StepStats> {
    let (loss, correct, grads, bn) = {
        let mut fw = Forward::new(store, Mode::Train, true);
        let out = model.forward(&mut fw, batch.images.as_ref(), &batch.questions)?;
        let loss = fw.tape.cross_entropy(out.logits, &batch.targets)?;
        let value = fw.tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value}")));
        }
        let preds = argmax_rows(fw.tape.value(out.logits));
        let correct = preds.iter().zip(&batch.targets).filter(|(p, t)| p == t).count();
        let grads = fw.param_grads(loss)?;
        (value, correct, grads, fw.finish())
    };
    if grads.all().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    adam.update(store, &grads)?;
    bn.apply(store);
    Ok(StepStats {
        loss,
        correct,
        count: batch.targets.len(),
    })
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let a = logits.shape()[1];
    logits
        .data()
        .chunks(a)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect()
}

/// Mean loss and accuracy over one pass of `data` in the epoch's order.
pub fn train_epoch<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepStats> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let order = epoch_order(cfg.seed, epoch, data.len());
    let mut total = StepStats {
        loss: 0.0,
        correct: 0,
        count: 0,
    };
    for (bi, idx) in batches(&order, cfg.batch).enumerate() {
        let batch = Batch::gather(data, idx, model.config.fusion.uses_image())?;
        let s = train_step(model, store, adam, &batch).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch} batch {bi}: {m}")),
            e => e,
        })?;
        total.loss += s.loss * s.count as f64;
        total.correct += s.correct;
        total.count += s.count;
    }
    total.loss /= total.count.max(1) as f64;
    Ok(total)
}

/// Accuracy overall and per question family.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `(family, correct, total)` in family order.
    pub families: Vec<(Family, usize, usize)>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn family_accuracy(&self, f: Family) -> f64 {
        self.families
            .iter()
            .find(|x| x.0 == f)
            .map_or(0.0, |&(_, c, t)| c as f64 / t.max(1) as f64)
    }
}

/// Scores arbitrary predictions against `data`.
pub fn score(data: &Dataset, predictions: Vec<usize>) -> Evaluation {
    let mut families: Vec<(Family, usize, usize)> = Family::ALL.iter().map(|&f| (f, 0, 0)).collect();
    let mut correct = 0;
    for (i, (s, &p)) in data.samples.iter().zip(&predictions).enumerate() {
        let hit = p == s.answer as usize;
        correct += hit as usize;
        if let Some(f) = data.family(i) {
            let e = &mut families[f as usize];
            e.1 += hit as usize;
            e.2 += 1;
        }
    }
    Evaluation {
        accuracy: correct as f64 / data.len().max(1) as f64,
        correct,
        total: data.len(),
        families,
        predictions,
    }
}

/// Eval batch size; batches run in parallel and are joined in order.
pub const EVAL_BATCH: usize = 250;

pub fn predict_all<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset) -> Result<Vec<usize>> {
    let n = data.len();
    let chunks = n.div_ceil(EVAL_BATCH);
    let parts = par::map_range(chunks, |c| -> Result<Vec<usize>> {
        let idx: Vec<usize> = (c * EVAL_BATCH..((c + 1) * EVAL_BATCH).min(n)).collect();
        let batch = Batch::<T>::gather(data, &idx, model.config.fusion.uses_image())?;
        Ok(model
            .predict(store, batch.images.as_ref(), &batch.questions)?
            .predictions())
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset) -> Result<Evaluation> {
    Ok(score(data, predict_all(model, store, data)?))
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub seconds: f64,
    pub val_families: Vec<(Family, f64)>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,train_acc,val_acc,seconds";

impl Metrics {
    pub fn csv_row(&self) -> String {
        let val = self.val_acc.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6},{:.6},{},{:.3}",
            self.epoch, self.train_loss, self.train_acc, val, self.seconds
        )
    }
}

/// Result of [`fit`].
pub struct Trained<T: Scalar = f32> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub history: Vec<Metrics>,
    pub final_eval: Option<Evaluation>,
}

/// Trains `model` for `cfg.epochs`, calling `on_epoch` after each.
pub fn fit<T: Scalar>(
    model: Model,
    mut store: ParamStore<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Metrics),
) -> Result<Trained<T>> {
    cfg.validate()?;
    let mut adam = AdamState::new(&store, cfg.lr);
    let mut history = Vec::new();
    let mut final_eval = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let s = train_epoch(&model, &mut store, &mut adam, train, cfg, epoch)?;
        let eval = match val {
            Some(v) if epoch % cfg.eval_every == 0 || epoch == cfg.epochs => Some(evaluate(&model, &store, v)?),
            _ => None,
        };
        let m = Metrics {
            epoch,
            train_loss: s.loss,
            train_acc: s.correct as f64 / s.count.max(1) as f64,
            val_acc: eval.as_ref().map(|e| e.accuracy),
            seconds: start.elapsed().as_secs_f64(),
            val_families: eval
                .as_ref()
                .map(|e| Family::ALL.iter().map(|&f| (f, e.family_accuracy(f))).collect())
                .unwrap_or_default(),
        };
        on_epoch(&m);
        history.push(m);
        if eval.is_some() {
            final_eval = eval;
        }
    }
    Ok(Trained {
        model,
        store,
        history,
        final_eval,
    })
}

/// CSV rows for `history`, with header.
pub fn log_csv(history: &[Metrics]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for m in history {
        let _ = writeln!(s, "{}", m.csv_row());
    }
    s
}

/// Family of each sample, from its tokens.
pub fn families(data: &Dataset) -> Vec<Option<Family>> {
    data.samples
        .iter()
        .map(|s| Question::parse(&s.tokens, &data.vocab).map(Question::family))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Fusion, ModelConfig};
    use crate::params::{Init, Role};
    use crate::qghc::QghcConfig;

    fn single_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::<f64>::new(0);
        let id = s.declare("w", &[3], Role::QiFree, Init::Zeros).unwrap();
        *s.value_mut(id) = Tensor::full(&[3], v).unwrap();
        s
    }

    fn grads_of(store: &ParamStore<f64>, g: f64) -> ParamGrads<f64> {
        let mut fw = Forward::new(store, Mode::Train, true);
        let w = fw.param(store.ids().next().unwrap());
        let y = fw.tape.scale(w, g);
        let loss = fw.tape.sum(y);
        fw.param_grads(loss).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = single_param(0.7);
        let mut adam = AdamState::new(&s, 1e-2);
        let g = grads_of(&s, 0.0);
        adam.update(&mut s, &g).unwrap();
        assert!(s.values()[0].data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.5, -7.0] {
            let mut s = single_param(0.0);
            let mut adam = AdamState::new(&s, 1e-3);
            let grads = grads_of(&s, g);
            adam.update(&mut s, &grads).unwrap();
            for &v in s.values()[0].data() {
                assert!(((v.abs() - 1e-3) / 1e-3).abs() < 1e-3, "{v}");
                assert_eq!(v.signum(), -g.signum());
            }
        }
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let a = epoch_order(1, 3, 50);
        assert_eq!(a, epoch_order(1, 3, 50));
        assert_ne!(a, epoch_order(1, 4, 50));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        let sizes: Vec<usize> = batches(&a, 7).map(<[usize]>::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 49);
        assert!(sizes.iter().all(|&n| n == 7));
    }

    #[test]
    fn random_predictions_score_near_chance() {
        let data = Dataset::generate(4, 10_000);
        let mut rng = Rng::new(5);
        let preds = (0..data.len()).map(|_| rng.below(13)).collect();
        let e = score(&data, preds);
        assert!((e.accuracy - 1.0 / 13.0).abs() < 0.02, "{}", e.accuracy);
        let weighted: f64 = e.families.iter().map(|&(_, c, _)| c as f64).sum::<f64>() / e.total as f64;
        assert!((weighted - e.accuracy).abs() < 1e-6);
    }

    #[test]
    fn leaked_targets_score_one() {
        let data = Dataset::generate(6, 50);
        let preds = data.samples.iter().map(|s| s.answer as usize).collect();
        assert_eq!(score(&data, preds).accuracy, 1.0);
    }

    fn tiny_model(fusion: Fusion) -> (Model, ParamStore<f32>) {
        let mut cfg = ModelConfig::toy(19, 13);
        cfg.encoder_widths = [4, 8];
        cfg.embed = 8;
        cfg.qghc = QghcConfig {
            c_in: 8,
            c_out: 8,
            groups: 2,
            dynamic: 1,
            d_q: 16,
            hidden: 8,
            modules: 1,
            mid_width: None,
            index_seed: None,
        };
        cfg.fusion = fusion;
        let mut store = ParamStore::new(3);
        let model = Model::declare(&mut store, &cfg).unwrap();
        (model, store)
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let (model, mut store) = tiny_model(Fusion::Qghc);
        let data = Dataset::generate(7, 64);
        let batch = Batch::gather(&data, &(0..64).collect::<Vec<_>>(), true).unwrap();
        let mut adam = AdamState::new(&store, 5e-4);
        let s = train_step(&model, &mut store, &mut adam, &batch).unwrap();
        assert!((s.loss - 13f64.ln()).abs() < 0.3, "{}", s.loss);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, store) = tiny_model(Fusion::Qghc);
        let before = store.values().to_vec();
        let data = Dataset::generate(8, 40);
        let cfg = TrainConfig {
            epochs: 2,
            batch: 16,
            lr: 0.0,
            ..Default::default()
        };
        let t = fit(model, store, &data, Some(&data), &cfg, |_| {}).unwrap();
        assert_eq!(t.store.values(), &before[..]);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = Dataset::generate(9, 48);
        let cfg = TrainConfig {
            epochs: 2,
            batch: 16,
            ..Default::default()
        };
        let run = || {
            let (model, store) = tiny_model(Fusion::ConcatBaseline);
            let t = fit(model, store, &data, Some(&data), &cfg, |_| {}).unwrap();
            (
                t.store.values().to_vec(),
                t.store.buffers().to_vec(),
                t.history.iter().map(|m| (m.train_loss, m.val_acc)).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn blind_training_needs_no_images() {
        let (model, mut store) = tiny_model(Fusion::Blind);
        let data = Dataset::generate(10, 8);
        let batch = Batch::<f32>::gather(&data, &(0..8).collect::<Vec<_>>(), false).unwrap();
        assert!(batch.images.is_none());
        let mut adam = AdamState::new(&store, 1e-3);
        train_step(&model, &mut store, &mut adam, &batch).unwrap();
    }
}
