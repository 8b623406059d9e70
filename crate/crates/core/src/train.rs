//! SGD with momentum, the step learning-rate schedule, and the training and
//! evaluation loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Agcn, AgcnConfig};
use crate::ops;
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

/// `lr0 / factor^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, lr0: f64, factor: f64, every: usize) -> f64 {
    lr0 / factor.powi((epoch / every) as i32)
}

impl AgcnConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.lr0, self.lr_decay_factor, self.lr_decay_every)
    }
}

/// Classic momentum: `v = m*v + g; w -= lr*v`, velocities starting at zero.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: Vec::new() }
    }

    /// Velocity buffers in registry order (empty before the first step).
    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Update every parameter from its stored gradient. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, reg: &mut ParamRegistry, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be positive")));
        }
        for (name, t) in reg.iter() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("non-finite gradient {} in {name}[{i}]", g[i])));
                }
            }
        }
        if self.velocity.is_empty() {
            self.velocity = reg.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        if self.velocity.len() != reg.len() {
            return Err(Error::config("parameter set changed between optimizer steps"));
        }
        let m = self.momentum;
        for ((_, t), v) in reg.iter_mut().zip(&mut self.velocity) {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
            for ((vi, gi), wi) in v.iter_mut().zip(&g).zip(t.data_mut()) {
                *vi = m * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Labelled inputs, each `[C,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::data(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::data(format!("label {} at index {i} exceeds {num_classes} classes", labels[i])));
        }
        if let Some(first) = inputs.first() {
            if let Some(i) = inputs.iter().position(|t| t.shape() != first.shape()) {
                return Err(Error::data(format!("input {i} has shape {:?}, expected {:?}", inputs[i].shape(), first.shape())));
            }
        }
        Ok(Dataset { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Stacked `[B,C,H,W]` inputs and labels for the given indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = Tensor::stack(&idx.iter().map(|&i| &self.inputs[i]).collect::<Vec<_>>())?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::data(format!("{what} dataset is empty")));
        }
        Ok(())
    }
}

/// `counts[true * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.chunks(self.num_classes).map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Header row `true\pred,0,1,..` followed by one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.num_classes {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for i in 0..self.num_classes {
            let _ = write!(s, "{i}");
            for j in 0..self.num_classes {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Index of the largest entry per row; ties go to the lower index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let l = logits.shape()[1];
    logits
        .data()
        .chunks(l)
        .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
        .collect()
}

pub fn evaluate(model: &Agcn, reg: &ParamRegistry, data: &Dataset) -> Result<Evaluation> {
    data.require_nonempty("evaluation")?;
    let classes = model.config().num_classes;
    if data.num_classes != classes {
        return Err(Error::data(format!("dataset has {} classes, model {classes}", data.num_classes)));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(model.config().batch_size) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.predict_logits(reg, &x)?;
        for (t, p) in labels.iter().zip(argmax_rows(&logits)) {
            confusion.record(*t, p);
        }
    }
    Ok(Evaluation { accuracy: confusion.accuracy(), confusion })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Final test-set confusion matrix.
    pub confusion: ConfusionMatrix,
    pub final_test_accuracy: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    /// `epoch,lr,loss,train_acc,test_acc` with shortest round-trip floats.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,train_acc,test_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.lr, e.loss, e.train_acc, e.test_acc);
        }
        s
    }
}

/// Trained model, its parameters and the run log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Agcn,
    pub params: ParamRegistry,
    pub report: TrainReport,
}

/// Build a fresh model from `config` and fit it.
pub fn train(config: &AgcnConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    let model = Agcn::new(config.clone())?;
    let mut params = model.init_params()?;
    let report = fit(&model, &mut params, train_set, test_set, |_| {})?;
    Ok(TrainOutcome { model, params, report })
}

/// Mini-batch SGD over `config.epochs`, evaluating on `test_set` after every
/// epoch. The shuffle order depends only on the config seed.
///
/// Parameters are rounded to checkpoint precision before the closing
/// evaluation, so a saved and reloaded model reproduces the reported accuracy.
pub fn fit(
    model: &Agcn,
    params: &mut ParamRegistry,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    train_set.require_nonempty("training")?;
    test_set.require_nonempty("test")?;
    let cfg = model.config();
    if train_set.num_classes != cfg.num_classes {
        return Err(Error::data(format!("dataset has {} classes, model {}", train_set.num_classes, cfg.num_classes)));
    }
    let mut sgd = Sgd::new(cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = model.forward(&mut tape, params, xv)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let grads = tape.backward(loss)?;
            loss_sum += tape.value(loss).item() * chunk.len() as f64;
            correct += argmax_rows(tape.value(out.logits)).iter().zip(&labels).filter(|(p, t)| p == t).count();
            params.zero_grad();
            params.accumulate_grads(&tape, &grads);
            sgd.step(params, lr)?;
        }
        let test = evaluate(model, params, test_set)?;
        let stats = EpochStats {
            epoch,
            lr,
            loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc: test.accuracy,
        };
        on_epoch(&stats);
        epochs.push(stats);
    }
    params.round_to_f32();
    let final_eval = evaluate(model, params, test_set)?;
    Ok(TrainReport { epochs, confusion: final_eval.confusion, final_test_accuracy: final_eval.accuracy })
}

/// Test accuracy of each fold when every fold is held out once. Folds come
/// from a seeded shuffle; fold `f` holds positions `i` with `i % folds == f`.
pub fn cross_validate(config: &AgcnConfig, data: &Dataset, folds: usize) -> Result<Vec<f64>> {
    if folds < 2 || folds > data.len() {
        return Err(Error::config(format!("cannot split {} samples into {folds} folds", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0xf01d));
    (0..folds)
        .map(|f| {
            let (test, train_idx): (Vec<_>, Vec<_>) = order.iter().enumerate().partition(|(i, _)| i % folds == f);
            let test: Vec<usize> = test.into_iter().map(|(_, &j)| j).collect();
            let train_idx: Vec<usize> = train_idx.into_iter().map(|(_, &j)| j).collect();
            Ok(train(config, &data.subset(&train_idx), &data.subset(&test))?.report.final_test_accuracy)
        })
        .collect()
}

/// Softmax regression on flattened raw inputs: the reference point a
/// synthetic task should defeat.
pub fn linear_baseline(train_set: &Dataset, test_set: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<f64> {
    train_set.require_nonempty("training")?;
    test_set.require_nonempty("test")?;
    let d = train_set.inputs[0].numel();
    let l = train_set.num_classes;
    let flat = |ds: &Dataset, idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let (x, y) = ds.batch(idx)?;
        Ok((x.reshape(&[idx.len(), d])?, y))
    };
    let mut reg = ParamRegistry::new();
    reg.insert("w", Tensor::zeros(&[l, d]))?;
    reg.insert("b", Tensor::zeros(&[l]))?;
    let mut sgd = Sgd::new(0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(8) {
            let (x, y) = flat(train_set, chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let w = tape.param(&reg, "w")?;
            let b = tape.param(&reg, "b")?;
            let logits = tape.linear(xv, w, Some(b))?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let grads = tape.backward(loss)?;
            reg.zero_grad();
            reg.accumulate_grads(&tape, &grads);
            sgd.step(&mut reg, lr)?;
        }
    }
    let all: Vec<usize> = (0..test_set.len()).collect();
    let (x, y) = flat(test_set, &all)?;
    let logits = ops::linear(&x, reg.get("w").expect("registered"), reg.get("b"))?;
    let correct = argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modality;

    fn one_param(w: f64, g: f64) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::scalar(w)).unwrap();
        reg.get_mut("w").unwrap().accumulate_grad(&[g]);
        reg
    }

    #[test]
    fn vanilla_step() {
        let mut reg = one_param(1.0, 0.5);
        Sgd::new(0.0).step(&mut reg, 0.1).unwrap();
        assert!((reg.get("w").unwrap().item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut reg = one_param(0.0, 2.0);
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut reg, 0.1).unwrap();
        sgd.step(&mut reg, 0.1).unwrap();
        assert!((sgd.velocity()[0][0] - 1.9 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut reg = one_param(0.25, 0.0);
        let mut sgd = Sgd::new(0.9);
        for _ in 0..3 {
            sgd.step(&mut reg, 0.1).unwrap();
        }
        assert_eq!(reg.get("w").unwrap().item(), 0.25);
    }

    #[test]
    fn non_finite_gradient_aborts_the_step() {
        let mut reg = one_param(1.0, f64::NAN);
        reg.insert("v", Tensor::scalar(2.0)).unwrap();
        reg.get_mut("v").unwrap().accumulate_grad(&[1.0]);
        assert!(matches!(Sgd::new(0.9).step(&mut reg, 0.1), Err(Error::Numeric(_))));
        assert_eq!(reg.get("v").unwrap().item(), 2.0);
    }

    #[test]
    fn schedule_closed_form() {
        let cfg = AgcnConfig::tiny(Modality::Visual, 2);
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(20), 0.001);
        assert_eq!(cfg.lr_at(40), 0.0001);
        assert_eq!(cfg.lr_at(59), 0.0001);
        for e in 0..60 {
            assert_eq!(cfg.lr_at(e), 0.01 / 10f64.powi((e / 20) as i32));
        }
    }

    #[test]
    fn confusion_bookkeeping() {
        let mut c = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (0, 1), (1, 1), (2, 0), (2, 2), (2, 2)] {
            c.record(t, p);
        }
        assert_eq!(c.row_sums(), vec![2, 1, 3]);
        assert_eq!(c.accuracy(), 4.0 / 6.0);
        assert_eq!(c.to_csv(), "true\\pred,0,1,2\n0,1,1,0\n1,0,1,0\n2,1,0,2\n");
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let t = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn dataset_validation() {
        let x = vec![Tensor::zeros(&[1, 2, 2]); 2];
        assert!(matches!(Dataset::new(x.clone(), vec![0, 2], 2), Err(Error::Data(_))));
        assert!(matches!(Dataset::new(x.clone(), vec![0], 2), Err(Error::Data(_))));
        let empty = Dataset::new(vec![], vec![], 2).unwrap();
        let cfg = AgcnConfig::tiny(Modality::Visual, 2);
        assert!(matches!(train(&cfg, &empty, &empty), Err(Error::Data(_))));
    }
}
