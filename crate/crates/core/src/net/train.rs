//! Training loop, loss and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, Augment, Dataset, Normalization};
use crate::error::{invalid, QbitError, Result};
use crate::net::{lr_at, Mode, Network, Optimizer, TrainConfig};

/// Anything that maps a batch of normalized inputs to logits.
pub trait Classifier {
    fn logits(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>>;
    fn classes(&self) -> usize;
}

impl Classifier for Network {
    fn logits(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.infer(inputs, batch)
    }

    fn classes(&self) -> usize {
        Network::classes(self)
    }
}

/// Mean softmax cross-entropy, its gradient with respect to the logits, and the
/// number of correct arg-max predictions (ties go to the lowest class).
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>, usize) {
    let b = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
        for (c, g) in grad[s * classes..(s + 1) * classes].iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *g = (p - f64::from(u8::from(c == y))) / b as f64;
        }
    }
    (loss / b.max(1) as f64, grad, correct)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correctly classified samples.
pub fn evaluate(model: &dyn Classifier, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let classes = model.classes();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = make_batch(ds, chunk, norm, None);
        let logits = model.logits(&b.inputs, b.len())?;
        correct += b
            .labels
            .iter()
            .enumerate()
            .filter(|(s, &y)| argmax(&logits[s * classes..(s + 1) * classes]) == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    /// `epoch lr train_loss train_acc val_acc`, tab separated.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_acc
        )
    }
}

pub const METRICS_HEADER: &str = "epoch\tlr\ttrain_loss\ttrain_acc\tval_acc";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Trains `net` in place. Validation accuracy is measured after every epoch;
/// with `keep_best` the parameters of the best validation epoch are restored.
pub fn train(
    net: &mut Network,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    norm: &Normalization,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if train_set.shape() != net.def().input || train_set.classes() != net.classes() {
        return Err(invalid(format!(
            "dataset {:?} with {} classes does not fit network input {:?} with {} classes",
            train_set.shape(),
            train_set.classes(),
            net.def().input,
            net.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg, net);
    let augment = Augment {
        pad: cfg.pad_crop,
        flip: cfg.flip,
    };
    let classes = net.classes();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    #[allow(clippy::type_complexity)]
    let mut best: Option<(usize, f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(train_set, chunk, norm, Some((augment, &mut rng)));
            let (logits, cache) = match net.forward(&batch.inputs, batch.len(), Mode::Train) {
                Ok(r) => r,
                Err(QbitError::NumericFailure { .. }) => return Err(QbitError::Diverged { epoch, step }),
                Err(e) => return Err(e),
            };
            let (loss, grad, ok) = softmax_cross_entropy(&logits, &batch.labels, classes);
            if !loss.is_finite() {
                return Err(QbitError::Diverged { epoch, step });
            }
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            let grads = net.backward(&cache, &grad)?;
            opt.step(net, &grads, lr)?;
        }
        let val_acc = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(net, val_set, norm, 256)?
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        log::info!("{}", m.tsv_line());
        on_epoch(&m);
        let better = match &best {
            None => true,
            Some((_, b, _, _)) => val_acc > *b,
        };
        if better || val_set.is_empty() {
            let params = net.params().iter().map(|p| p.to_vec()).collect();
            let buffers = net.buffers().iter().map(|b| b.to_vec()).collect();
            best = Some((epoch, val_acc, params, buffers));
        }
        metrics.push(m);
    }
    let (best_epoch, best_val_acc) = match best {
        Some((e, acc, params, buffers)) => {
            if cfg.keep_best {
                net.load_state(params, buffers)?;
            }
            (e, acc)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainReport {
        metrics,
        best_epoch,
        best_val_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
        let labels = vec![2, 0];
        let (_, grad, correct) = softmax_cross_entropy(&logits, &labels, 3);
        assert_eq!(correct, 2);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fd = (softmax_cross_entropy(&p, &labels, 3).0 - softmax_cross_entropy(&m, &labels, 3).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn metrics_line_has_five_fields() {
        let m = EpochMetrics {
            epoch: 3,
            lr: 0.01,
            train_loss: 0.5,
            train_acc: 0.9,
            val_acc: 0.8,
        };
        assert_eq!(m.tsv_line().split('\t').count(), 5);
        assert_eq!(METRICS_HEADER.split('\t').count(), 5);
    }
}
