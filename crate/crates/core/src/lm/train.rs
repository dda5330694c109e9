use super::graph::{bind, lm_loss, Batch};
use super::{ModelDims, ModelParams};
use crate::autodiff::Graph;
use crate::corpus::Dataset;
use crate::error::{ensure, Error, Result};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub d: usize,
    pub layers: usize,
    pub maxlen: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            d: 64,
            layers: 4,
            maxlen: 24,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be positive");
        ensure!(self.batch_size >= 1, "batch size must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        Ok(())
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims {
            vocab,
            d: self.d,
            layers: self.layers,
            maxlen: self.maxlen,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean per-token loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Next-token training with Adam on shuffled mini-batches.
pub fn pretrain(dataset: &Dataset, vocab: usize, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("pretraining dataset".into()));
    }
    let dims = config.dims(vocab);
    for s in &dataset.sequences {
        ensure!(s.len() <= dims.maxlen, "sequence of {} tokens exceeds maxlen {}", s.len(), dims.maxlen);
    }
    let mut params = ModelParams::init(dims, config.seed)?;
    let mut adam = AdamState::new(&params.tensors);
    let mut order_rng = Rng::new(config.seed).split(0x5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let (mut total, mut tokens) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| dataset.sequences[i].as_slice()).collect();
            let batch = Batch::new(&seqs, &dims)?;
            let mut g = Graph::new();
            let nodes = bind(&mut g, &params, true);
            let loss = lm_loss(&mut g, &nodes, &dims, &batch);
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss).map_err(|e| diverged(epoch, e))?;
            if !value.is_finite() {
                return Err(Error::numeric(format!("pretrain epoch {epoch}"), format!("loss {value}")));
            }
            let n = batch.next_token_targets().1.iter().sum::<f64>();
            total += value * n;
            tokens += n;
            let grads: Vec<Tensor> = nodes
                .iter()
                .zip(&params.tensors)
                .map(|(id, t)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adam.step(&mut params.tensors, &grads, config.lr)?;
        }
        let mean = total / tokens.max(1.0);
        if epoch % 50 == 0 || epoch + 1 == config.epochs {
            log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        }
        log.epoch_loss.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::numeric(format!("pretrain epoch {}", config.epochs - 1), "non-finite parameters"));
    }
    Ok((params, log))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric { location, detail } => Error::numeric(format!("pretrain epoch {epoch}, {location}"), detail),
        other => other,
    }
}
