//! Small convolutional classifier whose penultimate layer serves as the
//! feature space for Fréchet distance and precision/recall.

use rayon::prelude::*;

use super::scores::Features;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{adam_step, kernels, AdamState, Graph, NodeId, Padding, ParamTable, Tensor};
use crate::rng::{self, STREAM_CLASSIFIER};
use rand::seq::SliceRandom;

pub const FEATURE_DIM: usize = 64;
const CONV1: usize = 8;
const CONV2: usize = 16;
const BATCH: usize = 32;
const INFER_CHUNK: usize = 64;
const LEARNING_RATE: f32 = 2e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalClassifier {
    params: ParamTable,
    channels: usize,
    side: usize,
    num_classes: usize,
    trained: bool,
}

struct Outputs {
    features: Tensor,
    logits: Tensor,
}

impl EvalClassifier {
    /// Freshly initialised weights; metrics refuse to use it until trained.
    pub fn untrained(channels: usize, side: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if side % 4 != 0 || side < 4 {
            return Err(Error::Argument(format!("classifier needs a side divisible by 4, got {side}")));
        }
        if num_classes < 2 {
            return Err(Error::Argument("classifier needs at least 2 classes".into()));
        }
        let mut r = rng::substream(seed, &[STREAM_CLASSIFIER, 0]);
        let mut p = ParamTable::new();
        let flat = CONV2 * (side / 4) * (side / 4);
        let mut conv = |p: &mut ParamTable, name: &str, o: usize, i: usize| -> Result<()> {
            let w = Tensor::randn(&[o, i, 3, 3], (1.0 / (9 * i) as f32).sqrt(), &mut r);
            p.insert(format!("{name}.weight"), w, false)?;
            p.insert(format!("{name}.bias"), Tensor::zeros(&[o]), false)
        };
        conv(&mut p, "conv1", CONV1, channels)?;
        conv(&mut p, "conv2", CONV2, CONV1)?;
        for (name, i, o) in [("fc", flat, FEATURE_DIM), ("head", FEATURE_DIM, num_classes)] {
            let w = Tensor::randn(&[i, o], (1.0 / i as f32).sqrt(), &mut r);
            p.insert(format!("{name}.weight"), w, false)?;
            p.insert(format!("{name}.bias"), Tensor::zeros(&[o]), false)?;
        }
        Ok(EvalClassifier {
            params: p,
            channels,
            side,
            num_classes,
            trained: false,
        })
    }

    /// Rebuilds a trained classifier from saved parameters, inferring its
    /// geometry from the weight shapes.
    pub fn from_params(params: ParamTable) -> Result<Self> {
        let shape = |n: &str| {
            params
                .get(n)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Config(format!("classifier checkpoint lacks `{n}`")))
        };
        let c1 = shape("conv1.weight")?;
        let fc = shape("fc.weight")?;
        let head = shape("head.weight")?;
        let quarter = ((fc[0] / CONV2) as f64).sqrt() as usize;
        let me = EvalClassifier::untrained(c1[1], quarter * 4, head[1], 0)?;
        for e in me.params.entries() {
            if params.get(&e.name).map(Tensor::shape) != Some(e.tensor.shape()) {
                return Err(Error::Config(format!("classifier parameter `{}` has the wrong shape", e.name)));
            }
        }
        Ok(EvalClassifier {
            params,
            trained: true,
            ..me
        })
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn build(&self, g: &mut Graph, x: NodeId, n: usize) -> (NodeId, NodeId) {
        let layer = |g: &mut Graph, h: NodeId, name: &str| {
            let w = g.param(format!("{name}.weight"));
            let b = g.param(format!("{name}.bias"));
            let h = g.conv2d(h, w, Some(b), Padding::Same);
            let h = g.silu(h);
            g.avgpool2x(h)
        };
        let h = layer(g, x, "conv1");
        let h = layer(g, h, "conv2");
        let h = g.reshape(h, &[n, CONV2 * (self.side / 4) * (self.side / 4)]);
        let linear = |g: &mut Graph, h: NodeId, name: &str| {
            let w = g.param(format!("{name}.weight"));
            let b = g.param(format!("{name}.bias"));
            let y = g.matmul(h, w);
            g.add_row_bias(y, b)
        };
        let f = linear(g, h, "fc");
        let f = g.silu(f);
        (f, linear(g, f, "head"))
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.side || s[3] != self.side {
            return Err(Error::Argument(format!(
                "classifier expects [N, {}, {}, {}], got {s:?}",
                self.channels, self.side, self.side
            )));
        }
        Ok(())
    }

    fn run(&self, images: &Tensor) -> Result<Outputs> {
        self.check_input(images)?;
        let n = images.shape()[0];
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(INFER_CHUNK)
            .map(|s| (s, (s + INFER_CHUNK).min(n)))
            .collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| {
                let idx: Vec<usize> = (s..e).collect();
                let mut g = Graph::new();
                let x = g.constant(images.gather_rows(&idx)?);
                let (f, logits) = self.build(&mut g, x, idx.len());
                g.set_output(logits);
                g.forward(&[&self.params])?;
                Ok((g.value(f).cloned().expect("evaluated"), g.value(logits).cloned().expect("evaluated")))
            })
            .collect::<Result<Vec<_>>>()?;
        let (f, l): (Vec<Tensor>, Vec<Tensor>) = parts.into_iter().unzip();
        Ok(Outputs {
            features: Tensor::stack_rows(&f)?,
            logits: Tensor::stack_rows(&l)?,
        })
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.run(images)?.logits)
    }

    /// Penultimate-layer activations, one row per image.
    pub fn features(&self, images: &Tensor) -> Result<Features> {
        Ok(Features::from_tensor(&self.run(images)?.features))
    }

    pub fn probabilities(&self, images: &Tensor) -> Result<Features> {
        let logits = self.logits(images)?;
        let n = logits.shape()[0];
        Features::new(n, self.num_classes, kernels::softmax_rows(n, self.num_classes, logits.data()))
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok((0..logits.shape()[0])
            .map(|i| {
                let row = logits.row(i);
                // First maximum wins, so ties resolve to the lower class.
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let pred = self.predict(data.images())?;
        let hits = pred.iter().zip(data.labels()).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Trains the classifier with cross-entropy and Adam on shuffled
/// mini-batches. Returns the classifier and the mean loss of each epoch.
pub fn train_eval_classifier(train: &Dataset, epochs: usize, seed: u64) -> Result<(EvalClassifier, Vec<f32>)> {
    let present = train.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::Argument(format!("classifier training data has {present} class(es)")));
    }
    let [c, h, w] = train.sample_shape();
    if h != w {
        return Err(Error::Argument(format!("classifier needs square images, got {h}x{w}")));
    }
    let mut clf = EvalClassifier::untrained(c, h, train.num_classes(), seed)?;
    let mut adam = AdamState::new(LEARNING_RATE);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::substream(seed, &[STREAM_CLASSIFIER, 1, epoch as u64]));
        let mut total = 0.0f64;
        let mut batches = 0;
        for batch in order.chunks(BATCH) {
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(train.images().gather_rows(batch)?);
            let (_, logits) = clf.build(&mut g, x, batch.len());
            let loss = g.softmax_cross_entropy(logits, &labels);
            g.set_output(loss);
            total += g.forward(&[&clf.params])?.item() as f64;
            let grads = g.backward()?;
            adam_step(&mut clf.params, &grads, &mut adam)?;
            batches += 1;
        }
        losses.push((total / batches as f64) as f32);
    }
    clf.trained = epochs > 0;
    Ok((clf, losses))
}
