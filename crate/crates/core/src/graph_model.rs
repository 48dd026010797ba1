//! Dense feed-forward networks whose block outputs are circuit vertices.
//!
//! A block is any layer flagged `is_block`; each of its output channels is
//! one vertex. Pruning zeroes channels after the block's activation.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`; the ReLU kink counts as inactive.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// Row-major `[out][in]`.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub is_block: bool,
}

impl LayerSpec {
    pub fn out_dim(&self) -> usize {
        self.weight.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.first().map_or(0, Vec::len)
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// A vertex: channel `channel` of block `layer` (block ordinal, not raw layer index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId {
    pub layer: usize,
    pub channel: usize,
}

impl VertexId {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

/// Per-block keep bits (true = keep).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub blocks: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all(block_widths: &[usize], keep: bool) -> Self {
        Self {
            blocks: block_widths.iter().map(|&w| vec![keep; w]).collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }
}

/// Network file contents. Field names are part of the model file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Builds and validates a network.
    pub fn new(input_dim: usize, num_classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self { input_dim, num_classes, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Shape("input_dim and num_classes must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        if !self.layers.iter().any(|l| l.is_block) {
            return Err(Error::Shape("network has no block layer".into()));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.out_dim() == 0 {
                return Err(Error::Shape(format!("layer {i} has no outputs")));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != out dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if let Some(row) = layer.weight.iter().position(|r| r.len() != width) {
                return Err(Error::Shape(format!(
                    "layer {i} row {row}: expected {width} inputs, got {}",
                    layer.weight[row].len()
                )));
            }
            let finite = layer.weight.iter().flatten().chain(&layer.bias).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Shape(format!("layer {i} has non-finite parameters")));
            }
            width = layer.out_dim();
        }
        if width != self.num_classes {
            return Err(Error::Shape(format!(
                "final layer width {width} != num_classes {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn block_widths(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.is_block).map(LayerSpec::out_dim).collect()
    }

    pub fn total_vertices(&self) -> usize {
        self.block_widths().iter().sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input length {} != input_dim {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Logits for `x`; with a mask, pruned block channels are forced to 0
    /// after the block activation.
    pub fn forward(&self, x: &[f64], mask: Option<&PruneMask>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if let Some(m) = mask {
            if m.widths() != self.block_widths() {
                return Err(Error::Shape(format!(
                    "prune mask widths {:?} != block widths {:?}",
                    m.widths(),
                    self.block_widths()
                )));
            }
        }
        let mut h = x.to_vec();
        let mut block = 0;
        for layer in &self.layers {
            h = layer.pre_activation(&h);
            h.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            if layer.is_block {
                if let Some(m) = mask {
                    for (v, &keep) in h.iter_mut().zip(&m.blocks[block]) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
                block += 1;
            }
        }
        Ok(h)
    }

    /// Unmasked post-activation outputs of every block.
    pub fn block_activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let mut out = Vec::new();
        for layer in &self.layers {
            h = layer.pre_activation(&h);
            h.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            if layer.is_block {
                out.push(h.clone());
            }
        }
        Ok(out)
    }

    /// Block activations together with the gradient of logit `target` with
    /// respect to each block's post-activation output.
    pub fn block_gradients(&self, x: &[f64], target: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        if target >= self.num_classes {
            return Err(Error::Invalid(format!(
                "class {target} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&h);
            h = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(h.clone());
        }

        // d logit_target / d post-activation of the last layer.
        let mut grad_post = vec![0.0; self.num_classes];
        grad_post[target] = 1.0;
        let mut block_grads = Vec::new();
        let mut block_acts = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.is_block {
                block_grads.push(grad_post.clone());
                block_acts.push(post[i].clone());
            }
            if i == 0 {
                break;
            }
            let grad_pre: Vec<f64> = grad_post
                .iter()
                .zip(&pre[i])
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let mut next = vec![0.0; layer.in_dim()];
            for (row, g) in layer.weight.iter().zip(&grad_pre) {
                for (n, w) in next.iter_mut().zip(row) {
                    *n += w * g;
                }
            }
            grad_post = next;
        }
        block_grads.reverse();
        block_acts.reverse();
        Ok((block_acts, block_grads))
    }

    /// Predicted class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64], mask: Option<&PruneMask>) -> Result<usize> {
        Ok(argmax(&self.forward(x, mask)?))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Hyperparameters for [`train_toy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Widths of the hidden ReLU blocks.
    pub hidden_widths: Vec<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// When set, training fails unless train accuracy reaches this value.
    #[serde(default)]
    pub min_train_acc: Option<f64>,
}

fn default_batch_size() -> usize {
    32
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            learning_rate: 0.05,
            hidden_widths: vec![16],
            batch_size: default_batch_size(),
            min_train_acc: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: NetworkSpec,
    pub train_accuracy: f64,
}

fn init_network(cfg: &ToyTrainConfig, input_dim: usize, num_classes: usize) -> Result<NetworkSpec> {
    let mut rng = CounterRng::new(cfg.seed, 0);
    let mut layers = Vec::new();
    let mut fan_in = input_dim;
    let widths = cfg.hidden_widths.iter().copied().chain(std::iter::once(num_classes));
    let n_hidden = cfg.hidden_widths.len();
    for (i, width) in widths.enumerate() {
        let is_block = i < n_hidden;
        let scale = (2.0 / fan_in as f64).sqrt();
        let weight = (0..width)
            .map(|_| (0..fan_in).map(|_| rng.normal() * scale).collect())
            .collect();
        layers.push(LayerSpec {
            weight,
            bias: vec![0.0; width],
            activation: if is_block { Activation::Relu } else { Activation::Identity },
            is_block,
        });
        fan_in = width;
    }
    NetworkSpec::new(input_dim, num_classes, layers)
}

/// Trains a ReLU MLP with plain mini-batch gradient descent on softmax
/// cross-entropy. Fully determined by `cfg.seed`.
pub fn train_toy(cfg: &ToyTrainConfig, data: &LabeledDataset) -> Result<TrainedModel> {
    if cfg.hidden_widths.is_empty() || cfg.hidden_widths.contains(&0) {
        return Err(Error::Config("hidden_widths must be non-empty and positive".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    if data.examples.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let input_dim = data.input_dim();
    let num_classes = data.num_classes;
    if let Some(e) = data.examples.iter().find(|e| e.y >= num_classes) {
        return Err(Error::Invalid(format!("label {} out of range", e.y)));
    }
    let mut net = init_network(cfg, input_dim, num_classes)?;

    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = CounterRng::new(cfg.seed, 1 + epoch as u64);
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<(Vec<Vec<f64>>, Vec<f64>)> = net
                .layers
                .iter()
                .map(|l| (vec![vec![0.0; l.in_dim()]; l.out_dim()], vec![0.0; l.out_dim()]))
                .collect();
            for &idx in batch {
                let ex = &data.examples[idx];
                accumulate_gradient(&net, &ex.x, ex.y, &mut grads);
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(&grads) {
                for (row, grow) in layer.weight.iter_mut().zip(gw) {
                    for (w, g) in row.iter_mut().zip(grow) {
                        *w -= step * g;
                    }
                }
                for (b, g) in layer.bias.iter_mut().zip(gb) {
                    *b -= step * g;
                }
            }
        }
    }
    net.validate()?;

    let correct = data
        .examples
        .iter()
        .filter(|e| net.predict(&e.x, None).is_ok_and(|p| p == e.y))
        .count();
    let train_accuracy = correct as f64 / data.examples.len() as f64;
    if let Some(required) = cfg.min_train_acc {
        if train_accuracy < required {
            return Err(Error::Convergence { achieved: train_accuracy, required });
        }
    }
    Ok(TrainedModel { net, train_accuracy })
}

fn accumulate_gradient(net: &NetworkSpec, x: &[f64], y: usize, grads: &mut [(Vec<Vec<f64>>, Vec<f64>)]) {
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut h = x.to_vec();
    for layer in &net.layers {
        let z = layer.pre_activation(&h);
        inputs.push(h);
        h = z.iter().map(|&v| layer.activation.apply(v)).collect();
        pre.push(z);
    }
    // softmax cross-entropy gradient wrt logits
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = h.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
    delta[y] -= 1.0;

    for (i, layer) in net.layers.iter().enumerate().rev() {
        let dz: Vec<f64> = delta
            .iter()
            .zip(&pre[i])
            .map(|(d, &z)| d * layer.activation.derivative(z))
            .collect();
        let (gw, gb) = &mut grads[i];
        for ((grow, gbias), &d) in gw.iter_mut().zip(gb.iter_mut()).zip(&dz) {
            *gbias += d;
            for (g, a) in grow.iter_mut().zip(&inputs[i]) {
                *g += d * a;
            }
        }
        if i > 0 {
            let mut prev = vec![0.0; layer.in_dim()];
            for (row, &d) in layer.weight.iter().zip(&dz) {
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            delta = prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{LabeledDataset, LabeledExample};

    fn identity_net(relu: bool) -> NetworkSpec {
        NetworkSpec::new(
            2,
            2,
            vec![
                LayerSpec {
                    weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    bias: vec![0.0, 0.0],
                    activation: if relu { Activation::Relu } else { Activation::Identity },
                    is_block: true,
                },
                LayerSpec {
                    weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    bias: vec![0.0, 0.0],
                    activation: Activation::Identity,
                    is_block: false,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn identity_block_activation() {
        let net = identity_net(true);
        assert_eq!(net.block_activations(&[1.0, 2.0]).unwrap(), vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn relu_block_activation() {
        let net = identity_net(true);
        assert_eq!(net.block_activations(&[-1.0, 5.0]).unwrap(), vec![vec![0.0, 5.0]]);
    }

    #[test]
    fn shape_errors() {
        let net = identity_net(true);
        assert!(matches!(net.forward(&[1.0], None), Err(Error::Shape(_))));
        let bad = PruneMask::all(&[3], true);
        assert!(matches!(net.forward(&[1.0, 1.0], Some(&bad)), Err(Error::Shape(_))));
        assert!(matches!(net.block_gradients(&[1.0, 1.0], 2), Err(Error::Invalid(_))));
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let mut net = identity_net(true);
        net.layers[1].weight[0].push(1.0);
        assert!(net.validate().is_err());
        let mut net = identity_net(true);
        net.layers[0].is_block = false;
        assert!(net.validate().is_err());
        let mut net = identity_net(true);
        net.layers[0].bias[0] = f64::NAN;
        assert!(net.validate().is_err());
    }

    #[test]
    fn all_false_mask_equals_zero_activation_forward() {
        let net = identity_net(true);
        let mask = PruneMask::all(&[2], false);
        let logits = net.forward(&[3.0, 4.0], Some(&mask)).unwrap();
        assert_eq!(logits, vec![0.0, 0.0]);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn gradient_matches_finite_differences_through_relu() {
        // Two blocks so the gradient passes through a ReLU.
        let cfg = ToyTrainConfig { hidden_widths: vec![5, 4], epochs: 0, ..Default::default() };
        let data = LabeledDataset {
            num_classes: 3,
            examples: vec![LabeledExample { id: "a".into(), x: vec![0.3, -0.7, 1.1], y: 0 }],
        };
        let net = train_toy(&cfg, &data).unwrap().net;
        let x = [0.3, -0.7, 1.1];
        let (acts, grads) = net.block_gradients(&x, 2).unwrap();
        // Perturb block-1 channels through a bias shift on that layer.
        let h = 1e-6;
        for c in 0..4 {
            if acts[1][c] <= 1e-3 {
                continue;
            }
            let mut plus = net.clone();
            plus.layers[1].bias[c] += h;
            let mut minus = net.clone();
            minus.layers[1].bias[c] -= h;
            let fd = (plus.forward(&x, None).unwrap()[2] - minus.forward(&x, None).unwrap()[2]) / (2.0 * h);
            assert!((fd - grads[1][c]).abs() < 1e-6, "channel {c}: fd {fd} vs {}", grads[1][c]);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = LabeledDataset {
            num_classes: 2,
            examples: vec![
                LabeledExample { id: "a".into(), x: vec![1.0, 0.0], y: 0 },
                LabeledExample { id: "b".into(), x: vec![0.0, 1.0], y: 1 },
            ],
        };
        let cfg = ToyTrainConfig { epochs: 0, seed: 4, hidden_widths: vec![3], ..Default::default() };
        let trained = train_toy(&cfg, &data).unwrap();
        assert_eq!(trained.net, init_network(&cfg, 2, 2).unwrap());
    }

    #[test]
    fn convergence_failure_is_reported() {
        // Contradictory labels: at most 50% accuracy is reachable.
        let data = LabeledDataset {
            num_classes: 2,
            examples: vec![
                LabeledExample { id: "a".into(), x: vec![1.0], y: 0 },
                LabeledExample { id: "b".into(), x: vec![1.0], y: 1 },
            ],
        };
        let cfg = ToyTrainConfig { epochs: 5, min_train_acc: Some(0.9), hidden_widths: vec![2], ..Default::default() };
        assert!(matches!(train_toy(&cfg, &data), Err(Error::Convergence { .. })));
    }
}
