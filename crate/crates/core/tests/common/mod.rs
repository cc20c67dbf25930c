//! Plain-loop reference implementations used as test oracles. Nothing here
//! goes through the autodiff graph.

#![allow(dead_code, clippy::type_complexity)]

use tsa::nn::{LayerSpec, Network, NetworkSpec};

/// A dense MLP held as flat row-major buffers.
#[derive(Clone, Debug)]
pub struct OracleMlp {
    /// `(input, output, weight (input x output), bias)` per linear layer;
    /// `None` marks a relu.
    pub layers: Vec<Option<(usize, usize, Vec<f64>, Vec<f64>)>>,
}

impl OracleMlp {
    /// Copies the parameters of a linear/relu network.
    pub fn from_network(net: &Network) -> Self {
        Self::from_blocks(net.spec(), net.blocks().iter().map(|b| b.tensors().to_vec()).collect())
    }

    pub fn from_blocks(spec: &NetworkSpec, blocks: Vec<Vec<tsa::autodiff::Tensor>>) -> Self {
        let mut layers = Vec::new();
        for (block, tensors) in spec.blocks().iter().zip(blocks) {
            let mut t = tensors.into_iter();
            for layer in block.layers() {
                match *layer {
                    LayerSpec::Linear { input, output } => {
                        let w = t.next().unwrap().into_data();
                        let b = t.next().unwrap().into_data();
                        layers.push(Some((input, output, w, b)));
                    }
                    LayerSpec::Relu => layers.push(None),
                    ref other => panic!("oracle handles linear and relu only, got {other}"),
                }
            }
        }
        Self { layers }
    }

    /// Flattened parameters, linear layers in order, weight then bias.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|(_, _, w, b)| w.iter().chain(b).copied())
            .collect()
    }

    /// Per-layer activations; `acts[0]` is the input and the last entry
    /// holds the logits.
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for layer in &self.layers {
            let a = acts.last().unwrap();
            let next = match layer {
                Some((i, o, w, b)) => {
                    let mut y = vec![0.0; n * o];
                    for r in 0..n {
                        for j in 0..*o {
                            let mut s = b[j];
                            for k in 0..*i {
                                s += a[r * i + k] * w[k * o + j];
                            }
                            y[r * o + j] = s;
                        }
                    }
                    y
                }
                None => a.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            };
            acts.push(next);
        }
        acts
    }

    /// Mean softmax cross-entropy and its gradient, per linear layer as
    /// `(dW, db)`.
    pub fn loss_and_grads(&self, x: &[f64], labels: &[usize]) -> (f64, Vec<(Vec<f64>, Vec<f64>)>) {
        let n = labels.len();
        let acts = self.forward(x, n);
        let logits = acts.last().unwrap();
        let t = logits.len() / n;
        let mut loss = 0.0;
        let mut delta = vec![0.0; n * t];
        for r in 0..n {
            let row = &logits[r * t..(r + 1) * t];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..t {
                let p = (row[j] - m).exp() / z;
                delta[r * t + j] = (p - if j == labels[r] { 1.0 } else { 0.0 }) / n as f64;
            }
            loss -= row[labels[r]] - m - z.ln();
        }
        loss /= n as f64;

        let mut grads = Vec::new();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let a = &acts[li];
            match layer {
                Some((i, o, w, _)) => {
                    let mut dw = vec![0.0; i * o];
                    let mut db = vec![0.0; *o];
                    let mut dx = vec![0.0; n * i];
                    for r in 0..n {
                        for j in 0..*o {
                            let d = delta[r * o + j];
                            db[j] += d;
                            for k in 0..*i {
                                dw[k * o + j] += a[r * i + k] * d;
                                dx[r * i + k] += d * w[k * o + j];
                            }
                        }
                    }
                    grads.push((dw, db));
                    delta = dx;
                }
                None => {
                    for (d, &v) in delta.iter_mut().zip(a) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
        }
        grads.reverse();
        (loss, grads)
    }
}

/// Momentum SGD over an [`OracleMlp`], written out longhand.
pub struct OracleSgd {
    pub velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OracleSgd {
    pub fn new(net: &OracleMlp) -> Self {
        Self {
            velocity: net
                .layers
                .iter()
                .flatten()
                .map(|(_, _, w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect(),
        }
    }

    pub fn step(&mut self, net: &mut OracleMlp, x: &[f64], labels: &[usize], lr: f64, momentum: f64, wd: f64) {
        let (_, grads) = net.loss_and_grads(x, labels);
        let linear = net.layers.iter_mut().flatten();
        for (((_, _, w, b), (gw, gb)), (vw, vb)) in linear.zip(&grads).zip(&mut self.velocity) {
            for (p, (g, v)) in w.iter_mut().chain(b.iter_mut()).zip(gw.iter().chain(gb).zip(vw.iter_mut().chain(vb.iter_mut()))) {
                *v = momentum * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Largest absolute difference between two equal-length buffers.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
