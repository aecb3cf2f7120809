//! From-scratch feed-forward Q-network: rectifier hiddens, linear output,
//! exact reverse-mode gradients, and an adaptive-moment optimizer. Matrices
//! are stored flat row-major so the hot loops stay cache-friendly.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

/// Multilayer perceptron mapping an observation to one value per action.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    sizes: Vec<usize>,
    /// Per layer: `sizes[l+1] × sizes[l]`, row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Parameter gradients shaped exactly like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-activation values per layer, input first, output last.
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post
            .last()
            .expect("trace always holds the input layer")
    }
}

impl QNetwork {
    /// Uniform fan-in-scaled init: every weight and bias of layer `l` drawn
    /// from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layers");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let bound = 1.0 / (sizes[l] as f64).sqrt();
            weights.push(
                (0..sizes[l + 1] * sizes[l])
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            );
            biases.push(
                (0..sizes[l + 1])
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            );
        }
        QNetwork {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    /// All-zero parameters (degenerate nets for tests and baselines).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2);
        QNetwork {
            sizes: sizes.to_vec(),
            weights: (0..sizes.len() - 1)
                .map(|l| vec![0.0; sizes[l + 1] * sizes[l]])
                .collect(),
            biases: (0..sizes.len() - 1)
                .map(|l| vec![0.0; sizes[l + 1]])
                .collect(),
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Raw parameter access in a fixed order (weights then biases per layer);
    /// used by the optimizer and by gradient-check tests.
    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut i = idx;
        for l in 0..self.weights.len() {
            if i < self.weights[l].len() {
                return &mut self.weights[l][i];
            }
            i -= self.weights[l].len();
            if i < self.biases[l].len() {
                return &mut self.biases[l][i];
            }
            i -= self.biases[l].len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward_trace(input)?;
        Ok(trace.post.pop().expect("trace is never empty"))
    }

    /// Forward pass keeping every layer's activations.
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.sizes[0] {
            return Err(Error::Contract(format!(
                "input length {} != {}",
                input.len(),
                self.sizes[0]
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite network input".into()));
        }
        let last = self.weights.len() - 1;
        let mut post = Vec::with_capacity(self.sizes.len());
        post.push(input.to_vec());
        for l in 0..self.weights.len() {
            let x = &post[l];
            let n_in = self.sizes[l];
            let n_out = self.sizes[l + 1];
            let mut y = vec![0.0; n_out];
            for o in 0..n_out {
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                let mut acc = self.biases[l][o];
                for (w, xi) in row.iter().zip(x.iter()) {
                    acc += w * xi;
                }
                // rectifier on hidden layers, identity on the output layer
                y[o] = if l < last { acc.max(0.0) } else { acc };
            }
            post.push(y);
        }
        Ok(ForwardTrace { post })
    }

    /// Exact gradients of `output · grad_out` w.r.t. every parameter, plus
    /// nothing else: inputs are constants.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &[f64]) -> Gradients {
        assert_eq!(
            grad_out.len(),
            self.output_dim(),
            "grad_out length mismatch"
        );
        let mut grads = Gradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        self.backward_accumulate(trace, grad_out, &mut grads);
        grads
    }

    /// Backward pass adding into an existing gradient accumulator (used to
    /// sum over a minibatch without reallocating).
    pub fn backward_accumulate(
        &self,
        trace: &ForwardTrace,
        grad_out: &[f64],
        grads: &mut Gradients,
    ) {
        let last = self.weights.len() - 1;
        let mut dy: Vec<f64> = grad_out.to_vec();
        for l in (0..self.weights.len()).rev() {
            let n_in = self.sizes[l];
            let n_out = self.sizes[l + 1];
            let x = &trace.post[l];
            // rectifier mask: a hidden unit that output 0 passes no gradient
            if l < last {
                let y = &trace.post[l + 1];
                for o in 0..n_out {
                    if y[o] <= 0.0 {
                        dy[o] = 0.0;
                    }
                }
            }
            let mut dx = vec![0.0; n_in];
            for o in 0..n_out {
                let g = dy[o];
                if g == 0.0 {
                    continue;
                }
                grads.biases[l][o] += g;
                let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                let grow = &mut grads.weights[l][o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += g * x[i];
                    dx[i] += g * row[i];
                }
            }
            dy = dx;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// A stable checksum of all parameters (order-sensitive), for
    /// reproducibility assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.weights.iter().chain(self.biases.iter()) {
            for v in t {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }
}

/// Adaptive-moment optimizer state, shaped exactly like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(net: &QNetwork, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected moment update of every parameter.
    pub fn apply(&mut self, net: &mut QNetwork, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / corr1;
                let vh = v[i] / corr2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        };
        for l in 0..net.weights.len() {
            update(
                &mut net.weights[l],
                &grads.weights[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
            );
            update(
                &mut net.biases[l],
                &grads.biases[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
            );
        }
    }
}

const CHECKPOINT_MAGIC: &str = "qnet-checkpoint v1";

/// Write a network plus run metadata as a versioned plain-text file.
/// Values print in shortest round-trip decimal form, so loading reproduces
/// the parameters bit for bit.
pub fn save_checkpoint(net: &QNetwork, gamma: f64, step: u64, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(
        w,
        "sizes {}",
        net.sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    )?;
    writeln!(w, "gamma {gamma}")?;
    writeln!(w, "step {step}")?;
    for l in 0..net.weights.len() {
        writeln!(w, "tensor weight{l} {} {}", net.sizes[l + 1], net.sizes[l])?;
        for o in 0..net.sizes[l + 1] {
            let row = &net.weights[l][o * net.sizes[l]..(o + 1) * net.sizes[l]];
            writeln!(
                w,
                "{}",
                row.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            )?;
        }
        writeln!(w, "tensor bias{l} 1 {}", net.sizes[l + 1])?;
        writeln!(
            w,
            "{}",
            net.biases[l]
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(QNetwork, f64, u64)> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?
            .map_err(Error::Io)
    };
    let magic = next()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "unrecognized checkpoint header: {magic}"
        )));
    }
    let sizes_line = next()?;
    let sizes: Vec<usize> = sizes_line
        .strip_prefix("sizes ")
        .ok_or_else(|| Error::Format("missing sizes line".into()))?
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("bad size token {t}")))
        })
        .collect::<Result<_>>()?;
    if sizes.len() < 2 {
        return Err(Error::Format("checkpoint needs at least two layers".into()));
    }
    let gamma: f64 = next()?
        .strip_prefix("gamma ")
        .ok_or_else(|| Error::Format("missing gamma line".into()))?
        .parse()
        .map_err(|_| Error::Format("bad gamma".into()))?;
    let step: u64 = next()?
        .strip_prefix("step ")
        .ok_or_else(|| Error::Format("missing step line".into()))?
        .parse()
        .map_err(|_| Error::Format("bad step".into()))?;

    let parse_row = |line: &str, n: usize| -> Result<Vec<f64>> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("bad value token {t}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(Error::Format(format!(
                "row of {} values, expected {n}",
                vals.len()
            )));
        }
        Ok(vals)
    };

    let mut net = QNetwork::zeros(&sizes);
    for l in 0..sizes.len() - 1 {
        let header = next()?;
        if header != format!("tensor weight{l} {} {}", sizes[l + 1], sizes[l]) {
            return Err(Error::Format(format!("unexpected tensor header: {header}")));
        }
        for o in 0..sizes[l + 1] {
            let row = parse_row(&next()?, sizes[l])?;
            net.weights[l][o * sizes[l]..(o + 1) * sizes[l]].copy_from_slice(&row);
        }
        let header = next()?;
        if header != format!("tensor bias{l} 1 {}", sizes[l + 1]) {
            return Err(Error::Format(format!("unexpected tensor header: {header}")));
        }
        net.biases[l] = parse_row(&next()?, sizes[l + 1])?;
    }
    if !net.all_finite() {
        return Err(Error::Format(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok((net, gamma, step))
}
