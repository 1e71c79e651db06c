//! The prediction network: affine layers with ReLU between them and a
//! softmax or logistic output head.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logistic, softmax_rows, Matrix, Rng};

/// Output nonlinearity applied to the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Rows are categorical distributions over classes.
    Softmax,
    /// Each entry is an independent confidence in (0, 1).
    Logistic,
}

/// One affine layer: `out = in · weights + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `fan_in × fan_out`.
    pub weights: Matrix,
    /// One entry per output unit.
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: Vec<usize>,
    pub layers: Vec<LayerParams>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` the ReLU output of
    /// hidden layer `l`.
    pub activations: Vec<Matrix>,
    /// Pre-activation of every layer; the last one is the logits.
    pub pre_activations: Vec<Matrix>,
    pub probs: Matrix,
    pub head: Head,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.pre_activations.last().expect("at least one layer")
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least input and output widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("zero layer width in {dims:?}")));
    }
    Ok(())
}

/// He initialization: weights ~ N(0, 2 / fan_in), zero biases.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<MlpParams> {
    validate_dims(dims)?;
    let mut rng = Rng::new(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            LayerParams {
                weights: Matrix::new(fan_in, fan_out, rng.gaussian_vec(fan_in * fan_out, std))
                    .expect("sized"),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpParams {
        dims: dims.to_vec(),
        layers,
    })
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            dims: self.dims.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Checks that layer shapes chain and match `dims`.
    pub fn validate(&self) -> Result<()> {
        validate_dims(&self.dims)?;
        if self.layers.len() != self.dims.len() - 1 {
            return Err(Error::invalid(format!(
                "{} layers for dims {:?}",
                self.layers.len(),
                self.dims
            )));
        }
        for (i, (layer, w)) in self.layers.iter().zip(self.dims.windows(2)).enumerate() {
            if layer.weights.shape() != (w[0], w[1]) || layer.bias.len() != w[1] {
                return Err(Error::invalid(format!(
                    "layer {i} has weights {:?} and {} biases, expected {}×{}",
                    layer.weights.shape(),
                    layer.bias.len(),
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(())
    }

    fn check_compatible(&self, other: &MlpParams) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "parameter stacks differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Runs the network on a batch. Hidden layers use ReLU; the head applies a
/// softmax at `temperature` or an elementwise logistic (which ignores the
/// temperature).
pub fn forward(params: &MlpParams, x: &Matrix, head: Head, temperature: f64) -> Result<ForwardTrace> {
    if x.cols() != params.input_dim() {
        return Err(Error::invalid(format!(
            "input has {} features, network expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut activations = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers);
    activations.push(x.clone());
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = activations[i].matmul(&layer.weights)?;
        z.add_row_broadcast(&layer.bias)?;
        if i + 1 < n_layers {
            activations.push(z.map(|v| v.max(0.0)));
        }
        pre_activations.push(z);
    }
    let logits = pre_activations.last().expect("at least one layer");
    let probs = match head {
        Head::Softmax => softmax_rows(logits, temperature)?,
        Head::Logistic => logistic(logits),
    };
    Ok(ForwardTrace {
        activations,
        pre_activations,
        probs,
        head,
    })
}

/// Backpropagates a logit gradient through the stack. `dlogits` must already
/// carry the loss's batch averaging.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, dlogits: &Matrix) -> Result<MlpParams> {
    if dlogits.shape() != trace.logits().shape() {
        return Err(Error::invalid(format!(
            "logit gradient {:?} vs logits {:?}",
            dlogits.shape(),
            trace.logits().shape()
        )));
    }
    if trace.pre_activations.len() != params.layers.len() {
        return Err(Error::invalid("trace does not belong to these parameters"));
    }
    let mut grads: Vec<LayerParams> = Vec::with_capacity(params.layers.len());
    let mut delta = dlogits.clone();
    for i in (0..params.layers.len()).rev() {
        let input = &trace.activations[i];
        let weights = input.t_matmul(&delta)?;
        let bias = delta.col_sums();
        if i > 0 {
            let mut upstream = delta.matmul_t(&params.layers[i].weights)?;
            let pre = &trace.pre_activations[i - 1];
            for (d, &z) in upstream.data_mut().iter_mut().zip(pre.data()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = upstream;
        }
        grads.push(LayerParams { weights, bias });
    }
    grads.reverse();
    Ok(MlpParams {
        dims: params.dims.clone(),
        layers: grads,
    })
}

/// `w ← w − lr·(grad + weight_decay·w)` on weights; biases get no decay.
pub fn sgd_step(params: &mut MlpParams, grads: &MlpParams, lr: f64, weight_decay: f64) -> Result<()> {
    params.check_compatible(grads)?;
    for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
        for (w, &g) in layer.weights.data_mut().iter_mut().zip(grad.weights.data()) {
            *w -= lr * (g + weight_decay * *w);
        }
        for (b, &g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub head: Head,
    pub seed: u64,
    pub params: MlpParams,
}

impl Checkpoint {
    pub fn new(params: MlpParams, head: Head, seed: u64) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            head,
            seed,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.format_version
            )));
        }
        ckpt.params.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_relative_error};

    fn random_input(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, rng.gaussian_vec(n * d, 1.0)).unwrap()
    }

    // Scalar loss with a fixed random linear readout of the logits, so every
    // logit receives a distinct gradient.
    fn readout_loss(params: &MlpParams, x: &Matrix, readout: &Matrix) -> f64 {
        let trace = forward(params, x, Head::Softmax, 1.0).unwrap();
        trace.logits().hadamard(readout).unwrap().sum()
    }

    #[test]
    fn mnist_architecture_shapes() {
        let p = init_mlp(&[784, 500, 300, 10], 0).unwrap();
        let shapes: Vec<_> = p.layers.iter().map(|l| l.weights.shape()).collect();
        assert_eq!(shapes, vec![(784, 500), (500, 300), (300, 10)]);
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        p.validate().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_mlp(&[2, 2], 17).unwrap(), init_mlp(&[2, 2], 17).unwrap());
        assert_ne!(init_mlp(&[2, 2], 17).unwrap(), init_mlp(&[2, 2], 18).unwrap());
    }

    #[test]
    fn init_std_is_he_scaled() {
        let p = init_mlp(&[784, 500, 10], 3).unwrap();
        let w = p.layers[0].weights.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 784.0).sqrt();
        assert!((std - target).abs() / target < 0.1, "{std} vs {target}");
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_mlp(&[], 0).is_err());
        assert!(init_mlp(&[5], 0).is_err());
        assert!(init_mlp(&[5, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let p = init_mlp(&[3, 4, 5], 0).unwrap().zeros_like();
        let x = random_input(&mut Rng::new(1), 2, 3);
        let t = forward(&p, &x, Head::Softmax, 1.0).unwrap();
        for &v in t.probs.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_identity_layer_is_plain_softmax() {
        let p = MlpParams {
            dims: vec![2, 2],
            layers: vec![LayerParams {
                weights: Matrix::identity(2),
                bias: vec![0.0, 0.0],
            }],
        };
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.3, -2.0]]).unwrap();
        let t = forward(&p, &x, Head::Softmax, 1.0).unwrap();
        assert_eq!(t.probs, softmax_rows(&x, 1.0).unwrap());
    }

    #[test]
    fn logistic_head_entries_in_unit_interval() {
        let p = init_mlp(&[4, 6, 3], 2).unwrap();
        let x = random_input(&mut Rng::new(2), 5, 4);
        let t = forward(&p, &x, Head::Logistic, 1.0).unwrap();
        assert!(t.probs.data().iter().all(|&c| c > 0.0 && c < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = init_mlp(&[4, 3], 0).unwrap();
        assert!(forward(&p, &Matrix::zeros(2, 5), Head::Softmax, 1.0).is_err());
    }

    #[test]
    fn trace_records_relu() {
        let p = init_mlp(&[4, 6, 5, 3], 9).unwrap();
        let x = random_input(&mut Rng::new(9), 7, 4);
        let t = forward(&p, &x, Head::Softmax, 1.0).unwrap();
        for l in 1..t.activations.len() {
            let expect = t.pre_activations[l - 1].map(|v| v.max(0.0));
            assert_eq!(t.activations[l], expect);
        }
        let again = forward(&p, &x, Head::Softmax, 1.0).unwrap();
        assert_eq!(t.probs, again.probs);
        assert_eq!(t.pre_activations, again.pre_activations);
    }

    #[test]
    fn zero_dlogits_give_zero_grads() {
        let p = init_mlp(&[4, 3, 2], 0).unwrap();
        let x = random_input(&mut Rng::new(0), 3, 4);
        let t = forward(&p, &x, Head::Softmax, 1.0).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(g, p.zeros_like());
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let p = init_mlp(&[4, 2], 0).unwrap();
        let t = forward(&p, &Matrix::zeros(3, 4), Head::Softmax, 1.0).unwrap();
        assert!(backward(&p, &t, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn single_layer_matches_softmax_regression_formula() {
        // Mean cross-entropy of softmax regression: dW = Xᵀ(Q − T)/n, db = Σ(Q − T)/n.
        let mut rng = Rng::new(4);
        let p = init_mlp(&[5, 3], 4).unwrap();
        let x = random_input(&mut rng, 4, 5);
        let labels = [0usize, 2, 1, 2];
        let t = forward(&p, &x, Head::Softmax, 1.0).unwrap();
        let n = x.rows() as f64;
        let dlogits = Matrix::from_fn(4, 3, |r, c| {
            (t.probs.get(r, c) - if labels[r] == c { 1.0 } else { 0.0 }) / n
        });
        let g = backward(&p, &t, &dlogits).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut expect = 0.0;
                for r in 0..4 {
                    expect += x.get(r, i) * dlogits.get(r, j);
                }
                assert!((g.layers[0].weights.get(i, j) - expect).abs() < 1e-14);
            }
        }
        for j in 0..3 {
            let expect: f64 = (0..4).map(|r| dlogits.get(r, j)).sum();
            assert!((g.layers[0].bias[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn deep_net_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let p = init_mlp(&[4, 3, 2], 21).unwrap();
        let x = random_input(&mut rng, 3, 4);
        let readout = random_input(&mut rng, 3, 2);
        let t = forward(&p, &x, Head::Softmax, 1.0).unwrap();
        let g = backward(&p, &t, &readout).unwrap();
        for l in 0..p.layers.len() {
            let numeric = finite_diff_grad(
                |w| {
                    let mut q = p.clone();
                    q.layers[l].weights = w.clone();
                    readout_loss(&q, &x, &readout)
                },
                &p.layers[l].weights,
                1e-5,
            );
            let err = max_relative_error(&g.layers[l].weights, &numeric);
            assert!(err <= 1e-4, "layer {l} weights: {err}");

            let bias = Matrix::row_vector(&p.layers[l].bias);
            let numeric = finite_diff_grad(
                |b| {
                    let mut q = p.clone();
                    q.layers[l].bias = b.data().to_vec();
                    readout_loss(&q, &x, &readout)
                },
                &bias,
                1e-5,
            );
            let err = max_relative_error(&Matrix::row_vector(&g.layers[l].bias), &numeric);
            assert!(err <= 1e-4, "layer {l} bias: {err}");
        }
    }

    #[test]
    fn sgd_scalar_example() {
        let mut p = MlpParams {
            dims: vec![1, 1],
            layers: vec![LayerParams {
                weights: Matrix::row_vector(&[1.0]),
                bias: vec![0.5],
            }],
        };
        let mut g = p.clone();
        g.layers[0].weights = Matrix::row_vector(&[1.0]);
        g.layers[0].bias = vec![0.0];
        sgd_step(&mut p, &g, 0.1, 0.0001).unwrap();
        assert!((p.layers[0].weights.get(0, 0) - 0.89999).abs() < 1e-12);
        assert_eq!(p.layers[0].bias[0], 0.5);
    }

    #[test]
    fn sgd_noop_cases() {
        let p0 = init_mlp(&[3, 2], 1).unwrap();
        let g = init_mlp(&[3, 2], 2).unwrap();
        let mut p = p0.clone();
        sgd_step(&mut p, &g, 0.0, 0.5).unwrap();
        assert_eq!(p, p0);
        sgd_step(&mut p, &p0.zeros_like(), 0.3, 0.0).unwrap();
        assert_eq!(p, p0);
        assert!(sgd_step(&mut p, &init_mlp(&[3, 3], 0).unwrap(), 0.1, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut p = init_mlp(&[6, 5, 4], 77).unwrap();
        p.layers[1].bias = vec![0.1, -1e-300, 3.0e10, std::f64::consts::PI];
        let ckpt = Checkpoint::new(p, Head::Logistic, 77);
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn checkpoint_rejects_broken_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut ckpt = Checkpoint::new(init_mlp(&[3, 2], 0).unwrap(), Head::Softmax, 0);
        ckpt.params.dims = vec![3, 4];
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
