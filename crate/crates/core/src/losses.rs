//! Training objectives: softmax cross-entropy and its bootstrapped
//! variants, the noise-channel marginal likelihood, the reconstruction
//! consistency objective, and the per-location logistic (MultiBox-style)
//! family.
//!
//! Every loss is averaged over the rows of the batch and returns the exact
//! gradient with respect to the logits. Bootstrap targets are built from the
//! current predictions and then held fixed, so the returned gradient is that
//! of the cross-entropy against those frozen targets.
//!
//! `log` arguments are clamped below at [`LOG_FLOOR`]. A clamped term is
//! constant in the logits and contributes no gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Head;
use crate::tensor::{argmax, softmax_in_place, softmax_rows, Matrix};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CeBaseline,
    BootstrapSoft,
    BootstrapHard,
    BootstrapTemperature,
    BootstrapRecon,
    NoiseMarginal,
    MultiboxBaseline,
    MultiboxHard,
    MultiboxSoft,
    MultiboxTopk,
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::CeBaseline,
        LossKind::BootstrapSoft,
        LossKind::BootstrapHard,
        LossKind::BootstrapTemperature,
        LossKind::BootstrapRecon,
        LossKind::NoiseMarginal,
        LossKind::MultiboxBaseline,
        LossKind::MultiboxHard,
        LossKind::MultiboxSoft,
        LossKind::MultiboxTopk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CeBaseline => "ce_baseline",
            LossKind::BootstrapSoft => "bootstrap_soft",
            LossKind::BootstrapHard => "bootstrap_hard",
            LossKind::BootstrapTemperature => "bootstrap_temperature",
            LossKind::BootstrapRecon => "bootstrap_recon",
            LossKind::NoiseMarginal => "noise_marginal",
            LossKind::MultiboxBaseline => "multibox_baseline",
            LossKind::MultiboxHard => "multibox_hard",
            LossKind::MultiboxSoft => "multibox_soft",
            LossKind::MultiboxTopk => "multibox_topk",
        }
    }

    pub fn is_multibox(self) -> bool {
        matches!(
            self,
            LossKind::MultiboxBaseline
                | LossKind::MultiboxHard
                | LossKind::MultiboxSoft
                | LossKind::MultiboxTopk
        )
    }

    pub fn head(self) -> Head {
        if self.is_multibox() {
            Head::Logistic
        } else {
            Head::Softmax
        }
    }

    /// The prediction-only loss of the same family, used for pretraining.
    pub fn baseline(self) -> LossKind {
        if self.is_multibox() {
            LossKind::MultiboxBaseline
        } else {
            LossKind::CeBaseline
        }
    }

    pub fn uses_adapter(self) -> bool {
        matches!(self, LossKind::NoiseMarginal | LossKind::BootstrapRecon)
    }

    pub fn uses_recon(self) -> bool {
        self == LossKind::BootstrapRecon
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss kind {s:?}")))
    }
}

/// A training objective and its hyperparameters. Fields a kind does not use
/// are kept but ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Weight on the observed label in bootstrap targets.
    pub beta: f64,
    /// Softmax temperature for `bootstrap_temperature` targets.
    pub temperature: f64,
    /// Locations dropped per instance by `multibox_topk`.
    pub k_drop: usize,
    /// Weight of the squared reconstruction error in `bootstrap_recon`.
    pub recon_weight: f64,
}

impl LossSpec {
    /// `kind` with neutral hyperparameters: `beta = 1`, `T = 1`, no dropped
    /// locations, no reconstruction weight.
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            beta: 1.0,
            temperature: 1.0,
            k_drop: 0,
            recon_weight: 0.0,
        }
    }

    /// `kind` at the operating points reported for the MNIST and person
    /// detection experiments.
    pub fn reported(kind: LossKind) -> Self {
        let mut spec = LossSpec::new(kind);
        match kind {
            LossKind::BootstrapHard | LossKind::MultiboxHard => spec.beta = 0.8,
            LossKind::BootstrapSoft | LossKind::MultiboxSoft => spec.beta = 0.95,
            LossKind::BootstrapRecon => spec.recon_weight = 0.005,
            LossKind::MultiboxTopk => spec.k_drop = 4,
            _ => {}
        }
        spec
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_k_drop(mut self, k_drop: usize) -> Self {
        self.k_drop = k_drop;
        self
    }

    pub fn with_recon_weight(mut self, recon_weight: f64) -> Self {
        self.recon_weight = recon_weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.recon_weight.is_finite() && self.recon_weight >= 0.0) {
            return Err(Error::invalid(format!(
                "recon_weight must be nonnegative, got {}",
                self.recon_weight
            )));
        }
        Ok(())
    }
}

/// Label-noise channel `W⁽²⁾, b⁽²⁾`: column `j` of the softmax (over rows
/// `k`) of `weights[k][j] + bias[k]` is `P(observed = k | true = j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAdapter {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl NoiseAdapter {
    /// Identity logits, zero bias.
    pub fn identity(num_classes: usize) -> Self {
        NoiseAdapter {
            weights: Matrix::identity(num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn zeros(num_classes: usize) -> Self {
        NoiseAdapter {
            weights: Matrix::zeros(num_classes, num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.bias.len();
        if self.weights.shape() != (l, l) {
            return Err(Error::invalid(format!(
                "noise adapter weights {:?} with {l} biases",
                self.weights.shape()
            )));
        }
        if !self.weights.is_finite() || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("noise adapter has non-finite entries"));
        }
        Ok(())
    }

    /// Column-stochastic channel matrix `C[k][j] = P(t = k | q = j)`.
    pub fn channel(&self) -> Matrix {
        let l = self.num_classes();
        let mut logits = self.weights.transpose();
        for j in 0..l {
            for (k, v) in logits.row_mut(j).iter_mut().enumerate() {
                *v += self.bias[k];
            }
            softmax_in_place(logits.row_mut(j), 1.0);
        }
        logits.transpose()
    }
}

/// Linear reconstruction `x̂ = W q` of the input from class posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconHead {
    /// `D × L`.
    pub weights: Matrix,
}

impl ReconHead {
    pub fn zeros(input_dim: usize, num_classes: usize) -> Self {
        ReconHead {
            weights: Matrix::zeros(input_dim, num_classes),
        }
    }
}

/// Loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub dlogits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalOutput {
    pub loss: f64,
    pub dlogits: Matrix,
    pub d_adapter: NoiseAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconOutput {
    pub loss: f64,
    pub dlogits: Matrix,
    pub d_recon: Matrix,
    /// Present when the likelihood term went through a noise adapter.
    pub d_adapter: Option<NoiseAdapter>,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

fn check_pair(pred: &Matrix, targets: &Matrix) -> Result<()> {
    if pred.shape() != targets.shape() {
        return Err(Error::invalid(format!(
            "predictions {:?} vs targets {:?}",
            pred.shape(),
            targets.shape()
        )));
    }
    if pred.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

fn check_distribution_rows(t: &Matrix) -> Result<()> {
    for (r, row) in t.row_iter().enumerate() {
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(format!(
                "target row {r} has entries outside [0, 1]"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("target row {r} sums to {s}")));
        }
    }
    Ok(())
}

fn check_binary(t: &Matrix) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("multibox targets must be 0 or 1"));
    }
    Ok(())
}

/// `β·t + (1 − β)·other`, elementwise.
fn blend(t: &Matrix, other: &Matrix, beta: f64) -> Matrix {
    t.zip_with(other, "blend", |a, b| beta * a + (1.0 - beta) * b)
        .expect("shapes checked by caller")
}

/// Cross-entropy of softmax outputs `q` against fixed targets `y`, averaged
/// over rows. The gradient is exact under the log clamp.
pub fn soft_target_cross_entropy(q: &Matrix, y: &Matrix) -> Result<LossOutput> {
    check_pair(q, y)?;
    let n = q.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        let (qr, yr) = (q.row(r), y.row(r));
        let mut active_mass = 0.0;
        for (&qk, &yk) in qr.iter().zip(yr) {
            if qk >= LOG_FLOOR {
                loss -= yk * qk.ln();
                active_mass += yk;
            } else {
                loss -= yk * LOG_FLOOR.ln();
            }
        }
        for (j, d) in dlogits.row_mut(r).iter_mut().enumerate() {
            let own = if qr[j] >= LOG_FLOOR { yr[j] } else { 0.0 };
            *d = (qr[j] * active_mass - own) / n;
        }
    }
    Ok(LossOutput {
        loss: loss / n,
        dlogits,
    })
}

/// Softmax regression onto the observed labels.
pub fn ce_baseline(q: &Matrix, t: &Matrix) -> Result<LossOutput> {
    check_pair(q, t)?;
    check_distribution_rows(t)?;
    soft_target_cross_entropy(q, t)
}

/// `β·t + (1 − β)·q`.
pub fn soft_targets(q: &Matrix, t: &Matrix, beta: f64) -> Result<Matrix> {
    check_pair(q, t)?;
    check_beta(beta)?;
    Ok(blend(t, q, beta))
}

/// One-hot rows at `argmax q`, lowest index on ties.
pub fn map_targets(q: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        let k = argmax(q.row(r));
        z.set(r, k, 1.0);
    }
    z
}

/// `β·t + (1 − β)·onehot(argmax q)`.
pub fn hard_targets(q: &Matrix, t: &Matrix, beta: f64) -> Result<Matrix> {
    check_pair(q, t)?;
    check_beta(beta)?;
    Ok(blend(t, &map_targets(q), beta))
}

/// `β·t + (1 − β)·softmax(T·logits)`.
pub fn temperature_targets(logits: &Matrix, t: &Matrix, beta: f64, temperature: f64) -> Result<Matrix> {
    check_pair(logits, t)?;
    check_beta(beta)?;
    Ok(blend(t, &softmax_rows(logits, temperature)?, beta))
}

/// Soft bootstrapping: targets mix the label with the current prediction.
pub fn bootstrap_soft(q: &Matrix, t: &Matrix, beta: f64) -> Result<LossOutput> {
    check_pair(q, t)?;
    check_distribution_rows(t)?;
    soft_target_cross_entropy(q, &soft_targets(q, t, beta)?)
}

/// Hard bootstrapping: targets mix the label with the MAP prediction.
pub fn bootstrap_hard(q: &Matrix, t: &Matrix, beta: f64) -> Result<LossOutput> {
    check_pair(q, t)?;
    check_distribution_rows(t)?;
    soft_target_cross_entropy(q, &hard_targets(q, t, beta)?)
}

/// Bootstrapping with prediction targets sharpened by `temperature`. The
/// predictive term always uses the unit-temperature softmax of `logits`.
pub fn bootstrap_temperature(logits: &Matrix, t: &Matrix, beta: f64, temperature: f64) -> Result<LossOutput> {
    check_pair(logits, t)?;
    check_distribution_rows(t)?;
    let q = softmax_rows(logits, 1.0)?;
    let y = temperature_targets(logits, t, beta, temperature)?;
    soft_target_cross_entropy(&q, &y)
}

/// Shannon entropy of each row, with the same log clamp as the losses.
pub fn row_entropy(q: &Matrix) -> Vec<f64> {
    q.row_iter()
        .map(|row| -row.iter().map(|&p| p * p.max(LOG_FLOOR).ln()).sum::<f64>())
        .collect()
}

fn checked_channel(adapter: &NoiseAdapter, num_classes: usize) -> Result<Matrix> {
    adapter.validate()?;
    if num_classes != adapter.num_classes() {
        return Err(Error::invalid(format!(
            "{num_classes} classes vs noise adapter of size {}",
            adapter.num_classes()
        )));
    }
    Ok(adapter.channel())
}

/// `P(t = k | x) = Σ_j C[k][j]·q_j` for every row of `q`.
pub fn noise_marginal_probs(q: &Matrix, adapter: &NoiseAdapter) -> Result<Matrix> {
    q.matmul_t(&checked_channel(adapter, q.cols())?)
}

/// Back-propagates `dL/dq` through the softmax: `q ⊙ (g − ⟨q, g⟩)`.
fn softmax_backward(q: &Matrix, dq: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        let (qr, gr) = (q.row(r), dq.row(r));
        let dot: f64 = qr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (&qj, &gj)) in out.row_mut(r).iter_mut().zip(qr.iter().zip(gr)) {
            *o = qj * (gj - dot);
        }
    }
    out
}

/// Negative log-likelihood of the observed labels after marginalizing the
/// true class through the noise channel.
pub fn noise_marginal(q: &Matrix, t: &Matrix, adapter: &NoiseAdapter) -> Result<MarginalOutput> {
    check_pair(q, t)?;
    check_distribution_rows(t)?;
    let channel = checked_channel(adapter, q.cols())?;
    let probs = q.matmul_t(&channel)?;
    let n = q.rows() as f64;
    let l = q.cols();

    let mut loss = 0.0;
    let mut d_probs = Matrix::zeros(q.rows(), l);
    for r in 0..q.rows() {
        for k in 0..l {
            let (p, tk) = (probs.get(r, k), t.get(r, k));
            if tk == 0.0 {
                continue;
            }
            if p >= LOG_FLOOR {
                loss -= tk * p.ln();
                d_probs.set(r, k, -tk / (p * n));
            } else {
                loss -= tk * LOG_FLOOR.ln();
            }
        }
    }

    let dq = d_probs.matmul(&channel)?;
    let dlogits = softmax_backward(q, &dq);

    // dC[k][j] = Σ_r dP[r][k]·q[r][j], then back through each column softmax
    let d_channel = d_probs.t_matmul(q)?;
    let mut d_weights = Matrix::zeros(l, l);
    for j in 0..l {
        let dot: f64 = (0..l).map(|k| channel.get(k, j) * d_channel.get(k, j)).sum();
        for k in 0..l {
            d_weights.set(k, j, channel.get(k, j) * (d_channel.get(k, j) - dot));
        }
    }
    let d_bias = (0..l).map(|k| d_weights.row(k).iter().sum()).collect();

    Ok(MarginalOutput {
        loss: loss / n,
        dlogits,
        d_adapter: NoiseAdapter {
            weights: d_weights,
            bias: d_bias,
        },
    })
}

/// Prediction loss plus `recon_weight · mean ‖x − W q‖²`.
///
/// Without an adapter the prediction loss is plain cross-entropy on `q`;
/// with one it is the noise-channel marginal likelihood. The reconstruction
/// term is differentiated through `q` as well as `W`.
pub fn bootstrap_recon(
    x: &Matrix,
    q: &Matrix,
    t: &Matrix,
    recon: &ReconHead,
    recon_weight: f64,
    adapter: Option<&NoiseAdapter>,
) -> Result<ReconOutput> {
    check_pair(q, t)?;
    if x.rows() != q.rows() {
        return Err(Error::invalid(format!(
            "{} inputs for {} predictions",
            x.rows(),
            q.rows()
        )));
    }
    if recon.weights.shape() != (x.cols(), q.cols()) {
        return Err(Error::invalid(format!(
            "reconstruction weights {:?}, expected {}×{}",
            recon.weights.shape(),
            x.cols(),
            q.cols()
        )));
    }
    if !(recon_weight.is_finite() && recon_weight >= 0.0) {
        return Err(Error::invalid(format!(
            "recon_weight must be nonnegative, got {recon_weight}"
        )));
    }

    let (mut loss, mut dlogits, d_adapter) = match adapter {
        Some(a) => {
            let m = noise_marginal(q, t, a)?;
            (m.loss, m.dlogits, Some(m.d_adapter))
        }
        None => {
            let c = ce_baseline(q, t)?;
            (c.loss, c.dlogits, None)
        }
    };

    let n = q.rows() as f64;
    let residual = x.sub(&q.matmul_t(&recon.weights)?)?;
    let sq: f64 = residual.data().iter().map(|e| e * e).sum();
    loss += recon_weight * sq / n;

    let scale = -2.0 * recon_weight / n;
    let dq = residual.matmul(&recon.weights)?.scale(scale);
    dlogits.add_scaled_assign(&softmax_backward(q, &dq), 1.0)?;
    let d_recon = residual.t_matmul(q)?.scale(scale);

    Ok(ReconOutput {
        loss,
        dlogits,
        d_recon,
        d_adapter,
    })
}

/// Binary cross-entropy of logistic confidences `c` against fixed targets
/// `y`, summed over locations whose `mask` entry is true and averaged over
/// rows.
pub fn masked_binary_cross_entropy(c: &Matrix, y: &Matrix, mask: Option<&[bool]>) -> Result<LossOutput> {
    check_pair(c, y)?;
    if let Some(m) = mask {
        if m.len() != c.data().len() {
            return Err(Error::invalid("mask size does not match predictions"));
        }
    }
    let n = c.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(c.rows(), c.cols());
    for (i, ((&ck, &yk), d)) in c.data().iter().zip(y.data()).zip(dlogits.data_mut()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let not_c = 1.0 - ck;
        let mut g = 0.0;
        if ck >= LOG_FLOOR {
            loss -= yk * ck.ln();
            g -= yk * not_c;
        } else {
            loss -= yk * LOG_FLOOR.ln();
        }
        if not_c >= LOG_FLOOR {
            loss -= (1.0 - yk) * not_c.ln();
            g += (1.0 - yk) * ck;
        } else {
            loss -= (1.0 - yk) * LOG_FLOOR.ln();
        }
        *d = g / n;
    }
    Ok(LossOutput {
        loss: loss / n,
        dlogits,
    })
}

/// Per-location logistic cross-entropy onto the annotated targets.
pub fn multibox_baseline(c: &Matrix, t: &Matrix) -> Result<LossOutput> {
    check_pair(c, t)?;
    check_binary(t)?;
    masked_binary_cross_entropy(c, t, None)
}

/// `β·t + (1 − β)·1[c > 0.5]`.
pub fn multibox_hard_targets(c: &Matrix, t: &Matrix, beta: f64) -> Result<Matrix> {
    check_pair(c, t)?;
    check_beta(beta)?;
    Ok(blend(t, &c.map(|v| if v > 0.5 { 1.0 } else { 0.0 }), beta))
}

pub fn multibox_hard(c: &Matrix, t: &Matrix, beta: f64) -> Result<LossOutput> {
    check_pair(c, t)?;
    check_binary(t)?;
    masked_binary_cross_entropy(c, &multibox_hard_targets(c, t, beta)?, None)
}

pub fn multibox_soft(c: &Matrix, t: &Matrix, beta: f64) -> Result<LossOutput> {
    check_pair(c, t)?;
    check_binary(t)?;
    check_beta(beta)?;
    masked_binary_cross_entropy(c, &blend(t, c, beta), None)
}

/// For every row, `false` at the `k_drop` largest confidences (ties broken
/// towards the lower index), `true` elsewhere.
pub fn topk_keep_mask(c: &Matrix, k_drop: usize) -> Result<Vec<bool>> {
    if k_drop > c.cols() {
        return Err(Error::invalid(format!(
            "cannot drop {k_drop} of {} locations",
            c.cols()
        )));
    }
    let mut keep = vec![true; c.data().len()];
    let mut order: Vec<usize> = Vec::with_capacity(c.cols());
    for r in 0..c.rows() {
        let row = c.row(r);
        order.clear();
        order.extend(0..c.cols());
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k_drop] {
            keep[r * c.cols() + j] = false;
        }
    }
    Ok(keep)
}

/// Baseline loss with the `k_drop` most confident locations of each
/// instance removed from both loss and gradient.
pub fn multibox_topk(c: &Matrix, t: &Matrix, k_drop: usize) -> Result<LossOutput> {
    check_pair(c, t)?;
    check_binary(t)?;
    let keep = topk_keep_mask(c, k_drop)?;
    masked_binary_cross_entropy(c, t, Some(&keep))
}

/// Auxiliary parameter blocks some objectives train alongside the network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxHeads {
    pub adapter: Option<NoiseAdapter>,
    pub recon: Option<ReconHead>,
}

/// Gradient of a full objective: logits plus any auxiliary heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub dlogits: Matrix,
    pub d_adapter: Option<NoiseAdapter>,
    pub d_recon: Option<Matrix>,
}

impl From<LossOutput> for ObjectiveOutput {
    fn from(o: LossOutput) -> Self {
        ObjectiveOutput {
            loss: o.loss,
            dlogits: o.dlogits,
            d_adapter: None,
            d_recon: None,
        }
    }
}

/// Evaluates the objective described by `spec` on one batch.
///
/// `probs` must be the head output for `logits` (softmax at unit temperature
/// or logistic). `bootstrap_recon` uses the adapter when one is present,
/// giving the marginal-likelihood form of the objective.
pub fn evaluate(
    spec: &LossSpec,
    x: &Matrix,
    logits: &Matrix,
    probs: &Matrix,
    targets: &Matrix,
    aux: &AuxHeads,
) -> Result<ObjectiveOutput> {
    let missing = |what: &str| Error::invalid(format!("{} needs a {what}", spec.kind));
    Ok(match spec.kind {
        LossKind::CeBaseline => ce_baseline(probs, targets)?.into(),
        LossKind::BootstrapSoft => bootstrap_soft(probs, targets, spec.beta)?.into(),
        LossKind::BootstrapHard => bootstrap_hard(probs, targets, spec.beta)?.into(),
        LossKind::BootstrapTemperature => {
            bootstrap_temperature(logits, targets, spec.beta, spec.temperature)?.into()
        }
        LossKind::NoiseMarginal => {
            let adapter = aux.adapter.as_ref().ok_or_else(|| missing("noise adapter"))?;
            let m = noise_marginal(probs, targets, adapter)?;
            ObjectiveOutput {
                loss: m.loss,
                dlogits: m.dlogits,
                d_adapter: Some(m.d_adapter),
                d_recon: None,
            }
        }
        LossKind::BootstrapRecon => {
            let recon = aux.recon.as_ref().ok_or_else(|| missing("reconstruction head"))?;
            let r = bootstrap_recon(x, probs, targets, recon, spec.recon_weight, aux.adapter.as_ref())?;
            ObjectiveOutput {
                loss: r.loss,
                dlogits: r.dlogits,
                d_adapter: r.d_adapter,
                d_recon: Some(r.d_recon),
            }
        }
        LossKind::MultiboxBaseline => multibox_baseline(probs, targets)?.into(),
        LossKind::MultiboxHard => multibox_hard(probs, targets, spec.beta)?.into(),
        LossKind::MultiboxSoft => multibox_soft(probs, targets, spec.beta)?.into(),
        LossKind::MultiboxTopk => multibox_topk(probs, targets, spec.k_drop)?.into(),
    })
}
