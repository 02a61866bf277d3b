//! Asymmetric multi-label loss over calibrated predictions, with support for
//! unknown (masked) annotations.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Initial value of the learnable calibration scale.
pub const ALPHA_INIT: f64 = 5.0;

/// Asymmetric-loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip: f64,
    pub eps: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig {
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            clip: 0.05,
            eps: 1e-8,
        }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_neg < self.gamma_pos {
            return Err(Error::InvalidParameter(format!(
                "asymmetric loss requires gamma_neg >= gamma_pos, got ({}, {})",
                self.gamma_pos, self.gamma_neg
            )));
        }
        if !(0.0..1.0).contains(&self.clip) {
            return Err(Error::InvalidParameter(format!(
                "clip must lie in [0, 1), got {}",
                self.clip
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// A single annotation: present, absent, or masked out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Neg,
    Pos,
    Unknown,
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Neg => ser.serialize_u8(0),
            Label::Pos => ser.serialize_u8(1),
            Label::Unknown => ser.serialize_str("?"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(de)?;
        match v {
            serde_json::Value::Number(n) if n.as_u64() == Some(0) => Ok(Label::Neg),
            serde_json::Value::Number(n) if n.as_u64() == Some(1) => Ok(Label::Pos),
            serde_json::Value::String(s) if s == "?" => Ok(Label::Unknown),
            other => Err(D::Error::custom(format!(
                "label must be 0, 1 or \"?\", got {other}"
            ))),
        }
    }
}

/// Per-sample label vector with at least one known entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<Label>);

impl LabelVector {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        if !labels.iter().any(|l| *l != Label::Unknown) {
            return Err(Error::Contract(
                "label vector needs at least one known entry".into(),
            ));
        }
        Ok(LabelVector(labels))
    }

    /// Build from 0/1 flags (all entries known).
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        LabelVector::new(
            bits.iter()
                .map(|&b| if b == 0 { Label::Neg } else { Label::Pos })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> Label {
        self.0[c]
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub(crate) fn labels_mut(&mut self) -> &mut Vec<Label> {
        &mut self.0
    }

    pub fn known_count(&self) -> usize {
        self.0.iter().filter(|l| **l != Label::Unknown).count()
    }
}

/// Register the learnable calibration parameters (scale α and bias).
pub fn register_calibration(store: &mut ParamStore) -> Result<(ParamId, ParamId)> {
    let alpha = store.register("calibrate.alpha", Tensor::scalar(ALPHA_INIT))?;
    let bias = store.register("calibrate.bias", Tensor::scalar(0.0))?;
    Ok((alpha, bias))
}

/// Map raw predictions onto (0, 1): p = sigmoid(α · (scale·ψ − 1) + b),
/// where `uniform_scale` is the reciprocal of the pipeline's uniform
/// prediction value, so an uninformative ψ lands near p = 0.5. For transport
/// predictions the uniform state (uniform plan, uniform patch softmax) is
/// ψ = 1/(C·M); for the baseline aggregation it is 1/C. The learnable scalar
/// bias gives dataset-level calibration pressure a ranking-neutral outlet.
pub fn calibrate(
    tape: &mut Tape,
    store: &ParamStore,
    alpha: ParamId,
    bias: ParamId,
    psi: Var,
    uniform_scale: f64,
) -> Result<Var> {
    if uniform_scale <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "calibration scale must be positive, got {uniform_scale}"
        )));
    }
    let centered = tape.affine(psi, uniform_scale, -1.0);
    let alpha_var = tape.param(store, alpha);
    let scaled = tape.scale_by(alpha_var, centered)?;
    let ones = tape.constant(Tensor::ones(tape.value(psi).shape()));
    let bias_var = tape.param(store, bias);
    let bias_row = tape.scale_by(bias_var, ones)?;
    let shifted = tape.add(scaled, bias_row)?;
    let p = tape.sigmoid(shifted);
    // keep outputs strictly inside (0, 1) even when the sigmoid saturates in
    // f64; clamped entries get zero gradient, matching their ~zero loss slope
    let p = tape.clamp_min(p, PROB_FLOOR);
    let flipped = tape.affine(p, -1.0, 1.0);
    let flipped = tape.clamp_min(flipped, PROB_FLOOR);
    Ok(tape.affine(flipped, -1.0, 1.0))
}

/// Smallest probability the calibration head emits.
pub const PROB_FLOOR: f64 = 1e-9;

/// Asymmetric loss over known entries, negated and averaged so the minimized
/// value is nonnegative:
///
///   −(1/|known|) Σ_known [ y (1−p)^{γ+} log(p+eps)
///                          + (1−y) (p⁻)^{γ−} log(1−p⁻+eps) ],   p⁻ = max(p−c, 0)
///
/// Unknown entries contribute exactly zero.
pub fn asl_loss(tape: &mut Tape, p: Var, y: &LabelVector, cfg: &AslConfig) -> Result<Var> {
    cfg.validate()?;
    let n = tape.value(p).len();
    if y.len() != n {
        return Err(Error::ShapeMismatch {
            op: "asl_loss",
            lhs: tape.value(p).shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    if tape.value(p).values().iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Contract(
            "asl_loss requires probabilities strictly inside (0, 1)".into(),
        ));
    }
    let known = y.known_count() as f64;
    let mut pos_mask = vec![0.0; n];
    let mut neg_mask = vec![0.0; n];
    for (c, l) in y.labels().iter().enumerate() {
        match l {
            Label::Pos => pos_mask[c] = 1.0,
            Label::Neg => neg_mask[c] = 1.0,
            Label::Unknown => {}
        }
    }
    let shape = tape.value(p).shape().to_vec();
    let pos_mask = tape.constant(Tensor::new(shape.clone(), pos_mask)?);
    let neg_mask = tape.constant(Tensor::new(shape, neg_mask)?);

    // positive term: (1−p)^{γ+} log(p+eps)
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let focus_pos = tape.pow_scalar(one_minus_p, cfg.gamma_pos);
    let log_p = {
        let shifted = tape.affine(p, 1.0, cfg.eps);
        tape.log(shifted)
    };
    let pos_term = tape.mul(focus_pos, log_p)?;
    let pos_term = tape.mul(pos_term, pos_mask)?;

    // negative term with hard clip: (p⁻)^{γ−} log(1−p⁻+eps)
    let shifted = tape.affine(p, 1.0, -cfg.clip);
    let p_shift = tape.clamp_min(shifted, 0.0);
    let focus_neg = tape.pow_scalar(p_shift, cfg.gamma_neg);
    let log_one_minus = {
        let flipped = tape.affine(p_shift, -1.0, 1.0 + cfg.eps);
        tape.log(flipped)
    };
    let neg_term = tape.mul(focus_neg, log_one_minus)?;
    let neg_term = tape.mul(neg_term, neg_mask)?;

    let total = tape.add(pos_term, neg_term)?;
    let summed = tape.sum_all(total);
    Ok(tape.affine(summed, -1.0 / known, 0.0))
}
