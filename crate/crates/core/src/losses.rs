//! Training objectives: cross-entropy, feature distillation, the combined
//! per-federation objective, the adaptive distillation weight and the
//! FedProx proximal term.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Batch, ForwardPass, Matrix, Mode, ModelParams};

/// Which activation boundary supplies the distilled features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Input of the classifier's last layer.
    Penultimate,
    /// Output of the hidden block preceding the penultimate boundary.
    LastHiddenBlock,
    /// Both of the above, losses summed.
    Combined,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Penultimate, Tap::LastHiddenBlock, Tap::Combined];

    /// Boundary indices (as in [`ForwardPass::features`]) for a model with
    /// `layer_count` layers.
    pub fn boundaries(self, layer_count: usize) -> Result<Vec<usize>> {
        let penultimate = layer_count - 1;
        let need_block = matches!(self, Tap::LastHiddenBlock | Tap::Combined);
        if need_block && layer_count < 3 {
            return Err(Error::Config(format!(
                "tap {self} needs at least two hidden layers, model has {}",
                layer_count - 1
            )));
        }
        Ok(match self {
            Tap::Penultimate => vec![penultimate],
            Tap::LastHiddenBlock => vec![penultimate - 1],
            Tap::Combined => vec![penultimate - 1, penultimate],
        })
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tap::Penultimate => "penultimate",
            Tap::LastHiddenBlock => "last_hidden_block",
            Tap::Combined => "combined",
        })
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "penultimate" => Ok(Tap::Penultimate),
            "last_hidden_block" => Ok(Tap::LastHiddenBlock),
            "combined" => Ok(Tap::Combined),
            other => Err(Error::Config(format!("unknown tap '{other}'"))),
        }
    }
}

/// Which terms of the objective are active.
#[derive(Debug, Clone)]
pub struct LossSpec<'a> {
    pub lambda: f64,
    pub tap: Tap,
    pub proximal_mu: f64,
    /// Teacher activations at each boundary of `tap`, in order.
    pub teacher_features: Option<Vec<Matrix>>,
    pub proximal_reference: Option<&'a ModelParams>,
}

impl<'a> LossSpec<'a> {
    pub fn classification() -> Self {
        Self {
            lambda: 0.0,
            tap: Tap::Penultimate,
            proximal_mu: 0.0,
            teacher_features: None,
            proximal_reference: None,
        }
    }

    pub fn distillation(lambda: f64, tap: Tap, teacher_features: Vec<Matrix>) -> Self {
        Self {
            lambda,
            tap,
            teacher_features: Some(teacher_features),
            ..Self::classification()
        }
    }

    pub fn proximal(mu: f64, reference: &'a ModelParams) -> Self {
        Self {
            proximal_mu: mu,
            proximal_reference: Some(reference),
            ..Self::classification()
        }
    }

    /// Checks the invariants against `model` and returns the tap boundaries.
    pub(crate) fn validate(&self, model: &ModelParams) -> Result<Vec<usize>> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.proximal_mu >= 0.0) || !self.proximal_mu.is_finite() {
            return Err(Error::Config(format!("proximal mu must be non-negative, got {}", self.proximal_mu)));
        }
        let taps = self.tap.boundaries(model.layer_count())?;
        if self.lambda > 0.0 {
            match &self.teacher_features {
                None => {
                    return Err(Error::Config("distillation weight is positive but no teacher was given".into()))
                }
                Some(t) if t.len() != taps.len() => {
                    return Err(Error::Config(format!(
                        "tap {} needs {} teacher feature maps, got {}",
                        self.tap,
                        taps.len(),
                        t.len()
                    )))
                }
                _ => {}
            }
        }
        if self.proximal_mu > 0.0 && self.proximal_reference.is_none() {
            return Err(Error::Config("proximal term is active but no reference model was given".into()));
        }
        Ok(taps)
    }
}

/// Separately reported parts of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub dist: f64,
    pub prox: f64,
}

impl LossParts {
    /// `cls + λ·dist + prox`; `prox` already carries its `μ/2` factor.
    pub fn weighted(&self, lambda: f64) -> f64 {
        self.cls + lambda * self.dist + self.prox
    }
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean over rows of `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        if y >= row.len() {
            return Err(Error::Input(format!("label {y} out of range for {} classes", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    let value = total / labels.len() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok(value)
}

/// Mean over rows of the squared L2 distance between teacher and student
/// features.
pub fn distill_loss(teacher: &Matrix, student: &Matrix) -> Result<f64> {
    if !teacher.same_shape(student) {
        return Err(Error::Shape(format!(
            "teacher features {:?} vs student features {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    if teacher.rows() == 0 {
        return Ok(0.0);
    }
    let sum: f64 = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(t, s)| (t - s) * (t - s))
        .sum();
    Ok(sum / teacher.rows() as f64)
}

/// `(μ/2)·‖w − w_ref‖²` over dense weights and biases. Normalization
/// parameters and statistics are excluded.
pub fn proximal_term(model: &ModelParams, reference: &ModelParams, mu: f64) -> Result<f64> {
    model.ensure_same_architecture(reference)?;
    if mu == 0.0 {
        return Ok(0.0);
    }
    let mut sq = 0.0;
    for (a, b) in model.layers().iter().zip(reference.layers()) {
        for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
            sq += (x - y) * (x - y);
        }
        for (x, y) in a.bias.iter().zip(&b.bias) {
            sq += (x - y) * (x - y);
        }
    }
    Ok(0.5 * mu * sq)
}

/// Adaptive distillation weight for personalization:
/// `λ₀ · 10^(min(1, 5·(acc_common − acc_local)) − 1)`.
pub fn lambda_schedule(lambda0: f64, acc_common: f64, acc_local: f64) -> f64 {
    let exponent = ((acc_common - acc_local) * 5.0).min(1.0) - 1.0;
    lambda0 * 10f64.powf(exponent)
}

/// Teacher activations at the boundaries of `tap`, computed in eval mode.
pub fn teacher_features(teacher: &ModelParams, inputs: &Matrix, tap: Tap) -> Result<Vec<Matrix>> {
    let taps = tap.boundaries(teacher.layer_count())?;
    let pass = teacher.forward(inputs, Mode::Eval)?;
    Ok(taps.into_iter().map(|b| pass.feature(b).clone()).collect())
}

/// Loss parts for an existing forward pass of `model`.
pub(crate) fn objective_parts(
    model: &ModelParams,
    pass: &ForwardPass,
    labels: &[usize],
    spec: &LossSpec,
) -> Result<LossParts> {
    let taps = spec.tap.boundaries(model.layer_count())?;
    let cls = cross_entropy(pass.logits(), labels)?;
    let dist = match &spec.teacher_features {
        Some(teacher) => {
            if teacher.len() != taps.len() {
                return Err(Error::Config(format!(
                    "tap {} needs {} teacher feature maps, got {}",
                    spec.tap,
                    taps.len(),
                    teacher.len()
                )));
            }
            let mut d = 0.0;
            for (&b, t) in taps.iter().zip(teacher) {
                d += distill_loss(t, pass.feature(b))?;
            }
            d
        }
        None => 0.0,
    };
    let prox = match spec.proximal_reference {
        Some(reference) => proximal_term(model, reference, spec.proximal_mu)?,
        None => 0.0,
    };
    Ok(LossParts { cls, dist, prox })
}

/// The per-federation training objective `cls + λ·dist + (μ/2)‖w − w_ref‖²`
/// on `batch`, with the student in train mode (batch statistics, running
/// statistics untouched) and the teacher in eval mode.
///
/// A `teacher` overrides any features already in `spec`.
pub fn total_loss(
    batch: &Batch,
    model: &ModelParams,
    teacher: Option<&ModelParams>,
    spec: &LossSpec,
) -> Result<(f64, LossParts)> {
    let mut spec = spec.clone();
    if let Some(teacher) = teacher {
        model.ensure_same_architecture(teacher)?;
        spec.teacher_features = Some(teacher_features(teacher, &batch.inputs, spec.tap)?);
    }
    spec.validate(model)?;
    let pass = model.forward(&batch.inputs, Mode::Train)?;
    let parts = objective_parts(model, &pass, &batch.labels, &spec)?;
    Ok((parts.weighted(spec.lambda), parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::seeded_rng;
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = m(&[vec![0.7; 4], vec![-2.0; 4]]);
        let ce = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_prediction() {
        let logits = m(&[vec![0.0, 30.0, 0.0]]);
        assert!(cross_entropy(&logits, &[1]).unwrap() < 1e-9);
    }

    #[test]
    fn hand_evaluated_cross_entropy() {
        // Row 1: -log(e²/(e+e²)) = ln(1+e⁻¹); row 2: -log(e³/(e³+1)) = ln(1+e⁻³).
        let expected = ((1.0 + (-1f64).exp()).ln() + (1.0 + (-3f64).exp()).ln()) / 2.0;
        let ce = cross_entropy(&m(&[vec![1.0, 2.0], vec![3.0, 0.0]]), &[1, 0]).unwrap();
        assert!((ce - expected).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        assert!(matches!(cross_entropy(&m(&[vec![0.0, 1.0]]), &[2]), Err(Error::Input(_))));
        assert!(matches!(cross_entropy(&m(&[vec![0.0, 1.0]]), &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn distill_loss_examples() {
        let a = m(&[vec![1.0, 2.0]]);
        assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(distill_loss(&a, &m(&[vec![0.0, 0.0]])).unwrap(), 5.0);
        let t = m(&[vec![1.0, 2.0], vec![2.0, 3.0]]);
        let s = m(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(distill_loss(&t, &s).unwrap(), 9.0);
        assert!(matches!(distill_loss(&a, &t), Err(Error::Shape(_))));
    }

    #[test]
    fn lambda_schedule_examples() {
        assert!((lambda_schedule(5.0, 0.6, 0.6) - 0.5).abs() < 1e-15);
        assert_eq!(lambda_schedule(5.0, 0.9, 0.2), 5.0);
        assert_eq!(lambda_schedule(5.0, 0.75, 0.5), 5.0);
        assert!((lambda_schedule(1.0, 0.6, 0.5) - 0.316_227_8).abs() < 1e-7);
        assert!((lambda_schedule(1.0, 0.4, 0.5) - 0.031_622_8).abs() < 1e-7);
    }

    fn single_weight(w: f64) -> ModelParams {
        let mut model = ModelParams::mlp(1, &[1], 1, false, &mut seeded_rng(0)).unwrap();
        model.layers_mut()[0].weights.set(0, 0, w);
        model.layers_mut()[1].weights.set(0, 0, 1.0);
        model
    }

    #[test]
    fn proximal_term_examples() {
        let a = single_weight(3.0);
        let b = single_weight(1.0);
        assert_eq!(proximal_term(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(proximal_term(&a, &b, 1.0).unwrap(), 2.0);
        assert_eq!(proximal_term(&a, &b, 0.0).unwrap(), 0.0);
        let other = ModelParams::mlp(2, &[1], 1, false, &mut seeded_rng(0)).unwrap();
        assert!(matches!(proximal_term(&a, &other, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn proximal_term_ignores_norm_layers() {
        let a = ModelParams::mlp(2, &[3], 2, true, &mut seeded_rng(1)).unwrap();
        let mut b = a.clone();
        b.norms_mut()[0].as_mut().unwrap().scale[0] = 9.0;
        b.norms_mut()[0].as_mut().unwrap().running_var[1] = 9.0;
        assert_eq!(proximal_term(&a, &b, 1.0).unwrap(), 0.0);
    }

    fn batch(seed: u64) -> Batch {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        Batch::new(m(&rows), vec![0, 1, 2, 0, 1, 2]).unwrap()
    }

    #[test]
    fn total_loss_single_term_is_cross_entropy() {
        let model = ModelParams::mlp(3, &[4, 4], 3, true, &mut seeded_rng(9)).unwrap();
        let b = batch(9);
        let (value, parts) = total_loss(&b, &model, None, &LossSpec::classification()).unwrap();
        let logits = model.forward(&b.inputs, Mode::Train).unwrap().into_logits();
        assert_eq!(value, cross_entropy(&logits, &b.labels).unwrap());
        assert_eq!(parts.dist, 0.0);
        assert_eq!(parts.prox, 0.0);
    }

    #[test]
    fn total_loss_with_identical_teacher() {
        // Teacher runs in eval mode; with fresh running stats (mean 0, var 1)
        // its features differ from the train-mode student, so compare a
        // student whose running stats match the batch exactly instead.
        let model = ModelParams::mlp(3, &[4, 4], 3, false, &mut seeded_rng(9)).unwrap();
        let b = batch(10);
        let spec = LossSpec { lambda: 10.0, ..LossSpec::classification() };
        let (value, parts) = total_loss(&b, &model, Some(&model), &spec).unwrap();
        assert_eq!(parts.dist, 0.0);
        assert_eq!(value, parts.cls);
    }

    #[test]
    fn total_loss_composes_from_parts() {
        let mut rng = seeded_rng(9);
        let student = ModelParams::mlp(3, &[4, 4], 3, true, &mut rng).unwrap();
        let teacher = ModelParams::mlp(3, &[4, 4], 3, true, &mut rng).unwrap();
        let b = batch(11);
        let spec = LossSpec { lambda: 1.0, ..LossSpec::classification() };
        let (value, _) = total_loss(&b, &student, Some(&teacher), &spec).unwrap();
        let logits = student.forward(&b.inputs, Mode::Train).unwrap();
        let cls = cross_entropy(logits.logits(), &b.labels).unwrap();
        let tfeat = teacher.forward(&b.inputs, Mode::Eval).unwrap();
        let dist = distill_loss(tfeat.feature(2), logits.feature(2)).unwrap();
        assert!((value - (cls + dist)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_requires_teacher() {
        let model = ModelParams::mlp(3, &[4, 4], 3, true, &mut seeded_rng(9)).unwrap();
        let spec = LossSpec { lambda: 1.0, ..LossSpec::classification() };
        assert!(matches!(total_loss(&batch(1), &model, None, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn combined_tap_sums_two_boundaries() {
        let mut rng = seeded_rng(2);
        let student = ModelParams::mlp(3, &[4, 4], 3, true, &mut rng).unwrap();
        let teacher = ModelParams::mlp(3, &[4, 4], 3, true, &mut rng).unwrap();
        let b = batch(3);
        let dist_for = |tap| {
            let spec = LossSpec { lambda: 1.0, tap, ..LossSpec::classification() };
            total_loss(&b, &student, Some(&teacher), &spec).unwrap().1.dist
        };
        let sum = dist_for(Tap::Penultimate) + dist_for(Tap::LastHiddenBlock);
        assert!((dist_for(Tap::Combined) - sum).abs() < 1e-12);
    }

    #[test]
    fn tap_boundaries() {
        assert_eq!(Tap::Penultimate.boundaries(3).unwrap(), vec![2]);
        assert_eq!(Tap::LastHiddenBlock.boundaries(3).unwrap(), vec![1]);
        assert_eq!(Tap::Combined.boundaries(3).unwrap(), vec![1, 2]);
        assert!(Tap::Combined.boundaries(2).is_err());
        for tap in Tap::ALL {
            assert_eq!(tap.to_string().parse::<Tap>().unwrap(), tap);
        }
    }

    proptest! {
        #[test]
        fn lambda_schedule_monotone_and_bounded(
            lambda0 in 0.01f64..20.0,
            common in 0.0f64..=1.0,
            local in 0.0f64..=1.0,
            bump in 0.0f64..0.5,
        ) {
            let v = lambda_schedule(lambda0, common, local);
            prop_assert!(v > 0.0 && v <= lambda0);
            prop_assert_eq!(v == lambda0, common - local >= 0.2);
            prop_assert!(lambda_schedule(lambda0, (common + bump).min(1.0), local) >= v);
            prop_assert!(lambda_schedule(lambda0, common, (local + bump).min(1.0)) <= v);
        }

        #[test]
        fn distill_loss_symmetric_nonnegative(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let ta = Matrix::from_vec(2, 3, a.clone()).unwrap();
            let tb = Matrix::from_vec(2, 3, b.clone()).unwrap();
            let ab = distill_loss(&ta, &tb).unwrap();
            prop_assert_eq!(ab, distill_loss(&tb, &ta).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn total_loss_additive_and_linear_in_lambda(seed in 0u64..500, lambda in 0.0f64..10.0, mu in 0.0f64..1.0) {
            let mut rng = seeded_rng(seed);
            let student = ModelParams::mlp(3, &[4, 4], 3, true, &mut rng).unwrap();
            let teacher = ModelParams::mlp(3, &[4, 4], 3, true, &mut rng).unwrap();
            let reference = ModelParams::mlp(3, &[4, 4], 3, true, &mut rng).unwrap();
            let b = batch(seed);
            let spec = LossSpec {
                lambda,
                proximal_mu: mu,
                proximal_reference: Some(&reference),
                ..LossSpec::classification()
            };
            let (value, parts) = total_loss(&b, &student, Some(&teacher), &spec).unwrap();
            prop_assert!((value - (parts.cls + lambda * parts.dist + parts.prox)).abs() < 1e-12);
            let half = LossSpec { lambda: lambda / 2.0, ..spec.clone() };
            let (_, half_parts) = total_loss(&b, &student, Some(&teacher), &half).unwrap();
            prop_assert_eq!(half_parts.dist * (lambda / 2.0), parts.dist * lambda / 2.0);
        }
    }
}
