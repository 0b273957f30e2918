//! Activation maps, the activation-matching loss and the masked-prediction loss.
//!
//! Graph variants (`*_on`) record onto a [`Graph`] so the student side can be
//! differentiated; teacher inputs are passed as plain tensors and enter the
//! graph as constants. Value variants build a throwaway graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::mask::MaskSpec;

/// Which tokens take part in activation matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingScope {
    /// Stage-wise cosine alignment of the class-token feature only.
    ClassOnly,
    /// Patch tokens the student can see.
    VisibleOnly,
    /// Every patch token, masked or not.
    All,
}

impl std::str::FromStr for MatchingScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_only" => Ok(MatchingScope::ClassOnly),
            "visible_only" => Ok(MatchingScope::VisibleOnly),
            "all" => Ok(MatchingScope::All),
            other => Err(Error::Config(format!(
                "unknown matching scope {other:?} (expected class_only, visible_only or all)"
            ))),
        }
    }
}

impl std::fmt::Display for MatchingScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchingScope::ClassOnly => "class_only",
            MatchingScope::VisibleOnly => "visible_only",
            MatchingScope::All => "all",
        })
    }
}

/// Token rows selected by `scope`. `class_offset` is 1 when a class token
/// sits at row 0.
pub fn scope_rows(scope: MatchingScope, mask: &MaskSpec, class_offset: usize) -> Result<Vec<usize>> {
    match scope {
        MatchingScope::ClassOnly => {
            if class_offset == 0 {
                return Err(Error::Config(
                    "class_only matching needs a class token".into(),
                ));
            }
            Ok(vec![0])
        }
        MatchingScope::VisibleOnly => Ok(mask.visible.iter().map(|i| i + class_offset).collect()),
        MatchingScope::All => Ok((0..mask.num_patches()).map(|i| i + class_offset).collect()),
    }
}

/// Pairwise cosine similarities over a token subset, and the same matrix with
/// every row scaled to unit ℓ2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Tensor,
    pub row_normalized: Tensor,
}

/// Graph handles of an [`ActivationMap`].
#[derive(Clone, Copy, Debug)]
pub struct ActivationMapVars {
    pub values: Var,
    pub row_normalized: Var,
}

fn remap_degenerate(err: Error, rows: &[usize]) -> Error {
    match err {
        Error::DegenerateFeature { index } => Error::DegenerateFeature { index: rows[index] },
        other => other,
    }
}

pub fn activation_map_on(g: &mut Graph, features: Var, rows: &[usize]) -> Result<ActivationMapVars> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "activation map over an empty token set".into(),
        ));
    }
    let f = g.gather_rows(features, rows)?;
    let unit = g.normalize_rows(f).map_err(|e| remap_degenerate(e, rows))?;
    let unit_t = g.transpose(unit)?;
    let values = g.matmul(unit, unit_t)?;
    // Rows are nonzero: the diagonal is a vector's cosine with itself.
    let row_normalized = g.normalize_rows(values)?;
    Ok(ActivationMapVars {
        values,
        row_normalized,
    })
}

/// Cosine map of `features[L×d]` restricted to `rows`.
pub fn activation_map(features: &Tensor, rows: &[usize]) -> Result<ActivationMap> {
    let mut g = Graph::new();
    let f = g.constant(features.detached());
    let m = activation_map_on(&mut g, f, rows)?;
    Ok(ActivationMap {
        values: g.take(m.values),
        row_normalized: g.take(m.row_normalized),
    })
}

/// `1/(K) Σ_k 1/L_k Σ_i [1 - <Ā_tea^k(i,:), Ā_stu^k(i,:)>]`.
///
/// Teacher maps are constants; the result is differentiable in the student maps.
pub fn activation_matching_loss_on(
    g: &mut Graph,
    teacher: &[Tensor],
    student: &[Var],
) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "activation matching needs the same nonzero number of stages, got {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    let k = teacher.len() as f64;
    let mut total: Option<Var> = None;
    for (t, &s) in teacher.iter().zip(student) {
        if t.shape() != g.shape(s) {
            return Err(Error::Shape {
                op: "activation_matching_loss",
                lhs: t.shape().to_vec(),
                rhs: g.shape(s).to_vec(),
            });
        }
        let rows = t.shape()[0] as f64;
        let tv = g.constant(t.detached());
        let prod = g.mul(tv, s)?;
        let inner = g.sum(prod)?;
        // 1 - inner / L_k, folded into the stage average below.
        let term = g.scale(inner, -1.0 / (rows * k))?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, total.expect("nonempty"))
}

pub fn activation_matching_loss(teacher: &[ActivationMap], student: &[ActivationMap]) -> Result<f64> {
    let mut g = Graph::new();
    let t: Vec<Tensor> = teacher.iter().map(|m| m.row_normalized.detached()).collect();
    let s: Vec<Var> = student
        .iter()
        .map(|m| g.constant(m.row_normalized.detached()))
        .collect();
    let loss = activation_matching_loss_on(&mut g, &t, &s)?;
    Ok(g.value(loss).item())
}

/// `1/K Σ_k [1 - cos(f_tea^k(cls), f_stu^k(cls))]`, the class-token-only
/// variant of activation matching.
pub fn class_token_loss_on(g: &mut Graph, teacher: &[Tensor], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "class-token matching needs the same nonzero number of stages, got {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    let k = teacher.len() as f64;
    let mut total: Option<Var> = None;
    for (t, &s) in teacher.iter().zip(student) {
        let tmap = unit_class_row(t)?;
        let cls = g.gather_rows(s, &[0])?;
        let unit = g.normalize_rows(cls).map_err(|e| remap_degenerate(e, &[0]))?;
        if tmap.len() != g.shape(unit)[1] {
            return Err(Error::Shape {
                op: "class_token_loss",
                lhs: t.shape().to_vec(),
                rhs: g.shape(s).to_vec(),
            });
        }
        let tv = g.constant(Tensor::from_parts(vec![1, tmap.len()], tmap));
        let prod = g.mul(tv, unit)?;
        let cos = g.sum(prod)?;
        let term = g.scale(cos, -1.0 / k)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, total.expect("nonempty"))
}

fn unit_class_row(t: &Tensor) -> Result<Vec<f64>> {
    let row = t.row(0);
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= crate::tensor::MIN_FEATURE_NORM {
        return Err(Error::DegenerateFeature { index: 0 });
    }
    Ok(row.iter().map(|v| v / norm).collect())
}

/// Smooth-ℓ1 between teacher and projected student outputs over masked token
/// rows: mean over features within a row, summed over rows, divided by the
/// number of masked rows. Visible rows do not contribute.
pub fn masked_prediction_loss_on(
    g: &mut Graph,
    teacher_out: &Tensor,
    student_out: Var,
    masked_rows: &[usize],
    beta: f64,
) -> Result<Var> {
    if masked_rows.is_empty() {
        return Err(Error::UndefinedLoss(
            "masked prediction loss with an empty mask".into(),
        ));
    }
    if teacher_out.shape() != g.shape(student_out) {
        return Err(Error::Shape {
            op: "masked_prediction_loss",
            lhs: teacher_out.shape().to_vec(),
            rhs: g.shape(student_out).to_vec(),
        });
    }
    let t = g.constant(teacher_out.detached());
    let t = g.gather_rows(t, masked_rows)?;
    let s = g.gather_rows(student_out, masked_rows)?;
    let diff = g.sub(s, t)?;
    let per_elem = g.smooth_l1(diff, beta)?;
    let per_row = g.row_mean(per_elem)?;
    let total = g.sum(per_row)?;
    g.scale(total, 1.0 / masked_rows.len() as f64)
}

/// Value variant of [`masked_prediction_loss_on`]. `class_offset` maps patch
/// indices in `mask` to token rows.
pub fn masked_prediction_loss(
    teacher_out: &Tensor,
    student_projected: &Tensor,
    mask: &MaskSpec,
    class_offset: usize,
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student_projected.detached());
    let rows: Vec<usize> = mask.masked.iter().map(|i| i + class_offset).collect();
    let loss = masked_prediction_loss_on(&mut g, teacher_out, s, &rows, beta)?;
    Ok(g.value(loss).item())
}

/// `L_act + λ L_mask`.
pub fn total_loss(l_act: f64, l_mask: f64, lambda: f64) -> f64 {
    l_act + lambda * l_mask
}
