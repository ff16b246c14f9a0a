//! Accuracy and rank-based AUC.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn check(probabilities: &Matrix, targets: &Matrix, op: &'static str) -> Result<()> {
    if probabilities.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: probabilities.shape(),
            right: targets.shape(),
        });
    }
    if probabilities.rows() == 0 {
        return Err(Error::EmptyInput("no rows to score"));
    }
    Ok(())
}

/// Fraction of rows whose arg-max prediction matches the one-hot target.
/// Ties go to the lowest class index.
pub fn accuracy(probabilities: &Matrix, targets: &Matrix) -> Result<f64> {
    check(probabilities, targets, "accuracy")?;
    let hits = (0..probabilities.rows())
        .filter(|&r| probabilities.row_argmax(r) == targets.row_argmax(r))
        .count();
    Ok(hits as f64 / probabilities.rows() as f64)
}

/// Mann-Whitney AUC of `scores` for the rows flagged positive; ties count 1/2.
/// Returns `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Tied block occupies ranks i+1..=j+1; each member gets the average.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&s| positive[s]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Binary AUC for two classes, unweighted one-vs-rest mean otherwise.
///
/// Classes that are absent from the targets are skipped with a warning in the
/// multiclass case; a binary problem with a single class present is an error.
pub fn auc(probabilities: &Matrix, targets: &Matrix) -> Result<f64> {
    check(probabilities, targets, "auc")?;
    let classes = targets.cols();
    let labels: Vec<usize> = (0..targets.rows()).map(|r| targets.row_argmax(r)).collect();
    if classes == 2 {
        let positive: Vec<bool> = labels.iter().map(|&c| c == 1).collect();
        return binary_auc(&probabilities.column(1), &positive)
            .ok_or_else(|| Error::invalid("AUC needs both classes present"));
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match binary_auc(&probabilities.column(c), &positive) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => log::warn!("class {c} is absent or universal in the targets; skipped in AUC"),
        }
    }
    if used == 0 {
        return Err(Error::invalid(
            "AUC needs at least one class with both outcomes",
        ));
    }
    Ok(total / used as f64)
}
