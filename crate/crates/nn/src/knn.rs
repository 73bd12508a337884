use patchgrid_core::{Scalar, Tensor};

use crate::error::{NnError, Result};

/// Majority vote among the `k` bank rows nearest to `query` (Euclidean).
/// Equal distances keep bank order; vote ties go to the lowest class index.
pub fn knn_predict<T: Scalar>(query: &[T], bank: &Tensor<T>, bank_labels: &[usize], k: usize) -> Result<usize> {
    let (rows, dim) = match *bank.shape() {
        [r, d] => (r, d),
        _ => return Err(NnError::Shape(format!("feature bank must be (M, D), got {:?}", bank.shape()))),
    };
    if bank_labels.len() != rows {
        return Err(NnError::Shape(format!("{} labels for {rows} bank rows", bank_labels.len())));
    }
    if query.len() != dim {
        return Err(NnError::Shape(format!("query has {} features, bank has {dim}", query.len())));
    }
    if k == 0 || k > rows {
        return Err(NnError::Invalid(format!("k = {k} with a bank of {rows}")));
    }
    let mut dist: Vec<(f64, usize)> = bank
        .data()
        .chunks(dim)
        .enumerate()
        .map(|(i, row)| {
            let d: f64 = row.iter().zip(query).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
            (d, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let classes = bank_labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; classes];
    for &(_, i) in &dist[..k] {
        votes[bank_labels[i]] += 1;
    }
    let best = votes.iter().copied().max().unwrap_or(0);
    Ok(votes.iter().position(|&v| v == best).unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(points: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(vec![points.len(), 2], points.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn votes_among_nearest() {
        let b = bank(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0]]);
        let labels = [2, 2, 2, 0, 0];
        assert_eq!(knn_predict(&[0.0, 0.0], &b, &labels, 3).unwrap(), 2);
        assert_eq!(knn_predict(&[4.9, 5.0], &b, &labels, 1).unwrap(), 0);
        assert_eq!(knn_predict(&[4.9, 5.0], &b, &labels, 3).unwrap(), 0);
    }

    #[test]
    fn two_two_tie_goes_to_lower_class() {
        let b = bank(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [9.0, 9.0]]);
        let labels = [3, 1, 3, 1, 0];
        assert_eq!(knn_predict(&[0.0, 0.0], &b, &labels, 4).unwrap(), 1);
    }

    #[test]
    fn errors() {
        let b = bank(&[[0.0, 0.0]]);
        assert!(knn_predict(&[0.0], &b, &[0], 1).is_err());
        assert!(knn_predict(&[0.0, 0.0], &b, &[0], 2).is_err());
        assert!(knn_predict(&[0.0, 0.0], &b, &[0], 0).is_err());
    }
}
