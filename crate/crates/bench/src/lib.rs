//! Deterministic inputs for the kernel benchmarks.

use anchorml::Tensor;

/// A `rows x cols` matrix of smoothly varying values in `[-1, 1]`.
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i as f64 + 1.0) * 0.618_034 + salt as f64 * 1.7).sin())
        .collect();
    Tensor::new(vec![rows, cols], data).expect("length matches shape")
}

/// One-hot labels cycling through `classes`.
pub fn labels(n: usize, classes: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|i| (0..classes).map(|c| u8::from(i % classes == c)).collect())
        .collect()
}

/// A relevance list with roughly one hit in `period` positions.
pub fn relevance(len: usize, period: usize) -> Vec<bool> {
    (0..len).map(|i| (i * 7 + 3) % period == 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_have_the_requested_shape() {
        assert_eq!(matrix(3, 5, 1).shape(), &[3, 5]);
        assert!(matrix(4, 4, 2).data().iter().all(|v| v.abs() <= 1.0));
        assert!(labels(7, 3).iter().all(|l| l.iter().sum::<u8>() == 1));
        assert!(relevance(100, 10).contains(&true));
    }
}
