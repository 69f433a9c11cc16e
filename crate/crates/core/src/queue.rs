//! Fixed-capacity FIFO of unit-norm embeddings from the momentum encoder,
//! used as the negative set of the contrastive task.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

/// Tolerance on the norm of pushed vectors.
pub const PUSH_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    /// `capacity × dim`, row-major.
    buffer: Vec<f64>,
    cursor: usize,
    filled: usize,
}

impl MemoryQueue {
    /// Queue pre-filled with `capacity` uniformly random unit vectors.
    pub fn init<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if capacity == 0 {
            return Err(DivaError::config("queue capacity must be >= 1"));
        }
        if dim == 0 {
            return Err(DivaError::config("queue dimension must be >= 1"));
        }
        let mut buffer = Vec::with_capacity(capacity * dim);
        for _ in 0..capacity {
            buffer.extend(random_unit_vector(dim, rng));
        }
        Ok(MemoryQueue { capacity, dim, buffer, cursor: 0, filled: capacity })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Next slot to be overwritten.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn fill_count(&self) -> usize {
        self.filled
    }

    /// Appends the rows of `embeddings`, overwriting the oldest entries.
    pub fn push(&mut self, embeddings: &Tensor) -> Result<()> {
        if embeddings.is_empty() {
            return Ok(());
        }
        if embeddings.cols() != self.dim {
            return Err(DivaError::dim(format!("queue stores {}-d vectors, got {}", self.dim, embeddings.cols())));
        }
        for (i, row) in embeddings.iter_rows().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > PUSH_NORM_TOL {
                return Err(DivaError::Domain(format!("row {i} has norm {n}, expected unit vectors")));
            }
        }
        for row in embeddings.iter_rows() {
            let start = self.cursor * self.dim;
            self.buffer[start..start + self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Slot buffer, `capacity × dim` row-major.
    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    /// Rebuilds a queue from its raw state, as stored in checkpoints.
    pub fn from_parts(capacity: usize, dim: usize, buffer: Vec<f64>, cursor: usize, filled: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || buffer.len() != capacity * dim || cursor >= capacity || filled > capacity {
            return Err(DivaError::Incompatible(format!(
                "inconsistent queue state: capacity {capacity}, dim {dim}, {} values, cursor {cursor}, filled {filled}",
                buffer.len()
            )));
        }
        Ok(MemoryQueue { capacity, dim, buffer, cursor, filled })
    }

    /// Copy of the stored vectors, one per row, in slot order.
    pub fn snapshot(&self) -> Tensor {
        let rows = self.filled;
        Tensor::matrix(rows, self.dim, self.buffer[..rows * self.dim].to_vec()).expect("consistent buffer")
    }

    /// Stored vectors from oldest to newest.
    pub fn ordered(&self) -> Vec<Vec<f64>> {
        let start = if self.filled < self.capacity { 0 } else { self.cursor };
        (0..self.filled)
            .map(|k| {
                let slot = (start + k) % self.capacity;
                self.buffer[slot * self.dim..(slot + 1) * self.dim].to_vec()
            })
            .collect()
    }
}

pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn init_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = MemoryQueue::init(16, 5, &mut rng).unwrap();
        assert_eq!(q.fill_count(), 16);
        for row in q.snapshot().iter_rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let a = MemoryQueue::init(8, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = MemoryQueue::init(8, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(MemoryQueue::init(0, 3, &mut rng).is_err());
    }

    #[test]
    fn random_unit_vectors_are_isotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = MemoryQueue::init(1000, 128, &mut rng).unwrap();
        let s = q.snapshot();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..s.rows() {
            for j in i + 1..s.rows() {
                total += crate::tensor::dot(s.row(i), s.row(j));
                count += 1;
            }
        }
        assert!((total / count as f64).abs() < 0.01);
    }

    #[test]
    fn fifo_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = MemoryQueue::init(4, 6, &mut rng).unwrap();
        let v: Vec<Vec<f64>> = (0..6).map(|i| basis(6, i)).collect();
        for pair in v.chunks(2) {
            q.push(&Tensor::from_rows(pair).unwrap()).unwrap();
        }
        assert_eq!(q.ordered(), v[2..].to_vec());
        assert_eq!(q.cursor(), 2);

        let mut q = MemoryQueue::init(4, 6, &mut rng).unwrap();
        q.push(&Tensor::from_rows(&v[..4]).unwrap()).unwrap();
        assert_eq!(q.ordered(), v[..4].to_vec());
        assert_eq!(q.cursor(), 0);
    }

    #[test]
    fn push_rejects_bad_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q = MemoryQueue::init(4, 3, &mut rng).unwrap();
        assert!(q.push(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).is_err());
        assert!(q.push(&Tensor::from_rows(&[vec![2.0, 0.0, 0.0]]).unwrap()).is_err());
        assert!(q.push(&Tensor::from_rows(&[vec![1.0 + 5e-5, 0.0, 0.0]]).unwrap()).is_ok());
    }

    #[test]
    fn snapshot_is_a_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q = MemoryQueue::init(3, 2, &mut rng).unwrap();
        let snap = q.snapshot();
        assert_eq!(snap.rows(), 3);
        q.push(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert_ne!(snap, q.snapshot());
        assert_eq!(snap.rows(), 3);
    }
}
