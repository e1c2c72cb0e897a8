use crate::{Error, Result};

/// A dense 32-bit tensor with an optional gradient buffer.
///
/// `data` is row-major. `grad`, when present, always has the same length as
/// `data`; it is used to accumulate gradients across tapes between optimizer
/// steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as a matrix: rank 2 maps directly, rank 1 becomes a row
    /// vector, rank 0 a 1x1. Higher ranks are rejected.
    pub fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Ok((1, 1)),
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            r => Err(Error::shape(
                "Tensor::as_matrix_dims",
                format!("rank {r} tensor cannot be used as a matrix"),
            )),
        }
    }

    /// Add `other`'s values into this tensor's gradient buffer, allocating it
    /// on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "Tensor::accumulate_grad",
                format!("gradient len {} vs data len {}", g.len(), self.data.len()),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rank1_is_a_row_vector() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        assert_eq!(t.as_matrix_dims().unwrap(), (1, 4));
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(t.grad.as_deref().unwrap(), &[1.5, 2.5, 3.5]);
    }
}
