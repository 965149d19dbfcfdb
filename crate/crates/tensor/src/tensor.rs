use crate::{Result, TensorError};

/// Dense row-major f32 tensor with an optional gradient buffer.
///
/// The gradient buffer is allocated iff `requires_grad` is set and always has
/// the same length as `data`. Plain values (activations, constants) keep
/// `requires_grad == false` and carry no buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// n x n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Enables gradient tracking, allocating a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    /// Resets all gradient entries to exactly zero.
    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Reinterprets the tensor under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        if let Some(g) = &mut self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mean-pools each `f x f` block of every channel plane.
    ///
    /// Shape `[..., h, w]` with `f` dividing both spatial extents.
    pub fn block_mean_downsample(&self, f: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || f == 0 {
            return Err(TensorError::BadShape {
                op: "block_mean_downsample",
                expected: "rank >= 2 and factor >= 1".into(),
                actual: self.shape.clone(),
            });
        }
        let w = self.shape[self.shape.len() - 1];
        let h = self.shape[self.shape.len() - 2];
        if h % f != 0 || w % f != 0 {
            return Err(TensorError::Domain {
                op: "block_mean_downsample",
                msg: format!("factor {f} does not divide spatial extents {h}x{w}"),
            });
        }
        let channels: usize = self.shape[..self.shape.len() - 2].iter().product();
        let (oh, ow) = (h / f, w / f);
        let mut out = vec![0.0f32; channels * oh * ow];
        let inv = 1.0 / (f * f) as f64;
        for c in 0..channels {
            let plane = &self.data[c * h * w..(c + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..f {
                        let row = (oy * f + dy) * w + ox * f;
                        for dx in 0..f {
                            acc += plane[row + dx] as f64;
                        }
                    }
                    out[c * oh * ow + oy * ow + ox] = (acc * inv) as f32;
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Tensor::new(shape, out)
    }

    /// Nearest-neighbour upsampling of the two trailing spatial dims by `f`.
    pub fn upsample_nearest(&self, f: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || f == 0 {
            return Err(TensorError::BadShape {
                op: "upsample_nearest",
                expected: "rank >= 2 and factor >= 1".into(),
                actual: self.shape.clone(),
            });
        }
        let w = self.shape[self.shape.len() - 1];
        let h = self.shape[self.shape.len() - 2];
        let channels: usize = self.shape[..self.shape.len() - 2].iter().product();
        let (oh, ow) = (h * f, w * f);
        let mut out = vec![0.0f32; channels * oh * ow];
        for c in 0..channels {
            let plane = &self.data[c * h * w..(c + 1) * h * w];
            let oplane = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    oplane[oy * ow + ox] = plane[(oy / f) * w + (ox / f)];
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Tensor::new(shape, out)
    }
}
