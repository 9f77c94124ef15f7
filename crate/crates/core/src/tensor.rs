//! Minimal dense-tensor arithmetic: row-major `f32` storage with `f64`
//! accumulation for reductions and matrix products.
//!
//! Tensors are immutable after construction and reject non-finite values,
//! so every downstream scale computation is well defined.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero dimension")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { value: f32, index: usize },
    #[error("matmul shape mismatch: left {left:?} incompatible with right {right:?}")]
    MatmulShape { left: Vec<usize>, right: Vec<usize> },
    #[error("per-channel granularity requires a 2-d tensor, got shape {0:?}")]
    ChannelRank(Vec<usize>),
    #[error("group size {group} does not divide channel length {len} (padding is not supported)")]
    GroupSize { group: usize, len: usize },
    #[error("per-group granularity requires a 1-d or 2-d tensor, got shape {0:?}")]
    GroupRank(Vec<usize>),
}

/// Scale granularity: one scale for the whole tensor, one per output
/// channel (column of a `[in, out]` weight matrix), or one per contiguous
/// group of values within a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerGroup(usize),
}

impl Granularity {
    pub fn group_size(&self) -> Option<usize> {
        match self {
            Granularity::PerGroup(n) => Some(*n),
            _ => None,
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::PerTensor => write!(f, "per-tensor"),
            Granularity::PerChannel => write!(f, "per-channel"),
            Granularity::PerGroup(n) => write!(f, "per-group({n})"),
        }
    }
}

/// Precomputed element-to-group mapping for a tensor shape under a
/// granularity. Group indices are contiguous in `0..num_groups`.
#[derive(Debug, Clone, Copy)]
pub struct GroupLayout {
    granularity: Granularity,
    /// Number of columns for 2-d shapes, 0 for 1-d.
    cols: usize,
    /// Channel length divided by the group size (1 outside per-group).
    groups_per_channel: usize,
    num_groups: usize,
}

impl GroupLayout {
    pub fn new(shape: &[usize], granularity: Granularity) -> Result<Self, TensorError> {
        let num_groups = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => {
                if shape.len() != 2 {
                    return Err(TensorError::ChannelRank(shape.to_vec()));
                }
                shape[1]
            }
            Granularity::PerGroup(g) => {
                let channel_len = match shape.len() {
                    1 => shape[0],
                    2 => shape[0],
                    _ => return Err(TensorError::GroupRank(shape.to_vec())),
                };
                if g == 0 || channel_len % g != 0 {
                    return Err(TensorError::GroupSize {
                        group: g,
                        len: channel_len,
                    });
                }
                let per_channel = channel_len / g;
                per_channel * if shape.len() == 2 { shape[1] } else { 1 }
            }
        };
        Ok(GroupLayout {
            granularity,
            cols: if shape.len() == 2 { shape[1] } else { 0 },
            groups_per_channel: match granularity {
                Granularity::PerGroup(g) => shape[0] / g,
                _ => 1,
            },
            num_groups,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Group index of the element at `flat` (row-major).
    #[inline]
    pub fn group_of(&self, flat: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => flat % self.cols,
            Granularity::PerGroup(g) => {
                if self.cols == 0 {
                    flat / g
                } else {
                    let channel = flat % self.cols;
                    let row = flat / self.cols;
                    channel * self.groups_per_channel + row / g
                }
            }
        }
    }
}

/// Dense row-major tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { value, index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            data: vec![0.0; n],
            shape,
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self, TensorError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0f32; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn get2(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    /// A new tensor holding rows `idx` of a 2-d tensor, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            data.extend_from_slice(&self.data[r * c..(r + 1) * c]);
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }
}

/// `x [B×N] · w [N×M] -> [B×M]`, accumulated in `f64`, stored as `f32`.
pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(TensorError::MatmulShape {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (b, n, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = vec![0.0f32; b * m];
    for i in 0..b {
        let xrow = &x.data()[i * n..(i + 1) * n];
        for j in 0..m {
            let mut acc = 0.0f64;
            for (k, &xv) in xrow.iter().enumerate() {
                acc += xv as f64 * w.data()[k * m + j] as f64;
            }
            out[i * m + j] = acc as f32;
        }
    }
    Ok(Tensor {
        shape: vec![b, m],
        data: out,
    })
}

/// Elementwise `max(x, 0)`.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Maximum absolute value per group under `granularity`.
pub fn reduce_max_abs(x: &Tensor, granularity: Granularity) -> Result<Vec<f32>, TensorError> {
    let layout = GroupLayout::new(x.shape(), granularity)?;
    let mut maxes = vec![0.0f32; layout.num_groups()];
    for (i, &v) in x.data().iter().enumerate() {
        let g = layout.group_of(i);
        let a = v.abs();
        if a > maxes[g] {
            maxes[g] = a;
        }
    }
    Ok(maxes)
}
