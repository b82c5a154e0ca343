use crate::{Element, Result, TensorError};

/// Dense row-major n-dimensional array.
///
/// `dims` is never empty and never contains a zero; scalars use `dims == [1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    dims: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

pub(crate) fn validate_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(TensorError::InvalidDims {
            dims: dims.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if dims.contains(&0) {
        return Err(TensorError::InvalidDims {
            dims: dims.to_vec(),
            reason: "all dims must be positive".into(),
        });
    }
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        TensorError::InvalidDims {
            dims: dims.to_vec(),
            reason: "element count overflows usize".into(),
        }
    })
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let dims = dims.into();
        let numel = validate_dims(&dims)?;
        if numel != data.len() {
            return Err(TensorError::InvalidDims {
                dims,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
        })
    }

    /// Panics on invalid dims.
    pub fn full(dims: impl Into<Vec<usize>>, value: E) -> Self {
        let dims = dims.into();
        let numel = validate_dims(&dims).expect("valid dims");
        Self {
            dims,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    /// Panics on invalid dims.
    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, E::zero())
    }

    pub fn scalar(value: E) -> Self {
        Self::full(vec![1], value)
    }

    /// Builds a tensor from a function of the flat index. Panics on invalid dims.
    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> E) -> Self {
        let dims = dims.into();
        let numel = validate_dims(&dims).expect("valid dims");
        Self {
            dims,
            data: (0..numel).map(f).collect(),
            requires_grad: false,
        }
    }

    pub fn from_f64_slice(dims: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarLoss(self.dims.clone()))
        }
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let numel = validate_dims(&dims)?;
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.dims.clone(),
                rhs: dims,
            });
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let out_dims = permuted_dims(&self.dims, axes)?;
        let mut out = vec![E::zero(); self.numel()];
        permute_into(&self.data, &self.dims, axes, &mut out);
        Ok(Self {
            dims: out_dims,
            data: out,
            requires_grad: self.requires_grad,
        })
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "transpose expects a matrix, got dims {:?}",
                self.dims
            )));
        }
        self.permute(&[1, 0])
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, size, inner) = split_at_axis(&self.dims, axis)?;
        if len == 0 || start + len > size {
            return Err(TensorError::InvalidArgument(format!(
                "narrow [{start}, {}) out of range for axis {axis} of size {size}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = len;
        Ok(Self {
            dims,
            data,
            requires_grad: false,
        })
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let dims = concat_dims(parts.iter().map(|t| t.dims()), axis)?;
        let (outer, _, inner) = split_at_axis(&first.dims, axis)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for part in parts {
                let chunk = part.dims[axis] * inner;
                data.extend_from_slice(&part.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
        })
    }
}

/// `(outer, size, inner)` such that the tensor is `[outer, size, inner]` around `axis`.
pub(crate) fn split_at_axis(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: dims.len(),
        });
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

pub(crate) fn permuted_dims(dims: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; dims.len()];
    if axes.len() != dims.len() {
        return Err(TensorError::InvalidArgument(format!(
            "permutation {axes:?} does not match rank {}",
            dims.len()
        )));
    }
    for &a in axes {
        if a >= dims.len() || seen[a] {
            return Err(TensorError::InvalidArgument(format!(
                "{axes:?} is not a permutation of 0..{}",
                dims.len()
            )));
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| dims[a]).collect())
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Writes `src` (with `dims`) permuted by `axes` into `out`.
pub(crate) fn permute_into<E: Copy>(src: &[E], dims: &[usize], axes: &[usize], out: &mut [E]) {
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    // stride in the source for each output axis
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = dims.len();
    let mut index = vec![0usize; rank];
    let mut src_off = 0usize;
    for slot in out.iter_mut() {
        *slot = src[src_off];
        // odometer increment over output index
        for ax in (0..rank).rev() {
            index[ax] += 1;
            src_off += src_strides[ax];
            if index[ax] < out_dims[ax] {
                break;
            }
            src_off -= src_strides[ax] * out_dims[ax];
            index[ax] = 0;
        }
    }
}

pub(crate) fn concat_dims<'a>(
    mut parts: impl Iterator<Item = &'a [usize]>,
    axis: usize,
) -> Result<Vec<usize>> {
    let first = parts
        .next()
        .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
    if axis >= first.len() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: first.len(),
        });
    }
    let mut dims = first.to_vec();
    for d in parts {
        let compatible = d.len() == dims.len()
            && d.iter()
                .zip(&dims)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: dims,
                rhs: d.to_vec(),
            });
        }
        dims[axis] += d[axis];
    }
    Ok(dims)
}
