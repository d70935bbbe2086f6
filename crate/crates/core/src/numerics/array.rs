use super::NumericsError;

/// Dense row-major array of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::Invalid(format!(
                "array extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(NumericsError::Shape {
                op: "array",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Array::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Array::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        if data.is_empty() {
            return Array::zeros(&[1]);
        }
        Array::from_parts(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, NumericsError> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(NumericsError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 array.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_distance(&self, other: &Array) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &Array, perm: &[usize]) -> Array {
    let in_strides = strides(&x.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(x.data[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Array::from_parts(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// General matrix product on rank-2 arrays or equal-batch rank-3 arrays.
/// `ta`/`tb` transpose the trailing two axes of the corresponding operand.
pub(crate) fn gemm(a: &Array, ta: bool, b: &Array, tb: bool) -> Result<Array, NumericsError> {
    let shape_err = || NumericsError::Shape {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() != b.rank() || !(a.rank() == 2 || a.rank() == 3) {
        return Err(shape_err());
    }
    let (batch, ar, ac, br, bc) = if a.rank() == 2 {
        (1, a.shape[0], a.shape[1], b.shape[0], b.shape[1])
    } else {
        if a.shape[0] != b.shape[0] {
            return Err(shape_err());
        }
        (a.shape[0], a.shape[1], a.shape[2], b.shape[1], b.shape[2])
    };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(shape_err());
    }
    let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a_off = bi * ar * ac;
        let b_off = bi * br * bc;
        let c_off = bi * m * n;
        // SAFETY: all strides and extents were derived from the operand shapes
        // above and each slice holds exactly the addressed elements.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data[a_off..].as_ptr(),
                rsa as isize,
                csa as isize,
                b.data[b_off..].as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out[c_off..].as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    let shape = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok(Array::from_parts(shape, out))
}
