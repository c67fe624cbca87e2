//! Row-major n-dimensional tensors and the float abstraction shared by the
//! f32 training path and the f64 gradient-check path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Floating-point scalar the kernel can run on. `gemm_ex` dispatches to the
/// matrixmultiply kernels; everything else goes through `num_traits::Float`.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + std::fmt::Debug + Send + Sync + 'static
{
    /// C (row-major, m x n) = alpha * A * B + beta * C with explicit strides
    /// for A and B so transposed views need no copies.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
    );

    fn from_f64(x: f64) -> Self {
        Self::from(x).expect("f64 conversion")
    }

    fn to_f64(self) -> f64;

    /// Standard normal draw; consumes the same number of underlying `f64`
    /// samples in every instantiation so draw sequences stay aligned.
    fn sample_standard_normal(rng: &mut ChaCha8Rng) -> Self {
        // Box-Muller on two uniform draws.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        Self::from_f64(z)
    }

    fn sample_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        Self::from_f64(rng.gen_range(lo..hi))
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f32,
        a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        beta: f32, c: *mut f32,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f64,
        a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        beta: f64, c: *mut f64,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }

    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy)]
struct SendConstPtr<T>(*const T);
unsafe impl<T> Send for SendConstPtr<T> {}
unsafe impl<T> Sync for SendConstPtr<T> {}

/// General matrix multiply with optional transposes, parallelized across
/// output row blocks. Block boundaries depend only on the shape, so results
/// are bit-reproducible regardless of thread scheduling.
#[allow(clippy::too_many_arguments)]
fn gemm_ex<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = beta * *v;
        }
        return;
    }
    let threads = rayon::current_num_threads();
    let flops = 2 * m * k * n;
    if threads < 2 || flops < (1 << 22) || m < 2 * threads {
        unsafe {
            T::gemm_raw(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr());
        }
        return;
    }
    let rows_per = m.div_ceil(threads);
    let a_ptr = SendConstPtr(a.as_ptr());
    let b_ptr = SendConstPtr(b.as_ptr());
    rayon::scope(|s| {
        for (i, chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let row0 = i * rows_per;
            let rows = chunk.len() / n;
            s.spawn(move |_| {
                let a_ptr = a_ptr;
                let b_ptr = b_ptr;
                unsafe {
                    let a_block = a_ptr.0.offset(row0 as isize * rsa);
                    T::gemm_raw(rows, k, n, alpha, a_block, rsa, csa, b_ptr.0, rsb, csb, beta, chunk.as_mut_ptr());
                }
            });
        }
    });
}

/// C (m x n) = A (m x k) * B (k x n), all contiguous row-major slices.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm_nn lhs");
    assert_eq!(b.len(), k * n, "gemm_nn rhs");
    gemm_ex(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// C (m x n) = A^T * B where A is stored (k x m).
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), k * m, "gemm_tn lhs");
    assert_eq!(b.len(), k * n, "gemm_tn rhs");
    gemm_ex(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta, c);
}

/// C (m x n) = A * B^T where B is stored (n x k).
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm_nt lhs");
    assert_eq!(b.len(), n * k, "gemm_nt rhs");
    gemm_ex(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, beta, c);
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Normal(0, stddev) initialization.
    pub fn randn(shape: &[usize], stddev: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::sample_standard_normal(rng) * T::from_f64(stddev))
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Glorot-uniform initialization over the given fan-in/fan-out.
    pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::sample_uniform(rng, -limit, limit)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    /// C = A · B for 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape.len(), 2, "matmul lhs rank");
        assert_eq!(rhs.shape.len(), 2, "matmul rhs rank");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, &self.data, &rhs.data, T::zero(), &mut out.data);
        out
    }
}

/// Trainable tensor with accumulated gradient and per-tensor Adam state.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (33, 47, 29);
        let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
        let want = naive(m, k, n, a.data(), b.data());

        let got = a.matmul(&b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }

        // A^T route: store A transposed and multiply back.
        let mut at = vec![0.0f64; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a.data()[i * k + p];
            }
        }
        let mut c = vec![0.0f64; m * n];
        gemm_tn(m, k, n, &at, b.data(), 0.0, &mut c);
        for (g, w) in c.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }

        // B^T route.
        let mut bt = vec![0.0f64; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b.data()[p * n + j];
            }
        }
        let mut c2 = vec![0.0f64; m * n];
        gemm_nt(m, k, n, a.data(), &bt, 0.0, &mut c2);
        for (g, w) in c2.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn gemm_parallel_block_split_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Big enough to cross the parallel threshold.
        let (m, k, n) = (256, 128, 128);
        let a = Tensor::<f32>::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[k, n], 1.0, &mut rng);
        let c1 = a.matmul(&b);
        let c2 = a.matmul(&b);
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn randn_deterministic_across_precisions() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::randn(&[8], 0.02, &mut r1);
        let b = Tensor::<f64>::randn(&[8], 0.02, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((f64::from(*x) - y).abs() < 1e-7);
        }
    }
}
