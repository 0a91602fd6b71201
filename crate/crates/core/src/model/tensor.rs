/// Dense f64 activations stored channel-major: `[C][N][H][W]`.
///
/// Keeping the channel outermost makes every channel one contiguous slice,
/// so convolutions become plain row-major GEMMs and batch-norm statistics
/// run over contiguous memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn from_data(c: usize, n: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Tensor { c, n, h, w, data }
    }

    /// Stacks per-sample `h x w` single-channel images.
    pub fn from_samples(samples: &[&[f64]], h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            assert_eq!(s.len(), h * w, "sample size");
            data.extend_from_slice(s);
        }
        Tensor::from_data(1, samples.len(), h, w, data)
    }

    /// Elements per channel.
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[L][N][1][1]` vectors to `[1][N][1][L]` sequences, and back.
    pub fn channels_to_sequence(&self) -> Tensor {
        assert_eq!((self.h, self.w), (1, 1), "expects 1x1 spatial");
        let mut out = Tensor::zeros(1, self.n, 1, self.c);
        for c in 0..self.c {
            for n in 0..self.n {
                out.data[n * self.c + c] = self.data[c * self.n + n];
            }
        }
        out
    }

    pub fn sequence_to_channels(&self) -> Tensor {
        assert_eq!((self.c, self.h), (1, 1), "expects a 1-channel sequence");
        let mut out = Tensor::zeros(self.w, self.n, 1, 1);
        for n in 0..self.n {
            for c in 0..self.w {
                out.data[c * self.n + n] = self.data[n * self.w + c];
            }
        }
        out
    }

    /// Per-sample vector `n` of a `[C][N][1][1]` tensor.
    pub fn sample_vector(&self, n: usize) -> Vec<f64> {
        (0..self.c).map(|c| self.data[c * self.n + n]).collect()
    }
}

/// `C (m x n) = A (m x k) B (k x n) + beta C`, all row-major, with optional
/// transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe matrices inside the asserted slice bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 holding A^T
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // 2x3 holding B^T
        let mut c3 = [1.0; 4];
        gemm(2, 3, 2, &a, false, &bt, true, 1.0, &mut c3);
        assert_eq!(c3, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn sequence_round_trip() {
        let t = Tensor::from_data(3, 2, 1, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t.channels_to_sequence();
        assert_eq!(s.data, vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
        assert_eq!(s.sequence_to_channels(), t);
        assert_eq!(t.sample_vector(1), vec![2.0, 4.0, 6.0]);
    }
}
