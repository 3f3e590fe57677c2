//! Dense f64 kernels shared by forward and backward rules. Inner loops work
//! on contiguous row slices so the compiler can vectorize them.

/// out[m×n] += a[m×k] · b[k×n]
pub fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            axpy(a_ip, b_row, out_row);
        }
    }
}

pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mm_acc(a, b, m, k, n, &mut out);
    out
}

/// out[m×p] += a[m×n] · b[p×n]ᵀ  (rows of both operands are contiguous)
pub fn mm_a_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            out[i * p + j] += dot(a_row, b_row);
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub fn mm_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            axpy(a_ip, b_row, &mut out[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_small() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = mm(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect(); // 2×3
        // a(2×3) · bᵀ(3×2)
        let mut out1 = vec![0.0; 4];
        mm_a_bt_acc(&a, &b, 2, 3, 2, &mut out1);
        let bt = transpose(&b, 2, 3);
        assert_eq!(out1, mm(&a, &bt, 2, 3, 2));
        // aᵀ(3×2) · b(2×3)
        let mut out2 = vec![0.0; 9];
        mm_at_b_acc(&a, &b, 2, 3, 3, &mut out2);
        let at = transpose(&a, 2, 3);
        assert_eq!(out2, mm(&at, &b, 3, 2, 3));
    }
}
