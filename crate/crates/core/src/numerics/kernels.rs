//! Slice-level numeric kernels shared by the tape's forward and backward passes.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `out(m x n) += a(m x k) · b(k x n)`
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (x, y) in o.iter_mut().zip(br) {
                *x += s * y;
            }
        }
    }
}

/// `out(m x n) += a(m x k) · b(n x k)ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out(k x n) += a(m x k)ᵀ · b(m x n)`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (x, y) in o.iter_mut().zip(br) {
                *x += s * y;
            }
        }
    }
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GeLU, tanh form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row softmax with max subtraction. With a mask, disallowed entries get
/// zero probability; a row with nothing allowed is treated as unmasked.
pub fn softmax_rows(x: &[f64], r: usize, c: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mask = allowed.map(|m| &m[i * c..(i + 1) * c]);
        let open = |j: usize| match mask {
            Some(m) if m.iter().any(|&b| b) => m[j],
            _ => true,
        };
        let max = (0..c)
            .filter(|&j| open(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for j in 0..c {
            if open(j) {
                o[j] = (row[j] - max).exp();
                sum += o[j];
            }
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub fn softmax_rows_backward(y: &[f64], g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut dx = vec![0.0; r * c];
    for i in 0..r {
        let yr = &y[i * c..(i + 1) * c];
        let gr = &g[i * c..(i + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[i * c + j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}
