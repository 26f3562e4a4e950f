//! Forward kernels shared by the eager evaluator and the tape.
//!
//! Both execution paths call exactly these functions, so a value computed
//! eagerly is bit-identical to the same value recorded on a tape.

use super::array::{check_same, Array};
use crate::error::{Error, Result};

/// `[k] x [k, n] -> [n]` or `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if b.shape().len() != 2 || a.shape().is_empty() || a.shape().len() > 2 {
        return Err(Error::Shape(format!(
            "matmul: unsupported shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (k, n) = (b.shape()[0], b.shape()[1]);
    if a.last_dim() != k {
        return Err(Error::Shape(format!(
            "matmul: inner dims differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let m = a.rows();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &ad[r * k..(r + 1) * k];
        let dst = &mut out[r * n..(r + 1) * n];
        for (i, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let src = &bd[i * n..(i + 1) * n];
            for (o, &w) in dst.iter_mut().zip(src) {
                *o += x * w;
            }
        }
    }
    let shape = if a.shape().len() == 1 {
        vec![n]
    } else {
        vec![m, n]
    };
    Array::new(shape, out)
}

pub fn add(a: &Array, b: &Array) -> Result<Array> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Array, b: &Array) -> Result<Array> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Array, b: &Array) -> Result<Array> {
    zip_with(a, b, "mul", |x, y| x * y)
}

fn zip_with(a: &Array, b: &Array, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    check_same(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data)
}

/// Adds a `[n]` bias to every row of `a` (last axis `n`).
pub fn add_bias(a: &Array, bias: &Array) -> Result<Array> {
    let n = a.last_dim();
    if bias.shape() != [n] {
        return Err(Error::Shape(format!(
            "add_bias: bias {:?} does not match last axis of {:?}",
            bias.shape(),
            a.shape()
        )));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn tanh(a: &Array) -> Array {
    a.map(f64::tanh)
}

pub fn sigmoid(a: &Array) -> Array {
    a.map(|x| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    })
}

pub fn log(a: &Array) -> Array {
    a.map(f64::ln)
}

pub fn scale(a: &Array, factor: f64) -> Array {
    a.map(|x| x * factor)
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax(a: &Array) -> Result<Array> {
    let n = a.last_dim();
    if n == 0 || a.is_empty() {
        return Err(Error::Shape(format!(
            "softmax: empty last axis in shape {:?}",
            a.shape()
        )));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub fn sum(a: &Array) -> Array {
    Array::scalar(a.data().iter().sum())
}

/// Concatenates two vectors.
pub fn concat(a: &Array, b: &Array) -> Result<Array> {
    if a.shape().len() != 1 || b.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "concat: expected vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Array::vector(data))
}

/// Row `index` of a `[rows, cols]` table, as a `[cols]` vector.
pub fn gather_row(table: &Array, index: usize) -> Result<Array> {
    if table.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "gather_row: table must be a matrix, got {:?}",
            table.shape()
        )));
    }
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    if index >= rows {
        return Err(Error::Index { index, len: rows });
    }
    Ok(Array::vector(
        table.data()[index * cols..(index + 1) * cols].to_vec(),
    ))
}

/// Element `index` of a vector, as a scalar.
pub fn pick(a: &Array, index: usize) -> Result<Array> {
    if a.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "pick: expected a vector, got {:?}",
            a.shape()
        )));
    }
    a.data()
        .get(index)
        .map(|&v| Array::scalar(v))
        .ok_or(Error::Index {
            index,
            len: a.len(),
        })
}

/// `-ln dist[target]` for a probability vector.
pub fn cross_entropy(dist: &Array, target: usize) -> Result<f64> {
    let p = pick(dist, target)?.item()?;
    Ok(-p.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Array::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Array::vector(vec![1.0, 1.0, 1.0])).unwrap();
        assert!(close(s.data(), &[1.0 / 3.0; 3], 1e-15));
        let s = softmax(&Array::vector(vec![2f64.ln(), 0.0])).unwrap();
        assert!(close(s.data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        assert!(matches!(
            softmax(&Array::vector(vec![])),
            Err(Error::Shape(_))
        ));
        assert!(softmax(&Array::zeros(&[3, 0])).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let s = softmax(&Array::vector(vec![1000.0, 999.0, -1000.0])).unwrap();
        assert!(s.all_finite());
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_independent() {
        let a = Array::matrix(2, 2, vec![0.0, 0.0, 2f64.ln(), 0.0]).unwrap();
        let s = softmax(&a).unwrap();
        assert!(close(s.data(), &[0.5, 0.5, 2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = Array::vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(cross_entropy(&one_hot, 1).unwrap(), 0.0);
        let uniform = Array::vector(vec![0.25; 4]);
        assert!((cross_entropy(&uniform, 3).unwrap() - 4f64.ln()).abs() < 1e-15);
        let d = Array::vector(vec![0.25, 0.5, 0.25]);
        assert!((cross_entropy(&d, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&d, 3),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn matmul_vector_and_matrix() {
        let w = Array::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = matmul(&Array::vector(vec![1.0, -1.0]), &w).unwrap();
        assert_eq!(v.shape(), &[3]);
        assert_eq!(v.data(), &[-3.0, -3.0, -3.0]);
        let m = matmul(&Array::matrix(1, 2, vec![2.0, 0.5]).unwrap(), &w).unwrap();
        assert_eq!(m.shape(), &[1, 3]);
        assert_eq!(m.data(), &[4.0, 6.5, 9.0]);
        assert!(matmul(&Array::vector(vec![1.0; 3]), &w).is_err());
    }

    #[test]
    fn sigmoid_symmetry() {
        let s = sigmoid(&Array::vector(vec![-3.0, 0.0, 3.0]));
        assert_eq!(s.data()[1], 0.5);
        assert!((s.data()[0] + s.data()[2] - 1.0).abs() < 1e-15);
    }
}
