//! Forward definitions and vector-Jacobian products of the primitive set.

use rayon::prelude::*;

use super::{Real, Tensor, TensorError};

/// Work (multiply-adds) above which matrix kernels split rows across threads.
const PAR_THRESHOLD: usize = 1 << 20;

/// Primitive operation recorded on a graph node. Non-differentiable operands
/// (masks, indices, noise draws, constants) live inside the variant so that a
/// graph can be replayed with identical frozen values.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[n,r,c] x [n,c] -> [n,r]`, one matrix-vector product per leading index.
    BatchedMatVec,
    Transpose,
    Add,
    Sub,
    Mul,
    /// `[m,n] + [n]`, row vector added to every row.
    AddRow,
    Scale(T),
    Offset(T),
    /// Concatenation along the leading axis.
    Concat,
    GatherRows(Vec<usize>),
    Tanh,
    LeakyRelu(T),
    Exp,
    Log,
    Softplus,
    /// Softmax over column groups of each row. `ends` holds the exclusive end of
    /// each group; `blocked` (row-major, same size as the input) excludes entries
    /// before normalization. Blocked entries are exactly zero and a group with
    /// every entry blocked is all zeros.
    MaskedSoftmax {
        ends: Vec<usize>,
        blocked: Vec<bool>,
    },
    LogSoftmax,
    /// Picks `x[i, idx[i]]` from each row.
    PickCols(Vec<usize>),
    /// Row-wise Euclidean distance.
    Distance,
    /// Row-wise squared Euclidean distance.
    SquaredDistance,
    /// `mu + exp(logvar / 2) * noise` with frozen noise. `mu` and `logvar` are
    /// either shaped like the noise or a single row broadcast over its rows.
    Reparameterize(Tensor<T>),
    Sum,
    Mean,
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::BatchedMatVec => "batched_matvec",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Concat => "concat",
            Op::GatherRows(_) => "gather_rows",
            Op::Tanh => "tanh",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LogSoftmax => "log_softmax",
            Op::PickCols(_) => "pick_cols",
            Op::Distance => "distance",
            Op::SquaredDistance => "squared_distance",
            Op::Reparameterize(_) => "reparameterize",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        reason: reason.into(),
    }
}

/// Views a rank-1 or rank-2 shape as `(rows, cols)`; rank 1 is a single row.
fn as_rows(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        _ => Err(invalid(
            op,
            format!("expected rank 1 or 2, got shape {shape:?}"),
        )),
    }
}

/// Output shape of a row reduction: scalar for a vector, `[rows]` for a matrix.
fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        Vec::new()
    } else {
        vec![shape[0]]
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(invalid(
            op,
            format!("expected a matrix, got shape {shape:?}"),
        )),
    }
}

fn arity(op: &'static str, inputs: usize, expected: usize) -> Result<(), TensorError> {
    if inputs != expected {
        return Err(invalid(
            op,
            format!("expected {expected} inputs, got {inputs}"),
        ));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `a[m,k] * b[k,n]`
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m,k] * b[n,k]^T`
fn mm_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, ov) in o.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *ov = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m,k]^T * b[m,n]`
fn mm_at<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    let row = |(p, o): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn elementwise<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn validate_groups(op: &'static str, ends: &[usize], cols: usize) -> Result<(), TensorError> {
    let mut prev = 0;
    for &e in ends {
        if e <= prev {
            return Err(invalid(
                op,
                format!("group ends must be strictly increasing, got {ends:?}"),
            ));
        }
        prev = e;
    }
    if prev != cols {
        return Err(invalid(
            op,
            format!("group ends {ends:?} must finish at the row length {cols}"),
        ));
    }
    Ok(())
}

/// Forward evaluation of `op` on concrete input values.
pub fn forward<T: Real>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let name = op.name();
    match op {
        Op::Leaf => Err(invalid(name, "leaves have no forward rule")),
        Op::MatMul => {
            arity(name, inputs.len(), 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = matrix_dims(name, a.shape())?;
            let (k2, n) = matrix_dims(name, b.shape())?;
            if k != k2 {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            Ok(Tensor::from_parts(
                vec![m, n],
                mm(a.data(), b.data(), m, k, n),
            ))
        }
        Op::BatchedMatVec => {
            arity(name, inputs.len(), 2)?;
            let (u, v) = (inputs[0], inputs[1]);
            let (n, r, c) = match u.shape() {
                [n, r, c] => (*n, *r, *c),
                s => {
                    return Err(invalid(
                        name,
                        format!("expected rank-3 matrices, got {s:?}"),
                    ))
                }
            };
            if v.shape() != [n, c] {
                return Err(shape_err(name, u.shape(), v.shape()));
            }
            let mut out = vec![T::zero(); n * r];
            for b in 0..n {
                let ub = &u.data()[b * r * c..(b + 1) * r * c];
                let vb = &v.data()[b * c..(b + 1) * c];
                for i in 0..r {
                    out[b * r + i] = ub[i * c..(i + 1) * c]
                        .iter()
                        .zip(vb)
                        .map(|(&x, &y)| x * y)
                        .sum();
                }
            }
            Ok(Tensor::from_parts(vec![n, r], out))
        }
        Op::Transpose => {
            arity(name, inputs.len(), 1)?;
            let (r, c) = matrix_dims(name, inputs[0].shape())?;
            Ok(Tensor::from_parts(
                vec![c, r],
                transpose(inputs[0].data(), r, c),
            ))
        }
        Op::Add | Op::Sub | Op::Mul => {
            arity(name, inputs.len(), 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            let f: fn(T, T) -> T = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::AddRow => {
            arity(name, inputs.len(), 2)?;
            let (a, row) = (inputs[0], inputs[1]);
            let (_, c) = matrix_dims(name, a.shape())?;
            if row.shape() != [c] {
                return Err(shape_err(name, a.shape(), row.shape()));
            }
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(c) {
                for (x, &b) in chunk.iter_mut().zip(row.data()) {
                    *x += b;
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Scale(s) => {
            arity(name, inputs.len(), 1)?;
            let s = *s;
            Ok(elementwise(inputs[0], |x| x * s))
        }
        Op::Offset(c) => {
            arity(name, inputs.len(), 1)?;
            let c = *c;
            Ok(elementwise(inputs[0], |x| x + c))
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(invalid(name, "nothing to concatenate"));
            }
            let first = inputs[0].shape();
            if first.is_empty() {
                return Err(invalid(name, "cannot concatenate scalars"));
            }
            let mut lead = 0;
            let mut data = Vec::new();
            for t in inputs {
                if t.shape().len() != first.len() || t.shape()[1..] != first[1..] {
                    return Err(shape_err(name, first, t.shape()));
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = first.to_vec();
            shape[0] = lead;
            Ok(Tensor::from_parts(shape, data))
        }
        Op::GatherRows(idx) => {
            arity(name, inputs.len(), 1)?;
            let x = inputs[0];
            let (r, c) = matrix_dims(name, x.shape())?;
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return Err(invalid(name, format!("row {i} out of range for {r} rows")));
                }
                data.extend_from_slice(x.row(i));
            }
            Ok(Tensor::from_parts(vec![idx.len(), c], data))
        }
        Op::Tanh => {
            arity(name, inputs.len(), 1)?;
            Ok(elementwise(inputs[0], |x| x.tanh()))
        }
        Op::LeakyRelu(slope) => {
            arity(name, inputs.len(), 1)?;
            let s = *slope;
            Ok(elementwise(inputs[0], |x| {
                if x > T::zero() {
                    x
                } else {
                    x * s
                }
            }))
        }
        Op::Exp => {
            arity(name, inputs.len(), 1)?;
            Ok(elementwise(inputs[0], |x| x.exp()))
        }
        Op::Log => {
            arity(name, inputs.len(), 1)?;
            Ok(elementwise(inputs[0], |x| x.ln()))
        }
        Op::Softplus => {
            arity(name, inputs.len(), 1)?;
            Ok(elementwise(inputs[0], softplus))
        }
        Op::MaskedSoftmax { ends, blocked } => {
            arity(name, inputs.len(), 1)?;
            let x = inputs[0];
            let (r, c) = as_rows(name, x.shape())?;
            validate_groups(name, ends, c)?;
            if blocked.len() != x.len() {
                return Err(invalid(
                    name,
                    format!("mask has {} entries for {} logits", blocked.len(), x.len()),
                ));
            }
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                let mut start = 0;
                for &end in ends {
                    let range = i * c + start..i * c + end;
                    let open = || range.clone().filter(|&j| !blocked[j]);
                    if let Some(max) = open().map(|j| x.data()[j]).reduce(T::max) {
                        let mut total = T::zero();
                        for j in open() {
                            let e = (x.data()[j] - max).exp();
                            out[j] = e;
                            total += e;
                        }
                        for j in open() {
                            out[j] = out[j] / total;
                        }
                    }
                    start = end;
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::LogSoftmax => {
            arity(name, inputs.len(), 1)?;
            let x = inputs[0];
            let (r, c) = as_rows(name, x.shape())?;
            if c == 0 {
                return Err(invalid(name, "empty rows"));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c).take(r) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
        Op::PickCols(idx) => {
            arity(name, inputs.len(), 1)?;
            let x = inputs[0];
            let (r, c) = as_rows(name, x.shape())?;
            if idx.len() != r {
                return Err(invalid(name, format!("{} indices for {r} rows", idx.len())));
            }
            let mut out = Vec::with_capacity(r);
            for (i, &j) in idx.iter().enumerate() {
                if j >= c {
                    return Err(invalid(
                        name,
                        format!("column {j} out of range for {c} columns"),
                    ));
                }
                out.push(x.data()[i * c + j]);
            }
            Ok(Tensor::from_parts(reduced_shape(x.shape()), out))
        }
        Op::Distance | Op::SquaredDistance => {
            arity(name, inputs.len(), 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            let (_, c) = as_rows(name, a.shape())?;
            let squared = matches!(op, Op::SquaredDistance);
            let out = a
                .data()
                .chunks(c.max(1))
                .zip(b.data().chunks(c.max(1)))
                .map(|(x, y)| {
                    let s: T = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
                    if squared {
                        s
                    } else {
                        s.sqrt()
                    }
                })
                .collect();
            Ok(Tensor::from_parts(reduced_shape(a.shape()), out))
        }
        Op::Reparameterize(noise) => {
            arity(name, inputs.len(), 2)?;
            let (mu, logvar) = (inputs[0], inputs[1]);
            if mu.shape() != logvar.shape() {
                return Err(shape_err(name, mu.shape(), logvar.shape()));
            }
            let (_, c) = as_rows(name, noise.shape())?;
            let broadcast = mu.shape() == [c] && noise.rank() == 2;
            if !broadcast && mu.shape() != noise.shape() {
                return Err(shape_err(name, mu.shape(), noise.shape()));
            }
            let half = T::lit(0.5);
            let out = noise
                .data()
                .iter()
                .enumerate()
                .map(|(i, &eps)| {
                    let j = if broadcast { i % c } else { i };
                    mu.data()[j] + (half * logvar.data()[j]).exp() * eps
                })
                .collect();
            Ok(Tensor::from_parts(noise.shape().to_vec(), out))
        }
        Op::Sum | Op::Mean => {
            arity(name, inputs.len(), 1)?;
            let x = inputs[0];
            let s: T = x.data().iter().copied().sum();
            let v = if matches!(op, Op::Mean) {
                if x.is_empty() {
                    return Err(invalid(name, "mean of an empty tensor"));
                }
                s / T::lit(x.len() as f64)
            } else {
                s
            };
            Ok(Tensor::scalar(v))
        }
    }
}

/// Gradients of the inputs of `op` given the upstream gradient of its output.
/// Entries are `None` where `needs[i]` is false.
pub fn backward<T: Real>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let mut res: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    let g = grad.data();
    let like = |t: &Tensor<T>, data: Vec<T>| Tensor::from_parts(t.shape().to_vec(), data);
    match op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if needs[0] {
                res[0] = Some(like(a, mm_bt(g, b.data(), m, n, k)));
            }
            if needs[1] {
                res[1] = Some(like(b, mm_at(a.data(), g, m, k, n)));
            }
        }
        Op::BatchedMatVec => {
            let (u, v) = (inputs[0], inputs[1]);
            let (n, r, c) = (u.shape()[0], u.shape()[1], u.shape()[2]);
            if needs[0] {
                let mut du = vec![T::zero(); n * r * c];
                for b in 0..n {
                    for i in 0..r {
                        let gi = g[b * r + i];
                        let dst = &mut du[(b * r + i) * c..(b * r + i + 1) * c];
                        for (d, &vv) in dst.iter_mut().zip(&v.data()[b * c..(b + 1) * c]) {
                            *d = gi * vv;
                        }
                    }
                }
                res[0] = Some(like(u, du));
            }
            if needs[1] {
                let mut dv = vec![T::zero(); n * c];
                for b in 0..n {
                    let ub = &u.data()[b * r * c..(b + 1) * r * c];
                    let dst = &mut dv[b * c..(b + 1) * c];
                    for i in 0..r {
                        let gi = g[b * r + i];
                        for (d, &uu) in dst.iter_mut().zip(&ub[i * c..(i + 1) * c]) {
                            *d += gi * uu;
                        }
                    }
                }
                res[1] = Some(like(v, dv));
            }
        }
        Op::Transpose => {
            if needs[0] {
                let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                res[0] = Some(like(inputs[0], transpose(g, c, r)));
            }
        }
        Op::Add => {
            if needs[0] {
                res[0] = Some(grad.clone());
            }
            if needs[1] {
                res[1] = Some(grad.clone());
            }
        }
        Op::Sub => {
            if needs[0] {
                res[0] = Some(grad.clone());
            }
            if needs[1] {
                res[1] = Some(grad.map(|x| -x));
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                res[0] = Some(like(
                    a,
                    g.iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
                ));
            }
            if needs[1] {
                res[1] = Some(like(
                    b,
                    g.iter().zip(a.data()).map(|(&x, &y)| x * y).collect(),
                ));
            }
        }
        Op::AddRow => {
            if needs[0] {
                res[0] = Some(grad.clone());
            }
            if needs[1] {
                let c = inputs[1].len();
                let mut db = vec![T::zero(); c];
                for chunk in g.chunks(c) {
                    for (d, &x) in db.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                res[1] = Some(like(inputs[1], db));
            }
        }
        Op::Scale(s) => {
            if needs[0] {
                let s = *s;
                res[0] = Some(grad.map(|x| x * s));
            }
        }
        Op::Offset(_) => {
            if needs[0] {
                res[0] = Some(grad.clone());
            }
        }
        Op::Concat => {
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let n = t.len();
                if needs[i] {
                    res[i] = Some(like(t, g[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::GatherRows(idx) => {
            if needs[0] {
                let x = inputs[0];
                let c = x.shape()[1];
                let mut dx = vec![T::zero(); x.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (d, &v) in dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                    {
                        *d += v;
                    }
                }
                res[0] = Some(like(x, dx));
            }
        }
        Op::Tanh => {
            if needs[0] {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                res[0] = Some(like(inputs[0], d));
            }
        }
        Op::LeakyRelu(slope) => {
            if needs[0] {
                let s = *slope;
                let d = g
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { gv * s })
                    .collect();
                res[0] = Some(like(inputs[0], d));
            }
        }
        Op::Exp => {
            if needs[0] {
                let d = g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                res[0] = Some(like(inputs[0], d));
            }
        }
        Op::Log => {
            if needs[0] {
                let d = g
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                res[0] = Some(like(inputs[0], d));
            }
        }
        Op::Softplus => {
            if needs[0] {
                let d = g
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(&gv, &x)| gv * sigmoid(x))
                    .collect();
                res[0] = Some(like(inputs[0], d));
            }
        }
        Op::MaskedSoftmax { ends, .. } => {
            if needs[0] {
                let (r, c) = as_rows("masked_softmax", out.shape()).expect("validated forward");
                let y = out.data();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let mut start = 0;
                    for &end in ends {
                        let range = i * c + start..i * c + end;
                        let dot: T = range.clone().map(|j| y[j] * g[j]).sum();
                        for j in range {
                            d[j] = y[j] * (g[j] - dot);
                        }
                        start = end;
                    }
                }
                res[0] = Some(like(inputs[0], d));
            }
        }
        Op::LogSoftmax => {
            if needs[0] {
                let (_, c) = as_rows("log_softmax", out.shape()).expect("validated forward");
                let mut d = vec![T::zero(); out.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - y.exp() * total;
                    }
                }
                res[0] = Some(like(inputs[0], d));
            }
        }
        Op::PickCols(idx) => {
            if needs[0] {
                let x = inputs[0];
                let (_, c) = as_rows("pick_cols", x.shape()).expect("validated forward");
                let mut d = vec![T::zero(); x.len()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] = g[i];
                }
                res[0] = Some(like(x, d));
            }
        }
        Op::Distance | Op::SquaredDistance => {
            let (a, b) = (inputs[0], inputs[1]);
            let (_, c) = as_rows("distance", a.shape()).expect("validated forward");
            let squared = matches!(op, Op::SquaredDistance);
            let mut da = vec![T::zero(); a.len()];
            for (row, (&gv, &dist)) in g.iter().zip(out.data()).enumerate() {
                // the distance is not differentiable at coincident points; use 0
                let coef = if squared {
                    gv * T::lit(2.0)
                } else if dist > T::zero() {
                    gv / dist
                } else {
                    T::zero()
                };
                let span = row * c..(row + 1) * c;
                for ((d, &x), &y) in da[span.clone()]
                    .iter_mut()
                    .zip(&a.data()[span.clone()])
                    .zip(&b.data()[span])
                {
                    *d = coef * (x - y);
                }
            }
            if needs[1] {
                res[1] = Some(like(b, da.iter().map(|&x| -x).collect()));
            }
            if needs[0] {
                res[0] = Some(like(a, da));
            }
        }
        Op::Reparameterize(noise) => {
            let (mu, logvar) = (inputs[0], inputs[1]);
            let n = mu.len();
            let half = T::lit(0.5);
            let mut dmu = vec![T::zero(); n];
            let mut dlv = vec![T::zero(); n];
            for (i, (&gv, &eps)) in g.iter().zip(noise.data()).enumerate() {
                let j = i % n;
                dmu[j] += gv;
                dlv[j] += gv * eps * half * (half * logvar.data()[j]).exp();
            }
            if needs[0] {
                res[0] = Some(like(mu, dmu));
            }
            if needs[1] {
                res[1] = Some(like(logvar, dlv));
            }
        }
        Op::Sum | Op::Mean => {
            if needs[0] {
                let x = inputs[0];
                let v = if matches!(op, Op::Mean) {
                    g[0] / T::lit(x.len() as f64)
                } else {
                    g[0]
                };
                res[0] = Some(Tensor::full(x.shape(), v));
            }
        }
    }
    res
}
