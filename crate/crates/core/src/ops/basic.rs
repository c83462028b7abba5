//! Elementwise, reduction, reshaping and dense linear-algebra ops.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Real, Tensor};

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Split `shape` around `dim` into (outer, extent, inner).
pub(crate) fn split_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    (numel(&shape[..dim]), shape[dim], numel(&shape[dim + 1..]))
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.record("add", out, &[a, b], Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())]))
    }

    /// Sum of any number of same-shaped inputs.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        let mut data = self.value(first).data().to_vec();
        for &x in rest {
            same_shape(self, first, x, "add_n")?;
            data.iter_mut().zip(self.value(x).data()).for_each(|(a, &b)| *a += b);
        }
        let out = Tensor::new(self.shape(first), data)?;
        let n = xs.len();
        self.record("add_n", out, xs, Box::new(move |c| (0..n).map(|_| Some(c.grad.to_vec())).collect()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.record(
            "sub",
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.iter().map(|&g| -g).collect())]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.record(
            "mul",
            out,
            &[a, b],
            Box::new(|c| {
                let (a, b) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    c.needs[0].then(|| c.grad.iter().zip(b).map(|(&g, &y)| g * y).collect()),
                    c.needs[1].then(|| c.grad.iter().zip(a).map(|(&g, &x)| g * x).collect()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64_lossy(s);
        let out = self.value(a).map(|v| v * s);
        self.record("scale", out, &[a], Box::new(move |c| vec![Some(c.grad.iter().map(|&g| g * s).collect())]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let n = self.value(a).len();
        self.record("sum", out, &[a], Box::new(move |c| vec![Some(vec![c.grad[0]; n])]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.record(
            "relu",
            out,
            &[a],
            Box::new(|c| {
                let x = c.inputs[0].data();
                vec![Some(c.grad.iter().zip(x).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect())]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record(
            "sigmoid",
            out,
            &[a],
            Box::new(|c| {
                let y = c.output.data();
                vec![Some(c.grad.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect())]
            }),
        )
    }

    /// Numerically stable softmax along `dim`.
    pub fn softmax(&mut self, a: Var, dim: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if dim >= shape.len() {
            return Err(Error::InvalidArgument(format!("softmax dim {dim} for shape {shape:?}")));
        }
        let out = softmax_forward(self.value(a), dim);
        self.record(
            "softmax",
            out,
            &[a],
            Box::new(move |c| {
                let (outer, n, inner) = split_dim(&shape, dim);
                let y = c.output.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: T = (0..n).map(|k| c.grad[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..n {
                            let j = base + k * inner;
                            dx[j] = y[j] * (c.grad[j] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.record("reshape", out, &[a], Box::new(|c| vec![Some(c.grad.to_vec())]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let map = permute_map(&shape, perm);
        let src = self.value(a).data();
        let data: Vec<T> = map.iter().map(|&s| src[s]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::new(&out_shape, data)?;
        self.record(
            "permute",
            out,
            &[a],
            Box::new(move |c| {
                let mut dx = vec![T::zero(); c.grad.len()];
                for (o, &s) in map.iter().enumerate() {
                    dx[s] = c.grad[o];
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenate along axis 0; all trailing extents must agree.
    pub fn concat0(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat0: {:?} vs trailing {:?}", s, tail)));
            }
            lead += s[0];
            lens.push(self.value(x).len());
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        self.record(
            "concat0",
            out,
            xs,
            Box::new(move |c| {
                let mut off = 0;
                lens.iter()
                    .map(|&n| {
                        let g = c.grad[off..off + n].to_vec();
                        off += n;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    /// `a[M,K] · b[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        crate::gemm::gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        self.record(
            "matmul",
            out,
            &[a, b],
            Box::new(move |c| {
                let (av, bv) = (c.inputs[0].data(), c.inputs[1].data());
                let da = c.needs[0].then(|| {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    crate::gemm::gemm_nt_acc(m, n, k, c.grad, bv, &mut da);
                    da
                });
                let db = c.needs[1].then(|| {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    crate::gemm::gemm_tn(k, m, n, av, c.grad, &mut db);
                    db
                });
                vec![da, db]
            }),
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::Shape(format!("transpose2d of {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    /// Row-wise affine map: `x[n,in] · wᵀ + b` with `w[out,in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape(format!("linear x{sx:?} w{sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::Shape(format!("linear bias {:?} for {} outputs", self.shape(b), sw[0])));
            }
        }
        let wt = self.transpose2d(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// `y[i, j] = x[i, j] + b[j]` for 2-D `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(b) != [s[1]] {
            return Err(Error::Shape(format!("add_row_bias {s:?} + {:?}", self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(s[1]) {
            row.iter_mut().zip(&bv).for_each(|(v, &b)| *v += b);
        }
        let out = Tensor::new(&s, data)?;
        let cols = s[1];
        self.record(
            "add_row_bias",
            out,
            &[x, b],
            Box::new(move |c| {
                let db = c.needs[1].then(|| {
                    let mut db = vec![T::zero(); cols];
                    for row in c.grad.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    db
                });
                vec![Some(c.grad.to_vec()), db]
            }),
        )
    }

    /// Per-channel affine on axis 0: `y[c, ...] = x[c, ...] * gamma[c] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ch = s[0];
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::Shape(format!("channel_affine on {s:?}")));
        }
        let inner = numel(&s[1..]);
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut data = self.value(x).data().to_vec();
        for (ci, chunk) in data.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * gv[ci] + bv[ci]);
        }
        let out = Tensor::new(&s, data)?;
        self.record(
            "channel_affine",
            out,
            &[x, gamma, beta],
            Box::new(move |c| {
                let (xv, gv) = (c.inputs[0].data(), c.inputs[1].data());
                let dx = c.needs[0].then(|| {
                    let mut dx = c.grad.to_vec();
                    for (ci, chunk) in dx.chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|d| *d *= gv[ci]);
                    }
                    dx
                });
                let mut dg = vec![T::zero(); ch];
                let mut db = vec![T::zero(); ch];
                for ci in 0..ch {
                    let r = ci * inner..(ci + 1) * inner;
                    for (g, x) in c.grad[r.clone()].iter().zip(&xv[r]) {
                        dg[ci] += *g * *x;
                        db[ci] += *g;
                    }
                }
                vec![dx, Some(dg), Some(db)]
            }),
        )
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_forward<T: Real>(x: &Tensor<T>, dim: usize) -> Tensor<T> {
    let (outer, n, inner) = split_dim(x.shape(), dim);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let m = (0..n).map(|k| src[base + k * inner]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..n {
                let e = (src[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                z += e;
            }
            for k in 0..n {
                out[base + k * inner] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("softmax preserves shape")
}

/// For each output flat index, the source flat index under `perm`.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
