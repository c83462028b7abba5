//! 2-D and 3-D cross-correlation with zero padding, stride and groups.
//!
//! Both are lowered to one 3-spatial-dim kernel: a 2-D conv is a 3-D conv
//! whose first spatial extent and kernel extent are 1. Per group the input is
//! unfolded to columns ordered `(channel, k0, k1, k2)` and multiplied by the
//! weight rows, so every output sums its taps in that order.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride-1 conv whose output extents equal its input extents.
    pub fn same(kernel: &[usize]) -> Self {
        Self { kernel: kernel.to_vec(), stride: 1, padding: kernel.iter().map(|k| k / 2).collect(), groups: 1 }
    }

    /// Stride-2 conv with `k/2` padding: halves even extents.
    pub fn down(kernel: &[usize]) -> Self {
        Self { stride: 2, ..Self::same(kernel) }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn cube(k: usize) -> Self {
        Self::same(&[k, k, k])
    }

    pub fn square(k: usize) -> Self {
        Self::same(&[k, k])
    }

    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        input
            .iter()
            .zip(&self.kernel)
            .zip(&self.padding)
            .map(|((&s, &k), &p)| {
                if s + 2 * p < k {
                    Err(Error::Shape(format!("extent {s} with padding {p} smaller than kernel {k}")))
                } else {
                    Ok((s + 2 * p - k) / self.stride + 1)
                }
            })
            .collect()
    }

    fn validate(&self, spatial: usize, in_ch: usize, w_shape: &[usize]) -> Result<()> {
        if self.kernel.len() != spatial || self.padding.len() != spatial {
            return Err(Error::Shape(format!("conv spec {self:?} for {spatial} spatial dims")));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!("kernel extents must be odd, got {:?}", self.kernel)));
        }
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument("stride and groups must be positive".into()));
        }
        let out_ch = w_shape[0];
        if in_ch % self.groups != 0 || out_ch % self.groups != 0 {
            return Err(Error::Shape(format!("groups {} must divide {in_ch} and {out_ch}", self.groups)));
        }
        if w_shape.len() != spatial + 2 || w_shape[1] != in_ch / self.groups || w_shape[2..] != self.kernel[..] {
            return Err(Error::Shape(format!(
                "weight {w_shape:?} incompatible with {in_ch} input channels and spec {self:?}"
            )));
        }
        Ok(())
    }
}

/// Geometry of one lowered conv.
#[derive(Clone, Debug)]
struct Geometry {
    in_ch: usize,
    out_ch: usize,
    groups: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    pad: [usize; 3],
    stride: usize,
}

impl Geometry {
    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }
    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }
    fn kvol(&self) -> usize {
        self.k.iter().product()
    }
    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }
    fn rows(&self) -> usize {
        self.in_per_group() * self.kvol()
    }

    /// Source index along axis `ax` for output `o` and tap `k`, if inside.
    #[inline]
    fn src(&self, ax: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad[ax] as isize;
        (i >= 0 && (i as usize) < self.inp[ax]).then_some(i as usize)
    }

    /// Per axis and tap: the source index of every output position, or
    /// `usize::MAX` where the tap falls into padding.
    fn tap_tables(&self) -> [Vec<Vec<usize>>; 3] {
        std::array::from_fn(|ax| {
            (0..self.k[ax])
                .map(|k| (0..self.out[ax]).map(|o| self.src(ax, o, k).unwrap_or(usize::MAX)).collect())
                .collect()
        })
    }

    /// Visit every (column row, output run, input run) of group `group`:
    /// `f(row, out_start, in_start, len)` for runs along the last axis that
    /// are inside the input; positions in padding are never visited.
    fn for_each_run(&self, tables: &[Vec<Vec<usize>>; 3], mut f: impl FnMut(usize, usize, usize, usize)) {
        let [o0, o1, o2] = self.out;
        let [k0, k1, k2] = self.k;
        let [_, i1, i2] = self.inp;
        for cl in 0..self.in_per_group() {
            let plane = cl * self.in_vol();
            for a in 0..k0 {
                for b in 0..k1 {
                    for c in 0..k2 {
                        let row = (cl * self.kvol()) + (a * k1 + b) * k2 + c;
                        let tz = &tables[2][c];
                        let lo = tz.iter().position(|&v| v != usize::MAX).unwrap_or(o2);
                        let hi = tz.iter().rposition(|&v| v != usize::MAX).map_or(lo, |p| p + 1);
                        for x in 0..o0 {
                            let sx = tables[0][a][x];
                            if sx == usize::MAX {
                                continue;
                            }
                            for y in 0..o1 {
                                let sy = tables[1][b][y];
                                if sy == usize::MAX {
                                    continue;
                                }
                                let base_out = (x * o1 + y) * o2;
                                let base_in = plane + (sx * i1 + sy) * i2;
                                if self.stride == 1 {
                                    if hi > lo {
                                        f(row, base_out + lo, base_in + tz[lo], hi - lo);
                                    }
                                } else {
                                    for (z, &sz) in tz.iter().enumerate() {
                                        if sz != usize::MAX {
                                            f(row, base_out + z, base_in + sz, 1);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fills the visited runs of `col`. Every group visits the same runs, so a
    /// buffer zeroed once keeps its padding entries at zero across groups.
    fn im2col<T: Real>(&self, input: &[T], group: usize, tables: &[Vec<Vec<usize>>; 3], col: &mut [T]) {
        let nout = self.out_vol();
        let input = &input[group * self.in_per_group() * self.in_vol()..(group + 1) * self.in_per_group() * self.in_vol()];
        self.for_each_run(tables, |row, o, i, len| {
            col[row * nout + o..row * nout + o + len].copy_from_slice(&input[i..i + len]);
        });
    }

    fn col2im<T: Real>(&self, col: &[T], group: usize, tables: &[Vec<Vec<usize>>; 3], grad_in: &mut [T]) {
        let nout = self.out_vol();
        let span = self.in_per_group() * self.in_vol();
        let grad_in = &mut grad_in[group * span..(group + 1) * span];
        self.for_each_run(tables, |row, o, i, len| {
            let src = &col[row * nout + o..row * nout + o + len];
            grad_in[i..i + len].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        });
    }

    fn forward<T: Real>(&self, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let nout = self.out_vol();
        let (cog, rows) = (self.out_per_group(), self.rows());
        let mut out = vec![T::zero(); self.out_ch * nout];
        let mut col = vec![T::zero(); rows * nout];
        let tables = self.tap_tables();
        for g in 0..self.groups {
            self.im2col(input, g, &tables, &mut col);
            let w = &weight[g * cog * rows..(g + 1) * cog * rows];
            gemm::gemm_acc(cog, rows, nout, w, &col, &mut out[g * cog * nout..(g + 1) * cog * nout]);
        }
        if let Some(b) = bias {
            for (co, chunk) in out.chunks_mut(nout).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[co]);
            }
        }
        out
    }

    fn backward<T: Real>(
        &self,
        grad: &[T],
        input: &[T],
        weight: &[T],
        need_input: bool,
        need_weight: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let nout = self.out_vol();
        let (cog, rows) = (self.out_per_group(), self.rows());
        let mut d_in = need_input.then(|| vec![T::zero(); self.in_ch * self.in_vol()]);
        let mut d_w = need_weight.then(|| vec![T::zero(); weight.len()]);
        let mut col = vec![T::zero(); rows * nout];
        let mut dcol = if need_input { vec![T::zero(); rows * nout] } else { Vec::new() };
        let tables = self.tap_tables();
        for g in 0..self.groups {
            let gg = &grad[g * cog * nout..(g + 1) * cog * nout];
            let w = &weight[g * cog * rows..(g + 1) * cog * rows];
            if let Some(dw) = d_w.as_mut() {
                self.im2col(input, g, &tables, &mut col);
                gemm::gemm_nt_acc(cog, nout, rows, gg, &col, &mut dw[g * cog * rows..(g + 1) * cog * rows]);
            }
            if let Some(di) = d_in.as_mut() {
                gemm::gemm_tn(rows, cog, nout, w, gg, &mut dcol);
                self.col2im(&dcol, g, &tables, di);
            }
        }
        (d_in, d_w)
    }
}

impl<T: Real> Graph<T> {
    /// `input[Cin,H,W]`, `weight[Cout,Cin/groups,kh,kw]`, optional `bias[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.conv_impl(input, weight, bias, spec, 2)
    }

    /// `input[Cin,X,Y,Z]`, `weight[Cout,Cin/groups,kx,ky,kz]`, optional `bias[Cout]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.conv_impl(input, weight, bias, spec, 3)
    }

    fn conv_impl(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec, spatial: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        if in_shape.len() != spatial + 1 {
            return Err(Error::Shape(format!("conv{spatial}d input {in_shape:?}")));
        }
        if w_shape.len() != spatial + 2 {
            return Err(Error::Shape(format!("conv{spatial}d weight {w_shape:?}")));
        }
        spec.validate(spatial, in_shape[0], &w_shape)?;
        if let Some(b) = bias {
            if self.shape(b) != [w_shape[0]] {
                return Err(Error::Shape(format!("conv bias {:?} for {} outputs", self.shape(b), w_shape[0])));
            }
        }
        let out_sp = spec.output_extents(&in_shape[1..])?;
        // 2-D convs get a leading unit axis so contiguous runs follow W
        let pad3 = |v: &[usize], fill: usize| -> [usize; 3] {
            let mut a = [fill; 3];
            a[3 - v.len()..].copy_from_slice(v);
            a
        };
        let geo = Geometry {
            in_ch: in_shape[0],
            out_ch: w_shape[0],
            groups: spec.groups,
            inp: pad3(&in_shape[1..], 1),
            out: pad3(&out_sp, 1),
            k: pad3(&spec.kernel, 1),
            pad: pad3(&spec.padding, 0),
            stride: spec.stride,
        };
        let data = geo.forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut out_shape = vec![w_shape[0]];
        out_shape.extend_from_slice(&out_sp);
        let out = Tensor::new(&out_shape, data)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let op = if spatial == 2 { "conv2d" } else { "conv3d" };
        self.record(
            op,
            out,
            &parents,
            Box::new(move |c| {
                let (di, dw) =
                    geo.backward(c.grad, c.inputs[0].data(), c.inputs[1].data(), c.needs[0], c.needs[1]);
                let mut grads = vec![di, dw];
                if c.inputs.len() == 3 {
                    let nout = geo.out_vol();
                    grads.push(Some(c.grad.chunks(nout).map(|ch| ch.iter().copied().sum()).collect()));
                }
                grads
            }),
        )
    }
}
