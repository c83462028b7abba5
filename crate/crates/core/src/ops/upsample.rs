//! Trilinear upsampling with aligned corners.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per output index: (lower source index, upper source index, upper weight).
fn axis_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<T: Real> Graph<T> {
    /// `[C,X,Y,Z] -> [C,fX,fY,fZ]`; corner samples map onto corner samples.
    pub fn trilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("trilinear_upsample expects [C,X,Y,Z], got {s:?}")));
        }
        let (ch, inp) = (s[0], [s[1], s[2], s[3]]);
        let out = [inp[0] * factor, inp[1] * factor, inp[2] * factor];
        let tables: Vec<Vec<(usize, usize, T, T)>> = (0..3)
            .map(|a| {
                axis_table(inp[a], out[a])
                    .into_iter()
                    .map(|(lo, hi, w)| (lo, hi, T::from_f64_lossy(1.0 - w), T::from_f64_lossy(w)))
                    .collect()
            })
            .collect();
        let in_vol = inp[0] * inp[1] * inp[2];
        let out_vol = out[0] * out[1] * out[2];
        let idx = move |a: usize, b: usize, c: usize| (a * inp[1] + b) * inp[2] + c;

        // Visits every (output flat index, source flat index, weight) triple.
        let for_each_tap = {
            let tables = tables.clone();
            move |f: &mut dyn FnMut(usize, usize, T)| {
                let mut o = 0;
                for &(x0, x1, wx0, wx1) in &tables[0] {
                    for &(y0, y1, wy0, wy1) in &tables[1] {
                        for &(z0, z1, wz0, wz1) in &tables[2] {
                            for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                                for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                                    for (zi, wz) in [(z0, wz0), (z1, wz1)] {
                                        f(o, idx(xi, yi, zi), wx * wy * wz);
                                    }
                                }
                            }
                            o += 1;
                        }
                    }
                }
            }
        };

        let src = self.value(x).data();
        let mut data = vec![T::zero(); ch * out_vol];
        for c in 0..ch {
            let (si, so) = (&src[c * in_vol..(c + 1) * in_vol], &mut data[c * out_vol..(c + 1) * out_vol]);
            for_each_tap(&mut |o, i, w| so[o] += w * si[i]);
        }
        let out_t = Tensor::new(&[ch, out[0], out[1], out[2]], data)?;
        self.record(
            "trilinear_upsample",
            out_t,
            &[x],
            Box::new(move |cx| {
                let mut dx = vec![T::zero(); ch * in_vol];
                for c in 0..ch {
                    let g = &cx.grad[c * out_vol..(c + 1) * out_vol];
                    let d = &mut dx[c * in_vol..(c + 1) * in_vol];
                    for_each_tap(&mut |o, i, w| d[i] += w * g[o]);
                }
                vec![Some(dx)]
            }),
        )
    }
}
