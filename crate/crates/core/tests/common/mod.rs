#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use occ_core::decoder::{form_queries, ClassMasks, OccupancyPrediction};
use occ_core::loss::{loss_adapg, loss_depth, loss_occ, present_classes};
use occ_core::ops::softmax_forward;
use occ_core::view::{DepthBins, FrustumGrid, VoxelGridSpec};
use occ_core::{ConvSpec, Graph, Result, Tensor, Var};

/// Central-difference step.
pub const H: f64 = 1e-3;
/// Relative-error bound of the gradient checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 53];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rt(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

pub fn scaled(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, r)
}

/// Labels in `0..c` of length `n`.
pub fn labels(n: usize, c: usize, r: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| r.gen_range(0..c) as u8).collect()
}

/// `Σ y ⊙ w` with fixed pseudo-random weights, turning any output into a
/// scalar whose gradient exercises every output element.
pub fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut r = rng(0x5eed ^ shape.iter().product::<usize>() as u64);
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut r));
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Largest relative error between the tape gradient and central differences
/// over every element of every input.
pub fn grad_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars).expect("forward");
        g.value(y).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars).expect("forward");
    assert!(g.value(y).is_scalar(), "checked function must be scalar");
    g.backward(y).expect("backward");
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut xs = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + H;
            let fp = eval(&xs);
            xs[i].data_mut()[j] = x0 - H;
            let fm = eval(&xs);
            xs[i].data_mut()[j] = x0;
            let num = (fp - fm) / (2.0 * H);
            let ana = grads[i][j];
            worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(REL_FLOOR));
        }
    }
    worst
}

/// Probabilities whose per-row Lovasz errors are pairwise at least `gap`
/// apart, so a `±H` step never reorders them.
fn separated_errors(probs: &[f64], labels: &[u8], rows: &[usize], n: usize, gap: f64) -> bool {
    rows.iter().all(|&c| {
        let mut e: Vec<f64> = (0..n).map(|i| ((labels[i] as usize == c) as u8 as f64 - probs[c * n + i]).abs()).collect();
        e.sort_by(f64::total_cmp);
        e.windows(2).all(|w| w[1] - w[0] >= gap)
    })
}

fn conv(kernel: &[usize], stride: usize, padding: &[usize], groups: usize) -> ConvSpec {
    ConvSpec { kernel: kernel.to_vec(), stride, padding: padding.to_vec(), groups }
}

/// Four frustum points per camera landing on the 2×2×2 grid, some dropped.
fn toy_frustum(r: &mut ChaCha8Rng) -> (FrustumGrid, VoxelGridSpec) {
    let grid = VoxelGridSpec { min: [0.0; 3], max: [2.0; 3], voxel_size: [1.0; 3] };
    let bins = DepthBins { count: 2, min: 1.0, max: 3.0 };
    let (h, w) = (2, 3);
    let npts = bins.count * h * w;
    let voxel_index: Vec<Vec<Option<u32>>> = (0..2)
        .map(|_| (0..npts).map(|_| r.gen_bool(0.8).then(|| r.gen_range(0..8))).collect())
        .collect();
    let points = vec![vec![[0.0; 3]; npts]; 2];
    (FrustumGrid { bins, feat_height: h, feat_width: w, points, voxel_index }, grid)
}

pub type GradCase = (&'static str, fn(u64) -> f64);

/// Every differentiable op and composed loss, each as `seed -> max rel err`.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        ("add", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r), rt(&[3, 4], &mut r)], |g, x| {
                let y = g.add(x[0], x[1])?;
                project(g, y)
            })
        }),
        ("add_n", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 3], &mut r), rt(&[2, 3], &mut r), rt(&[2, 3], &mut r)], |g, x| {
                let y = g.add_n(x)?;
                project(g, y)
            })
        }),
        ("sub", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r), rt(&[3, 4], &mut r)], |g, x| {
                let y = g.sub(x[0], x[1])?;
                project(g, y)
            })
        }),
        ("mul", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r), rt(&[3, 4], &mut r)], |g, x| {
                let y = g.mul(x[0], x[1])?;
                project(g, y)
            })
        }),
        ("scale", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r)], |g, x| {
                let y = g.scale(x[0], -2.5)?;
                project(g, y)
            })
        }),
        ("sum", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r)], |g, x| {
                let y = g.mul(x[0], x[0])?;
                g.sum(y)
            })
        }),
        ("mean", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r)], |g, x| {
                let y = g.mul(x[0], x[0])?;
                g.mean(y)
            })
        }),
        ("relu", |s| {
            let mut r = rng(s);
            let x = rt(&[4, 5], &mut r).map(|v| v.signum() * (0.05 + 0.95 * v.abs()));
            grad_error(&[x], |g, x| {
                let y = g.relu(x[0])?;
                project(g, y)
            })
        }),
        ("sigmoid", |s| {
            let mut r = rng(s);
            grad_error(&[scaled(&[3, 4], -3.0, 3.0, &mut r)], |g, x| {
                let y = g.sigmoid(x[0])?;
                project(g, y)
            })
        }),
        ("softmax_inner_axis", |s| {
            let mut r = rng(s);
            grad_error(&[scaled(&[2, 3, 4], -2.0, 2.0, &mut r)], |g, x| {
                let y = g.softmax(x[0], 1)?;
                project(g, y)
            })
        }),
        ("softmax_last_axis", |s| {
            let mut r = rng(s);
            grad_error(&[scaled(&[3, 5], -2.0, 2.0, &mut r)], |g, x| {
                let y = g.softmax(x[0], 1)?;
                project(g, y)
            })
        }),
        ("reshape", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 6], &mut r)], |g, x| {
                let y = g.reshape(x[0], &[3, 4])?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("permute", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 3, 4], &mut r)], |g, x| {
                let y = g.permute(x[0], &[2, 0, 1])?;
                project(g, y)
            })
        }),
        ("concat0", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 3], &mut r), rt(&[1, 3], &mut r)], |g, x| {
                let y = g.concat0(x)?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("matmul", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r), rt(&[4, 2], &mut r)], |g, x| {
                let y = g.matmul(x[0], x[1])?;
                project(g, y)
            })
        }),
        ("transpose2d", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r)], |g, x| {
                let y = g.transpose2d(x[0])?;
                project(g, y)
            })
        }),
        ("linear", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r), rt(&[2, 4], &mut r), rt(&[2], &mut r)], |g, x| {
                let y = g.linear(x[0], x[1], Some(x[2]))?;
                let z = g.linear(x[0], x[1], None)?;
                let y = g.mul(y, z)?;
                project(g, y)
            })
        }),
        ("add_row_bias", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 4], &mut r), rt(&[4], &mut r)], |g, x| {
                let y = g.add_row_bias(x[0], x[1])?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("channel_affine", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 2, 2], &mut r), rt(&[3], &mut r), rt(&[3], &mut r)], |g, x| {
                let y = g.channel_affine(x[0], x[1], x[2])?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("conv2d_grouped_strided", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[4, 5, 6], &mut r), rt(&[4, 2, 3, 3], &mut r), rt(&[4], &mut r)], |g, x| {
                let y = g.conv2d(x[0], x[1], Some(x[2]), &conv(&[3, 3], 2, &[1, 1], 2))?;
                project(g, y)
            })
        }),
        ("conv2d_depthwise", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 6, 6], &mut r), rt(&[3, 1, 5, 5], &mut r)], |g, x| {
                let y = g.conv2d(x[0], x[1], None, &ConvSpec::square(5).with_groups(3))?;
                project(g, y)
            })
        }),
        ("conv3d", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 4, 3, 4], &mut r), rt(&[3, 2, 3, 3, 3], &mut r), rt(&[3], &mut r)], |g, x| {
                let y = g.conv3d(x[0], x[1], Some(x[2]), &ConvSpec::cube(3))?;
                project(g, y)
            })
        }),
        ("conv3d_strided", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 4, 4, 4], &mut r), rt(&[2, 2, 3, 3, 3], &mut r)], |g, x| {
                let y = g.conv3d(x[0], x[1], None, &ConvSpec::down(&[3, 3, 3]))?;
                project(g, y)
            })
        }),
        ("conv3d_pointwise", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 2, 2, 2], &mut r), rt(&[4, 3, 1, 1, 1], &mut r), rt(&[4], &mut r)], |g, x| {
                let y = g.conv3d(x[0], x[1], Some(x[2]), &ConvSpec::cube(1))?;
                project(g, y)
            })
        }),
        ("layer_norm_channels", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 2, 2], &mut r)], |g, x| {
                let y = g.layer_norm(x[0], &[0])?;
                project(g, y)
            })
        }),
        ("layer_norm_trailing_axes", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 3, 4], &mut r)], |g, x| {
                let y = g.layer_norm(x[0], &[1, 2])?;
                project(g, y)
            })
        }),
        ("trilinear_upsample_x2", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 2, 3, 2], &mut r)], |g, x| {
                let y = g.trilinear_upsample(x[0], 2)?;
                project(g, y)
            })
        }),
        ("trilinear_upsample_x3", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[1, 2, 2, 1], &mut r)], |g, x| {
                let y = g.trilinear_upsample(x[0], 3)?;
                project(g, y)
            })
        }),
        ("outer_lift", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 2, 2], &mut r), rt(&[4, 2, 2], &mut r)], |g, x| {
                let y = g.outer_lift(x[0], x[1])?;
                project(g, y)
            })
        }),
        ("lift", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[3, 2, 3], &mut r), scaled(&[4, 2, 3], -2.0, 2.0, &mut r)], |g, x| {
                let y = g.lift(x[0], x[1])?;
                project(g, y)
            })
        }),
        ("voxel_pool", |s| {
            let mut r = rng(s);
            let (frustum, grid) = toy_frustum(&mut r);
            let inputs = [rt(&[2, 2, 2, 3], &mut r), rt(&[2, 2, 2, 3], &mut r)];
            grad_error(&inputs, move |g, x| {
                let y = g.voxel_pool(x, &frustum, &grid)?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("bev_flatten", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[2, 3, 2, 4], &mut r)], |g, x| {
                let y = g.bev_flatten(x[0])?;
                project(g, y)
            })
        }),
        ("bev_to_voxel", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[8, 3, 2], &mut r)], |g, x| {
                let y = g.bev_to_voxel(x[0], 4)?;
                project(g, y)
            })
        }),
        ("adaptive_prototypes", |s| {
            let mut r = rng(s);
            let masks = ClassMasks::from_labels(labels(8, 3, &mut r), 4, [2, 2, 2]).unwrap();
            grad_error(&[rt(&[3, 2, 2, 2], &mut r)], move |g, x| {
                let y = g.adaptive_prototypes(x[0], &masks)?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("form_queries", |s| {
            let mut r = rng(s);
            grad_error(&[rt(&[4, 3], &mut r), rt(&[4, 3], &mut r)], |g, x| {
                let y = form_queries(g, x[0], x[1])?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            let targets = [Some(0), None, Some(3), Some(1), Some(3)];
            grad_error(&[scaled(&[4, 5], -2.0, 2.0, &mut r)], move |g, x| g.cross_entropy(x[0], &targets))
        }),
        ("lovasz_softmax", |s| {
            let mut sub = 0;
            loop {
                let mut r = rng(s + 1000 * sub);
                let probs = scaled(&[3, 6], 0.05, 0.95, &mut r);
                let lab = labels(6, 3, &mut r);
                let rows = present_classes(&lab, 3);
                if separated_errors(probs.data(), &lab, &rows, 6, 10.0 * H) {
                    return grad_error(&[probs], move |g, x| g.lovasz_softmax(x[0], &lab, &rows));
                }
                sub += 1;
            }
        }),
        ("soft_dice", |s| {
            let mut r = rng(s);
            let lab = labels(6, 3, &mut r);
            grad_error(&[scaled(&[3, 6], 0.05, 0.95, &mut r)], move |g, x| g.soft_dice(x[0], &lab, &[0, 2]))
        }),
        ("sigmoid_focal", |s| {
            let mut r = rng(s);
            let lab = labels(6, 3, &mut r);
            grad_error(&[scaled(&[3, 6], -2.0, 2.0, &mut r)], move |g, x| g.sigmoid_focal(x[0], &lab, &[0, 1, 2], 2.0))
        }),
        ("loss_depth", |s| {
            let mut r = rng(s);
            let targets: Vec<Vec<i16>> = (0..2).map(|_| (0..6).map(|_| r.gen_range(-1..5)).collect()).collect();
            let inputs = [scaled(&[5, 2, 3], -2.0, 2.0, &mut r), scaled(&[5, 2, 3], -2.0, 2.0, &mut r)];
            grad_error(&inputs, move |g, x| loss_depth(g, x, &targets))
        }),
        ("loss_adapg", |s| {
            let mut sub = 0;
            loop {
                let mut r = rng(s + 1000 * sub);
                let logits = scaled(&[3, 2, 2, 1], -2.0, 2.0, &mut r);
                let lab = labels(4, 3, &mut r);
                let probs = softmax_forward(&logits, 0);
                if separated_errors(probs.data(), &lab, &present_classes(&lab, 3), 4, 10.0 * H) {
                    return grad_error(&[logits], move |g, x| {
                        let p = g.softmax(x[0], 0)?;
                        Ok(loss_adapg(g, p, &lab)?.total)
                    });
                }
                sub += 1;
            }
        }),
        ("loss_occ", |s| {
            let mut r = rng(s);
            let lab = labels(5, 3, &mut r);
            let inputs = [scaled(&[3, 3], -2.0, 2.0, &mut r), scaled(&[3, 5], -2.0, 2.0, &mut r)];
            grad_error(&inputs, move |g, x| {
                let pred = prediction(g, x[0], x[1])?;
                Ok(loss_occ(g, &pred, &lab, 2.0)?.total)
            })
        }),
        ("loss_total", |s| {
            let mut sub = 0;
            loop {
                let mut r = rng(s + 1000 * sub);
                let lab = labels(4, 3, &mut r);
                let depth_t: Vec<Vec<i16>> = vec![(0..4).map(|_| r.gen_range(-1..4)).collect()];
                let inputs: Vec<Tensor<f64>> = [&[4, 2, 2][..], &[3, 2, 2, 1], &[3, 3], &[3, 4], &[3, 3], &[3, 4]]
                    .iter()
                    .map(|sh| scaled(sh, -2.0, 2.0, &mut r))
                    .collect();
                let probs = softmax_forward(&inputs[1], 0);
                if separated_errors(probs.data(), &lab, &present_classes(&lab, 3), 4, 10.0 * H) {
                    return grad_error(&inputs, move |g, x| {
                        let l_depth = loss_depth(g, &x[..1], &depth_t)?;
                        let p = g.softmax(x[1], 0)?;
                        let adapg = loss_adapg(g, p, &lab)?;
                        let clean = prediction(g, x[2], x[3])?;
                        let occ = loss_occ(g, &clean, &lab, 2.0)?;
                        let noisy = prediction(g, x[4], x[5])?;
                        let rpl = loss_occ(g, &noisy, &lab, 2.0)?;
                        g.add_n(&[l_depth, adapg.total, occ.total, rpl.total])
                    });
                }
                sub += 1;
            }
        }),
    ]
}

/// Decoder outputs built from raw class and mask logits.
pub fn prediction(g: &mut Graph<f64>, class_logits: Var, mask_logits: Var) -> Result<OccupancyPrediction> {
    let class_probs = g.softmax(class_logits, 1)?;
    let masks = g.sigmoid(mask_logits)?;
    let probs_t = g.transpose2d(class_probs)?;
    let semantic = g.matmul(probs_t, masks)?;
    let c = g.shape(class_logits)[0];
    let mask_embed = g.constant(Tensor::zeros(&[c, 1]));
    Ok(OccupancyPrediction { class_logits, class_probs, mask_embed, mask_logits, masks, semantic })
}

// ---------------------------------------------------------------------------
// Brute-force oracles

/// Direct 3-D cross-correlation; taps summed in (channel, kx, ky, kz) order,
/// bias added last.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let (cin, ix, iy, iz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kx, ky, kz) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]);
    let (st, p) = (spec.stride as isize, &spec.padding);
    let o = |n: usize, k: usize, p: usize| (n + 2 * p - k) / spec.stride + 1;
    let (ox, oy, oz) = (o(ix, kx, p[0]), o(iy, ky, p[1]), o(iz, kz, p[2]));
    let per_group_out = cout / spec.groups;
    assert_eq!(cg * spec.groups, cin);
    Tensor::from_fn(&[cout, ox, oy, oz], |flat| {
        let (co, a, bb, c) = (flat / (ox * oy * oz), flat / (oy * oz) % ox, flat / oz % oy, flat % oz);
        let group = co / per_group_out;
        let mut acc = 0.0;
        for cl in 0..cg {
            let ci = group * cg + cl;
            for u in 0..kx {
                for v in 0..ky {
                    for t in 0..kz {
                        let sx = a as isize * st + u as isize - p[0] as isize;
                        let sy = bb as isize * st + v as isize - p[1] as isize;
                        let sz = c as isize * st + t as isize - p[2] as isize;
                        if sx < 0 || sy < 0 || sz < 0 || sx >= ix as isize || sy >= iy as isize || sz >= iz as isize {
                            continue;
                        }
                        acc += x.at(&[ci, sx as usize, sy as usize, sz as usize]) * w.at(&[co, cl, u, v, t]);
                    }
                }
            }
        }
        acc + b.map_or(0.0, |b| b.data()[co])
    })
}

/// Direct 2-D cross-correlation.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let (cin, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (st, p) = (spec.stride as isize, &spec.padding);
    let oh = (ih + 2 * p[0] - kh) / spec.stride + 1;
    let ow = (iw + 2 * p[1] - kw) / spec.stride + 1;
    let per_group_out = cout / spec.groups;
    assert_eq!(cg * spec.groups, cin);
    Tensor::from_fn(&[cout, oh, ow], |flat| {
        let (co, i, j) = (flat / (oh * ow), flat / ow % oh, flat % ow);
        let group = co / per_group_out;
        let mut acc = 0.0;
        for cl in 0..cg {
            for u in 0..kh {
                for v in 0..kw {
                    let si = i as isize * st + u as isize - p[0] as isize;
                    let sj = j as isize * st + v as isize - p[1] as isize;
                    if si >= 0 && sj >= 0 && si < ih as isize && sj < iw as isize {
                        acc += x.at(&[group * cg + cl, si as usize, sj as usize]) * w.at(&[co, cl, u, v]);
                    }
                }
            }
        }
        acc + b.map_or(0.0, |b| b.data()[co])
    })
}

/// Voxel of an ego point by direct floor arithmetic.
pub fn voxel_by_floor(p: [f64; 3], grid: &VoxelGridSpec) -> Option<usize> {
    let n: Vec<usize> = (0..3).map(|a| ((grid.max[a] - grid.min[a]) / grid.voxel_size[a]).round() as usize).collect();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let f = ((p[a] - grid.min[a]) / grid.voxel_size[a]).floor();
        if f < 0.0 || f >= n[a] as f64 {
            return None;
        }
        idx[a] = f as usize;
    }
    Some((idx[0] * n[1] + idx[1]) * n[2] + idx[2])
}

/// Scatter-add of every camera's frustum features at the floor-computed voxels.
pub fn naive_voxel_pool(frustums: &[Tensor<f64>], points: &[Vec<[f64; 3]>], grid: &VoxelGridSpec) -> Vec<f64> {
    let nvox: usize = (0..3).map(|a| ((grid.max[a] - grid.min[a]) / grid.voxel_size[a]).round() as usize).product();
    let ch = frustums[0].shape()[0];
    let mut out = vec![0.0; ch * nvox];
    for (f, pts) in frustums.iter().zip(points) {
        for (pi, &p) in pts.iter().enumerate() {
            if let Some(v) = voxel_by_floor(p, grid) {
                for c in 0..ch {
                    out[c * nvox + v] += f.data()[c * pts.len() + pi];
                }
            }
        }
    }
    out
}

/// Separable align-corners linear interpolation, one axis at a time.
pub fn naive_trilinear(x: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let interp_axis = |t: &Tensor<f64>, axis: usize| -> Tensor<f64> {
        let mut shape = t.shape().to_vec();
        let n_in = shape[axis];
        let n_out = n_in * factor;
        shape[axis] = n_out;
        Tensor::from_fn(&shape, |flat| {
            let mut idx = vec![0; shape.len()];
            let mut rem = flat;
            for a in (0..shape.len()).rev() {
                idx[a] = rem % shape[a];
                rem /= shape[a];
            }
            let o = idx[axis];
            let pos = if n_in == 1 || n_out == 1 { 0.0 } else { o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 };
            let lo = pos.floor().min((n_in - 1) as f64) as usize;
            let hi = (lo + 1).min(n_in - 1);
            let frac = pos - lo as f64;
            let mut at_lo = idx.clone();
            at_lo[axis] = lo;
            let mut at_hi = idx;
            at_hi[axis] = hi;
            t.at(&at_lo) * (1.0 - frac) + t.at(&at_hi) * frac
        })
    };
    let a = interp_axis(x, 1);
    let b = interp_axis(&a, 2);
    interp_axis(&b, 3)
}

/// IoU per class by counting set membership voxel by voxel.
pub fn naive_iou(gt: &[u8], pred: &[u8], visible: Option<&[bool]>, class: u8) -> Option<f64> {
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..gt.len() {
        if visible.is_some_and(|v| !v[i]) {
            continue;
        }
        let (a, b) = (gt[i] == class, pred[i] == class);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Jaccard loss of class-`c` mispredictions `miss` (a voxel set).
pub fn jaccard_set_loss(fg: &[bool], miss: &[bool]) -> f64 {
    let m = miss.iter().filter(|&&b| b).count();
    let union = fg.iter().zip(miss).filter(|(&f, &s)| f || s).count();
    if union == 0 {
        0.0
    } else {
        m as f64 / union as f64
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Convex (Lovasz) extension of the Jaccard set loss at `errors`, by
/// maximizing over every vertex of the base polytope, one per ordering.
pub fn lovasz_extension_bruteforce(fg: &[bool], errors: &[f64]) -> f64 {
    let n = errors.len();
    permutations(n)
        .iter()
        .map(|perm| {
            let mut set = vec![false; n];
            let mut prev = 0.0;
            let mut total = 0.0;
            for &i in perm {
                set[i] = true;
                let cur = jaccard_set_loss(fg, &set);
                total += errors[i] * (cur - prev);
                prev = cur;
            }
            total
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The same extension as an integral over level sets.
pub fn lovasz_extension_levels(fg: &[bool], errors: &[f64]) -> f64 {
    let mut levels: Vec<f64> = errors.to_vec();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    levels.push(0.0);
    levels
        .windows(2)
        .map(|w| {
            let set: Vec<bool> = errors.iter().map(|&e| e >= w[0]).collect();
            (w[0] - w[1]) * jaccard_set_loss(fg, &set)
        })
        .sum()
}

/// Lovasz-softmax of `probs[C,N]` by brute force.
pub fn lovasz_softmax_oracle(probs: &Tensor<f64>, labels: &[u8], rows: &[usize]) -> f64 {
    let n = labels.len();
    let per: Vec<f64> = rows
        .iter()
        .map(|&c| {
            let fg: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            let e: Vec<f64> = (0..n).map(|i| ((fg[i] as u8 as f64) - probs.data()[c * n + i]).abs()).collect();
            lovasz_extension_bruteforce(&fg, &e)
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Two-pass mean/variance standardization over the leading axis.
pub fn naive_channel_layer_norm(x: &Tensor<f64>) -> Tensor<f64> {
    let c = x.shape()[0];
    let n = x.len() / c;
    let mut out = x.clone();
    for p in 0..n {
        let col: Vec<f64> = (0..c).map(|ch| x.data()[ch * n + p]).collect();
        let mean = col.iter().sum::<f64>() / c as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for ch in 0..c {
            out.data_mut()[ch * n + p] = (col[ch] - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
