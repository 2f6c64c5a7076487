//! Trilinear upsampling of class-probability grids (half-voxel aligned,
//! edge-clamped) and its adjoint.

use super::layers::Feat;
use crate::error::{Error, Result};

/// Sparse 1D interpolation operator: each output index reads two inputs.
#[derive(Debug, Clone)]
struct Interp1d {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f32>,
}

impl Interp1d {
    fn new(n_in: usize, factor: usize) -> Self {
        let n_out = n_in * factor;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut t = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            t.push((src - i0 as f64) as f32);
        }
        Interp1d { lo, hi, t }
    }
}

/// Apply a 1D operator along `axis` of a `[c, d, h, w]` buffer.
fn apply_axis(src: &[f32], channels: usize, dims: [usize; 3], axis: usize, op: &Interp1d) -> (Vec<f32>, [usize; 3]) {
    let mut od = dims;
    od[axis] = op.lo.len();
    let out_n: usize = od.iter().product();
    let in_n: usize = dims.iter().product();
    let mut out = vec![0.0f32; channels * out_n];
    let in_stride = [dims[1] * dims[2], dims[2], 1];
    let out_stride = [od[1] * od[2], od[2], 1];
    for c in 0..channels {
        let s = &src[c * in_n..(c + 1) * in_n];
        let o = &mut out[c * out_n..(c + 1) * out_n];
        for i in 0..od[0] {
            for j in 0..od[1] {
                for k in 0..od[2] {
                    let idx = [i, j, k];
                    let a = idx[axis];
                    let mut base = 0;
                    for ax in 0..3 {
                        if ax != axis {
                            base += idx[ax] * in_stride[ax];
                        }
                    }
                    let t = op.t[a];
                    let v0 = s[base + op.lo[a] * in_stride[axis]];
                    let v1 = s[base + op.hi[a] * in_stride[axis]];
                    o[i * out_stride[0] + j * out_stride[1] + k] = v0 + t * (v1 - v0);
                }
            }
        }
    }
    (out, od)
}

/// Transpose of [`apply_axis`].
fn apply_axis_adjoint(g: &[f32], channels: usize, in_dims: [usize; 3], axis: usize, op: &Interp1d) -> Vec<f32> {
    let mut od = in_dims;
    od[axis] = op.lo.len();
    let out_n: usize = od.iter().product();
    let in_n: usize = in_dims.iter().product();
    let mut acc = vec![0.0f32; channels * in_n];
    let in_stride = [in_dims[1] * in_dims[2], in_dims[2], 1];
    for c in 0..channels {
        let gs = &g[c * out_n..(c + 1) * out_n];
        let a_out = &mut acc[c * in_n..(c + 1) * in_n];
        for i in 0..od[0] {
            for j in 0..od[1] {
                for k in 0..od[2] {
                    let idx = [i, j, k];
                    let a = idx[axis];
                    let mut base = 0;
                    for ax in 0..3 {
                        if ax != axis {
                            base += idx[ax] * in_stride[ax];
                        }
                    }
                    let v = gs[(i * od[1] + j) * od[2] + k];
                    let t = op.t[a];
                    a_out[base + op.lo[a] * in_stride[axis]] += (1.0 - t) * v;
                    a_out[base + op.hi[a] * in_stride[axis]] += t * v;
                }
            }
        }
    }
    acc
}

fn factor_for(src: [usize; 3], target: [usize; 3]) -> Result<usize> {
    let f = target[0] / src[0].max(1);
    if f == 0 || (0..3).any(|a| src[a] * f != target[a]) {
        return Err(Error::InvalidArgument(format!(
            "cannot rescale {src:?} to {target:?} by an integer factor"
        )));
    }
    Ok(f)
}

/// Trilinear upsampling followed by per-voxel renormalisation of the class
/// distribution. Identity when `p.dims == target`.
pub fn rescale_to_full(p: &Feat, target: [usize; 3]) -> Result<Feat> {
    let f = factor_for(p.dims, target)?;
    if f == 1 {
        return Ok(p.clone());
    }
    let mut buf = p.data.clone();
    let mut dims = p.dims;
    for axis in 0..3 {
        let op = Interp1d::new(dims[axis], f);
        let (b, d) = apply_axis(&buf, p.channels, dims, axis, &op);
        buf = b;
        dims = d;
    }
    let mut out = Feat::from_vec(p.channels, dims, buf);
    renormalize(&mut out);
    Ok(out)
}

fn renormalize(p: &mut Feat) {
    let n = p.voxels();
    for i in 0..n {
        let s: f32 = (0..p.channels).map(|c| p.data[c * n + i]).sum();
        if s > 0.0 {
            for c in 0..p.channels {
                p.data[c * n + i] /= s;
            }
        }
    }
}

/// Gradient of [`rescale_to_full`] with respect to the coarse grid, given the
/// upsampled (pre-normalisation) sums are needed for the renormalisation step.
pub(crate) fn rescale_backward(p: &Feat, target: [usize; 3], dq: &Feat) -> Result<Feat> {
    let f = factor_for(p.dims, target)?;
    if f == 1 {
        return Ok(dq.clone());
    }
    // Recompute the unnormalised upsampled grid.
    let mut buf = p.data.clone();
    let mut dims = p.dims;
    let mut stages = Vec::with_capacity(3);
    for axis in 0..3 {
        let op = Interp1d::new(dims[axis], f);
        stages.push((dims, op.clone()));
        let (b, d) = apply_axis(&buf, p.channels, dims, axis, &op);
        buf = b;
        dims = d;
    }
    let n = dims.iter().product::<usize>();
    let cch = p.channels;
    let mut du = vec![0.0f32; cch * n];
    for i in 0..n {
        let s: f32 = (0..cch).map(|c| buf[c * n + i]).sum();
        if s <= 0.0 {
            continue;
        }
        let dot: f32 = (0..cch).map(|c| buf[c * n + i] / s * dq.data[c * n + i]).sum();
        for c in 0..cch {
            du[c * n + i] = (dq.data[c * n + i] - dot) / s;
        }
    }
    let mut g = du;
    for (axis, (in_dims, op)) in stages.into_iter().enumerate().rev() {
        g = apply_axis_adjoint(&g, cch, in_dims, axis, &op);
    }
    Ok(Feat::from_vec(cch, p.dims, g))
}
