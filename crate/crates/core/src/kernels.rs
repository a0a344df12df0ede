//! Raw forward kernels backing the graph primitives.
//!
//! Every kernel is a pure function over tensor values with a fixed,
//! sequential accumulation order, so replaying a graph reproduces results
//! bit-exactly at fixed precision.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Geometry of an im2col/col2im pair: input layout plus kernel window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.batch > 0
            && self.channels > 0
            && self.stride > 0
            && self.height + 2 * self.pad >= self.kernel_h
            && self.width + 2 * self.pad >= self.kernel_w
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// True when `src` broadcasts to `dst` under right-aligned rules.
pub fn broadcast_compatible(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let off = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &s)| s == dst[off + i] || s == 1)
}

/// Effective strides of `src` aligned to `dst` rank, zeroed on broadcast axes.
fn effective_strides(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let ndim = dst_shape.len();
    let off = ndim - src_shape.len();
    let src_strides = strides_of(src_shape);
    let mut eff = vec![0usize; ndim];
    for i in 0..src_shape.len() {
        eff[off + i] = if src_shape[i] == 1 && dst_shape[off + i] != 1 {
            0
        } else {
            src_strides[i]
        };
    }
    eff
}

pub fn broadcast_to<F: Elem>(src: &Tensor<F>, dst_shape: &[usize]) -> Result<Tensor<F>> {
    if !broadcast_compatible(src.shape(), dst_shape) {
        return Err(shape_err(
            "broadcast_to",
            format!("{:?} -> {:?}", src.shape(), dst_shape),
        ));
    }
    let n: usize = dst_shape.iter().product();
    let ndim = dst_shape.len();
    let eff = effective_strides(src.shape(), dst_shape);
    let sdata = src.data();
    let mut out = vec![F::ZERO; n];
    let mut counter = vec![0usize; ndim];
    let mut sidx = 0usize;
    for o in out.iter_mut() {
        *o = sdata[sidx];
        for d in (0..ndim).rev() {
            counter[d] += 1;
            sidx += eff[d];
            if counter[d] < dst_shape[d] {
                break;
            }
            counter[d] = 0;
            sidx -= eff[d] * dst_shape[d];
        }
    }
    Tensor::new(dst_shape.to_vec(), out)
}

/// Sum-reduces `src` onto a broadcast-compatible smaller shape; the adjoint
/// of [`broadcast_to`].
pub fn sum_to<F: Elem>(src: &Tensor<F>, dst_shape: &[usize]) -> Result<Tensor<F>> {
    if !broadcast_compatible(dst_shape, src.shape()) {
        return Err(shape_err(
            "sum_to",
            format!("{:?} -> {:?}", src.shape(), dst_shape),
        ));
    }
    let dst_n: usize = dst_shape.iter().product();
    let ndim = src.shape().len();
    let eff = effective_strides(dst_shape, src.shape());
    let sdata = src.data();
    let src_shape = src.shape();
    let mut out = vec![F::ZERO; dst_n];
    let mut counter = vec![0usize; ndim];
    let mut didx = 0usize;
    for &s in sdata {
        out[didx] += s;
        for d in (0..ndim).rev() {
            counter[d] += 1;
            didx += eff[d];
            if counter[d] < src_shape[d] {
                break;
            }
            counter[d] = 0;
            didx -= eff[d] * src_shape[d];
        }
    }
    Tensor::new(dst_shape.to_vec(), out)
}

/// Max-reduces `src` onto a broadcast-compatible smaller shape.
pub fn max_to<F: Elem>(src: &Tensor<F>, dst_shape: &[usize]) -> Result<Tensor<F>> {
    if !broadcast_compatible(dst_shape, src.shape()) {
        return Err(shape_err(
            "max_to",
            format!("{:?} -> {:?}", src.shape(), dst_shape),
        ));
    }
    let dst_n: usize = dst_shape.iter().product();
    let ndim = src.shape().len();
    let eff = effective_strides(dst_shape, src.shape());
    let sdata = src.data();
    let src_shape = src.shape();
    let mut out = vec![F::from_f64(f64::NEG_INFINITY); dst_n];
    let mut counter = vec![0usize; ndim];
    let mut didx = 0usize;
    for &s in sdata {
        out[didx] = out[didx].maxv(s);
        for d in (0..ndim).rev() {
            counter[d] += 1;
            didx += eff[d];
            if counter[d] < src_shape[d] {
                break;
            }
            counter[d] = 0;
            didx -= eff[d] * src_shape[d];
        }
    }
    Tensor::new(dst_shape.to_vec(), out)
}

pub fn matmul<F: Elem>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(shape_err("matmul", format!("{:?} x {:?}", ash, bsh)));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut out = vec![F::ZERO; m * n];
    F::gemm(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

pub fn permute<F: Elem>(t: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let shape = t.shape();
    let ndim = shape.len();
    let mut seen = vec![false; ndim];
    if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err("permute", format!("perm {:?} on {:?}", perm, shape)));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let sdata = t.data();
    let mut out = vec![F::ZERO; t.numel()];
    let mut counter = vec![0usize; ndim];
    let mut sidx = 0usize;
    for o in out.iter_mut() {
        *o = sdata[sidx];
        for d in (0..ndim).rev() {
            counter[d] += 1;
            sidx += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
            sidx -= eff[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Unfolds conv windows: `x[N,C,H,W]` to columns `[C*kh*kw, N*Ho*Wo]`
/// with zero padding.
pub fn im2col<F: Elem>(x: &Tensor<F>, geom: &ConvGeom) -> Result<Tensor<F>> {
    let expect = [geom.batch, geom.channels, geom.height, geom.width];
    if x.shape() != expect || !geom.valid() {
        return Err(shape_err(
            "im2col",
            format!("input {:?}, geom {:?}", x.shape(), geom),
        ));
    }
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let rows = geom.rows();
    let cols = geom.cols();
    let (h, w) = (geom.height as isize, geom.width as isize);
    let sdata = x.data();
    let mut out = vec![F::ZERO; rows * cols];
    for r in 0..rows {
        let c = r / (geom.kernel_h * geom.kernel_w);
        let dy = (r / geom.kernel_w) % geom.kernel_h;
        let dx = r % geom.kernel_w;
        let row = &mut out[r * cols..(r + 1) * cols];
        let mut j = 0usize;
        for nb in 0..geom.batch {
            let base = (nb * geom.channels + c) * geom.height * geom.width;
            for oh in 0..ho {
                let y = (oh * geom.stride + dy) as isize - geom.pad as isize;
                for ow in 0..wo {
                    let xx = (ow * geom.stride + dx) as isize - geom.pad as isize;
                    if y >= 0 && y < h && xx >= 0 && xx < w {
                        row[j] = sdata[base + (y as usize) * geom.width + xx as usize];
                    }
                    j += 1;
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Folds columns back into an image by scatter-add; the adjoint of [`im2col`].
pub fn col2im<F: Elem>(cols: &Tensor<F>, geom: &ConvGeom) -> Result<Tensor<F>> {
    let (rows, ncols) = (geom.rows(), geom.cols());
    if x_shape_mismatch(cols.shape(), rows, ncols) || !geom.valid() {
        return Err(shape_err(
            "col2im",
            format!("cols {:?}, geom {:?}", cols.shape(), geom),
        ));
    }
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (h, w) = (geom.height as isize, geom.width as isize);
    let sdata = cols.data();
    let mut out = vec![F::ZERO; geom.batch * geom.channels * geom.height * geom.width];
    for r in 0..rows {
        let c = r / (geom.kernel_h * geom.kernel_w);
        let dy = (r / geom.kernel_w) % geom.kernel_h;
        let dx = r % geom.kernel_w;
        let row = &sdata[r * ncols..(r + 1) * ncols];
        let mut j = 0usize;
        for nb in 0..geom.batch {
            let base = (nb * geom.channels + c) * geom.height * geom.width;
            for oh in 0..ho {
                let y = (oh * geom.stride + dy) as isize - geom.pad as isize;
                for ow in 0..wo {
                    let xx = (ow * geom.stride + dx) as isize - geom.pad as isize;
                    if y >= 0 && y < h && xx >= 0 && xx < w {
                        out[base + (y as usize) * geom.width + xx as usize] += row[j];
                    }
                    j += 1;
                }
            }
        }
    }
    Tensor::new(
        vec![geom.batch, geom.channels, geom.height, geom.width],
        out,
    )
}

fn x_shape_mismatch(shape: &[usize], rows: usize, cols: usize) -> bool {
    shape.len() != 2 || shape[0] != rows || shape[1] != cols
}

/// Non-overlapping k-by-k average pooling; trailing rows/cols that do not
/// fill a window are dropped.
pub fn avg_pool<F: Elem>(x: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let sh = x.shape();
    if sh.len() != 4 || k == 0 || sh[2] < k || sh[3] < k {
        return Err(shape_err("avg_pool", format!("input {:?}, k={}", sh, k)));
    }
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (ho, wo) = (h / k, w / k);
    let inv = F::from_f64(1.0 / (k * k) as f64);
    let sdata = x.data();
    let mut out = vec![F::ZERO; n * c * ho * wo];
    let mut o = 0usize;
    for nc in 0..n * c {
        let base = nc * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = F::ZERO;
                for dy in 0..k {
                    let row = base + (oh * k + dy) * w + ow * k;
                    for dx in 0..k {
                        acc += sdata[row + dx];
                    }
                }
                out[o] = acc * inv;
                o += 1;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Adjoint of [`avg_pool`]: spreads each pooled gradient over its window.
pub fn avg_pool_back<F: Elem>(g: &Tensor<F>, k: usize, h: usize, w: usize) -> Result<Tensor<F>> {
    let sh = g.shape();
    if sh.len() != 4 || k == 0 || sh[2] != h / k || sh[3] != w / k {
        return Err(shape_err(
            "avg_pool_back",
            format!("grad {:?}, k={}, target {}x{}", sh, k, h, w),
        ));
    }
    let (n, c, ho, wo) = (sh[0], sh[1], sh[2], sh[3]);
    let inv = F::from_f64(1.0 / (k * k) as f64);
    let sdata = g.data();
    let mut out = vec![F::ZERO; n * c * h * w];
    for nc in 0..n * c {
        let gbase = nc * ho * wo;
        let obase = nc * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let gv = sdata[gbase + oh * wo + ow] * inv;
                for dy in 0..k {
                    let row = obase + (oh * k + dy) * w + ow * k;
                    for dx in 0..k {
                        out[row + dx] = gv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Mirrors a coordinate into `[0, size-1]` without repeating border pixels.
fn reflect(u: f64, size: usize) -> f64 {
    if size == 1 {
        return 0.0;
    }
    let period = 2.0 * (size as f64 - 1.0);
    let mut v = u % period;
    if v < 0.0 {
        v += period;
    }
    if v > size as f64 - 1.0 {
        v = period - v;
    }
    v.clamp(0.0, size as f64 - 1.0)
}

struct TapPoint {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

fn tap_point(gx: f64, gy: f64, h: usize, w: usize) -> TapPoint {
    let u = reflect(gx, w);
    let v = reflect(gy, h);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    TapPoint {
        x0,
        x1,
        y0,
        y1,
        fx: u - x0 as f64,
        fy: v - y0 as f64,
    }
}

fn check_grid<F: Elem>(op: &'static str, x_shape: &[usize], grid: &Tensor<F>) -> Result<()> {
    let gs = grid.shape();
    if x_shape.len() != 4 || gs.len() != 4 || gs[0] != x_shape[0] || gs[3] != 2 {
        return Err(shape_err(op, format!("input {:?}, grid {:?}", x_shape, gs)));
    }
    Ok(())
}

/// Bilinear sampling of `x[N,C,H,W]` at `grid[N,Ho,Wo,2]` positions given in
/// input pixel coordinates `(gx, gy)`; out-of-canvas positions reflect.
pub fn grid_sample<F: Elem>(x: &Tensor<F>, grid: &Tensor<F>) -> Result<Tensor<F>> {
    check_grid("grid_sample", x.shape(), grid)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let gdata = grid.data();
    let sdata = x.data();
    let mut out = vec![F::ZERO; n * c * ho * wo];
    for nb in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let gi = ((nb * ho + oh) * wo + ow) * 2;
                let t = tap_point(gdata[gi].to_f64(), gdata[gi + 1].to_f64(), h, w);
                let w00 = F::from_f64((1.0 - t.fx) * (1.0 - t.fy));
                let w01 = F::from_f64(t.fx * (1.0 - t.fy));
                let w10 = F::from_f64((1.0 - t.fx) * t.fy);
                let w11 = F::from_f64(t.fx * t.fy);
                for ch in 0..c {
                    let base = (nb * c + ch) * h * w;
                    let v = sdata[base + t.y0 * w + t.x0] * w00
                        + sdata[base + t.y0 * w + t.x1] * w01
                        + sdata[base + t.y1 * w + t.x0] * w10
                        + sdata[base + t.y1 * w + t.x1] * w11;
                    out[((nb * c + ch) * ho + oh) * wo + ow] = v;
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Adjoint of [`grid_sample`] with respect to the image: scatters each output
/// gradient onto its four bilinear taps.
pub fn grid_sample_back<F: Elem>(
    g: &Tensor<F>,
    grid: &Tensor<F>,
    h: usize,
    w: usize,
) -> Result<Tensor<F>> {
    let gs = g.shape();
    check_grid("grid_sample_back", &[gs[0], gs[1], h, w], grid)?;
    if gs[2] != grid.shape()[1] || gs[3] != grid.shape()[2] {
        return Err(shape_err(
            "grid_sample_back",
            format!("grad {:?}, grid {:?}", gs, grid.shape()),
        ));
    }
    let (n, c, ho, wo) = (gs[0], gs[1], gs[2], gs[3]);
    let gdata = grid.data();
    let sdata = g.data();
    let mut out = vec![F::ZERO; n * c * h * w];
    for nb in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let gi = ((nb * ho + oh) * wo + ow) * 2;
                let t = tap_point(gdata[gi].to_f64(), gdata[gi + 1].to_f64(), h, w);
                let w00 = F::from_f64((1.0 - t.fx) * (1.0 - t.fy));
                let w01 = F::from_f64(t.fx * (1.0 - t.fy));
                let w10 = F::from_f64((1.0 - t.fx) * t.fy);
                let w11 = F::from_f64(t.fx * t.fy);
                for ch in 0..c {
                    let base = (nb * c + ch) * h * w;
                    let gv = sdata[((nb * c + ch) * ho + oh) * wo + ow];
                    out[base + t.y0 * w + t.x0] += gv * w00;
                    out[base + t.y0 * w + t.x1] += gv * w01;
                    out[base + t.y1 * w + t.x0] += gv * w10;
                    out[base + t.y1 * w + t.x1] += gv * w11;
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Gathers rows of `x` along axis 0.
pub fn index_select0<F: Elem>(x: &Tensor<F>, indices: &[usize]) -> Result<Tensor<F>> {
    let sh = x.shape();
    if sh.is_empty() {
        return Err(shape_err("index_select0", "scalar input".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= sh[0]) {
        return Err(shape_err(
            "index_select0",
            format!("index {} out of range for {} rows", bad, sh[0]),
        ));
    }
    let row = sh[1..].iter().product::<usize>();
    let sdata = x.data();
    let mut out = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        out.extend_from_slice(&sdata[i * row..(i + 1) * row]);
    }
    let mut shape = sh.to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, out)
}

/// Scatter-adds rows of `g` into a zero tensor with `rows` rows; the adjoint
/// of [`index_select0`].
pub fn index_scatter_add0<F: Elem>(
    g: &Tensor<F>,
    indices: &[usize],
    rows: usize,
) -> Result<Tensor<F>> {
    let sh = g.shape();
    if sh.is_empty() || sh[0] != indices.len() {
        return Err(shape_err(
            "index_scatter_add0",
            format!("grad {:?} vs {} indices", sh, indices.len()),
        ));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(shape_err(
            "index_scatter_add0",
            format!("index {} out of range for {} rows", bad, rows),
        ));
    }
    let row = sh[1..].iter().product::<usize>();
    let sdata = g.data();
    let mut out = vec![F::ZERO; rows * row];
    for (j, &i) in indices.iter().enumerate() {
        let dst = &mut out[i * row..(i + 1) * row];
        let src = &sdata[j * row..(j + 1) * row];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    let mut shape = sh.to_vec();
    shape[0] = rows;
    Tensor::new(shape, out)
}

/// Concatenates tensors along axis 0; tail dimensions must agree.
pub fn concat0<F: Elem>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat0", "no inputs".into()))?;
    let tail = &first.shape()[1..];
    let mut rows = 0usize;
    for p in parts {
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(shape_err(
                "concat0",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        rows += p.shape()[0];
    }
    let mut out = Vec::with_capacity(rows * tail.iter().product::<usize>());
    for p in parts {
        out.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = rows;
    Tensor::new(shape, out)
}

/// Contiguous row slice `[start, start+len)` along axis 0.
pub fn slice0<F: Elem>(x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let sh = x.shape();
    if sh.is_empty() || start + len > sh[0] {
        return Err(shape_err(
            "slice0",
            format!("[{}, {}) of {:?}", start, start + len, sh),
        ));
    }
    let row = sh[1..].iter().product::<usize>();
    let out = x.data()[start * row..(start + len) * row].to_vec();
    let mut shape = sh.to_vec();
    shape[0] = len;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_and_sum_are_dual() {
        // <broadcast(x), y> == <x, sum_to(y)> for a linear-duality spot check
        let x = t64(&[2, 1], &[1.0, 2.0]);
        let y = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bx = broadcast_to(&x, &[2, 3]).unwrap();
        let sy = sum_to(&y, &[2, 1]).unwrap();
        let lhs: f64 = bx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(sy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(sy.data(), &[6.0, 15.0]);
    }

    #[test]
    fn sum_to_scalar() {
        let y = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = sum_to(&y, &[]).unwrap();
        assert_eq!(s.item().unwrap(), 10.0);
    }

    #[test]
    fn matmul_known() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t64(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn im2col_ones_conv() {
        // 3x3 image of ones against a 3x3 window, no padding: one column of 9 ones
        let x = t64(&[1, 1, 3, 3], &[1.0; 9]);
        let geom = ConvGeom {
            batch: 1,
            channels: 1,
            height: 3,
            width: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad: 0,
        };
        let cols = im2col(&x, &geom).unwrap();
        assert_eq!(cols.shape(), &[9, 1]);
        assert!(cols.data().iter().all(|&v| v == 1.0));
        let w = t64(&[1, 9], &[1.0; 9]);
        let y = matmul(&w, &cols).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn im2col_col2im_duality() {
        let geom = ConvGeom {
            batch: 2,
            channels: 2,
            height: 4,
            width: 5,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad: 1,
        };
        let nx = geom.batch * geom.channels * geom.height * geom.width;
        let x = t64(
            &[2, 2, 4, 5],
            &(0..nx).map(|v| (v as f64) * 0.37 - 3.0).collect::<Vec<_>>(),
        );
        let cols = im2col(&x, &geom).unwrap();
        let nc = cols.numel();
        let c = Tensor::new(
            cols.shape().to_vec(),
            (0..nc).map(|v| ((v * 7919) % 13) as f64 - 6.0).collect(),
        )
        .unwrap();
        let lhs: f64 = cols.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let folded = col2im(&c, &geom).unwrap();
        let rhs: f64 = x.data().iter().zip(folded.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn avg_pool_window() {
        let x = t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let back = avg_pool_back(&Tensor::scalar(1.0).reshaped(vec![1, 1, 1, 1]).unwrap(), 2, 2, 2)
            .unwrap();
        assert_eq!(back.data(), &[0.25; 4]);
    }

    #[test]
    fn avg_pool_drops_odd_edge() {
        let x = t64(&[1, 1, 3, 3], &(1..=9).map(|v| v as f64).collect::<Vec<_>>());
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[3.0]); // mean of 1,2,4,5
    }

    #[test]
    fn grid_sample_identity_is_exact() {
        let x = t64(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut grid = Vec::new();
        for y in 0..2 {
            for xx in 0..3 {
                grid.push(xx as f64);
                grid.push(y as f64);
            }
        }
        let g = t64(&[1, 2, 3, 2], &grid);
        let y = grid_sample(&x, &g).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn grid_sample_interpolates_midpoint() {
        let x = t64(&[1, 1, 1, 2], &[0.0, 1.0]);
        let g = t64(&[1, 1, 1, 2], &[0.5, 0.0]);
        let y = grid_sample(&x, &g).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_sample_reflects_outside() {
        let x = t64(&[1, 1, 1, 3], &[10.0, 20.0, 30.0]);
        // x = -1 reflects to x = 1
        let g = t64(&[1, 1, 1, 2], &[-1.0, 0.0]);
        let y = grid_sample(&x, &g).unwrap();
        assert_eq!(y.data(), &[20.0]);
        // x = 3 reflects to x = 1
        let g = t64(&[1, 1, 1, 2], &[3.0, 0.0]);
        let y = grid_sample(&x, &g).unwrap();
        assert_eq!(y.data(), &[20.0]);
    }

    #[test]
    fn grid_sample_back_duality() {
        let x = t64(&[1, 2, 3, 3], &(0..18).map(|v| v as f64 * 0.21).collect::<Vec<_>>());
        let grid = t64(
            &[1, 2, 2, 2],
            &[0.3, 0.7, 1.9, 0.2, -0.4, 1.1, 2.6, 2.2],
        );
        let y = grid_sample(&x, &grid).unwrap();
        let g = Tensor::new(
            y.shape().to_vec(),
            (0..y.numel()).map(|v| (v as f64) * 0.5 - 1.0).collect(),
        )
        .unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let dx = grid_sample_back(&g, &grid, 3, 3).unwrap();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn select_scatter_duality() {
        let x = t64(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let idx = [2usize, 0, 2];
        let y = index_select0(&x, &idx).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let g = t64(&[3, 2], &[1.0, 1.0, 2.0, 2.0, 5.0, 5.0]);
        let s = index_scatter_add0(&g, &idx, 4).unwrap();
        assert_eq!(s.data(), &[2.0, 2.0, 0.0, 0.0, 6.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[1, 2], &[5.0, 6.0]);
        let c = concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(slice0(&c, 2, 1).unwrap().data(), b.data());
        assert_eq!(slice0(&c, 0, 2).unwrap().data(), a.data());
        assert!(slice0(&c, 2, 2).is_err());
    }

    #[test]
    fn max_to_rows() {
        let x = t64(&[2, 3], &[1.0, 5.0, 2.0, -1.0, -7.0, -2.0]);
        let m = max_to(&x, &[2, 1]).unwrap();
        assert_eq!(m.data(), &[5.0, -1.0]);
    }
}
