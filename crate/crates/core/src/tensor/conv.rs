//! 2D cross-correlation with circular or zero padding.
//!
//! The summation order inside every output element is fixed: input channels
//! outermost, then kernel rows, then kernel columns. Circularly shifting the
//! input permutes which window each output element sees but never the order
//! of additions inside it, so circular convolution commutes with circular
//! shifts bit-exactly.
//!
//! For throughput the batch is packed into blocks of 8 SIMD lanes
//! (`[ci][row][col][lane]`) and the inner kernel keeps a 2-output-channel by
//! 4-column accumulator tile in registers. Lanes never interact, so batched
//! and per-image evaluation produce identical bits.

use super::{Shape, Tensor};
use crate::error::{LpsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Circular,
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv2dCfg {
    pub fn same_circular() -> Self {
        Conv2dCfg { stride: 1, padding: 1, pad_mode: PadMode::Circular }
    }
}

const LANES: usize = 8;

#[inline(always)]
fn vload(s: &[f64], off: usize) -> [f64; LANES] {
    let mut v = [0.0; LANES];
    v.copy_from_slice(&s[off..off + LANES]);
    v
}

#[inline(always)]
fn vfma(a: [f64; LANES], x: [f64; LANES], w: f64) -> [f64; LANES] {
    let mut r = [0.0; LANES];
    for l in 0..LANES {
        r[l] = x[l].mul_add(w, a[l]);
    }
    r
}

/// Validated geometry shared by forward and backward.
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
    hp: usize,
    wp: usize,
    hout: usize,
    wout: usize,
}

fn geometry(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: &Conv2dCfg) -> Result<Geom> {
    let (batch, cin, h, width) = x.shape().as_bchw()?;
    let (cout, w_cin, k1, k2) = w.shape().as_bchw()?;
    if w_cin != cin {
        return Err(LpsError::shape(format!(
            "conv2d: weight expects {w_cin} input channels, tensor has {cin}"
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(LpsError::shape(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                b.dims()
            )));
        }
    }
    if cfg.stride == 0 {
        return Err(LpsError::invalid("conv2d: stride must be >= 1".into()));
    }
    if cfg.pad_mode == PadMode::Circular && (cfg.padding >= h.min(width)) && cfg.padding > 0 {
        return Err(LpsError::invalid(format!(
            "conv2d: circular padding {} must be smaller than spatial extents {h}x{width}",
            cfg.padding
        )));
    }
    let hp = h + 2 * cfg.padding;
    let wp = width + 2 * cfg.padding;
    if hp < k1 || wp < k2 {
        return Err(LpsError::invalid(format!(
            "conv2d: kernel {k1}x{k2} exceeds padded extents {hp}x{wp}"
        )));
    }
    let hout = (hp - k1) / cfg.stride + 1;
    let wout = (wp - k2) / cfg.stride + 1;
    Ok(Geom { batch, cin, cout, h, w: width, k1, k2, hp, wp, hout, wout })
}

/// Pack one batch block (up to 8 images) into padded lane-major layout.
/// Missing lanes are zero-filled; lanes are independent downstream.
fn pack_block(x: &Tensor, g: &Geom, cfg: &Conv2dCfg, b0: usize, xp: &mut [f64]) {
    let lanes_here = (g.batch - b0).min(LANES);
    let pad = cfg.padding as i64;
    let xd = x.data();
    xp.fill(0.0);
    for ci in 0..g.cin {
        for ip in 0..g.hp {
            let si = ip as i64 - pad;
            let si = match cfg.pad_mode {
                PadMode::Circular => si.rem_euclid(g.h as i64) as usize,
                PadMode::Zero => {
                    if si < 0 || si >= g.h as i64 {
                        continue;
                    }
                    si as usize
                }
            };
            for jp in 0..g.wp {
                let sj = jp as i64 - pad;
                let sj = match cfg.pad_mode {
                    PadMode::Circular => sj.rem_euclid(g.w as i64) as usize,
                    PadMode::Zero => {
                        if sj < 0 || sj >= g.w as i64 {
                            continue;
                        }
                        sj as usize
                    }
                };
                let dst = ((ci * g.hp + ip) * g.wp + jp) * LANES;
                for l in 0..lanes_here {
                    xp[dst + l] = xd[(((b0 + l) * g.cin + ci) * g.h + si) * g.w + sj];
                }
            }
        }
    }
}

/// Inner kernel: accumulate `nj` output columns (1..=4) for `nco` output
/// channels (1..=2) at output row `i`, columns j0.., all in registers.
///
/// Per-element accumulation order is (ci, u, v) regardless of tile position.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile(
    ob: &mut [f64],
    xp: &[f64],
    wd: &[f64],
    g: &Geom,
    stride: usize,
    co0: usize,
    nco: usize,
    i: usize,
    j0: usize,
    nj: usize,
) {
    let (mut a00, mut a01, mut a02, mut a03) = ([0.0; LANES], [0.0; LANES], [0.0; LANES], [0.0; LANES]);
    let (mut a10, mut a11, mut a12, mut a13) = ([0.0; LANES], [0.0; LANES], [0.0; LANES], [0.0; LANES]);
    let ktaps = g.k1 * g.k2;
    for ci in 0..g.cin {
        let xpc = &xp[ci * g.hp * g.wp * LANES..];
        let w0 = &wd[(co0 * g.cin + ci) * ktaps..];
        let w1 = if nco > 1 { &wd[((co0 + 1) * g.cin + ci) * ktaps..] } else { w0 };
        for u in 0..g.k1 {
            let row = &xpc[(i * stride + u) * g.wp * LANES..];
            for v in 0..g.k2 {
                let wv0 = w0[u * g.k2 + v];
                let wv1 = w1[u * g.k2 + v];
                let x0 = vload(row, (j0 * stride + v) * LANES);
                a00 = vfma(a00, x0, wv0);
                if nco > 1 {
                    a10 = vfma(a10, x0, wv1);
                }
                if nj > 1 {
                    let x1 = vload(row, ((j0 + 1) * stride + v) * LANES);
                    a01 = vfma(a01, x1, wv0);
                    if nco > 1 {
                        a11 = vfma(a11, x1, wv1);
                    }
                }
                if nj > 2 {
                    let x2 = vload(row, ((j0 + 2) * stride + v) * LANES);
                    a02 = vfma(a02, x2, wv0);
                    if nco > 1 {
                        a12 = vfma(a12, x2, wv1);
                    }
                }
                if nj > 3 {
                    let x3 = vload(row, ((j0 + 3) * stride + v) * LANES);
                    a03 = vfma(a03, x3, wv0);
                    if nco > 1 {
                        a13 = vfma(a13, x3, wv1);
                    }
                }
            }
        }
    }
    let mut store = |co: usize, jj: usize, a: &[f64; LANES]| {
        let off = ((co * g.hout + i) * g.wout + j0 + jj) * LANES;
        ob[off..off + LANES].copy_from_slice(a);
    };
    store(co0, 0, &a00);
    if nj > 1 {
        store(co0, 1, &a01);
    }
    if nj > 2 {
        store(co0, 2, &a02);
    }
    if nj > 3 {
        store(co0, 3, &a03);
    }
    if nco > 1 {
        store(co0 + 1, 0, &a10);
        if nj > 1 {
            store(co0 + 1, 1, &a11);
        }
        if nj > 2 {
            store(co0 + 1, 2, &a12);
        }
        if nj > 3 {
            store(co0 + 1, 3, &a13);
        }
    }
}

/// Cross-correlation forward pass.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: &Conv2dCfg) -> Result<Tensor> {
    let g = geometry(x, w, bias, cfg)?;
    let mut out = vec![0.0; g.batch * g.cout * g.hout * g.wout];
    let mut xp = vec![0.0; g.cin * g.hp * g.wp * LANES];
    let mut ob = vec![0.0; g.cout * g.hout * g.wout * LANES];
    let wd = w.data();

    let mut b0 = 0;
    while b0 < g.batch {
        pack_block(x, &g, cfg, b0, &mut xp);
        // Main tiles + remainders; the per-element order is identical in all.
        let mut co = 0;
        while co < g.cout {
            let nco = (g.cout - co).min(2);
            for i in 0..g.hout {
                let mut j = 0;
                while j < g.wout {
                    let nj = (g.wout - j).min(4);
                    tile(&mut ob, &xp, wd, &g, cfg.stride, co, nco, i, j, nj);
                    j += nj;
                }
            }
            co += nco;
        }
        // Unpack lanes, adding bias last so the tap order stays fixed.
        let lanes_here = (g.batch - b0).min(LANES);
        for co in 0..g.cout {
            let bv = bias.map(|b| b.data()[co]).unwrap_or(0.0);
            for i in 0..g.hout {
                for j in 0..g.wout {
                    let src = ((co * g.hout + i) * g.wout + j) * LANES;
                    for l in 0..lanes_here {
                        out[(((b0 + l) * g.cout + co) * g.hout + i) * g.wout + j] = ob[src + l] + bv;
                    }
                }
            }
        }
        b0 += LANES;
    }
    Tensor::new(Shape::from_dims(&[g.batch, g.cout, g.hout, g.wout])?, out)
}

/// Gradients w.r.t. input, weights, and bias.
///
/// Runs on plain row-major buffers with a padded scratch copy; all loops have
/// fixed iteration order so gradients are deterministic.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    cfg: &Conv2dCfg,
    dy: &Tensor,
    want_dx: bool,
    want_dw: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let g = geometry(x, w, None, cfg)?;
    let (dyb, dyc, dyh, dyw) = dy.shape().as_bchw()?;
    if (dyb, dyc, dyh, dyw) != (g.batch, g.cout, g.hout, g.wout) {
        return Err(LpsError::shape("conv2d backward: dy shape mismatch".into()));
    }
    let dyd = dy.data();
    let wd = w.data();
    let ktaps = g.k1 * g.k2;
    let pad = cfg.padding;

    // Bias gradient: plain reduction over batch and space.
    let mut dbias = vec![0.0; g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let base = ((b * g.cout + co) * g.hout) * g.wout;
            let mut acc = 0.0;
            for t in 0..g.hout * g.wout {
                acc += dyd[base + t];
            }
            dbias[co] += acc;
        }
    }

    let mut dw = if want_dw { Some(vec![0.0; g.cout * g.cin * ktaps]) } else { None };
    let mut dx = if want_dx { Some(vec![0.0; g.batch * g.cin * g.h * g.w]) } else { None };
    let mut dxp = vec![0.0; g.hp * g.wp];
    let mut xpad = vec![0.0; g.hp * g.wp];
    let xd = x.data();

    for b in 0..g.batch {
        for ci in 0..g.cin {
            // Padded copy of this input plane (both grads need it / its adjoint).
            xpad.fill(0.0);
            for ip in 0..g.hp {
                let si = ip as i64 - pad as i64;
                let si = match cfg.pad_mode {
                    PadMode::Circular => si.rem_euclid(g.h as i64) as usize,
                    PadMode::Zero => {
                        if si < 0 || si >= g.h as i64 {
                            continue;
                        }
                        si as usize
                    }
                };
                for jp in 0..g.wp {
                    let sj = jp as i64 - pad as i64;
                    let sj = match cfg.pad_mode {
                        PadMode::Circular => sj.rem_euclid(g.w as i64) as usize,
                        PadMode::Zero => {
                            if sj < 0 || sj >= g.w as i64 {
                                continue;
                            }
                            sj as usize
                        }
                    };
                    xpad[ip * g.wp + jp] = xd[((b * g.cin + ci) * g.h + si) * g.w + sj];
                }
            }
            dxp.fill(0.0);
            for co in 0..g.cout {
                let dyp = &dyd[((b * g.cout + co) * g.hout) * g.wout..][..g.hout * g.wout];
                for u in 0..g.k1 {
                    for v in 0..g.k2 {
                        let wv = wd[(co * g.cin + ci) * ktaps + u * g.k2 + v];
                        let mut dwacc = 0.0;
                        for i in 0..g.hout {
                            let dyrow = &dyp[i * g.wout..(i + 1) * g.wout];
                            let prow = (i * cfg.stride + u) * g.wp + v;
                            if cfg.stride == 1 {
                                let xrow = &xpad[prow..prow + g.wout];
                                if want_dw {
                                    for j in 0..g.wout {
                                        dwacc = dyrow[j].mul_add(xrow[j], dwacc);
                                    }
                                }
                                if want_dx {
                                    let drow = &mut dxp[prow..prow + g.wout];
                                    for j in 0..g.wout {
                                        drow[j] = dyrow[j].mul_add(wv, drow[j]);
                                    }
                                }
                            } else {
                                for j in 0..g.wout {
                                    let idx = (i * cfg.stride + u) * g.wp + j * cfg.stride + v;
                                    if want_dw {
                                        dwacc = dyrow[j].mul_add(xpad[idx], dwacc);
                                    }
                                    if want_dx {
                                        dxp[idx] = dyrow[j].mul_add(wv, dxp[idx]);
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[(co * g.cin + ci) * ktaps + u * g.k2 + v] += dwacc;
                        }
                    }
                }
            }
            // Fold the padded gradient back onto the input (adjoint of padding).
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[((b * g.cin + ci) * g.h) * g.w..][..g.h * g.w];
                for ip in 0..g.hp {
                    let si = ip as i64 - pad as i64;
                    let si = match cfg.pad_mode {
                        PadMode::Circular => si.rem_euclid(g.h as i64) as usize,
                        PadMode::Zero => {
                            if si < 0 || si >= g.h as i64 {
                                continue;
                            }
                            si as usize
                        }
                    };
                    for jp in 0..g.wp {
                        let sj = jp as i64 - pad as i64;
                        let sj = match cfg.pad_mode {
                            PadMode::Circular => sj.rem_euclid(g.w as i64) as usize,
                            PadMode::Zero => {
                                if sj < 0 || sj >= g.w as i64 {
                                    continue;
                                }
                                sj as usize
                            }
                        };
                        dst[si * g.w + sj] += dxp[ip * g.wp + jp];
                    }
                }
            }
        }
    }

    let dx = match dx {
        Some(d) => Some(Tensor::new(x.shape().clone(), d)?),
        None => None,
    };
    let dw = match dw {
        Some(d) => Some(Tensor::new(w.shape().clone(), d)?),
        None => None,
    };
    let dbias = Tensor::from_vec(&[g.cout], dbias)?;
    Ok((dx, dw, dbias))
}

/// Depthwise separable filter: the same 1D taps run along width then height,
/// stride 1, extent preserving, each channel independent. Used by the
/// anti-aliasing low-pass stage; `gain` scales the result once at the end.
pub fn sep_depthwise_forward(x: &Tensor, taps: &[f64], gain: f64, pad_mode: PadMode) -> Result<Tensor> {
    let (b, c, h, w) = x.shape().as_bchw()?;
    if taps.is_empty() {
        return Err(LpsError::invalid("separable filter: empty taps".into()));
    }
    if pad_mode == PadMode::Circular && taps.len() > w.min(h) {
        return Err(LpsError::invalid(format!(
            "separable filter: {} taps exceed spatial extent {}x{}",
            taps.len(),
            h,
            w
        )));
    }
    let center = (taps.len() - 1) / 2;
    let planes = b * c;
    let xd = x.data();
    let mut mid = vec![0.0; planes * h * w];
    // Width pass.
    for p in 0..planes {
        for i in 0..h {
            let row = &xd[(p * h + i) * w..(p * h + i + 1) * w];
            let orow = &mut mid[(p * h + i) * w..(p * h + i + 1) * w];
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    let sj = j as i64 + t as i64 - center as i64;
                    let xv = match pad_mode {
                        PadMode::Circular => row[sj.rem_euclid(w as i64) as usize],
                        PadMode::Zero => {
                            if sj < 0 || sj >= w as i64 {
                                0.0
                            } else {
                                row[sj as usize]
                            }
                        }
                    };
                    acc = xv.mul_add(tv, acc);
                }
                orow[j] = acc;
            }
        }
    }
    // Height pass + gain.
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    let si = i as i64 + t as i64 - center as i64;
                    let xv = match pad_mode {
                        PadMode::Circular => mid[(p * h + si.rem_euclid(h as i64) as usize) * w + j],
                        PadMode::Zero => {
                            if si < 0 || si >= h as i64 {
                                0.0
                            } else {
                                mid[(p * h + si as usize) * w + j]
                            }
                        }
                    };
                    acc = xv.mul_add(tv, acc);
                }
                out[(p * h + i) * w + j] = acc * gain;
            }
        }
    }
    Tensor::new(x.shape().clone(), out)
}

/// Adjoint of [`sep_depthwise_forward`]: reversed taps, passes in reverse order.
pub fn sep_depthwise_backward(dy: &Tensor, taps: &[f64], gain: f64, pad_mode: PadMode) -> Result<Tensor> {
    let reversed: Vec<f64> = taps.iter().rev().copied().collect();
    // The adjoint of "offset t-center" is "offset center-t", i.e. reversed taps
    // around the mirrored center.
    let center = (taps.len() - 1) / 2;
    let mirrored_center = taps.len() - 1 - center;
    sep_depthwise_with_center(dy, &reversed, mirrored_center, gain, pad_mode)
}

fn sep_depthwise_with_center(
    x: &Tensor,
    taps: &[f64],
    center: usize,
    gain: f64,
    pad_mode: PadMode,
) -> Result<Tensor> {
    let (b, c, h, w) = x.shape().as_bchw()?;
    let planes = b * c;
    let xd = x.data();
    let mut mid = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    let si = i as i64 + t as i64 - center as i64;
                    let xv = match pad_mode {
                        PadMode::Circular => xd[(p * h + si.rem_euclid(h as i64) as usize) * w + j],
                        PadMode::Zero => {
                            if si < 0 || si >= h as i64 {
                                0.0
                            } else {
                                xd[(p * h + si as usize) * w + j]
                            }
                        }
                    };
                    acc = xv.mul_add(tv, acc);
                }
                mid[(p * h + i) * w + j] = acc;
            }
        }
    }
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            let row = &mid[(p * h + i) * w..(p * h + i + 1) * w];
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    let sj = j as i64 + t as i64 - center as i64;
                    let xv = match pad_mode {
                        PadMode::Circular => row[sj.rem_euclid(w as i64) as usize],
                        PadMode::Zero => {
                            if sj < 0 || sj >= w as i64 {
                                0.0
                            } else {
                                row[sj as usize]
                            }
                        }
                    };
                    acc = xv.mul_add(tv, acc);
                }
                out[(p * h + i) * w + j] = acc * gain;
            }
        }
    }
    Tensor::new(x.shape().clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straightforward reference convolution, one element at a time.
    fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, cfg: &Conv2dCfg) -> Tensor {
        let (b, cin, h, wid) = x.shape().as_bchw().unwrap();
        let (cout, _, k1, k2) = w.shape().as_bchw().unwrap();
        let hp = h + 2 * cfg.padding;
        let wp = wid + 2 * cfg.padding;
        let hout = (hp - k1) / cfg.stride + 1;
        let wout = (wp - k2) / cfg.stride + 1;
        let fetch = |bi: usize, ci: usize, ip: i64, jp: i64| -> f64 {
            let si = ip - cfg.padding as i64;
            let sj = jp - cfg.padding as i64;
            match cfg.pad_mode {
                PadMode::Circular => {
                    let si = si.rem_euclid(h as i64) as usize;
                    let sj = sj.rem_euclid(wid as i64) as usize;
                    x.data()[((bi * cin + ci) * h + si) * wid + sj]
                }
                PadMode::Zero => {
                    if si < 0 || si >= h as i64 || sj < 0 || sj >= wid as i64 {
                        0.0
                    } else {
                        x.data()[((bi * cin + ci) * h + si as usize) * wid + sj as usize]
                    }
                }
            }
        };
        let mut out = vec![0.0; b * cout * hout * wout];
        for bi in 0..b {
            for co in 0..cout {
                for i in 0..hout {
                    for j in 0..wout {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for u in 0..k1 {
                                for v in 0..k2 {
                                    acc = fetch(bi, ci, (i * cfg.stride + u) as i64, (j * cfg.stride + v) as i64)
                                        .mul_add(w.data()[(co * cin + ci) * k1 * k2 + u * k2 + v], acc);
                                }
                            }
                        }
                        out[((bi * cout + co) * hout + i) * wout + j] =
                            acc + bias.map(|bv| bv.data()[co]).unwrap_or(0.0);
                    }
                }
            }
        }
        Tensor::from_vec(&[b, cout, hout, wout], out).unwrap()
    }

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let cfg = Conv2dCfg { stride: 1, padding: 0, pad_mode: PadMode::Zero };
        let y = conv2d_forward(&x, &w, None, &cfg).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn impulse_with_ones_kernel_wraps() {
        // Impulse at (0,0) on 4x4 zeros, 3x3 all-ones kernel, circular pad 1:
        // ones at the 9 positions wrapping around (0,0).
        let mut xd = vec![0.0; 16];
        xd[0] = 1.0;
        let x = Tensor::from_vec(&[1, 1, 4, 4], xd).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d_forward(&x, &w, None, &Conv2dCfg::same_circular()).unwrap();
        let oracle = conv_oracle(&x, &w, None, &Conv2dCfg::same_circular());
        assert_eq!(y.data(), oracle.data());
        let mut expect = vec![0.0; 16];
        for &i in &[0usize, 1, 3] {
            for &j in &[0usize, 1, 3] {
                expect[i * 4 + j] = 1.0;
            }
        }
        assert_eq!(y.data(), &expect[..]);
    }

    #[test]
    fn matches_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cases = [
            (2, 3, 4, 6, 6, 3, 1, 1, PadMode::Circular),
            (1, 2, 5, 8, 8, 3, 1, 1, PadMode::Zero),
            (3, 1, 2, 4, 4, 1, 1, 0, PadMode::Zero),
            (9, 3, 7, 6, 8, 3, 1, 1, PadMode::Circular),
            (2, 4, 4, 8, 8, 3, 2, 1, PadMode::Zero),
            (1, 2, 3, 10, 10, 5, 1, 2, PadMode::Circular),
            (2, 3, 2, 6, 6, 2, 2, 0, PadMode::Zero),
        ];
        for &(b, cin, cout, h, w, k, stride, pad, mode) in &cases {
            let x = rand_tensor(&[b, cin, h, w], &mut rng);
            let wt = rand_tensor(&[cout, cin, k, k], &mut rng);
            let bias = rand_tensor(&[cout], &mut rng);
            let cfg = Conv2dCfg { stride, padding: pad, pad_mode: mode };
            let got = conv2d_forward(&x, &wt, Some(&bias), &cfg).unwrap();
            let want = conv_oracle(&x, &wt, Some(&bias), &cfg);
            assert_eq!(got.shape(), want.shape());
            let diff = got.max_abs_diff(&want).unwrap();
            assert!(diff < 1e-12, "case {b},{cin},{cout},{h},{w},{k},{stride},{pad},{mode:?}: diff {diff}");
        }
    }

    #[test]
    fn circular_conv_commutes_with_roll_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let x = rand_tensor(&[2, 3, 6, 8], &mut rng);
            let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
            let s1 = rng.gen_range(0..6);
            let s2 = rng.gen_range(0..8);
            let cfg = Conv2dCfg::same_circular();
            let a = conv2d_forward(&x.roll(s1, s2), &w, None, &cfg).unwrap();
            let b = conv2d_forward(&x, &w, None, &cfg).unwrap().roll(s1, s2);
            assert_eq!(a.data(), b.data(), "trial {trial}: shift commutation not bit-exact");
        }
    }

    #[test]
    fn batched_equals_single_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[11, 3, 6, 6], &mut rng);
        let w = rand_tensor(&[5, 3, 3, 3], &mut rng);
        let bias = rand_tensor(&[5], &mut rng);
        let cfg = Conv2dCfg::same_circular();
        let all = conv2d_forward(&x, &w, Some(&bias), &cfg).unwrap();
        for b in 0..11 {
            let one = Tensor::from_vec(&[1, 3, 6, 6], x.data()[b * 108..(b + 1) * 108].to_vec()).unwrap();
            let y = conv2d_forward(&one, &w, Some(&bias), &cfg).unwrap();
            let chunk = 5 * 36;
            assert_eq!(y.data(), &all.data()[b * chunk..(b + 1) * chunk]);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::zeros(Shape::from_dims(&[1, 2, 4, 4]).unwrap());
        let w = Tensor::zeros(Shape::from_dims(&[1, 3, 3, 3]).unwrap());
        assert!(conv2d_forward(&x, &w, None, &Conv2dCfg::same_circular()).is_err());
        let w = Tensor::zeros(Shape::from_dims(&[1, 2, 3, 3]).unwrap());
        let cfg = Conv2dCfg { stride: 0, padding: 1, pad_mode: PadMode::Circular };
        assert!(conv2d_forward(&x, &w, None, &cfg).is_err());
        let cfg = Conv2dCfg { stride: 1, padding: 4, pad_mode: PadMode::Circular };
        assert!(conv2d_forward(&x, &w, None, &cfg).is_err());
    }

    #[test]
    fn separable_filter_matches_hand_results() {
        let mut xd = vec![0.0; 16];
        xd[1] = 1.0; // impulse at (0,1)
        let x = Tensor::from_vec(&[1, 1, 4, 4], xd).unwrap();
        let y = sep_depthwise_forward(&x, &[0.25, 0.5, 0.25], 1.0, PadMode::Circular).unwrap();
        // Row 0 of the width pass is [0.25,0.5,0.25,0]; height pass spreads it.
        let row0: Vec<f64> = y.data()[0..4].to_vec();
        assert_eq!(row0, vec![0.125, 0.25, 0.125, 0.0]);
    }

    #[test]
    fn separable_constant_preserved_by_unit_dc() {
        let x = Tensor::full(Shape::from_dims(&[2, 3, 4, 4]).unwrap(), 2.5);
        for taps in [vec![0.5, 0.5], vec![0.25, 0.5, 0.25], vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0]] {
            let y = sep_depthwise_forward(&x, &taps, 1.0, PadMode::Circular).unwrap();
            let diff = y.max_abs_diff(&x).unwrap();
            assert!(diff < 1e-12, "taps {taps:?}: {diff}");
        }
    }

    #[test]
    fn separable_commutes_with_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
        let taps = [0.25, 0.5, 0.25];
        let a = sep_depthwise_forward(&x.roll(2, 5), &taps, 4.0, PadMode::Circular).unwrap();
        let b = sep_depthwise_forward(&x, &taps, 4.0, PadMode::Circular).unwrap().roll(2, 5);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn separable_adjoint_identity() {
        // <A x, y> == <x, A^T y> for random x, y in both pad modes.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for mode in [PadMode::Circular, PadMode::Zero] {
            for taps in [vec![0.5, 0.5], vec![0.2, 0.5, 0.3]] {
                let x = rand_tensor(&[1, 2, 5, 6], &mut rng);
                let y = rand_tensor(&[1, 2, 5, 6], &mut rng);
                let ax = sep_depthwise_forward(&x, &taps, 3.0, mode).unwrap();
                let aty = sep_depthwise_backward(&y, &taps, 3.0, mode).unwrap();
                let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "{mode:?} {taps:?}: {lhs} vs {rhs}");
            }
        }
    }
}
