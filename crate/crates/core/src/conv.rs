//! 2-D cross-correlation kernels (dense, grouped, depthwise, dilated).
//!
//! Dense and grouped convolutions lower to `im2col` + GEMM per image and
//! group. Depthwise convolutions (one input and one output channel per
//! group) use direct loops, which are far cheaper than a 1-row GEMM.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Dense, stride 1, no padding, no dilation, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    /// `kernel`×`kernel` with "same" padding for the given dilation.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::new(in_channels, out_channels, kernel)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("conv {self:?}: {what}")));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return bad("kernel, stride, dilation and groups must be positive");
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return bad("channels not divisible by groups");
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// `Ci/groups * K^2 * Co`, plus `Co` with a bias.
    pub fn parameter_count(&self) -> usize {
        let weights = self.in_channels / self.groups * self.kernel * self.kernel * self.out_channels;
        weights + if self.bias { self.out_channels } else { 0 }
    }

    fn extent(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// `floor((H + 2p - d(K-1) - 1) / s) + 1` per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ext = self.extent();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < ext || wp < ext {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel extent {ext} after padding"),
            ));
        }
        Ok(((hp - ext) / self.stride + 1, (wp - ext) / self.stride + 1))
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output index range `[lo, hi)` along one axis for which `o*stride + off`
/// lands inside `[0, len)`.
#[inline]
fn valid_range(off: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
    let last = len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out_len);
    (lo, (hi as usize).clamp(lo, out_len))
}

struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn im2col<F: Real>(spec: &ConvSpec, g: &Geometry, x: &[F], channels: usize, cols: &mut [F]) {
    let k = spec.kernel;
    let p = g.ho * g.wo;
    for c in 0..channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let offy = (ky * spec.dilation) as isize - spec.padding as isize;
            let (ylo, yhi) = valid_range(offy, spec.stride, g.h, g.ho);
            for kx in 0..k {
                let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                let (xlo, xhi) = valid_range(offx, spec.stride, g.w, g.wo);
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                row.iter_mut().for_each(|v| *v = F::zero());
                for oy in ylo..yhi {
                    let iy = (oy * spec.stride) as isize + offy;
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    for ox in xlo..xhi {
                        dst[ox] = src[((ox * spec.stride) as isize + offx) as usize];
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(spec: &ConvSpec, g: &Geometry, cols: &[F], channels: usize, dx: &mut [F]) {
    let k = spec.kernel;
    let p = g.ho * g.wo;
    for c in 0..channels {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let offy = (ky * spec.dilation) as isize - spec.padding as isize;
            let (ylo, yhi) = valid_range(offy, spec.stride, g.h, g.ho);
            for kx in 0..k {
                let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                let (xlo, xhi) = valid_range(offx, spec.stride, g.w, g.wo);
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = (oy * spec.stride) as isize + offy;
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    let src = &row[oy * g.wo..][..g.wo];
                    for ox in xlo..xhi {
                        dst[((ox * spec.stride) as isize + offx) as usize] += src[ox];
                    }
                }
            }
        }
    }
}

/// Validates operand shapes; returns `(N, H, W, Ho, Wo)`.
pub fn check_shapes(
    spec: &ConvSpec,
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
) -> Result<(usize, usize, usize, usize, usize)> {
    spec.validate()?;
    let [n, c, h, w] = match *input {
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("input must be rank 4 (N,C,H,W), got {input:?}"),
            ))
        }
    };
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input channels: expected {}, got {c}", spec.in_channels),
        ));
    }
    let expect = spec.weight_shape();
    if weight != expect {
        return Err(Error::shape(
            "conv2d",
            format!("weight shape: expected {expect:?}, got {weight:?}"),
        ));
    }
    match (spec.bias, bias) {
        (true, Some(b)) if b == [spec.out_channels] => {}
        (false, None) => {}
        (true, Some(b)) => {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape: expected [{}], got {b:?}", spec.out_channels),
            ))
        }
        (true, None) => return Err(Error::shape("conv2d", "bias: expected, none given")),
        (false, Some(_)) => return Err(Error::shape("conv2d", "bias: given, spec has none")),
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok((n, h, w, ho, wo))
}

pub fn forward<F: Real>(
    spec: &ConvSpec,
    x: &[F],
    (n, h, w): (usize, usize, usize),
    weight: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    let (ho, wo) = spec.output_hw(h, w).expect("validated geometry");
    let g = Geometry { h, w, ho, wo };
    let (ci, co, groups) = (spec.in_channels, spec.out_channels, spec.groups);
    let (cig, cog) = (ci / groups, co / groups);
    let p = ho * wo;
    let kk = spec.kernel * spec.kernel;
    let mut out = vec![F::zero(); n * co * p];

    if spec.is_depthwise() {
        depthwise_forward(spec, &g, x, n, ci, weight, &mut out);
    } else {
        let mut cols = if spec.is_pointwise() {
            Vec::new()
        } else {
            vec![F::zero(); cig * kk * p]
        };
        for img in 0..n {
            for grp in 0..groups {
                let xs = &x[(img * ci + grp * cig) * h * w..][..cig * h * w];
                let b = if spec.is_pointwise() {
                    MatRef::row_major(xs, cig, p)
                } else {
                    im2col(spec, &g, xs, cig, &mut cols);
                    MatRef::row_major(&cols, cig * kk, p)
                };
                let wg = MatRef::row_major(&weight[grp * cog * cig * kk..][..cog * cig * kk], cog, cig * kk);
                let dst = &mut out[(img * co + grp * cog) * p..][..cog * p];
                gemm(wg, b, dst, false);
            }
        }
    }
    if let Some(bias) = bias {
        for img in 0..n {
            for (c, b) in bias.iter().enumerate() {
                out[(img * co + c) * p..][..p].iter_mut().for_each(|v| *v += *b);
            }
        }
    }
    out
}

/// Gradients w.r.t. input (if `dx` is given), weight and bias (accumulated).
#[allow(clippy::too_many_arguments)]
pub fn backward<F: Real>(
    spec: &ConvSpec,
    x: &[F],
    (n, h, w): (usize, usize, usize),
    weight: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let (ho, wo) = spec.output_hw(h, w).expect("validated geometry");
    let g = Geometry { h, w, ho, wo };
    let (ci, co, groups) = (spec.in_channels, spec.out_channels, spec.groups);
    let (cig, cog) = (ci / groups, co / groups);
    let p = ho * wo;
    let kk = spec.kernel * spec.kernel;

    if let Some(db) = db {
        for img in 0..n {
            for (c, b) in db.iter_mut().enumerate() {
                *b += dy[(img * co + c) * p..][..p].iter().copied().sum::<F>();
            }
        }
    }
    if spec.is_depthwise() {
        depthwise_backward(spec, &g, x, n, ci, weight, dy, dx, dw);
        return;
    }

    let mut dx = dx;
    let mut dw = dw;
    let pointwise = spec.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![F::zero(); cig * kk * p] };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![F::zero(); cig * kk * p]
    };
    for img in 0..n {
        for grp in 0..groups {
            let xs = &x[(img * ci + grp * cig) * h * w..][..cig * h * w];
            let dys = MatRef::row_major(&dy[(img * co + grp * cog) * p..][..cog * p], cog, p);
            let wg = MatRef::row_major(&weight[grp * cog * cig * kk..][..cog * cig * kk], cog, cig * kk);
            if let Some(dw) = dw.as_deref_mut() {
                let b = if pointwise {
                    MatRef::row_major(xs, cig, p)
                } else {
                    im2col(spec, &g, xs, cig, &mut cols);
                    MatRef::row_major(&cols, cig * kk, p)
                };
                let dwg = &mut dw[grp * cog * cig * kk..][..cog * cig * kk];
                gemm(dys, b.t(), dwg, true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxs = &mut dx[(img * ci + grp * cig) * h * w..][..cig * h * w];
                if pointwise {
                    gemm(wg.t(), dys, dxs, true);
                } else {
                    gemm(wg.t(), dys, &mut dcols, false);
                    col2im(spec, &g, &dcols, cig, dxs);
                }
            }
        }
    }
}

fn depthwise_forward<F: Real>(
    spec: &ConvSpec,
    g: &Geometry,
    x: &[F],
    n: usize,
    c: usize,
    weight: &[F],
    out: &mut [F],
) {
    let k = spec.kernel;
    for img in 0..n {
        for ch in 0..c {
            let plane = &x[(img * c + ch) * g.h * g.w..][..g.h * g.w];
            let dst = &mut out[(img * c + ch) * g.ho * g.wo..][..g.ho * g.wo];
            let kern = &weight[ch * k * k..][..k * k];
            for ky in 0..k {
                let offy = (ky * spec.dilation) as isize - spec.padding as isize;
                let (ylo, yhi) = valid_range(offy, spec.stride, g.h, g.ho);
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                    let (xlo, xhi) = valid_range(offx, spec.stride, g.w, g.wo);
                    for oy in ylo..yhi {
                        let iy = ((oy * spec.stride) as isize + offy) as usize;
                        let src = &plane[iy * g.w..][..g.w];
                        let row = &mut dst[oy * g.wo..][..g.wo];
                        for ox in xlo..xhi {
                            row[ox] += wv * src[((ox * spec.stride) as isize + offx) as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<F: Real>(
    spec: &ConvSpec,
    g: &Geometry,
    x: &[F],
    n: usize,
    c: usize,
    weight: &[F],
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
) {
    let k = spec.kernel;
    for img in 0..n {
        for ch in 0..c {
            let base_in = (img * c + ch) * g.h * g.w;
            let plane = &x[base_in..][..g.h * g.w];
            let grad = &dy[(img * c + ch) * g.ho * g.wo..][..g.ho * g.wo];
            for ky in 0..k {
                let offy = (ky * spec.dilation) as isize - spec.padding as isize;
                let (ylo, yhi) = valid_range(offy, spec.stride, g.h, g.ho);
                for kx in 0..k {
                    let offx = (kx * spec.dilation) as isize - spec.padding as isize;
                    let (xlo, xhi) = valid_range(offx, spec.stride, g.w, g.wo);
                    let wv = weight[ch * k * k + ky * k + kx];
                    let mut acc = F::zero();
                    for oy in ylo..yhi {
                        let iy = ((oy * spec.stride) as isize + offy) as usize;
                        let grow = &grad[oy * g.wo..][..g.wo];
                        for ox in xlo..xhi {
                            let ix = ((ox * spec.stride) as isize + offx) as usize;
                            acc += grow[ox] * plane[iy * g.w + ix];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[base_in + iy * g.w + ix] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[ch * k * k + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop reference.
    fn reference(spec: &ConvSpec, x: &[f64], n: usize, h: usize, w: usize, wt: &[f64]) -> Vec<f64> {
        let (ho, wo) = spec.output_hw(h, w).unwrap();
        let (cig, cog) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups);
        let k = spec.kernel;
        let mut out = vec![0.0; n * spec.out_channels * ho * wo];
        for img in 0..n {
            for oc in 0..spec.out_channels {
                let grp = oc / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for icl in 0..cig {
                            let ic = grp * cig + icl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((img * spec.in_channels + ic) * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * cig + icl) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((img * spec.out_channels + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn kernels_match_direct_reference() {
        let specs = [
            ConvSpec::new(3, 4, 3).padding(1),
            ConvSpec::new(4, 6, 3).stride(2).padding(1).groups(2),
            ConvSpec::new(5, 5, 5).stride(2).padding(2).groups(5),
            ConvSpec::new(3, 2, 3).dilation(2).padding(2),
            ConvSpec::new(3, 2, 1),
            ConvSpec::new(2, 2, 3).stride(3),
        ];
        for spec in specs {
            let (n, h, w) = (2, 7, 6);
            let x: Vec<f64> = (0..n * spec.in_channels * h * w).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
            let wshape = spec.weight_shape();
            let wt: Vec<f64> = (0..wshape.iter().product()).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect();
            let got = forward(&spec, &x, (n, h, w), &wt, None);
            let expect = reference(&spec, &x, n, h, w, &wt);
            assert_eq!(got.len(), expect.len(), "{spec:?}");
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec::new(1, 1, 3).stride(2).padding(1).dilation(2);
        // floor((9 + 2 - 4 - 1)/2) + 1 = 4
        assert_eq!(spec.output_hw(9, 9).unwrap(), (4, 4));
        assert!(ConvSpec::new(1, 1, 5).output_hw(3, 3).is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ConvSpec::new(256, 256, 3).parameter_count(), 589_824);
        assert_eq!(ConvSpec::new(256, 16, 1).parameter_count(), 4096);
        assert_eq!(ConvSpec::new(16, 16, 3).bias(true).parameter_count(), 2320);
        assert_eq!(ConvSpec::new(32, 32, 3).groups(32).parameter_count(), 288);
    }

    #[test]
    fn invalid_groups_rejected() {
        assert!(ConvSpec::new(6, 4, 3).groups(4).validate().is_err());
        assert!(ConvSpec::new(6, 4, 3).groups(2).validate().is_ok());
    }
}
