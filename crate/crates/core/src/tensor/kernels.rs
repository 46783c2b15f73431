//! Raw numeric kernels behind the graph operations.
//!
//! Convolution and pooling work on a canonical channels-last layout with
//! three spatial axes: `(batch, d0, d1, d2, channels)`. Lower-dimensional
//! layers are expressed by padding the spatial shape with ones.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size.
    #[default]
    Same,
    /// Only positions where the kernel fits entirely.
    Valid,
}

impl std::str::FromStr for Padding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            _ => Err(Error::Config(format!("unknown padding {s:?}"))),
        }
    }
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        })
    }
}

/// `c = a·b` (or `c += a·b`), row-major. `ta`/`tb` read the operand as its
/// transpose: `a` is then stored `k×m`, `b` stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub dims: [usize; 3],
    pub cin: usize,
    pub k: [usize; 3],
    pub cout: usize,
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        dims: [usize; 3],
        cin: usize,
        k: [usize; 3],
        kcin: usize,
        cout: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kcin != cin {
            return Err(Error::Shape(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        let mut pad = [0; 3];
        let mut out = [0; 3];
        for a in 0..3 {
            if k[a] == 0 {
                return Err(Error::Shape("zero-sized kernel".into()));
            }
            match padding {
                Padding::Valid => {
                    if k[a] > dims[a] {
                        return Err(Error::Shape(format!(
                            "kernel {:?} larger than input {:?}",
                            k, dims
                        )));
                    }
                    out[a] = dims[a] - k[a] + 1;
                }
                Padding::Same => {
                    pad[a] = (k[a] - 1) / 2;
                    out[a] = dims[a];
                }
            }
        }
        Ok(Self {
            batch,
            dims,
            cin,
            k,
            cout,
            pad,
            out,
        })
    }

    pub fn in_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.cin
    }

    pub fn positions(&self) -> usize {
        self.out.iter().product()
    }

    pub fn patch(&self) -> usize {
        self.k.iter().product::<usize>() * self.cin
    }

    pub fn out_len(&self) -> usize {
        self.positions() * self.cout
    }

    /// Input offset for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn source(&self, o: [usize; 3], t: [usize; 3]) -> Option<usize> {
        let mut idx = 0;
        for a in 0..3 {
            let p = (o[a] + t[a]) as isize - self.pad[a] as isize;
            if p < 0 || p >= self.dims[a] as isize {
                return None;
            }
            idx = idx * self.dims[a] + p as usize;
        }
        Some(idx * self.cin)
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let [o0, o1, o2] = self.out;
        let [k0, k1, k2] = self.k;
        let mut row = 0;
        for a in 0..o0 {
            for b in 0..o1 {
                for c in 0..o2 {
                    let mut col = 0;
                    for i in 0..k0 {
                        for j in 0..k1 {
                            for l in 0..k2 {
                                f(row, col, self.source([a, b, c], [i, j, l]));
                                col += self.cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let patch = self.patch();
        let cin = self.cin;
        self.for_each_tap(|row, col, src| {
            let dst = &mut cols[row * patch + col..row * patch + col + cin];
            match src {
                Some(s) => dst.copy_from_slice(&x[s..s + cin]),
                None => dst.fill(0.0),
            }
        });
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let patch = self.patch();
        let cin = self.cin;
        self.for_each_tap(|row, col, src| {
            if let Some(s) = src {
                let g = &cols[row * patch + col..row * patch + col + cin];
                for (d, v) in gx[s..s + cin].iter_mut().zip(g) {
                    *d += v;
                }
            }
        });
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (p, patch, cout) = (g.positions(), g.patch(), g.cout);
    let mut out = vec![0.0; g.batch * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o, xs)| {
            let mut cols = vec![0.0; p * patch];
            g.im2col(xs, &mut cols);
            if let Some(b) = bias {
                for row in o.chunks_mut(cout) {
                    row.copy_from_slice(b);
                }
            }
            gemm(
                p,
                patch,
                cout,
                &cols,
                false,
                kernel,
                false,
                o,
                bias.is_some(),
            );
        });
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    gy: &[f64],
    want_input: bool,
) -> ConvGrads {
    let (p, patch, cout) = (g.positions(), g.patch(), g.cout);
    let mut gx = if want_input {
        vec![0.0; g.batch * g.in_len()]
    } else {
        Vec::new()
    };
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..g.batch)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
            let gys = &gy[s * g.out_len()..(s + 1) * g.out_len()];
            let mut cols = vec![0.0; p * patch];
            g.im2col(xs, &mut cols);
            let mut gk = vec![0.0; patch * cout];
            gemm(patch, p, cout, &cols, true, gys, false, &mut gk, false);
            let mut gb = vec![0.0; cout];
            for row in gys.chunks(cout) {
                for (d, v) in gb.iter_mut().zip(row) {
                    *d += v;
                }
            }
            (gk, gb)
        })
        .collect();
    if want_input {
        gx.par_chunks_mut(g.in_len())
            .zip(gy.par_chunks(g.out_len()))
            .for_each(|(gxs, gys)| {
                let mut gcols = vec![0.0; p * patch];
                gemm(p, cout, patch, gys, false, kernel, true, &mut gcols, false);
                g.col2im(&gcols, gxs);
            });
    }
    // Summed in sample order so the result does not depend on thread count.
    let mut gk = vec![0.0; patch * cout];
    let mut gb = vec![0.0; cout];
    for (k, b) in &partials {
        for (d, v) in gk.iter_mut().zip(k) {
            *d += v;
        }
        for (d, v) in gb.iter_mut().zip(b) {
            *d += v;
        }
    }
    ConvGrads {
        input: want_input.then_some(gx),
        kernel: gk,
        bias: gb,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub batch: usize,
    pub dims: [usize; 3],
    pub channels: usize,
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub out: [usize; 3],
}

impl PoolGeom {
    pub fn new(
        batch: usize,
        dims: [usize; 3],
        channels: usize,
        window: [usize; 3],
        stride: [usize; 3],
    ) -> Result<Self> {
        let mut out = [0; 3];
        for a in 0..3 {
            if window[a] == 0 || stride[a] == 0 {
                return Err(Error::Shape("zero pool window or stride".into()));
            }
            if window[a] > dims[a] {
                return Err(Error::Shape(format!(
                    "pool window {window:?} larger than input {dims:?}"
                )));
            }
            out[a] = (dims[a] - window[a]) / stride[a] + 1;
        }
        Ok(Self {
            batch,
            dims,
            channels,
            window,
            stride,
            out,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out.iter().product::<usize>() * self.channels
    }
}

/// Max over each window; returns values and the flat input index of each
/// winner (first maximum on ties).
pub(crate) fn maxpool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let c = g.channels;
    let in_len = g.dims.iter().product::<usize>() * c;
    let mut out = Vec::with_capacity(g.batch * g.out_len());
    let mut arg = Vec::with_capacity(g.batch * g.out_len());
    for s in 0..g.batch {
        let base = s * in_len;
        for a in 0..g.out[0] {
            for b in 0..g.out[1] {
                for d in 0..g.out[2] {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for i in 0..g.window[0] {
                            for j in 0..g.window[1] {
                                for l in 0..g.window[2] {
                                    let p0 = a * g.stride[0] + i;
                                    let p1 = b * g.stride[1] + j;
                                    let p2 = d * g.stride[2] + l;
                                    let idx =
                                        base + ((p0 * g.dims[1] + p1) * g.dims[2] + p2) * c + ch;
                                    if x[idx] > best || best_i == usize::MAX {
                                        best = x[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
    }
    (out, arg)
}
