//! Dense optical flow by polynomial expansion on an image pyramid.

use super::GrayImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FarnebackParams {
    pub levels: usize,
    /// Size ratio between consecutive pyramid levels.
    pub scale: f64,
    /// Side of the box window used to average the displacement constraints.
    pub window: usize,
    pub iterations: usize,
    /// Half-width of the polynomial fit neighbourhood.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            levels: 3,
            scale: 0.5,
            window: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

/// Per-pixel displacement in pixels. A point at `x` in the first image is
/// found at `x + (dx, dy)` in the second.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.dx[i].hypot(self.dy[i])
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.dx.len())
            .map(|i| self.magnitude(i))
            .fold(0.0, f64::max)
    }
}

/// Quadratic model `xᵀAx + bᵀx + c` fitted around every pixel.
struct Expansion {
    width: usize,
    height: usize,
    /// Channels: b1, b2, a11, a22, a12.
    coef: [Vec<f64>; 5],
}

fn correlate_rows(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xi = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xi];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn correlate_cols(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for (k, kv) in kernel.iter().enumerate() {
        for y in 0..h {
            let yi = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let (dst, s) = (&mut out[y * w..(y + 1) * w], &src[yi * w..(yi + 1) * w]);
            for (d, v) in dst.iter_mut().zip(s) {
                *d += kv * v;
            }
        }
    }
    out
}

/// Inverts a small dense matrix by Gauss-Jordan elimination.
fn invert<const N: usize>(mut m: [[f64; N]; N]) -> [[f64; N]; N] {
    let mut inv = [[0.0; N]; N];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for j in 0..N {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..N {
            if r != col {
                let f = m[r][col];
                for j in 0..N {
                    m[r][j] -= f * m[col][j];
                    inv[r][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

fn expand(img: &GrayImage, n: usize, sigma: f64) -> Expansion {
    let (w, h) = (img.width, img.height);
    let offs: Vec<f64> = (-(n as isize)..=n as isize).map(|i| i as f64).collect();
    let g: Vec<f64> = offs
        .iter()
        .map(|x| (-x * x / (2.0 * sigma * sigma)).exp())
        .collect();
    let xg: Vec<f64> = offs.iter().zip(&g).map(|(x, g)| x * g).collect();
    let xxg: Vec<f64> = offs.iter().zip(&g).map(|(x, g)| x * x * g).collect();

    // basis 1, x, y, x², y², xy under the separable weight g(x)g(y)
    let basis = |x: f64, y: f64| [1.0, x, y, x * x, y * y, x * y];
    let mut gram = [[0.0; 6]; 6];
    for (j, &y) in offs.iter().enumerate() {
        for (i, &x) in offs.iter().enumerate() {
            let wgt = g[i] * g[j];
            let b = basis(x, y);
            for r in 0..6 {
                for c in 0..6 {
                    gram[r][c] += wgt * b[r] * b[c];
                }
            }
        }
    }
    let ginv = invert(gram);

    let r0 = correlate_rows(&img.data, w, h, &g);
    let r1 = correlate_rows(&img.data, w, h, &xg);
    let r2 = correlate_rows(&img.data, w, h, &xxg);
    let proj = [
        correlate_cols(&r0, w, h, &g),
        correlate_cols(&r1, w, h, &g),
        correlate_cols(&r0, w, h, &xg),
        correlate_cols(&r2, w, h, &g),
        correlate_cols(&r0, w, h, &xxg),
        correlate_cols(&r1, w, h, &xg),
    ];
    let mut coef: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; w * h]);
    for p in 0..w * h {
        let r: [f64; 6] = std::array::from_fn(|k| proj[k][p]);
        let c: [f64; 6] = std::array::from_fn(|k| (0..6).map(|j| ginv[k][j] * r[j]).sum());
        coef[0][p] = c[1];
        coef[1][p] = c[2];
        coef[2][p] = c[3];
        coef[3][p] = c[4];
        coef[4][p] = c[5] / 2.0;
    }
    Expansion {
        width: w,
        height: h,
        coef,
    }
}

fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn box_filter(src: &[f64], w: usize, h: usize, size: usize) -> Vec<f64> {
    let k = vec![1.0 / size as f64; size];
    correlate_cols(&correlate_rows(src, w, h, &k), w, h, &k)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn downscale(img: &GrayImage, scale: f64) -> GrayImage {
    let kernel = gaussian_kernel((1.0 / scale - 1.0) * 0.5);
    let blurred = correlate_cols(
        &correlate_rows(&img.data, img.width, img.height, &kernel),
        img.width,
        img.height,
        &kernel,
    );
    let w = ((img.width as f64 * scale).round() as usize).max(1);
    let h = ((img.height as f64 * scale).round() as usize).max(1);
    let (sx, sy) = (img.width as f64 / w as f64, img.height as f64 / h as f64);
    GrayImage::from_fn(w, h, |x, y| {
        bilinear(
            &blurred,
            img.width,
            img.height,
            (x as f64 + 0.5) * sx - 0.5,
            (y as f64 + 0.5) * sy - 0.5,
        )
    })
}

fn upscale_flow(flow: &FlowField, w: usize, h: usize) -> FlowField {
    let (sx, sy) = (flow.width as f64 / w as f64, flow.height as f64 / h as f64);
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = ((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
            out.dx[y * w + x] = bilinear(&flow.dx, flow.width, flow.height, cx, cy) / sx;
            out.dy[y * w + x] = bilinear(&flow.dy, flow.width, flow.height, cx, cy) / sy;
        }
    }
    out
}

/// One refinement of `flow` given expansions of both images.
fn refine(e1: &Expansion, e2: &Expansion, flow: &mut FlowField, window: usize) {
    let (w, h) = (e1.width, e1.height);
    let mut terms: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; w * h]);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (dx, dy) = (flow.dx[p], flow.dy[p]);
            let s = |c: usize| bilinear(&e2.coef[c], w, h, x as f64 + dx, y as f64 + dy);
            let a11 = 0.5 * (e1.coef[2][p] + s(2));
            let a22 = 0.5 * (e1.coef[3][p] + s(3));
            let a12 = 0.5 * (e1.coef[4][p] + s(4));
            let db1 = -0.5 * (s(0) - e1.coef[0][p]) + a11 * dx + a12 * dy;
            let db2 = -0.5 * (s(1) - e1.coef[1][p]) + a12 * dx + a22 * dy;
            terms[0][p] = a11 * a11 + a12 * a12;
            terms[1][p] = a11 * a12 + a12 * a22;
            terms[2][p] = a12 * a12 + a22 * a22;
            terms[3][p] = a11 * db1 + a12 * db2;
            terms[4][p] = a12 * db1 + a22 * db2;
        }
    }
    let t: Vec<Vec<f64>> = terms.iter().map(|c| box_filter(c, w, h, window)).collect();
    let scale = t[0].iter().chain(&t[2]).sum::<f64>() / (2 * w * h) as f64;
    let eps = 1e-6 * scale.max(1e-12);
    for p in 0..w * h {
        let (g11, g12, g22) = (t[0][p] + eps, t[1][p], t[2][p] + eps);
        let det = g11 * g22 - g12 * g12;
        flow.dx[p] = (g22 * t[3][p] - g12 * t[4][p]) / det;
        flow.dy[p] = (g11 * t[4][p] - g12 * t[3][p]) / det;
    }
}

/// Estimates dense motion from `prev` to `next`.
pub fn farneback_flow(
    prev: &GrayImage,
    next: &GrayImage,
    params: &FarnebackParams,
) -> Result<FlowField> {
    prev.same_size(next)?;
    if params.levels == 0
        || !(params.scale > 0.0 && params.scale < 1.0)
        || params.window == 0
        || params.poly_n == 0
    {
        return Err(Error::Config(format!("invalid flow parameters {params:?}")));
    }
    let mut pyramid = vec![(prev.clone(), next.clone())];
    for _ in 1..params.levels {
        let (a, b) = pyramid.last().unwrap();
        if a.width.min(a.height) < 2 * params.poly_n + 1 {
            break;
        }
        pyramid.push((downscale(a, params.scale), downscale(b, params.scale)));
    }
    let mut flow: Option<FlowField> = None;
    for (a, b) in pyramid.iter().rev() {
        let mut f = match flow {
            Some(f) => upscale_flow(&f, a.width, a.height),
            None => FlowField::zeros(a.width, a.height),
        };
        let e1 = expand(a, params.poly_n, params.poly_sigma);
        let e2 = expand(b, params.poly_n, params.poly_sigma);
        for _ in 0..params.iterations {
            refine(&e1, &e2, &mut f, params.window);
        }
        flow = Some(f);
    }
    let mut flow = flow.expect("pyramid has at least one level");
    let limit = prev.width as f64;
    for v in flow.dx.iter_mut().chain(flow.dy.iter_mut()) {
        *v = if v.is_finite() {
            v.clamp(-limit, limit)
        } else {
            0.0
        };
    }
    Ok(flow)
}
