//! Semi-global block matching on rectified grayscale pairs.

use super::GrayImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SgbmParams {
    /// Odd side of the SAD matching block.
    pub block: usize,
    pub max_disparity: usize,
    /// Penalty for a one-pixel disparity change along a path.
    pub p1: f64,
    /// Penalty for larger jumps.
    pub p2: f64,
    /// Best cost must beat every non-adjacent candidate by this fraction.
    pub uniqueness: f64,
    /// Allowed left/right disagreement in pixels.
    pub lr_tolerance: f64,
    /// Minimum spread of raw block costs across candidates; flatter pixels
    /// cannot be matched and are marked invalid.
    pub min_texture: f64,
}

impl Default for SgbmParams {
    fn default() -> Self {
        Self {
            block: 5,
            max_disparity: 64,
            p1: 8.0 * 25.0,
            p2: 32.0 * 25.0,
            uniqueness: 0.05,
            lr_tolerance: 1.0,
            min_texture: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub max_disparity: usize,
    /// Sub-pixel disparity; 0 where invalid.
    pub disparity: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len() as f64
    }
}

/// Sum over a `block x block` neighbourhood with replicated borders.
fn block_sum(src: &[f64], w: usize, h: usize, block: usize) -> Vec<f64> {
    let r = (block / 2) as isize;
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|k| src[y * w + (x as isize + k).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for k in -r..=r {
            let yi = (y as isize + k).clamp(0, h as isize - 1) as usize;
            for x in 0..w {
                out[y * w + x] += rows[yi * w + x];
            }
        }
    }
    out
}

/// Adds one aggregation path to `total`. `order` lists pixel indices along
/// each scanline in traversal order.
fn aggregate(cost: &[f64], nd: usize, lines: &[Vec<usize>], p1: f64, p2: f64, total: &mut [f64]) {
    let mut prev = vec![0.0; nd];
    let mut cur = vec![0.0; nd];
    for line in lines {
        for (step, &p) in line.iter().enumerate() {
            let c = &cost[p * nd..(p + 1) * nd];
            if step == 0 {
                cur.copy_from_slice(c);
            } else {
                let min_prev = prev.iter().cloned().fold(f64::INFINITY, f64::min);
                for d in 0..nd {
                    let mut best = prev[d];
                    if d > 0 {
                        best = best.min(prev[d - 1] + p1);
                    }
                    if d + 1 < nd {
                        best = best.min(prev[d + 1] + p1);
                    }
                    best = best.min(min_prev + p2);
                    cur[d] = c[d] + best - min_prev;
                }
            }
            for (t, v) in total[p * nd..(p + 1) * nd].iter_mut().zip(&cur) {
                *t += v;
            }
            std::mem::swap(&mut prev, &mut cur);
        }
    }
}

/// Dense disparity of `left` against `right`, where a left pixel at `x`
/// appears in the right view at `x - d`.
pub fn sgbm_disparity(
    left: &GrayImage,
    right: &GrayImage,
    params: &SgbmParams,
) -> Result<DisparityMap> {
    left.same_size(right)?;
    let (w, h) = (left.width, left.height);
    if params.max_disparity >= w {
        return Err(Error::Config(format!(
            "max disparity {} must be below image width {w}",
            params.max_disparity
        )));
    }
    if params.block % 2 == 0 {
        return Err(Error::Config(format!(
            "block size {} must be odd",
            params.block
        )));
    }
    let nd = params.max_disparity + 1;
    // disparities that would leave the right image get the worst possible cost
    let worst = 255.0 * (params.block * params.block) as f64;
    let mut cost = vec![worst; w * h * nd];
    for d in 0..nd {
        let diff: Vec<f64> = (0..w * h)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                if x >= d {
                    (left.at(x, y) - right.at(x - d, y)).abs()
                } else {
                    255.0
                }
            })
            .collect();
        for (p, s) in block_sum(&diff, w, h, params.block).into_iter().enumerate() {
            if p % w >= d {
                cost[p * nd + d] = s;
            }
        }
    }

    let rows: Vec<Vec<usize>> = (0..h)
        .map(|y| (0..w).map(|x| y * w + x).collect())
        .collect();
    let cols: Vec<Vec<usize>> = (0..w)
        .map(|x| (0..h).map(|y| y * w + x).collect())
        .collect();
    let rev = |v: &Vec<Vec<usize>>| -> Vec<Vec<usize>> {
        v.iter()
            .map(|l| l.iter().rev().copied().collect())
            .collect()
    };
    let mut total = vec![0.0; w * h * nd];
    for lines in [&rows, &rev(&rows), &cols, &rev(&cols)] {
        aggregate(&cost, nd, lines, params.p1, params.p2, &mut total);
    }

    let mut map = DisparityMap {
        width: w,
        height: h,
        max_disparity: params.max_disparity,
        disparity: vec![0.0; w * h],
        valid: vec![false; w * h],
    };
    let mut int_disp = vec![usize::MAX; w * h];
    for p in 0..w * h {
        let s = &total[p * nd..(p + 1) * nd];
        let dmax = (p % w).min(params.max_disparity);
        let raw = &cost[p * nd..=p * nd + dmax];
        let spread = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - raw.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread < params.min_texture {
            continue;
        }
        let (best, &bc) = s[..=dmax]
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let rival = s[..=dmax]
            .iter()
            .enumerate()
            .filter(|(d, _)| d.abs_diff(best) > 1)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        if rival.is_finite() && rival <= bc * (1.0 + params.uniqueness) {
            continue;
        }
        int_disp[p] = best;
        let mut d = best as f64;
        if best > 0 && best < dmax {
            let (a, c) = (s[best - 1], s[best + 1]);
            let denom = a - 2.0 * bc + c;
            if denom > 0.0 {
                d += 0.5 * (a - c) / denom;
            }
        }
        map.disparity[p] = d.clamp(0.0, params.max_disparity as f64);
    }

    // right-view disparity from the same cost volume, then consistency check
    let mut right_disp = vec![f64::NAN; w * h];
    for y in 0..h {
        for xr in 0..w {
            let mut best = (f64::INFINITY, 0usize);
            for d in 0..nd.min(w - xr) {
                let v = total[(y * w + xr + d) * nd + d];
                if v < best.0 {
                    best = (v, d);
                }
            }
            right_disp[y * w + xr] = best.1 as f64;
        }
    }
    for p in 0..w * h {
        if int_disp[p] == usize::MAX {
            continue;
        }
        let (x, y) = (p % w, p / w);
        let xr = x - int_disp[p];
        if (right_disp[y * w + xr] - int_disp[p] as f64).abs() <= params.lr_tolerance {
            map.valid[p] = true;
        } else {
            map.disparity[p] = 0.0;
        }
    }
    for p in 0..w * h {
        if !map.valid[p] {
            map.disparity[p] = 0.0;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::testing::{median, texture};

    fn params(max_d: usize) -> SgbmParams {
        SgbmParams {
            max_disparity: max_d,
            ..SgbmParams::default()
        }
    }

    fn image(size: usize, offset: f64) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| texture(x as f64 + offset, y as f64))
    }

    #[test]
    fn identical_views_have_zero_disparity() {
        let a = image(64, 0.0);
        let m = sgbm_disparity(&a, &a, &params(16)).unwrap();
        let valid: Vec<f64> = (0..m.valid.len())
            .filter(|&i| m.valid[i])
            .map(|i| m.disparity[i])
            .collect();
        assert!(!valid.is_empty());
        let near_zero = valid.iter().filter(|d| d.abs() < 0.5).count();
        assert!(near_zero as f64 >= 0.95 * valid.len() as f64);
    }

    #[test]
    fn constant_shift_is_recovered() {
        let left = image(80, 0.0);
        let right = image(80, 8.0);
        let m = sgbm_disparity(&left, &right, &params(24)).unwrap();
        let mut interior = Vec::new();
        for y in 8..72 {
            for x in 32..72 {
                let p = y * 80 + x;
                if m.valid[p] {
                    interior.push(m.disparity[p]);
                }
            }
        }
        assert!(interior.len() > 1000);
        assert!((median(interior.clone()) - 8.0).abs() <= 1.0);
        let good = interior.iter().filter(|d| (*d - 8.0).abs() <= 1.0).count();
        assert!(good as f64 >= 0.9 * interior.len() as f64);
    }

    #[test]
    fn flat_images_are_mostly_invalid() {
        let a = GrayImage::from_fn(48, 48, |_, _| 100.0);
        let m = sgbm_disparity(&a, &a, &params(16)).unwrap();
        assert!(m.valid_fraction() <= 0.5);
        assert!(m.disparity.iter().all(|&d| d >= 0.0 && d <= 16.0));
    }

    #[test]
    fn config_and_shape_errors() {
        let a = image(32, 0.0);
        assert!(matches!(
            sgbm_disparity(&a, &a, &params(32)),
            Err(Error::Config(_))
        ));
        let b = image(16, 0.0);
        assert!(matches!(
            sgbm_disparity(&a, &b, &params(8)),
            Err(Error::Shape(_))
        ));
    }
}
