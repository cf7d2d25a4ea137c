//! Formation operators and siamese augmentation on `b × c × h × w` batches.
//!
//! Every operator is piecewise linear in the pixel values and comes with a
//! vector–Jacobian product so matching objectives can differentiate through it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Dense 4-D tensor in `(b, c, h, w)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBatch {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("image batch dims must be >= 1, got {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("buffer length does not match the batch shape"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite pixel".into()));
        }
        Ok(ImageBatch { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        ImageBatch {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// One image per matrix row, row-major `(c, h, w)`.
    pub fn from_rows(x: &Matrix, c: usize, h: usize, w: usize) -> Result<Self> {
        if x.cols() != c * h * w {
            return Err(Error::shape(format!(
                "rows of width {} cannot be viewed as {c}x{h}x{w} images",
                x.cols()
            )));
        }
        ImageBatch::new([x.rows(), c, h, w], x.as_slice().to_vec())
    }

    /// Tabular rows as `b × 1 × 1 × n`.
    pub fn from_tabular(x: &Matrix) -> Result<Self> {
        ImageBatch::from_rows(x, 1, 1, x.cols())
    }

    pub fn to_rows(&self) -> Matrix {
        let [b, c, h, w] = self.shape;
        Matrix::from_vec(b, c * h * w, self.data.clone()).expect("consistent shape")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        let [_, cc, h, w] = self.shape;
        ((b * cc + c) * h + i) * w + j
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.idx(b, c, i, j);
        self.data[k] = v;
    }

    #[inline]
    fn add_at(&mut self, b: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.idx(b, c, i, j);
        self.data[k] += v;
    }

    pub fn scale_add(&self, alpha: f64, other: &ImageBatch, beta: f64) -> Result<ImageBatch> {
        if self.shape != other.shape {
            return Err(Error::shape("batch shapes differ"));
        }
        Ok(ImageBatch {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &ImageBatch) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_formation(x: &ImageBatch, r: usize) -> Result<()> {
    let [_, _, h, w] = x.shape;
    if r == 0 {
        return Err(Error::shape("formation factor must be >= 1"));
    }
    if h == 1 || w == 1 {
        return Err(Error::shape("formation needs genuine spatial dimensions"));
    }
    if h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!("{h}x{w} images are not divisible by r={r}")));
    }
    Ok(())
}

/// Keeps the `c` original channels and appends, for every channel, the `r²`
/// sub-tiles of size `h/r × w/r` (row-major tile order) each upsampled by
/// nearest neighbour back to `h × w`. Output channels: `c(r²+1)`.
pub fn multi_formation(x: &ImageBatch, r: usize) -> Result<ImageBatch> {
    check_formation(x, r)?;
    let [b, c, h, w] = x.shape;
    let (th, tw) = (h / r, w / r);
    let oc = c * (r * r + 1);
    let mut out = ImageBatch::zeros([b, oc, h, w]);
    for n in 0..b {
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.set(n, k, i, j, x.get(n, k, i, j));
                }
            }
            for ti in 0..r {
                for tj in 0..r {
                    let ch = c + (k * r + ti) * r + tj;
                    for i in 0..h {
                        for j in 0..w {
                            out.set(n, ch, i, j, x.get(n, k, ti * th + i / r, tj * tw + j / r));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`multi_formation`] applied to an output cotangent.
pub fn multi_formation_vjp(input_shape: [usize; 4], r: usize, g: &ImageBatch) -> Result<ImageBatch> {
    let probe = ImageBatch::zeros(input_shape);
    check_formation(&probe, r)?;
    let [b, c, h, w] = input_shape;
    if g.shape != [b, c * (r * r + 1), h, w] {
        return Err(Error::shape("cotangent shape does not match the formation output"));
    }
    let (th, tw) = (h / r, w / r);
    let mut out = ImageBatch::zeros(input_shape);
    for n in 0..b {
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out.add_at(n, k, i, j, g.get(n, k, i, j));
                }
            }
            for ti in 0..r {
                for tj in 0..r {
                    let ch = c + (k * r + ti) * r + tj;
                    for i in 0..h {
                        for j in 0..w {
                            out.add_at(n, k, ti * th + i / r, tj * tw + j / r, g.get(n, ch, i, j));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `3b` row-stochastic `c × c` mixing matrices (copy-major: the first `b`
/// belong to copy 1). Entries are uniform on `[0,1)` before normalization.
pub fn channel_mixers(b: usize, c: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = seed::rng(seed);
    (0..3 * b)
        .map(|_| {
            let mut m = Matrix::zeros(c, c);
            for i in 0..c {
                let row: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-12).collect();
                let s: f64 = row.iter().sum();
                for (j, v) in row.into_iter().enumerate() {
                    m.set(i, j, v / s);
                }
            }
            m
        })
        .collect()
}

/// Identity mixers, for checking the batch layout.
pub fn identity_mixers(b: usize, c: usize) -> Vec<Matrix> {
    (0..3 * b)
        .map(|_| {
            let mut m = Matrix::zeros(c, c);
            for i in 0..c {
                m.set(i, i, 1.0);
            }
            m
        })
        .collect()
}

/// Original batch followed by three colour-mapped copies, each pixel's
/// channel vector multiplied by a per-sample mixer and clipped to `[0,1]`.
pub fn apply_channel_mixers(x: &ImageBatch, mixers: &[Matrix]) -> Result<ImageBatch> {
    let [b, c, h, w] = x.shape;
    if mixers.len() != 3 * b || mixers.iter().any(|m| m.rows() != c || m.cols() != c) {
        return Err(Error::shape("need 3b mixers of size c x c"));
    }
    let mut out = ImageBatch::zeros([4 * b, c, h, w]);
    out.data[..x.data.len()].copy_from_slice(&x.data);
    for copy in 0..3 {
        for n in 0..b {
            let m = &mixers[copy * b + n];
            let dst = (copy + 1) * b + n;
            for i in 0..h {
                for j in 0..w {
                    for co in 0..c {
                        let mut v = 0.0;
                        for ci in 0..c {
                            v += m.get(co, ci) * x.get(n, ci, i, j);
                        }
                        out.set(dst, co, i, j, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transpose Jacobian of [`apply_channel_mixers`] at `x`; clipped outputs
/// pass no gradient.
pub fn channel_mixers_vjp(x: &ImageBatch, mixers: &[Matrix], g: &ImageBatch) -> Result<ImageBatch> {
    let [b, c, h, w] = x.shape;
    if g.shape != [4 * b, c, h, w] {
        return Err(Error::shape("cotangent shape does not match the channel formation output"));
    }
    let mut out = ImageBatch::zeros(x.shape);
    out.data.copy_from_slice(&g.data[..x.data.len()]);
    for copy in 0..3 {
        for n in 0..b {
            let m = &mixers[copy * b + n];
            let src = (copy + 1) * b + n;
            for i in 0..h {
                for j in 0..w {
                    for co in 0..c {
                        let mut v = 0.0;
                        for ci in 0..c {
                            v += m.get(co, ci) * x.get(n, ci, i, j);
                        }
                        if !(0.0..=1.0).contains(&v) {
                            continue;
                        }
                        let gv = g.get(src, co, i, j);
                        for ci in 0..c {
                            out.add_at(n, ci, i, j, m.get(co, ci) * gv);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channel-wise multi-formation with mixers drawn from `seed`.
pub fn channel_multi_formation(x: &ImageBatch, seed: u64) -> Result<ImageBatch> {
    let [b, c, _, _] = x.shape;
    apply_channel_mixers(x, &channel_mixers(b, c, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiameseOp {
    Shift,
    Flip,
    Scale,
}

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugParams {
    /// Integer translation with zero padding.
    Shift { dy: i64, dx: i64 },
    /// Horizontal mirror when `apply`.
    Flip { apply: bool },
    /// Multiply by `s` then clip to `[0,1]`.
    Scale { s: f64 },
}

impl AugParams {
    pub fn identity(op: SiameseOp) -> Self {
        match op {
            SiameseOp::Shift => AugParams::Shift { dy: 0, dx: 0 },
            SiameseOp::Flip => AugParams::Flip { apply: false },
            SiameseOp::Scale => AugParams::Scale { s: 1.0 },
        }
    }

    /// Shift magnitudes are at most `h/8` and `w/8`; scales lie in `[0.8, 1.2]`.
    pub fn draw(op: SiameseOp, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        match op {
            SiameseOp::Shift => {
                let (my, mx) = ((h / 8) as i64, (w / 8) as i64);
                AugParams::Shift {
                    dy: rng.random_range(-my..=my),
                    dx: rng.random_range(-mx..=mx),
                }
            }
            SiameseOp::Flip => AugParams::Flip {
                apply: rng.random::<bool>(),
            },
            SiameseOp::Scale => AugParams::Scale {
                s: rng.random_range(0.8..=1.2),
            },
        }
    }

    pub fn apply(&self, x: &ImageBatch) -> ImageBatch {
        let [b, c, h, w] = x.shape;
        let mut out = ImageBatch::zeros(x.shape);
        match *self {
            AugParams::Shift { dy, dx } => {
                for n in 0..b {
                    for k in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let (si, sj) = (i as i64 - dy, j as i64 - dx);
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                    out.set(n, k, i, j, x.get(n, k, si as usize, sj as usize));
                                }
                            }
                        }
                    }
                }
            }
            AugParams::Flip { apply } => {
                if !apply {
                    return x.clone();
                }
                for n in 0..b {
                    for k in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                out.set(n, k, i, j, x.get(n, k, i, w - 1 - j));
                            }
                        }
                    }
                }
            }
            AugParams::Scale { s } => {
                for (o, &v) in out.data.iter_mut().zip(&x.data) {
                    *o = (s * v).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    /// Transpose Jacobian at input `x` applied to cotangent `g`.
    pub fn vjp(&self, x: &ImageBatch, g: &ImageBatch) -> ImageBatch {
        let [b, c, h, w] = x.shape;
        match *self {
            AugParams::Shift { dy, dx } => {
                let mut out = ImageBatch::zeros(x.shape);
                for n in 0..b {
                    for k in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let (si, sj) = (i as i64 - dy, j as i64 - dx);
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                    out.add_at(n, k, si as usize, sj as usize, g.get(n, k, i, j));
                                }
                            }
                        }
                    }
                }
                out
            }
            // mirror is an involution and its own transpose
            AugParams::Flip { .. } => self.apply(g),
            AugParams::Scale { s } => {
                let mut out = ImageBatch::zeros(x.shape);
                for ((o, &v), &gv) in out.data.iter_mut().zip(&x.data).zip(&g.data) {
                    let y = s * v;
                    if (0.0..=1.0).contains(&y) {
                        *o = s * gv;
                    }
                }
                out
            }
        }
    }
}

/// Applies one parameter draw to both batches.
pub fn siamese_augment(
    t: &ImageBatch,
    s: &ImageBatch,
    op: SiameseOp,
    seed: u64,
) -> Result<(ImageBatch, ImageBatch, AugParams)> {
    if t.shape[2..] != s.shape[2..] {
        return Err(Error::shape("siamese batches must share spatial dimensions"));
    }
    let p = AugParams::draw(op, t.shape[2], t.shape[3], seed);
    Ok((p.apply(t), p.apply(s), p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> ImageBatch {
        let n: usize = shape.iter().product();
        ImageBatch::new(shape, (0..n).map(|k| k as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn formation_shapes() {
        let x = ramp([2, 3, 8, 8]);
        assert_eq!(multi_formation(&x, 2).unwrap().shape(), [2, 15, 8, 8]);
        assert_eq!(channel_multi_formation(&x, 1).unwrap().shape(), [8, 3, 8, 8]);
        let one = multi_formation(&x, 1).unwrap();
        assert_eq!(one.shape(), [2, 6, 8, 8]);
        for k in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(one.get(1, 3 + k, i, j), x.get(1, k, i, j));
                }
            }
        }
        assert!(multi_formation(&x, 3).is_err());
        assert!(multi_formation(&ramp([2, 1, 1, 5]), 1).is_err());
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = ImageBatch::new([1, 2, 4, 4], vec![0.3; 32]).unwrap();
        assert!(multi_formation(&x, 2).unwrap().as_slice().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn identity_mixers_copy_batch() {
        let x = ramp([2, 3, 4, 4]);
        let out = apply_channel_mixers(&x, &identity_mixers(2, 3)).unwrap();
        let rows = out.to_rows();
        for copy in 0..4 {
            for n in 0..2 {
                assert_eq!(rows.row(copy * 2 + n), x.to_rows().row(n));
            }
        }
    }

    #[test]
    fn formation_vjp_is_transpose() {
        let x = ramp([2, 2, 4, 4]);
        let y = multi_formation(&x, 2).unwrap();
        let g = ImageBatch::new(y.shape(), (0..y.as_slice().len()).map(|k| ((k * 37) % 11) as f64 - 5.0).collect()).unwrap();
        let back = multi_formation_vjp(x.shape(), 2, &g).unwrap();
        let lhs: f64 = y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-9);
    }

    #[test]
    fn siamese_contract() {
        let x = ramp([1, 1, 8, 8]);
        for op in [SiameseOp::Shift, SiameseOp::Flip, SiameseOp::Scale] {
            assert_eq!(AugParams::identity(op).apply(&x), x);
            let (a, b, _) = siamese_augment(&x, &x, op, 5).unwrap();
            assert_eq!(a, b);
        }
        let flip = AugParams::Flip { apply: true };
        assert_eq!(flip.apply(&flip.apply(&x)), x);
    }
}
