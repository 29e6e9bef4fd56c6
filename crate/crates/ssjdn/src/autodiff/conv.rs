//! 2-d convolution for the tape, via im2col and a matrix product.
//!
//! Supports stride, dilation and two padding modes. The column matrix is
//! rebuilt during the backward sweep instead of being cached; for the
//! feature-map sizes this crate works with, recomputing is cheaper than
//! holding every column matrix of a batch in memory.

use super::{Tape, Var};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Ix3, Ix4};

/// How out-of-bounds taps read the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-bounds taps read zero ("same" padding).
    Zero,
    /// Out-of-bounds taps read the nearest edge pixel. Used by the
    /// salience unit so that constant inputs produce constant attention.
    Replicate,
}

#[derive(Clone, Copy)]
struct Geometry {
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    mode: PadMode,
}

impl Geometry {
    fn out_len(&self, n: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(
            n + 2 * self.pad >= span,
            "conv2d: padded input of {n} is smaller than the kernel span {span}"
        );
        (n + 2 * self.pad - span) / self.stride + 1
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (self.out_len(h, self.kh), self.out_len(w, self.kw))
    }
}

/// Resolve a padded source coordinate to an input index, or `None` when a
/// zero-padded tap falls outside.
#[inline]
fn resolve(coord: isize, len: usize, mode: PadMode) -> Option<usize> {
    if coord >= 0 && (coord as usize) < len {
        Some(coord as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(coord.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Unfold `(cin, h, w)` into `(cin * kh * kw, oh * ow)` columns.
fn im2col(x: ArrayView3<'_, f64>, geo: Geometry) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let (oh, ow) = geo.out_dims(h, w);
    let mut m = Array2::<f64>::zeros((cin * geo.kh * geo.kw, oh * ow));
    for c in 0..cin {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let r = (c * geo.kh + ky) * geo.kw + kx;
                let mut row = m.row_mut(r);
                let row = row.as_slice_mut().expect("contiguous row");
                for oy in 0..oh {
                    let sy = (oy * geo.stride + ky * geo.dilation) as isize - geo.pad as isize;
                    let Some(sy) = resolve(sy, h, geo.mode) else {
                        continue; // stays zero
                    };
                    for ox in 0..ow {
                        let sx =
                            (ox * geo.stride + kx * geo.dilation) as isize - geo.pad as isize;
                        if let Some(sx) = resolve(sx, w, geo.mode) {
                            row[oy * ow + ox] = x[(c, sy, sx)];
                        }
                    }
                }
            }
        }
    }
    m
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im_add(cols: ArrayView2<'_, f64>, gx: &mut Array3<f64>, geo: Geometry) {
    let (cin, h, w) = gx.dim();
    let (oh, ow) = geo.out_dims(h, w);
    for c in 0..cin {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let r = (c * geo.kh + ky) * geo.kw + kx;
                let row = cols.row(r);
                let row = row.as_slice().expect("contiguous row");
                for oy in 0..oh {
                    let sy = (oy * geo.stride + ky * geo.dilation) as isize - geo.pad as isize;
                    let Some(sy) = resolve(sy, h, geo.mode) else {
                        continue;
                    };
                    for ox in 0..ow {
                        let sx =
                            (ox * geo.stride + kx * geo.dilation) as isize - geo.pad as isize;
                        if let Some(sx) = resolve(sx, w, geo.mode) {
                            gx[(c, sy, sx)] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-d convolution of `x: (cin, h, w)` with `w: (cout, cin, kh, kw)`
    /// and bias `b: (cout)`, producing `(cout, oh, ow)`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dilation: usize,
        pad: usize,
        mode: PadMode,
    ) -> Var {
        assert!(stride >= 1 && dilation >= 1, "conv2d: stride/dilation must be positive");
        self.check(x);
        self.check(w);
        self.check(b);
        let (px, pw, pb) = (x.idx as usize, w.idx as usize, b.idx as usize);
        let out = {
            let nodes = self.borrow_nodes();
            let xv = nodes[px]
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .expect("conv2d: input must be (cin, h, w)");
            let wv = nodes[pw]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .expect("conv2d: weights must be (cout, cin, kh, kw)");
            let (cout, wcin, kh, kw) = wv.dim();
            let (cin, h, w_) = xv.dim();
            assert_eq!(cin, wcin, "conv2d: channel counts differ");
            let bv = super::ops::view1(&nodes[pb].value);
            assert_eq!(bv.len(), cout, "conv2d: bias length differs");
            let geo = Geometry { kh, kw, stride, dilation, pad, mode };
            let (oh, ow) = geo.out_dims(h, w_);
            let cols = im2col(xv, geo);
            let wmat = wv
                .into_shape_with_order((cout, wcin * kh * kw))
                .expect("contiguous weights");
            let mut y = wmat.dot(&cols);
            for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
            y.into_shape_with_order((cout, oh, ow))
                .expect("shape")
                .into_dyn()
        };
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let xv = nodes[px]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("3-d input");
                let wv = nodes[pw]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("4-d weights");
                let (cout, cin, kh, kw) = wv.dim();
                let geo = Geometry { kh, kw, stride, dilation, pad, mode };
                let n = g.len() / cout;
                let g2 = g
                    .to_shape((cout, n))
                    .expect("gradient reshapes to (cout, oh*ow)");
                sink(pb, g2.sum_axis(Axis(1)).into_dyn());
                let cols = im2col(xv, geo);
                let gw = g2.dot(&cols.t());
                sink(
                    pw,
                    gw.into_shape_with_order((cout, cin, kh, kw))
                        .expect("shape")
                        .into_dyn(),
                );
                let wmat = wv
                    .into_shape_with_order((cout, cin * kh * kw))
                    .expect("contiguous weights");
                // An inner dimension of 1 makes `dot` return an F-order
                // outer product; col2im needs contiguous rows.
                let gcols = wmat.t().dot(&g2);
                let gcols = gcols.as_standard_layout();
                let mut gx = Array3::<f64>::zeros(xv.dim());
                col2im_add(gcols.view(), &mut gx, geo);
                sink(px, gx.into_dyn());
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr3, Array1, Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn run_conv(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
        dilation: usize,
        pad: usize,
        mode: PadMode,
    ) -> ArrayD<f64> {
        let t = Tape::inference();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let bv = t.leaf(b.clone());
        t.value(t.conv2d(xv, wv, bv, stride, dilation, pad, mode))
    }

    #[test]
    fn identity_kernel_preserves_the_image() {
        let x = arr3(&[[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]]).into_dyn();
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let b = Array1::zeros(1);
        let y = run_conv(&x, &w.into_dyn(), &b.into_dyn(), 1, 1, 1, PadMode::Zero);
        assert_eq!(y, x);
    }

    #[test]
    fn box_kernel_sums_neighbourhoods_with_zero_padding() {
        let x = arr3(&[[[1.0, 1.0], [1.0, 1.0]]]).into_dyn();
        let w = ArrayD::ones(IxDyn(&[1, 1, 3, 3]));
        let b = arr1(&[0.0]).into_dyn();
        let y = run_conv(&x, &w, &b, 1, 1, 1, PadMode::Zero);
        // Each corner output sees exactly the four real pixels.
        assert_eq!(y.as_slice().unwrap(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn replicate_padding_keeps_constant_inputs_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_arr(&[1, 2, 7, 7], &mut rng);
        let b = arr1(&[0.25]).into_dyn();
        let x = ArrayD::from_elem(IxDyn(&[2, 5, 6]), 0.7);
        let y = run_conv(&x, &w, &b, 1, 1, 3, PadMode::Replicate);
        let expected = 0.7 * w.sum() + 0.25;
        for &v in y.iter() {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn stride_and_dilation_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&[3, 8, 8], &mut rng);
        let w = rand_arr(&[4, 3, 3, 3], &mut rng);
        let b = rand_arr(&[4], &mut rng);
        let y = run_conv(&x, &w, &b, 2, 1, 1, PadMode::Zero);
        assert_eq!(y.shape(), &[4, 4, 4]);
        // Dilation 6 with matching pad keeps "same" spatial size.
        let y = run_conv(&x, &w, &b, 1, 6, 6, PadMode::Zero);
        assert_eq!(y.shape(), &[4, 8, 8]);
    }

    #[test]
    fn dilated_taps_land_on_the_right_pixels() {
        // Delta kernel at (ky, kx) = (0, 0), dilation 2, pad 2: output (y, x)
        // reads input (y - 2, x - 2).
        let mut x = ArrayD::zeros(IxDyn(&[1, 5, 5]));
        x[[0, 1, 1]] = 1.0;
        let mut w = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        w[[0, 0, 0, 0]] = 1.0;
        let b = arr1(&[0.0]).into_dyn();
        let y = run_conv(&x, &w, &b, 1, 2, 2, PadMode::Zero);
        assert_eq!(y[[0, 3, 3]], 1.0);
        assert_eq!(y.sum(), 1.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(stride, dilation, pad, mode) in &[
            (1usize, 1usize, 1usize, PadMode::Zero),
            (2, 1, 1, PadMode::Zero),
            (1, 2, 2, PadMode::Zero),
            (1, 1, 3, PadMode::Replicate),
        ] {
            let x0 = rand_arr(&[2, 6, 5], &mut rng);
            let w0 = rand_arr(&[3, 2, 3, 3], &mut rng);
            let b0 = rand_arr(&[3], &mut rng);

            let t = Tape::new();
            let x = t.leaf(x0.clone());
            let w = t.leaf(w0.clone());
            let b = t.leaf(b0.clone());
            let y = t.conv2d(x, w, b, stride, dilation, pad, mode);
            let g = t.backward(y);

            let h = 1e-5;
            let probe = |which: usize, flat: usize, analytic: f64| {
                let eval = |delta: f64| {
                    let (mut xs, mut ws, mut bs) = (x0.clone(), w0.clone(), b0.clone());
                    match which {
                        0 => xs.as_slice_mut().unwrap()[flat] += delta,
                        1 => ws.as_slice_mut().unwrap()[flat] += delta,
                        _ => bs.as_slice_mut().unwrap()[flat] += delta,
                    }
                    run_conv(&xs, &ws, &bs, stride, dilation, pad, mode).sum()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (analytic - numeric).abs() / numeric.abs().max(1.0) < 1e-7,
                    "probe {which}/{flat}: analytic {analytic} vs numeric {numeric}"
                );
            };
            for flat in [0usize, 7, 29] {
                probe(0, flat, g.get(x).unwrap().as_slice().unwrap()[flat]);
                probe(1, flat, g.get(w).unwrap().as_slice().unwrap()[flat]);
            }
            for flat in 0..3 {
                probe(2, flat, g.get(b).unwrap().as_slice().unwrap()[flat]);
            }
        }
    }
}
