//! Structural and elementwise tape operations.
//!
//! Conventions used throughout:
//!
//! * image-like tensors are `(channels, height, width)`;
//! * vectors are 1-d, matrices `(rows, cols)`;
//! * operations named `*_const` take a plain array operand that is treated
//!   as a constant — no gradient flows into it. This is how frozen
//!   classifier outputs and binary suppression masks enter the graph.

use super::{Tape, Var};
use ndarray::{
    Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, Slice, Zip,
};

pub(crate) fn view1(a: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1-d tensor")
}

pub(crate) fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

pub(crate) fn view3(a: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    a.view()
        .into_dimensionality::<Ix3>()
        .expect("expected a 3-d tensor")
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.check(a);
        self.check(b);
        let (pa, pb) = (a.idx as usize, b.idx as usize);
        let out = {
            let nodes = self.borrow_nodes();
            let (va, vb) = (&nodes[pa].value, &nodes[pb].value);
            assert_eq!(va.shape(), vb.shape(), "add: operand shapes differ");
            va + vb
        };
        self.push(
            out,
            Some(Box::new(move |_, _, g, sink| {
                sink(pa, g.clone());
                sink(pb, g.clone());
            })),
        )
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.check(a);
        self.check(b);
        let (pa, pb) = (a.idx as usize, b.idx as usize);
        let out = {
            let nodes = self.borrow_nodes();
            let (va, vb) = (&nodes[pa].value, &nodes[pb].value);
            assert_eq!(va.shape(), vb.shape(), "sub: operand shapes differ");
            va - vb
        };
        self.push(
            out,
            Some(Box::new(move |_, _, g, sink| {
                sink(pa, g.clone());
                sink(pb, g.mapv(|v| -v));
            })),
        )
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.check(a);
        self.check(b);
        let (pa, pb) = (a.idx as usize, b.idx as usize);
        let out = {
            let nodes = self.borrow_nodes();
            let (va, vb) = (&nodes[pa].value, &nodes[pb].value);
            assert_eq!(va.shape(), vb.shape(), "mul: operand shapes differ");
            va * vb
        };
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                sink(pa, g * &nodes[pb].value);
                sink(pb, g * &nodes[pa].value);
            })),
        )
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| va * k);
        self.push(out, Some(Box::new(move |_, _, g, sink| sink(pa, g * k))))
    }

    /// Rectified linear unit.
    pub fn relu(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| va.mapv(|v| v.max(0.0)));
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let mut c = g.clone();
                Zip::from(&mut c).and(&nodes[pa].value).for_each(|ci, &xi| {
                    if xi <= 0.0 {
                        *ci = 0.0;
                    }
                });
                sink(pa, c);
            })),
        )
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| va.mapv(stable_sigmoid));
        self.push(
            out,
            Some(Box::new(move |nodes, i, g, sink| {
                let mut c = g.clone();
                Zip::from(&mut c).and(&nodes[i].value).for_each(|ci, &yi| {
                    *ci *= yi * (1.0 - yi);
                });
                sink(pa, c);
            })),
        )
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| va.mapv(f64::sqrt));
        self.push(
            out,
            Some(Box::new(move |nodes, i, g, sink| {
                let mut c = g.clone();
                Zip::from(&mut c).and(&nodes[i].value).for_each(|ci, &yi| {
                    *ci *= 0.5 / yi;
                });
                sink(pa, c);
            })),
        )
    }

    /// Sum every element into a scalar (shape `[]`).
    pub fn sum_all(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| {
            ndarray::arr0(va.iter().sum::<f64>()).into_dyn()
        });
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let gs = g[ndarray::IxDyn(&[])];
                let shape = nodes[pa].value.shape().to_vec();
                sink(pa, ArrayD::from_elem(ndarray::IxDyn(&shape), gs));
            })),
        )
    }

    /// Hyperbolic tangent.
    pub fn tanh(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| va.mapv(f64::tanh));
        self.push(
            out,
            Some(Box::new(move |nodes, i, g, sink| {
                let mut c = g.clone();
                Zip::from(&mut c).and(&nodes[i].value).for_each(|ci, &yi| {
                    *ci *= 1.0 - yi * yi;
                });
                sink(pa, c);
            })),
        )
    }

    /// Broadcast a single-channel map over all channels of a feature
    /// tensor: `out[c,y,x] = feat[c,y,x] * map[0,y,x]`. Gradients flow
    /// into both operands.
    pub fn mul_bc(&self, feat: Var, map: Var) -> Var {
        self.check(feat);
        self.check(map);
        let (pf, pm) = (feat.idx as usize, map.idx as usize);
        let out = {
            let nodes = self.borrow_nodes();
            let vf = &nodes[pf].value;
            let vm = &nodes[pm].value;
            assert_bc_shapes(vf, vm);
            vf * &vm.broadcast(vf.raw_dim()).expect("broadcast")
        };
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let vf = &nodes[pf].value;
                let vm = &nodes[pm].value;
                sink(pf, g * &vm.broadcast(vf.raw_dim()).expect("broadcast"));
                let gm = (g * vf).sum_axis(Axis(0)).insert_axis(Axis(0));
                sink(pm, gm);
            })),
        )
    }

    /// Elementwise product with a constant tensor of the same shape;
    /// gradient flows only into `a`.
    pub fn mul_const(&self, a: Var, k: &ArrayD<f64>) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| {
            assert_eq!(va.shape(), k.shape(), "mul_const: operand shapes differ");
            va * k
        });
        let k = k.clone();
        self.push(out, Some(Box::new(move |_, _, g, sink| sink(pa, g * &k))))
    }

    /// Broadcast a constant single-channel map over all channels of a
    /// feature tensor; gradient flows only into `a`. This is the
    /// stop-gradient path used for binary suppression masks.
    pub fn mul_const_bc(&self, a: Var, map: &ArrayD<f64>) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| {
            assert_bc_shapes(va, map);
            va * &map.broadcast(va.raw_dim()).expect("broadcast")
        });
        let map = map.clone();
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let dim = nodes[pa].value.raw_dim();
                sink(pa, g * &map.broadcast(dim).expect("broadcast"));
            })),
        )
    }

    /// Elementwise sum with a constant tensor of the same shape.
    pub fn add_const(&self, a: Var, k: &ArrayD<f64>) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| {
            assert_eq!(va.shape(), k.shape(), "add_const: operand shapes differ");
            va + k
        });
        self.push(out, Some(Box::new(move |_, _, g, sink| sink(pa, g.clone()))))
    }

    /// Concatenate `(c_i, h, w)` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        self.concat_axis0(parts, 3, "concat_channels")
    }

    /// Concatenate 1-d vectors.
    pub fn concat_vec(&self, parts: &[Var]) -> Var {
        self.concat_axis0(parts, 1, "concat_vec")
    }

    fn concat_axis0(&self, parts: &[Var], ndim: usize, op: &str) -> Var {
        assert!(!parts.is_empty(), "{op}: no operands");
        let mut ranges: Vec<(usize, usize, usize)> = Vec::with_capacity(parts.len());
        let out = {
            let nodes = self.borrow_nodes();
            let mut start = 0usize;
            let views: Vec<_> = parts
                .iter()
                .map(|&p| {
                    self.check(p);
                    let v = &nodes[p.idx as usize].value;
                    assert_eq!(v.ndim(), ndim, "{op}: expected {ndim}-d operands");
                    let len = v.shape()[0];
                    ranges.push((p.idx as usize, start, len));
                    start += len;
                    v.view()
                })
                .collect();
            ndarray::concatenate(Axis(0), &views).expect("concat: trailing shapes differ")
        };
        self.push(
            out,
            Some(Box::new(move |_, _, g, sink| {
                for &(p, start, len) in &ranges {
                    let piece = g
                        .slice_axis(Axis(0), Slice::from(start..start + len))
                        .to_owned();
                    sink(p, piece);
                }
            })),
        )
    }

    /// Mean over the channel axis: `(c, h, w) -> (1, h, w)`.
    pub fn channel_mean(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| {
            assert_eq!(va.ndim(), 3, "channel_mean: expected (c, h, w)");
            va.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
        });
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let dim = nodes[pa].value.raw_dim();
                let c = dim[0] as f64;
                let gm = g / c;
                sink(pa, gm.broadcast(dim).expect("broadcast").to_owned());
            })),
        )
    }

    /// Maximum over the channel axis: `(c, h, w) -> (1, h, w)`. Ties are
    /// broken toward the lowest channel index, deterministically.
    pub fn channel_max(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let (out, argmax) = self.with_value(a, |va| {
            let v = view3(va);
            let (c, h, w) = v.dim();
            assert!(c > 0, "channel_max: empty channel axis");
            let mut out = Array1::<f64>::zeros(h * w);
            let mut arg = vec![0u32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut best = v[(0, y, x)];
                    let mut best_c = 0u32;
                    for ch in 1..c {
                        let val = v[(ch, y, x)];
                        if val > best {
                            best = val;
                            best_c = ch as u32;
                        }
                    }
                    out[y * w + x] = best;
                    arg[y * w + x] = best_c;
                }
            }
            (
                out.into_shape_with_order((1, h, w)).expect("shape").into_dyn(),
                arg,
            )
        });
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let dim = nodes[pa].value.raw_dim();
                let (h, w) = (dim[1], dim[2]);
                let mut gx = ArrayD::<f64>::zeros(dim);
                for y in 0..h {
                    for x in 0..w {
                        let ch = argmax[y * w + x] as usize;
                        gx[[ch, y, x]] = g[[0, y, x]];
                    }
                }
                sink(pa, gx);
            })),
        )
    }

    /// Global average pool: `(c, h, w) -> (c)`.
    pub fn spatial_mean(&self, a: Var) -> Var {
        self.check(a);
        let pa = a.idx as usize;
        let out = self.with_value(a, |va| {
            assert_eq!(va.ndim(), 3, "spatial_mean: expected (c, h, w)");
            let n = (va.shape()[1] * va.shape()[2]) as f64;
            va.sum_axis(Axis(2)).sum_axis(Axis(1)) / n
        });
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let dim = nodes[pa].value.raw_dim();
                let n = (dim[1] * dim[2]) as f64;
                let gc = (g / n).insert_axis(Axis(1)).insert_axis(Axis(2));
                sink(pa, gc.broadcast(dim).expect("broadcast").to_owned());
            })),
        )
    }

    /// Affine map `w·x (+ b)` with `w: (m, n)`, `x: (n)`, `b: (m)`.
    pub fn matvec(&self, w: Var, x: Var, b: Option<Var>) -> Var {
        self.check(w);
        self.check(x);
        let (pw, px) = (w.idx as usize, x.idx as usize);
        let pb = b.map(|b| {
            self.check(b);
            b.idx as usize
        });
        let out = {
            let nodes = self.borrow_nodes();
            let wm = view2(&nodes[pw].value);
            let xv = view1(&nodes[px].value);
            assert_eq!(wm.ncols(), xv.len(), "matvec: inner dimensions differ");
            let mut y = wm.dot(&xv);
            if let Some(pb) = pb {
                let bv = view1(&nodes[pb].value);
                assert_eq!(bv.len(), y.len(), "matvec: bias length differs");
                y += &bv;
            }
            y.into_dyn()
        };
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let gv = view1(g);
                let wm = view2(&nodes[pw].value);
                let xv = view1(&nodes[px].value);
                let gw = Array2::from_shape_fn((gv.len(), xv.len()), |(r, c)| gv[r] * xv[c]);
                sink(pw, gw.into_dyn());
                sink(px, wm.t().dot(&gv).into_dyn());
                if let Some(pb) = pb {
                    sink(pb, g.clone());
                }
            })),
        )
    }

    /// Select one row of a `(rows, dim)` matrix — the embedding lookup.
    pub fn gather_row(&self, table: Var, row: usize) -> Var {
        self.check(table);
        let pt = table.idx as usize;
        let out = self.with_value(table, |vt| {
            let m = view2(vt);
            assert!(row < m.nrows(), "gather_row: row {row} out of range");
            m.row(row).to_owned().into_dyn()
        });
        self.push(
            out,
            Some(Box::new(move |nodes, _, g, sink| {
                let mut gt = ArrayD::<f64>::zeros(nodes[pt].value.raw_dim());
                {
                    let mut gm = gt
                        .view_mut()
                        .into_dimensionality::<Ix2>()
                        .expect("2-d table");
                    gm.row_mut(row).assign(&view1(g));
                }
                sink(pt, gt);
            })),
        )
    }

    /// Stack equally sized vectors into a `(k, d)` matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows: no rows");
        let parents: Vec<usize> = rows
            .iter()
            .map(|&r| {
                self.check(r);
                r.idx as usize
            })
            .collect();
        let out = {
            let nodes = self.borrow_nodes();
            let d = nodes[parents[0]].value.len();
            let mut m = Array2::<f64>::zeros((parents.len(), d));
            for (mut row, &p) in m.rows_mut().into_iter().zip(&parents) {
                let v = view1(&nodes[p].value);
                assert_eq!(v.len(), d, "stack_rows: row lengths differ");
                row.assign(&v);
            }
            m.into_dyn()
        };
        self.push(
            out,
            Some(Box::new(move |_, _, g, sink| {
                let gm = view2(g);
                for (j, &p) in parents.iter().enumerate() {
                    sink(p, gm.row(j).to_owned().into_dyn());
                }
            })),
        )
    }
}

fn assert_bc_shapes(feat: &ArrayD<f64>, map: &ArrayD<f64>) {
    assert_eq!(feat.ndim(), 3, "broadcast multiply: feature must be (c, h, w)");
    assert_eq!(
        map.shape(),
        &[1, feat.shape()[1], feat.shape()[2]],
        "broadcast multiply: map must be (1, h, w) matching the feature"
    );
}
