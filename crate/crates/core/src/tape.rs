//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every op records its output value, its parents and a local backward rule.
//! Backward rules receive the upstream gradient, the parent values and the
//! op's own output, so nothing is cloned while building the graph. A tape
//! created with [`Tape::no_grad`] records values only.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Local gradient rule: `(upstream, parent values, own output) -> parent grads`.
pub type BackwardFn = Box<dyn Fn(&Mat, &[&Mat], &Mat) -> Vec<Mat>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Mat,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, value: Mat, parents: &[Var], backward: BackwardFn) -> Var {
        if !self.grad_enabled {
            return self.leaf(value);
        }
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: Some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.custom(
            out,
            &[a, b],
            Box::new(|g, p, _| vec![g.dot(&p[1].t()), p[0].t().dot(g)]),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.custom(
            out,
            &[a, b],
            Box::new(|g, p, _| vec![g.dot(p[1]), g.t().dot(p[0])]),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let out = self.value(a) + self.value(b);
        self.custom(out, &[a, b], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.custom(
            out,
            &[a, row],
            Box::new(|g, _, _| vec![g.clone(), g.sum_axis(Axis(0)).insert_axis(Axis(0))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let out = self.value(a) * self.value(b);
        self.custom(
            out,
            &[a, b],
            Box::new(|g, p, _| vec![g * p[1], g * p[0]]),
        )
    }

    /// Elementwise `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.custom(out, &[a], Box::new(move |g, _, _| vec![g * scale]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.custom(
            out,
            &[a],
            Box::new(|g, p, _| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0
                    }
                });
                vec![d]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.custom(
            out,
            &[a],
            Box::new(|g, _, y| {
                let mut d = g.clone();
                d.zip_mut_with(y, |gi, &s| *gi *= s * (1.0 - s));
                vec![d]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.custom(
            out,
            &[a],
            Box::new(|g, _, y| {
                let mut d = g.clone();
                d.zip_mut_with(y, |gi, &t| *gi *= 1.0 - t * t);
                vec![d]
            }),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.custom(
            out,
            &[a],
            Box::new(|g, _, y| {
                let mut d = Mat::zeros(y.dim());
                for ((mut dr, gr), yr) in d.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    for ((di, &gi), &yi) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *di = yi * (gi - dot);
                    }
                }
                vec![d]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        self.custom(
            out,
            parts,
            Box::new(move |g, _, _| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let piece = g.slice(s![.., start..start + w]).to_owned();
                        start += w;
                        piece
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        let heights: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        self.custom(
            out,
            parts,
            Box::new(move |g, _, _| {
                let mut start = 0;
                heights
                    .iter()
                    .map(|&h| {
                        let piece = g.slice(s![start..start + h, ..]).to_owned();
                        start += h;
                        piece
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.custom(
            out,
            &[a],
            Box::new(move |g, p, _| {
                let mut d = Mat::zeros(p[0].dim());
                d.slice_mut(s![start..end, ..]).assign(g);
                vec![d]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.custom(
            out,
            &[a],
            Box::new(move |g, p, _| {
                let mut d = Mat::zeros(p[0].dim());
                d.slice_mut(s![.., start..end]).assign(g);
                vec![d]
            }),
        )
    }

    /// Column-wise mean, producing a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let rows = self.value(a).nrows();
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.custom(
            out,
            &[a],
            Box::new(move |g, p, _| {
                let row = g.row(0).mapv(|x| x / rows as f64);
                let mut d = Mat::zeros(p[0].dim());
                for mut r in d.rows_mut() {
                    r.assign(&row);
                }
                vec![d]
            }),
        )
    }

    /// Sum of several scalar (1x1) nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total: f64 = parts.iter().map(|&v| self.scalar(v)).sum();
        let n = parts.len();
        self.custom(
            Mat::from_elem((1, 1), total),
            parts,
            Box::new(move |g, _, _| vec![g.clone(); n]),
        )
    }

    /// Valid 1-D convolution over time.
    ///
    /// `x` is `T x C`, `w` is `(kernel * C) x O` with the kernel taps stacked
    /// tap-major, `b` is `1 x O`. Output is `n_out x O` with
    /// `n_out = (T - kernel) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.dim();
        assert!(t >= kernel, "conv1d input shorter than kernel");
        assert_eq!(self.value(w).nrows(), kernel * c, "conv1d weight rows");
        let patches = im2col(xv, kernel, stride);
        let out = patches.dot(self.value(w)) + self.value(b);
        self.custom(
            out,
            &[x, w, b],
            Box::new(move |g, p, _| {
                let patches = im2col(p[0], kernel, stride);
                let dw = patches.t().dot(g);
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dp = g.dot(&p[1].t());
                let mut dx = Mat::zeros(p[0].dim());
                let c = p[0].ncols();
                for (j, row) in dp.rows().into_iter().enumerate() {
                    for k in 0..kernel {
                        let mut dst = dx.row_mut(j * stride + k);
                        let src = row.slice(s![k * c..(k + 1) * c]);
                        dst += &src;
                    }
                }
                vec![dx, dw, db]
            }),
        )
    }

    /// Averages each `[start, start + len)` row window into one output row.
    pub fn avg_pool_rows(&mut self, a: Var, windows: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros((windows.len(), av.ncols()));
        for (i, &(start, len)) in windows.iter().enumerate() {
            let mean = av
                .slice(s![start..start + len, ..])
                .mean_axis(Axis(0))
                .expect("empty pooling window");
            out.row_mut(i).assign(&mean);
        }
        let windows = windows.to_vec();
        self.custom(
            out,
            &[a],
            Box::new(move |g, p, _| {
                let mut d = Mat::zeros(p[0].dim());
                for (i, &(start, len)) in windows.iter().enumerate() {
                    let share = g.row(i).mapv(|x| x / len as f64);
                    for r in start..start + len {
                        let mut dst = d.row_mut(r);
                        dst += &share;
                    }
                }
                vec![d]
            }),
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Mat::ones(self.value(root).dim()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(bw) = &node.backward {
                let parent_vals: Vec<&Mat> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let pgrads = bw(&g, &parent_vals, &node.value);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

fn im2col(x: &Mat, kernel: usize, stride: usize) -> Mat {
    let (t, c) = x.dim();
    let n_out = (t - kernel) / stride + 1;
    let mut patches = Mat::zeros((n_out, kernel * c));
    let xs = x.as_standard_layout();
    let flat = xs.as_slice().expect("standard layout");
    for j in 0..n_out {
        let start = j * stride * c;
        patches
            .row_mut(j)
            .as_slice_mut()
            .expect("contiguous row")
            .copy_from_slice(&flat[start..start + kernel * c]);
    }
    patches
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    // Reduces any output to a scalar via a fixed weighting so every output
    // element contributes a distinct gradient.
    fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
        let dim = tape.value(v).dim();
        let w = Mat::from_shape_fn(dim, |(i, j)| 0.3 + 0.1 * i as f64 - 0.07 * j as f64);
        let wv = tape.leaf(w);
        let prod = tape.mul(v, wv);
        let ones = tape.leaf(Mat::ones((1, dim.0)));
        let colsum = tape.matmul(ones, prod);
        let ones_c = tape.leaf(Mat::ones((dim.1, 1)));
        tape.matmul(colsum, ones_c)
    }

    fn check_unary(op: impl Fn(&mut Tape, Var) -> Var, x: Mat) {
        let eval = |x: &Mat| {
            let mut t = Tape::no_grad();
            let v = t.leaf(x.clone());
            let y = op(&mut t, v);
            let s = weighted_sum(&mut t, y);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = op(&mut t, v);
        let s = weighted_sum(&mut t, y);
        let grads = t.backward(s);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(eval, &x);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = array![[0.3, -1.2, 0.7], [2.0, -0.4, 0.1]];
        check_unary(|t, v| t.sigmoid(v), x.clone());
        check_unary(|t, v| t.tanh(v), x.clone());
        check_unary(|t, v| t.relu(v), x.clone());
        check_unary(|t, v| t.softmax_rows(v), x.clone());
        check_unary(|t, v| t.mean_rows(v), x.clone());
        check_unary(|t, v| t.affine(v, -2.0, 0.5), x.clone());
        check_unary(|t, v| t.slice_cols(v, 1, 3), x.clone());
        check_unary(|t, v| t.slice_rows(v, 1, 2), x.clone());
        check_unary(|t, v| t.avg_pool_rows(v, &[(0, 2), (1, 1)]), x.clone());
        check_unary(|t, v| t.mul(v, v), x.clone());
        check_unary(
            |t, v| {
                let a = t.slice_cols(v, 0, 1);
                t.concat_cols(&[v, a])
            },
            x.clone(),
        );
        check_unary(|t, v| t.concat_rows(&[v, v]), x);
    }

    #[test]
    fn matmul_and_conv_match_finite_differences() {
        let w = array![[0.5, -0.3], [0.2, 0.8], [-0.6, 0.1]];
        check_unary(
            move |t, v| {
                let wv = t.leaf(w.clone());
                t.matmul(v, wv)
            },
            array![[0.3, -1.2, 0.7], [2.0, -0.4, 0.1]],
        );
        let b = array![[0.5, -0.3, 0.9], [0.2, 0.8, -0.1]];
        check_unary(
            move |t, v| {
                let bv = t.leaf(b.clone());
                t.matmul_t(v, bv)
            },
            array![[0.3, -1.2, 0.7], [2.0, -0.4, 0.1]],
        );
        // conv: 5 frames x 2 channels, kernel 2, stride 2, 3 outputs channels
        let x = Mat::from_shape_fn((5, 2), |(i, j)| (i as f64 * 0.7 - j as f64).sin());
        let kern = Mat::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).cos());
        let bias = array![[0.1, -0.2, 0.05]];
        let (k2, b2) = (kern.clone(), bias.clone());
        check_unary(
            move |t, v| {
                let kv = t.leaf(k2.clone());
                let bv = t.leaf(b2.clone());
                t.conv1d(v, kv, bv, 2, 2)
            },
            x.clone(),
        );
        let x2 = x.clone();
        check_unary(
            move |t, v| {
                let xv = t.leaf(x2.clone());
                let bv = t.leaf(bias.clone());
                t.conv1d(xv, v, bv, 2, 2)
            },
            kern,
        );
    }

    #[test]
    fn conv_output_matches_direct_sum() {
        let x = Mat::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let w = Mat::from_shape_fn((9, 2), |(i, j)| (i as f64 - j as f64) * 0.05);
        let b = array![[1.0, -1.0]];
        let mut t = Tape::no_grad();
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.conv1d(xv, wv, bv, 3, 2);
        let out = t.value(y);
        assert_eq!(out.dim(), (3, 2));
        for j in 0..3 {
            for o in 0..2 {
                let mut acc = b[[0, o]];
                for k in 0..3 {
                    for c in 0..3 {
                        acc += x[[j * 2 + k, c]] * w[[k * 3 + c, o]];
                    }
                }
                assert!((out[[j, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_nodes_accumulate_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let s = softmax_rows(&array![[1000.0, 1000.0], [-3.0, 5.0]]);
        assert_eq!(s[[0, 0]], 0.5);
        for r in s.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}
