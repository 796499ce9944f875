use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{GradBuffer, ParamId, ParamStore};

/// A node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Array2<f64>),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SumAll(Var),
    MeanRows(Var),
    Pick(Var, Vec<(usize, usize)>),
    CosineRows {
        a: Var,
        b: Var,
        a_unit: Array2<f64>,
        b_unit: Array2<f64>,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    LogOnePlusSumExp(Var),
    LogSumExpRows(Var),
    Transpose(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a computation over dense matrices for one reverse sweep.
///
/// Vectors are 1×n rows and scalars 1×1 matrices. A tape is built per
/// forward pass and dropped after [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn row_norms(x: &Array2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn normalize_rows(x: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(norms) {
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Backward of `unit = x / |x|` applied row-wise.
fn unit_rows_backward(d_unit: &Array2<f64>, unit: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut out = d_unit.clone();
    for ((mut row, u), n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let dot: f64 = row.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut row).and(&u).for_each(|d, &uv| *d = (*d - uv * dot) / n);
    }
    out
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Array2<f64>>],
    v: Var,
    dim: (usize, usize),
) -> &'a mut Array2<f64> {
    grads[v.0].get_or_insert_with(|| Array2::zeros(dim))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    /// Leaf node. Gradients with respect to it are available after backward.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    /// Binds a parameter to this tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    /// Adds the 1×n row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).row(0).to_owned();
        let value = self.value(a) + &r;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine 1×n `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let value = &xhat * &g + &b;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows `table[ids[0]], table[ids[1]], …`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (mut dst, &id) in value.rows_mut().into_iter().zip(ids) {
            dst.assign(&t.row(id));
        }
        self.push(value, Op::Gather(table, ids.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Mean over rows, giving a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = v
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    /// Gathers the listed `(row, col)` entries into a k×1 column.
    pub fn pick(&mut self, a: Var, cells: &[(usize, usize)]) -> Var {
        let v = self.value(a);
        let value = Array2::from_shape_fn((cells.len(), 1), |(i, _)| v[cells[i]]);
        self.push(value, Op::Pick(a, cells.to_vec()))
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    /// Rows must be nonzero; callers validate this.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let a_norm = row_norms(self.value(a));
        let b_norm = row_norms(self.value(b));
        let a_unit = normalize_rows(self.value(a), &a_norm);
        let b_unit = normalize_rows(self.value(b), &b_norm);
        let value = a_unit.dot(&b_unit.t());
        self.push(
            value,
            Op::CosineRows {
                a,
                b,
                a_unit,
                b_unit,
                a_norm,
                b_norm,
            },
        )
    }

    /// `log(1 + Σ exp(a))` over every entry, computed without overflow.
    pub fn log_one_plus_sum_exp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.fold(0.0f64, |acc, &x| acc.max(x));
        let s = (-m).exp() + v.iter().map(|x| (x - m).exp()).sum::<f64>();
        let value = Array2::from_elem((1, 1), m + s.ln());
        self.push(value, Op::LogOnePlusSumExp(a))
    }

    /// Row-wise log-sum-exp, giving an m×1 column.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_shape_fn((v.nrows(), 1), |(r, _)| {
            let row = v.row(r);
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        });
        self.push(value, Op::LogSumExpRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Reverse sweep from a 1×1 `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.dot(self.value(*b)));
                accumulate(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => accumulate(grads, *a, g * c),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
                });
                d *= g;
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, g * &node.value),
            Op::Log(a) => accumulate(grads, *a, g / self.value(*a)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv = yv * (*dv - dot));
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(node.value.rows()) {
                    let total = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv -= yv.exp() * total);
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gam = self.value(*gamma).row(0).to_owned();
                let dxhat = g * &gam;
                let n = xhat.ncols() as f64;
                let mut dx = dxhat.clone();
                for (((mut dxr, dh), xh), is) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(dxhat.rows())
                    .zip(xhat.rows())
                    .zip(inv_std)
                {
                    let sum_dh = dh.sum();
                    let sum_dh_xh: f64 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut dxr)
                        .and(&dh)
                        .and(&xh)
                        .for_each(|o, &d, &h| *o = is / n * (n * d - sum_dh - h * sum_dh_xh));
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather(table, ids) => {
                let dim = self.shape(*table);
                let dst = slot(grads, *table, dim);
                for (grow, &id) in g.rows().into_iter().zip(ids) {
                    let mut r = dst.row_mut(id);
                    r += &grow;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    accumulate(grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    accumulate(grads, *p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::SliceCols(a, start) => {
                let dim = self.shape(*a);
                let w = g.ncols();
                let dst = slot(grads, *a, dim);
                let mut view = dst.slice_mut(s![.., *start..*start + w]);
                view += g;
            }
            Op::SliceRows(a, start) => {
                let dim = self.shape(*a);
                let h = g.nrows();
                let dst = slot(grads, *a, dim);
                let mut view = dst.slice_mut(s![*start..*start + h, ..]);
                view += g;
            }
            Op::SumAll(a) => {
                let dim = self.shape(*a);
                accumulate(grads, *a, Array2::from_elem(dim, g[[0, 0]]));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.shape(*a);
                let row = g.row(0).mapv(|v| v / m as f64);
                let d = row.broadcast((m, n)).expect("broadcast").to_owned();
                accumulate(grads, *a, d);
            }
            Op::Pick(a, cells) => {
                let dim = self.shape(*a);
                let dst = slot(grads, *a, dim);
                for (i, cell) in cells.iter().enumerate() {
                    dst[*cell] += g[[i, 0]];
                }
            }
            Op::CosineRows {
                a,
                b,
                a_unit,
                b_unit,
                a_norm,
                b_norm,
            } => {
                let da_unit = g.dot(b_unit);
                let db_unit = g.t().dot(a_unit);
                accumulate(grads, *a, unit_rows_backward(&da_unit, a_unit, a_norm));
                accumulate(grads, *b, unit_rows_backward(&db_unit, b_unit, b_norm));
            }
            Op::LogOnePlusSumExp(a) => {
                let out = node.value[[0, 0]];
                let scale = g[[0, 0]];
                let d = self.value(*a).mapv(|x| scale * (x - out).exp());
                accumulate(grads, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let mut d = self.value(*a).clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let (lse, gr) = (node.value[[r, 0]], g[[r, 0]]);
                    row.mapv_inplace(|x| gr * (x - lse).exp());
                }
                accumulate(grads, *a, d);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().as_standard_layout().into_owned()),
        }
    }

    /// Adds this tape's parameter gradients into `buffer`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, buffer: &mut GradBuffer) {
        for (id, var) in &self.params {
            if let Some(g) = grads.wrt(*var) {
                buffer.accumulate(*id, g);
            }
        }
    }

    /// Parameter gradients recorded on this tape, sorted by parameter id.
    pub fn param_grads<'a>(&self, grads: &'a Gradients) -> Vec<(ParamId, &'a Array2<f64>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, var)| grads.wrt(*var).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
