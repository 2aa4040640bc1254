use super::{gemm_acc, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Concat(Var, Var),
    GatherRows(Var, Vec<usize>),
    /// `out[dst] += x[src]` for every `(dst, src)`.
    ScatterAdd(Var, Vec<(usize, usize)>),
    /// `out[dst] += w[e] * x[src]` for every edge `e = (dst, src)`.
    WeightedScatterAdd {
        weights: Var,
        x: Var,
        pairs: Vec<(usize, usize)>,
    },
    SegmentSum(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<usize>),
    /// Row index of the winning element for every (group, column).
    SegmentMax(Var, Vec<usize>),
    SoftmaxGroup(Var, Vec<usize>),
    RowCosine(Var, Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Cosine similarity of two vectors; defined as 0 when either has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (dot, nu, nv) = dot_norms(u, v);
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}

fn dot_norms(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    (dot, uu.sqrt(), vv.sqrt())
}

/// Records forward computations so that gradients can be pulled back into a
/// [`ParamStore`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Reads a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(op, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.map(a, |x| x * factor)?;
        Ok(self.push(t, Op::Scale(a, factor)))
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Result<Var> {
        let t = self.map(a, |x| x + shift)?;
        Ok(self.push(t, Op::AddScalar(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 }).expect("relu keeps finite values");
        self.push(t, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let t = self.map(a, |x| if x > 0.0 { x } else { slope * x })?;
        Ok(self.push(t, Op::LeakyRelu(a, slope)))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a, "concat")?;
        let (rb, cb) = self.dims(b, "concat")?;
        if ra != rb {
            return Err(self.shape_err("concat", a, b));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        Ok(self.push(Tensor::matrix(ra, ca + cb, data)?, Op::Concat(a, b)))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(x, "gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let t = Tensor::matrix(index.len(), c, data)?;
        Ok(self.push(t, Op::GatherRows(x, index)))
    }

    fn check_pairs(pairs: &[(usize, usize)], n_out: usize, n_in: usize, op: &'static str) -> Result<()> {
        for &(dst, src) in pairs {
            if dst >= n_out {
                return Err(TensorError::Index { op, index: dst, len: n_out });
            }
            if src >= n_in {
                return Err(TensorError::Index { op, index: src, len: n_in });
            }
        }
        Ok(())
    }

    /// Sums rows of `x` into `n_out` output rows: `out[dst] += x[src]`.
    pub fn scatter_add(&mut self, x: Var, pairs: Vec<(usize, usize)>, n_out: usize) -> Result<Var> {
        let (r, c) = self.dims(x, "scatter_add")?;
        Self::check_pairs(&pairs, n_out, r, "scatter_add")?;
        let mut out = Tensor::zeros(vec![n_out, c]);
        let xv = self.value(x);
        for &(dst, src) in &pairs {
            for (o, v) in out.row_mut(dst).iter_mut().zip(xv.row(src)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterAdd(x, pairs)))
    }

    /// `out[dst] += weights[e] * x[src]` for edge `e = pairs[e]`; `weights` is `E×1`.
    pub fn weighted_scatter_add(
        &mut self,
        weights: Var,
        x: Var,
        pairs: Vec<(usize, usize)>,
        n_out: usize,
    ) -> Result<Var> {
        let (r, c) = self.dims(x, "weighted_scatter_add")?;
        let (e, wc) = self.dims(weights, "weighted_scatter_add")?;
        if e != pairs.len() || wc != 1 {
            return Err(TensorError::Shape {
                op: "weighted_scatter_add",
                left: vec![e, wc],
                right: vec![pairs.len(), 1],
            });
        }
        Self::check_pairs(&pairs, n_out, r, "weighted_scatter_add")?;
        let mut out = Tensor::zeros(vec![n_out, c]);
        let (wv, xv) = (self.value(weights), self.value(x));
        for (k, &(dst, src)) in pairs.iter().enumerate() {
            let w = wv.data()[k];
            for (o, v) in out.row_mut(dst).iter_mut().zip(xv.row(src)) {
                *o += w * v;
            }
        }
        Ok(self.push(out, Op::WeightedScatterAdd { weights, x, pairs }))
    }

    fn check_groups(&self, x: Var, groups: &[usize], n_groups: usize, op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.dims(x, op)?;
        if groups.len() != r {
            return Err(TensorError::Shape {
                op,
                left: vec![r, c],
                right: vec![groups.len()],
            });
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(TensorError::Index { op, index: g, len: n_groups });
        }
        Ok((r, c))
    }

    /// Per-group row sums; `groups[i]` is the output row of input row `i`.
    pub fn segment_sum(&mut self, x: Var, groups: Vec<usize>, n_groups: usize) -> Result<Var> {
        let (_, c) = self.check_groups(x, &groups, n_groups, "segment_sum")?;
        let mut out = Tensor::zeros(vec![n_groups, c]);
        let xv = self.value(x);
        for (i, &g) in groups.iter().enumerate() {
            for (o, v) in out.row_mut(g).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum(x, groups)))
    }

    /// Per-group row means; empty groups yield zero rows.
    pub fn segment_mean(&mut self, x: Var, groups: Vec<usize>, n_groups: usize) -> Result<Var> {
        let (_, c) = self.check_groups(x, &groups, n_groups, "segment_mean")?;
        let mut counts = vec![0usize; n_groups];
        for &g in &groups {
            counts[g] += 1;
        }
        let mut out = Tensor::zeros(vec![n_groups, c]);
        let xv = self.value(x);
        for (i, &g) in groups.iter().enumerate() {
            let inv = 1.0 / counts[g] as f64;
            for (o, v) in out.row_mut(g).iter_mut().zip(xv.row(i)) {
                *o += v * inv;
            }
        }
        Ok(self.push(out, Op::SegmentMean(x, groups, counts)))
    }

    /// Per-group elementwise maxima. Ties go to the earliest row.
    pub fn segment_max(&mut self, x: Var, groups: Vec<usize>, n_groups: usize) -> Result<Var> {
        let (r, c) = self.check_groups(x, &groups, n_groups, "segment_max")?;
        let mut out = Tensor::zeros(vec![n_groups, c]);
        let mut arg = vec![usize::MAX; n_groups * c];
        let xv = self.value(x);
        for i in 0..r {
            let g = groups[i];
            for j in 0..c {
                let slot = g * c + j;
                let v = xv.data()[i * c + j];
                if arg[slot] == usize::MAX || v > out.data()[slot] {
                    arg[slot] = i;
                    out.data_mut()[slot] = v;
                }
            }
        }
        Ok(self.push(out, Op::SegmentMax(x, arg)))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows();
        self.segment_sum(x, vec![0; r], 1)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows();
        self.segment_mean(x, vec![0; r], 1)
    }

    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows();
        self.segment_max(x, vec![0; r], 1)
    }

    /// Softmax of an `E×1` column within each group of entries.
    pub fn softmax_over_group(&mut self, x: Var, groups: Vec<usize>, n_groups: usize) -> Result<Var> {
        let (_, c) = self.check_groups(x, &groups, n_groups, "softmax_over_group")?;
        if c != 1 {
            return Err(TensorError::Shape {
                op: "softmax_over_group",
                left: self.value(x).shape().to_vec(),
                right: vec![groups.len(), 1],
            });
        }
        let xv = self.value(x).data();
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (v, &g) in xv.iter().zip(&groups) {
            max[g] = max[g].max(*v);
        }
        let exps: Vec<f64> = xv.iter().zip(&groups).map(|(v, &g)| (v - max[g]).exp()).collect();
        let mut denom = vec![0.0; n_groups];
        for (e, &g) in exps.iter().zip(&groups) {
            denom[g] += e;
        }
        let out: Vec<f64> = exps.iter().zip(&groups).map(|(e, &g)| e / denom[g]).collect();
        let t = Tensor::matrix(out.len(), 1, out)?;
        Ok(self.push(t, Op::SoftmaxGroup(x, groups)))
    }

    /// Row-wise cosine similarity of two `P×d` matrices, giving `P×1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a, "row_cosine")?;
        let (rb, cb) = self.dims(b, "row_cosine")?;
        if ra != rb || ca != cb {
            return Err(self.shape_err("row_cosine", a, b));
        }
        let out: Vec<f64> = (0..ra)
            .map(|i| cosine(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        Ok(self.push(Tensor::matrix(ra, 1, out)?, Op::RowCosine(a, b)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let t = Tensor::scalar(s).expect("sum of finite values overflowed");
        self.push(t, Op::SumAll(x))
    }

    /// Accumulates `∂loss/∂param` into every parameter read onto this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut seed = Tensor::zeros_like(lt);
        seed.fill(1.0);
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2("matmul")?;
                    let n = self.value(*b).cols();
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga);
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb);
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, gb)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = map_tensor(&g, |x| -x);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, map_tensor(&g, |x| x * f)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = zip_tensor(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let d = zip_tensor(&g, x, |gv, xv| if xv > 0.0 { gv } else { slope * gv });
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(a, b) => {
                    let (r, ca) = self.value(*a).dims2("concat")?;
                    let cb = self.value(*b).cols();
                    let mut ga = Vec::with_capacity(r * ca);
                    let mut gb = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        let row = g.row(i);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(r, ca, ga)?);
                    accumulate(&mut grads, *b, Tensor::matrix(r, cb, gb)?);
                }
                Op::GatherRows(x, index) => {
                    let mut gx = Tensor::zeros_like(self.value(*x));
                    for (k, &i) in index.iter().enumerate() {
                        add_row(gx.row_mut(i), g.row(k), 1.0);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScatterAdd(x, pairs) => {
                    let mut gx = Tensor::zeros_like(self.value(*x));
                    for &(dst, src) in pairs {
                        add_row(gx.row_mut(src), g.row(dst), 1.0);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedScatterAdd { weights, x, pairs } => {
                    let xv = self.value(*x);
                    let wv = self.value(*weights);
                    let mut gx = Tensor::zeros_like(xv);
                    let mut gw = Tensor::zeros_like(wv);
                    for (k, &(dst, src)) in pairs.iter().enumerate() {
                        let grow = g.row(dst);
                        gw.data_mut()[k] = grow.iter().zip(xv.row(src)).map(|(a, b)| a * b).sum();
                        add_row(gx.row_mut(src), grow, wv.data()[k]);
                    }
                    accumulate(&mut grads, *weights, gw);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentSum(x, groups) => {
                    let mut gx = Tensor::zeros_like(self.value(*x));
                    for (i, &grp) in groups.iter().enumerate() {
                        add_row(gx.row_mut(i), g.row(grp), 1.0);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMean(x, groups, counts) => {
                    let mut gx = Tensor::zeros_like(self.value(*x));
                    for (i, &grp) in groups.iter().enumerate() {
                        add_row(gx.row_mut(i), g.row(grp), 1.0 / counts[grp] as f64);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMax(x, arg) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = Tensor::zeros_like(xv);
                    for (slot, &row) in arg.iter().enumerate() {
                        if row != usize::MAX {
                            gx.data_mut()[row * c + slot % c] += g.data()[slot];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxGroup(x, groups) => {
                    let y = node.value.data();
                    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_groups];
                    for ((yv, gv), &grp) in y.iter().zip(g.data()).zip(groups) {
                        dot[grp] += yv * gv;
                    }
                    let d: Vec<f64> = y
                        .iter()
                        .zip(g.data())
                        .zip(groups)
                        .map(|((yv, gv), &grp)| yv * (gv - dot[grp]))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::matrix(d.len(), 1, d)?);
                }
                Op::RowCosine(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros_like(av);
                    let mut gb = Tensor::zeros_like(bv);
                    for i in 0..av.rows() {
                        let (u, v) = (av.row(i), bv.row(i));
                        let (dot, nu, nv) = dot_norms(u, v);
                        if nu == 0.0 || nv == 0.0 {
                            continue;
                        }
                        let c = dot / (nu * nv);
                        let gi = g.data()[i];
                        let inv = 1.0 / (nu * nv);
                        for (j, out) in ga.row_mut(i).iter_mut().enumerate() {
                            *out = gi * (v[j] * inv - c * u[j] / (nu * nu));
                        }
                        for (j, out) in gb.row_mut(i).iter_mut().enumerate() {
                            *out = gi * (u[j] * inv - c * v[j] / (nv * nv));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SumAll(x) => {
                    let mut gx = Tensor::zeros_like(self.value(*x));
                    gx.fill(g.data()[0]);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_row(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn zip_tensor(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = g.clone();
    for (o, xv) in out.data_mut().iter_mut().zip(x.data()) {
        *o = f(*o, *xv);
    }
    out
}
