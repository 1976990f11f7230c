//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is an `Array2<f64>`: a batch of row vectors, a `1×n` parameter
//! row, or a `1×1` scalar. Operations append a node holding their output and
//! whatever they need for the adjoint. Inputs always precede outputs on the
//! tape, so walking it backwards is a valid reverse topological order.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{clamped_acos, COS_CLAMP};

/// FRN stabilizer added to the mean square.
pub const FRN_EPS: f64 = 1e-6;

/// A leaf value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Array2<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn param(data: Array2<f64>) -> Self {
        Self {
            data,
            requires_grad: true,
        }
    }

    pub fn constant(data: Array2<f64>) -> Self {
        Self {
            data,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.data.nrows(), self.data.ncols()]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Sum,
    MatMul,
    AddRowBias,
    Frn,
    Tlu,
    MaskMul,
    NormalizeRows,
    PairAngles,
    WeightedSum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Frn {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_rms: Vec<f64>,
    },
    Tlu(Var, Var),
    MaskMul(Var, Array2<f64>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    PairAngles {
        u: Var,
        v: Var,
        pairs: Vec<(usize, usize)>,
        dcos: Vec<f64>,
    },
    WeightedSum(Var, Array2<f64>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Frn { .. } => OpKind::Frn,
            Op::Tlu(..) => OpKind::Tlu,
            Op::MaskMul(..) => OpKind::MaskMul,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::PairAngles { .. } => OpKind::PairAngles,
            Op::WeightedSum(..) => OpKind::WeightedSum,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    needs_grad: bool,
    op: Op,
}

/// Test hook: scales the adjoints an op of `kind` passes to its inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointFault {
    pub kind: OpKind,
    pub factor: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

/// Adjoints of every node reached from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adjoint of `var`, or zeros of `shape` when it was not reached.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn shape_err(op: &str, a: &Array2<f64>, b: &Array2<f64>) -> Error {
    Error::ShapeMismatch(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs an [`AdjointFault`]. Used by gradient-check self tests to make
    /// sure a wrong adjoint is detected.
    pub fn with_adjoint_fault(mut self, fault: AdjointFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, data: Array2<f64>) -> Var {
        self.leaf(Tensor::param(data))
    }

    pub fn constant(&mut self, data: Array2<f64>) -> Var {
        self.leaf(Tensor::constant(data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("add", va, vb));
        }
        let out = va + vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("mul", va, vb));
        }
        let out = va * vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.needs(a);
        self.push(out, ng, Op::Scale(a, c))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), ng, Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let out = va.dot(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::MatMul(a, b)))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(shape_err("add_row_bias", vx, vb));
        }
        let out = vx + vb;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, ng, Op::AddRowBias(x, bias)))
    }

    /// Affine map `x·W (+ b)`.
    pub fn dense(&mut self, x: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weights)?;
        match bias {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Filter response normalization over each row:
    /// `γ · x / √(mean(x²) + ε) + β`.
    pub fn frn(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.ncols();
        for p in [gamma, beta] {
            let vp = self.value(p);
            if vp.nrows() != 1 || vp.ncols() != cols {
                return Err(shape_err("frn", vx, vp));
            }
        }
        let inv_rms: Vec<f64> = vx
            .rows()
            .into_iter()
            .map(|r| 1.0 / (r.dot(&r) / cols as f64 + FRN_EPS).sqrt())
            .collect();
        let mut out = vx.clone();
        let (vg, vbeta) = (self.value(gamma), self.value(beta));
        for (mut row, s) in out.rows_mut().into_iter().zip(&inv_rms) {
            Zip::from(&mut row)
                .and(vg.row(0))
                .and(vbeta.row(0))
                .for_each(|o, g, b| *o = g * (*o * s) + b);
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            ng,
            Op::Frn {
                x,
                gamma,
                beta,
                inv_rms,
            },
        ))
    }

    /// Thresholded linear unit `max(y, τ)` with a learned `1×n` threshold.
    pub fn tlu(&mut self, y: Var, tau: Var) -> Result<Var> {
        let (vy, vt) = (self.value(y), self.value(tau));
        if vt.nrows() != 1 || vt.ncols() != vy.ncols() {
            return Err(shape_err("tlu", vy, vt));
        }
        let mut out = vy.clone();
        for mut row in out.rows_mut() {
            Zip::from(&mut row).and(vt.row(0)).for_each(|o, t| *o = o.max(*t));
        }
        let ng = self.needs(y) || self.needs(tau);
        Ok(self.push(out, ng, Op::Tlu(y, tau)))
    }

    pub fn frn_tlu(&mut self, x: Var, gamma: Var, beta: Var, tau: Var) -> Result<Var> {
        let y = self.frn(x, gamma, beta)?;
        self.tlu(y, tau)
    }

    /// Multiplies by a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Array2<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != mask.dim() {
            return Err(shape_err("mask_mul", vx, &mask));
        }
        let out = vx * &mask;
        let ng = self.needs(x);
        Ok(self.push(out, ng, Op::MaskMul(x, mask)))
    }

    /// Inverted dropout: keeps each entry with probability `1 − rate` and
    /// rescales survivors by `1/(1 − rate)`. Identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::OutOfRange {
                what: "dropout rate",
                value: rate,
                range: "[0, 1)".into(),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = Array2::from_shape_simple_fn(self.value(x).dim(), || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        self.mask_mul(x, mask)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let norms: Vec<f64> = vx.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some(n) = norms.iter().find(|n| !(**n >= 1e-12)) {
            return Err(Error::ZeroVector { norm: *n });
        }
        let mut out = vx.clone();
        for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let ng = self.needs(x);
        Ok(self.push(out, ng, Op::NormalizeRows { x, norms }))
    }

    /// Angles `acos(clamp(uᵢ·vⱼ))` for each `(i, j)` in `pairs`, as a `k×1`
    /// column. Rows of `u` and `v` are expected to be unit vectors.
    pub fn pair_angles(&mut self, u: Var, v: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let (vu, vv) = (self.value(u), self.value(v));
        if vu.ncols() != vv.ncols() {
            return Err(shape_err("pair_angles", vu, vv));
        }
        if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= vu.nrows() || *j >= vv.nrows()) {
            return Err(Error::ShapeMismatch(format!(
                "pair_angles: index ({i}, {j}) out of range for {:?} and {:?}",
                vu.shape(),
                vv.shape()
            )));
        }
        let mut out = Array2::zeros((pairs.len(), 1));
        let mut dcos = Vec::with_capacity(pairs.len());
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let c = crate::geometry::dot(
                vu.row(i).as_slice().expect("standard layout"),
                vv.row(j).as_slice().expect("standard layout"),
            );
            out[[k, 0]] = clamped_acos(c);
            // Inside the clamp region the clamped function is flat.
            let inside = c > -1.0 + COS_CLAMP && c < 1.0 - COS_CLAMP;
            dcos.push(if inside { -1.0 / (1.0 - c * c).sqrt() } else { 0.0 });
        }
        let ng = self.needs(u) || self.needs(v);
        Ok(self.push(out, ng, Op::PairAngles { u, v, pairs, dcos }))
    }

    /// `Σ wₖ·xₖ` with constant weights, as a `1×1` node.
    pub fn weighted_sum(&mut self, x: Var, weights: Array2<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != weights.dim() {
            return Err(shape_err("weighted_sum", vx, &weights));
        }
        let s: f64 = vx.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        let ng = self.needs(x);
        Ok(self.push(Array2::from_elem((1, 1), s), ng, Op::WeightedSum(x, weights)))
    }

    /// Reverse accumulation from a `1×1` loss.
    ///
    /// Every node reached from `loss` is visited once, in reverse tape order.
    /// The tape is not modified, so repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a 1x1 loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let factor = match self.fault {
                Some(f) if f.kind == node.op.kind() => f.factor,
                _ => 1.0,
            };
            let send = |grads: &mut Vec<Option<Array2<f64>>>, to: Var, mut d: Array2<f64>| {
                if !self.nodes[to.0].needs_grad {
                    return;
                }
                if factor != 1.0 {
                    d *= factor;
                }
                match &mut grads[to.0] {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        send(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        send(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => send(&mut grads, *a, &g * *c),
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    send(&mut grads, *a, d);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        send(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddRowBias(x, b) => {
                    if self.needs(*b) {
                        send(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(&mut grads, *x, g.clone());
                }
                Op::Frn {
                    x,
                    gamma,
                    beta,
                    inv_rms,
                } => {
                    let vx = self.value(*x);
                    let vg = self.value(*gamma);
                    let cols = vx.ncols() as f64;
                    let mut xhat = vx.clone();
                    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_rms) {
                        row.mapv_inplace(|v| v * s);
                    }
                    if self.needs(*beta) {
                        send(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*gamma) {
                        send(&mut grads, *gamma, (&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*x) {
                        // dx = s·(dx̂ − x̂·mean(dx̂ ⊙ x̂)), dx̂ = g ⊙ γ.
                        let dxhat = &g * vg;
                        let mut dx = Array2::zeros(vx.dim());
                        for (r, s) in inv_rms.iter().enumerate() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let proj = dh.dot(&xh) / cols;
                            Zip::from(dx.row_mut(r))
                                .and(dh)
                                .and(xh)
                                .for_each(|o, d, h| *o = s * (d - h * proj));
                        }
                        send(&mut grads, *x, dx);
                    }
                }
                Op::Tlu(y, tau) => {
                    let vy = self.value(*y);
                    let vt = self.value(*tau);
                    let mut dy = g.clone();
                    let mut dt = Array2::zeros((1, vt.ncols()));
                    for (r, row) in vy.rows().into_iter().enumerate() {
                        for (c, yv) in row.iter().enumerate() {
                            // Ties go to the input branch.
                            if *yv < vt[[0, c]] {
                                dt[[0, c]] += g[[r, c]];
                                dy[[r, c]] = 0.0;
                            }
                        }
                    }
                    send(&mut grads, *y, dy);
                    send(&mut grads, *tau, dt);
                }
                Op::MaskMul(x, mask) => send(&mut grads, *x, &g * mask),
                Op::NormalizeRows { x, norms } => {
                    let u = &node.value;
                    let mut dx = Array2::zeros(u.dim());
                    for (r, n) in norms.iter().enumerate() {
                        let gr = g.row(r);
                        let ur = u.row(r);
                        let proj = gr.dot(&ur);
                        Zip::from(dx.row_mut(r))
                            .and(gr)
                            .and(ur)
                            .for_each(|o, gv, uv| *o = (gv - uv * proj) / n);
                    }
                    send(&mut grads, *x, dx);
                }
                Op::PairAngles { u, v, pairs, dcos } => {
                    let (vu, vv) = (self.value(*u), self.value(*v));
                    let mut du = Array2::zeros(vu.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let c = g[[k, 0]] * dcos[k];
                        if c == 0.0 {
                            continue;
                        }
                        du.row_mut(i).scaled_add(c, &vv.row(j));
                        dv.row_mut(j).scaled_add(c, &vu.row(i));
                    }
                    if u == v {
                        du += &dv;
                        send(&mut grads, *u, du);
                    } else {
                        send(&mut grads, *u, du);
                        send(&mut grads, *v, dv);
                    }
                }
                Op::WeightedSum(x, w) => send(&mut grads, *x, w * g[[0, 0]]),
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_diff_check, numerical_gradient};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    /// Flattens `x`, runs `build` through a fresh tape and returns
    /// (value, analytic gradient with respect to `x`).
    fn value_and_grad(
        x: &Array2<f64>,
        build: &dyn Fn(&mut Tape, Var) -> Var,
    ) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = build(&mut tape, v);
        let g = tape.backward(loss).unwrap();
        (tape.scalar(loss), g.get_or_zeros(v, x.dim()).iter().copied().collect())
    }

    fn check(x: Array2<f64>, build: &dyn Fn(&mut Tape, Var) -> Var, tol: f64) {
        let (_, analytic) = value_and_grad(&x, build);
        let dim = x.dim();
        let f = |p: &[f64]| {
            let xp = Array2::from_shape_vec(dim, p.to_vec()).unwrap();
            value_and_grad(&xp, build).0
        };
        let flat: Vec<f64> = x.iter().copied().collect();
        let report = finite_diff_check(f, &flat, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_err <= tol, "{report:?}");
    }

    #[test]
    fn loss_is_parameter() {
        let mut tape = Tape::new();
        let p = tape.param(array![[3.5]]);
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(p).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn two_uses_accumulate() {
        let mut tape = Tape::new();
        let p = tape.param(array![[3.5]]);
        let s = tape.add(p, p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn dense_identity_and_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, -2.0], [0.5, 3.0]]);
        let w = tape.param(Array2::eye(2));
        let b = tape.param(Array2::zeros((1, 2)));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let w0 = tape.param(Array2::zeros((2, 3)));
        let b0 = tape.param(array![[1.0, 2.0, 3.0]]);
        let y = tape.dense(x, w0, Some(b0)).unwrap();
        assert_eq!(tape.value(y), &array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);

        let bad = tape.param(Array2::zeros((3, 3)));
        assert!(matches!(tape.dense(x, bad, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 5);
        let w = random(&mut rng, 5, 3);
        let wv = w.clone();
        check(
            x,
            &move |t, x| {
                let w = t.param(wv.clone());
                let y = t.dense(x, w, None).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            1e-6,
        );
        let xc = random(&mut rng, 4, 5);
        check(
            w,
            &move |t, w| {
                let x = t.constant(xc.clone());
                let b = t.param(array![[0.1, -0.2, 0.3]]);
                let y = t.dense(x, w, Some(b)).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn frn_constant_rows_map_to_sign() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[2.0, 2.0, 2.0], [-0.5, -0.5, -0.5]]);
        let g = tape.param(Array2::ones((1, 3)));
        let b = tape.param(Array2::zeros((1, 3)));
        let t = tape.param(Array2::from_elem((1, 3), f64::NEG_INFINITY));
        let y = tape.frn_tlu(x, g, b, t).unwrap();
        for (r, expected) in [(0, 2.0 / (4.0 + FRN_EPS).sqrt()), (1, -0.5 / (0.25 + FRN_EPS).sqrt())] {
            for c in 0..3 {
                assert!((tape.value(y)[[r, c]] - expected).abs() < 1e-15);
            }
        }
        assert!((tape.value(y)[[0, 0]] - 1.0).abs() < 1e-6);

        let t_hi = tape.param(Array2::from_elem((1, 3), 5.0));
        let y = tape.frn_tlu(x, g, b, t_hi).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 5.0));
    }

    #[test]
    fn frn_tlu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 6);
        let gamma = random(&mut rng, 1, 6);
        let beta = random(&mut rng, 1, 6);
        let w = random(&mut rng, 3, 6);
        // Threshold well below every normalized value: no kink crossings.
        let tau = Array2::from_elem((1, 6), -10.0);
        let (gv, bv, tv, wv) = (gamma.clone(), beta.clone(), tau.clone(), w.clone());
        check(
            x.clone(),
            &move |t, x| {
                let g = t.param(gv.clone());
                let b = t.param(bv.clone());
                let ta = t.param(tv.clone());
                let y = t.frn_tlu(x, g, b, ta).unwrap();
                t.weighted_sum(y, wv.clone()).unwrap()
            },
            1e-6,
        );
        let (xv, bv, wv) = (x.clone(), beta.clone(), w.clone());
        check(
            gamma,
            &move |t, g| {
                let x = t.constant(xv.clone());
                let b = t.param(bv.clone());
                let y = t.frn(x, g, b).unwrap();
                t.weighted_sum(y, wv.clone()).unwrap()
            },
            1e-6,
        );
        // Threshold gradient: tau above some values, away from the kink.
        let (xv, wv) = (x.clone(), w.clone());
        check(
            array![[0.1, 0.2, -0.3, 0.05, 0.4, -0.6]],
            &move |t, ta| {
                let x = t.constant(xv.clone());
                let g = t.param(Array2::ones((1, 6)));
                let b = t.param(Array2::zeros((1, 6)));
                let y = t.frn_tlu(x, g, b, ta).unwrap();
                t.weighted_sum(y, wv.clone()).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn tlu_tie_goes_to_input() {
        let mut tape = Tape::new();
        let y = tape.param(array![[1.0, 0.0]]);
        let t = tape.param(array![[1.0, 0.5]]);
        let o = tape.tlu(y, t).unwrap();
        let s = tape.sum(o);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap(), &array![[1.0, 0.0]]);
        assert_eq!(g.get(t).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0, 3.0]]);
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.3, &mut rng, false).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_elem((1, 100_000), 2.0));
        let y = tape.dropout(x, 0.3, &mut rng, true).unwrap();
        let mean = tape.value(y).mean().unwrap();
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "{mean}");
        let zeros = tape.value(y).iter().filter(|v| **v == 0.0).count();
        assert!((zeros as f64 / 1e5 - 0.3).abs() < 0.01);
    }

    #[test]
    fn normalize_and_angles_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 6, 8);
        let pairs = vec![(0, 3), (1, 4), (2, 5), (0, 4), (5, 1)];
        let w = random(&mut rng, 5, 1);
        check(
            x,
            &move |t, x| {
                let u = t.normalize_rows(x).unwrap();
                let a = t.pair_angles(u, u, pairs.clone()).unwrap();
                t.weighted_sum(a, w.clone()).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn random_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 3, 4);
        let w1 = random(&mut rng, 4, 4);
        let w2 = random(&mut rng, 4, 2);
        check(
            x,
            &move |t, x| {
                let a = t.param(w1.clone());
                let b = t.param(w2.clone());
                let h = t.matmul(x, a).unwrap();
                let h2 = t.mul(h, h).unwrap();
                let h3 = t.add(h2, x).unwrap();
                let h4 = t.scale(h3, -0.7);
                let o = t.matmul(h4, b).unwrap();
                let o2 = t.mul(o, o).unwrap();
                t.sum(o2)
            },
            1e-6,
        );
    }

    #[test]
    fn gradients_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 2, 3);
        let build_f = |t: &mut Tape, x: Var| {
            let s = t.mul(x, x).unwrap();
            t.sum(s)
        };
        let build_g = |t: &mut Tape, x: Var| {
            let u = t.normalize_rows(x).unwrap();
            t.weighted_sum(u, array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap()
        };
        let (_, gf) = value_and_grad(&x, &build_f);
        let (_, gg) = value_and_grad(&x, &build_g);
        let (a, b) = (1.5, -0.25);
        let (_, gc) = value_and_grad(&x, &|t, x| {
            let f = build_f(t, x);
            let g = build_g(t, x);
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            t.add(fa, gb).unwrap()
        });
        for k in 0..gc.len() {
            assert!((gc[k] - (a * gf[k] + b * gg[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_replayable() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let x = tape.param(random(&mut rng, 4, 4));
        let u = tape.normalize_rows(x).unwrap();
        let a = tape.pair_angles(u, u, vec![(0, 1), (2, 3)]).unwrap();
        let l = tape.sum(a);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        let bits = |g: &Gradients| g.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn adjoint_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&mut rng, 3, 3);
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let v = t.param(Array2::from_shape_vec((3, 3), p.to_vec()).unwrap());
            let u = t.normalize_rows(v).unwrap();
            let s = t.mul(u, u).unwrap();
            let w = t.weighted_sum(s, array![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [0.5, 0.5, 0.5]]).unwrap();
            t.scalar(w)
        };
        let mut t = Tape::new().with_adjoint_fault(AdjointFault {
            kind: OpKind::NormalizeRows,
            factor: 1.01,
        });
        let v = t.param(x.clone());
        let u = t.normalize_rows(v).unwrap();
        let s = t.mul(u, u).unwrap();
        let w = t.weighted_sum(s, array![[1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [0.5, 0.5, 0.5]]).unwrap();
        let g = t.backward(w).unwrap();
        let analytic: Vec<f64> = g.get(v).unwrap().iter().copied().collect();
        let flat: Vec<f64> = x.iter().copied().collect();
        let numeric = numerical_gradient(f, &flat, 1e-5);
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max);
        assert!(worst > 5e-3);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let p = tape.param(array![[3.0, 4.0]]);
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[1.0, 2.0]]);
    }
}
