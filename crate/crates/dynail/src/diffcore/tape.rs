use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    /// Trainable leaf; receives gradient.
    Param,
    /// Fixed leaf; receives no gradient.
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    /// `[m,n] x [n] -> [m]` or `[m,n] x [n,p] -> [m,p]`.
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Softmax over a vector.
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Scale { x: NodeId, c: f64 },
    AddScalar(NodeId),
    /// Sum of all elements -> scalar.
    Sum(NodeId),
    /// Mean of all elements -> scalar.
    Mean(NodeId),
    /// Concatenation of vectors.
    Concat(Vec<NodeId>),
    /// Contiguous sub-vector.
    Slice { x: NodeId, start: usize, len: usize },
    /// `0.5 * sum((a - b)^2)` -> scalar.
    SquaredError(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Neg(..) => "neg",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Scale { .. } => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SquaredError(..) => "squared_error",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Adjoints from a full backward pass, indexed by node id. Constants and
/// untouched nodes read back as zeros via [`Tape::grad_of`].
pub struct GradMap {
    adj: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Result of a seeded partial backward pass (see [`Tape::backward_seeded`]).
///
/// `captured` holds the adjoints delivered to stop nodes and to parameter
/// leaves, in traversal order; a below-floor node may appear more than once
/// (one entry per incoming path), so sum with [`Tape::captured_sum`].
pub struct SeededBackward {
    pub captured: Vec<(NodeId, Tensor)>,
}

/// Dynamically built computation graph (Wengert list). Forward values are
/// computed eagerly as nodes are appended.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    // ---- leaves ------------------------------------------------------

    /// Trainable leaf (copies the tensor in).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Param, value, true)
    }

    /// Non-trainable leaf: zero gradient by definition.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Const, value, false)
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> NodeId {
        self.constant(Tensor::vector(data.to_vec()))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<NodeId, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        Ok(self.push_unchecked(op, value, needs_grad))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn mismatch(&self, detail: String) -> DiffError {
        DiffError::ShapeMismatch {
            node: self.nodes.len(),
            detail,
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(format!(
                "{what} requires equal shapes, got {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise binary ------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = match (va.shape(), vb.shape()) {
            ([m, n], [n2]) if n == n2 => {
                let (m, n) = (*m, *n);
                let mut out = vec![0.0; m];
                let ad = va.data();
                let bd = vb.data();
                for i in 0..m {
                    let row = &ad[i * n..(i + 1) * n];
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += row[k] * bd[k];
                    }
                    out[i] = acc;
                }
                Tensor::vector(out)
            }
            ([m, n], [n2, p]) if n == n2 => {
                let (m, n, p) = (*m, *n, *p);
                let mut out = vec![0.0; m * p];
                let ad = va.data();
                let bd = vb.data();
                for i in 0..m {
                    for k in 0..n {
                        let aik = ad[i * n + k];
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &bd[k * p..(k + 1) * p];
                        let orow = &mut out[i * p..(i + 1) * p];
                        for j in 0..p {
                            orow[j] += aik * brow[j];
                        }
                    }
                }
                Tensor::matrix(m, p, out).unwrap()
            }
            (sa, sb) => {
                return Err(self.mismatch(format!("matmul on shapes {sa:?} x {sb:?}")));
            }
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, ng)
    }

    // ---- elementwise unary -------------------------------------------

    fn unary(
        &mut self,
        x: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(op, value, ng)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Sigmoid(x), stable_sigmoid)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Scale { x, c }, |v| c * v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let xs = self.value(x).data();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            exps.iter().map(|e| e / z).collect(),
        )
        .unwrap();
        let ng = self.needs(x);
        self.push(Op::Softmax(x), value, ng)
    }

    // ---- reductions and shape ops ------------------------------------

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(self.mismatch("mean of empty tensor".into()));
        }
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Op::Mean(x), Tensor::scalar(s / n as f64), ng)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        let mut data = Vec::new();
        let mut ng = false;
        for &x in xs {
            if self.value(x).shape().len() > 1 {
                return Err(self.mismatch(format!(
                    "concat expects vectors, got shape {:?}",
                    self.value(x).shape()
                )));
            }
            data.extend_from_slice(self.value(x).data());
            ng |= self.needs(x);
        }
        self.push(Op::Concat(xs.to_vec()), Tensor::vector(data), ng)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let v = self.value(x);
        if v.shape().len() > 1 || start + len > v.len() {
            return Err(self.mismatch(format!(
                "slice [{start}, {start}+{len}) of shape {:?}",
                v.shape()
            )));
        }
        let data = v.data()[start..start + len].to_vec();
        let ng = self.needs(x);
        self.push(Op::Slice { x, start, len }, Tensor::vector(data), ng)
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape(a, b, "squared_error")?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::SquaredError(a, b), Tensor::scalar(0.5 * s), ng)
    }

    /// `<a, b>` as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar output over the whole tape. Subgraphs with
    /// no trainable leaves beneath them are skipped.
    pub fn backward(&self, output: NodeId) -> Result<GradMap, DiffError> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(DiffError::NonScalarOutput {
                node: output.0,
                len: out.len(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, 0, &[], false, &mut adj, &mut Vec::new());
            adj[i] = Some(g);
        }
        Ok(GradMap { adj })
    }

    /// Gradient of `output` with respect to `wrt`, zeros where a parameter
    /// does not influence the output (or is a constant).
    pub fn gradient(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, DiffError> {
        let map = self.backward(output)?;
        Ok(wrt.iter().map(|&id| self.grad_of(&map, id)).collect())
    }

    pub fn grad_of(&self, map: &GradMap, id: NodeId) -> Tensor {
        map.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    /// Total adjoint a seeded pass delivered to `id` (below-floor nodes can
    /// collect one entry per path; this sums them). Zeros if untouched.
    pub fn captured_sum(&self, sb: &SeededBackward, id: NodeId) -> Tensor {
        let mut acc = Tensor::zeros(self.value(id).shape());
        for (n, g) in &sb.captured {
            if *n == id {
                acc.add_assign(g);
            }
        }
        acc
    }

    /// Partial reverse pass: seeds `seed` with `seed_grad` and propagates
    /// down to (but not into) `stops` and to nodes below `floor`. Adjoints
    /// delivered to stop nodes are captured whatever their kind (constants
    /// included), and parameter leaves are captured wherever they sit;
    /// anything else below the floor is dropped. This is the building block
    /// for per-step Jacobians of an unrolled trajectory: the scan touches
    /// only nodes in `[floor, seed]`, so cost tracks the subgraph, not the
    /// whole tape.
    pub fn backward_seeded(
        &self,
        seed: NodeId,
        seed_grad: Tensor,
        floor: usize,
        stops: &[NodeId],
    ) -> SeededBackward {
        debug_assert_eq!(seed_grad.shape(), self.value(seed).shape());
        let mut captured = Vec::new();
        if seed.0 < floor || stops.contains(&seed) {
            captured.push((seed, seed_grad));
            return SeededBackward { captured };
        }
        let lo = floor;
        let mut adj: Vec<Option<Tensor>> = vec![None; seed.0 + 1 - lo];
        adj[seed.0 - lo] = Some(seed_grad);
        for i in (lo..=seed.0).rev() {
            let Some(g) = adj[i - lo].take() else { continue };
            if stops.contains(&NodeId(i)) {
                captured.push((NodeId(i), g));
                continue;
            }
            match self.nodes[i].op {
                // In-window param leaves are captured, const leaves dropped;
                // everything else propagates (const interiors included, since
                // paths to stop/floor targets may run through them).
                Op::Param => captured.push((NodeId(i), g)),
                Op::Const => {}
                _ => self.propagate(i, &g, lo, stops, true, &mut adj, &mut captured),
            }
        }
        SeededBackward { captured }
    }

    /// Whether a pass should bother delivering an adjoint to `to`. Stop
    /// targets always accept. Below the floor nothing propagates further,
    /// so only capture targets (stops, trainable leaves) accept; in range,
    /// a seeded pass flows through everything but const leaves while a full
    /// pass prunes subgraphs without trainable leaves.
    fn accepts(&self, to: NodeId, lo: usize, stops: &[NodeId], seeded: bool) -> bool {
        if stops.contains(&to) {
            return true;
        }
        if to.0 < lo {
            return matches!(self.nodes[to.0].op, Op::Param);
        }
        if seeded {
            !matches!(self.nodes[to.0].op, Op::Const)
        } else {
            self.nodes[to.0].needs_grad
        }
    }

    /// Routes one node's adjoint into its inputs. Contributions to nodes
    /// below `lo` are captured; in-range contributions accumulate in `adj`.
    #[allow(clippy::too_many_arguments)]
    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        lo: usize,
        stops: &[NodeId],
        seeded: bool,
        adj: &mut [Option<Tensor>],
        captured: &mut Vec<(NodeId, Tensor)>,
    ) {
        let mut send = |to: NodeId, contrib: Tensor, adj: &mut [Option<Tensor>]| {
            if !self.accepts(to, lo, stops, seeded) {
                return;
            }
            if to.0 < lo {
                captured.push((to, contrib));
                return;
            }
            match &mut adj[to.0 - lo] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };

        let node = &self.nodes[i];
        let val = &node.value;
        match &node.op {
            Op::Param | Op::Const => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.clone(), adj);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), adj);
                let mut n = g.clone();
                n.scale_assign(-1.0);
                send(*b, n, adj);
            }
            Op::Neg(x) => {
                let mut n = g.clone();
                n.scale_assign(-1.0);
                send(*x, n, adj);
            }
            Op::Mul(a, b) => {
                let da = elementwise_mul(g, self.value(*b));
                let db = elementwise_mul(g, self.value(*a));
                send(*a, da, adj);
                send(*b, db, adj);
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                // These gradients are the expensive ones; skip building a
                // tensor the recipient would drop (e.g. a frozen weight).
                let want_a = self.accepts(*a, lo, stops, seeded);
                let want_b = self.accepts(*b, lo, stops, seeded);
                match (va.shape(), vb.shape()) {
                    ([m, n], [_]) => {
                        let (m, n) = (*m, *n);
                        let gd = g.data();
                        let ad = va.data();
                        let bd = vb.data();
                        if want_a {
                            // dA = g outer b
                            let mut da = vec![0.0; m * n];
                            for i in 0..m {
                                let gi = gd[i];
                                if gi != 0.0 {
                                    let row = &mut da[i * n..(i + 1) * n];
                                    for k in 0..n {
                                        row[k] = gi * bd[k];
                                    }
                                }
                            }
                            send(*a, Tensor::matrix(m, n, da).unwrap(), adj);
                        }
                        if want_b {
                            // dB = A^T g
                            let mut db = vec![0.0; n];
                            for i in 0..m {
                                let gi = gd[i];
                                if gi != 0.0 {
                                    let arow = &ad[i * n..(i + 1) * n];
                                    for k in 0..n {
                                        db[k] += gi * arow[k];
                                    }
                                }
                            }
                            send(*b, Tensor::vector(db), adj);
                        }
                    }
                    ([m, n], [_, p]) => {
                        let (m, n, p) = (*m, *n, *p);
                        let gd = g.data();
                        let ad = va.data();
                        let bd = vb.data();
                        if want_a {
                            // dA = G B^T
                            let mut da = vec![0.0; m * n];
                            for i in 0..m {
                                for k in 0..n {
                                    let mut acc = 0.0;
                                    let grow = &gd[i * p..(i + 1) * p];
                                    let brow = &bd[k * p..(k + 1) * p];
                                    for j in 0..p {
                                        acc += grow[j] * brow[j];
                                    }
                                    da[i * n + k] = acc;
                                }
                            }
                            send(*a, Tensor::matrix(m, n, da).unwrap(), adj);
                        }
                        if want_b {
                            // dB = A^T G
                            let mut db = vec![0.0; n * p];
                            for k in 0..n {
                                for i in 0..m {
                                    let aik = ad[i * n + k];
                                    if aik == 0.0 {
                                        continue;
                                    }
                                    let grow = &gd[i * p..(i + 1) * p];
                                    let drow = &mut db[k * p..(k + 1) * p];
                                    for j in 0..p {
                                        drow[j] += aik * grow[j];
                                    }
                                }
                            }
                            send(*b, Tensor::matrix(n, p, db).unwrap(), adj);
                        }
                    }
                    _ => unreachable!("matmul shapes validated at forward"),
                }
            }
            Op::Relu(x) => {
                // Subgradient 0 at exactly 0.
                let d = zip_map(g, self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                send(*x, d, adj);
            }
            Op::Tanh(x) => {
                let d = zip_map(g, val, |gi, yi| gi * (1.0 - yi * yi));
                send(*x, d, adj);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, val, |gi, yi| gi * yi * (1.0 - yi));
                send(*x, d, adj);
            }
            Op::Softmax(x) => {
                let y = val.data();
                let gd = g.data();
                let dot: f64 = y.iter().zip(gd).map(|(yi, gi)| yi * gi).sum();
                let d = Tensor::new(
                    val.shape().to_vec(),
                    y.iter().zip(gd).map(|(yi, gi)| yi * (gi - dot)).collect(),
                )
                .unwrap();
                send(*x, d, adj);
            }
            Op::Log(x) => {
                let d = zip_map(g, self.value(*x), |gi, xi| gi / xi);
                send(*x, d, adj);
            }
            Op::Exp(x) => {
                let d = zip_map(g, val, |gi, yi| gi * yi);
                send(*x, d, adj);
            }
            Op::Clamp { x, lo: l, hi: h } => {
                let d = zip_map(g, self.value(*x), |gi, xi| {
                    if xi > *l && xi < *h {
                        gi
                    } else {
                        0.0
                    }
                });
                send(*x, d, adj);
            }
            Op::Scale { x, c } => {
                let mut d = g.clone();
                d.scale_assign(*c);
                send(*x, d, adj);
            }
            Op::AddScalar(x) => {
                send(*x, g.clone(), adj);
            }
            Op::Sum(x) => {
                send(*x, Tensor::full(self.value(*x).shape(), g.item()), adj);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                send(*x, Tensor::full(self.value(*x).shape(), g.item() / n), adj);
            }
            Op::Concat(xs) => {
                let gd = g.data();
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    send(x, Tensor::vector(gd[off..off + n].to_vec()), adj);
                    off += n;
                }
            }
            Op::Slice { x, start, len } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.data_mut()[*start..*start + *len].copy_from_slice(g.data());
                send(*x, d, adj);
            }
            Op::SquaredError(a, b) => {
                let gi = g.item();
                let da = zip_map(self.value(*a), self.value(*b), |x, y| gi * (x - y));
                let mut db = da.clone();
                db.scale_assign(-1.0);
                send(*a, da, adj);
                send(*b, db, adj);
            }
        }
    }
}

fn elementwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_gradient() {
        // f(x) = x*x at x=3 -> 9, df/dx = 6
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.value(y).item(), 9.0);
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
        // sigma'(0) = 0.25
        let g = t.gradient(y, &[x]).unwrap();
        assert!((g[0].item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let mut t = Tape::new();
        let x = t.constant_vec(&[0.0, 0.0, 0.0]);
        let y = t.softmax(x).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let c = t.constant_scalar(5.0);
        let p = t.mul(x, c).unwrap();
        let map = t.backward(p).unwrap();
        assert_eq!(t.grad_of(&map, c).item(), 0.0);
        assert_eq!(t.grad_of(&map, x).item(), 5.0);
    }

    #[test]
    fn shape_mismatch_reports_node() {
        let mut t = Tape::new();
        let a = t.constant_vec(&[1.0, 2.0]);
        let b = t.constant_vec(&[1.0, 2.0, 3.0]);
        match t.add(a, b) {
            Err(DiffError::ShapeMismatch { node, .. }) => assert_eq!(node, 2),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_forward_is_rejected_with_node_id() {
        let mut t = Tape::new();
        let x = t.constant_scalar(0.0);
        match t.log(x) {
            Err(DiffError::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            t.backward(x),
            Err(DiffError::NonScalarOutput { len: 2, .. })
        ));
    }

    #[test]
    fn shared_node_adjoints_accumulate() {
        // y = x + x => dy/dx = 2 exercises multi-use accumulation.
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.5));
        let y = t.add(x, x).unwrap();
        let g = t.gradient(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 2.0);
    }

    #[test]
    fn evaluate_is_deterministic_bitwise() {
        let build = || {
            let mut t = Tape::new();
            let w = t.param(Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 0.01, 2.0, -0.5]).unwrap());
            let x = t.constant_vec(&[0.2, -0.4, 1.1]);
            let h = t.matmul(w, x).unwrap();
            let h = t.tanh(h).unwrap();
            let s = t.sum(h).unwrap();
            t.value(s).item()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn seeded_backward_stops_at_boundaries() {
        // y = relu(w x); ask for dy_0/dx with x as a below-floor leaf.
        let mut t = Tape::new();
        let x = t.constant_vec(&[1.0, -2.0]);
        let floor = t.len();
        let w = t.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let h = t.matmul(w, x).unwrap();
        let y = t.relu(h).unwrap(); // values [max(0,-3), max(0,-5)] = [0,0]
        let out = t.backward_seeded(y, Tensor::vector(vec![1.0, 0.0]), floor, &[]);
        // relu kills the gradient (both pre-activations negative).
        for (id, g) in &out.captured {
            if *id == x {
                assert!(g.data().iter().all(|&v| v == 0.0));
            }
        }
        // Param w sits above the floor; it is captured as a param leaf.
        assert!(out.captured.iter().any(|(id, _)| *id == w));
    }
}
