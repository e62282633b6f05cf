use super::tensor::{gelu, gelu_grad, sigmoid, Scalar, Tensor2};
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Probability clamp applied before every log in the loss ops.
pub const LOG_CLAMP: Scalar = 1e-12;

/// One gated row of a multi-view correlation op: the source point whose
/// attention row gets blended with its track partners' rows.
#[derive(Debug, Clone)]
pub struct CorrelateGate {
    /// Row index in the output pair's distribution matrix.
    pub row: usize,
    /// (pair index, row index) of each track partner in the other pairs.
    pub partners: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
enum OpKind {
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Mul,
    Scale(Scalar),
    AddRowVec,
    MulRowVec,
    MulColVec,
    RowSoftmax,
    ColSoftmax,
    Sigmoid,
    Gelu,
    LayerNormRows { eps: Scalar },
    ConcatCols,
    SliceCols { from: usize, to: usize },
    /// Rotate adjacent column pairs of input 0 by the angles in input 1.
    RotatePairs,
    RowDot,
    /// Per-row choice between input 0 (mask true) and input 1.
    RowSelect { take_first: Vec<bool> },
    SumAll,
    /// Confidence-gated blending of attention rows across pairs.
    /// Inputs: M distribution matrices followed by M confidence columns;
    /// output is the updated distribution of `pair`.
    MvCorrelate { pair: usize, gates: Vec<CorrelateGate> },
    /// Negative log-likelihood of an assignment matrix plus the two
    /// unmatchability terms. Inputs: (P, sigma_source, sigma_target).
    CorrLoss {
        matches: Vec<(usize, usize)>,
        unmatched_src: Vec<usize>,
        unmatched_tgt: Vec<usize>,
    },
    /// Summed binary cross-entropy against constant labels. Input: N×1.
    BceSum { labels: Vec<Scalar> },
}

struct OpRecord {
    inputs: Vec<VarId>,
    out: VarId,
    kind: OpKind,
}

/// Wengert tape: eager forward evaluation with enough recorded structure to
/// replay the chain rule in reverse. Ops are recorded in creation order,
/// which is already a topological order; `backward` walks it once, in
/// reverse, so replaying the same tape is bitwise reproducible.
pub struct Tape {
    vals: Vec<Tensor2>,
    ops: Vec<OpRecord>,
}

/// Gradients produced by one backward pass, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor2> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape if nothing flowed.
    pub fn get_or_zeros(&self, id: VarId, rows: usize, cols: usize) -> Tensor2 {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor2::zeros(rows, cols),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Register a leaf value (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor2) -> VarId {
        let id = VarId(self.vals.len());
        self.vals.push(value);
        id
    }

    pub fn value(&self, id: VarId) -> &Tensor2 {
        &self.vals[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.vals.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, inputs: Vec<VarId>, kind: OpKind, value: Tensor2) -> VarId {
        let out = VarId(self.vals.len());
        self.vals.push(value);
        self.ops.push(OpRecord { inputs, out, kind });
        out
    }

    fn shape(&self, id: VarId) -> (usize, usize) {
        self.vals[id.0].shape()
    }

    // ---- recorded primitives -------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.vals[a.0].matmul(&self.vals[b.0])?;
        Ok(self.push(vec![a, b], OpKind::MatMul, v))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.vals[a.0].matmul_nt(&self.vals[b.0])?;
        Ok(self.push(vec![a, b], OpKind::MatMulNT, v))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.vals[a.0].add(&self.vals[b.0])?;
        Ok(self.push(vec![a, b], OpKind::Add, v))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.vals[a.0].sub(&self.vals[b.0])?;
        Ok(self.push(vec![a, b], OpKind::Sub, v))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.vals[a.0].zip(&self.vals[b.0], |x, y| x * y)?;
        Ok(self.push(vec![a, b], OpKind::Mul, v))
    }

    pub fn scale(&mut self, a: VarId, c: Scalar) -> VarId {
        let v = self.vals[a.0].scale(c);
        self.push(vec![a], OpKind::Scale(c), v)
    }

    /// a (m×n) + row vector b (1×n) broadcast over rows.
    pub fn add_row_vec(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (1, n) {
            return Err(Error::ShapeMismatch(format!(
                "add_row_vec {m}x{n} + {:?}",
                self.shape(b)
            )));
        }
        let mut v = self.vals[a.0].clone();
        for r in 0..m {
            for (x, y) in v.row_mut(r).iter_mut().zip(self.vals[b.0].data()) {
                *x += *y;
            }
        }
        Ok(self.push(vec![a, b], OpKind::AddRowVec, v))
    }

    /// a (m×n) ∘ row vector b (1×n) broadcast over rows.
    pub fn mul_row_vec(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (1, n) {
            return Err(Error::ShapeMismatch(format!(
                "mul_row_vec {m}x{n} * {:?}",
                self.shape(b)
            )));
        }
        let mut v = self.vals[a.0].clone();
        for r in 0..m {
            for (x, y) in v.row_mut(r).iter_mut().zip(self.vals[b.0].data()) {
                *x *= *y;
            }
        }
        Ok(self.push(vec![a, b], OpKind::MulRowVec, v))
    }

    /// a (m×n) ∘ column vector c (m×1) broadcast over columns.
    pub fn mul_col_vec(&mut self, a: VarId, c: VarId) -> Result<VarId> {
        let (m, n) = self.shape(a);
        if self.shape(c) != (m, 1) {
            return Err(Error::ShapeMismatch(format!(
                "mul_col_vec {m}x{n} * {:?}",
                self.shape(c)
            )));
        }
        let mut v = self.vals[a.0].clone();
        for r in 0..m {
            let s = self.vals[c.0].data()[r];
            for x in v.row_mut(r) {
                *x *= s;
            }
        }
        Ok(self.push(vec![a, c], OpKind::MulColVec, v))
    }

    pub fn row_softmax(&mut self, a: VarId) -> Result<VarId> {
        let src = &self.vals[a.0];
        let (m, n) = src.shape();
        if n == 0 {
            return Err(Error::EmptySoftmax);
        }
        let mut v = src.clone();
        for r in 0..m {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(self.push(vec![a], OpKind::RowSoftmax, v))
    }

    pub fn col_softmax(&mut self, a: VarId) -> Result<VarId> {
        let src = &self.vals[a.0];
        let (m, n) = src.shape();
        if m == 0 {
            return Err(Error::EmptySoftmax);
        }
        let mut v = src.clone();
        for c in 0..n {
            let mut max = Scalar::NEG_INFINITY;
            for r in 0..m {
                max = max.max(v.get(r, c));
            }
            let mut sum = 0.0;
            for r in 0..m {
                let e = (v.get(r, c) - max).exp();
                v.set(r, c, e);
                sum += e;
            }
            for r in 0..m {
                let e = v.get(r, c) / sum;
                v.set(r, c, e);
            }
        }
        Ok(self.push(vec![a], OpKind::ColSoftmax, v))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.vals[a.0].map(sigmoid);
        self.push(vec![a], OpKind::Sigmoid, v)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = self.vals[a.0].map(gelu);
        self.push(vec![a], OpKind::Gelu, v)
    }

    /// Per-row standardization (mean 0, variance 1), no affine part.
    pub fn layer_norm_rows(&mut self, a: VarId, eps: Scalar) -> VarId {
        let src = &self.vals[a.0];
        let (m, n) = src.shape();
        let mut v = src.clone();
        for r in 0..m {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<Scalar>() / n as Scalar;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<Scalar>() / n as Scalar;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(vec![a], OpKind::LayerNormRows { eps }, v)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ma, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if ma != mb {
            return Err(Error::ShapeMismatch(format!(
                "concat_cols {ma}x{na} | {mb}x{nb}"
            )));
        }
        let mut v = Tensor2::zeros(ma, na + nb);
        for r in 0..ma {
            v.row_mut(r)[..na].copy_from_slice(self.vals[a.0].row(r));
            v.row_mut(r)[na..].copy_from_slice(self.vals[b.0].row(r));
        }
        Ok(self.push(vec![a, b], OpKind::ConcatCols, v))
    }

    pub fn slice_cols(&mut self, a: VarId, from: usize, to: usize) -> Result<VarId> {
        let (m, n) = self.shape(a);
        if from >= to || to > n {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols [{from}, {to}) of {m}x{n}"
            )));
        }
        let mut v = Tensor2::zeros(m, to - from);
        for r in 0..m {
            v.row_mut(r).copy_from_slice(&self.vals[a.0].row(r)[from..to]);
        }
        Ok(self.push(vec![a], OpKind::SliceCols { from, to }, v))
    }

    /// Rotate adjacent column pairs (2k, 2k+1) of `a` (n×d, d even) by the
    /// angles in `theta` (n×d/2). Row norms are preserved.
    pub fn rotate_pairs(&mut self, a: VarId, theta: VarId) -> Result<VarId> {
        let (m, d) = self.shape(a);
        if d % 2 != 0 {
            return Err(Error::OddDimension(d));
        }
        if self.shape(theta) != (m, d / 2) {
            return Err(Error::ShapeMismatch(format!(
                "rotate_pairs {m}x{d} with angles {:?}",
                self.shape(theta)
            )));
        }
        let mut v = self.vals[a.0].clone();
        for r in 0..m {
            for k in 0..d / 2 {
                let th = self.vals[theta.0].get(r, k);
                let (s, c) = th.sin_cos();
                let x0 = v.get(r, 2 * k);
                let x1 = v.get(r, 2 * k + 1);
                v.set(r, 2 * k, x0 * c - x1 * s);
                v.set(r, 2 * k + 1, x0 * s + x1 * c);
            }
        }
        Ok(self.push(vec![a, theta], OpKind::RotatePairs, v))
    }

    /// Row-wise dot product of two n×d matrices, giving n×1.
    pub fn row_dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(Error::ShapeMismatch(format!(
                "row_dot {m}x{n} vs {:?}",
                self.shape(b)
            )));
        }
        let mut v = Tensor2::zeros(m, 1);
        for r in 0..m {
            let dot = self.vals[a.0]
                .row(r)
                .iter()
                .zip(self.vals[b.0].row(r))
                .map(|(x, y)| x * y)
                .sum();
            v.set(r, 0, dot);
        }
        Ok(self.push(vec![a, b], OpKind::RowDot, v))
    }

    /// Per-row selection: row r of the output comes from `a` where
    /// `take_first[r]` is true, from `b` otherwise.
    pub fn row_select(&mut self, a: VarId, b: VarId, take_first: Vec<bool>) -> Result<VarId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) || take_first.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "row_select {m}x{n} vs {:?} with {} flags",
                self.shape(b),
                take_first.len()
            )));
        }
        let mut v = Tensor2::zeros(m, n);
        for r in 0..m {
            let src = if take_first[r] {
                self.vals[a.0].row(r)
            } else {
                self.vals[b.0].row(r)
            };
            v.row_mut(r).copy_from_slice(src);
        }
        Ok(self.push(vec![a, b], OpKind::RowSelect { take_first }, v))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.vals[a.0].data().iter().sum();
        self.push(vec![a], OpKind::SumAll, Tensor2::scalar(s))
    }

    /// Confidence-gated blending of per-pair attention distributions.
    ///
    /// `alphas[i]` is pair i's row-stochastic matrix over the shared target
    /// index space; `confs[i]` its N_i×1 confidence column. `gates` lists the
    /// rows of pair `pair` to blend and their partners; ungated rows pass
    /// through unchanged. The gate itself (which rows blend) was decided by
    /// the caller from materialized confidences and is constant in backward.
    pub fn mv_correlate(
        &mut self,
        alphas: &[VarId],
        confs: &[VarId],
        pair: usize,
        gates: Vec<CorrelateGate>,
    ) -> Result<VarId> {
        if alphas.len() != confs.len() || pair >= alphas.len() {
            return Err(Error::ShapeMismatch(format!(
                "mv_correlate: {} alphas, {} confs, pair {pair}",
                alphas.len(),
                confs.len()
            )));
        }
        let n_cols = self.shape(alphas[pair]).1;
        for (&a, &c) in alphas.iter().zip(confs) {
            let (ar, ac) = self.shape(a);
            if ac != n_cols {
                return Err(Error::ShapeMismatch(format!(
                    "mv_correlate: distribution width {ac} != {n_cols}"
                )));
            }
            if self.shape(c) != (ar, 1) {
                return Err(Error::ShapeMismatch(format!(
                    "mv_correlate: confidence shape {:?} for {ar} rows",
                    self.shape(c)
                )));
            }
        }
        let mut v = self.vals[alphas[pair].0].clone();
        for gate in &gates {
            let cu = self.vals[confs[pair].0].get(gate.row, 0);
            let mut z = 0.0;
            let mut blended = vec![0.0; n_cols];
            for &(pj, vrow) in &gate.partners {
                let cv = self.vals[confs[pj].0].get(vrow, 0);
                z += cv;
                for (acc, x) in blended.iter_mut().zip(self.vals[alphas[pj].0].row(vrow)) {
                    *acc += cv * x;
                }
            }
            // Callers skip gates with vanishing partner mass, but guard anyway.
            if z < 1e-9 {
                continue;
            }
            let out_row = v.row_mut(gate.row);
            for (o, b) in out_row.iter_mut().zip(&blended) {
                *o = cu * *o + (1.0 - cu) * (*b / z);
            }
        }
        let mut inputs: Vec<VarId> = alphas.to_vec();
        inputs.extend_from_slice(confs);
        Ok(self.push(inputs, OpKind::MvCorrelate { pair, gates }, v))
    }

    /// Correspondence loss for one pair:
    /// −(1/|C|)·Σ log P(u,x) − (1/2|C∅ᵢ|)·Σ log(1−σ_u) − (1/2|C∅ₜ|)·Σ log(1−σ_x),
    /// each term present only when its index set is nonempty. Probabilities
    /// are clamped to [1e-12, 1−1e-12] before the log.
    pub fn corr_loss(
        &mut self,
        p: VarId,
        sigma_src: VarId,
        sigma_tgt: VarId,
        matches: Vec<(usize, usize)>,
        unmatched_src: Vec<usize>,
        unmatched_tgt: Vec<usize>,
    ) -> Result<VarId> {
        if matches.is_empty() && unmatched_src.is_empty() && unmatched_tgt.is_empty() {
            return Err(Error::EmptySupervision);
        }
        let (np, mp) = self.shape(p);
        if self.shape(sigma_src) != (np, 1) || self.shape(sigma_tgt) != (mp, 1) {
            return Err(Error::ShapeMismatch(format!(
                "corr_loss: P {np}x{mp}, sigmas {:?}/{:?}",
                self.shape(sigma_src),
                self.shape(sigma_tgt)
            )));
        }
        for &(u, x) in &matches {
            if u >= np || x >= mp {
                return Err(Error::InvalidData(format!(
                    "corr_loss: match ({u},{x}) out of range {np}x{mp}"
                )));
            }
        }
        if unmatched_src.iter().any(|&u| u >= np) || unmatched_tgt.iter().any(|&x| x >= mp) {
            return Err(Error::InvalidData(
                "corr_loss: unmatched index out of range".into(),
            ));
        }
        let mut loss = 0.0;
        if !matches.is_empty() {
            let mut s = 0.0;
            for &(u, x) in &matches {
                s += clamp_prob(self.vals[p.0].get(u, x)).ln();
            }
            loss -= s / matches.len() as Scalar;
        }
        if !unmatched_src.is_empty() {
            let mut s = 0.0;
            for &u in &unmatched_src {
                s += clamp_prob(1.0 - self.vals[sigma_src.0].get(u, 0)).ln();
            }
            loss -= s / (2.0 * unmatched_src.len() as Scalar);
        }
        if !unmatched_tgt.is_empty() {
            let mut s = 0.0;
            for &x in &unmatched_tgt {
                s += clamp_prob(1.0 - self.vals[sigma_tgt.0].get(x, 0)).ln();
            }
            loss -= s / (2.0 * unmatched_tgt.len() as Scalar);
        }
        Ok(self.push(
            vec![p, sigma_src, sigma_tgt],
            OpKind::CorrLoss {
                matches,
                unmatched_src,
                unmatched_tgt,
            },
            Tensor2::scalar(loss),
        ))
    }

    /// Σ_u CE(c_u, y_u) with the usual probability clamp.
    pub fn bce_sum(&mut self, c: VarId, labels: Vec<Scalar>) -> Result<VarId> {
        let (m, n) = self.shape(c);
        if n != 1 || labels.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "bce_sum: predictions {m}x{n}, {} labels",
                labels.len()
            )));
        }
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let cu = self.vals[c.0].get(r, 0);
            loss -= y * clamp_prob(cu).ln() + (1.0 - y) * clamp_prob(1.0 - cu).ln();
        }
        Ok(self.push(vec![c], OpKind::BceSum { labels }, Tensor2::scalar(loss)))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass seeded with d(seed)/d(seed) = 1. The seed must be 1×1.
    /// Each recorded op is visited exactly once, in reverse order; calling
    /// this twice on the same tape yields bitwise-identical gradients.
    pub fn backward(&self, seed: VarId) -> Result<Gradients> {
        let seed_val = &self.vals[seed.0];
        if seed_val.shape() != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward seed must be scalar, got {:?}",
                seed_val.shape()
            )));
        }
        if !seed_val.is_finite() {
            return Err(Error::NonFiniteLoss("backward seed is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.vals.len()];
        grads[seed.0] = Some(Tensor2::scalar(1.0));

        for op in self.ops.iter().rev() {
            let Some(g_out) = grads[op.out.0].clone() else {
                continue;
            };
            self.backward_op(op, &g_out, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_op(
        &self,
        op: &OpRecord,
        g: &Tensor2,
        grads: &mut [Option<Tensor2>],
    ) -> Result<()> {
        let val = |id: VarId| &self.vals[id.0];
        match &op.kind {
            OpKind::MatMul => {
                let (a, b) = (op.inputs[0], op.inputs[1]);
                accumulate(grads, a, &g.matmul_nt(val(b))?);
                accumulate(grads, b, &val(a).matmul_tn(g)?);
            }
            OpKind::MatMulNT => {
                let (a, b) = (op.inputs[0], op.inputs[1]);
                accumulate(grads, a, &g.matmul(val(b))?);
                accumulate(grads, b, &g.matmul_tn(val(a))?);
            }
            OpKind::Add => {
                accumulate(grads, op.inputs[0], g);
                accumulate(grads, op.inputs[1], g);
            }
            OpKind::Sub => {
                accumulate(grads, op.inputs[0], g);
                accumulate(grads, op.inputs[1], &g.scale(-1.0));
            }
            OpKind::Mul => {
                let (a, b) = (op.inputs[0], op.inputs[1]);
                accumulate(grads, a, &g.zip(val(b), |x, y| x * y)?);
                accumulate(grads, b, &g.zip(val(a), |x, y| x * y)?);
            }
            OpKind::Scale(c) => {
                accumulate(grads, op.inputs[0], &g.scale(*c));
            }
            OpKind::AddRowVec => {
                accumulate(grads, op.inputs[0], g);
                let (m, n) = g.shape();
                let mut db = Tensor2::zeros(1, n);
                for r in 0..m {
                    for (acc, x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *acc += *x;
                    }
                }
                accumulate(grads, op.inputs[1], &db);
            }
            OpKind::MulRowVec => {
                let (a, b) = (op.inputs[0], op.inputs[1]);
                let (m, n) = g.shape();
                let mut da = g.clone();
                for r in 0..m {
                    for (x, y) in da.row_mut(r).iter_mut().zip(val(b).data()) {
                        *x *= *y;
                    }
                }
                accumulate(grads, a, &da);
                let mut db = Tensor2::zeros(1, n);
                for r in 0..m {
                    for c in 0..n {
                        let inc = g.get(r, c) * val(a).get(r, c);
                        db.set(0, c, db.get(0, c) + inc);
                    }
                }
                accumulate(grads, b, &db);
            }
            OpKind::MulColVec => {
                let (a, c) = (op.inputs[0], op.inputs[1]);
                let (m, _n) = g.shape();
                let mut da = g.clone();
                for r in 0..m {
                    let s = val(c).get(r, 0);
                    for x in da.row_mut(r) {
                        *x *= s;
                    }
                }
                accumulate(grads, a, &da);
                let mut dc = Tensor2::zeros(m, 1);
                for r in 0..m {
                    let dot: Scalar = g.row(r).iter().zip(val(a).row(r)).map(|(x, y)| x * y).sum();
                    dc.set(r, 0, dot);
                }
                accumulate(grads, c, &dc);
            }
            OpKind::RowSoftmax => {
                let y = val(op.out);
                let (m, _n) = y.shape();
                let mut dx = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..m {
                    let dot: Scalar = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, op.inputs[0], &dx);
            }
            OpKind::ColSoftmax => {
                let y = val(op.out);
                let (m, n) = y.shape();
                let mut dx = Tensor2::zeros(m, n);
                for c in 0..n {
                    let mut dot = 0.0;
                    for r in 0..m {
                        dot += g.get(r, c) * y.get(r, c);
                    }
                    for r in 0..m {
                        dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                accumulate(grads, op.inputs[0], &dx);
            }
            OpKind::Sigmoid => {
                let y = val(op.out);
                accumulate(
                    grads,
                    op.inputs[0],
                    &g.zip(y, |gv, yv| gv * yv * (1.0 - yv))?,
                );
            }
            OpKind::Gelu => {
                let x = val(op.inputs[0]);
                accumulate(grads, op.inputs[0], &g.zip(x, |gv, xv| gv * gelu_grad(xv))?);
            }
            OpKind::LayerNormRows { eps } => {
                let x = val(op.inputs[0]);
                let y = val(op.out);
                let (m, n) = x.shape();
                let nn = n as Scalar;
                let mut dx = Tensor2::zeros(m, n);
                for r in 0..m {
                    let mean = x.row(r).iter().sum::<Scalar>() / nn;
                    let var =
                        x.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / nn;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = g.row(r).iter().sum::<Scalar>() / nn;
                    let gy_mean: Scalar =
                        g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum::<Scalar>() / nn;
                    for c in 0..n {
                        dx.set(
                            r,
                            c,
                            inv * (g.get(r, c) - g_mean - y.get(r, c) * gy_mean),
                        );
                    }
                }
                accumulate(grads, op.inputs[0], &dx);
            }
            OpKind::ConcatCols => {
                let (a, b) = (op.inputs[0], op.inputs[1]);
                let na = val(a).cols();
                let (m, n) = g.shape();
                let mut da = Tensor2::zeros(m, na);
                let mut db = Tensor2::zeros(m, n - na);
                for r in 0..m {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..na]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[na..]);
                }
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
            OpKind::SliceCols { from, to } => {
                let a = op.inputs[0];
                let (m, n) = val(a).shape();
                let mut da = Tensor2::zeros(m, n);
                for r in 0..m {
                    da.row_mut(r)[*from..*to].copy_from_slice(g.row(r));
                }
                accumulate(grads, a, &da);
            }
            OpKind::RotatePairs => {
                let (a, theta) = (op.inputs[0], op.inputs[1]);
                let x = val(a);
                let th = val(theta);
                let (m, d) = x.shape();
                let mut da = Tensor2::zeros(m, d);
                let mut dth = Tensor2::zeros(m, d / 2);
                for r in 0..m {
                    for k in 0..d / 2 {
                        let (s, c) = th.get(r, k).sin_cos();
                        let (g0, g1) = (g.get(r, 2 * k), g.get(r, 2 * k + 1));
                        let (x0, x1) = (x.get(r, 2 * k), x.get(r, 2 * k + 1));
                        // dX = R(−θ)·g
                        da.set(r, 2 * k, g0 * c + g1 * s);
                        da.set(r, 2 * k + 1, -g0 * s + g1 * c);
                        // dθ = gᵀ·(dR/dθ)·x
                        dth.set(
                            r,
                            k,
                            g0 * (-x0 * s - x1 * c) + g1 * (x0 * c - x1 * s),
                        );
                    }
                }
                accumulate(grads, a, &da);
                accumulate(grads, theta, &dth);
            }
            OpKind::RowDot => {
                let (a, b) = (op.inputs[0], op.inputs[1]);
                let (m, n) = val(a).shape();
                let mut da = Tensor2::zeros(m, n);
                let mut db = Tensor2::zeros(m, n);
                for r in 0..m {
                    let gv = g.get(r, 0);
                    for c in 0..n {
                        da.set(r, c, gv * val(b).get(r, c));
                        db.set(r, c, gv * val(a).get(r, c));
                    }
                }
                accumulate(grads, a, &da);
                accumulate(grads, b, &db);
            }
            OpKind::RowSelect { take_first } => {
                let (m, n) = g.shape();
                let mut da = Tensor2::zeros(m, n);
                let mut db = Tensor2::zeros(m, n);
                for r in 0..m {
                    if take_first[r] {
                        da.row_mut(r).copy_from_slice(g.row(r));
                    } else {
                        db.row_mut(r).copy_from_slice(g.row(r));
                    }
                }
                accumulate(grads, op.inputs[0], &da);
                accumulate(grads, op.inputs[1], &db);
            }
            OpKind::SumAll => {
                let a = op.inputs[0];
                let (m, n) = val(a).shape();
                let gv = g.item();
                accumulate(grads, a, &Tensor2::zeros(m, n).map(|_| gv));
            }
            OpKind::MvCorrelate { pair, gates } => {
                let m_pairs = op.inputs.len() / 2;
                let alphas = &op.inputs[..m_pairs];
                let confs = &op.inputs[m_pairs..];
                let n_cols = val(alphas[*pair]).cols();
                // Pass-through part: ungated rows of pair's alpha.
                let mut gated = vec![false; val(alphas[*pair]).rows()];
                for gate in gates {
                    gated[gate.row] = true;
                }
                let mut d_alpha_self = g.clone();
                for (r, &is_gated) in gated.iter().enumerate() {
                    if is_gated {
                        for x in d_alpha_self.row_mut(r) {
                            *x = 0.0;
                        }
                    }
                }
                for gate in gates {
                    let u = gate.row;
                    let cu = val(confs[*pair]).get(u, 0);
                    let mut z = 0.0;
                    let mut blended = vec![0.0; n_cols];
                    for &(pj, vrow) in &gate.partners {
                        let cv = val(confs[pj]).get(vrow, 0);
                        z += cv;
                        for (acc, x) in blended.iter_mut().zip(val(alphas[pj]).row(vrow)) {
                            *acc += cv * x;
                        }
                    }
                    if z < 1e-9 {
                        // Forward passed this row through; so does backward.
                        for (o, gv) in d_alpha_self.row_mut(u).iter_mut().zip(g.row(u)) {
                            *o += gv;
                        }
                        continue;
                    }
                    for b in blended.iter_mut() {
                        *b /= z;
                    }
                    let g_row = g.row(u);
                    // ∂/∂α_u = c_u · g
                    for (o, gv) in d_alpha_self.row_mut(u).iter_mut().zip(g_row) {
                        *o += cu * gv;
                    }
                    // ∂/∂c_u = g·α_u − g·B
                    let alpha_u = val(alphas[*pair]).row(u);
                    let g_dot_alpha: Scalar =
                        g_row.iter().zip(alpha_u).map(|(a, b)| a * b).sum();
                    let g_dot_b: Scalar = g_row.iter().zip(&blended).map(|(a, b)| a * b).sum();
                    add_at(grads, confs[*pair], u, 0, g_dot_alpha - g_dot_b, val);
                    for &(pj, vrow) in &gate.partners {
                        let cv = val(confs[pj]).get(vrow, 0);
                        // ∂/∂α_v = (1−c_u)·(c_v/Z)·g
                        let w = (1.0 - cu) * cv / z;
                        add_row(grads, alphas[pj], vrow, g_row, w, val);
                        // ∂/∂c_v = (1−c_u)·g·(α_v − B)/Z
                        let alpha_v = val(alphas[pj]).row(vrow);
                        let mut dot = 0.0;
                        for ((gv, av), bv) in g_row.iter().zip(alpha_v).zip(&blended) {
                            dot += gv * (av - bv);
                        }
                        add_at(grads, confs[pj], vrow, 0, (1.0 - cu) * dot / z, val);
                    }
                }
                accumulate(grads, alphas[*pair], &d_alpha_self);
            }
            OpKind::CorrLoss {
                matches,
                unmatched_src,
                unmatched_tgt,
            } => {
                let gv = g.item();
                let (p, ss, st) = (op.inputs[0], op.inputs[1], op.inputs[2]);
                if !matches.is_empty() {
                    let w = gv / matches.len() as Scalar;
                    for &(u, x) in matches {
                        let pv = val(p).get(u, x);
                        if in_clamp_range(pv) {
                            add_at(grads, p, u, x, -w / pv, val);
                        }
                    }
                }
                if !unmatched_src.is_empty() {
                    let w = gv / (2.0 * unmatched_src.len() as Scalar);
                    for &u in unmatched_src {
                        let sv = 1.0 - val(ss).get(u, 0);
                        if in_clamp_range(sv) {
                            add_at(grads, ss, u, 0, w / sv, val);
                        }
                    }
                }
                if !unmatched_tgt.is_empty() {
                    let w = gv / (2.0 * unmatched_tgt.len() as Scalar);
                    for &x in unmatched_tgt {
                        let sv = 1.0 - val(st).get(x, 0);
                        if in_clamp_range(sv) {
                            add_at(grads, st, x, 0, w / sv, val);
                        }
                    }
                }
            }
            OpKind::BceSum { labels } => {
                let gv = g.item();
                let c = op.inputs[0];
                for (r, &y) in labels.iter().enumerate() {
                    let cv = val(c).get(r, 0);
                    let mut d = 0.0;
                    if in_clamp_range(cv) {
                        d -= y / cv;
                    }
                    if in_clamp_range(1.0 - cv) {
                        d += (1.0 - y) / (1.0 - cv);
                    }
                    add_at(grads, c, r, 0, gv * d, val);
                }
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: Scalar) -> Scalar {
    p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

fn in_clamp_range(p: Scalar) -> bool {
    (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p)
}

fn accumulate(grads: &mut [Option<Tensor2>], id: VarId, delta: &Tensor2) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += *d;
            }
        }
        None => grads[id.0] = Some(delta.clone()),
    }
}

fn add_at<'a>(
    grads: &mut [Option<Tensor2>],
    id: VarId,
    r: usize,
    c: usize,
    delta: Scalar,
    val: impl Fn(VarId) -> &'a Tensor2,
) {
    ensure_slot(grads, id, &val);
    let g = grads[id.0].as_mut().unwrap();
    g.set(r, c, g.get(r, c) + delta);
}

fn add_row<'a>(
    grads: &mut [Option<Tensor2>],
    id: VarId,
    row: usize,
    values: &[Scalar],
    weight: Scalar,
    val: impl Fn(VarId) -> &'a Tensor2,
) {
    ensure_slot(grads, id, &val);
    let g = grads[id.0].as_mut().unwrap();
    for (o, v) in g.row_mut(row).iter_mut().zip(values) {
        *o += weight * v;
    }
}

fn ensure_slot<'a>(
    grads: &mut [Option<Tensor2>],
    id: VarId,
    val: impl Fn(VarId) -> &'a Tensor2,
) {
    if grads[id.0].is_none() {
        let (r, c) = val(id).shape();
        grads[id.0] = Some(Tensor2::zeros(r, c));
    }
}
