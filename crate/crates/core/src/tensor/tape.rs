//! Reverse-mode autodiff over a closed set of operations.
//!
//! The tape is an append-only arena of nodes; node ids are already in
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Leaves are registered with
//! `requires_grad`; after `backward` their gradients are readable through
//! [`Tape::grad`].

use super::conv::{conv2d_backward, conv2d_forward, sep_depthwise_backward, sep_depthwise_forward, Conv2dCfg, PadMode};
use super::exact::exact_mean;
use super::{Shape, Tensor};
use crate::error::{LpsError, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, bias: Option<Var>, cfg: Conv2dCfg },
    SepFilter { x: Var, taps: Vec<f64>, gain: f64, pad_mode: PadMode },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Roll { x: Var, s1: i64, s2: i64 },
    MaxFilter2x2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool { x: Var },
    MeanChanSpatial { x: Var },
    MeanAll { x: Var },
    Linear { x: Var, w: Var, bias: Option<Var> },
    SoftmaxRows { x: Var },
    SoftmaxTempRows { x: Var, tau: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    PhaseExtract { x: Var, k: usize },
    Select4 { comps: [Var; 4], kstar: Vec<usize> },
    WeightedSum4 { comps: [Var; 4], weights: Var },
    PhasePlaceSelect { y: Var, kstar: Vec<usize> },
    PhasePlaceWeighted { y: Var, weights: Var },
    ConcatBatch { parts: Vec<Var> },
    ColsFromBatch { x: Var, groups: usize },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clear all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, cfg: Conv2dCfg) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &cfg,
        )?;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.any_requires(&deps);
        Ok(self.push(out, rg, Op::Conv2d { x, w, bias, cfg }))
    }

    /// Depthwise separable low-pass stage (same taps along both axes).
    pub fn sep_filter(&mut self, x: Var, taps: &[f64], gain: f64, pad_mode: PadMode) -> Result<Var> {
        let out = sep_depthwise_forward(self.value(x), taps, gain, pad_mode)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::SepFilter { x, taps: taps.to_vec(), gain, pad_mode }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(self.value(x).shape().clone(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(LpsError::shape("add: shape mismatch".into()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().clone(), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(LpsError::shape("mul: shape mismatch".into()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().clone(), data)?;
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.value(x).shape().clone(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Scale { x, factor })
    }

    pub fn roll(&mut self, x: Var, s1: i64, s2: i64) -> Var {
        let out = self.value(x).roll(s1, s2);
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, rg, Op::Roll { x, s1, s2 })
    }

    /// 2x2 max filter with circular wrap, stride 1, extent preserving.
    pub fn max_filter_2x2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).shape().as_bchw()?;
        if h < 2 || w < 2 {
            return Err(LpsError::invalid("max_filter_2x2: extents must be >= 2".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * h * w];
        let mut argmax = vec![0u32; b * c * h * w];
        for p in 0..b * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((i + di) % h) * w + (j + dj) % w;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[p * h * w + i * w + j] = best;
                    argmax[p * h * w + i * w + j] = (p * h * w + best_idx) as u32;
                }
            }
        }
        let shape = self.value(x).shape().clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MaxFilter2x2 { x, argmax }))
    }

    /// Spatial mean per (batch, channel): [B,C,H,W] -> [B,C].
    /// Uses the exact accumulator, so shifted inputs pool to identical bits.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).shape().as_bchw()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for p in 0..b * c {
            out[p] = exact_mean(&xd[p * h * w..(p + 1) * h * w]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::from_vec(&[b, c], out)?, rg, Op::GlobalAvgPool { x }))
    }

    /// Mean over channels and space per batch element: [B,C,H,W] -> [B].
    /// Exact accumulation keeps the result invariant to spatial permutation.
    pub fn mean_chan_spatial(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).shape().as_bchw()?;
        let xd = self.value(x).data();
        let group = c * h * w;
        let mut out = vec![0.0; b];
        for bi in 0..b {
            out[bi] = exact_mean(&xd[bi * group..(bi + 1) * group]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::from_vec(&[b], out)?, rg, Op::MeanChanSpatial { x }))
    }

    /// Mean of every element; returns a scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = exact_mean(self.value(x).data());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(m), rg, Op::MeanAll { x })
    }

    /// Fully connected map: x [B,F], w [K,F], bias [K] -> [B,K].
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (b, f) = self.value(x).shape().as_2d()?;
        let (k, wf) = self.value(w).shape().as_2d()?;
        if wf != f {
            return Err(LpsError::shape(format!("linear: {f} features vs weight expecting {wf}")));
        }
        if let Some(bias) = bias {
            if self.value(bias).dims() != [k] {
                return Err(LpsError::shape("linear: bias length mismatch".into()));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; b * k];
        for bi in 0..b {
            for ki in 0..k {
                let mut acc = 0.0;
                for fi in 0..f {
                    acc = xd[bi * f + fi].mul_add(wd[ki * f + fi], acc);
                }
                out[bi * k + ki] = acc;
            }
        }
        if let Some(bias) = bias {
            let bd = self.value(bias).data().to_vec();
            for bi in 0..b {
                for ki in 0..k {
                    out[bi * k + ki] += bd[ki];
                }
            }
        }
        let deps: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        let rg = self.any_requires(&deps);
        Ok(self.push(Tensor::from_vec(&[b, k], out)?, rg, Op::Linear { x, w, bias }))
    }

    /// Row-wise softmax; accepts [K] or [B,K].
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(x))?;
        let z = softmax_rows(self.value(x).data(), rows, cols, None, 1.0);
        let out = Tensor::new(self.value(x).shape().clone(), z)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::SoftmaxRows { x }))
    }

    /// Row-wise softmax((x + offset) / tau). Offsets are fixed values
    /// (Gumbel noise), not differentiated through.
    pub fn softmax_temp(&mut self, x: Var, offsets: Option<&Tensor>, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(LpsError::invalid(format!("softmax temperature must be > 0, got {tau}")));
        }
        let (rows, cols) = rows_cols(self.value(x))?;
        if let Some(o) = offsets {
            if o.shape() != self.value(x).shape() {
                return Err(LpsError::shape("softmax_temp: offset shape mismatch".into()));
            }
        }
        let z = softmax_rows(self.value(x).data(), rows, cols, offsets.map(|o| o.data()), tau);
        let out = Tensor::new(self.value(x).shape().clone(), z)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, rg, Op::SoftmaxTempRows { x, tau }))
    }

    /// Mean cross-entropy of logits [B,K] (or [K]) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(logits))?;
        if labels.len() != rows {
            return Err(LpsError::shape(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(LpsError::invalid(format!("cross_entropy: label {bad} out of range (K={cols})")));
        }
        let xd = self.value(logits).data();
        let probs = softmax_rows(xd, rows, cols, None, 1.0);
        let mut total = 0.0;
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut lse = 0.0;
            for &v in row {
                lse += (v - m).exp();
            }
            total += m + lse.ln() - row[labels[r]];
        }
        let loss = total / rows as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Polyphase component k (k = 2*i + j over phase offsets (i,j) in {0,1}^2).
    pub fn phase_extract(&mut self, x: Var, k: usize) -> Result<Var> {
        if k >= 4 {
            return Err(LpsError::invalid(format!("phase index {k} out of range")));
        }
        let (b, c, h, w) = self.value(x).shape().as_bchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(LpsError::invalid(format!(
                "polyphase decomposition requires even extents, got {h}x{w}"
            )));
        }
        let (pi, pj) = (k / 2, k % 2);
        let (m1, m2) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * m1 * m2];
        for p in 0..b * c {
            for i in 0..m1 {
                for j in 0..m2 {
                    out[(p * m1 + i) * m2 + j] = xd[(p * h + 2 * i + pi) * w + 2 * j + pj];
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::from_vec(&[b, c, m1, m2], out)?, rg, Op::PhaseExtract { x, k }))
    }

    /// Per-batch-element component selection: out[b] = comps[kstar[b]][b].
    pub fn select4(&mut self, comps: [Var; 4], kstar: &[usize]) -> Result<Var> {
        let (b, c, m1, m2) = self.value(comps[0]).shape().as_bchw()?;
        for k in 1..4 {
            if self.value(comps[k]).shape() != self.value(comps[0]).shape() {
                return Err(LpsError::shape("select4: component shape mismatch".into()));
            }
        }
        if kstar.len() != b {
            return Err(LpsError::shape("select4: one selection index per batch element".into()));
        }
        if let Some(&bad) = kstar.iter().find(|&&k| k >= 4) {
            return Err(LpsError::invalid(format!("select4: index {bad} out of range")));
        }
        let group = c * m1 * m2;
        let mut out = vec![0.0; b * group];
        for bi in 0..b {
            let src = self.value(comps[kstar[bi]]).data();
            out[bi * group..(bi + 1) * group].copy_from_slice(&src[bi * group..(bi + 1) * group]);
        }
        let rg = self.any_requires(&comps);
        Ok(self.push(
            Tensor::from_vec(&[b, c, m1, m2], out)?,
            rg,
            Op::Select4 { comps, kstar: kstar.to_vec() },
        ))
    }

    /// Convex combination of components with per-batch weights [B,4].
    pub fn weighted_sum4(&mut self, comps: [Var; 4], weights: Var) -> Result<Var> {
        let (b, c, m1, m2) = self.value(comps[0]).shape().as_bchw()?;
        for k in 1..4 {
            if self.value(comps[k]).shape() != self.value(comps[0]).shape() {
                return Err(LpsError::shape("weighted_sum4: component shape mismatch".into()));
            }
        }
        if self.value(weights).dims() != [b, 4] {
            return Err(LpsError::shape(format!(
                "weighted_sum4: weights must be [{b},4], got {:?}",
                self.value(weights).dims()
            )));
        }
        let group = c * m1 * m2;
        let wd = self.value(weights).data().to_vec();
        let mut out = vec![0.0; b * group];
        for k in 0..4 {
            let cd = self.value(comps[k]).data();
            for bi in 0..b {
                let wv = wd[bi * 4 + k];
                let dst = &mut out[bi * group..(bi + 1) * group];
                let src = &cd[bi * group..(bi + 1) * group];
                for t in 0..group {
                    dst[t] = src[t].mul_add(wv, dst[t]);
                }
            }
        }
        let mut deps = comps.to_vec();
        deps.push(weights);
        let rg = self.any_requires(&deps);
        Ok(self.push(
            Tensor::from_vec(&[b, c, m1, m2], out)?,
            rg,
            Op::WeightedSum4 { comps, weights },
        ))
    }

    /// Zero-stuffed upsampling: y lands at phase kstar[b], zeros elsewhere.
    pub fn phase_place_select(&mut self, y: Var, kstar: &[usize]) -> Result<Var> {
        let (b, c, m1, m2) = self.value(y).shape().as_bchw()?;
        if kstar.len() != b {
            return Err(LpsError::shape("phase_place_select: one index per batch element".into()));
        }
        if let Some(&bad) = kstar.iter().find(|&&k| k >= 4) {
            return Err(LpsError::invalid(format!("phase_place_select: index {bad} out of range")));
        }
        let (h, w) = (2 * m1, 2 * m2);
        let yd = self.value(y).data();
        let mut out = vec![0.0; b * c * h * w];
        for bi in 0..b {
            let (pi, pj) = (kstar[bi] / 2, kstar[bi] % 2);
            for ci in 0..c {
                let p = bi * c + ci;
                for i in 0..m1 {
                    for j in 0..m2 {
                        out[(p * h + 2 * i + pi) * w + 2 * j + pj] = yd[(p * m1 + i) * m2 + j];
                    }
                }
            }
        }
        let rg = self.nodes[y.0].requires_grad;
        Ok(self.push(
            Tensor::from_vec(&[b, c, h, w], out)?,
            rg,
            Op::PhasePlaceSelect { y, kstar: kstar.to_vec() },
        ))
    }

    /// Soft unpooling: y is placed at all four phases, each scaled by its
    /// weight, and the placements are summed.
    pub fn phase_place_weighted(&mut self, y: Var, weights: Var) -> Result<Var> {
        let (b, c, m1, m2) = self.value(y).shape().as_bchw()?;
        if self.value(weights).dims() != [b, 4] {
            return Err(LpsError::shape("phase_place_weighted: weights must be [B,4]".into()));
        }
        let (h, w) = (2 * m1, 2 * m2);
        let yd = self.value(y).data();
        let wd = self.value(weights).data().to_vec();
        let mut out = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for k in 0..4 {
                let (pi, pj) = (k / 2, k % 2);
                let wv = wd[bi * 4 + k];
                for ci in 0..c {
                    let p = bi * c + ci;
                    for i in 0..m1 {
                        for j in 0..m2 {
                            out[(p * h + 2 * i + pi) * w + 2 * j + pj] = yd[(p * m1 + i) * m2 + j] * wv;
                        }
                    }
                }
            }
        }
        let rg = self.any_requires(&[y, weights]);
        Ok(self.push(
            Tensor::from_vec(&[b, c, h, w], out)?,
            rg,
            Op::PhasePlaceWeighted { y, weights },
        ))
    }

    /// Stack along the batch dimension: parts of [B,...] become [sum(B),...].
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LpsError::invalid("concat_batch: no parts".into()));
        }
        let first = self.value(parts[0]).shape().as_bchw()?;
        let mut total_b = 0;
        for &p in parts {
            let (b, c, h, w) = self.value(p).shape().as_bchw()?;
            if (c, h, w) != (first.1, first.2, first.3) {
                return Err(LpsError::shape("concat_batch: trailing dims mismatch".into()));
            }
            total_b += b;
        }
        let mut out = Vec::with_capacity(total_b * first.1 * first.2 * first.3);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_requires(parts);
        Ok(self.push(
            Tensor::from_vec(&[total_b, first.1, first.2, first.3], out)?,
            rg,
            Op::ConcatBatch { parts: parts.to_vec() },
        ))
    }

    /// Regroup a [G*B] vector (G equal batch slabs) into columns: out[b,g] = x[g*B+b].
    pub fn cols_from_batch(&mut self, x: Var, groups: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if self.value(x).rank() != 1 || groups == 0 || n % groups != 0 {
            return Err(LpsError::shape(format!(
                "cols_from_batch: cannot split {n} elements into {groups} groups"
            )));
        }
        let b = n / groups;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n];
        for g in 0..groups {
            for bi in 0..b {
                out[bi * groups + g] = xd[g * b + bi];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::from_vec(&[b, groups], out)?, rg, Op::ColsFromBatch { x, groups }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; populates leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(LpsError::Autodiff(
                "backward already ran on this tape; call reset_grads() or build a fresh tape".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(LpsError::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.dims()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::new(
            self.nodes[loss.0].value.shape().clone(),
            vec![1.0],
        )?);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gd, dd) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gd += dd;
                }
            }
            None => self.nodes[v.0].grad = Some(delta.clone()),
        }
    }

    fn propagate(&mut self, id: usize) -> Result<()> {
        let dy = match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => return Ok(()),
        };
        // Ops are matched by moving the needed metadata out up front to keep
        // the borrow checker out of the arithmetic.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, bias, cfg } => {
                let want_dx = self.nodes[x.0].requires_grad;
                let want_dw = self.nodes[w.0].requires_grad;
                let (dx, dw, db) = conv2d_backward(self.value(x), self.value(w), &cfg, &dy, want_dx, want_dw)?;
                if let Some(dx) = dx {
                    self.accumulate(x, &dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(w, &dw);
                }
                if let Some(bias) = bias {
                    self.accumulate(bias, &db);
                }
            }
            Op::SepFilter { x, taps, gain, pad_mode } => {
                let (x, taps, gain, pad_mode) = (*x, taps.clone(), *gain, *pad_mode);
                let dx = sep_depthwise_backward(&dy, &taps, gain, pad_mode)?;
                self.accumulate(x, &dx);
            }
            &Op::Relu { x } => {
                let mask: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                let dx = Tensor::new(self.value(x).shape().clone(), mask)?;
                self.accumulate(x, &dx);
            }
            &Op::Add { a, b } => {
                self.accumulate(a, &dy);
                self.accumulate(b, &dy);
            }
            &Op::Mul { a, b } => {
                let da = {
                    let bd = self.value(b).data();
                    Tensor::new(dy.shape().clone(), dy.data().iter().zip(bd).map(|(d, v)| d * v).collect())?
                };
                let db = {
                    let ad = self.value(a).data();
                    Tensor::new(dy.shape().clone(), dy.data().iter().zip(ad).map(|(d, v)| d * v).collect())?
                };
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Scale { x, factor } => {
                let dx = Tensor::new(dy.shape().clone(), dy.data().iter().map(|d| d * factor).collect())?;
                self.accumulate(x, &dx);
            }
            &Op::Roll { x, s1, s2 } => {
                let dx = dy.roll(-s1, -s2);
                self.accumulate(x, &dx);
            }
            Op::MaxFilter2x2 { x, argmax } => {
                let x = *x;
                let mut dx = Tensor::zeros_like(self.value(x));
                for (t, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src as usize] += dy.data()[t];
                }
                self.accumulate(x, &dx);
            }
            &Op::GlobalAvgPool { x } => {
                let (b, c, h, w) = self.value(x).shape().as_bchw()?;
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Tensor::zeros_like(self.value(x));
                for p in 0..b * c {
                    let g = dy.data()[p] * scale;
                    for t in 0..h * w {
                        dx.data_mut()[p * h * w + t] = g;
                    }
                }
                self.accumulate(x, &dx);
            }
            &Op::MeanChanSpatial { x } => {
                let (b, c, h, w) = self.value(x).shape().as_bchw()?;
                let group = c * h * w;
                let scale = 1.0 / group as f64;
                let mut dx = Tensor::zeros_like(self.value(x));
                for bi in 0..b {
                    let g = dy.data()[bi] * scale;
                    for t in 0..group {
                        dx.data_mut()[bi * group + t] = g;
                    }
                }
                self.accumulate(x, &dx);
            }
            &Op::MeanAll { x } => {
                let n = self.value(x).numel();
                let g = dy.data()[0] / n as f64;
                let dx = Tensor::new(self.value(x).shape().clone(), vec![g; n])?;
                self.accumulate(x, &dx);
            }
            &Op::Linear { x, w, bias } => {
                let (b, f) = self.value(x).shape().as_2d()?;
                let (k, _) = self.value(w).shape().as_2d()?;
                if self.nodes[x.0].requires_grad {
                    let wd = self.value(w).data();
                    let mut dx = vec![0.0; b * f];
                    for bi in 0..b {
                        for ki in 0..k {
                            let g = dy.data()[bi * k + ki];
                            for fi in 0..f {
                                dx[bi * f + fi] = g.mul_add(wd[ki * f + fi], dx[bi * f + fi]);
                            }
                        }
                    }
                    self.accumulate(x, &Tensor::from_vec(&[b, f], dx)?);
                }
                if self.nodes[w.0].requires_grad {
                    let xd = self.value(x).data();
                    let mut dw = vec![0.0; k * f];
                    for bi in 0..b {
                        for ki in 0..k {
                            let g = dy.data()[bi * k + ki];
                            for fi in 0..f {
                                dw[ki * f + fi] = g.mul_add(xd[bi * f + fi], dw[ki * f + fi]);
                            }
                        }
                    }
                    self.accumulate(w, &Tensor::from_vec(&[k, f], dw)?);
                }
                if let Some(bias) = bias {
                    let mut db = vec![0.0; k];
                    for bi in 0..b {
                        for ki in 0..k {
                            db[ki] += dy.data()[bi * k + ki];
                        }
                    }
                    self.accumulate(bias, &Tensor::from_vec(&[k], db)?);
                }
            }
            &Op::SoftmaxRows { x } => {
                let dx = softmax_backward(self.value(Var(id)), &dy, 1.0)?;
                self.accumulate(x, &dx);
            }
            &Op::SoftmaxTempRows { x, tau } => {
                let dx = softmax_backward(self.value(Var(id)), &dy, tau)?;
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let (rows, cols) = rows_cols(self.value(logits))?;
                let g = dy.data()[0] / rows as f64;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * cols + l] -= 1.0;
                }
                for v in dx.iter_mut() {
                    *v *= g;
                }
                let dx = Tensor::new(self.value(logits).shape().clone(), dx)?;
                self.accumulate(logits, &dx);
            }
            &Op::PhaseExtract { x, k } => {
                let (b, c, h, w) = self.value(x).shape().as_bchw()?;
                let (pi, pj) = (k / 2, k % 2);
                let (m1, m2) = (h / 2, w / 2);
                let mut dx = Tensor::zeros_like(self.value(x));
                for p in 0..b * c {
                    for i in 0..m1 {
                        for j in 0..m2 {
                            dx.data_mut()[(p * h + 2 * i + pi) * w + 2 * j + pj] = dy.data()[(p * m1 + i) * m2 + j];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Select4 { comps, kstar } => {
                let comps = *comps;
                let kstar = kstar.clone();
                let (b, c, m1, m2) = self.value(comps[0]).shape().as_bchw()?;
                let group = c * m1 * m2;
                for k in 0..4 {
                    if !self.nodes[comps[k].0].requires_grad {
                        continue;
                    }
                    let mut dk = Tensor::zeros_like(self.value(comps[k]));
                    let mut any = false;
                    for bi in 0..b {
                        if kstar[bi] == k {
                            dk.data_mut()[bi * group..(bi + 1) * group]
                                .copy_from_slice(&dy.data()[bi * group..(bi + 1) * group]);
                            any = true;
                        }
                    }
                    if any {
                        self.accumulate(comps[k], &dk);
                    }
                }
            }
            &Op::WeightedSum4 { comps, weights } => {
                let (b, c, m1, m2) = self.value(comps[0]).shape().as_bchw()?;
                let group = c * m1 * m2;
                let wd = self.value(weights).data().to_vec();
                for k in 0..4 {
                    if self.nodes[comps[k].0].requires_grad {
                        let mut dk = vec![0.0; b * group];
                        for bi in 0..b {
                            let wv = wd[bi * 4 + k];
                            for t in 0..group {
                                dk[bi * group + t] = dy.data()[bi * group + t] * wv;
                            }
                        }
                        self.accumulate(comps[k], &Tensor::from_vec(&[b, c, m1, m2], dk)?);
                    }
                }
                if self.nodes[weights.0].requires_grad {
                    let mut dwt = vec![0.0; b * 4];
                    for k in 0..4 {
                        let cd = self.value(comps[k]).data();
                        for bi in 0..b {
                            let mut acc = 0.0;
                            for t in 0..group {
                                acc = dy.data()[bi * group + t].mul_add(cd[bi * group + t], acc);
                            }
                            dwt[bi * 4 + k] = acc;
                        }
                    }
                    self.accumulate(weights, &Tensor::from_vec(&[b, 4], dwt)?);
                }
            }
            Op::PhasePlaceSelect { y, kstar } => {
                let y = *y;
                let kstar = kstar.clone();
                let (b, c, m1, m2) = self.value(y).shape().as_bchw()?;
                let (h, w) = (2 * m1, 2 * m2);
                let mut dgrad = Tensor::zeros_like(self.value(y));
                for bi in 0..b {
                    let (pi, pj) = (kstar[bi] / 2, kstar[bi] % 2);
                    for ci in 0..c {
                        let p = bi * c + ci;
                        for i in 0..m1 {
                            for j in 0..m2 {
                                dgrad.data_mut()[(p * m1 + i) * m2 + j] =
                                    dy.data()[(p * h + 2 * i + pi) * w + 2 * j + pj];
                            }
                        }
                    }
                }
                self.accumulate(y, &dgrad);
            }
            &Op::PhasePlaceWeighted { y, weights } => {
                let (b, c, m1, m2) = self.value(y).shape().as_bchw()?;
                let (h, w) = (2 * m1, 2 * m2);
                let wd = self.value(weights).data().to_vec();
                if self.nodes[y.0].requires_grad {
                    let mut dgrad = vec![0.0; b * c * m1 * m2];
                    for bi in 0..b {
                        for k in 0..4 {
                            let (pi, pj) = (k / 2, k % 2);
                            let wv = wd[bi * 4 + k];
                            for ci in 0..c {
                                let p = bi * c + ci;
                                for i in 0..m1 {
                                    for j in 0..m2 {
                                        dgrad[(p * m1 + i) * m2 + j] = dy.data()
                                            [(p * h + 2 * i + pi) * w + 2 * j + pj]
                                            .mul_add(wv, dgrad[(p * m1 + i) * m2 + j]);
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(y, &Tensor::from_vec(&[b, c, m1, m2], dgrad)?);
                }
                if self.nodes[weights.0].requires_grad {
                    let yd = self.value(y).data();
                    let mut dwt = vec![0.0; b * 4];
                    for bi in 0..b {
                        for k in 0..4 {
                            let (pi, pj) = (k / 2, k % 2);
                            let mut acc = 0.0;
                            for ci in 0..c {
                                let p = bi * c + ci;
                                for i in 0..m1 {
                                    for j in 0..m2 {
                                        acc = dy.data()[(p * h + 2 * i + pi) * w + 2 * j + pj]
                                            .mul_add(yd[(p * m1 + i) * m2 + j], acc);
                                    }
                                }
                            }
                            dwt[bi * 4 + k] = acc;
                        }
                    }
                    self.accumulate(weights, &Tensor::from_vec(&[b, 4], dwt)?);
                }
            }
            Op::ConcatBatch { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    if self.nodes[p.0].requires_grad {
                        let dpart = Tensor::new(
                            self.value(p).shape().clone(),
                            dy.data()[offset..offset + n].to_vec(),
                        )?;
                        self.accumulate(p, &dpart);
                    }
                    offset += n;
                }
            }
            &Op::ColsFromBatch { x, groups } => {
                let n = self.value(x).numel();
                let b = n / groups;
                let mut dx = vec![0.0; n];
                for g in 0..groups {
                    for bi in 0..b {
                        dx[g * b + bi] = dy.data()[bi * groups + g];
                    }
                }
                self.accumulate(x, &Tensor::from_vec(&[n], dx)?);
            }
        }
        Ok(())
    }
}

fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    match *t.dims() {
        [k] => Ok((1, k)),
        [b, k] => Ok((b, k)),
        _ => Err(LpsError::shape(format!("expected [K] or [B,K], got {:?}", t.dims()))),
    }
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize, offsets: Option<&[f64]>, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut shifted = vec![0.0; cols];
        for c in 0..cols {
            let o = offsets.map(|o| o[r * cols + c]).unwrap_or(0.0);
            shifted[c] = (row[c] + o) / tau;
        }
        let m = shifted.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for c in 0..cols {
            shifted[c] = (shifted[c] - m).exp();
            denom += shifted[c];
        }
        for c in 0..cols {
            out[r * cols + c] = shifted[c] / denom;
        }
    }
    out
}

/// dx = (z ⊙ (dy − <dy, z>)) / tau, row-wise.
fn softmax_backward(z: &Tensor, dy: &Tensor, tau: f64) -> Result<Tensor> {
    let (rows, cols) = rows_cols(z)?;
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let zr = &z.data()[r * cols..(r + 1) * cols];
        let dr = &dy.data()[r * cols..(r + 1) * cols];
        let mut dot = 0.0;
        for c in 0..cols {
            dot += zr[c] * dr[c];
        }
        for c in 0..cols {
            dx[r * cols + c] = zr[c] * (dr[c] - dot) / tau;
        }
    }
    Tensor::new(z.shape().clone(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn mean_all_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let loss = tape.mean_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn half_square_sum_gradient_is_x() {
        let xt = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean_all(sq);
        let loss = tape.scale(m, xt.numel() as f64 / 2.0); // sum(x*x)/2
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.max_abs_diff(&xt).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[4], vec![0.0; 4]).unwrap(), false);
        let z = tape.softmax(x).unwrap();
        assert_eq!(tape.value(z).data(), &[0.25; 4]);
        let s: f64 = tape.value(z).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap(), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn global_avg_pool_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::from_dims(&[2, 3, 4, 4]).unwrap(), 2.5), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).dims(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn max_filter_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let y = tape.max_filter_2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0; 4]);

        let c = tape.leaf(Tensor::full(Shape::from_dims(&[1, 2, 3, 3]).unwrap(), 7.0), false);
        let yc = tape.max_filter_2x2(c).unwrap();
        assert!(tape.value(yc).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn max_filter_commutes_with_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xt = rand_tensor(&[2, 2, 6, 4], &mut rng);
        for (s1, s2) in [(1, 0), (3, 2), (5, 3)] {
            let mut ta = Tape::new();
            let a = ta.leaf(xt.roll(s1, s2), false);
            let ya = ta.max_filter_2x2(a).unwrap();
            let mut tb = Tape::new();
            let b = tb.leaf(xt.clone(), false);
            let yb = tb.max_filter_2x2(b).unwrap();
            assert_eq!(ta.value(ya).data(), tb.value(yb).roll(s1, s2).data());
        }
    }

    #[test]
    fn cross_entropy_nonnegative_and_checks_labels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 1.0, 0.0, -1.0]).unwrap(), false);
        let l = tape.cross_entropy(x, &[2, 0]).unwrap();
        assert!(tape.value(l).item().unwrap() >= 0.0);
        assert!(tape.cross_entropy(x, &[3, 0]).is_err());
        assert!(tape.cross_entropy(x, &[0]).is_err());
    }

    #[test]
    fn backward_requires_scalar_and_runs_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err());
        let loss = tape.mean_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn gradients_match_finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // conv2d circular, via mean loss
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let x0 = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let wc = w.clone();
        let err = grad_check(
            move |tape, x| {
                let wv = tape.leaf(wc.clone(), false);
                let y = tape.conv2d(x, wv, None, Conv2dCfg::same_circular())?;
                Ok(tape.mean_all(y))
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "conv2d grad err {err}");

        // roll + mul + add chain
        let y0 = rand_tensor(&[1, 1, 4, 4], &mut rng);
        let err = grad_check(
            move |tape, x| {
                let r = tape.roll(x, 1, 3);
                let m = tape.mul(r, r)?;
                let a = tape.add(m, r)?;
                Ok(tape.mean_all(a))
            },
            &y0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "roll/mul/add grad err {err}");

        // softmax_temp
        let z0 = rand_tensor(&[3, 4], &mut rng);
        let err = grad_check(
            move |tape, x| {
                let z = tape.softmax_temp(x, None, 0.7)?;
                let sq = tape.mul(z, z)?;
                Ok(tape.mean_all(sq))
            },
            &z0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "softmax_temp grad err {err}");

        // phase ops
        let p0 = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let err = grad_check(
            move |tape, x| {
                let c1 = tape.phase_extract(x, 1)?;
                let u = tape.phase_place_select(c1, &[2, 0])?;
                Ok(tape.mean_all(u))
            },
            &p0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "phase ops grad err {err}");
    }

    #[test]
    fn weighted_sum4_matches_manual_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = rand_tensor(&[2, 1, 4, 4], &mut rng);
        let wt = Tensor::from_vec(&[2, 4], vec![0.4, 0.3, 0.2, 0.1, 0.25, 0.25, 0.25, 0.25]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let comps = [
            tape.phase_extract(x, 0).unwrap(),
            tape.phase_extract(x, 1).unwrap(),
            tape.phase_extract(x, 2).unwrap(),
            tape.phase_extract(x, 3).unwrap(),
        ];
        let w = tape.leaf(wt.clone(), false);
        let y = tape.weighted_sum4(comps, w).unwrap();
        for bi in 0..2 {
            for t in 0..4 {
                let mut expect = 0.0;
                for k in 0..4 {
                    expect += wt.data()[bi * 4 + k] * tape.value(comps[k]).data()[bi * 4 + t];
                }
                let got = tape.value(y).data()[bi * 4 + t];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let xt = rand_tensor(&[2, 2, 4, 4], &mut rng);
            let wt = rand_tensor(&[2, 2, 3, 3], &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(xt, true);
            let w = tape.leaf(wt, true);
            let y = tape.conv2d(x, w, None, Conv2dCfg::same_circular()).unwrap();
            let r = tape.relu(y);
            let loss = tape.mean_all(r);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().unwrap().to_bits(),
                tape.grad(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
