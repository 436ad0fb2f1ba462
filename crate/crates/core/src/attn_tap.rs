//! Capture and substitution of attention internals.
//!
//! A [`TapPlan`] says which layers to read from and which self-attention
//! queries to replace. Backends open one [`TapSession`] per forward pass and
//! route every attention layer through it; the session records what the plan
//! asks for and hands back the query each self-attention layer should use.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};

use ndarray::{s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MftfError, Result};
use crate::model::{AttentionKind, AttentionRecord, BackendInfo, Branch, CrossMap, QueryTensor};

#[derive(Clone, Debug, Default)]
pub struct TapPlan {
    /// Denoising index stamped on every record.
    pub step: usize,
    /// Cross-attention layers whose (conditional) maps are captured.
    pub capture_cross: BTreeSet<usize>,
    /// Self-attention layers whose queries are captured, per branch.
    pub capture_self_q: BTreeSet<usize>,
    /// Replacement queries, applied before scaling.
    pub inject_q: BTreeMap<(usize, Branch), QueryTensor>,
    /// Record a checksum of every attention layer's output.
    pub probe_activations: bool,
}

impl TapPlan {
    pub fn at_step(step: usize) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn capture_cross(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.capture_cross.extend(layers);
        self
    }

    pub fn capture_self(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.capture_self_q.extend(layers);
        self
    }

    pub fn inject(mut self, layer: usize, branch: Branch, q: QueryTensor) -> Self {
        self.inject_q.insert((layer, branch), q);
        self
    }

    pub fn with_probe(mut self) -> Self {
        self.probe_activations = true;
        self
    }

    pub fn is_passive(&self) -> bool {
        self.inject_q.is_empty()
    }

    /// Check every referenced layer and replacement tensor against the backend.
    pub fn validate(&self, info: &BackendInfo) -> Result<()> {
        for &l in &self.capture_cross {
            expect_kind(info, l, AttentionKind::Cross)?;
        }
        for &l in &self.capture_self_q {
            expect_kind(info, l, AttentionKind::SelfAttention)?;
        }
        for (&(l, branch), q) in &self.inject_q {
            let layer = expect_kind(info, l, AttentionKind::SelfAttention)?;
            let want = [layer.heads, layer.grid.cells(), layer.head_dim];
            if q.shape() != want {
                return Err(MftfError::shape(format!(
                    "injected query for layer {l} ({branch:?}) has shape {:?}, layer expects {want:?}",
                    q.shape()
                )));
            }
            if q.iter().any(|v| !v.is_finite()) {
                return Err(MftfError::config(format!(
                    "injected query for layer {l} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

fn expect_kind(
    info: &BackendInfo,
    layer: usize,
    kind: AttentionKind,
) -> Result<&crate::model::LayerInfo> {
    let l = info.layer(layer)?;
    if l.kind != kind {
        return Err(MftfError::config(format!(
            "layer {layer} is a {} attention layer, plan expects {}",
            l.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(l)
}

/// Checksum of one layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationChecksum {
    pub layer: usize,
    pub branch: Branch,
    pub checksum: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TapOutput {
    pub records: Vec<AttentionRecord>,
    pub checksums: Vec<ActivationChecksum>,
    /// Layers where an injected query replaced the computed one.
    pub injected: Vec<(usize, Branch)>,
}

impl TapOutput {
    pub fn extend(&mut self, other: TapOutput) {
        self.records.extend(other.records);
        self.checksums.extend(other.checksums);
        self.injected.extend(other.injected);
    }
}

/// Per-forward-pass capture buffer.
pub struct TapSession<'a> {
    plan: &'a TapPlan,
    branch: Branch,
    out: TapOutput,
}

impl<'a> TapSession<'a> {
    pub fn new(plan: &'a TapPlan, branch: Branch) -> Self {
        Self {
            plan,
            branch,
            out: TapOutput::default(),
        }
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Record the computed query of a self-attention layer if planned, and
    /// return the query the layer must actually use.
    pub fn self_query(&mut self, layer: usize, q: QueryTensor) -> QueryTensor {
        if self.plan.capture_self_q.contains(&layer) {
            self.out.records.push(AttentionRecord::self_query(
                self.plan.step,
                layer,
                self.branch,
                q.clone(),
            ));
        }
        match self.plan.inject_q.get(&(layer, self.branch)) {
            Some(repl) => {
                self.out.injected.push((layer, self.branch));
                repl.clone()
            }
            None => q,
        }
    }

    /// Only conditional-branch maps are kept: the unconditional branch attends
    /// to the empty prompt and carries no object tokens.
    pub fn wants_cross(&self, layer: usize) -> bool {
        self.branch == Branch::Cond && self.plan.capture_cross.contains(&layer)
    }

    pub fn cross_map(&mut self, layer: usize, probs: &CrossMap) {
        if self.wants_cross(layer) {
            self.out.records.push(AttentionRecord::cross(
                self.plan.step,
                layer,
                self.branch,
                probs.clone(),
            ));
        }
    }

    pub fn probing(&self) -> bool {
        self.plan.probe_activations
    }

    pub fn activation<'b>(&mut self, layer: usize, values: impl IntoIterator<Item = &'b f32>) {
        if self.plan.probe_activations {
            self.out.checksums.push(ActivationChecksum {
                layer,
                branch: self.branch,
                checksum: checksum(values),
            });
        }
    }

    pub fn finish(self) -> TapOutput {
        self.out
    }
}

/// Order-sensitive hash of the exact bit patterns.
pub fn checksum<'a>(values: impl IntoIterator<Item = &'a f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Multi-head `softmax(q kᵀ / √d) v`.
///
/// Shapes: `q` is `(heads, n, d)`, `k` is `(heads, s, d)`, `v` is
/// `(heads, s, dv)`. Returns the attended values `(heads, n, dv)` and the
/// attention probabilities `(heads, n, s)`.
pub fn attention(
    q: ArrayView3<'_, f32>,
    k: ArrayView3<'_, f32>,
    v: ArrayView3<'_, f32>,
) -> (Array3<f32>, Array3<f32>) {
    let (heads, n, d) = q.dim();
    let s_len = k.dim().1;
    let dv = v.dim().2;
    let scale = 1.0 / (d as f32).sqrt();
    let mut probs = Array3::<f32>::zeros((heads, n, s_len));
    let mut out = Array3::<f32>::zeros((heads, n, dv));
    for h in 0..heads {
        let qh = q.index_axis(Axis(0), h);
        let kh = k.index_axis(Axis(0), h);
        let mut logits = qh.dot(&kh.t());
        logits.mapv_inplace(|x| x * scale);
        for mut row in logits.rows_mut() {
            let max = row.fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f32 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let vh = v.index_axis(Axis(0), h);
        out.slice_mut(s![h, .., ..]).assign(&logits.dot(&vh));
        probs.slice_mut(s![h, .., ..]).assign(&logits);
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GridShape;
    use ndarray::Array;

    fn info() -> BackendInfo {
        BackendInfo::new(
            "t",
            [
                (AttentionKind::SelfAttention, GridShape::new(4, 4), 2, 3),
                (AttentionKind::Cross, GridShape::new(4, 4), 2, 3),
            ],
            [3, 4, 4],
            8,
            [4, 4],
        )
    }

    #[test]
    fn rows_of_attention_sum_to_one() {
        let q = Array::from_shape_fn((2, 5, 3), |(a, b, c)| (a + 2 * b + c) as f32 * 0.3);
        let k = Array::from_shape_fn((2, 7, 3), |(a, b, c)| (a * b) as f32 * 0.1 - c as f32);
        let v = Array::from_shape_fn((2, 7, 4), |(a, b, c)| (a + b + c) as f32);
        let (out, probs) = attention(q.view(), k.view(), v.view());
        assert_eq!(out.dim(), (2, 5, 4));
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_queries_attend_uniformly() {
        let q = Array3::<f32>::zeros((2, 4, 3));
        let k = Array::from_shape_fn((2, 6, 3), |(a, b, c)| (a + b * c) as f32 - 2.0);
        let v = Array::from_shape_fn((2, 6, 2), |(a, b, c)| (a * 3 + b + c) as f32);
        let (out, probs) = attention(q.view(), k.view(), v.view());
        for p in probs.iter() {
            assert!((p - 1.0 / 6.0).abs() < 1e-7);
        }
        let mean_v = v.mean_axis(Axis(1)).unwrap();
        for h in 0..2 {
            for i in 0..4 {
                for c in 0..2 {
                    assert!((out[[h, i, c]] - mean_v[[h, c]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn plan_validation() {
        let info = info();
        assert!(TapPlan::at_step(0).capture_cross([1]).validate(&info).is_ok());
        assert!(TapPlan::at_step(0).capture_cross([0]).validate(&info).is_err());
        assert!(TapPlan::at_step(0).capture_self([5]).validate(&info).is_err());
        let bad = TapPlan::at_step(0).inject(0, Branch::Cond, Array3::zeros((2, 16, 4)));
        assert!(matches!(bad.validate(&info), Err(MftfError::Shape(_))));
        let good = TapPlan::at_step(0).inject(0, Branch::Cond, Array3::zeros((2, 16, 3)));
        assert!(good.validate(&info).is_ok());
    }

    #[test]
    fn session_captures_and_substitutes() {
        let repl = Array3::from_elem((2, 16, 3), 7.0f32);
        let plan = TapPlan::at_step(4)
            .capture_self([0])
            .capture_cross([1])
            .inject(0, Branch::Cond, repl.clone());
        let mut cond = TapSession::new(&plan, Branch::Cond);
        let q = Array3::from_elem((2, 16, 3), 1.0f32);
        let used = cond.self_query(0, q.clone());
        assert_eq!(used, repl);
        cond.cross_map(1, &Array3::zeros((2, 16, 5)));
        let out = cond.finish();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[0].self_query_tensor(), Some(&q));
        assert_eq!(out.records[1].site.step, 4);

        let mut uncond = TapSession::new(&plan, Branch::Uncond);
        assert_eq!(uncond.self_query(0, q.clone()), q);
        uncond.cross_map(1, &Array3::zeros((2, 16, 5)));
        assert_eq!(uncond.finish().records.len(), 1);
    }
}
