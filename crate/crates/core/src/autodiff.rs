//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records one forward pass as an append-only tape. Each op
//! stores its output value plus a closure that maps the output gradient to
//! input-gradient contributions. [`Graph::backward`] walks the tape in
//! reverse creation order (a valid topological order) and accumulates
//! gradients per node.
//!
//! The op set is exactly what the segmentation model needs; every op here
//! is covered by the finite-difference suite in [`crate::gradcheck`].

#![allow(clippy::needless_range_loop)] // index loops keep kernel code symmetric

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &Tensor<T>, &mut Grads<T>)>;

/// Per-node gradient accumulator produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    fn new(n: usize) -> Self {
        Grads {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) {
        match &mut self.slots[id] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.slots[id].as_ref()
    }
}

/// Recorded forward pass. Build one per training step or evaluation call.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    backwards: Vec<Option<BackwardFn<T>>>,
    named: Vec<(NodeId, String)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            backwards: Vec::new(),
            named: Vec::new(),
        }
    }

    /// Append an op output. NaN/Inf propagation is an error, so every op
    /// output is checked.
    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        backward: Option<BackwardFn<T>>,
    ) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!("{op} produced non-finite values")));
        }
        self.values.push(value);
        self.backwards.push(backward);
        Ok(self.values.len() - 1)
    }

    /// Insert a constant/input node (no gradient flows past a leaf).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.values.push(value);
        self.backwards.push(None);
        self.values.len() - 1
    }

    /// Leaf with a name recorded for gradient read-back (parameters).
    pub fn named_leaf(&mut self, value: Tensor<T>, name: &str) -> NodeId {
        let id = self.leaf(value);
        self.named.push((id, name.to_string()));
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Named leaves, in registration order.
    pub fn named_leaves(&self) -> &[(NodeId, String)] {
        &self.named
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// reached; unreached nodes keep `None`.
    pub fn backward(&self, root: NodeId) -> Result<Grads<T>> {
        if self.values[root].numel() != 1 {
            return Err(Error::dim(format!(
                "backward root must be scalar, got shape {:?}",
                self.values[root].shape()
            )));
        }
        let mut grads = Grads::new(self.values.len());
        grads.accumulate(root, Tensor::full(self.values[root].shape(), T::ONE));
        for id in (0..=root).rev() {
            let Some(f) = self.backwards[id].as_ref() else {
                continue;
            };
            let Some(g) = grads.slots[id].clone() else {
                continue;
            };
            f(&self.values, &g, &mut grads);
        }
        Ok(grads)
    }

    // ── Elementwise and shape ops ────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.values[a].clone();
        out.add_assign(&self.values[b]);
        self.push(
            "add",
            out,
            Some(Box::new(move |_vals, g, grads| {
                grads.accumulate(a, g.clone());
                grads.accumulate(b, g.clone());
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let out = self.values[a].map(|v| v * c);
        self.push(
            "scale",
            out,
            Some(Box::new(move |_vals, g, grads| {
                grads.accumulate(a, g.map(|v| v * c));
            })),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.values[a].map(|v| v.maxv(T::ZERO));
        self.push(
            "relu",
            out,
            Some(Box::new(move |vals, g, grads| {
                let x = &vals[a];
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::ZERO { gv } else { T::ZERO })
                    .collect();
                grads.accumulate(a, Tensor::from_vec(x.shape(), data).unwrap());
            })),
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.values[a].map(gelu_scalar);
        self.push(
            "gelu",
            out,
            Some(Box::new(move |vals, g, grads| {
                let x = &vals[a];
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad_scalar(xv))
                    .collect();
                grads.accumulate(a, Tensor::from_vec(x.shape(), data).unwrap());
            })),
        )
    }

    /// Same data, new shape (element count must agree).
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.values[a].reshaped(shape)?;
        let old_shape = self.shape(a).to_vec();
        self.push(
            "reshape",
            out,
            Some(Box::new(move |_vals, g, grads| {
                grads.accumulate(a, g.reshaped(&old_shape).unwrap());
            })),
        )
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::arg("mean_of needs at least one input".to_string()));
        }
        let shape = self.shape(ids[0]).to_vec();
        for &id in ids {
            if self.shape(id) != shape.as_slice() {
                return Err(Error::dim(format!(
                    "mean_of shape mismatch: {:?} vs {:?}",
                    shape,
                    self.shape(id)
                )));
            }
        }
        let inv = T::ONE / T::from_f64(ids.len() as f64);
        let mut out = Tensor::zeros(&shape);
        for &id in ids {
            out.add_assign(&self.values[id]);
        }
        let out = out.map(|v| v * inv);
        let ids = ids.to_vec();
        self.push(
            "mean_of",
            out,
            Some(Box::new(move |_vals, g, grads| {
                let scaled = g.map(|v| v * inv);
                for &id in &ids {
                    grads.accumulate(id, scaled.clone());
                }
            })),
        )
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.values[a];
        let inv = T::ONE / T::from_f64(x.numel() as f64);
        let mut acc = T::ZERO;
        for &v in x.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc * inv);
        self.push(
            "mean_all",
            out,
            Some(Box::new(move |vals, g, grads| {
                let s = g.data()[0] * inv;
                grads.accumulate(a, Tensor::full(vals[a].shape(), s));
            })),
        )
    }

    // ── Matrix ops (rank 2) ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul shape mismatch: {:?} x {:?}",
                sa, sb
            )));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = mat_mul(self.values[a].data(), self.values[b].data(), n, k, m);
        self.push(
            "matmul",
            Tensor::from_vec(&[n, m], out)?,
            Some(Box::new(move |vals, g, grads| {
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let da = mat_mul_nt(g.data(), vals[b].data(), n, m, k);
                let db = mat_mul_tn(vals[a].data(), g.data(), n, k, m);
                grads.accumulate(a, Tensor::from_vec(&[n, k], da).unwrap());
                grads.accumulate(b, Tensor::from_vec(&[k, m], db).unwrap());
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose wants rank 2, got {:?}", s)));
        }
        let (n, m) = (s[0], s[1]);
        let out = transpose_data(self.values[a].data(), n, m);
        self.push(
            "transpose",
            Tensor::from_vec(&[m, n], out)?,
            Some(Box::new(move |_vals, g, grads| {
                let gt = transpose_data(g.data(), m, n);
                grads.accumulate(a, Tensor::from_vec(&[n, m], gt).unwrap());
            })),
        )
    }

    /// Broadcast-add a length-D bias to every row of an (N, D) matrix.
    pub fn add_bias_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim(format!(
                "bias shape mismatch: {:?} + {:?}",
                sx, sb
            )));
        }
        let (n, d) = (sx[0], sx[1]);
        let b = self.values[bias].data().to_vec();
        let mut out = self.values[x].clone();
        for r in 0..n {
            for c in 0..d {
                out.data_mut()[r * d + c] += b[c];
            }
        }
        self.push(
            "add_bias_rows",
            out,
            Some(Box::new(move |_vals, g, grads| {
                grads.accumulate(x, g.clone());
                let mut db = vec![T::ZERO; d];
                for r in 0..n {
                    for c in 0..d {
                        db[c] += g.data()[r * d + c];
                    }
                }
                grads.accumulate(bias, Tensor::from_vec(&[d], db).unwrap());
            })),
        )
    }

    /// Concatenate (N_i, D) matrices along the token axis.
    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::arg("concat_rows needs inputs".to_string()));
        }
        let d = self.shape(ids[0])[1];
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for &id in ids {
            let s = self.shape(id);
            if s.len() != 2 || s[1] != d {
                return Err(Error::dim(format!(
                    "concat_rows dim mismatch: expected (*, {}), got {:?}",
                    d, s
                )));
            }
            rows.push(s[0]);
            data.extend_from_slice(self.values[id].data());
        }
        let n_total: usize = rows.iter().sum();
        let ids = ids.to_vec();
        self.push(
            "concat_rows",
            Tensor::from_vec(&[n_total, d], data)?,
            Some(Box::new(move |_vals, g, grads| {
                let mut offset = 0;
                for (&id, &n) in ids.iter().zip(rows.iter()) {
                    let seg = g.data()[offset * d..(offset + n) * d].to_vec();
                    grads.accumulate(id, Tensor::from_vec(&[n, d], seg).unwrap());
                    offset += n;
                }
            })),
        )
    }

    /// Rows `[start, end)` of an (N, D) matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[0] {
            return Err(Error::dim(format!(
                "slice_rows [{start}, {end}) out of range for {:?}",
                s
            )));
        }
        let (n, d) = (s[0], s[1]);
        let data = self.values[a].data()[start * d..end * d].to_vec();
        self.push(
            "slice_rows",
            Tensor::from_vec(&[end - start, d], data)?,
            Some(Box::new(move |_vals, g, grads| {
                let mut full = Tensor::zeros(&[n, d]);
                full.data_mut()[start * d..end * d].copy_from_slice(g.data());
                grads.accumulate(a, full);
            })),
        )
    }

    /// Concatenate (N, D_i) matrices along the feature axis.
    pub fn concat_cols(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::arg("concat_cols needs inputs".to_string()));
        }
        let n = self.shape(ids[0])[0];
        let mut widths = Vec::new();
        for &id in ids {
            let s = self.shape(id);
            if s.len() != 2 || s[0] != n {
                return Err(Error::dim(format!(
                    "concat_cols dim mismatch: expected ({}, *), got {:?}",
                    n, s
                )));
            }
            widths.push(s[1]);
        }
        let d_total: usize = widths.iter().sum();
        let mut data = vec![T::ZERO; n * d_total];
        let mut offset = 0;
        for (&id, &w) in ids.iter().zip(widths.iter()) {
            let src = self.values[id].data();
            for r in 0..n {
                data[r * d_total + offset..r * d_total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ids = ids.to_vec();
        self.push(
            "concat_cols",
            Tensor::from_vec(&[n, d_total], data)?,
            Some(Box::new(move |_vals, g, grads| {
                let mut offset = 0;
                for (&id, &w) in ids.iter().zip(widths.iter()) {
                    let mut seg = vec![T::ZERO; n * w];
                    for r in 0..n {
                        seg[r * w..(r + 1) * w].copy_from_slice(
                            &g.data()[r * d_total + offset..r * d_total + offset + w],
                        );
                    }
                    grads.accumulate(id, Tensor::from_vec(&[n, w], seg).unwrap());
                    offset += w;
                }
            })),
        )
    }

    /// Columns `[start, end)` of an (N, D) matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::dim(format!(
                "slice_cols [{start}, {end}) out of range for {:?}",
                s
            )));
        }
        let (n, d) = (s[0], s[1]);
        let w = end - start;
        let mut data = vec![T::ZERO; n * w];
        for r in 0..n {
            data[r * w..(r + 1) * w]
                .copy_from_slice(&self.values[a].data()[r * d + start..r * d + end]);
        }
        self.push(
            "slice_cols",
            Tensor::from_vec(&[n, w], data)?,
            Some(Box::new(move |_vals, g, grads| {
                let mut full = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    full.data_mut()[r * d + start..r * d + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                grads.accumulate(a, full);
            })),
        )
    }

    // ── Normalization and softmax ────────────────────────────────────────

    /// Row-wise softmax of an (N, M) matrix, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "softmax_rows wants rank 2, got {:?}",
                s
            )));
        }
        let (n, m) = (s[0], s[1]);
        let mut out = self.values[a].clone();
        for r in 0..n {
            softmax_in_place(&mut out.data_mut()[r * m..(r + 1) * m]);
        }
        let out_id = self.push("softmax_rows", out, None)?;
        // Backward needs the output probabilities; capture the output id.
        self.backwards[out_id] = Some(Box::new(move |vals, g, grads| {
            let p = vals[out_id].data();
            let mut dx = vec![T::ZERO; n * m];
            for r in 0..n {
                let pr = &p[r * m..(r + 1) * m];
                let gr = &g.data()[r * m..(r + 1) * m];
                let mut dot = T::ZERO;
                for j in 0..m {
                    dot += gr[j] * pr[j];
                }
                for j in 0..m {
                    dx[r * m + j] = pr[j] * (gr[j] - dot);
                }
            }
            grads.accumulate(a, Tensor::from_vec(&[n, m], dx).unwrap());
        }));
        Ok(out_id)
    }

    /// Per-pixel softmax over the channel axis of a (B, C, H, W) map.
    pub fn softmax_channels(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "softmax_channels wants rank 4, got {:?}",
                s
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let mut out = self.values[a].clone();
        {
            let data = out.data_mut();
            let mut buf = vec![T::ZERO; c];
            for bi in 0..b {
                for pix in 0..hw {
                    for ci in 0..c {
                        buf[ci] = data[(bi * c + ci) * hw + pix];
                    }
                    softmax_in_place(&mut buf);
                    for ci in 0..c {
                        data[(bi * c + ci) * hw + pix] = buf[ci];
                    }
                }
            }
        }
        let out_id = self.push("softmax_channels", out, None)?;
        self.backwards[out_id] = Some(Box::new(move |vals, g, grads| {
            let p = vals[out_id].data();
            let mut dx = vec![T::ZERO; b * c * hw];
            for bi in 0..b {
                for pix in 0..hw {
                    let mut dot = T::ZERO;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * hw + pix;
                        dot += g.data()[idx] * p[idx];
                    }
                    for ci in 0..c {
                        let idx = (bi * c + ci) * hw + pix;
                        dx[idx] = p[idx] * (g.data()[idx] - dot);
                    }
                }
            }
            grads.accumulate(a, Tensor::from_vec(&[b, c, hw / w, w], dx).unwrap());
        }));
        Ok(out_id)
    }

    /// Per-token standardization of an (N, D) matrix over the D axis, with
    /// learnable scale and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("layer_norm wants rank 2, got {:?}", s)));
        }
        let (n, d) = (s[0], s[1]);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm affine params must have length {}",
                d
            )));
        }
        let epsv = T::from_f64(eps);
        let gm = self.values[gamma].data().to_vec();
        let bt = self.values[beta].data().to_vec();
        let xin = self.values[x].data();
        let mut out = vec![T::ZERO; n * d];
        for r in 0..n {
            let row = &xin[r * d..(r + 1) * d];
            let (mean, inv) = row_stats(row, epsv);
            for c in 0..d {
                out[r * d + c] = gm[c] * (row[c] - mean) * inv + bt[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_vec(&[n, d], out)?,
            Some(Box::new(move |vals, g, grads| {
                let xin = vals[x].data();
                let gm = vals[gamma].data();
                let inv_d = T::ONE / T::from_f64(d as f64);
                let mut dx = vec![T::ZERO; n * d];
                let mut dgamma = vec![T::ZERO; d];
                let mut dbeta = vec![T::ZERO; d];
                for r in 0..n {
                    let row = &xin[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let (mean, inv) = row_stats(row, T::from_f64(eps));
                    let mut sum_dxh = T::ZERO;
                    let mut sum_dxh_xh = T::ZERO;
                    let mut xhat = vec![T::ZERO; d];
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * inv;
                        let dxh = gr[c] * gm[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[c];
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                    let m1 = sum_dxh * inv_d;
                    let m2 = sum_dxh_xh * inv_d;
                    for c in 0..d {
                        let dxh = gr[c] * gm[c];
                        dx[r * d + c] = inv * (dxh - m1 - xhat[c] * m2);
                    }
                }
                grads.accumulate(x, Tensor::from_vec(&[n, d], dx).unwrap());
                grads.accumulate(gamma, Tensor::from_vec(&[d], dgamma).unwrap());
                grads.accumulate(beta, Tensor::from_vec(&[d], dbeta).unwrap());
            })),
        )
    }

    /// Per-sample standardization of a (B, C, H, W) map over all of C, H, W,
    /// with per-channel scale and shift. Stateless (no running statistics),
    /// so training stays a pure function of its inputs.
    pub fn norm2d(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("norm2d wants rank 4, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "norm2d affine params must have length {}",
                c
            )));
        }
        let m = c * h * w;
        let epsv = T::from_f64(eps);
        let xin = self.values[x].data();
        let gm = self.values[gamma].data().to_vec();
        let bt = self.values[beta].data().to_vec();
        let mut out = vec![T::ZERO; b * m];
        for bi in 0..b {
            let sample = &xin[bi * m..(bi + 1) * m];
            let (mean, inv) = row_stats(sample, epsv);
            for ci in 0..c {
                for pix in 0..h * w {
                    let idx = ci * h * w + pix;
                    out[bi * m + idx] = gm[ci] * (sample[idx] - mean) * inv + bt[ci];
                }
            }
        }
        self.push(
            "norm2d",
            Tensor::from_vec(&s, out)?,
            Some(Box::new(move |vals, g, grads| {
                let xin = vals[x].data();
                let gm = vals[gamma].data();
                let inv_m = T::ONE / T::from_f64(m as f64);
                let mut dx = vec![T::ZERO; b * m];
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for bi in 0..b {
                    let sample = &xin[bi * m..(bi + 1) * m];
                    let gs = &g.data()[bi * m..(bi + 1) * m];
                    let (mean, inv) = row_stats(sample, T::from_f64(eps));
                    let mut sum_dxh = T::ZERO;
                    let mut sum_dxh_xh = T::ZERO;
                    for ci in 0..c {
                        for pix in 0..h * w {
                            let idx = ci * h * w + pix;
                            let xhat = (sample[idx] - mean) * inv;
                            let dxh = gs[idx] * gm[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat;
                            dgamma[ci] += gs[idx] * xhat;
                            dbeta[ci] += gs[idx];
                        }
                    }
                    let m1 = sum_dxh * inv_m;
                    let m2 = sum_dxh_xh * inv_m;
                    for ci in 0..c {
                        for pix in 0..h * w {
                            let idx = ci * h * w + pix;
                            let xhat = (sample[idx] - mean) * inv;
                            let dxh = gs[idx] * gm[ci];
                            dx[bi * m + idx] = inv * (dxh - m1 - xhat * m2);
                        }
                    }
                }
                grads.accumulate(x, Tensor::from_vec(vals[x].shape(), dx).unwrap());
                grads.accumulate(gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                grads.accumulate(beta, Tensor::from_vec(&[c], dbeta).unwrap());
            })),
        )
    }

    // ── Spatial ops ──────────────────────────────────────────────────────

    /// 2D cross-correlation: input (B, Cin, H, W), weights (Cout, Cin, kh, kw),
    /// bias (Cout). Output dims must divide exactly.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weights).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d wants rank-4 input and weights, got {:?} and {:?}",
                sx, sw
            )));
        }
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                cin, wcin
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::dim(format!("conv2d bias must have length {}", cout)));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be >= 1".to_string()));
        }
        let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
        let out = conv2d_forward(
            self.values[x].data(),
            self.values[weights].data(),
            self.values[bias].data(),
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        self.push(
            "conv2d",
            Tensor::from_vec(&[b, cout, oh, ow], out)?,
            Some(Box::new(move |vals, g, grads| {
                let xd = vals[x].data();
                let wd = vals[weights].data();
                let gd = g.data();
                let mut dx = vec![T::ZERO; b * cin * h * w];
                let mut dw = vec![T::ZERO; cout * cin * kh * kw];
                let mut db = vec![T::ZERO; cout];
                for bi in 0..b {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gd[((bi * cout + co) * oh + oy) * ow + ox];
                                db[co] += go;
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((bi * cin + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                            dx[xi] += go * wd[wi];
                                            dw[wi] += go * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                grads.accumulate(x, Tensor::from_vec(&[b, cin, h, w], dx).unwrap());
                grads.accumulate(weights, Tensor::from_vec(&[cout, cin, kh, kw], dw).unwrap());
                grads.accumulate(bias, Tensor::from_vec(&[cout], db).unwrap());
            })),
        )
    }

    /// Align-corners bilinear resize of a (B, C, H, W) map. Equal sizes are a
    /// bit-exact identity.
    pub fn bilinear_resize(&mut self, a: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "bilinear_resize wants rank 4, got {:?}",
                s
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if th == h && tw == w {
            let out = self.values[a].clone();
            return self.push(
                "bilinear_resize",
                out,
                Some(Box::new(move |_vals, g, grads| {
                    grads.accumulate(a, g.clone());
                })),
            );
        }
        if h < 2 || w < 2 || th < 1 || tw < 1 {
            return Err(Error::dim(format!(
                "bilinear_resize needs source dims >= 2 (got {}x{}) and target >= 1",
                h, w
            )));
        }
        let taps_y = bilinear_taps(h, th);
        let taps_x = bilinear_taps(w, tw);
        let xin = self.values[a].data();
        let mut out = vec![T::ZERO; b * c * th * tw];
        for bc in 0..b * c {
            let src = &xin[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * th * tw..(bc + 1) * th * tw];
            for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                let wy = T::from_f64(wy);
                let iy = T::ONE - wy;
                for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                    let wx = T::from_f64(wx);
                    let ix = T::ONE - wx;
                    dst[oy * tw + ox] = iy * ix * src[y0 * w + x0]
                        + iy * wx * src[y0 * w + x1]
                        + wy * ix * src[y1 * w + x0]
                        + wy * wx * src[y1 * w + x1];
                }
            }
        }
        self.push(
            "bilinear_resize",
            Tensor::from_vec(&[b, c, th, tw], out)?,
            Some(Box::new(move |_vals, g, grads| {
                let mut dx = vec![T::ZERO; b * c * h * w];
                for bc in 0..b * c {
                    let gsl = &g.data()[bc * th * tw..(bc + 1) * th * tw];
                    let dsl = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                        let wy = T::from_f64(wy);
                        let iy = T::ONE - wy;
                        for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                            let wx = T::from_f64(wx);
                            let ix = T::ONE - wx;
                            let go = gsl[oy * tw + ox];
                            dsl[y0 * w + x0] += iy * ix * go;
                            dsl[y0 * w + x1] += iy * wx * go;
                            dsl[y1 * w + x0] += wy * ix * go;
                            dsl[y1 * w + x1] += wy * wx * go;
                        }
                    }
                }
                grads.accumulate(a, Tensor::from_vec(&[b, c, h, w], dx).unwrap());
            })),
        )
    }

    /// Concatenate (B, C_i, H, W) maps along the channel axis.
    pub fn concat_channels(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::arg("concat_channels needs inputs".to_string()));
        }
        let s0 = self.shape(ids[0]).to_vec();
        if s0.len() != 4 {
            return Err(Error::dim(format!(
                "concat_channels wants rank 4, got {:?}",
                s0
            )));
        }
        let (b, h, w) = (s0[0], s0[2], s0[3]);
        let mut channels = Vec::new();
        for &id in ids {
            let s = self.shape(id);
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::dim(format!(
                    "concat_channels mismatch: {:?} vs {:?}",
                    s0, s
                )));
            }
            channels.push(s[1]);
        }
        let c_total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = vec![T::ZERO; b * c_total * hw];
        for bi in 0..b {
            let mut co = 0;
            for (&id, &ci) in ids.iter().zip(channels.iter()) {
                let src = self.values[id].data();
                data[(bi * c_total + co) * hw..(bi * c_total + co + ci) * hw]
                    .copy_from_slice(&src[bi * ci * hw..(bi + 1) * ci * hw]);
                co += ci;
            }
        }
        let ids = ids.to_vec();
        self.push(
            "concat_channels",
            Tensor::from_vec(&[b, c_total, h, w], data)?,
            Some(Box::new(move |_vals, g, grads| {
                for bi in 0..b {
                    let mut co = 0;
                    for (&id, &ci) in ids.iter().zip(channels.iter()) {
                        let mut seg = Tensor::zeros(&[b, ci, h, w]);
                        // Fill only this sample's slice; other samples filled on
                        // their own loop turns, so accumulate per (id, bi).
                        seg.data_mut()[bi * ci * hw..(bi + 1) * ci * hw].copy_from_slice(
                            &g.data()[(bi * c_total + co) * hw..(bi * c_total + co + ci) * hw],
                        );
                        grads.accumulate(id, seg);
                        co += ci;
                    }
                }
            })),
        )
    }

    /// Flatten a (D, h, w) feature map into (h·w, D) tokens in row-major
    /// spatial order: token r·w + c carries the channel vector at (r, c).
    pub fn map_to_tokens(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!(
                "map_to_tokens wants (D, h, w), got {:?}",
                s
            )));
        }
        let (d, h, w) = (s[0], s[1], s[2]);
        let xin = self.values[a].data();
        let mut out = vec![T::ZERO; h * w * d];
        for di in 0..d {
            for r in 0..h {
                for c in 0..w {
                    out[(r * w + c) * d + di] = xin[(di * h + r) * w + c];
                }
            }
        }
        self.push(
            "map_to_tokens",
            Tensor::from_vec(&[h * w, d], out)?,
            Some(Box::new(move |_vals, g, grads| {
                let mut dx = vec![T::ZERO; d * h * w];
                for di in 0..d {
                    for r in 0..h {
                        for c in 0..w {
                            dx[(di * h + r) * w + c] = g.data()[(r * w + c) * d + di];
                        }
                    }
                }
                grads.accumulate(a, Tensor::from_vec(&[d, h, w], dx).unwrap());
            })),
        )
    }

    /// Inverse of [`Graph::map_to_tokens`]: (N, D) tokens back to (D, h, w).
    pub fn tokens_to_map(&mut self, a: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::dim(format!(
                "tokens_to_map: {} tokens cannot fill a {}x{} map",
                s.first().copied().unwrap_or(0),
                h,
                w
            )));
        }
        let (n, d) = (s[0], s[1]);
        let xin = self.values[a].data();
        let mut out = vec![T::ZERO; d * h * w];
        for di in 0..d {
            for r in 0..h {
                for c in 0..w {
                    out[(di * h + r) * w + c] = xin[(r * w + c) * d + di];
                }
            }
        }
        self.push(
            "tokens_to_map",
            Tensor::from_vec(&[d, h, w], out)?,
            Some(Box::new(move |_vals, g, grads| {
                let mut dx = vec![T::ZERO; n * d];
                for di in 0..d {
                    for r in 0..h {
                        for c in 0..w {
                            dx[(r * w + c) * d + di] = g.data()[(di * h + r) * w + c];
                        }
                    }
                }
                grads.accumulate(a, Tensor::from_vec(&[n, d], dx).unwrap());
            })),
        )
    }

    /// Mean pixel-wise cross-entropy of a (1, C, H, W) probability map
    /// against per-pixel true classes (length H·W). Probabilities are
    /// floored at 1e-12 before the log.
    pub fn cross_entropy_probs(&mut self, probs: NodeId, true_class: &[u8]) -> Result<NodeId> {
        let s = self.shape(probs).to_vec();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::dim(format!(
                "cross_entropy_probs wants (1, C, H, W), got {:?}",
                s
            )));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        if true_class.len() != h * w {
            return Err(Error::dim(format!(
                "cross_entropy_probs: {} labels for {}x{} map",
                true_class.len(),
                h,
                w
            )));
        }
        let floor = T::from_f64(1e-12);
        let hw = h * w;
        let p = self.values[probs].data();
        let mut acc = T::ZERO;
        for pix in 0..hw {
            let cls = true_class[pix] as usize;
            if cls >= c {
                return Err(Error::arg(format!(
                    "class index {} out of range for {} channels",
                    cls, c
                )));
            }
            acc -= p[cls * hw + pix].maxv(floor).ln();
        }
        let inv_n = T::ONE / T::from_f64(hw as f64);
        let labels = true_class.to_vec();
        self.push(
            "cross_entropy_probs",
            Tensor::scalar(acc * inv_n),
            Some(Box::new(move |vals, g, grads| {
                let p = vals[probs].data();
                let g0 = g.data()[0];
                let mut dp = vec![T::ZERO; c * hw];
                for pix in 0..hw {
                    let cls = labels[pix] as usize;
                    let pv = p[cls * hw + pix];
                    if pv >= floor {
                        dp[cls * hw + pix] = -g0 * inv_n / pv;
                    }
                }
                grads.accumulate(probs, Tensor::from_vec(vals[probs].shape(), dp).unwrap());
            })),
        )
    }
}

// ── Kernel helpers ───────────────────────────────────────────────────────

fn gelu_scalar<T: Scalar>(x: T) -> T {
    // tanh approximation of GELU
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

/// Max-subtracted exponential normalization over one slice.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maxv(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// (mean, 1/sqrt(var + eps)) over a slice, population variance.
fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let inv_n = T::ONE / T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &v in row {
        mean += v;
    }
    mean *= inv_n;
    let mut var = T::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var *= inv_n;
    (mean, T::ONE / (var + eps).sqrt())
}

fn mat_mul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::ZERO {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// A (n×m) · Bᵀ with B stored as (k×m): result (n×k).
fn mat_mul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = T::ZERO;
            for l in 0..m {
                acc += arow[l] * brow[l];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// Aᵀ (a stored n×k) · B (n×m): result (k×m).
fn mat_mul_tn<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::ZERO {
                continue;
            }
            let orow = &mut out[l * m..(l + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_data<T: Scalar>(a: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub(crate) fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if kh > hp || kw > wp {
        return Err(Error::dim(format!(
            "kernel {}x{} does not fit padded input {}x{}",
            kh, kw, hp, wp
        )));
    }
    if !(hp - kh).is_multiple_of(stride) || !(wp - kw).is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "conv output dims not integral: input {}x{}, kernel {}x{}, stride {}, pad {}",
            h, w, kh, kw, stride, pad
        )));
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    bias: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = ((bi * cin + ci) * h + iy as usize) * w;
                            let wrow = ((co * cin + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[xrow + ix as usize] * wgt[wrow + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// For each output index along one axis: (low tap, high tap, high weight)
/// under the align-corners convention.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if dst == 1 {
                return (0, 0, 0.0);
            }
            let f = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = f.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, f - lo as f64)
        })
        .collect()
}
