//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of every named parameter. Graphs built with [`Graph::inference`]
//! keep values only and cannot be differentiated.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// `(grad_out, parent_values, out_value, needs_grad) -> grads per parent`.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
    record: bool,
    dropout_rng: RefCell<Option<Rng>>,
}

/// Gradients of a scalar with respect to every recorded leaf.
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            record: true,
            dropout_rng: RefCell::new(None),
        }
    }

    /// Enables dropout, drawing masks from `rng`. Without it dropout is the
    /// identity (evaluation mode).
    pub fn with_dropout(self, rng: Rng) -> Self {
        *self.dropout_rng.borrow_mut() = Some(rng);
        self
    }

    /// A value-only graph for sampling and evaluation.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    fn push(&self, value: Tensor, parents: &[Var], backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.0].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: if requires_grad {
                parents.iter().map(|p| p.0).collect()
            } else {
                Vec::new()
            },
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(id)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad: requires_grad && self.record,
            backward: None,
        });
        Var(id)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf without a parameter name.
    pub fn input(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn param(&self, name: &str, value: &Tensor) -> Var {
        let v = self.leaf(value.clone(), true);
        self.params.borrow_mut().push((name.to_string(), v.0));
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_vals: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let refs: Vec<&Tensor> = parent_vals.iter().map(|t| t.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pg = bw(&g, &refs, &node.value, &needs);
            for (k, pgrad) in pg.into_iter().enumerate() {
                let Some(pgrad) = pgrad else { continue };
                let p = node.parents[k];
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pgrad),
                    slot @ None => *slot = Some(pgrad),
                }
            }
        }
        let mut params = BTreeMap::new();
        for (name, id) in self.params.borrow().iter() {
            let g = grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(nodes[*id].value.shape()));
            params.insert(name.clone(), g);
        }
        Ok(Gradients {
            params,
            leaves: grads,
        })
    }

    fn check_4d(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::Contract(format!("{what}: expected NCHW input, got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bn, ci, h, wd) = self.check_4d(x, "conv2d")?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] {
            return Err(Error::Contract(format!(
                "conv2d: weight {ws:?} incompatible with {ci} input channels"
            )));
        }
        let (co, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::Contract("conv2d: bias length mismatch".into()));
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Contract("conv2d: kernel larger than padded input".into()));
        }
        let geo = ConvGeom {
            c: ci,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let out = conv_forward(&xv, &wv, bv.as_deref(), bn, co, &geo);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let bw: BackwardFn = Box::new(move |g, p, _, needs| {
            let (dx, dw, db) = conv_backward(g, p[0], p[1], bn, co, &geo, needs[0]);
            let mut r = vec![dx, Some(dw)];
            if p.len() > 2 {
                r.push(Some(db));
            }
            r
        });
        Ok(self.push(out, &parents, Some(bw)))
    }

    /// `x·Wᵀ + b` for `x: [B, I]`, `W: [O, I]`, `b: [O]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::Contract(format!(
                "linear: input {xs:?} weight {ws:?} incompatible"
            )));
        }
        let (bn, i, o) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; bn * o];
        gemm(bn, i, o, xv.data(), false, wv.data(), true, &mut out, false);
        for row in out.chunks_exact_mut(o) {
            for (v, bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let bw: BackwardFn = Box::new(move |g, p, _, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; bn * i];
                gemm(bn, o, i, g.data(), false, p[1].data(), false, &mut dx, false);
                Tensor::from_vec(&[bn, i], dx).unwrap()
            });
            let mut dw = vec![0.0; o * i];
            gemm(o, bn, i, g.data(), true, p[0].data(), false, &mut dw, false);
            let mut db = vec![0.0; o];
            for row in g.data().chunks_exact(o) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![
                dx,
                Some(Tensor::from_vec(&[o, i], dw).unwrap()),
                Some(Tensor::from_vec(&[o], db).unwrap()),
            ]
        });
        Ok(self.push(Tensor::from_vec(&[bn, o], out)?, &[x, w, b], Some(bw)))
    }

    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (bn, c, h, w) = self.check_4d(x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Contract(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Contract("group_norm: affine length mismatch".into()));
        }
        let hw = h * w;
        let cg = c / groups;
        let n = (cg * hw) as f64;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; xv.numel()];
        for b in 0..bn {
            for g in 0..groups {
                let off = (b * c + g * cg) * hw;
                let seg = &xv.data()[off..off + cg * hw];
                let (mean, inv) = moments(seg, n, eps);
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                    for p in 0..hw {
                        let idx = cc * hw + p;
                        out[off + idx] = (seg[idx] - mean) * inv * ga + be;
                    }
                }
            }
        }
        let bw: BackwardFn = Box::new(move |gout, p, _, needs| {
            let (xv, gv) = (p[0], p[1]);
            let mut dx = vec![0.0; xv.numel()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..bn {
                for g in 0..groups {
                    let off = (b * c + g * cg) * hw;
                    let seg = &xv.data()[off..off + cg * hw];
                    let gseg = &gout.data()[off..off + cg * hw];
                    let (mean, inv) = moments(seg, n, eps);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        let ga = gv.data()[ch];
                        for pp in 0..hw {
                            let idx = cc * hw + pp;
                            let xh = (seg[idx] - mean) * inv;
                            dgamma[ch] += gseg[idx] * xh;
                            dbeta[ch] += gseg[idx];
                            let dxh = gseg[idx] * ga;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                    }
                    if needs[0] {
                        for cc in 0..cg {
                            let ga = gv.data()[g * cg + cc];
                            for pp in 0..hw {
                                let idx = cc * hw + pp;
                                let xh = (seg[idx] - mean) * inv;
                                let dxh = gseg[idx] * ga;
                                dx[off + idx] = inv / n * (n * dxh - sum_dxh - xh * sum_dxh_xh);
                            }
                        }
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_vec(xv.shape(), dx).unwrap()),
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        });
        Ok(self.push(Tensor::from_vec(xv.shape(), out)?, &[x, gamma, beta], Some(bw)))
    }

    pub fn silu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let bw: BackwardFn = Box::new(|g, p, _, _| {
            let dx = p[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gg)| {
                    let s = sigmoid(v);
                    gg * s * (1.0 + v * (1.0 - s))
                })
                .collect();
            vec![Some(Tensor::from_vec(p[0].shape(), dx).unwrap())]
        });
        self.push(Tensor::from_vec(xv.shape(), out).unwrap(), &[x], Some(bw))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::Contract(format!(
                "add: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let bw: BackwardFn = Box::new(|g, _, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        });
        Ok(self.push(Tensor::from_vec(av.shape(), out)?, &[a, b], Some(bw)))
    }

    /// `f·(1 + Δγ) + β`, elementwise over equal shapes.
    pub fn affine_modulate(&self, f: Var, dgamma: Var, beta: Var) -> Result<Var> {
        let fv = self.value(f);
        let gv = self.value(dgamma);
        let bv = self.value(beta);
        if fv.shape() != gv.shape() || fv.shape() != bv.shape() {
            return Err(Error::Contract(format!(
                "affine_modulate: features {:?}, gamma {:?}, beta {:?}",
                fv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let out: Vec<f64> = fv
            .data()
            .iter()
            .zip(gv.data())
            .zip(bv.data())
            .map(|((x, g), b)| x * (1.0 + g) + b)
            .collect();
        let bw: BackwardFn = Box::new(|g, p, _, needs| {
            let df = needs[0].then(|| {
                let d = g.data().iter().zip(p[1].data()).map(|(g, dg)| g * (1.0 + dg)).collect();
                Tensor::from_vec(g.shape(), d).unwrap()
            });
            let dg = needs[1].then(|| {
                let d = g.data().iter().zip(p[0].data()).map(|(g, x)| g * x).collect();
                Tensor::from_vec(g.shape(), d).unwrap()
            });
            vec![df, dg, needs[2].then(|| g.clone())]
        });
        Ok(self.push(Tensor::from_vec(fv.shape(), out)?, &[f, dgamma, beta], Some(bw)))
    }

    /// Per-channel `x·(1 + w) + b` where `wb: [B, 2C]` holds `w` then `b`.
    pub fn modulate(&self, x: Var, wb: Var) -> Result<Var> {
        let (bn, c, h, w) = self.check_4d(x, "modulate")?;
        if self.shape(wb) != [bn, 2 * c] {
            return Err(Error::Contract(format!(
                "modulate: expected [{bn}, {}] modulation, got {:?}",
                2 * c,
                self.shape(wb)
            )));
        }
        let hw = h * w;
        let xv = self.value(x);
        let mv = self.value(wb);
        let mut out = vec![0.0; xv.numel()];
        for b in 0..bn {
            for ch in 0..c {
                let scale = 1.0 + mv.data()[b * 2 * c + ch];
                let shift = mv.data()[b * 2 * c + c + ch];
                let off = (b * c + ch) * hw;
                for p in 0..hw {
                    out[off + p] = xv.data()[off + p] * scale + shift;
                }
            }
        }
        let bw: BackwardFn = Box::new(move |g, p, _, needs| {
            let (xv, mv) = (p[0], p[1]);
            let mut dx = vec![0.0; xv.numel()];
            let mut dm = vec![0.0; bn * 2 * c];
            for b in 0..bn {
                for ch in 0..c {
                    let scale = 1.0 + mv.data()[b * 2 * c + ch];
                    let off = (b * c + ch) * hw;
                    let (mut sw, mut sb) = (0.0, 0.0);
                    for pp in 0..hw {
                        let gg = g.data()[off + pp];
                        dx[off + pp] = gg * scale;
                        sw += gg * xv.data()[off + pp];
                        sb += gg;
                    }
                    dm[b * 2 * c + ch] = sw;
                    dm[b * 2 * c + c + ch] = sb;
                }
            }
            vec![
                needs[0].then(|| Tensor::from_vec(xv.shape(), dx).unwrap()),
                Some(Tensor::from_vec(mv.shape(), dm).unwrap()),
            ]
        });
        Ok(self.push(Tensor::from_vec(xv.shape(), out)?, &[x, wb], Some(bw)))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&v| self.shape(v)).collect();
        let first = shapes
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if first.len() != 4 {
            return Err(Error::Contract("concat expects NCHW tensors".into()));
        }
        let (bn, h, w) = (first[0], first[2], first[3]);
        for s in &shapes {
            if s.len() != 4 || s[0] != bn || s[2] != h || s[3] != w {
                return Err(Error::Contract(format!(
                    "concat: spatial/batch mismatch {s:?} vs {first:?}"
                )));
            }
        }
        let chans: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let ct: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(bn * ct * hw);
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&v| self.value(v)).collect();
        for b in 0..bn {
            for (v, &ci) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[b * ci * hw..(b + 1) * ci * hw]);
            }
        }
        let bw: BackwardFn = Box::new(move |g, _, _, needs| {
            let mut res = Vec::with_capacity(chans.len());
            let mut start = 0;
            for (k, &ci) in chans.iter().enumerate() {
                if needs[k] {
                    let mut d = Vec::with_capacity(bn * ci * hw);
                    for b in 0..bn {
                        let off = (b * ct + start) * hw;
                        d.extend_from_slice(&g.data()[off..off + ci * hw]);
                    }
                    res.push(Some(Tensor::from_vec(&[bn, ci, h, w], d).unwrap()));
                } else {
                    res.push(None);
                }
                start += ci;
            }
            res
        });
        Ok(self.push(Tensor::from_vec(&[bn, ct, h, w], out)?, parts, Some(bw)))
    }

    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let (bn, c, h, w) = self.check_4d(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Contract(format!("avg_pool2: odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; bn * c * ho * wo];
        for bc in 0..bn * c {
            let src = &xv.data()[bc * h * w..(bc + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[bc * ho * wo + y * wo + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let bw: BackwardFn = Box::new(move |g, _, _, _| {
            let mut dx = vec![0.0; bn * c * h * w];
            for bc in 0..bn * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        let gg = 0.25 * g.data()[bc * ho * wo + y * wo + xx];
                        let i = bc * h * w + 2 * y * w + 2 * xx;
                        dx[i] += gg;
                        dx[i + 1] += gg;
                        dx[i + w] += gg;
                        dx[i + w + 1] += gg;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[bn, c, h, w], dx).unwrap())]
        });
        Ok(self.push(Tensor::from_vec(&[bn, c, ho, wo], out)?, &[x], Some(bw)))
    }

    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let (bn, c, h, w) = self.check_4d(x, "upsample2")?;
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x);
        let mut out = vec![0.0; bn * c * ho * wo];
        for bc in 0..bn * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[bc * ho * wo + y * wo + xx] = xv.data()[bc * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let bw: BackwardFn = Box::new(move |g, _, _, _| {
            let mut dx = vec![0.0; bn * c * h * w];
            for bc in 0..bn * c {
                for y in 0..ho {
                    for xx in 0..wo {
                        dx[bc * h * w + (y / 2) * w + xx / 2] += g.data()[bc * ho * wo + y * wo + xx];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[bn, c, h, w], dx).unwrap())]
        });
        Ok(self.push(Tensor::from_vec(&[bn, c, ho, wo], out)?, &[x], Some(bw)))
    }

    /// Multi-head softmax self-attention over spatial positions.
    ///
    /// `qkv: [B, 3C, H, W]` holds queries, keys and values as consecutive
    /// channel blocks; head `h` owns channels `h·d..(h+1)·d` of each block.
    pub fn attention(&self, qkv: Var, heads: usize) -> Result<Var> {
        let (bn, c3, h, w) = self.check_4d(qkv, "attention")?;
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: {c3} qkv channels incompatible with {heads} heads"
            )));
        }
        let c = c3 / 3;
        let geo = AttnGeom {
            c,
            d: c / heads,
            n: h * w,
            heads,
        };
        let v = self.value(qkv);
        let mut out = vec![0.0; bn * c * geo.n];
        let mut probs = vec![0.0; geo.n * geo.n];
        for b in 0..bn {
            for hd in 0..heads {
                let (q, k, vv) = geo.slices(v.data(), b, hd);
                geo.probs(q, k, &mut probs);
                let o = &mut out[(b * c + hd * geo.d) * geo.n..(b * c + (hd + 1) * geo.d) * geo.n];
                gemm(geo.d, geo.n, geo.n, vv, false, &probs, true, o, false);
            }
        }
        let bw: BackwardFn = Box::new(move |g, p, _, _| {
            let n = geo.n;
            let mut dqkv = vec![0.0; p[0].numel()];
            let mut probs = vec![0.0; n * n];
            let mut dp = vec![0.0; n * n];
            for b in 0..bn {
                for hd in 0..geo.heads {
                    let (q, k, vv) = geo.slices(p[0].data(), b, hd);
                    geo.probs(q, k, &mut probs);
                    let go = &g.data()[(b * geo.c + hd * geo.d) * n..(b * geo.c + (hd + 1) * geo.d) * n];
                    let (qo, ko, vo) = geo.offsets(b, hd);
                    gemm(geo.d, n, n, go, false, &probs, false, &mut dqkv[vo..vo + geo.d * n], false);
                    gemm(n, geo.d, n, go, true, vv, false, &mut dp, false);
                    let scale = 1.0 / (geo.d as f64).sqrt();
                    for i in 0..n {
                        let row_p = &probs[i * n..(i + 1) * n];
                        let row_d = &mut dp[i * n..(i + 1) * n];
                        let dot: f64 = row_p.iter().zip(row_d.iter()).map(|(a, b)| a * b).sum();
                        for (dd, &pp) in row_d.iter_mut().zip(row_p) {
                            *dd = pp * (*dd - dot) * scale;
                        }
                    }
                    gemm(geo.d, n, n, k, false, &dp, true, &mut dqkv[qo..qo + geo.d * n], false);
                    gemm(geo.d, n, n, q, false, &dp, false, &mut dqkv[ko..ko + geo.d * n], false);
                }
            }
            vec![Some(Tensor::from_vec(p[0].shape(), dqkv).unwrap())]
        });
        Ok(self.push(Tensor::from_vec(&[bn, c, h, w], out)?, &[qkv], Some(bw)))
    }

    /// Inverted dropout; identity when `p == 0` or dropout is disabled.
    pub fn dropout(&self, x: Var, p: f64) -> Var {
        let mut slot = self.dropout_rng.borrow_mut();
        let Some(rng) = slot.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        drop(slot);
        let shape = xv.shape().to_vec();
        let bw: BackwardFn = Box::new(move |g, _, _, _| {
            let d = g.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            vec![Some(Tensor::from_vec(&shape, d).unwrap())]
        });
        self.push(Tensor::from_vec(xv.shape(), out).unwrap(), &[x], Some(bw))
    }

    /// Multiplies batch item `b` by `scales[b]`.
    pub fn scale_items(&self, x: Var, scales: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let bn = xv.shape()[0];
        if scales.len() != bn {
            return Err(Error::Contract(format!(
                "scale_items: {} scales for batch of {bn}",
                scales.len()
            )));
        }
        let per = xv.numel() / bn;
        let scales = scales.to_vec();
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scales[i / per])
            .collect();
        let bw: BackwardFn = Box::new(move |g, _, _, _| {
            let d = g.data().iter().enumerate().map(|(i, v)| v * scales[i / per]).collect();
            vec![Some(Tensor::from_vec(g.shape(), d).unwrap())]
        });
        Ok(self.push(Tensor::from_vec(xv.shape(), out)?, &[x], Some(bw)))
    }

    /// `mean_b( weights[b] · mean((pred_b − target_b)²) )`.
    pub fn weighted_mse(&self, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::Contract(format!(
                "weighted_mse: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let bn = pv.shape()[0];
        if weights.len() != bn {
            return Err(Error::Contract("weighted_mse: one weight per item required".into()));
        }
        let per = pv.numel() / bn;
        let mut loss = 0.0;
        for b in 0..bn {
            let se: f64 = pv.data()[b * per..(b + 1) * per]
                .iter()
                .zip(&target.data()[b * per..(b + 1) * per])
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            loss += weights[b] * se / per as f64;
        }
        loss /= bn as f64;
        let target = target.clone();
        let weights = weights.to_vec();
        let bw: BackwardFn = Box::new(move |g, p, _, _| {
            let go = g.data()[0];
            let d = p[0]
                .data()
                .iter()
                .zip(target.data())
                .enumerate()
                .map(|(i, (pp, t))| go * weights[i / per] * 2.0 * (pp - t) / (per * bn) as f64)
                .collect();
            vec![Some(Tensor::from_vec(p[0].shape(), d).unwrap())]
        });
        Ok(self.push(Tensor::scalar(loss), &[pred], Some(bw)))
    }

    /// Sum of all elements of `x` weighted by the constant `w` (test probe).
    pub fn dot_const(&self, x: Var, w: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != w.shape() {
            return Err(Error::Contract("dot_const: shape mismatch".into()));
        }
        let s: f64 = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let w = w.clone();
        let bw: BackwardFn = Box::new(move |g, _, _, _| vec![Some(w.scale(g.data()[0]))]);
        Ok(self.push(Tensor::scalar(s), &[x], Some(bw)))
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn moments(seg: &[f64], n: f64, eps: f64) -> (f64, f64) {
    let mean = seg.iter().sum::<f64>() / n;
    let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, bn: usize, co: usize, geo: &ConvGeom) -> Tensor {
    let p = geo.ho * geo.wo;
    let in_per = geo.c * geo.h * geo.w;
    let mut out = vec![0.0; bn * co * p];
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; geo.rows() * p]
    };
    for bi in 0..bn {
        let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
        let ob = &mut out[bi * co * p..(bi + 1) * co * p];
        let cols: &[f64] = if geo.is_pointwise() {
            xb
        } else {
            geo.im2col(xb, &mut col);
            &col
        };
        gemm(co, geo.rows(), p, w.data(), false, cols, false, ob, false);
        if let Some(b) = b {
            for (o, row) in ob.chunks_exact_mut(p).enumerate() {
                let bb = b.data()[o];
                row.iter_mut().for_each(|v| *v += bb);
            }
        }
    }
    Tensor::from_vec(&[bn, co, geo.ho, geo.wo], out).unwrap()
}

fn conv_backward(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    bn: usize,
    co: usize,
    geo: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let p = geo.ho * geo.wo;
    let in_per = geo.c * geo.h * geo.w;
    let rows = geo.rows();
    let mut dw = vec![0.0; co * rows];
    let mut db = vec![0.0; co];
    let mut dx = if need_dx { vec![0.0; bn * in_per] } else { Vec::new() };
    let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * p] };
    let mut dcol = vec![0.0; rows * p];
    for bi in 0..bn {
        let xb = &x.data()[bi * in_per..(bi + 1) * in_per];
        let gb = &g.data()[bi * co * p..(bi + 1) * co * p];
        let cols: &[f64] = if geo.is_pointwise() {
            xb
        } else {
            geo.im2col(xb, &mut col);
            &col
        };
        gemm(co, p, rows, gb, false, cols, true, &mut dw, true);
        for (o, row) in gb.chunks_exact(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        if need_dx {
            let dxb = &mut dx[bi * in_per..(bi + 1) * in_per];
            if geo.is_pointwise() {
                gemm(rows, co, p, w.data(), true, gb, false, dxb, false);
            } else {
                gemm(rows, co, p, w.data(), true, gb, false, &mut dcol, false);
                geo.col2im(&dcol, dxb);
            }
        }
    }
    (
        need_dx.then(|| Tensor::from_vec(x.shape(), dx).unwrap()),
        Tensor::from_vec(w.shape(), dw).unwrap(),
        Tensor::from_vec(&[co], db).unwrap(),
    )
}

#[derive(Clone, Copy)]
struct AttnGeom {
    c: usize,
    d: usize,
    n: usize,
    heads: usize,
}

impl AttnGeom {
    fn offsets(&self, b: usize, hd: usize) -> (usize, usize, usize) {
        let base = b * 3 * self.c * self.n;
        let q = base + hd * self.d * self.n;
        (q, q + self.c * self.n, q + 2 * self.c * self.n)
    }

    fn slices<'a>(&self, data: &'a [f64], b: usize, hd: usize) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (q, k, v) = self.offsets(b, hd);
        let len = self.d * self.n;
        (&data[q..q + len], &data[k..k + len], &data[v..v + len])
    }

    /// Row-softmax of `QKᵀ/√d` into `probs` (`n×n`).
    fn probs(&self, q: &[f64], k: &[f64], probs: &mut [f64]) {
        let n = self.n;
        gemm(n, self.d, n, q, true, k, false, probs, false);
        let scale = 1.0 / (self.d as f64).sqrt();
        for row in probs.chunks_exact_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) * scale;
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v * scale - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}
