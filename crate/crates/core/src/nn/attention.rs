use rand::Rng;

use super::layers::{gelu_backward, gelu_mat, LayerNorm, LayerNormCache, Linear};
use super::mat::Mat;
use super::Params;

/// Multi-head scaled dot-product attention without masking; every query row
/// attends to every key row, so the operator is permutation-equivariant in
/// the query rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    xq: Mat,
    xm: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// One `n_query x n_key` probability matrix per head.
    probs: Vec<Mat>,
    concat: Mat,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(d_model: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(n_heads > 0 && d_model % n_heads == 0);
        assert!(d_model / n_heads <= 64, "head width above 64 is unsupported");
        Self {
            q: Linear::new(d_model, d_model, true, rng),
            k: Linear::new(d_model, d_model, true, rng),
            v: Linear::new(d_model, d_model, true, rng),
            o: Linear::new(d_model, d_model, true, rng),
            n_heads,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn forward(&self, xq: &Mat, xm: &Mat) -> (Mat, AttentionCache) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xm);
        let v = self.v.forward(xm);
        let d = q.cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (q.rows(), k.rows());
        let mut concat = Mat::zeros(nq, d);
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let off = h * dh;
            let mut p = Mat::zeros(nq, nk);
            for i in 0..nq {
                let qi = &q.row(i)[off..off + dh];
                let pr = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, s) in pr.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    *s = super::mat::dot(qi, kj) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in pr.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in pr.iter_mut() {
                    *s /= z;
                }
            }
            for i in 0..nq {
                let mut acc = [0.0f64; 64];
                let acc = &mut acc[..dh];
                for j in 0..nk {
                    let pij = p.get(i, j);
                    let vj = &v.row(j)[off..off + dh];
                    for (a, vv) in acc.iter_mut().zip(vj) {
                        *a += pij * vv;
                    }
                }
                concat.row_mut(i)[off..off + dh].copy_from_slice(acc);
            }
            probs.push(p);
        }
        let out = self.o.forward(&concat);
        (
            out,
            AttentionCache {
                xq: xq.clone(),
                xm: xm.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxm)`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dout: &Mat,
        grad: &mut MultiHeadAttention,
    ) -> (Mat, Mat) {
        let dconcat = self.o.backward(&cache.concat, dout, &mut grad.o);
        let d = cache.q.cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (cache.q.rows(), cache.k.rows());
        let mut dq = Mat::zeros(nq, d);
        let mut dk = Mat::zeros(nk, d);
        let mut dv = Mat::zeros(nk, d);
        let mut dp = vec![0.0; nk];
        for h in 0..self.n_heads {
            let off = h * dh;
            let p = &cache.probs[h];
            for i in 0..nq {
                let doi = &dconcat.row(i)[off..off + dh];
                let pr = p.row(i);
                let mut weighted = 0.0;
                for j in 0..nk {
                    let vj = &cache.v.row(j)[off..off + dh];
                    dp[j] = super::mat::dot(doi, vj);
                    weighted += pr[j] * dp[j];
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for (a, b) in dvj.iter_mut().zip(doi) {
                        *a += pr[j] * b;
                    }
                }
                let qi: [f64; 64] = {
                    let mut buf = [0.0; 64];
                    buf[..dh].copy_from_slice(&cache.q.row(i)[off..off + dh]);
                    buf
                };
                for j in 0..nk {
                    let ds = pr[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &cache.k.row(j)[off..off + dh];
                    let dqi = &mut dq.row_mut(i)[off..off + dh];
                    for (a, b) in dqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let dkj = &mut dk.row_mut(j)[off..off + dh];
                    for (a, b) in dkj.iter_mut().zip(&qi[..dh]) {
                        *a += ds * b;
                    }
                }
            }
        }
        let dxq = self.q.backward(&cache.xq, &dq, &mut grad.q);
        let mut dxm = self.k.backward(&cache.xm, &dk, &mut grad.k);
        dxm.add_assign(&self.v.backward(&cache.xm, &dv, &mut grad.v));
        (dxq, dxm)
    }
}

impl Params for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.v.visit(&format!("{prefix}.v"), f);
        self.o.visit(&format!("{prefix}.o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.q.visit_mut(&format!("{prefix}.q"), f);
        self.k.visit_mut(&format!("{prefix}.k"), f);
        self.v.visit_mut(&format!("{prefix}.v"), f);
        self.o.visit_mut(&format!("{prefix}.o"), f);
    }
}

/// Pre-norm transformer decoder layer: self-attention over the target rows,
/// cross-attention into the memory rows, then a GeLU feed-forward block.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerCache {
    ln1: LayerNormCache,
    sa: AttentionCache,
    ln2: LayerNormCache,
    ca: AttentionCache,
    ln3: LayerNormCache,
    h3: Mat,
    z: Mat,
    a: Mat,
}

impl DecoderLayer {
    pub fn new<R: Rng>(d_model: usize, n_heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        Self {
            norm_self: LayerNorm::new(d_model),
            self_attn: MultiHeadAttention::new(d_model, n_heads, rng),
            norm_cross: LayerNorm::new(d_model),
            cross_attn: MultiHeadAttention::new(d_model, n_heads, rng),
            norm_ff: LayerNorm::new(d_model),
            ff_in: Linear::new(d_model, ff_dim, true, rng),
            ff_out: Linear::new(ff_dim, d_model, true, rng),
        }
    }

    pub fn forward(&self, x: &Mat, memory: &Mat) -> (Mat, DecoderLayerCache) {
        let (h1, ln1) = self.norm_self.forward(x);
        let (sa_out, sa) = self.self_attn.forward(&h1, &h1);
        let x1 = x.add(&sa_out);
        let (h2, ln2) = self.norm_cross.forward(&x1);
        let (ca_out, ca) = self.cross_attn.forward(&h2, memory);
        let x2 = x1.add(&ca_out);
        let (h3, ln3) = self.norm_ff.forward(&x2);
        let z = self.ff_in.forward(&h3);
        let a = gelu_mat(&z);
        let f = self.ff_out.forward(&a);
        let x3 = x2.add(&f);
        (
            x3,
            DecoderLayerCache {
                ln1,
                sa,
                ln2,
                ca,
                ln3,
                h3,
                z,
                a,
            },
        )
    }

    /// Returns `(dL/dx, dL/dmemory)`.
    pub fn backward(
        &self,
        cache: &DecoderLayerCache,
        dx3: &Mat,
        grad: &mut DecoderLayer,
    ) -> (Mat, Mat) {
        let da = self.ff_out.backward(&cache.a, dx3, &mut grad.ff_out);
        let dz = gelu_backward(&cache.z, &da);
        let dh3 = self.ff_in.backward(&cache.h3, &dz, &mut grad.ff_in);
        let mut dx2 = self.norm_ff.backward(&cache.ln3, &dh3, &mut grad.norm_ff);
        dx2.add_assign(dx3);

        let (dh2, dmem) = self
            .cross_attn
            .backward(&cache.ca, &dx2, &mut grad.cross_attn);
        let mut dx1 = self.norm_cross.backward(&cache.ln2, &dh2, &mut grad.norm_cross);
        dx1.add_assign(&dx2);

        let (dh1q, dh1k) = self.self_attn.backward(&cache.sa, &dx1, &mut grad.self_attn);
        let dh1 = dh1q.add(&dh1k);
        let mut dx = self.norm_self.backward(&cache.ln1, &dh1, &mut grad.norm_self);
        dx.add_assign(&dx1);
        (dx, dmem)
    }
}

impl Params for DecoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.norm_self.visit(&format!("{prefix}.norm_self"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.norm_cross.visit(&format!("{prefix}.norm_cross"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.norm_ff.visit(&format!("{prefix}.norm_ff"), f);
        self.ff_in.visit(&format!("{prefix}.ff_in"), f);
        self.ff_out.visit(&format!("{prefix}.ff_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.norm_self.visit_mut(&format!("{prefix}.norm_self"), f);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.norm_cross.visit_mut(&format!("{prefix}.norm_cross"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.norm_ff.visit_mut(&format!("{prefix}.norm_ff"), f);
        self.ff_in.visit_mut(&format!("{prefix}.ff_in"), f);
        self.ff_out.visit_mut(&format!("{prefix}.ff_out"), f);
    }
}

/// Stack of decoder layers followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub norm_out: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    layers: Vec<DecoderLayerCache>,
    norm_out: LayerNormCache,
}

impl Decoder {
    pub fn new<R: Rng>(
        d_model: usize,
        n_heads: usize,
        ff_dim: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| DecoderLayer::new(d_model, n_heads, ff_dim, rng))
                .collect(),
            norm_out: LayerNorm::new(d_model),
        }
    }

    pub fn forward(&self, target: &Mat, memory: &Mat) -> (Mat, DecoderCache) {
        let mut x = target.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&x, memory);
            caches.push(c);
            x = y;
        }
        let (out, norm_out) = self.norm_out.forward(&x);
        (
            out,
            DecoderCache {
                layers: caches,
                norm_out,
            },
        )
    }

    /// Returns `(dL/dtarget, dL/dmemory)`.
    pub fn backward(&self, cache: &DecoderCache, dout: &Mat, grad: &mut Decoder) -> (Mat, Mat) {
        let mut dx = self
            .norm_out
            .backward(&cache.norm_out, dout, &mut grad.norm_out);
        let mut dmem: Option<Mat> = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dxi, dm) = layer.backward(&cache.layers[i], &dx, &mut grad.layers[i]);
            dx = dxi;
            match dmem.as_mut() {
                Some(acc) => acc.add_assign(&dm),
                None => dmem = Some(dm),
            }
        }
        let dmem = dmem.unwrap_or_else(|| Mat::zeros(0, dout.cols()));
        (dx, dmem)
    }
}

impl Params for Decoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layers.{i}"), f);
        }
        self.norm_out.visit(&format!("{prefix}.norm_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layers.{i}"), f);
        }
        self.norm_out.visit_mut(&format!("{prefix}.norm_out"), f);
    }
}
