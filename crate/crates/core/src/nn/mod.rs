//! Dense building blocks with explicit forward caches and backward passes.

mod attention;
mod layers;
mod mat;

pub use attention::{
    AttentionCache, Decoder, DecoderCache, DecoderLayer, DecoderLayerCache, MultiHeadAttention,
};
pub use layers::{gelu, gelu_backward, gelu_grad, gelu_mat, LayerNorm, Linear, Mlp3, Mlp3Cache};
pub use mat::{dot, Mat};

/// Named traversal over every trainable tensor, in a fixed order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat));
}

pub fn param_count<P: Params + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, m| n += m.data().len());
    n
}

pub fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, m| out.extend_from_slice(m.data()));
    out
}

/// Writes `values` back in traversal order. Panics on length mismatch.
pub fn unflatten<P: Params + ?Sized>(p: &mut P, values: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, m| {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, values.len(), "unflatten length mismatch");
}

pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, m| m.fill(0.0));
    z
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<P: Params + ?Sized>(acc: &mut P, other: &P) {
    let flat = flatten(other);
    let mut offset = 0;
    acc.visit_mut("", &mut |_, m| {
        for v in m.data_mut() {
            *v += flat[offset];
            offset += 1;
        }
    });
}
