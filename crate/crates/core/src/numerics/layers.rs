//! Attention, pooling, and linear layers on top of the tape.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, norm, Matrix};
use crate::numerics::tape::{softmax_in_place, Var};
use crate::params::{init_normal, init_xavier, Graph, ParamGroup, ParamId, ParamStore};

/// Max-shifted softmax of a nonempty vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_with_norms(a, b, norm(a), norm(b)))
}

#[inline]
pub(crate) fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Multi-head cross-attention with output projection, residual and layer norm.
///
/// `LayerNorm(Q + MultiHead(Q·Wq, K·Wk, V·Wv)·Wo)`; there is no feed-forward
/// sub-layer.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub heads: usize,
    pub dim: usize,
}

/// Output of [`AttentionBlock::forward_with_weights`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    /// One `q_rows × kv_rows` weight matrix per head.
    pub weights: Vec<Var>,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "dimension {dim} is not divisible by head count {heads}"
            )));
        }
        let mut reg = |name: &str, m: Matrix| store.register(&format!("{prefix}.{name}"), group, m);
        Ok(Self {
            w_q: reg("w_q", init_xavier(rng, dim, dim))?,
            w_k: reg("w_k", init_xavier(rng, dim, dim))?,
            w_v: reg("w_v", init_xavier(rng, dim, dim))?,
            w_o: reg("w_o", init_xavier(rng, dim, dim))?,
            ln_gamma: reg("ln_gamma", Matrix::filled(1, dim, 1.0))?,
            ln_beta: reg("ln_beta", Matrix::zeros(1, dim))?,
            heads,
            dim,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.w_q, self.w_k, self.w_v, self.w_o, self.ln_gamma, self.ln_beta]
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, q, k, v)?.out)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph<'_>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<AttentionOutput> {
        let (qr, qc) = g.shape(q);
        let (kr, kc) = g.shape(k);
        let (vr, vc) = g.shape(v);
        if qc != self.dim || kc != self.dim || vc != self.dim {
            return Err(Error::invalid(format!(
                "attention expects {} columns, got Q {qc}, K {kc}, V {vc}",
                self.dim
            )));
        }
        if kr != vr || kr == 0 || qr == 0 {
            return Err(Error::invalid(format!(
                "attention needs nonempty Q and equal K/V rows, got Q {qr}, K {kr}, V {vr}"
            )));
        }
        let wq = g.param(self.w_q);
        let wk = g.param(self.w_k);
        let wv = g.param(self.w_v);
        let wo = g.param(self.w_o);
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k, wk)?;
        let vp = g.matmul(v, wv)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                let start = h * head_dim;
                (
                    g.slice_cols(qp, start, head_dim)?,
                    g.slice_cols(kp, start, head_dim)?,
                    g.slice_cols(vp, start, head_dim)?,
                )
            };
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            weights.push(attn);
            head_outs.push(g.matmul(attn, vh)?);
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            g.concat_cols(&head_outs)?
        };
        let proj = g.matmul(merged, wo)?;
        let residual = g.add(q, proj)?;
        let gamma = g.param(self.ln_gamma);
        let beta = g.param(self.ln_beta);
        let out = g.layer_norm(residual, gamma, beta)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Attention pooling `αᵀX` with `α = softmax(X·w)`.
#[derive(Debug, Clone)]
pub struct PoolingParams {
    /// `dim × 1` trainable vector.
    pub w: ParamId,
    pub dim: usize,
}

impl PoolingParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.register(name, group, init_normal(rng, dim, 1, 0.02))?;
        Ok(Self { w, dim })
    }
}

/// Returns the pooled `1 × d` row and the `1 × n` weights.
pub fn attention_pool(g: &mut Graph<'_>, x: Var, p: &PoolingParams) -> Result<(Var, Var)> {
    let (rows, cols) = g.shape(x);
    if rows == 0 {
        return Err(Error::invalid("attention pooling over an empty matrix"));
    }
    if cols != p.dim {
        return Err(Error::invalid(format!(
            "attention pooling expects {} columns, got {cols}",
            p.dim
        )));
    }
    let w = g.param(p.w);
    let logits = g.matmul(x, w)?;
    let logits = g.transpose(logits);
    let alpha = g.softmax_rows(logits)?;
    let pooled = g.matmul(alpha, x)?;
    Ok((pooled, alpha))
}

/// Fully connected layer `X·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{prefix}.weight"),
            group,
            init_xavier(rng, in_dim, out_dim),
        )?;
        let bias = store.register(&format!("{prefix}.bias"), group, Matrix::zeros(1, out_dim))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let cols = g.shape(x).1;
        if cols != self.in_dim {
            return Err(Error::invalid(format!(
                "linear layer expects {} input columns, got {cols}",
                self.in_dim
            )));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-12 && (s[1] - 1.0 / 3.0).abs() < 1e-12);
        for v in softmax(&[5.0, 5.0, 5.0]).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.707_106_78).abs() < 1e-8);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    fn block(dim: usize, heads: usize) -> (ParamStore, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let b = AttentionBlock::new(&mut s, "attn", dim, heads, ParamGroup::Head, &mut rng).unwrap();
        (s, b)
    }

    #[test]
    fn singleton_key_gives_unit_weights() {
        let (s, b) = block(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::inference(&s);
        let q = g.constant(init_normal(&mut rng, 5, 8, 1.0));
        let kv = g.constant(init_normal(&mut rng, 1, 8, 1.0));
        let out = b.forward_with_weights(&mut g, q, kv, kv).unwrap();
        for w in out.weights {
            assert!(g.value(w).data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn output_shape_follows_queries() {
        let (s, b) = block(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::inference(&s);
        let q = g.constant(init_normal(&mut rng, 36, 8, 1.0));
        let kv = g.constant(init_normal(&mut rng, 5, 8, 1.0));
        let out = b.forward(&mut g, q, kv, kv).unwrap();
        assert_eq!(g.shape(out), (36, 8));
        let bad = g.constant(Matrix::zeros(3, 7));
        assert!(b.forward(&mut g, q, bad, bad).is_err());
    }

    #[test]
    fn head_count_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        assert!(AttentionBlock::new(&mut s, "a", 8, 3, ParamGroup::Head, &mut rng).is_err());
    }

    #[test]
    fn pooling_with_zero_vector_is_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let p = PoolingParams::new(&mut s, "pool", 4, ParamGroup::Head, &mut rng).unwrap();
        *s.get_mut(p.w) = Matrix::zeros(4, 1);
        let x = init_normal(&mut rng, 6, 4, 1.0);
        let mut g = Graph::inference(&s);
        let xv = g.constant(x.clone());
        let (pooled, alpha) = attention_pool(&mut g, xv, &p).unwrap();
        let mean = x.column_mean();
        for (a, b) in g.value(pooled).data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g.value(alpha).sum() - 1.0).abs() < 1e-12);

        let one = g.constant(Matrix::row_vector(&[1.0, 2.0, 3.0, 4.0]));
        let (pooled, _) = attention_pool(&mut g, one, &p).unwrap();
        assert_eq!(g.value(pooled).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_identity_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "fc", 4, 4, ParamGroup::Head, &mut rng).unwrap();
        *s.get_mut(lin.weight) = Matrix::identity(4);
        let x = init_normal(&mut rng, 3, 4, 1.0);
        let mut g = Graph::inference(&s);
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "fc", 16, 8, ParamGroup::Head, &mut rng).unwrap();
        let mut g = Graph::inference(&s);
        let xv = g.constant(Matrix::zeros(100, 16));
        let y = lin.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(y), (100, 8));
        let bad = g.constant(Matrix::zeros(2, 3));
        assert!(lin.forward(&mut g, bad).is_err());
    }
}
