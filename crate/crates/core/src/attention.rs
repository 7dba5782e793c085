//! Scaled dot-product attention and the multi-head block.
//!
//! No causal mask is applied: the decoder consumes a fixed input and emits
//! the whole horizon in one pass.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
    /// Per-head query/key width.
    pub d_k: usize,
    /// Per-head value width.
    pub d_v: usize,
}

impl AttentionConfig {
    /// `d_k = D / H` (H must divide D) and `d_v = D`.
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 {
            return Err(Error::Config("n_heads and d_model must be >= 1".into()));
        }
        if !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "default d_k = d_model / n_heads needs n_heads ({n_heads}) to divide d_model ({d_model})"
            )));
        }
        Ok(Self {
            n_heads,
            d_model,
            d_k: d_model / n_heads,
            d_v: d_model,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config(format!("invalid attention config {self:?}")));
        }
        Ok(())
    }
}

/// Parameter names for one multi-head block: `H` query/key/value projections
/// and the output projection `W_O` of shape `(H·d_v) × D`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub cfg: AttentionConfig,
    pub w_q: Vec<String>,
    pub w_k: Vec<String>,
    pub w_v: Vec<String>,
    pub w_o: String,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let b_in = 1.0 / (d as f64).sqrt();
        let mut w_q = Vec::with_capacity(cfg.n_heads);
        let mut w_k = Vec::with_capacity(cfg.n_heads);
        let mut w_v = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            for (names, tag, width) in [
                (&mut w_q, "w_q", cfg.d_k),
                (&mut w_k, "w_k", cfg.d_k),
                (&mut w_v, "w_v", cfg.d_v),
            ] {
                let name = format!("{prefix}.{tag}.{h}");
                store.insert(&name, Tensor::uniform(&[d, width], -b_in, b_in, rng))?;
                names.push(name);
            }
        }
        let concat = cfg.n_heads * cfg.d_v;
        let b_out = 1.0 / (concat as f64).sqrt();
        let w_o = format!("{prefix}.w_o");
        store.insert(&w_o, Tensor::uniform(&[concat, d], -b_out, b_out, rng))?;
        Ok(Self {
            cfg,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .map(String::as_str)
            .chain(std::iter::once(self.w_o.as_str()))
    }
}

/// `softmax(Q Kᵀ / √d_k) V` over the last two axes, returning the output
/// and the attention weights. Leading axes are batch axes.
pub fn scaled_dot_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    dropout: f64,
    rng: Option<&mut Rng>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() < 2 || ks.len() != qs.len() || vs.len() != qs.len() {
        return Err(Error::dim(format!(
            "attention rank mismatch: Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    let r = qs.len();
    if qs[r - 1] != ks[r - 1] {
        return Err(Error::dim(format!(
            "query width {} differs from key width {} (Q {qs:?}, K {ks:?})",
            qs[r - 1],
            ks[r - 1]
        )));
    }
    if ks[r - 2] != vs[r - 2] {
        return Err(Error::dim(format!(
            "key rows {} differ from value rows {} (K {ks:?}, V {vs:?})",
            ks[r - 2],
            vs[r - 2]
        )));
    }
    let d_k = qs[r - 1] as f64;
    let weights = q.matmul(&k.transpose()?)?.scale(1.0 / d_k.sqrt()).softmax()?;
    let dropped = weights.dropout(dropout, rng)?;
    Ok((dropped.matmul(&v)?, weights))
}

/// Multi-head attention with queries from `x_q` (`[..., Zq, D]`) and keys
/// and values from `x_kv` (`[..., Zk, D]`). Also returns each head's
/// attention weights.
pub fn multi_head_attention_with_weights<'g>(
    graph: &'g Graph,
    store: &ParameterStore,
    params: &AttentionParams,
    x_q: Var<'g>,
    x_kv: Var<'g>,
    dropout: f64,
    mut rng: Option<&mut Rng>,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let d = params.cfg.d_model;
    for (what, s) in [("query input", x_q.shape()), ("key/value input", x_kv.shape())] {
        if s.last() != Some(&d) {
            return Err(Error::dim(format!("{what} has shape {s:?}, expected width {d}")));
        }
    }
    let mut heads = Vec::with_capacity(params.cfg.n_heads);
    let mut all_weights = Vec::with_capacity(params.cfg.n_heads);
    for h in 0..params.cfg.n_heads {
        let q = x_q.matmul(&graph.param(store, &params.w_q[h])?)?;
        let k = x_kv.matmul(&graph.param(store, &params.w_k[h])?)?;
        let v = x_kv.matmul(&graph.param(store, &params.w_v[h])?)?;
        let (out, weights) = scaled_dot_attention(q, k, v, dropout, rng.as_deref_mut())?;
        heads.push(out);
        all_weights.push(weights);
    }
    let axis = x_q.shape().len() - 1;
    let joined = Var::concat(&heads, axis)?;
    let out = joined.matmul(&graph.param(store, &params.w_o)?)?;
    Ok((out, all_weights))
}

/// Multi-head attention; self-attention is `x_kv == x_q`.
pub fn multi_head_attention<'g>(
    graph: &'g Graph,
    store: &ParameterStore,
    params: &AttentionParams,
    x_q: Var<'g>,
    x_kv: Var<'g>,
    dropout: f64,
    rng: Option<&mut Rng>,
) -> Result<Var<'g>> {
    multi_head_attention_with_weights(graph, store, params, x_q, x_kv, dropout, rng).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn default_widths() {
        let c = AttentionConfig::new(512, 8).unwrap();
        assert_eq!((c.d_k, c.d_v), (64, 512));
        assert!(AttentionConfig::new(10, 3).is_err());
    }

    #[test]
    fn single_key_returns_its_value() {
        let g = Graph::new();
        let q = g.constant(mat(3, 2, &[1.0, -4.0, 0.3, 7.0, 2.0, 2.0]));
        let k = g.constant(mat(1, 2, &[0.5, 0.25]));
        let v = g.constant(mat(1, 3, &[9.0, -1.0, 2.5]));
        let (out, _) = scaled_dot_attention(q, k, v, 0.0, None).unwrap();
        for row in out.tensor().data().chunks(3) {
            assert_eq!(row, &[9.0, -1.0, 2.5]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let g = Graph::new();
        let q = g.constant(mat(2, 2, &[3.0, 1.0, -2.0, 0.5]));
        let k = g.constant(mat(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let v = g.constant(mat(3, 2, &[1.0, 10.0, 2.0, 20.0, 6.0, 60.0]));
        let (out, w) = scaled_dot_attention(q, k, v, 0.0, None).unwrap();
        for x in w.tensor().data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // Column means: 3, 30.
        for row in out.tensor().data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_is_uniform() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 2]));
        let k = g.constant(mat(2, 2, &[5.0, -3.0, 0.1, 9.0]));
        let v = g.constant(mat(2, 1, &[4.0, 8.0]));
        let (out, _) = scaled_dot_attention(q, k, v, 0.0, None).unwrap();
        assert_eq!(out.tensor().data(), &[6.0, 6.0]);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 2]));
        let v = g.constant(Tensor::zeros(&[2, 2]));
        assert!(scaled_dot_attention(q, k, v, 0.0, None).is_err());
        let k = g.constant(Tensor::zeros(&[2, 3]));
        let v = g.constant(Tensor::zeros(&[3, 2]));
        assert!(scaled_dot_attention(q, k, v, 0.0, None).is_err());
    }

    #[test]
    fn identity_values_with_zero_logits_give_column_mean() {
        let cfg = AttentionConfig {
            n_heads: 1,
            d_model: 2,
            d_k: 2,
            d_v: 2,
        };
        let mut store = ParameterStore::new(0);
        let p = AttentionParams::init(&mut store, "a", cfg, &mut Rng::new(0)).unwrap();
        store.get_mut(&p.w_q[0]).unwrap().data_mut().fill(0.0);
        store.get_mut(&p.w_k[0]).unwrap().data_mut().fill(0.0);
        store
            .get_mut(&p.w_v[0])
            .unwrap()
            .data_mut()
            .copy_from_slice(Tensor::eye(2).data());
        store
            .get_mut(&p.w_o)
            .unwrap()
            .data_mut()
            .copy_from_slice(Tensor::eye(2).data());
        let g = Graph::new();
        let x = g.constant(mat(2, 2, &[1.0, 4.0, 3.0, -2.0]));
        let out = multi_head_attention(&g, &store, &p, x, x, 0.0, None).unwrap();
        assert_eq!(out.tensor().data(), &[2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn table_two_shape() {
        let cfg = AttentionConfig::new(512, 8).unwrap();
        let mut store = ParameterStore::new(0);
        let p = AttentionParams::init(&mut store, "a", cfg, &mut Rng::new(0)).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::uniform(&[12, 512], -1.0, 1.0, &mut Rng::new(1)));
        let out = multi_head_attention(&g, &store, &p, x, x, 0.0, None).unwrap();
        assert_eq!(out.shape(), vec![12, 512]);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let mut store = ParameterStore::new(0);
        let p = AttentionParams::init(&mut store, "a", cfg, &mut Rng::new(0)).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let g = Graph::new();
        let x = g.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut Rng::new(1)));
        let out = multi_head_attention(&g, &store, &p, x, x, 0.0, None).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn params_hold_h_triples() {
        let cfg = AttentionConfig::new(8, 4).unwrap();
        let mut store = ParameterStore::new(0);
        let p = AttentionParams::init(&mut store, "a", cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(p.w_q.len(), 4);
        assert_eq!(p.names().count(), 13);
        assert_eq!(store.get(&p.w_o).unwrap().shape(), &[4 * 8, 8]);
    }
}
