//! Patching and patch embedding of a univariate series.
//!
//! A series of length `I` is extended by `stride` copies of its last value
//! and cut into `Z = (I - P) / S + 2` windows of length `P` taken every `S`
//! steps. Each window is projected to `D` features and offset by a learnable
//! positional row.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    /// Rows in the positional table.
    pub max_patches: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 || self.d_model == 0 {
            return Err(Error::Config(format!(
                "patch_len, stride and d_model must be >= 1 (got {}, {}, {})",
                self.patch_len, self.stride, self.d_model
            )));
        }
        if self.stride > self.patch_len {
            return Err(Error::Config(format!(
                "stride {} exceeds patch length {}; patches would leave gaps",
                self.stride, self.patch_len
            )));
        }
        Ok(())
    }
}

/// Number of patches for a series of `series_len` steps.
pub fn compute_patch_count(series_len: usize, cfg: &PatchConfig) -> Result<usize> {
    cfg.validate()?;
    if series_len < cfg.patch_len {
        return Err(Error::InputTooShort {
            len: series_len,
            required: cfg.patch_len,
        });
    }
    Ok((series_len - cfg.patch_len) / cfg.stride + 2)
}

/// Appends `pad_count` copies of the final element.
pub fn pad_series(x: &[f64], pad_count: usize) -> Result<Vec<f64>> {
    let &last = x
        .last()
        .ok_or_else(|| Error::Data("cannot pad an empty series".into()))?;
    let mut out = Vec::with_capacity(x.len() + pad_count);
    out.extend_from_slice(x);
    out.resize(x.len() + pad_count, last);
    Ok(out)
}

/// One patch per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub patch_len: usize,
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn row(&self, z: usize) -> &[f64] {
        &self.values[z * self.patch_len..(z + 1) * self.patch_len]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.patch_len], self.values.clone()).expect("grid shape")
    }
}

/// Pads with `stride` last-value copies, then extracts rows
/// `x[z*S .. z*S + P]` for every patch index `z`.
pub fn patch_series(x: &[f64], cfg: &PatchConfig) -> Result<PatchGrid> {
    let rows = compute_patch_count(x.len(), cfg)?;
    let padded = pad_series(x, cfg.stride)?;
    let mut values = Vec::with_capacity(rows * cfg.patch_len);
    for z in 0..rows {
        let start = z * cfg.stride;
        values.extend_from_slice(&padded[start..start + cfg.patch_len]);
    }
    Ok(PatchGrid {
        rows,
        patch_len: cfg.patch_len,
        values,
    })
}

/// Parameter names of the value projection (`P × D`) and positional table
/// (`max_patches × D`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingParams {
    pub w_val: String,
    pub pos: String,
}

impl EmbeddingParams {
    /// Registers both tensors: the projection uniform in `±1/√P`, the
    /// positional table uniform in `±0.02`.
    pub fn init(store: &mut ParameterStore, prefix: &str, cfg: &PatchConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (cfg.patch_len as f64).sqrt();
        let w_val = format!("{prefix}.w_val");
        let pos = format!("{prefix}.pos");
        store.insert(
            &w_val,
            Tensor::uniform(&[cfg.patch_len, cfg.d_model], -bound, bound, rng),
        )?;
        store.insert(
            &pos,
            Tensor::uniform(&[cfg.max_patches, cfg.d_model], -0.02, 0.02, rng),
        )?;
        Ok(Self { w_val, pos })
    }
}

/// Embeds a batch of series `[..., I]` into `[..., Z, D]`:
/// `patches · W_val + pos[0..Z]`.
pub fn patch_embed<'g>(
    graph: &'g Graph,
    store: &ParameterStore,
    params: &EmbeddingParams,
    cfg: &PatchConfig,
    x: Var<'g>,
) -> Result<Var<'g>> {
    let len = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("patch_embed needs at least a 1-D input"))?;
    let z = compute_patch_count(len, cfg)?;
    if z > cfg.max_patches {
        return Err(Error::Capacity {
            required: z,
            available: cfg.max_patches,
        });
    }
    let w_val = graph.param(store, &params.w_val)?;
    let pos = graph.param(store, &params.pos)?.narrow(0, 0, z)?;
    x.patch(cfg.patch_len, cfg.stride)?.matmul(&w_val)?.add(&pos)
}

/// Convenience wrapper for one series outside any training graph.
pub fn patch_embed_series(
    x: &[f64],
    store: &ParameterStore,
    params: &EmbeddingParams,
    cfg: &PatchConfig,
) -> Result<Tensor> {
    let g = Graph::new();
    let xv = g.constant(Tensor::vector(x));
    Ok(patch_embed(&g, store, params, cfg, xv)?.tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: usize, s: usize, d: usize, zmax: usize) -> PatchConfig {
        PatchConfig {
            patch_len: p,
            stride: s,
            d_model: d,
            max_patches: zmax,
        }
    }

    #[test]
    fn patch_counts() {
        assert_eq!(compute_patch_count(96, &cfg(16, 8, 1, 1)).unwrap(), 12);
        assert_eq!(compute_patch_count(336, &cfg(16, 8, 1, 1)).unwrap(), 42);
        assert_eq!(compute_patch_count(16, &cfg(16, 8, 1, 1)).unwrap(), 2);
        assert!(matches!(
            compute_patch_count(15, &cfg(16, 8, 1, 1)),
            Err(Error::InputTooShort {
                len: 15,
                required: 16
            })
        ));
        assert!(compute_patch_count(20, &cfg(4, 5, 1, 1)).is_err());
    }

    #[test]
    fn padding() {
        assert_eq!(
            pad_series(&[1.0, 2.0, 3.0], 2).unwrap(),
            vec![1.0, 2.0, 3.0, 3.0, 3.0]
        );
        assert_eq!(pad_series(&[1.0, 2.0], 0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pad_series(&[5.0], 3).unwrap(), vec![5.0; 4]);
        assert!(pad_series(&[], 1).is_err());
    }

    #[test]
    fn patch_rows_one_to_ten() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let grid = patch_series(&x, &cfg(4, 2, 1, 1)).unwrap();
        let expected: [[f64; 4]; 5] = [
            [1.0, 2.0, 3.0, 4.0],
            [3.0, 4.0, 5.0, 6.0],
            [5.0, 6.0, 7.0, 8.0],
            [7.0, 8.0, 9.0, 10.0],
            [9.0, 10.0, 10.0, 10.0],
        ];
        assert_eq!(grid.rows, 5);
        for (z, row) in expected.iter().enumerate() {
            assert_eq!(grid.row(z), row);
        }
    }

    #[test]
    fn series_of_patch_len_with_tiling_stride() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let grid = patch_series(&x, &cfg(4, 4, 1, 1)).unwrap();
        assert_eq!(grid.rows, 2);
        assert_eq!(grid.row(0), &x);
        assert_eq!(grid.row(1), &[4.0; 4]);
    }

    #[test]
    fn tiling_uses_each_input_once() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let grid = patch_series(&x, &cfg(3, 3, 1, 1)).unwrap();
        let mut seen = vec![0; x.len()];
        // Last row is pure padding.
        for z in 0..grid.rows - 1 {
            for &v in grid.row(z) {
                seen[v as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let c = cfg(16, 8, 4, 12);
        let mut store = ParameterStore::new(0);
        let params = EmbeddingParams::init(&mut store, "emb", &c, &mut Rng::new(0)).unwrap();
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let x: Vec<f64> = (0..96).map(|i| (i as f64).sin()).collect();
        let out = patch_embed_series(&x, &store, &params, &c).unwrap();
        assert_eq!(out.shape(), &[12, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_series_returns_positional_rows() {
        let c = cfg(16, 8, 4, 20);
        let mut store = ParameterStore::new(0);
        let params = EmbeddingParams::init(&mut store, "emb", &c, &mut Rng::new(5)).unwrap();
        let out = patch_embed_series(&[0.0; 96], &store, &params, &c).unwrap();
        let pos = store.get(&params.pos).unwrap();
        assert_eq!(out.data(), &pos.data()[..12 * 4]);
    }

    #[test]
    fn table_two_shape() {
        let c = cfg(16, 8, 512, 18);
        let mut store = ParameterStore::new(0);
        let params = EmbeddingParams::init(&mut store, "emb", &c, &mut Rng::new(1)).unwrap();
        let out = patch_embed_series(&[0.5; 96], &store, &params, &c).unwrap();
        assert_eq!(out.shape(), &[12, 512]);
    }

    #[test]
    fn capacity_error_names_counts() {
        let c = cfg(16, 8, 4, 10);
        let mut store = ParameterStore::new(0);
        let params = EmbeddingParams::init(&mut store, "emb", &c, &mut Rng::new(1)).unwrap();
        let err = patch_embed_series(&[0.0; 96], &store, &params, &c).unwrap_err();
        assert!(matches!(
            err,
            Error::Capacity {
                required: 12,
                available: 10
            }
        ));
    }

    #[test]
    fn embedding_is_affine_in_series() {
        let c = cfg(4, 2, 3, 8);
        let mut store = ParameterStore::new(0);
        let params = EmbeddingParams::init(&mut store, "emb", &c, &mut Rng::new(9)).unwrap();
        let mut rng = Rng::new(10);
        let x: Vec<f64> = (0..11).map(|_| rng.normal()).collect();
        let a = 2.75;
        let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
        let e0 = patch_embed_series(&[0.0; 11], &store, &params, &c).unwrap();
        let ex = patch_embed_series(&x, &store, &params, &c).unwrap();
        let eax = patch_embed_series(&ax, &store, &params, &c).unwrap();
        for i in 0..e0.numel() {
            let lhs = eax.data()[i] - e0.data()[i];
            let rhs = a * (ex.data()[i] - e0.data()[i]);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
