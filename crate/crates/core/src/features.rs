//! Frozen-encoder image features, computed once per sample and shared by
//! tuning and evaluation.

use std::sync::OnceLock;

use crate::data::Dataset;
use crate::encoders::{DualEncoder, PatchGrid};
use crate::error::{Error, Result};
use crate::masking::MaskResult;
use crate::numerics::{Tensor, NORM_EPS};

/// Row-wise L2 normalization with the same floor as the graph op.
pub fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        data.extend(row.iter().map(|v| v / n));
    }
    Tensor::matrix(r, c, data)
}

#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub grid: PatchGrid,
    /// Normalized full-image embedding `[1, d]`.
    pub full: Tensor,
    /// Tokens of the full pass, summary token included.
    pub full_tokens: usize,
}

/// Conditioning-path output for one (possibly masked) pass.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// Normalized `[1, d]`.
    pub embedding: Tensor,
    pub tokens_processed: usize,
    pub patch_tokens: usize,
}

/// Lazily filled per-sample features of one dataset under one frozen encoder.
pub struct FeatureCache<'a> {
    pub encoder: &'a DualEncoder,
    pub dataset: &'a Dataset,
    cells: Vec<OnceLock<EncodedSample>>,
}

impl<'a> FeatureCache<'a> {
    pub fn new(encoder: &'a DualEncoder, dataset: &'a Dataset) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::Contract("features require a frozen encoder".into()));
        }
        Ok(Self {
            encoder,
            dataset,
            cells: (0..dataset.samples.len())
                .map(|_| OnceLock::new())
                .collect(),
        })
    }

    pub fn get(&self, id: usize) -> Result<&EncodedSample> {
        let cell = self
            .cells
            .get(id)
            .ok_or_else(|| Error::input(format!("no sample with id {id}")))?;
        if let Some(s) = cell.get() {
            return Ok(s);
        }
        let sample = self.dataset.sample(id)?;
        let grid = self.encoder.patchify(&sample.image)?;
        let all: Vec<usize> = (0..grid.len()).collect();
        let out = self.encoder.vision_encode(&grid, &all)?;
        let encoded = EncodedSample {
            full: normalize_rows(&out.embedding)?,
            full_tokens: out.tokens_processed,
            grid,
        };
        Ok(cell.get_or_init(|| encoded))
    }

    /// Full-image conditioning, reusing the cached pass.
    pub fn full_conditioning(&self, id: usize) -> Result<Conditioning> {
        let s = self.get(id)?;
        Ok(Conditioning {
            embedding: s.full.clone(),
            tokens_processed: s.full_tokens,
            patch_tokens: s.grid.len(),
        })
    }

    /// Conditioning on the visible patches of `mask`.
    pub fn masked_conditioning(&self, id: usize, mask: &MaskResult) -> Result<Conditioning> {
        let s = self.get(id)?;
        if mask.n_patches != s.grid.len() {
            return Err(Error::dim(format!(
                "mask over {} patches for a {}-patch grid",
                mask.n_patches,
                s.grid.len()
            )));
        }
        let out = self.encoder.vision_encode(&s.grid, &mask.visible)?;
        Ok(Conditioning {
            embedding: normalize_rows(&out.embedding)?,
            tokens_processed: out.tokens_processed,
            patch_tokens: out.patch_tokens,
        })
    }
}
