//! Self-labeled datasets: every transformation applied to every inlier.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stamps::{Stamp, StampDataset};
use crate::transforms::{TransformSet, TransformSpec, Transformer};

use super::network::Tensor;

/// The pairs `(T_i(x), i)` for all stamps `x` and catalog positions `i`,
/// ordered sample-major: entry `n * k + i` is transformation `i` of stamp `n`.
///
/// Transformed stamps are produced on demand rather than stored, so a
/// 2000-stamp set over a 72-entry catalog costs the memory of 2000 stamps.
#[derive(Clone, Debug)]
pub struct SelfLabeledDataset<T> {
    stamps: Vec<Stamp<T>>,
    specs: Vec<TransformSpec>,
    transformer: Transformer<T>,
    shape: (usize, usize, usize),
}

/// Builds the self-labeled dataset of `d` under catalog `t`.
pub fn build_self_labeled<T: Scalar>(d: &StampDataset<T>, t: &TransformSet) -> Result<SelfLabeledDataset<T>> {
    SelfLabeledDataset::from_specs(d, t.specs())
}

impl<T: Scalar> SelfLabeledDataset<T> {
    /// Like [`build_self_labeled`] but over an arbitrary spec list (used for
    /// pairwise discriminators, whose two specs need not include the identity).
    pub fn from_specs(d: &StampDataset<T>, specs: &[TransformSpec]) -> Result<Self> {
        Self::with_transformer(d, specs, Transformer::default())
    }

    pub fn with_transformer(d: &StampDataset<T>, specs: &[TransformSpec], transformer: Transformer<T>) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("self-labeled dataset needs at least one stamp".into()));
        }
        if specs.is_empty() {
            return Err(Error::Empty(
                "self-labeled dataset needs at least one transformation".into(),
            ));
        }
        if let Some(labels) = &d.labels {
            if let Some(pos) = labels.iter().position(|l| !l.is_inlier()) {
                return Err(Error::InvalidConfig(format!(
                    "self-labeled datasets are built from inliers only; stamp {pos} is an outlier"
                )));
            }
        }
        d.validate()?;
        let shape = d.stamps[0].shape();
        // surface shape/shift errors now instead of mid-training
        for spec in specs {
            transformer.apply(spec, &d.stamps[0])?;
        }
        Ok(SelfLabeledDataset {
            stamps: d.stamps.clone(),
            specs: specs.to_vec(),
            transformer,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.stamps.len() * self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.specs.len()
    }

    pub fn n_stamps(&self) -> usize {
        self.stamps.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn specs(&self) -> &[TransformSpec] {
        &self.specs
    }

    pub fn label(&self, idx: usize) -> usize {
        idx % self.specs.len()
    }

    /// The transformed stamp and its label at position `idx`.
    pub fn get(&self, idx: usize) -> Result<(Stamp<T>, usize)> {
        let k = self.specs.len();
        let stamp = self.transformer.apply(&self.specs[idx % k], &self.stamps[idx / k])?;
        Ok((stamp, idx % k))
    }

    /// Channel-major batch tensor and labels for the given positions.
    pub(crate) fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let (c, h, w) = self.shape;
        let n = indices.len();
        let mut x = Tensor::zeros(c, n, h, w);
        let mut labels = Vec::with_capacity(n);
        for (slot, &idx) in indices.iter().enumerate() {
            let (stamp, label) = self.get(idx)?;
            write_sample(&mut x, slot, &stamp);
            labels.push(label);
        }
        Ok((x, labels))
    }
}

pub(crate) fn write_sample<T: Scalar>(x: &mut Tensor<T>, slot: usize, stamp: &Stamp<T>) {
    let plane = x.h * x.w;
    for ch in 0..x.c {
        let dst = (ch * x.n + slot) * plane;
        x.data[dst..dst + plane].copy_from_slice(stamp.channel(ch));
    }
}
