//! Layered parameters of a dense classifier `f = c ∘ g`.
//!
//! Layers `[0, split_index)` form the feature extractor `g`; the remaining
//! layers form the classifier head `c`. Every layer except the last applies
//! an optional normalization followed by ReLU.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const NORM_MOMENTUM: f64 = 0.9;
pub const NORM_EPSILON: f64 = 1e-5;

const MAGIC: &[u8; 4] = b"MFED";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(out_dim, in_dim)`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Batch-normalization state for one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Norm {
    pub fn identity(width: usize) -> Self {
        Self {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            scale: vec![1.0; width],
            shift: vec![0.0; width],
        }
    }

    fn width(&self) -> usize {
        self.scale.len()
    }

    fn value_count(&self) -> usize {
        4 * self.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Dense>,
    norms: Vec<Option<Norm>>,
    split_index: usize,
}

impl ModelParams {
    /// Assembles a model, checking that the layers compose.
    pub fn new(layers: Vec<Dense>, norms: Vec<Option<Norm>>, split_index: usize) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Shape("a model needs at least two layers".into()));
        }
        if norms.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} norm slots for {} layers",
                norms.len(),
                layers.len()
            )));
        }
        if split_index == 0 || split_index >= layers.len() {
            return Err(Error::Shape(format!(
                "split index {split_index} must lie in 1..{}",
                layers.len()
            )));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() || layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::Shape(format!("layer {k} has inconsistent bias or empty weights")));
            }
            if k + 1 < layers.len() && layers[k + 1].in_dim() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    layer.out_dim(),
                    k + 1,
                    layers[k + 1].in_dim()
                )));
            }
        }
        for (k, norm) in norms.iter().enumerate() {
            let Some(norm) = norm else { continue };
            if k + 1 == layers.len() {
                return Err(Error::Shape("the output layer cannot be normalized".into()));
            }
            let w = layers[k].out_dim();
            if norm.running_mean.len() != w
                || norm.running_var.len() != w
                || norm.scale.len() != w
                || norm.shift.len() != w
            {
                return Err(Error::Shape(format!("norm layer {k} does not match width {w}")));
            }
            if norm.running_var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Numeric(format!("norm layer {k} has non-positive running variance")));
            }
        }
        Ok(Self {
            layers,
            norms,
            split_index,
        })
    }

    /// A multilayer perceptron `input → hidden… → classes` with ReLU between
    /// layers and Glorot-uniform weights. The extractor `g` is every hidden
    /// block; the head `c` is the final linear layer.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        normalize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("an MLP needs at least one hidden layer".into()));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(classes);
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("layer widths must be positive, got {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut norms = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| Error::Config(format!("bad init range: {e}")))?;
            let weights: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            layers.push(Dense {
                weights: Matrix::from_vec(fan_out, fan_in, weights)?,
                bias: vec![0.0; fan_out],
            });
            let hidden_layer = k + 1 < dims.len() - 1;
            norms.push((normalize && hidden_layer).then(|| Norm::identity(fan_out)));
        }
        let split = layers.len() - 1;
        Self::new(layers, norms, split)
    }

    #[inline]
    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    #[inline]
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    #[inline]
    pub fn norms(&self) -> &[Option<Norm>] {
        &self.norms
    }

    #[inline]
    pub fn norms_mut(&mut self) -> &mut [Option<Norm>] {
        &mut self.norms
    }

    #[inline]
    pub fn split_index(&self) -> usize {
        self.split_index
    }

    #[inline]
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// True when both models have the same layer shapes, norm placement and split.
    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.split_index == other.split_index
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape())
            && self
                .norms
                .iter()
                .zip(&other.norms)
                .all(|(a, b)| a.is_some() == b.is_some())
    }

    pub(crate) fn ensure_same_architecture(&self, other: &ModelParams) -> Result<()> {
        if self.same_architecture(other) {
            Ok(())
        } else {
            Err(Error::Shape("models have different architectures".into()))
        }
    }

    /// Trained parameters in declaration order: per layer weights then bias,
    /// followed by that layer's norm scale and shift.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
            if let Some(norm) = norm {
                out.extend_from_slice(&norm.scale);
                out.extend_from_slice(&norm.shift);
            }
        }
        out
    }

    pub fn set_trainable_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.trainable_count();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} trainable values, got {}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for (layer, norm) in self.layers.iter_mut().zip(&mut self.norms) {
            for w in layer.weights.data_mut() {
                *w = it.next().unwrap_or_default();
            }
            for b in &mut layer.bias {
                *b = it.next().unwrap_or_default();
            }
            if let Some(norm) = norm {
                for v in norm.scale.iter_mut().chain(norm.shift.iter_mut()) {
                    *v = it.next().unwrap_or_default();
                }
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.norms)
            .map(|(l, n)| {
                l.weights.data().len() + l.bias.len() + n.as_ref().map_or(0, |n| 2 * n.width())
            })
            .sum()
    }

    /// Serializes to the versioned `MFED` layout: header, layer dims, then
    /// little-endian `f64` values in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.split_index as u32).to_le_bytes());
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            out.push(u8::from(norm.is_some()));
        }
        let mut put = |values: &[f64]| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            put(layer.weights.data());
            put(&layer.bias);
            if let Some(norm) = norm {
                put(&norm.running_mean);
                put(&norm.running_var);
                put(&norm.scale);
                put(&norm.shift);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(4)? != MAGIC {
            return Err(Error::Format("missing MFED magic".into()));
        }
        let version = cursor.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let layer_count = cursor.u32()? as usize;
        let split_index = cursor.u32()? as usize;
        let mut dims = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let in_dim = cursor.u32()? as usize;
            let out_dim = cursor.u32()? as usize;
            let has_norm = match cursor.take(1)?[0] {
                0 => false,
                1 => true,
                other => return Err(Error::Format(format!("bad norm flag {other}"))),
            };
            dims.push((in_dim, out_dim, has_norm));
        }
        let mut layers = Vec::with_capacity(layer_count);
        let mut norms = Vec::with_capacity(layer_count);
        for (in_dim, out_dim, has_norm) in dims {
            let weights = Matrix::from_vec(out_dim, in_dim, cursor.f64s(in_dim * out_dim)?)?;
            let bias = cursor.f64s(out_dim)?;
            layers.push(Dense { weights, bias });
            norms.push(if has_norm {
                Some(Norm {
                    running_mean: cursor.f64s(out_dim)?,
                    running_var: cursor.f64s(out_dim)?,
                    scale: cursor.f64s(out_dim)?,
                    shift: cursor.f64s(out_dim)?,
                })
            } else {
                None
            });
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after model",
                bytes.len() - cursor.pos
            )));
        }
        Self::new(layers, norms, split_index)
    }

    fn header_len(&self) -> usize {
        4 + 4 + 4 + 4 + self.layers.len() * 9
    }

    /// Byte length of [`ModelParams::to_bytes`].
    pub fn serialized_len(&self) -> usize {
        let values: usize = self
            .layers
            .iter()
            .zip(&self.norms)
            .map(|(l, n)| l.weights.data().len() + l.bias.len() + n.as_ref().map_or(0, Norm::value_count))
            .sum();
        self.header_len() + 8 * values
    }

    /// Bytes a transmission of this model costs. Without `include_norm` the
    /// normalization values stay local and are not counted.
    pub fn payload_len(&self, include_norm: bool) -> usize {
        if include_norm {
            return self.serialized_len();
        }
        let norm_values: usize = self.norms.iter().flatten().map(Norm::value_count).sum();
        self.serialized_len() - 8 * norm_values
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated payload at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

/// Replaces `dst`'s parameters with `src`'s. With `preserve_local_norm`, the
/// normalization statistics and affine parameters of `dst` are kept.
pub fn copy_model(src: &ModelParams, dst: &ModelParams, preserve_local_norm: bool) -> Result<ModelParams> {
    src.ensure_same_architecture(dst)?;
    let mut out = src.clone();
    if preserve_local_norm {
        out.norms = dst.norms.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::seeded_rng;

    fn small(seed: u64) -> ModelParams {
        ModelParams::mlp(3, &[4, 4], 2, true, &mut seeded_rng(seed)).unwrap()
    }

    #[test]
    fn mlp_shapes_compose() {
        let m = small(1);
        assert_eq!(m.layer_count(), 3);
        assert_eq!(m.split_index(), 2);
        assert!(m.norms()[0].is_some() && m.norms()[1].is_some() && m.norms()[2].is_none());
        let limit = (6.0f64 / 7.0).sqrt();
        assert!(m.layers()[0].weights.data().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn rejects_bad_split_and_dims() {
        let m = small(2);
        let layers = m.layers().to_vec();
        let norms = m.norms().to_vec();
        assert!(ModelParams::new(layers.clone(), norms.clone(), 0).is_err());
        assert!(ModelParams::new(layers.clone(), norms.clone(), 3).is_err());
        let mut broken = layers;
        broken.swap(0, 2);
        assert!(ModelParams::new(broken, norms, 1).is_err());
    }

    #[test]
    fn serialization_layout() {
        let m = small(3);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"MFED");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), m.serialized_len());
        let first_weight = m.layers()[0].weights.data()[0];
        let off = m.header_len();
        assert_eq!(bytes[off..off + 8], first_weight.to_le_bytes());
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), m);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn payload_excludes_norm_values() {
        let m = small(4);
        // Two norm layers of width 4, four vectors each.
        assert_eq!(m.payload_len(true) - m.payload_len(false), 2 * 4 * 4 * 8);
    }

    #[test]
    fn copy_full_and_preserving() {
        let src = small(5);
        let mut dst = small(6);
        dst.norms_mut()[0].as_mut().unwrap().running_mean[0] = 3.5;
        let full = copy_model(&src, &dst, false).unwrap();
        assert_eq!(full.to_bytes(), src.to_bytes());

        let kept = copy_model(&src, &dst, true).unwrap();
        assert_eq!(kept.norms(), dst.norms());
        assert_eq!(kept.layers(), src.layers());
    }

    #[test]
    fn copy_rejects_mismatch() {
        let src = small(7);
        let other = ModelParams::mlp(3, &[5, 4], 2, true, &mut seeded_rng(7)).unwrap();
        assert!(copy_model(&src, &other, false).is_err());
    }

    #[test]
    fn trainable_roundtrip() {
        let mut m = small(8);
        let v = m.trainable_params();
        assert_eq!(v.len(), m.trainable_count());
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        m.set_trainable_params(&doubled).unwrap();
        assert_eq!(m.trainable_params(), doubled);
    }
}
