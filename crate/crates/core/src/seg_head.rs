//! Per-pixel embedding predictor and the box-distillation branch.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedStreams;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;

/// Half-open pixel rectangle `[row0, row1) × [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Box {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Box { row0, col0, row1, col1 }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.row0 < self.row1 && self.row1 <= height && self.col0 < self.col1 && self.col1 <= width {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?} for a {height}x{width} map")))
        }
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }
}

/// H×W×C predicted embeddings living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl EmbeddingMap {
    /// Wraps an existing H×W×C tape value.
    pub fn from_var(tape: &Tape, var: Var) -> Result<Self> {
        match *tape.shape(var) {
            [height, width, channels] => Ok(EmbeddingMap { var, height, width, channels }),
            ref s => Err(Error::shape("embedding_map", format!("expected H×W×C, got {s:?}"))),
        }
    }

    pub fn pixel<'t>(&self, tape: &'t Tape, row: usize, col: usize) -> &'t [f64] {
        let off = (row * self.width + col) * self.channels;
        &tape.value(self.var)[off..off + self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    /// C×C 1×1 convolution of the distillation branch.
    pub proj: Tensor,
    /// Temperature is `exp(log_tau)`, so it stays positive.
    pub log_tau: Tensor,
}

/// Model parameters copied onto one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub(crate) layers: Vec<(Var, Var)>,
    pub proj: Var,
    pub log_tau: Var,
    pub tau: Var,
}

impl SegModel {
    /// Glorot-uniform weights, zero biases, identity projection.
    pub fn init(features: usize, hidden: &[usize], channels: usize, seed: u64) -> Result<Self> {
        if features == 0 || channels == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: F={features}, hidden={hidden:?}, C={channels}"
            )));
        }
        let mut widths = vec![features];
        widths.extend_from_slice(hidden);
        widths.push(channels);

        let mut rng = SeedStreams::new(seed).rng("init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
            weights.push(Tensor::new(&[fan_in, fan_out], w)?.with_grad());
            biases.push(Tensor::zeros(&[fan_out]).with_grad());
        }
        let mut eye = vec![0.0; channels * channels];
        (0..channels).for_each(|i| eye[i * channels + i] = 1.0);
        Ok(SegModel {
            widths,
            weights,
            biases,
            proj: Tensor::new(&[channels, channels], eye)?.with_grad(),
            log_tau: Tensor::scalar(DEFAULT_TAU.ln()).with_grad(),
        })
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        self.log_tau.data_mut()[0] = tau.ln();
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.widths.last().expect("widths has at least two entries")
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    /// Parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("layer{i}.weight"), w));
            out.push((format!("layer{i}.bias"), b));
        }
        out.push(("proj".into(), &self.proj));
        out.push(("log_tau".into(), &self.log_tau));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("layer{i}.weight"), w));
            out.push((format!("layer{i}.bias"), b));
        }
        out.push(("proj".into(), &mut self.proj));
        out.push(("log_tau".into(), &mut self.log_tau));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (tape.leaf(w), tape.leaf(b)))
            .collect();
        let proj = tape.leaf(&self.proj);
        let log_tau = tape.leaf(&self.log_tau);
        let tau = tape.exp(log_tau);
        BoundModel { layers, proj, log_tau, tau }
    }

    /// Adds the tape's leaf gradients into the parameter grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundModel) {
        let mut vars: Vec<Var> = bound.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        vars.push(bound.proj);
        vars.push(bound.log_tau);
        for ((_, param), var) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(var) {
                param.accumulate_grad(g);
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, t) in self.params() {
            let file = format!("{name}.tnsr");
            t.save(dir.join(&file))?;
            entries.push(CheckpointEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            widths: self.widths.clone(),
            params: entries,
        };
        let path = dir.join("checkpoint.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("checkpoint.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.widths.len() < 2 {
            return Err(Error::Format("checkpoint width list needs at least two entries".into()));
        }
        let c = *manifest.widths.last().expect("len checked");
        let mut model = SegModel::init(manifest.widths[0], &manifest.widths[1..manifest.widths.len() - 1], c, 0)?;
        let mut by_name: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
        for e in &manifest.params {
            let t = Tensor::load(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("parameter `{}` shape {:?} != manifest {:?}", e.name, t.shape(), e.shape)));
            }
            by_name.insert(e.name.clone(), t);
        }
        for (name, param) in model.params_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter `{name}`")))?;
            if t.shape() != param.shape() {
                return Err(Error::Format(format!("parameter `{name}` has shape {:?}, expected {:?}", t.shape(), param.shape())));
            }
            param.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    widths: Vec<usize>,
    params: Vec<CheckpointEntry>,
}

/// Applies the per-pixel affine/relu stack to an H×W×F feature grid.
pub fn forward(tape: &mut Tape, bound: &BoundModel, features: Var) -> Result<EmbeddingMap> {
    let (h, w, f) = match *tape.shape(features) {
        [h, w, f] => (h, w, f),
        ref s => return Err(Error::shape("forward", format!("features must be H×W×F, got {s:?}"))),
    };
    let expected = tape.shape(bound.layers[0].0)[0];
    if f != expected {
        return Err(Error::shape("forward", format!("feature dim {f}, model expects {expected}")));
    }
    let mut x = tape.reshape(features, &[h * w, f])?;
    let last = bound.layers.len() - 1;
    for (i, &(wv, bv)) in bound.layers.iter().enumerate() {
        x = tape.matmul(x, wv)?;
        x = tape.add_bias(x, bv)?;
        if i != last {
            x = tape.relu(x);
        }
    }
    let c = tape.shape(x)[1];
    let var = tape.reshape(x, &[h, w, c])?;
    Ok(EmbeddingMap { var, height: h, width: w, channels: c })
}

/// Crops the box, applies the 1×1 projection per pixel, then averages over
/// the crop. Returns a length-C vector.
pub fn roi_embed(tape: &mut Tape, bound: &BoundModel, map: &EmbeddingMap, b: &Box) -> Result<Var> {
    b.validate(map.height, map.width)?;
    let crop = tape.slice(map.var, &[b.row0..b.row1, b.col0..b.col1, 0..map.channels])?;
    let flat = tape.reshape(crop, &[b.area(), map.channels])?;
    let projected = tape.matmul(flat, bound.proj)?;
    tape.mean(projected, Some(0))
}

/// Convenience: forward on a frozen model, returning values only.
pub fn predict(model: &SegModel, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut frozen = features.clone();
    frozen.requires_grad = false;
    let x = tape.leaf(&frozen);
    let map = forward(&mut tape, &bound, x)?;
    Ok(tape.to_tensor(map.var))
}

/// Random H×W×F tensor used by the tests and the gradient suite.
pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use approx::assert_abs_diff_eq;

    #[test]
    fn init_is_deterministic() {
        let a = SegModel::init(8, &[16], 32, 3).unwrap();
        let b = SegModel::init(8, &[16], 32, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, SegModel::init(8, &[16], 32, 4).unwrap());
    }

    #[test]
    fn parameter_count() {
        let m = SegModel::init(8, &[16], 32, 0).unwrap();
        assert_eq!(m.param_count(), 8 * 16 + 16 + 16 * 32 + 32 + 32 * 32 + 1);
        let direct = SegModel::init(4, &[], 3, 0).unwrap();
        assert_eq!(direct.widths(), &[4, 3]);
        assert_eq!(direct.param_count(), 4 * 3 + 3 + 9 + 1);
    }

    #[test]
    fn glorot_bounds() {
        let m = SegModel::init(8, &[16], 32, 11).unwrap();
        let s = (6.0f64 / 24.0).sqrt();
        assert!(m.weights[0].data().iter().all(|w| w.abs() < s));
        assert!(m.biases.iter().all(|b| b.data().iter().all(|&x| x == 0.0)));
        assert_abs_diff_eq!(m.tau(), DEFAULT_TAU, epsilon = 1e-15);
    }

    #[test]
    fn zero_weights_emit_last_bias() {
        let mut m = SegModel::init(3, &[4], 2, 0).unwrap();
        m.params_mut().into_iter().filter(|(n, _)| n.ends_with("weight")).for_each(|(_, t)| t.data_mut().fill(0.0));
        m.bias_mut(1).data_mut().copy_from_slice(&[0.5, -1.5]);
        let feats = random_tensor(&mut SeedStreams::new(1).rng("t"), &[2, 3, 3], 1.0);
        let out = predict(&m, &feats).unwrap();
        for px in out.data().chunks(2) {
            assert_eq!(px, &[0.5, -1.5]);
        }
    }

    #[test]
    fn single_pixel_grid_matches_manual_stack() {
        let m = SegModel::init(3, &[5], 2, 9).unwrap();
        let f = [0.2, -0.4, 1.1];
        let out = predict(&m, &Tensor::new(&[1, 1, 3], f.to_vec()).unwrap()).unwrap();
        let (w0, w1) = (m.weights[0].data(), m.weights[1].data());
        let hidden: Vec<f64> = (0..5).map(|j| (0..3).map(|i| f[i] * w0[i * 5 + j]).sum::<f64>().max(0.0)).collect();
        let expect: Vec<f64> = (0..2).map(|j| (0..5).map(|i| hidden[i] * w1[i * 2 + j]).sum()).collect();
        assert_abs_diff_eq!(out.data()[0], expect[0], epsilon = 1e-14);
        assert_abs_diff_eq!(out.data()[1], expect[1], epsilon = 1e-14);
    }

    #[test]
    fn forward_is_per_pixel() {
        let m = SegModel::init(4, &[8], 3, 2).unwrap();
        let mut rng = SeedStreams::new(5).rng("t");
        let feats = random_tensor(&mut rng, &[3, 4, 4], 1.0);
        let base = predict(&m, &feats).unwrap();
        let mut bumped = feats.clone();
        let (r, c) = (1, 2);
        bumped.data_mut()[(r * 4 + c) * 4] += 0.7;
        let out = predict(&m, &bumped).unwrap();
        for px in 0..12 {
            let same = base.data()[px * 3..px * 3 + 3] == out.data()[px * 3..px * 3 + 3];
            assert_eq!(same, px != r * 4 + c, "pixel {px}");
        }
    }

    #[test]
    fn forward_commutes_with_pixel_permutation() {
        let m = SegModel::init(4, &[8], 3, 2).unwrap();
        let mut rng = SeedStreams::new(6).rng("t");
        let feats = random_tensor(&mut rng, &[2, 3, 4], 1.0);
        let perm = [4, 2, 0, 5, 1, 3];
        let mut permuted = vec![0.0; feats.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 4..dst * 4 + 4].copy_from_slice(&feats.data()[src * 4..src * 4 + 4]);
        }
        let a = predict(&m, &feats).unwrap();
        let b = predict(&m, &Tensor::new(&[2, 3, 4], permuted).unwrap()).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&b.data()[dst * 3..dst * 3 + 3], &a.data()[src * 3..src * 3 + 3]);
        }
    }

    #[test]
    fn forward_rejects_wrong_feature_dim() {
        let m = SegModel::init(4, &[], 3, 0).unwrap();
        assert!(matches!(predict(&m, &Tensor::zeros(&[2, 2, 5])), Err(Error::Shape { op: "forward", .. })));
    }

    fn map_from(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> EmbeddingMap {
        let v = tape.constant(shape, data).unwrap();
        EmbeddingMap::from_var(tape, v).unwrap()
    }

    #[test]
    fn roi_of_constant_map_is_the_constant() {
        let m = SegModel::init(2, &[], 3, 0).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let v = [0.3, -0.2, 0.9];
        let map = map_from(&mut tape, &[4, 5, 3], v.repeat(20));
        for b in [Box::new(0, 0, 4, 5), Box::new(1, 2, 3, 3), Box::new(3, 4, 4, 5)] {
            let r = roi_embed(&mut tape, &bound, &map, &b).unwrap();
            for (x, y) in tape.value(r).iter().zip(v) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
            }
        }
        assert!(roi_embed(&mut tape, &bound, &map, &Box::new(0, 0, 5, 1)).is_err());
        assert!(roi_embed(&mut tape, &bound, &map, &Box::new(2, 2, 2, 3)).is_err());
    }

    #[test]
    fn roi_of_two_pixels_is_their_mean() {
        let m = SegModel::init(2, &[], 2, 0).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let map = map_from(&mut tape, &[2, 1, 2], vec![1.0, 4.0, 3.0, -2.0]);
        let r = roi_embed(&mut tape, &bound, &map, &Box::new(0, 0, 2, 1)).unwrap();
        assert_eq!(tape.value(r), &[2.0, 1.0]);
    }

    #[test]
    fn full_box_equals_projected_global_mean() {
        let mut m = SegModel::init(2, &[], 3, 0).unwrap();
        let mut rng = SeedStreams::new(2).rng("t");
        m.proj = random_tensor(&mut rng, &[3, 3], 1.0).with_grad();
        let data = random_tensor(&mut rng, &[3, 4, 3], 1.0);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let map = map_from(&mut tape, &[3, 4, 3], data.data().to_vec());
        let r = roi_embed(&mut tape, &bound, &map, &Box::new(0, 0, 3, 4)).unwrap();
        let p = m.proj.data();
        for j in 0..3 {
            let expect: f64 = data.data().chunks(3).map(|px| (0..3).map(|i| px[i] * p[i * 3 + j]).sum::<f64>()).sum::<f64>() / 12.0;
            assert_abs_diff_eq!(tape.value(r)[j], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn roi_gradient_matches_finite_differences() {
        let mut m = SegModel::init(2, &[], 4, 0).unwrap();
        let mut rng = SeedStreams::new(3).rng("t");
        m.proj = random_tensor(&mut rng, &[4, 4], 1.0);
        let x = random_tensor(&mut rng, &[3, 3, 4], 1.0);
        let err = check_gradients(
            |t, x| {
                let bound = m.bind(t);
                let map = EmbeddingMap::from_var(t, x)?;
                let r = roi_embed(t, &bound, &map, &Box::new(0, 1, 2, 3))?;
                let sq = t.mul(r, r)?;
                t.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegModel::init(5, &[7, 6], 4, 21).unwrap().with_tau(0.3).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(SegModel::load(dir.path()).unwrap(), m);
    }
}
