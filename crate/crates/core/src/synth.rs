//! Deterministic synthetic segmentation data.
//!
//! Labels get block-structured embeddings; every pixel feature is a fixed
//! linear image of its label embedding plus Gaussian noise. Scenes are
//! rectangle tilings, annotated as clean masks (HD), boundary-corrupted
//! masks (LD) or boxes with teacher embeddings (WD).

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{normalize, LabelRecord, LabelSpace};
use crate::loss::{BoxSupervision, PixelSupervision};
use crate::seed::SeedStreams;
use crate::seg_head::Box;
use crate::tensor::Tensor;

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Block-structured label embeddings. Returns the space and the block id
/// of every label. `within_corr = 0` gives unstructured embeddings.
pub fn make_embeddings(
    n_blocks: usize,
    per_block: usize,
    dim: usize,
    within_corr: f64,
    seed: u64,
) -> Result<(LabelSpace, Vec<usize>)> {
    if n_blocks == 0 || per_block == 0 {
        return Err(Error::InvalidArgument("need at least one block and one label per block".into()));
    }
    if dim < n_blocks {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} is smaller than block count {n_blocks}")));
    }
    if !(0.0..1.0).contains(&within_corr) {
        return Err(Error::InvalidArgument(format!("within_corr must lie in [0, 1), got {within_corr}")));
    }
    let mut rng = SeedStreams::new(seed).rng("embeddings");
    // Gram-Schmidt gives mutually orthogonal block centers.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_blocks);
    while centers.len() < n_blocks {
        let mut v = gaussian_vec(&mut rng, dim);
        for c in &centers {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        if let Ok(u) = normalize(&v) {
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
                centers.push(u);
            }
        }
    }
    let (a, b) = (within_corr.sqrt(), (1.0 - within_corr).sqrt());
    let mut records = Vec::with_capacity(n_blocks * per_block);
    let mut blocks = Vec::with_capacity(n_blocks * per_block);
    for (bi, center) in centers.iter().enumerate() {
        for k in 0..per_block {
            let u = normalize(&gaussian_vec(&mut rng, dim))?;
            let e: Vec<f64> = center.iter().zip(&u).map(|(c, u)| a * c + b * u).collect();
            let name = format!("block{bi}/label{k}");
            let description = format!("Synthetic label {k} of block {bi}.");
            records.push(LabelRecord::new(name, description, normalize(&e)?));
            blocks.push(bi);
        }
    }
    Ok((LabelSpace::new(records)?, blocks))
}

/// Ground truth generator: label embeddings, the linear feature map and
/// the feature noise level.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub space: LabelSpace,
    pub blocks: Vec<usize>,
    /// F×C row-major.
    pub feature_map: Vec<f64>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
}

impl SynthWorld {
    pub fn new(space: LabelSpace, blocks: Vec<usize>, feature_dim: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature dim must be positive".into()));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise_sigma must be non-negative, got {noise_sigma}")));
        }
        let mut rng = SeedStreams::new(seed).rng("feature_map");
        let feature_map = gaussian_vec(&mut rng, feature_dim * space.dim());
        let world = SynthWorld {
            space,
            blocks,
            feature_map,
            feature_dim,
            noise_sigma,
        };
        let smin = world.min_singular_value();
        if !(smin > 1e-6) {
            return Err(Error::InvalidArgument(format!("feature map is rank deficient (smallest singular value {smin:e})")));
        }
        Ok(world)
    }

    /// Smallest of the `min(F, C)` singular values of the feature map.
    pub fn min_singular_value(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.feature_dim, self.space.dim(), &self.feature_map);
        m.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Noise-free feature of a raw embedding: `A · e`.
    pub fn project(&self, embedding: &[f64]) -> Vec<f64> {
        let c = self.space.dim();
        (0..self.feature_dim)
            .map(|i| self.feature_map[i * c..(i + 1) * c].iter().zip(embedding).map(|(a, e)| a * e).sum())
            .collect()
    }

    pub fn prototype(&self, label: usize) -> Vec<f64> {
        self.project(&self.space.record(label).embedding)
    }

    /// Same world with a different (e.g. extended) label space of equal dim.
    pub fn with_space(&self, space: LabelSpace) -> Result<Self> {
        if space.dim() != self.space.dim() {
            return Err(Error::DimensionMismatch {
                context: "world label space".into(),
                expected: self.space.dim(),
                found: space.dim(),
            });
        }
        Ok(SynthWorld { space, ..self.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rect: Box,
    pub label: usize,
}

/// Features plus ground truth before any annotation is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// H×W×F.
    pub features: Tensor,
    /// Row-major label ids.
    pub truth: Vec<usize>,
    pub regions: Vec<Region>,
    pub active: Vec<usize>,
}

impl Scene {
    pub fn truth_labels(&self) -> Vec<i64> {
        self.truth.iter().map(|&l| l as i64).collect()
    }
}

/// Splits the grid into `n_regions` rectangles by repeatedly cutting the
/// largest splittable rectangle at a random position.
fn split_grid(height: usize, width: usize, n_regions: usize, rng: &mut ChaCha8Rng) -> Vec<Box> {
    let mut rects = vec![Box::new(0, 0, height, width)];
    while rects.len() < n_regions {
        let (idx, _) = rects
            .iter()
            .enumerate()
            .filter(|(_, r)| r.area() >= 2)
            .fold((usize::MAX, 0), |best, (i, r)| if r.area() > best.1 { (i, r.area()) } else { best });
        let r = rects[idx];
        let (h, w) = (r.row1 - r.row0, r.col1 - r.col0);
        let cut_rows = if h >= 2 && w >= 2 { h > w || (h == w && rng.random::<bool>()) } else { h >= 2 };
        let (a, b) = if cut_rows {
            let at = r.row0 + rng.random_range(1..h);
            (Box::new(r.row0, r.col0, at, r.col1), Box::new(at, r.col0, r.row1, r.col1))
        } else {
            let at = r.col0 + rng.random_range(1..w);
            (Box::new(r.row0, r.col0, r.row1, at), Box::new(r.row0, at, r.row1, r.col1))
        };
        rects[idx] = a;
        rects.push(b);
    }
    rects
}

pub fn gen_scene(world: &SynthWorld, height: usize, width: usize, n_regions: usize, active: &[usize], seed: u64) -> Result<Scene> {
    if n_regions == 0 {
        return Err(Error::InvalidArgument("a scene needs at least one region".into()));
    }
    if n_regions > height * width {
        return Err(Error::InvalidArgument(format!("{n_regions} regions cannot fit a {height}x{width} grid")));
    }
    if active.is_empty() {
        return Err(Error::InvalidArgument("active label list is empty".into()));
    }
    if let Some(bad) = active.iter().find(|&&l| l >= world.space.len()) {
        return Err(Error::InvalidArgument(format!("active label {bad} is not in the label space")));
    }
    let streams = SeedStreams::new(seed);
    let rects = split_grid(height, width, n_regions, &mut streams.rng("layout"));
    let mut label_rng = streams.rng("labels");
    let regions: Vec<Region> = rects
        .into_iter()
        .map(|rect| Region {
            rect,
            label: active[label_rng.random_range(0..active.len())],
        })
        .collect();

    let mut truth = vec![usize::MAX; height * width];
    for reg in &regions {
        for r in reg.rect.row0..reg.rect.row1 {
            for c in reg.rect.col0..reg.rect.col1 {
                truth[r * width + c] = reg.label;
            }
        }
    }
    let f = world.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..world.space.len()).map(|l| world.prototype(l)).collect();
    let mut noise_rng = streams.rng("noise");
    let noise = Normal::new(0.0, world.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(height * width * f);
    for &l in &truth {
        for &p in &prototypes[l] {
            let n = if world.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            data.push(p + n);
        }
    }
    let mut active: Vec<usize> = active.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    active.sort_unstable();
    Ok(Scene {
        height,
        width,
        features: Tensor::new(&[height, width, f], data)?,
        truth,
        regions,
        active,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hd,
    Ld,
    Wd,
}

impl Tier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Hd => "hd",
            Tier::Ld => "ld",
            Tier::Wd => "wd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Pixels(PixelSupervision),
    Boxes(BoxSupervision),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub scene: Scene,
    pub tier: Tier,
    pub payload: Payload,
    pub dataset_id: usize,
}

impl AnnotatedSample {
    pub fn pixels(&self) -> Option<&PixelSupervision> {
        match &self.payload {
            Payload::Pixels(p) => Some(p),
            Payload::Boxes(_) => None,
        }
    }

    pub fn boxes(&self) -> Option<&BoxSupervision> {
        match &self.payload {
            Payload::Boxes(b) => Some(b),
            Payload::Pixels(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotateParams {
    pub corrupt_frac: f64,
    pub teacher_sigma: f64,
}

/// Pixels whose 4-neighbourhood holds a different label, with those labels.
fn boundary_candidates(scene: &Scene) -> Vec<(usize, Vec<usize>)> {
    let (h, w) = (scene.height, scene.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let own = scene.truth[r * w + c];
            let mut labels = BTreeSet::new();
            let mut look = |rr: usize, cc: usize| {
                let l = scene.truth[rr * w + cc];
                if l != own {
                    labels.insert(l);
                }
            };
            if r > 0 {
                look(r - 1, c);
            }
            if r + 1 < h {
                look(r + 1, c);
            }
            if c > 0 {
                look(r, c - 1);
            }
            if c + 1 < w {
                look(r, c + 1);
            }
            if !labels.is_empty() {
                out.push((r * w + c, labels.into_iter().collect()));
            }
        }
    }
    out
}

/// Flips `round(frac · H·W)` pixels, boundary pixels first: those spill
/// into a neighbouring region's label. Remaining flips go to random
/// interior pixels and pick a random other active label.
pub fn corrupt_mask(scene: &Scene, corrupt_frac: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&corrupt_frac) {
        return Err(Error::InvalidArgument(format!("corrupt_frac must lie in [0, 1), got {corrupt_frac}")));
    }
    let total = scene.truth.len();
    let target = (corrupt_frac * total as f64).round() as usize;
    let mut labels = scene.truth.clone();
    if target == 0 {
        return Ok(labels);
    }
    let mut boundary = boundary_candidates(scene);
    boundary.shuffle(rng);
    let on_boundary: BTreeSet<usize> = boundary.iter().map(|(i, _)| *i).collect();
    let mut interior: Vec<usize> = (0..total).filter(|i| !on_boundary.contains(i)).collect();
    interior.shuffle(rng);

    let mut flipped = 0;
    for (i, neighbours) in &boundary {
        if flipped == target {
            break;
        }
        labels[*i] = neighbours[rng.random_range(0..neighbours.len())];
        flipped += 1;
    }
    for i in interior {
        if flipped == target {
            break;
        }
        let others: Vec<usize> = scene.active.iter().copied().filter(|&l| l != scene.truth[i]).collect();
        if others.is_empty() {
            continue;
        }
        labels[i] = others[rng.random_range(0..others.len())];
        flipped += 1;
    }
    Ok(labels)
}

pub fn annotate(
    world: &SynthWorld,
    scene: Scene,
    tier: Tier,
    params: AnnotateParams,
    dataset_id: usize,
    seed: u64,
) -> Result<AnnotatedSample> {
    let mut rng = SeedStreams::new(seed).rng("annotate");
    let payload = match tier {
        Tier::Hd => Payload::Pixels(PixelSupervision::new(scene.height, scene.width, scene.truth_labels())?),
        Tier::Ld => {
            let noisy = corrupt_mask(&scene, params.corrupt_frac, &mut rng)?;
            Payload::Pixels(PixelSupervision::new(scene.height, scene.width, noisy.into_iter().map(|l| l as i64).collect())?)
        }
        Tier::Wd => {
            if !(params.teacher_sigma >= 0.0) {
                return Err(Error::InvalidArgument(format!("teacher_sigma must be non-negative, got {}", params.teacher_sigma)));
            }
            let noise = Normal::new(0.0, params.teacher_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut boxes = Vec::with_capacity(scene.regions.len());
            let mut teachers = Vec::with_capacity(scene.regions.len());
            for reg in &scene.regions {
                let e = &world.space.record(reg.label).embedding;
                let noisy: Vec<f64> = e.iter().map(|x| x + noise.sample(&mut rng)).collect();
                boxes.push(reg.rect);
                teachers.push(normalize(&noisy)?);
            }
            Payload::Boxes(BoxSupervision::new(boxes, teachers)?)
        }
    };
    Ok(AnnotatedSample {
        scene,
        tier,
        payload,
        dataset_id,
    })
}

/// One synthetic "dataset": a fixed annotation tier and scene recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub tier: Tier,
    pub count: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_regions")]
    pub n_regions: usize,
    #[serde(default)]
    pub corrupt_frac: f64,
    #[serde(default)]
    pub teacher_sigma: f64,
}

fn default_side() -> usize {
    12
}

fn default_regions() -> usize {
    4
}

#[derive(Debug, Clone)]
pub struct Pool {
    pub dataset_id: usize,
    pub tier: Tier,
    pub samples: Vec<AnnotatedSample>,
}

pub fn generate_pool(world: &SynthWorld, spec: &DatasetSpec, dataset_id: usize, active: &[usize], seed: u64) -> Result<Pool> {
    let streams = SeedStreams::new(seed).child(&format!("dataset{dataset_id}"));
    let params = AnnotateParams {
        corrupt_frac: spec.corrupt_frac,
        teacher_sigma: spec.teacher_sigma,
    };
    let samples = (0..spec.count)
        .map(|i| {
            let s = streams.child(&format!("sample{i}"));
            let scene = gen_scene(world, spec.height, spec.width, spec.n_regions, active, s.derive("scene"))?;
            annotate(world, scene, spec.tier, params, dataset_id, s.derive("annotation"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pool {
        dataset_id,
        tier: spec.tier,
        samples,
    })
}

/// Endless stream of mini-batches with every dataset at a near-equal share.
/// Each batch draws `batch_size / D` samples from every dataset and hands
/// the remainder out round-robin; datasets are sampled without replacement
/// and reshuffled whenever exhausted.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    sizes: Vec<usize>,
    batch_size: usize,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
    batch_index: usize,
}

impl BalancedBatches {
    pub fn new(sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidArgument("no datasets to batch".into()));
        }
        if let Some(d) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("dataset {d} is empty")));
        }
        if batch_size < sizes.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} is smaller than the {} datasets",
                sizes.len()
            )));
        }
        let streams = SeedStreams::new(seed);
        let mut rngs: Vec<ChaCha8Rng> = (0..sizes.len()).map(|d| streams.rng(&format!("batching{d}"))).collect();
        let orders = sizes
            .iter()
            .zip(rngs.iter_mut())
            .map(|(&n, rng)| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(rng);
                o
            })
            .collect();
        Ok(BalancedBatches {
            sizes: sizes.to_vec(),
            batch_size,
            orders,
            cursors: vec![0; sizes.len()],
            rngs,
            batch_index: 0,
        })
    }

    /// Per-dataset sample counts of batch number `t`.
    pub fn counts_for(&self, t: usize) -> Vec<usize> {
        let d = self.sizes.len();
        let (base, rem) = (self.batch_size / d, self.batch_size % d);
        let mut counts = vec![base; d];
        for i in 0..rem {
            counts[(t * rem + i) % d] += 1;
        }
        counts
    }

    fn draw(&mut self, d: usize) -> usize {
        if self.cursors[d] == self.sizes[d] {
            self.orders[d].shuffle(&mut self.rngs[d]);
            self.cursors[d] = 0;
        }
        let s = self.orders[d][self.cursors[d]];
        self.cursors[d] += 1;
        s
    }
}

impl Iterator for BalancedBatches {
    /// `(dataset index, sample index)` pairs.
    type Item = Vec<(usize, usize)>;

    fn next(&mut self) -> Option<Self::Item> {
        let counts = self.counts_for(self.batch_index);
        self.batch_index += 1;
        let mut batch = Vec::with_capacity(self.batch_size);
        for (d, &k) in counts.iter().enumerate() {
            for _ in 0..k {
                batch.push((d, self.draw(d)));
            }
        }
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::block_similarity_summary;
    use approx::assert_abs_diff_eq;

    fn world(noise: f64) -> SynthWorld {
        let (space, blocks) = make_embeddings(2, 3, 16, 0.5, 1).unwrap();
        SynthWorld::new(space, blocks, 8, noise, 2).unwrap()
    }

    #[test]
    fn structured_embeddings_cluster() {
        let (space, blocks) = make_embeddings(3, 4, 16, 0.8, 5).unwrap();
        let (within, cross) = block_similarity_summary(&space.similarity_matrix(), &blocks).unwrap();
        assert!(within > cross, "{within} vs {cross}");
        assert!(within > 0.6);
    }

    #[test]
    fn scrambled_embeddings_are_near_orthogonal() {
        let (space, _) = make_embeddings(3, 4, 64, 0.0, 5).unwrap();
        let s = space.similarity_matrix();
        let n = s.len();
        let mean: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| s[i][j]).sum::<f64>()
            / (n * (n - 1)) as f64;
        assert!(mean.abs() < 0.15, "{mean}");
    }

    #[test]
    fn embeddings_are_seeded() {
        assert_eq!(make_embeddings(2, 2, 8, 0.3, 9).unwrap().0, make_embeddings(2, 2, 8, 0.3, 9).unwrap().0);
        assert!(make_embeddings(5, 2, 4, 0.3, 9).is_err());
        assert!(make_embeddings(2, 2, 4, 1.0, 9).is_err());
    }

    #[test]
    fn noise_free_features_are_prototypes() {
        let w = world(0.0);
        let scene = gen_scene(&w, 6, 7, 5, &[0, 1, 2, 3, 4, 5], 3).unwrap();
        for (px, &l) in scene.truth.iter().enumerate() {
            assert_eq!(&scene.features.data()[px * 8..px * 8 + 8], w.prototype(l).as_slice());
        }
    }

    #[test]
    fn single_region_is_constant() {
        let w = world(0.1);
        let scene = gen_scene(&w, 5, 5, 1, &[2, 4], 8).unwrap();
        assert!(scene.truth.iter().all(|&l| l == scene.truth[0]));
        assert!(gen_scene(&w, 2, 2, 5, &[0], 1).is_err());
        assert!(gen_scene(&w, 2, 2, 1, &[], 1).is_err());
    }

    #[test]
    fn regions_tile_the_grid() {
        let w = world(0.0);
        for seed in 0..30 {
            let (h, wd, n) = (3 + seed % 7, 4 + seed % 5, 1 + seed % 9);
            let scene = gen_scene(&w, h, wd, n, &[0, 1], seed as u64).unwrap();
            assert_eq!(scene.regions.len(), n);
            let mut cover = vec![0; h * wd];
            for reg in &scene.regions {
                reg.rect.validate(h, wd).unwrap();
                for r in 0..h {
                    for c in 0..wd {
                        if reg.rect.contains(r, c) {
                            cover[r * wd + c] += 1;
                        }
                    }
                }
            }
            assert!(cover.iter().all(|&k| k == 1), "seed {seed}");
        }
    }

    #[test]
    fn annotation_tiers() {
        let w = world(0.2);
        let scene = gen_scene(&w, 10, 10, 6, &[0, 1, 2, 3], 4).unwrap();
        let clean = AnnotateParams { corrupt_frac: 0.0, teacher_sigma: 0.0 };

        let hd = annotate(&w, scene.clone(), Tier::Hd, clean, 0, 1).unwrap();
        assert_eq!(hd.pixels().unwrap().labels, scene.truth_labels());
        let ld0 = annotate(&w, scene.clone(), Tier::Ld, clean, 0, 1).unwrap();
        assert_eq!(ld0.pixels().unwrap().labels, scene.truth_labels());

        let noisy = AnnotateParams { corrupt_frac: 0.3, teacher_sigma: 0.0 };
        let ld = annotate(&w, scene.clone(), Tier::Ld, noisy, 0, 1).unwrap();
        let diff = ld.pixels().unwrap().labels.iter().zip(scene.truth_labels()).filter(|(a, b)| **a != *b).count();
        assert_eq!(diff, 30);
        // annotation never touches features or truth
        assert_eq!(ld.scene, scene);

        let wd = annotate(&w, scene.clone(), Tier::Wd, clean, 0, 1).unwrap();
        let boxes = wd.boxes().unwrap();
        assert_eq!(boxes.len(), scene.regions.len());
        for (t, reg) in boxes.teacher_embeddings.iter().zip(&scene.regions) {
            for (x, y) in t.iter().zip(&w.space.record(reg.label).embedding) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn corruption_prefers_boundaries() {
        let w = world(0.0);
        let scene = gen_scene(&w, 12, 12, 6, &[0, 1, 2, 3, 4, 5], 2).unwrap();
        let boundary: BTreeSet<usize> = boundary_candidates(&scene).into_iter().map(|(i, _)| i).collect();
        let mut rng = SeedStreams::new(1).rng("c");
        let noisy = corrupt_mask(&scene, 0.05, &mut rng).unwrap();
        let changed: Vec<usize> = (0..144).filter(|&i| noisy[i] != scene.truth[i]).collect();
        assert_eq!(changed.len(), 7);
        if boundary.len() >= 7 {
            assert!(changed.iter().all(|i| boundary.contains(i)));
        }
    }

    #[test]
    fn balanced_counts() {
        let mut b = BalancedBatches::new(&[5, 7, 3], 6, 1).unwrap();
        for _ in 0..10 {
            let batch = b.next().unwrap();
            for d in 0..3 {
                assert_eq!(batch.iter().filter(|(x, _)| *x == d).count(), 2);
            }
        }
        let b = BalancedBatches::new(&[5, 7, 3], 4, 1).unwrap();
        assert_eq!(b.counts_for(0), vec![2, 1, 1]);
        assert_eq!(b.counts_for(1), vec![1, 2, 1]);
        assert_eq!(b.counts_for(2), vec![1, 1, 2]);
        assert_eq!(b.counts_for(3), vec![2, 1, 1]);
        assert!(BalancedBatches::new(&[5, 0], 4, 1).is_err());
        assert!(BalancedBatches::new(&[5, 2, 2], 2, 1).is_err());
    }

    #[test]
    fn balanced_epochs_are_without_replacement() {
        let mut b = BalancedBatches::new(&[4, 6], 4, 3).unwrap();
        let first: Vec<Vec<(usize, usize)>> = (0..3).map(|_| b.next().unwrap()).collect();
        let d1: BTreeSet<usize> = first.iter().flatten().filter(|(d, _)| *d == 1).map(|(_, s)| *s).collect();
        assert_eq!(d1.len(), 6);
        let again: Vec<Vec<(usize, usize)>> = BalancedBatches::new(&[4, 6], 4, 3).unwrap().take(3).collect();
        assert_eq!(first, again);
    }
}
