//! Cosine-softmax pixel losses for clean and noisy masks, box-level
//! distillation, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::LabelSpace;
use crate::seg_head::{roi_embed, BoundModel, Box, EmbeddingMap};
use crate::tensor::{Tape, Var};

pub const DEFAULT_KEEP_FRACTION: f64 = 0.7;

/// Per-pixel label ids; `-1` marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelSupervision {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i64>,
}

impl PixelSupervision {
    pub const IGNORE: i64 = -1;

    pub fn new(height: usize, width: usize, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch {
                context: "pixel supervision".into(),
                expected: height * width,
                found: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l < Self::IGNORE) {
            return Err(Error::InvalidArgument(format!("label id {bad} is negative and not the ignore value")));
        }
        Ok(PixelSupervision { height, width, labels })
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSupervision {
    pub boxes: Vec<Box>,
    pub teacher_embeddings: Vec<Vec<f64>>,
}

impl BoxSupervision {
    pub fn new(boxes: Vec<Box>, teacher_embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if boxes.len() != teacher_embeddings.len() {
            return Err(Error::DimensionMismatch {
                context: "box supervision".into(),
                expected: boxes.len(),
                found: teacher_embeddings.len(),
            });
        }
        if teacher_embeddings.iter().any(|t| t.iter().all(|&x| x == 0.0)) {
            return Err(Error::InvalidEmbedding("teacher embedding is zero".into()));
        }
        Ok(BoxSupervision { boxes, teacher_embeddings })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Outcome of the top-loss rejection in [`loss_ld`].
#[derive(Debug, Clone, PartialEq)]
pub struct KeptSet {
    /// One flag per pixel, row-major; ignored pixels are never kept.
    pub mask: Vec<bool>,
    pub kept: usize,
    pub valid: usize,
}

impl KeptSet {
    pub fn fraction(&self) -> f64 {
        self.kept as f64 / self.valid as f64
    }

    /// True when rounding left nothing to train on.
    pub fn is_empty(&self) -> bool {
        self.kept == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_hd: f64,
    pub l_ld: f64,
    pub l_wd: f64,
    pub total: f64,
    pub kept_fraction: Option<f64>,
    /// Per-pixel cross-entropy of the last pixel-level term (diagnostic).
    #[serde(skip)]
    pub pixel_loss: Option<Vec<f64>>,
}

pub const METRICS_CSV_HEADER: &str = "step,l_hd,l_ld,l_wd,total,kept_fraction,tau";

impl LossBreakdown {
    pub fn csv_row(&self, step: usize, tau: f64) -> String {
        let kept = self.kept_fraction.map(|k| k.to_string()).unwrap_or_default();
        format!("{step},{},{},{},{},{kept},{tau}", self.l_hd, self.l_ld, self.l_wd, self.total)
    }
}

fn check_labels(sup: &PixelSupervision, map: &EmbeddingMap, space: &LabelSpace) -> Result<usize> {
    if (sup.height, sup.width) != (map.height, map.width) {
        return Err(Error::shape(
            "pixel supervision",
            format!("labels are {}x{}, map is {}x{}", sup.height, sup.width, map.height, map.width),
        ));
    }
    if let Some(bad) = sup.labels.iter().find(|&&l| l >= space.len() as i64) {
        return Err(Error::InvalidArgument(format!("label id {bad} outside [0, {})", space.len())));
    }
    match sup.valid_count() {
        0 => Err(Error::EmptySupervision("no valid pixels")),
        m => Ok(m),
    }
}

/// (H·W)×N cosine similarities between pixel embeddings and label rows.
pub fn cosine_logits(tape: &mut Tape, map: &EmbeddingMap, space: &LabelSpace) -> Result<Var> {
    if map.channels != space.dim() {
        return Err(Error::DimensionMismatch {
            context: "embedding map vs label space".into(),
            expected: space.dim(),
            found: map.channels,
        });
    }
    let (n, c) = (space.len(), space.dim());
    let flat = tape.reshape(map.var, &[map.height * map.width, c])?;
    let unit = tape.l2_normalize(flat)?;
    let e = space.unit_matrix();
    let mut et = vec![0.0; c * n];
    for j in 0..n {
        for k in 0..c {
            et[k * n + j] = e[j * c + k];
        }
    }
    let et = tape.constant(&[c, n], et)?;
    tape.matmul(unit, et)
}

/// H×W×N softmax over labels of `cosine / τ`.
pub fn pixel_probs(tape: &mut Tape, map: &EmbeddingMap, space: &LabelSpace, tau: Var) -> Result<Var> {
    let z = cosine_logits(tape, map, space)?;
    let p = tape.softmax_with_temperature(z, tau)?;
    tape.reshape(p, &[map.height, map.width, space.len()])
}

fn log_probs(tape: &mut Tape, map: &EmbeddingMap, space: &LabelSpace, tau: Var) -> Result<Var> {
    let z = cosine_logits(tape, map, space)?;
    tape.log_softmax_with_temperature(z, tau)
}

/// `-log p(true label)` per pixel, NaN on ignored pixels.
fn pixel_nll(tape: &Tape, logp: Var, sup: &PixelSupervision, n: usize) -> Vec<f64> {
    let lp = tape.value(logp);
    sup.labels
        .iter()
        .enumerate()
        .map(|(i, &l)| if l >= 0 { -lp[i * n + l as usize] } else { f64::NAN })
        .collect()
}

/// `-(1/M) Σ_i w_i log p_i(y_i)` with `w_i = mask[i]`.
fn masked_nll(tape: &mut Tape, logp: Var, sup: &PixelSupervision, n: usize, mask: &[bool], m: usize) -> Result<Var> {
    let mut w = vec![0.0; sup.labels.len() * n];
    for (i, (&l, &keep)) in sup.labels.iter().zip(mask).enumerate() {
        if l >= 0 && keep {
            w[i * n + l as usize] = 1.0;
        }
    }
    let w = tape.constant(&[sup.labels.len(), n], w)?;
    let picked = tape.mul(logp, w)?;
    let s = tape.sum(picked, None)?;
    Ok(tape.scale(s, -1.0 / m as f64))
}

/// Mean cross-entropy over valid pixels.
pub fn loss_hd(tape: &mut Tape, map: &EmbeddingMap, sup: &PixelSupervision, space: &LabelSpace, tau: Var) -> Result<Var> {
    let m = check_labels(sup, map, space)?;
    let logp = log_probs(tape, map, space, tau)?;
    let all: Vec<bool> = sup.labels.iter().map(|&l| l >= 0).collect();
    masked_nll(tape, logp, sup, space.len(), &all, m)
}

/// Same as [`loss_hd`] but also returns the per-pixel loss map.
pub fn loss_hd_with_map(
    tape: &mut Tape,
    map: &EmbeddingMap,
    sup: &PixelSupervision,
    space: &LabelSpace,
    tau: Var,
) -> Result<(Var, Vec<f64>)> {
    let m = check_labels(sup, map, space)?;
    let logp = log_probs(tape, map, space, tau)?;
    let per_pixel = pixel_nll(tape, logp, sup, space.len());
    let all: Vec<bool> = sup.labels.iter().map(|&l| l >= 0).collect();
    Ok((masked_nll(tape, logp, sup, space.len(), &all, m)?, per_pixel))
}

/// Keeps the `floor(keep_fraction · M)` lowest-loss valid pixels. Equal
/// losses are ordered by row-major index, so the boundary pixel at the
/// threshold goes to the rejected side.
pub fn select_kept(pixel_loss: &[f64], labels: &[i64], keep_fraction: f64) -> Result<KeptSet> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let mut valid: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    let m = valid.len();
    if m == 0 {
        return Err(Error::EmptySupervision("no valid pixels"));
    }
    // The small offset stops 0.7 * 10 = 6.999… style products losing a pixel.
    let k = ((keep_fraction * m as f64) + 1e-9).floor() as usize;
    let k = k.min(m);
    valid.sort_by(|&a, &b| pixel_loss[a].total_cmp(&pixel_loss[b]).then(a.cmp(&b)));
    let mut mask = vec![false; labels.len()];
    valid[..k].iter().for_each(|&i| mask[i] = true);
    Ok(KeptSet { mask, kept: k, valid: m })
}

/// Noisy-mask loss: per image, reject the highest-loss pixels and average
/// the rest over all `M` valid pixels. The kept set is a constant for the
/// backward pass.
pub fn loss_ld(
    tape: &mut Tape,
    map: &EmbeddingMap,
    sup: &PixelSupervision,
    space: &LabelSpace,
    tau: Var,
    keep_fraction: f64,
) -> Result<(Var, KeptSet)> {
    let m = check_labels(sup, map, space)?;
    let logp = log_probs(tape, map, space, tau)?;
    let per_pixel = pixel_nll(tape, logp, sup, space.len());
    let kept = select_kept(&per_pixel, &sup.labels, keep_fraction)?;
    if kept.is_empty() {
        return Ok((tape.scalar_constant(0.0), kept));
    }
    let loss = masked_nll(tape, logp, sup, space.len(), &kept.mask, m)?;
    Ok((loss, kept))
}

/// [`loss_ld`] with an externally fixed kept set.
pub fn loss_ld_with_mask(
    tape: &mut Tape,
    map: &EmbeddingMap,
    sup: &PixelSupervision,
    space: &LabelSpace,
    tau: Var,
    kept: &[bool],
) -> Result<Var> {
    let m = check_labels(sup, map, space)?;
    if kept.len() != sup.labels.len() {
        return Err(Error::DimensionMismatch {
            context: "kept mask".into(),
            expected: sup.labels.len(),
            found: kept.len(),
        });
    }
    let logp = log_probs(tape, map, space, tau)?;
    masked_nll(tape, logp, sup, space.len(), kept, m)
}

/// Box distillation: mean over boxes of the L1 distance between the unit
/// pooled prediction and the unit teacher embedding. Teachers are constants.
pub fn loss_wd(tape: &mut Tape, bound: &BoundModel, map: &EmbeddingMap, sup: &BoxSupervision) -> Result<Var> {
    if sup.is_empty() {
        return Err(Error::EmptySupervision("no boxes"));
    }
    let mut per_box = Vec::with_capacity(sup.len());
    for (b, teacher) in sup.boxes.iter().zip(&sup.teacher_embeddings) {
        if teacher.len() != map.channels {
            return Err(Error::DimensionMismatch {
                context: "teacher embedding".into(),
                expected: map.channels,
                found: teacher.len(),
            });
        }
        let pooled = roi_embed(tape, bound, map, b)?;
        let v = tape.l2_normalize(pooled)?;
        let t = tape.constant(&[map.channels], teacher.clone())?;
        let t = tape.l2_normalize(t)?;
        let d = tape.sub(t, v)?;
        let d = tape.abs(d);
        per_box.push(tape.sum(d, None)?);
    }
    let mut acc = per_box[0];
    for &v in &per_box[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / sup.len() as f64))
}

/// Loss terms present in one batch; each is already averaged over the
/// samples of its tier.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub hd: Option<Var>,
    pub ld: Option<Var>,
    pub wd: Option<Var>,
    pub kept_fraction: Option<f64>,
}

/// Sums the present terms. Absent terms are recorded as zero.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms) -> Result<(Var, LossBreakdown)> {
    let present: Vec<Var> = [terms.hd, terms.ld, terms.wd].into_iter().flatten().collect();
    let Some((&first, rest)) = present.split_first() else {
        return Err(Error::EmptyBatch);
    };
    let mut total = first;
    for &v in rest {
        total = tape.add(total, v)?;
    }
    let value = |v: Option<Var>| v.map(|v| tape.item(v)).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        l_hd: value(terms.hd),
        l_ld: value(terms.ld),
        l_wd: value(terms.wd),
        total: tape.item(total),
        kept_fraction: terms.kept_fraction,
        pixel_loss: None,
    };
    Ok((total, breakdown))
}

/// Averages a list of scalar terms on the tape.
pub fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::LabelRecord;
    use crate::seg_head::SegModel;
    use crate::tensor::{check_gradients, Tensor};
    use approx::assert_abs_diff_eq;

    fn orthogonal_space() -> LabelSpace {
        LabelSpace::new(vec![
            LabelRecord::new("a", "", vec![1.0, 0.0]),
            LabelRecord::new("b", "", vec![0.0, 1.0]),
        ])
        .unwrap()
    }

    fn map_of(tape: &mut Tape, h: usize, w: usize, c: usize, data: Vec<f64>) -> EmbeddingMap {
        let v = tape.constant(&[h, w, c], data).unwrap();
        EmbeddingMap::from_var(tape, v).unwrap()
    }

    #[test]
    fn probs_at_label_embedding() {
        let space = orthogonal_space();
        let mut t = Tape::new();
        let map = map_of(&mut t, 1, 2, 2, vec![1.0, 0.0, 0.0, 3.0]);
        let tau = t.scalar_constant(1.0);
        let p = pixel_probs(&mut t, &map, &space, tau).unwrap();
        assert_eq!(t.shape(p), &[1, 2, 2]);
        assert_abs_diff_eq!(t.value(p)[0], 0.73105858, epsilon = 1e-8);
        assert_abs_diff_eq!(t.value(p)[3], 0.73105858, epsilon = 1e-8);
    }

    #[test]
    fn single_label_is_certain() {
        let space = LabelSpace::new(vec![LabelRecord::new("only", "", vec![0.3, -0.2, 0.5])]).unwrap();
        let mut t = Tape::new();
        let map = map_of(&mut t, 2, 2, 3, (0..12).map(|i| f64::from(i) - 5.5).collect());
        let tau = t.scalar_constant(0.07);
        let p = pixel_probs(&mut t, &map, &space, tau).unwrap();
        assert!(t.value(p).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_pixel_embedding_is_a_domain_error() {
        let space = orthogonal_space();
        let mut t = Tape::new();
        let map = map_of(&mut t, 1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let tau = t.scalar_constant(1.0);
        assert!(matches!(pixel_probs(&mut t, &map, &space, tau), Err(Error::Domain { .. })));
    }

    #[test]
    fn hd_at_label_embeddings() {
        let space = orthogonal_space();
        let mut t = Tape::new();
        let map = map_of(&mut t, 2, 1, 2, vec![2.0, 0.0, 0.0, 0.5]);
        let sup = PixelSupervision::new(2, 1, vec![0, 1]).unwrap();
        let tau = t.scalar_constant(1.0);
        let l = loss_hd(&mut t, &map, &sup, &space, tau).unwrap();
        assert_abs_diff_eq!(t.item(l), 0.31326169, epsilon = 1e-7);
    }

    #[test]
    fn hd_uniform_is_log_n() {
        // every label orthogonal to the prediction gives uniform probabilities
        let space = LabelSpace::new(
            (0..3).map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                LabelRecord::new(format!("l{i}"), "", v)
            })
            .collect(),
        )
        .unwrap();
        let mut t = Tape::new();
        let map = map_of(&mut t, 1, 2, 4, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let sup = PixelSupervision::new(1, 2, vec![2, 0]).unwrap();
        let tau = t.scalar_constant(0.3);
        let l = loss_hd(&mut t, &map, &sup, &space, tau).unwrap();
        assert_abs_diff_eq!(t.item(l), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn hd_ignores_masked_pixels() {
        let space = orthogonal_space();
        let sup = PixelSupervision::new(1, 3, vec![0, -1, 1]).unwrap();
        let eval = |middle: [f64; 2]| {
            let mut t = Tape::new();
            let map = map_of(&mut t, 1, 3, 2, vec![0.9, 0.2, middle[0], middle[1], 0.1, 0.7]);
            let tau = t.scalar_constant(0.5);
            let l = loss_hd(&mut t, &map, &sup, &space, tau).unwrap();
            t.item(l)
        };
        assert_eq!(eval([1.0, 1.0]), eval([-3.0, 0.01]));
    }

    #[test]
    fn hd_errors() {
        let space = orthogonal_space();
        let mut t = Tape::new();
        let map = map_of(&mut t, 1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let tau = t.scalar_constant(1.0);
        let empty = PixelSupervision::new(1, 2, vec![-1, -1]).unwrap();
        assert!(matches!(loss_hd(&mut t, &map, &empty, &space, tau), Err(Error::EmptySupervision(_))));
        let out_of_range = PixelSupervision::new(1, 2, vec![0, 2]).unwrap();
        assert!(loss_hd(&mut t, &map, &out_of_range, &space, tau).is_err());
    }

    #[test]
    fn select_kept_hand_ranking() {
        let losses: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).rev().collect();
        let labels = vec![0i64; 10];
        let kept = select_kept(&losses, &labels, 0.7).unwrap();
        assert_eq!(kept.kept, 7);
        // the three largest losses sit at indices 0..3
        assert_eq!(&kept.mask[..3], &[false, false, false]);
        assert!(kept.mask[3..].iter().all(|&k| k));
        let masked: f64 = losses.iter().zip(&kept.mask).filter(|(_, &k)| k).map(|(l, _)| l).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(masked, 0.28, epsilon = 1e-12);
    }

    #[test]
    fn select_kept_ties_by_index() {
        let losses = vec![0.5; 4];
        let kept = select_kept(&losses, &[0, 0, -1, 0], 0.7).unwrap();
        // M = 3, K = 2: the first two valid pixels
        assert_eq!(kept.mask, vec![true, true, false, false]);
        let none = select_kept(&[0.1, 0.2], &[0, 0], 0.4).unwrap();
        assert!(none.is_empty());
        assert!(select_kept(&[0.1], &[0], 0.0).is_err());
        assert!(select_kept(&[0.1], &[0], 1.5).is_err());
    }

    #[test]
    fn ld_with_full_keep_equals_hd() {
        let space = orthogonal_space();
        let mut t = Tape::new();
        let map = map_of(&mut t, 2, 2, 2, vec![0.9, 0.1, 0.3, 0.8, -0.2, 0.5, 0.7, 0.7]);
        let sup = PixelSupervision::new(2, 2, vec![0, 1, -1, 0]).unwrap();
        let tau = t.scalar_constant(0.2);
        let hd = loss_hd(&mut t, &map, &sup, &space, tau).unwrap();
        let (ld, kept) = loss_ld(&mut t, &map, &sup, &space, tau, 1.0).unwrap();
        assert_eq!(t.item(hd), t.item(ld));
        assert_eq!(kept.kept, 3);
    }

    #[test]
    fn ld_zero_kept_is_zero() {
        let space = orthogonal_space();
        let mut t = Tape::new();
        let map = map_of(&mut t, 1, 2, 2, vec![0.9, 0.1, 0.3, 0.8]);
        let sup = PixelSupervision::new(1, 2, vec![0, 1]).unwrap();
        let tau = t.scalar_constant(0.2);
        let (ld, kept) = loss_ld(&mut t, &map, &sup, &space, tau, 0.3).unwrap();
        assert_eq!(t.item(ld), 0.0);
        assert_eq!(kept.fraction(), 0.0);
    }

    #[test]
    fn wd_hand_values() {
        let model = SegModel::init(2, &[], 2, 0).unwrap();
        let mut t = Tape::new();
        let bound = model.bind(&mut t);
        let map = map_of(&mut t, 1, 1, 2, vec![3.0, 0.0]);
        let b = Box::new(0, 0, 1, 1);
        let sup = BoxSupervision::new(vec![b], vec![vec![0.0, 1.0]]).unwrap();
        let l = loss_wd(&mut t, &bound, &map, &sup).unwrap();
        assert_abs_diff_eq!(t.item(l), 2.0, epsilon = 1e-11);

        let same = BoxSupervision::new(vec![b], vec![vec![5.0, 0.0]]).unwrap();
        let l = loss_wd(&mut t, &bound, &map, &same).unwrap();
        assert_abs_diff_eq!(t.item(l), 0.0, epsilon = 1e-11);

        let none = BoxSupervision::new(vec![], vec![]).unwrap();
        assert!(matches!(loss_wd(&mut t, &bound, &map, &none), Err(Error::EmptySupervision(_))));
    }

    #[test]
    fn total_loss_sums_present_terms() {
        let mut t = Tape::new();
        let (a, b, c) = (t.scalar_constant(1.0), t.scalar_constant(0.5), t.scalar_constant(0.25));
        let terms = LossTerms { hd: Some(a), ld: Some(b), wd: Some(c), kept_fraction: Some(0.7) };
        let (v, br) = total_loss(&mut t, &terms).unwrap();
        assert_eq!(t.item(v), 1.75);
        assert_eq!(br.total, 1.75);
        let (v, br) = total_loss(&mut t, &LossTerms { hd: Some(a), ..Default::default() }).unwrap();
        assert_eq!(t.item(v), 1.0);
        assert_eq!((br.l_ld, br.l_wd), (0.0, 0.0));
        assert!(matches!(total_loss(&mut t, &LossTerms::default()), Err(Error::EmptyBatch)));
        assert_eq!(br.csv_row(3, 0.07), "3,1,0,0,1,,0.07");
    }

    #[test]
    fn hd_gradient_on_random_instance() {
        use rand::Rng;
        let mut rng = crate::seed::SeedStreams::new(4).rng("t");
        let space = LabelSpace::new(
            (0..5).map(|i| LabelRecord::new(format!("l{i}"), "", (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())).collect(),
        )
        .unwrap();
        let labels: Vec<i64> = (0..16).map(|_| rng.random_range(-1..5)).collect();
        let sup = PixelSupervision::new(4, 4, labels).unwrap();
        let x = Tensor::new(&[4, 4, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = check_gradients(
            |t, x| {
                let map = EmbeddingMap::from_var(t, x)?;
                let tau = t.scalar_constant(0.5);
                loss_hd(t, &map, &sup, &space, tau)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
