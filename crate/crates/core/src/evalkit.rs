//! Pair labelling, identification and verification metrics, folds and the
//! evaluation protocols.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};
use crate::matchfuse::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
    #[serde(rename = "U")]
    Unknown,
}

impl Side {
    pub fn letter(&self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
            Side::Unknown => "U",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "L" | "l" | "left" => Ok(Side::Left),
            "R" | "r" | "right" => Ok(Side::Right),
            "U" | "u" | "unknown" => Ok(Side::Unknown),
            _ => Err(format!("side must be L, R or U, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityLabel {
    pub subject: String,
    pub side: Side,
}

/// Subject and side per image id, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdentityLabels {
    ids: Vec<String>,
    labels: HashMap<String, IdentityLabel>,
}

impl IdentityLabels {
    pub fn new(entries: Vec<(String, String, Side)>) -> Result<Self> {
        let mut out = IdentityLabels::default();
        for (id, subject, side) in entries {
            if out.labels.contains_key(&id) {
                return Err(Error::DuplicateId(id));
            }
            out.ids.push(id.clone());
            out.labels.insert(id, IdentityLabel { subject, side });
        }
        Ok(out)
    }

    pub fn get(&self, id: &str) -> Result<&IdentityLabel> {
        self.labels.get(id).ok_or_else(|| Error::UnlabeledId(id.to_string()))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SidePolicy {
    #[default]
    AnySide,
    /// Same-subject pairs from different sides are dropped entirely.
    SameSideOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairClass {
    Genuine,
    Impostor,
    Excluded,
}

/// Row-major class of every cell of `m`.
pub fn label_pairs(m: &ScoreMatrix, labels: &IdentityLabels, policy: SidePolicy) -> Result<Vec<PairClass>> {
    let probes: Vec<&IdentityLabel> = m.probe_ids.iter().map(|id| labels.get(id)).collect::<Result<_>>()?;
    let gallery: Vec<&IdentityLabel> = m.gallery_ids.iter().map(|id| labels.get(id)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(m.scores.len());
    for (i, p) in probes.iter().enumerate() {
        for (j, g) in gallery.iter().enumerate() {
            out.push(if m.is_self(i, j) {
                PairClass::Excluded
            } else if p.subject != g.subject {
                PairClass::Impostor
            } else if policy == SidePolicy::SameSideOnly && p.side != g.side {
                PairClass::Excluded
            } else {
                PairClass::Genuine
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcResult {
    /// `curve[k - 1]` is the fraction of probes with rank ≤ k.
    pub curve: Vec<f64>,
    pub rank1: f64,
    pub rank5: f64,
    pub ranks: Vec<usize>,
    pub evaluated: usize,
    /// Probes without a genuine gallery entry.
    pub skipped: usize,
}

impl CmcResult {
    pub fn at(&self, k: usize) -> f64 {
        self.curve[k.clamp(1, self.curve.len()) - 1]
    }
}

/// Rank = 1 + number of impostors strictly below the best genuine score.
pub fn cmc(m: &ScoreMatrix, labels: &IdentityLabels, policy: SidePolicy) -> Result<CmcResult> {
    if m.cols() == 0 || m.rows() == 0 {
        return Err(Error::NoGallery);
    }
    let classes = label_pairs(m, labels, policy)?;
    let g = m.cols();
    let mut ranks = Vec::new();
    let mut skipped = 0;
    for i in 0..m.rows() {
        let row = m.row(i);
        let cls = &classes[i * g..(i + 1) * g];
        let best = row
            .iter()
            .zip(cls)
            .filter(|(_, c)| **c == PairClass::Genuine)
            .map(|(s, _)| *s)
            .fold(f64::INFINITY, f64::min);
        if best == f64::INFINITY {
            skipped += 1;
            continue;
        }
        let below = row.iter().zip(cls).filter(|(s, c)| **c == PairClass::Impostor && **s < best).count();
        ranks.push(below + 1);
    }
    if ranks.is_empty() {
        return Err(Error::NoGallery);
    }
    let mut curve = vec![0.0; g];
    for &r in &ranks {
        curve[r - 1] += 1.0;
    }
    let n = ranks.len() as f64;
    let mut acc = 0.0;
    for c in curve.iter_mut() {
        acc += *c;
        *c = acc / n;
    }
    let mut out = CmcResult {
        curve,
        rank1: 0.0,
        rank5: 0.0,
        evaluated: ranks.len(),
        ranks,
        skipped,
    };
    out.rank1 = out.at(1);
    out.rank5 = out.at(5);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub eer: f64,
    pub auc: f64,
    pub points: Vec<RocPoint>,
    pub genuine: usize,
    pub impostor: usize,
}

/// Genuine and impostor score lists of a labelled matrix.
pub fn split_scores(m: &ScoreMatrix, labels: &IdentityLabels, policy: SidePolicy) -> Result<(Vec<f64>, Vec<f64>)> {
    let classes = label_pairs(m, labels, policy)?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (s, c) in m.scores.iter().zip(classes) {
        match c {
            PairClass::Genuine => genuine.push(*s),
            PairClass::Impostor => impostor.push(*s),
            PairClass::Excluded => {}
        }
    }
    Ok((genuine, impostor))
}

fn count_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&s| s < t)
}

/// A pair is accepted when its score is below the threshold. Thresholds
/// run over the distinct scores and then `f64::MAX`, which accepts every
/// finite score and still serializes as a JSON number.
pub fn roc_from_scores(genuine: &[f64], impostor: &[f64]) -> Result<RocResult> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::OneClassOnly {
            genuine: genuine.len(),
            impostor: impostor.len(),
        });
    }
    let sort = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (g, im) = (sort(genuine), sort(impostor));
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::MAX);
    let (ng, ni) = (g.len() as f64, im.len() as f64);
    let points: Vec<RocPoint> = thresholds
        .iter()
        .map(|&t| RocPoint {
            threshold: t,
            far: count_below(&im, t) as f64 / ni,
            frr: 1.0 - count_below(&g, t) as f64 / ng,
        })
        .collect();
    let mut auc = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        auc += (b.far - a.far) * ((1.0 - a.frr) + (1.0 - b.frr)) / 2.0;
    }
    let eer = eer_of(&points);
    Ok(RocResult {
        eer,
        auc: auc.clamp(0.0, 1.0),
        points,
        genuine: g.len(),
        impostor: im.len(),
    })
}

/// FAR − FRR goes from −1 to +1; interpolate at its first crossing of zero.
fn eer_of(points: &[RocPoint]) -> f64 {
    let d = |p: &RocPoint| p.far - p.frr;
    let k = points.iter().position(|p| d(p) >= 0.0).expect("the last point has FAR 1 and FRR 0");
    let b = points[k];
    if d(&b) == 0.0 || k == 0 {
        return b.far;
    }
    let a = points[k - 1];
    let alpha = -d(&a) / (d(&b) - d(&a));
    a.far + alpha * (b.far - a.far)
}

pub fn roc_eer_auc(m: &ScoreMatrix, labels: &IdentityLabels, policy: SidePolicy) -> Result<RocResult> {
    let (g, i) = split_scores(m, labels, policy)?;
    roc_from_scores(&g, &i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        if values.iter().all(|&v| v == values[0]) {
            return MeanStd { mean: values[0], std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

/// Balanced seeded fold assignment: shuffle, then position mod `k`.
pub fn image_folds(count: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::TooFewImages(format!("need at least 2 folds, got {k}")));
    }
    if count < k {
        return Err(Error::TooFewImages(format!("{count} images cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; count];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

/// Numbers compare numerically, everything else lexically.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => {
            let split = |s: &str| {
                let cut = s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
                (s[..cut].to_string(), s[cut..].parse::<u64>().ok())
            };
            let (pa, na) = split(a);
            let (pb, nb) = split(b);
            pa.cmp(&pb).then(na.cmp(&nb)).then_with(|| a.cmp(b))
        }
    }
}

/// Subjects sorted naturally; the first ⌈n/2⌉ train, the rest test.
pub fn subject_split(labels: &IdentityLabels) -> (Vec<String>, Vec<String>) {
    let mut subjects: Vec<String> = labels.ids().iter().map(|id| labels.labels[id].subject.clone()).collect();
    subjects.sort_by(|a, b| natural_cmp(a, b));
    subjects.dedup();
    let cut = subjects.len().div_ceil(2);
    let test = subjects.split_off(cut);
    (subjects, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Protocol {
    /// Each fold probes the rest; folds come from the manifest's `fold`
    /// column when every row has one.
    #[serde(rename = "awe-10fold")]
    Awe10Fold { folds: usize },
    /// All-vs-all over the test subjects.
    SubjectSplitAllvsall,
    /// All-vs-all over the first `first_n` test images.
    UercOverall { first_n: usize },
    /// Images of subjects with ≥ 2 test images against every test image.
    UercScalability,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Awe10Fold { .. } => "awe-10fold",
            Protocol::SubjectSplitAllvsall => "subject-split-allvsall",
            Protocol::UercOverall { .. } => "uerc-overall",
            Protocol::UercScalability => "uerc-scalability",
        }
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "awe-10fold" => Ok(Protocol::Awe10Fold { folds: 10 }),
            "subject-split-allvsall" => Ok(Protocol::SubjectSplitAllvsall),
            "uerc-scalability" => Ok(Protocol::UercScalability),
            "uerc-overall" => Ok(Protocol::UercOverall { first_n: 1800 }),
            _ => match s.strip_prefix("uerc-overall:") {
                Some(n) => n.parse().map(|first_n| Protocol::UercOverall { first_n }).map_err(|_| format!("bad image count in `{s}`")),
                None => match s.strip_prefix("awe-10fold:") {
                    Some(n) => n.parse().map(|folds| Protocol::Awe10Fold { folds }).map_err(|_| format!("bad fold count in `{s}`")),
                    None => Err(format!("unknown protocol `{s}`")),
                },
            },
        }
    }
}

/// One probe set against one gallery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalUnit {
    pub probes: Vec<String>,
    pub gallery: Vec<String>,
}

/// Test images in manifest order: rows marked `test`, or when no row has a
/// split, the subjects the subject split puts on the test side.
pub fn test_images(manifest: &DatasetManifest) -> Result<Vec<String>> {
    if manifest.entries.iter().any(|e| e.split != Split::None) {
        return Ok(manifest.entries.iter().filter(|e| e.split == Split::Test).map(|e| e.image_id.clone()).collect());
    }
    let (_, test) = subject_split(&manifest.labels()?);
    Ok(manifest
        .entries
        .iter()
        .filter(|e| test.contains(&e.subject_id))
        .map(|e| e.image_id.clone())
        .collect())
}

/// Probe and gallery id lists the protocol evaluates.
pub fn protocol_units(protocol: &Protocol, manifest: &DatasetManifest, seed: u64) -> Result<Vec<EvalUnit>> {
    let units = match *protocol {
        Protocol::Awe10Fold { folds } => {
            let ids: Vec<String> = manifest.entries.iter().map(|e| e.image_id.clone()).collect();
            let assignment: Vec<usize> = if !manifest.entries.is_empty() && manifest.entries.iter().all(|e| e.fold.is_some()) {
                manifest.entries.iter().map(|e| e.fold.unwrap()).collect()
            } else {
                image_folds(ids.len(), folds, seed)?
            };
            let distinct: std::collections::BTreeSet<usize> = assignment.iter().copied().collect();
            if distinct.len() < 2 {
                return Err(Error::ProtocolConfig("folding needs at least 2 folds".into()));
            }
            distinct
                .into_iter()
                .map(|f| EvalUnit {
                    probes: ids.iter().zip(&assignment).filter(|(_, &a)| a == f).map(|(id, _)| id.clone()).collect(),
                    gallery: ids.iter().zip(&assignment).filter(|(_, &a)| a != f).map(|(id, _)| id.clone()).collect(),
                })
                .collect()
        }
        Protocol::SubjectSplitAllvsall => {
            let test = test_images(manifest)?;
            vec![EvalUnit {
                probes: test.clone(),
                gallery: test,
            }]
        }
        Protocol::UercOverall { first_n } => {
            if first_n == 0 {
                return Err(Error::ProtocolConfig("first_n must be positive".into()));
            }
            let mut test = test_images(manifest)?;
            test.truncate(first_n);
            vec![EvalUnit {
                probes: test.clone(),
                gallery: test,
            }]
        }
        Protocol::UercScalability => {
            let test = test_images(manifest)?;
            let subject: HashMap<&str, &str> = manifest.entries.iter().map(|e| (e.image_id.as_str(), e.subject_id.as_str())).collect();
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for id in &test {
                *counts.entry(subject[id.as_str()]).or_default() += 1;
            }
            vec![EvalUnit {
                probes: test.iter().filter(|id| counts[subject[id.as_str()]] >= 2).cloned().collect(),
                gallery: test,
            }]
        }
    };
    for u in &units {
        if u.probes.is_empty() || u.gallery.is_empty() {
            return Err(Error::ProtocolConfig(format!("{} leaves an empty probe or gallery set", protocol.name())));
        }
    }
    Ok(units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub probes: usize,
    pub gallery: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub eer: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub rank1: MeanStd,
    pub rank5: MeanStd,
    pub eer: MeanStd,
    pub auc: MeanStd,
    pub per_fold: Vec<FoldMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    #[serde(default)]
    pub side_policy: SidePolicy,
}

/// Metrics of one protocol run. With several folds the scalar metrics are
/// fold means, the CMC is the mean curve and the ROC pools every fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub side_policy: SidePolicy,
    pub rank1: f64,
    pub rank5: f64,
    pub eer: f64,
    pub auc: f64,
    pub cmc: Vec<f64>,
    pub roc: Vec<RocPoint>,
    pub matrix_shape: [usize; 2],
    pub probes_evaluated: usize,
    pub probes_skipped: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub folds: Option<FoldStats>,
}

pub const MAX_ROC_POINTS: usize = 1001;

/// At most `max` points, always keeping both ends.
pub fn downsample_roc(points: &[RocPoint], max: usize) -> Vec<RocPoint> {
    if points.len() <= max || max < 2 {
        return points.to_vec();
    }
    let last = points.len() - 1;
    let mut idx: Vec<usize> = (0..max).map(|i| ((i as f64) * last as f64 / (max - 1) as f64).round() as usize).collect();
    idx.dedup();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Evaluate `scores` (covering every id the protocol touches) under `config`.
pub fn run_protocol(config: &ProtocolConfig, manifest: &DatasetManifest, scores: &ScoreMatrix, seed: u64) -> Result<EvalReport> {
    let labels = manifest.labels()?;
    let units = protocol_units(&config.protocol, manifest, seed)?;
    let mut per_fold = Vec::new();
    let mut curves = Vec::new();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    let (mut evaluated, mut skipped) = (0, 0);
    for u in &units {
        let m = scores.submatrix(&u.probes, &u.gallery)?;
        let c = cmc(&m, &labels, config.side_policy)?;
        let (g, i) = split_scores(&m, &labels, config.side_policy)?;
        let r = roc_from_scores(&g, &i)?;
        per_fold.push(FoldMetrics {
            probes: m.rows(),
            gallery: m.cols(),
            rank1: c.rank1,
            rank5: c.rank5,
            eer: r.eer,
            auc: r.auc,
        });
        evaluated += c.evaluated;
        skipped += c.skipped;
        curves.push(c.curve);
        genuine.extend(g);
        impostor.extend(i);
    }
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let cmc_curve: Vec<f64> = (0..len).map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64).collect();
    let pooled = roc_from_scores(&genuine, &impostor)?;
    let stat = |f: fn(&FoldMetrics) -> f64| MeanStd::of(&per_fold.iter().map(f).collect::<Vec<_>>());
    let (rank1, rank5, eer, auc) = (stat(|f| f.rank1), stat(|f| f.rank5), stat(|f| f.eer), stat(|f| f.auc));
    let shape = [per_fold[0].probes, per_fold[0].gallery];
    Ok(EvalReport {
        protocol: config.protocol.name().to_string(),
        side_policy: config.side_policy,
        rank1: rank1.mean,
        rank5: rank5.mean,
        eer: eer.mean,
        auc: auc.mean,
        cmc: cmc_curve,
        roc: downsample_roc(&pooled.points, MAX_ROC_POINTS),
        matrix_shape: shape,
        probes_evaluated: evaluated,
        probes_skipped: skipped,
        genuine_pairs: pooled.genuine,
        impostor_pairs: pooled.impostor,
        folds: (units.len() > 1).then_some(FoldStats {
            rank1,
            rank5,
            eer,
            auc,
            per_fold,
        }),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,identification_rate\n");
        for (k, v) in self.cmc.iter().enumerate() {
            s += &format!("{},{}\n", k + 1, v);
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("threshold,far,frr\n");
        for p in &self.roc {
            s += &format!("{},{},{}\n", p.threshold, p.far, p.frr);
        }
        s
    }
}

/// Images per subject.
pub fn subject_counts(labels: &IdentityLabels) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for id in labels.ids() {
        *out.entry(labels.labels[id].subject.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn labels(v: &[(&str, &str, Side)]) -> IdentityLabels {
        IdentityLabels::new(v.iter().map(|(a, b, s)| (a.to_string(), b.to_string(), *s)).collect()).unwrap()
    }

    #[test]
    fn side_policy() {
        let l = labels(&[("a", "s1", Side::Left), ("b", "s1", Side::Right), ("c", "s2", Side::Left)]);
        let m = ScoreMatrix::new(ids(&["a"]), ids(&["a", "b", "c"]), vec![0.0, 1.0, 2.0], false).unwrap();
        use PairClass::*;
        assert_eq!(label_pairs(&m, &l, SidePolicy::AnySide).unwrap(), vec![Excluded, Genuine, Impostor]);
        assert_eq!(label_pairs(&m, &l, SidePolicy::SameSideOnly).unwrap(), vec![Excluded, Excluded, Impostor]);
        let bad = ScoreMatrix::new(ids(&["z"]), ids(&["a"]), vec![0.0], false).unwrap();
        assert!(matches!(label_pairs(&bad, &l, SidePolicy::AnySide), Err(Error::UnlabeledId(_))));
        assert!(matches!(
            IdentityLabels::new(vec![("a".into(), "s".into(), Side::Left), ("a".into(), "t".into(), Side::Left)]),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn ties_rank_first() {
        let l = labels(&[("a", "1", Side::Left), ("b", "1", Side::Left), ("c", "2", Side::Left)]);
        let all = ids(&["a", "b", "c"]);
        let m = ScoreMatrix::new(all.clone(), all, vec![0.5; 9], false).unwrap();
        let c = cmc(&m, &l, SidePolicy::AnySide).unwrap();
        assert_eq!(c.ranks, vec![1, 1]);
        assert_eq!(c.skipped, 1);
        assert_eq!(c.rank1, 1.0);
    }

    #[test]
    fn roc_extremes() {
        let r = roc_from_scores(&[0.1, 0.2], &[0.5, 0.7, 0.9]).unwrap();
        assert_eq!((r.eer, r.auc), (0.0, 1.0));
        let r = roc_from_scores(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-12);
        assert!((r.auc - 0.5).abs() < 1e-12);
        assert!(matches!(roc_from_scores(&[], &[1.0]), Err(Error::OneClassOnly { .. })));
    }

    #[test]
    fn folds_and_split() {
        let f = image_folds(600, 10, 3).unwrap();
        for k in 0..10 {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 60);
        }
        assert_eq!(f, image_folds(600, 10, 3).unwrap());
        assert!(matches!(image_folds(5, 10, 0), Err(Error::TooFewImages(_))));
        let entries = (1..=231).map(|s| (format!("img{s}"), format!("{s}"), Side::Left)).collect();
        let (train, test) = subject_split(&IdentityLabels::new(entries).unwrap());
        assert_eq!((train.len(), test.len()), (116, 115));
        assert_eq!(train.last().unwrap(), "116");
        assert_eq!(test[0], "117");
    }

    #[test]
    fn natural_order() {
        let mut v = vec!["s10", "s2", "s1", "t", "10", "9"];
        v.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(v, vec!["9", "10", "s1", "s2", "s10", "t"]);
    }

    #[test]
    fn protocol_names() {
        for p in ["awe-10fold", "subject-split-allvsall", "uerc-overall", "uerc-scalability"] {
            assert_eq!(p.parse::<Protocol>().unwrap().name(), p);
        }
        assert_eq!("uerc-overall:40".parse::<Protocol>().unwrap(), Protocol::UercOverall { first_n: 40 });
        let json = serde_json::to_string(&Protocol::Awe10Fold { folds: 10 }).unwrap();
        assert_eq!(json, r#"{"name":"awe-10fold","folds":10}"#);
    }

    #[test]
    fn roc_downsampling_keeps_ends() {
        let pts: Vec<RocPoint> = (0..5000)
            .map(|i| RocPoint {
                threshold: i as f64,
                far: i as f64 / 4999.0,
                frr: 1.0 - i as f64 / 4999.0,
            })
            .collect();
        let d = downsample_roc(&pts, MAX_ROC_POINTS);
        assert_eq!(d.len(), MAX_ROC_POINTS);
        assert_eq!(d[0], pts[0]);
        assert_eq!(*d.last().unwrap(), pts[4999]);
    }
}
