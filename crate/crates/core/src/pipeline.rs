//! End-to-end run: detect → normalize → describe → match → fuse → evaluate.
//!
//! Every stage reads its inputs from the output directory and writes its
//! results there, so any stage can be rerun on its own and produces the
//! same bytes.
//!
//! Layout under `out_dir`: `landmarks/<id>.json`, `normalized/<id>.png`
//! with a `<id>.json` provenance sidecar, `descriptors/<kind>.earn|.json`,
//! `models/`, `scores/<kind>.earn|.json`, `scores/fused.earn|.json`,
//! `report.json`, `cmc.csv`, `roc.csv`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{load_network, load_tensors, save_network, save_tensors, write_atomic};
use crate::descriptors::{extract_handcrafted, pca_fit, pca_project, BsifBank, Descriptor, DescriptorKind, HandcraftedParams, Metric};
use crate::error::{Error, Result};
use crate::evalkit::{protocol_units, run_protocol, subject_split, EvalReport, Protocol, ProtocolConfig, Side, SidePolicy};
use crate::imgcore::{encode_png, flip_horizontal, load_image, AffineMap, GrayImage};
use crate::landmarks::LandmarkSet;
use crate::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::matchfuse::{fuse_weighted, minmax_normalize, score_matrix, FusionRule, ScoreMatrix};
use crate::nn::{classify_side, detect_landmarks, extract_cnn_descriptor, train_descriptor_net, DescriptorTraining, LandmarkNet, Network, Tensor};
use crate::normalizer::{normalize_geometric_with_map, CropWindow, NORMALIZED_SIZE};

pub const STAGES: [&str; 6] = ["detect", "normalize", "describe", "match", "fuse", "evaluate"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub detect: bool,
    pub normalize: bool,
    pub describe: bool,
    #[serde(rename = "match")]
    pub match_scores: bool,
    pub fuse: bool,
    pub evaluate: bool,
}

impl Default for StageToggles {
    /// Everything except detection, which needs trained landmark models.
    fn default() -> Self {
        StageToggles {
            detect: false,
            normalize: true,
            describe: true,
            match_scores: true,
            fuse: true,
            evaluate: true,
        }
    }
}

impl StageToggles {
    pub fn as_array(&self) -> [bool; 6] {
        [self.detect, self.normalize, self.describe, self.match_scores, self.fuse, self.evaluate]
    }

    pub fn enabled(&self, stage: &str) -> bool {
        STAGES.iter().position(|s| *s == stage).is_some_and(|i| self.as_array()[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stages: StageToggles,
    pub descriptors: Vec<DescriptorKind>,
    pub rule: FusionRule,
    /// Per-descriptor weights for the sum rule; equal when absent.
    pub weights: Option<Vec<f64>>,
    pub protocol: ProtocolConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stage-1 and stage-2 landmark network weights.
    pub landmark_models: Option<[PathBuf; 2]>,
    pub side_model: Option<PathBuf>,
    /// Trained descriptor network; trained on the training split when absent.
    pub cnn_model: Option<PathBuf>,
    pub cnn_training: DescriptorTraining,
    pub bsif_bank: Option<PathBuf>,
    pub allow_random_bsif: bool,
    pub handcrafted: HandcraftedParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: StageToggles::default(),
            descriptors: vec![DescriptorKind::Hog],
            rule: FusionRule::Sum,
            weights: None,
            protocol: ProtocolConfig {
                protocol: Protocol::SubjectSplitAllvsall,
                side_policy: SidePolicy::AnySide,
            },
            seed: 0,
            out_dir: PathBuf::from("earforge-out"),
            landmark_models: None,
            side_model: None,
            cnn_model: None,
            cnn_training: DescriptorTraining::default(),
            bsif_bank: None,
            allow_random_bsif: false,
            handcrafted: HandcraftedParams::default(),
        }
    }
}

/// FNV-1a of the stage name mixed into the root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    root ^ h
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let config: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    /// Enabled stages must be contiguous; stages before the first enabled
    /// one are read back from `out_dir`.
    pub fn validate(&self) -> Result<()> {
        let on = self.stages.as_array();
        let first = on.iter().position(|&b| b);
        let last = on.iter().rposition(|&b| b);
        if let (Some(a), Some(b)) = (first, last) {
            if let Some(gap) = (a..=b).find(|&i| !on[i]) {
                return Err(Error::ProtocolConfig(format!(
                    "stage `{}` is disabled between enabled stages `{}` and `{}`",
                    STAGES[gap], STAGES[a], STAGES[b]
                )));
            }
        } else {
            return Err(Error::ProtocolConfig("no stage enabled".into()));
        }
        if self.descriptors.is_empty() {
            return Err(Error::ProtocolConfig("no descriptor selected".into()));
        }
        let mut seen = self.descriptors.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.descriptors.len() {
            return Err(Error::ProtocolConfig("descriptor listed twice".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.descriptors.len() {
                return Err(Error::ProtocolConfig(format!("{} weights for {} descriptors", w.len(), self.descriptors.len())));
            }
        }
        if self.stages.detect && self.landmark_models.is_none() {
            return Err(Error::ProtocolConfig("detection needs landmark_models".into()));
        }
        Ok(())
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.out_dir.join(sub)
    }
}

/// How the side of a normalized image was settled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub manifest_side: Side,
    pub resolved_side: Side,
    /// `manifest`, `classifier` or `default`.
    pub side_source: String,
    pub confidence: Option<f64>,
    pub flipped: bool,
    /// Orientation of the stored image; always `L`.
    pub canonical_side: Side,
    /// Stored-image pixel to source-image pixel, flip included.
    pub transform: AffineMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DescriptorSidecar {
    kind: DescriptorKind,
    metric: Metric,
    ids: Vec<String>,
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

fn file_id(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.#".contains(c) { c } else { '_' }).collect()
}

/// Images that train learned components: rows marked `train`, or when no
/// row carries a split, the first half of the subjects.
pub fn training_entries(manifest: &DatasetManifest) -> Result<Vec<&ManifestEntry>> {
    if manifest.entries.iter().any(|e| e.split != Split::None) {
        return Ok(manifest.entries.iter().filter(|e| e.split == Split::Train).collect());
    }
    let (train, _) = subject_split(&manifest.labels()?);
    Ok(manifest.entries.iter().filter(|e| train.contains(&e.subject_id)).collect())
}

fn ear_window(entry: &ManifestEntry, img: &GrayImage) -> Result<CropWindow> {
    match entry.bbox {
        Some([x, y, w, h]) => CropWindow::from_bbox(x, y, w, h),
        None => {
            let (w, h) = (img.width() as f64, img.height() as f64);
            CropWindow::new([(w - 1.0) / 2.0, (h - 1.0) / 2.0], w.min(h) / crate::normalizer::DETECTOR_MARGIN)
        }
    }
}

fn detect_stage(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<()> {
    let [p1, p2] = config.landmark_models.as_ref().ok_or_else(|| Error::MissingArtifact("landmark_models".into()))?;
    let s1 = LandmarkNet::new(load_network(p1)?)?;
    let s2 = LandmarkNet::new(load_network(p2)?)?;
    let dir = config.dir("landmarks");
    std::fs::create_dir_all(&dir)?;
    manifest.entries.par_iter().try_for_each(|e| {
        let img = load_image(&manifest.image_path(e))?;
        let lm = detect_landmarks(&s1, &s2, &img, &ear_window(e, &img)?)?;
        write_atomic(&dir.join(format!("{}.json", file_id(&e.image_id))), lm.to_json().as_bytes())
    })
}

fn landmarks_for(config: &PipelineConfig, manifest: &DatasetManifest, e: &ManifestEntry) -> Result<LandmarkSet> {
    let detected = config.dir("landmarks").join(format!("{}.json", file_id(&e.image_id)));
    if detected.exists() {
        return LandmarkSet::load(&detected);
    }
    match manifest.landmarks_path(e) {
        Some(p) => LandmarkSet::load(&p),
        None => Err(Error::MissingArtifact(format!("landmarks for `{}`", e.image_id))),
    }
}

fn normalize_stage(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<()> {
    let side_net: Option<Network<f32>> = config.side_model.as_deref().map(load_network).transpose()?;
    let dir = config.dir("normalized");
    std::fs::create_dir_all(&dir)?;
    manifest.entries.par_iter().try_for_each(|e| {
        let img = load_image(&manifest.image_path(e))?;
        let lm = landmarks_for(config, manifest, e)?;
        let (norm, map) = normalize_geometric_with_map(&img, &lm)?;
        let (resolved, source, confidence) = match (e.side, &side_net) {
            (Side::Unknown, Some(net)) => {
                let p = classify_side(net, &norm)?;
                (p.side, "classifier", Some(p.confidence))
            }
            (Side::Unknown, None) => (Side::Left, "default", None),
            (s, _) => (s, "manifest", None),
        };
        let flipped = resolved == Side::Right;
        let (out, transform) = if flipped {
            let mirror = AffineMap::new([[-1.0, 0.0], [0.0, 1.0]], [NORMALIZED_SIZE as f64 - 1.0, 0.0]);
            (flip_horizontal(&norm), map.compose(&mirror))
        } else {
            (norm, map)
        };
        let stem = file_id(&e.image_id);
        write_atomic(&dir.join(format!("{stem}.png")), &encode_png(&out)?)?;
        let prov = Provenance {
            image_id: e.image_id.clone(),
            manifest_side: e.side,
            resolved_side: resolved,
            side_source: source.to_string(),
            confidence,
            flipped,
            canonical_side: Side::Left,
            transform,
        };
        write_atomic(&dir.join(format!("{stem}.json")), &pretty(&prov)?)
    })
}

/// Normalized image of an entry, refusing anything not stored left-facing.
pub fn load_normalized(out_dir: &Path, image_id: &str) -> Result<GrayImage> {
    let stem = file_id(image_id);
    let side = out_dir.join("normalized").join(format!("{stem}.json"));
    if !side.exists() {
        return Err(Error::MissingArtifact(format!("normalized image of `{image_id}`")));
    }
    let prov: Provenance = serde_json::from_str(&std::fs::read_to_string(&side)?)?;
    if prov.canonical_side != Side::Left {
        return Err(Error::ProtocolConfig(format!("`{image_id}` is not stored in the canonical orientation")));
    }
    load_image(&out_dir.join("normalized").join(format!("{stem}.png")))
}

fn descriptor_path(config: &PipelineConfig, kind: DescriptorKind) -> PathBuf {
    config.dir("descriptors").join(format!("{kind}.earn"))
}

fn save_descriptors(path: &Path, kind: DescriptorKind, ids: &[String], rows: &[Descriptor]) -> Result<()> {
    let width = rows.first().map_or(0, Descriptor::len);
    let mut data = Vec::with_capacity(rows.len() * width);
    for d in rows {
        if d.len() != width {
            return Err(Error::LengthMismatch { left: width, right: d.len() });
        }
        data.extend_from_slice(&d.values);
    }
    let t = Tensor::new(vec![rows.len(), width], data)?;
    save_tensors(path, &[(kind.name().to_string(), &t)])?;
    let side = DescriptorSidecar {
        kind,
        metric: kind.metric(),
        ids: ids.to_vec(),
    };
    write_atomic(&path.with_extension("json"), &pretty(&side)?)
}

/// Stored descriptors of one family, keyed by image id.
pub fn load_descriptors(path: &Path) -> Result<Vec<(String, Descriptor)>> {
    let sp = path.with_extension("json");
    if !sp.exists() || !path.exists() {
        return Err(Error::MissingArtifact(format!("descriptors {}", path.display())));
    }
    let side: DescriptorSidecar = serde_json::from_str(&std::fs::read_to_string(&sp)?)?;
    let (_, t) = load_tensors::<f64>(path)?
        .into_iter()
        .find(|(n, _)| n == side.kind.name())
        .ok_or_else(|| Error::Format(format!("no `{}` tensor", side.kind)))?;
    if t.shape().len() != 2 || t.shape()[0] != side.ids.len() {
        return Err(Error::Format(format!("descriptor tensor shape {:?} does not match {} ids", t.shape(), side.ids.len())));
    }
    let w = t.shape()[1];
    side.ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| Ok((id, Descriptor::new(side.kind, t.data()[i * w..(i + 1) * w].to_vec())?)))
        .collect()
}

fn bsif_bank(config: &PipelineConfig) -> Result<BsifBank> {
    match &config.bsif_bank {
        Some(p) => BsifBank::load(p),
        None if config.allow_random_bsif => Ok(BsifBank::random(stage_seed(config.seed, "bsif"))),
        None => Err(Error::MissingFilterBank("set bsif_bank or allow random filters".into())),
    }
}

fn train_cnn(config: &PipelineConfig, manifest: &DatasetManifest, images: &HashMap<String, GrayImage>) -> Result<Network<f32>> {
    let train = training_entries(manifest)?;
    let mut subjects: Vec<&str> = train.iter().map(|e| e.subject_id.as_str()).collect();
    subjects.sort_by(|a, b| crate::evalkit::natural_cmp(a, b));
    subjects.dedup();
    let mut imgs = Vec::new();
    let mut labels = Vec::new();
    for e in &train {
        imgs.push(images[&e.image_id].clone());
        labels.push(subjects.iter().position(|s| *s == e.subject_id).expect("subject listed"));
    }
    let mut opts = config.cnn_training.clone();
    opts.seed = stage_seed(config.seed, "cnn");
    let (net, log) = train_descriptor_net(&imgs, &labels, &opts)?;
    save_network(&net, &config.dir("models").join("cnn.earn"))?;
    write_atomic(&config.dir("models").join("cnn_log.csv"), log.to_csv().as_bytes())?;
    Ok(net)
}

fn describe_stage(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<()> {
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.image_id.clone()).collect();
    let loaded: Vec<GrayImage> = ids.par_iter().map(|id| load_normalized(&config.out_dir, id)).collect::<Result<_>>()?;
    let images: HashMap<String, GrayImage> = ids.iter().cloned().zip(loaded.iter().cloned()).collect();
    let mut params = config.handcrafted.clone();
    if config.descriptors.contains(&DescriptorKind::Bsif) {
        params.bsif = Some(bsif_bank(config)?);
    }
    for &kind in &config.descriptors {
        let rows: Vec<Descriptor> = match kind {
            DescriptorKind::Cnn => {
                let cached = config.dir("models").join("cnn.earn");
                let net = match &config.cnn_model {
                    Some(p) => load_network(p)?,
                    None if cached.exists() => load_network(&cached)?,
                    None => train_cnn(config, manifest, &images)?,
                };
                loaded.par_iter().map(|img| extract_cnn_descriptor(&net, img)).collect::<Result<_>>()?
            }
            DescriptorKind::Pca => {
                let train: Vec<GrayImage> = training_entries(manifest)?.iter().map(|e| images[&e.image_id].clone()).collect();
                let model = pca_fit(&train)?;
                write_atomic(&config.dir("models").join("pca.json"), &pretty(&model)?)?;
                loaded.par_iter().map(|img| pca_project(&model, img)).collect::<Result<_>>()?
            }
            k => loaded.par_iter().map(|img| extract_handcrafted(k, img, &params)).collect::<Result<_>>()?,
        };
        save_descriptors(&descriptor_path(config, kind), kind, &ids, &rows)?;
    }
    Ok(())
}

/// Every image the protocol touches, in manifest order.
pub fn evaluation_ids(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<Vec<String>> {
    let units = protocol_units(&config.protocol.protocol, manifest, stage_seed(config.seed, "folds"))?;
    let used: std::collections::HashSet<&String> = units.iter().flat_map(|u| u.probes.iter().chain(&u.gallery)).collect();
    Ok(manifest.entries.iter().map(|e| &e.image_id).filter(|id| used.contains(id)).cloned().collect())
}

fn scores_path(config: &PipelineConfig, name: &str) -> PathBuf {
    config.dir("scores").join(format!("{name}.earn"))
}

fn match_stage(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<()> {
    let eval = evaluation_ids(config, manifest)?;
    for &kind in &config.descriptors {
        let all: HashMap<String, Descriptor> = load_descriptors(&descriptor_path(config, kind))?.into_iter().collect();
        let set: Vec<(String, Descriptor)> = eval
            .iter()
            .map(|id| {
                all.get(id)
                    .map(|d| (id.clone(), d.clone()))
                    .ok_or_else(|| Error::MissingArtifact(format!("{kind} descriptor of `{id}`")))
            })
            .collect::<Result<_>>()?;
        let m = score_matrix(&set, &set)?;
        m.save(&scores_path(config, kind.name()))?;
    }
    Ok(())
}

fn fuse_stage(config: &PipelineConfig) -> Result<()> {
    let normalized: Vec<ScoreMatrix> = config
        .descriptors
        .iter()
        .map(|k| minmax_normalize(&ScoreMatrix::load(&scores_path(config, k.name()))?))
        .collect::<Result<_>>()?;
    let fused = fuse_weighted(&normalized, config.rule, config.weights.as_deref())?;
    fused.save(&scores_path(config, "fused"))
}

fn evaluate_stage(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<EvalReport> {
    let fused = scores_path(config, "fused");
    let scores = if fused.exists() {
        ScoreMatrix::load(&fused)?
    } else if config.descriptors.len() == 1 {
        ScoreMatrix::load(&scores_path(config, config.descriptors[0].name()))?
    } else {
        return Err(Error::MissingArtifact("fused score matrix".into()));
    };
    let report = run_protocol(&config.protocol, manifest, &scores, stage_seed(config.seed, "folds"))?;
    write_atomic(&config.out_dir.join("report.json"), report.to_json()?.as_bytes())?;
    write_atomic(&config.out_dir.join("cmc.csv"), report.cmc_csv().as_bytes())?;
    write_atomic(&config.out_dir.join("roc.csv"), report.roc_csv().as_bytes())?;
    Ok(report)
}

/// Run the enabled stages in order. Returns the report when evaluation ran.
pub fn run_pipeline(config: &PipelineConfig, manifest: &DatasetManifest) -> Result<Option<EvalReport>> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    write_atomic(&config.out_dir.join("pipeline_config.json"), &pretty(config)?)?;
    let s = &config.stages;
    let wrap = |stage: &str, r: Result<()>| r.map_err(|e| e.in_stage(stage));
    if s.detect {
        log::info!("detecting landmarks on {} images", manifest.len());
        wrap("detect", detect_stage(config, manifest))?;
    }
    if s.normalize {
        log::info!("normalizing {} images", manifest.len());
        wrap("normalize", normalize_stage(config, manifest))?;
    }
    if s.describe {
        log::info!("extracting {:?}", config.descriptors);
        wrap("describe", describe_stage(config, manifest))?;
    }
    if s.match_scores {
        wrap("match", match_stage(config, manifest))?;
    }
    if s.fuse {
        wrap("fuse", fuse_stage(config))?;
    }
    if s.evaluate {
        let report = evaluate_stage(config, manifest).map_err(|e| e.in_stage("evaluate"))?;
        log::info!("rank-1 {:.4}, EER {:.4}", report.rank1, report.eer);
        return Ok(Some(report));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_chain_must_be_contiguous() {
        let mut c = PipelineConfig::default();
        c.validate().unwrap();
        c.stages.match_scores = false;
        assert!(matches!(c.validate(), Err(Error::ProtocolConfig(_))));
        c.stages = StageToggles {
            detect: false,
            normalize: false,
            describe: false,
            match_scores: false,
            fuse: true,
            evaluate: true,
        };
        c.validate().unwrap();
        c.stages.detect = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"descriptors": ["hog", "cnn"], "rule": "max"}"#).unwrap();
        assert_eq!(c.descriptors, vec![DescriptorKind::Hog, DescriptorKind::Cnn]);
        assert_eq!(c.rule, FusionRule::Max);
        assert_eq!(c.protocol.protocol, Protocol::SubjectSplitAllvsall);
        let s: StageToggles = serde_json::from_str(r#"{"match": false}"#).unwrap();
        assert!(!s.match_scores && s.fuse);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "cnn"), stage_seed(1, "folds"));
        assert_eq!(stage_seed(1, "cnn"), stage_seed(1, "cnn"));
    }
}
