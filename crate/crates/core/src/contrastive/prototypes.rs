//! Class-focused prototypes.
//!
//! Foreground prototypes pool source and target evidence; background
//! prototypes come from the target domain only, as a pseudo-label mean plus
//! k-means clusters of the pseudo-labelled background features.

use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::contrastive::kmeans::{kmeans, KMeansConfig};
use crate::contrastive::{normalize, unit_feature};
use crate::error::{Error, Result};
use crate::tensor_io::{load_f32_array, store_f32_array};
use crate::types::{check_same_shape, FeatureMap, LabelMap, PointSet, ProbMap, BACKGROUND, FOREGROUND};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Densely labelled source image.
#[derive(Clone, Copy, Debug)]
pub struct SourceView<'a> {
    pub features: &'a FeatureMap,
    pub labels: &'a LabelMap,
    pub prob: &'a ProbMap,
}

/// Weakly labelled target image with its current pseudo-label.
#[derive(Clone, Copy, Debug)]
pub struct TargetView<'a> {
    pub features: &'a FeatureMap,
    pub points: &'a PointSet,
    pub prob: &'a ProbMap,
    pub pseudo_label: &'a LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundPrototypes {
    pub source: Option<Vec<f64>>,
    pub target_label: Option<Vec<f64>>,
    pub pseudo: Option<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundPrototypes {
    pub pseudo: Vec<f64>,
    pub clusters: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Normalized mean of normalized features over a pixel subset; `None` when empty.
fn masked_mean(z: &FeatureMap, pixels: impl Iterator<Item = usize>) -> Option<Vec<f64>> {
    let mut acc = vec![0f64; z.channels()];
    let mut n = 0usize;
    for i in pixels {
        if let Some(v) = unit_feature(z, i) {
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    normalize(&acc)
}

fn mean_of(vectors: &[&Vec<f64>]) -> Result<Vec<f64>> {
    let dim = vectors[0].len();
    let mut acc = vec![0f64; dim];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    normalize(&acc).ok_or_else(|| Error::invariant("prototypes cancel out; mean prototype is undefined"))
}

pub fn foreground_prototypes(
    source: Option<SourceView<'_>>,
    target: TargetView<'_>,
    delta_e: f64,
) -> Result<ForegroundPrototypes> {
    let source_proto = match source {
        Some(s) => {
            check_same_shape("source features/labels", s.features.shape(), s.labels.shape())?;
            check_same_shape("source features/probabilities", s.features.shape(), s.prob.shape())?;
            let pixels = s
                .labels
                .grid()
                .data()
                .iter()
                .zip(s.prob.grid().data())
                .enumerate()
                .filter(|(_, (&y, &p))| y == FOREGROUND && p as f64 > delta_e)
                .map(|(i, _)| i);
            masked_mean(s.features, pixels)
        }
        None => None,
    };

    let z = target.features;
    check_same_shape("target features/probabilities", z.shape(), target.prob.shape())?;
    check_same_shape("target features/pseudo-label", z.shape(), target.pseudo_label.shape())?;
    if let Some(s) = source {
        if s.features.channels() != z.channels() {
            return Err(Error::shape("source and target features differ in channel count"));
        }
    }
    target.points.check_bounds(z.shape())?;
    let w = z.shape().1;
    let label_pixels = target
        .points
        .iter()
        .map(|p| p.row * w + p.col)
        .filter(|&i| target.prob.grid().data()[i] as f64 > delta_e);
    let target_label = masked_mean(z, label_pixels);
    let pseudo_pixels = target
        .pseudo_label
        .grid()
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == FOREGROUND)
        .map(|(i, _)| i);
    let pseudo = masked_mean(z, pseudo_pixels);

    let present: Vec<&Vec<f64>> = [&source_proto, &target_label, &pseudo].into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::NoForegroundEvidence);
    }
    let mean = mean_of(&present)?;
    Ok(ForegroundPrototypes { source: source_proto, target_label, pseudo, mean })
}

pub fn background_prototypes(
    z: &FeatureMap,
    pseudo_label: &LabelMap,
    kmeans_config: &KMeansConfig,
) -> Result<BackgroundPrototypes> {
    check_same_shape("background features/pseudo-label", z.shape(), pseudo_label.shape())?;
    let feats: Vec<Vec<f64>> = pseudo_label
        .grid()
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == BACKGROUND)
        .filter_map(|(i, _)| unit_feature(z, i))
        .collect();
    if feats.len() < kmeans_config.k {
        return Err(Error::InsufficientBackground { found: feats.len(), required: kmeans_config.k });
    }
    let mut acc = vec![0f64; z.channels()];
    for v in &feats {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let pseudo = normalize(&acc).ok_or_else(|| Error::invariant("background features cancel out"))?;
    let fit = kmeans(&feats, kmeans_config)?;
    let clusters = fit
        .centroids
        .iter()
        .map(|c| normalize(c).ok_or_else(|| Error::invariant("k-means centroid at the origin")))
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<&Vec<f64>> = vec![&pseudo];
    all.extend(clusters.iter());
    let mean = mean_of(&all)?;
    Ok(BackgroundPrototypes { pseudo, clusters, mean })
}

/// Named position of a prototype in the bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    SourceForeground,
    TargetLabelForeground,
    PseudoForeground,
    ForegroundMean,
    PseudoBackground,
    BackgroundCluster(usize),
    BackgroundMean,
}

impl Slot {
    pub fn name(self) -> String {
        match self {
            Slot::SourceForeground => "fg_source".into(),
            Slot::TargetLabelForeground => "fg_target_label".into(),
            Slot::PseudoForeground => "fg_pseudo".into(),
            Slot::ForegroundMean => "fg_mean".into(),
            Slot::PseudoBackground => "bg_pseudo".into(),
            Slot::BackgroundCluster(k) => format!("bg_cluster_{k}"),
            Slot::BackgroundMean => "bg_mean".into(),
        }
    }

    pub fn parse(name: &str) -> Result<Slot> {
        Ok(match name {
            "fg_source" => Slot::SourceForeground,
            "fg_target_label" => Slot::TargetLabelForeground,
            "fg_pseudo" => Slot::PseudoForeground,
            "fg_mean" => Slot::ForegroundMean,
            "bg_pseudo" => Slot::PseudoBackground,
            "bg_mean" => Slot::BackgroundMean,
            other => match other.strip_prefix("bg_cluster_").and_then(|k| k.parse().ok()) {
                Some(k) => Slot::BackgroundCluster(k),
                None => return Err(Error::invariant(format!("unknown prototype slot '{other}'"))),
            },
        })
    }

    pub fn class_id(self) -> u8 {
        match self {
            Slot::SourceForeground | Slot::TargetLabelForeground | Slot::PseudoForeground | Slot::ForegroundMean => 1,
            _ => 0,
        }
    }

    fn is_mean(self) -> bool {
        matches!(self, Slot::ForegroundMean | Slot::BackgroundMean)
    }
}

/// The mean prototype of a class and its members (the negatives seen by the other class).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    pub mean: Vec<f64>,
    pub members: Vec<(Slot, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub background: ClassPrototypes,
    pub foreground: ClassPrototypes,
    /// Training iteration at which the bank was built.
    pub built_at: u64,
    pub refresh_period: u64,
}

#[derive(Serialize, Deserialize)]
struct BankSidecar {
    schema_version: u32,
    channels: usize,
    built_at: u64,
    refresh_period: u64,
    slots: Vec<String>,
}

fn check_unit(slot: Slot, v: &[f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::invariant(format!("prototype {} has norm {n}, expected 1", slot.name())));
    }
    Ok(())
}

impl PrototypeBank {
    pub fn new(fg: ForegroundPrototypes, bg: BackgroundPrototypes, built_at: u64, refresh_period: u64) -> Self {
        let mut fg_members = Vec::new();
        for (slot, v) in [
            (Slot::SourceForeground, fg.source),
            (Slot::TargetLabelForeground, fg.target_label),
            (Slot::PseudoForeground, fg.pseudo),
        ] {
            if let Some(v) = v {
                fg_members.push((slot, v));
            }
        }
        let mut bg_members = vec![(Slot::PseudoBackground, bg.pseudo)];
        bg_members.extend(bg.clusters.into_iter().enumerate().map(|(k, v)| (Slot::BackgroundCluster(k), v)));
        PrototypeBank {
            background: ClassPrototypes { mean: bg.mean, members: bg_members },
            foreground: ClassPrototypes { mean: fg.mean, members: fg_members },
            built_at,
            refresh_period,
        }
    }

    /// Assembles a bank from explicit class sets, checking unit norms and slot classes.
    pub fn from_classes(background: ClassPrototypes, foreground: ClassPrototypes, built_at: u64, refresh_period: u64) -> Result<Self> {
        let bank = PrototypeBank { background, foreground, built_at, refresh_period };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.foreground.mean.len();
        for (class, set) in [(0u8, &self.background), (1u8, &self.foreground)] {
            check_unit(if class == 1 { Slot::ForegroundMean } else { Slot::BackgroundMean }, &set.mean)?;
            for (slot, v) in &set.members {
                if slot.class_id() != class || slot.is_mean() {
                    return Err(Error::invariant(format!("slot {} cannot be a class-{class} member", slot.name())));
                }
                if v.len() != dim {
                    return Err(Error::shape(format!("prototype {} has dimension {}, expected {dim}", slot.name(), v.len())));
                }
                check_unit(*slot, v)?;
            }
            if set.mean.len() != dim {
                return Err(Error::shape("class means differ in dimension"));
            }
        }
        Ok(())
    }

    pub fn class(&self, class_id: u8) -> &ClassPrototypes {
        if class_id == 1 {
            &self.foreground
        } else {
            &self.background
        }
    }

    pub fn channels(&self) -> usize {
        self.foreground.mean.len()
    }

    pub fn is_stale(&self, iteration: u64) -> bool {
        iteration.saturating_sub(self.built_at) >= self.refresh_period
    }

    fn rows(&self) -> Vec<(Slot, &Vec<f64>)> {
        let mut rows: Vec<(Slot, &Vec<f64>)> = self.foreground.members.iter().map(|(s, v)| (*s, v)).collect();
        rows.push((Slot::ForegroundMean, &self.foreground.mean));
        rows.extend(self.background.members.iter().map(|(s, v)| (*s, v)));
        rows.push((Slot::BackgroundMean, &self.background.mean));
        rows
    }

    fn sidecar_path(npy: &Path) -> std::path::PathBuf {
        npy.with_extension("json")
    }

    /// Writes a `(K, C)` `<f4` stack plus a JSON sidecar naming each row.
    pub fn store(&self, npy_path: impl AsRef<Path>) -> Result<()> {
        let npy_path = npy_path.as_ref();
        let rows = self.rows();
        let data: Vec<f32> = rows.iter().flat_map(|(_, v)| v.iter().map(|&x| x as f32)).collect();
        store_f32_array(npy_path, &[rows.len(), self.channels()], &data)?;
        let sidecar = BankSidecar {
            schema_version: 1,
            channels: self.channels(),
            built_at: self.built_at,
            refresh_period: self.refresh_period,
            slots: rows.iter().map(|(s, _)| s.name()).collect(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Internal(e.to_string()))?;
        let side = Self::sidecar_path(npy_path);
        std::fs::write(&side, json).map_err(|e| Error::Io { path: side, source: e })
    }

    pub fn load(npy_path: impl AsRef<Path>) -> Result<Self> {
        let npy_path = npy_path.as_ref();
        let side = Self::sidecar_path(npy_path);
        let text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(side.clone()),
            _ => Error::Io { path: side.clone(), source: e },
        })?;
        let sidecar: BankSidecar =
            serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(format!("{}: {e}", side.display())))?;
        let (shape, data) = load_f32_array(npy_path, 2)?;
        if shape[0] != sidecar.slots.len() || shape[1] != sidecar.channels {
            return Err(Error::shape("prototype stack does not match its sidecar"));
        }
        let mut fg = ClassPrototypes { mean: Vec::new(), members: Vec::new() };
        let mut bg = ClassPrototypes { mean: Vec::new(), members: Vec::new() };
        for (name, row) in sidecar.slots.iter().zip(data.chunks_exact(shape[1].max(1))) {
            let slot = Slot::parse(name)?;
            let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            let v = normalize(&v).ok_or_else(|| Error::invariant(format!("prototype {name} is zero")))?;
            let set = if slot.class_id() == 1 { &mut fg } else { &mut bg };
            if slot.is_mean() {
                set.mean = v;
            } else {
                set.members.push((slot, v));
            }
        }
        PrototypeBank::from_classes(bg, fg, sidecar.built_at, sidecar.refresh_period)
    }
}

/// Shared bank that readers snapshot and a refresher swaps whole.
#[derive(Debug)]
pub struct BankHandle {
    inner: RwLock<Arc<PrototypeBank>>,
}

impl BankHandle {
    pub fn new(bank: PrototypeBank) -> Self {
        BankHandle { inner: RwLock::new(Arc::new(bank)) }
    }

    pub fn snapshot(&self) -> Arc<PrototypeBank> {
        Arc::clone(&self.inner.read().expect("bank lock poisoned"))
    }

    pub fn replace(&self, bank: PrototypeBank) -> Arc<PrototypeBank> {
        let mut guard = self.inner.write().expect("bank lock poisoned");
        std::mem::replace(&mut *guard, Arc::new(bank))
    }
}
