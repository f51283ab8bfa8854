//! Per-point feature providers and descriptor construction.
//!
//! Providers stand in for large pre-trained per-point encoders. Descriptors
//! compress provider features (PCA for rigid objects, anchor similarities for
//! deformable ones) and append the raw coordinates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};
use crate::geometry::{cosine_similarity, Point3, PointCloud, CANONICAL, INTRINSIC, LABELS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectCategory {
    Rigid,
    Articulated,
    Deformable,
}

impl ObjectCategory {
    pub const ALL: [ObjectCategory; 3] =
        [ObjectCategory::Rigid, ObjectCategory::Articulated, ObjectCategory::Deformable];

    pub fn is_deformable(self) -> bool {
        self == ObjectCategory::Deformable
    }
}

impl fmt::Display for ObjectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectCategory::Rigid => "rigid",
            ObjectCategory::Articulated => "articulated",
            ObjectCategory::Deformable => "deformable",
        })
    }
}

impl FromStr for ObjectCategory {
    type Err = HgmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(ObjectCategory::Rigid),
            "articulated" => Ok(ObjectCategory::Articulated),
            "deformable" => Ok(ObjectCategory::Deformable),
            other => Err(HgmError::InvalidConfig(format!("unknown category {other}"))),
        }
    }
}

/// Maps every point of a cloud to a feature vector.
pub trait FeatureProvider: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// `N×D` features, one row per point, deterministic in the input.
    fn compute(&self, cloud: &PointCloud) -> Result<Tensor>;
}

/// Shared knobs of the synthetic providers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProviderConfig {
    pub embed_dim: usize,
    pub num_labels: usize,
    pub noise_sigma: f64,
    /// Coordinates are divided by this length (metres) before encoding.
    pub length_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticProviderConfig {
    fn default() -> Self {
        Self { embed_dim: 64, num_labels: 8, noise_sigma: 0.01, length_scale: 0.1, seed: 7 }
    }
}

const FREQUENCIES: [f64; 7] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

/// Multi-frequency sinusoidal code of a 3-D coordinate plus a one-hot label,
/// normalised and pushed through a fixed random matrix with orthonormal
/// columns. Cosine similarity of two codes is a shift-invariant kernel of
/// the coordinate difference, gated by label agreement.
#[derive(Clone, Debug)]
struct SyntheticEmbedding {
    cfg: SyntheticProviderConfig,
    label_weight: f64,
    /// `raw_dim × embed_dim`, orthonormal rows.
    projection: Vec<f64>,
    raw_dim: usize,
}

impl SyntheticEmbedding {
    fn new(cfg: SyntheticProviderConfig, salt: u64) -> Result<Self> {
        let raw_dim = 6 * FREQUENCIES.len() + cfg.num_labels;
        if raw_dim > cfg.embed_dim {
            return Err(HgmError::InvalidConfig(format!(
                "embed_dim {} too small for a {raw_dim}-wide code",
                cfg.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
        let d = cfg.embed_dim;
        // Gram–Schmidt over Gaussian rows.
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(raw_dim);
        while rows.len() < raw_dim {
            let mut r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for prev in &rows {
                let dot: f64 = r.iter().zip(prev).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
            let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                r.iter_mut().for_each(|a| *a /= n);
                rows.push(r);
            }
        }
        Ok(Self {
            cfg,
            label_weight: (3.0 * FREQUENCIES.len() as f64).sqrt(),
            projection: rows.concat(),
            raw_dim,
        })
    }

    fn raw_code(&self, c: [f64; 3], label: i32) -> Vec<f64> {
        let mut code = Vec::with_capacity(self.raw_dim);
        for axis in c {
            let scaled = axis / self.cfg.length_scale;
            for w in FREQUENCIES {
                let (s, co) = (w * scaled).sin_cos();
                code.push(s);
                code.push(co);
            }
        }
        for l in 0..self.cfg.num_labels {
            code.push(if l as i32 == label { self.label_weight } else { 0.0 });
        }
        let n = code.iter().map(|v| v * v).sum::<f64>().sqrt();
        code.iter_mut().for_each(|v| *v /= n);
        code
    }

    fn embed_into(&self, c: [f64; 3], label: i32, observed: Point3, out: &mut [f32]) {
        let code = self.raw_code(c, label);
        let d = self.cfg.embed_dim;
        let mut acc = vec![0.0f64; d];
        for (r, &v) in code.iter().enumerate() {
            let row = &self.projection[r * d..(r + 1) * d];
            acc.iter_mut().zip(row).for_each(|(a, p)| *a += v * p);
        }
        if self.cfg.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(point_hash(self.cfg.seed, c, label, observed));
            for a in acc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *a += self.cfg.noise_sigma * z.clamp(-NOISE_CLIP, NOISE_CLIP);
            }
        }
        out.iter_mut().zip(&acc).for_each(|(o, a)| *o = *a as f32);
    }

    #[allow(clippy::needless_range_loop)]
    fn compute(&self, cloud: &PointCloud, coord_payload: &str) -> Result<Tensor> {
        let coords = cloud.features(coord_payload).ok_or_else(|| {
            HgmError::MissingPayload(format!("provider needs a `{coord_payload}` payload"))
        })?;
        let labels = cloud
            .labels(LABELS)
            .ok_or_else(|| HgmError::MissingPayload("provider needs a `label` payload".into()))?;
        let w = coords.cols();
        let d = self.cfg.embed_dim;
        let mut out = Tensor::zeros(&[cloud.len(), d]);
        for i in 0..cloud.len() {
            let row = coords.row(i);
            let c = [
                row[0] as f64,
                row.get(1).copied().unwrap_or(0.0) as f64,
                if w > 2 { row[2] as f64 } else { 0.0 },
            ];
            self.embed_into(c, labels[i], cloud.point(i), out.row_mut(i));
        }
        Ok(out)
    }
}

/// Noise draws are clipped to this many standard deviations, so two
/// observations of one point never differ by more than `2·NOISE_CLIP·σ`
/// per component.
const NOISE_CLIP: f64 = 1.5;

/// SplitMix-style hash of everything the provider sees for one point. The
/// observed position is included, so a moved or re-captured object gets
/// fresh noise while identical inputs give identical features.
fn point_hash(seed: u64, c: [f64; 3], label: i32, observed: Point3) -> u64 {
    let mut h = seed ^ 0x51_7c_c1_b7_27_22_0a_95;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    };
    for v in c.into_iter().chain([observed.x, observed.y, observed.z]) {
        mix(v.to_bits());
    }
    mix(label as u32 as u64);
    h
}

/// Rigid-object provider: reads nominal-shape object-frame coordinates, so
/// apart from observation noise its features do not depend on world pose.
#[derive(Clone, Debug)]
pub struct SyntheticRigidProvider {
    embedding: SyntheticEmbedding,
}

impl SyntheticRigidProvider {
    pub const ID: &'static str = "rigid-synth";

    pub fn new(cfg: SyntheticProviderConfig) -> Result<Self> {
        Ok(Self { embedding: SyntheticEmbedding::new(cfg, 0x11)? })
    }
}

impl FeatureProvider for SyntheticRigidProvider {
    fn id(&self) -> &str {
        Self::ID
    }
    fn feature_dim(&self) -> usize {
        self.embedding.cfg.embed_dim
    }
    fn compute(&self, cloud: &PointCloud) -> Result<Tensor> {
        self.embedding.compute(cloud, CANONICAL)
    }
}

/// Deformable-object provider: reads intrinsic material coordinates, which a
/// deformation never changes.
#[derive(Clone, Debug)]
pub struct SyntheticDeformableProvider {
    embedding: SyntheticEmbedding,
}

impl SyntheticDeformableProvider {
    pub const ID: &'static str = "deform-synth";

    pub fn new(cfg: SyntheticProviderConfig) -> Result<Self> {
        Ok(Self { embedding: SyntheticEmbedding::new(cfg, 0x22)? })
    }
}

impl FeatureProvider for SyntheticDeformableProvider {
    fn id(&self) -> &str {
        Self::ID
    }
    fn feature_dim(&self) -> usize {
        self.embedding.cfg.embed_dim
    }
    fn compute(&self, cloud: &PointCloud) -> Result<Tensor> {
        self.embedding.compute(cloud, INTRINSIC)
    }
}

/// Providers by id plus the category → provider routing table.
#[derive(Clone, Debug, Default)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Arc<dyn FeatureProvider>>,
    routes: BTreeMap<ObjectCategory, String>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `rigid-synth` for rigid and articulated objects, `deform-synth` for
    /// deformable ones.
    pub fn synthetic(cfg: SyntheticProviderConfig) -> Result<Self> {
        let mut r = Self::new();
        r.register(Arc::new(SyntheticRigidProvider::new(cfg)?));
        r.register(Arc::new(SyntheticDeformableProvider::new(cfg)?));
        r.route(ObjectCategory::Rigid, SyntheticRigidProvider::ID)?;
        r.route(ObjectCategory::Articulated, SyntheticRigidProvider::ID)?;
        r.route(ObjectCategory::Deformable, SyntheticDeformableProvider::ID)?;
        Ok(r)
    }

    pub fn register(&mut self, provider: Arc<dyn FeatureProvider>) {
        self.providers.insert(provider.id().to_string(), provider);
    }

    pub fn route(&mut self, category: ObjectCategory, provider_id: &str) -> Result<()> {
        if !self.providers.contains_key(provider_id) {
            return Err(HgmError::NoProvider(format!("{category} → unknown id {provider_id}")));
        }
        self.routes.insert(category, provider_id.to_string());
        Ok(())
    }

    /// Routes every category to one provider.
    pub fn force_single(&mut self, provider_id: &str) -> Result<()> {
        for c in ObjectCategory::ALL {
            self.route(c, provider_id)?;
        }
        Ok(())
    }

    pub fn provider_id(&self, category: ObjectCategory) -> Option<&str> {
        self.routes.get(&category).map(String::as_str)
    }

    pub fn provider_for(&self, category: ObjectCategory) -> Result<Arc<dyn FeatureProvider>> {
        self.routes
            .get(&category)
            .and_then(|id| self.providers.get(id))
            .cloned()
            .ok_or_else(|| HgmError::NoProvider(category.to_string()))
    }

    pub fn by_id(&self, id: &str) -> Option<Arc<dyn FeatureProvider>> {
        self.providers.get(id).cloned()
    }
}

pub fn provider_for(
    category: ObjectCategory,
    registry: &ProviderRegistry,
) -> Result<Arc<dyn FeatureProvider>> {
    registry.provider_for(category)
}

/// Assigns a category to a named object. A vision-language model could sit
/// behind this; the shipped implementation is a lookup table.
pub trait CategoryClassifier: Send + Sync {
    fn classify(&self, object_name: &str) -> Option<ObjectCategory>;
}

#[derive(Clone, Debug, Default)]
pub struct StaticClassifier {
    table: BTreeMap<String, ObjectCategory>,
}

impl StaticClassifier {
    pub fn new(table: impl IntoIterator<Item = (String, ObjectCategory)>) -> Self {
        Self { table: table.into_iter().collect() }
    }
}

impl CategoryClassifier for StaticClassifier {
    fn classify(&self, object_name: &str) -> Option<ObjectCategory> {
        self.table.get(object_name).copied()
    }
}

/// Classifies `object_name` and returns the provider its category routes to.
pub fn route_object(
    object_name: &str,
    classifier: &dyn CategoryClassifier,
    registry: &ProviderRegistry,
) -> Result<(ObjectCategory, Arc<dyn FeatureProvider>)> {
    let category = classifier
        .classify(object_name)
        .ok_or_else(|| HgmError::NoProvider(format!("object {object_name} is unclassified")))?;
    Ok((category, registry.provider_for(category)?))
}

/// Mean and top-`k` principal directions of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `k×D`, orthonormal rows ordered by decreasing variance.
    components: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl PcaModel {
    pub fn from_parts(mean: Vec<f64>, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.is_empty() || components.iter().any(|c| c.len() != mean.len()) {
            return Err(HgmError::Shape("pca components must be k×D with D = mean length".into()));
        }
        let k = components.len();
        Ok(Self { mean, components, variances: vec![f64::NAN; k] })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Variance captured by each component on the fitted data.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }
}

/// Fits PCA through the eigen-decomposition of the centred scatter matrix.
/// The largest-magnitude entry of every component is made positive.
pub fn fit_pca(x: &Tensor, k: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || k > n.min(d) {
        return Err(HgmError::PcaRank { k, rows: n, cols: d });
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += *v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| x.at(i, j) as f64 - mean[j]);
    let scatter = centred.transpose() * &centred;
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut c: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = c.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if lead < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        variances.push(eig.eigenvalues[idx].max(0.0) / n as f64);
    }
    Ok(PcaModel { mean, components, variances })
}

/// Rows `components·(x − mean)`.
pub fn pca_project(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    let d = model.input_dim();
    if x.cols() != d {
        return Err(HgmError::DimMismatch(format!("pca expects {d} columns, got {}", x.cols())));
    }
    let k = model.k();
    let mut out = Tensor::zeros(&[x.rows(), k]);
    let mut centred = vec![0.0f64; d];
    for i in 0..x.rows() {
        centred.iter_mut().zip(x.row(i)).zip(&model.mean).for_each(|((c, v), m)| *c = *v as f64 - m);
        for (j, comp) in model.components.iter().enumerate() {
            let dot: f64 = comp.iter().zip(&centred).map(|(a, b)| a * b).sum();
            out.row_mut(i)[j] = dot as f32;
        }
    }
    Ok(out)
}

/// Entry `(i, j)` is the cosine similarity of feature row `i` and anchor `j`.
pub fn similarity_descriptor(features: &Tensor, anchors: &Tensor) -> Result<Tensor> {
    if features.cols() != anchors.cols() {
        return Err(HgmError::DimMismatch(format!(
            "features have {} columns, anchors {}",
            features.cols(),
            anchors.cols()
        )));
    }
    let k = anchors.rows();
    let mut out = Tensor::zeros(&[features.rows(), k]);
    for i in 0..features.rows() {
        for j in 0..k {
            out.row_mut(i)[j] = cosine_similarity(features.row(i), anchors.row(j))? as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "lowercase")]
pub enum DescriptorRoute {
    Pca { k: usize },
    Anchors { count: usize },
}

impl DescriptorRoute {
    pub fn semantic_width(self) -> usize {
        match self {
            DescriptorRoute::Pca { k } => k,
            DescriptorRoute::Anchors { count } => count,
        }
    }

    pub fn width(self) -> usize {
        self.semantic_width() + 3
    }
}

/// Compression context a descriptor route needs.
#[derive(Clone, Copy, Debug)]
pub enum DescriptorContext<'a> {
    Pca(&'a PcaModel),
    Anchors(&'a Tensor),
}

impl DescriptorContext<'_> {
    pub fn route(&self) -> DescriptorRoute {
        match self {
            DescriptorContext::Pca(m) => DescriptorRoute::Pca { k: m.k() },
            DescriptorContext::Anchors(a) => DescriptorRoute::Anchors { count: a.rows() },
        }
    }
}

/// Per-point `[compressed semantics | x y z]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub data: Tensor,
    pub route: DescriptorRoute,
}

impl DescriptorSet {
    /// Coordinates taken from the last three columns.
    pub fn coords(&self) -> Tensor {
        let w = self.data.cols();
        let rows: Vec<f32> =
            (0..self.data.rows()).flat_map(|i| self.data.row(i)[w - 3..].to_vec()).collect();
        Tensor::new(vec![self.data.rows(), 3], rows).expect("non-empty descriptor set")
    }
}

/// Compresses precomputed features and appends coordinates.
pub fn descriptors_from_features(
    features: &Tensor,
    coords: &Tensor,
    context: DescriptorContext<'_>,
) -> Result<DescriptorSet> {
    if features.rows() != coords.rows() || coords.cols() != 3 {
        return Err(HgmError::Shape(format!(
            "{} feature rows for coordinates {:?}",
            features.rows(),
            coords.shape()
        )));
    }
    let semantic = match context {
        DescriptorContext::Pca(model) => pca_project(model, features)?,
        DescriptorContext::Anchors(anchors) => similarity_descriptor(features, anchors)?,
    };
    Ok(DescriptorSet { data: Tensor::concat_cols(&[&semantic, coords])?, route: context.route() })
}

/// Full descriptor construction for one object. Rigid and articulated
/// objects need a fitted PCA model; deformable objects need anchor features.
pub fn build_descriptors(
    cloud: &PointCloud,
    category: ObjectCategory,
    provider: &dyn FeatureProvider,
    context: Option<DescriptorContext<'_>>,
) -> Result<DescriptorSet> {
    let context = match (category, context) {
        (ObjectCategory::Deformable, Some(c @ DescriptorContext::Anchors(_))) => c,
        (ObjectCategory::Rigid | ObjectCategory::Articulated, Some(c @ DescriptorContext::Pca(_))) => c,
        (cat, _) => {
            let need = if cat.is_deformable() { "anchor features" } else { "a fitted PCA model" };
            return Err(HgmError::MissingContext(format!("{cat} objects need {need}")));
        }
    };
    let features = provider.compute(cloud)?;
    descriptors_from_features(&features, &cloud.coords(), context)
}
