//! Procedural multi-part scenes with exact per-part segmentation, and the
//! on-disk dataset format shared with externally segmented images.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compositor::{part_weight_sums, render_fields, RenderMode};
use crate::error::{Error, Result};
use crate::fields::{FieldSample, RadianceField, SCENE_HALF_EXTENT};
use crate::geom::{add, mat_vec, norm, rotation_yaw_pitch, sub, Mat3, Point3};
use crate::image::{Image, Mask};
use crate::io::{sha256_hex, write_atomic};
use crate::renderer::{Camera, CameraDistribution, Jitter, SeededRng};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Ellipsoid { radii: [f64; 3] },
    /// Segment along local `x` of half-length `half_length`.
    Capsule { half_length: f64, radius: f64 },
    /// Two spheres at local `x = ±half_separation`.
    TwinSpheres { radius: f64, half_separation: f64 },
}

impl Primitive {
    /// Normalized distance: `< 1` inside, `1` on the surface.
    fn level(&self, q: Point3) -> f64 {
        match self {
            Primitive::Sphere { radius } => norm(q) / radius,
            Primitive::Ellipsoid { radii } => norm([q[0] / radii[0], q[1] / radii[1], q[2] / radii[2]]),
            Primitive::Capsule { half_length, radius } => {
                let x = q[0].clamp(-half_length, *half_length);
                norm([q[0] - x, q[1], q[2]]) / radius
            }
            Primitive::TwinSpheres { radius, half_separation } => {
                let l = norm([q[0] + half_separation, q[1], q[2]]);
                let r = norm([q[0] - half_separation, q[1], q[2]]);
                l.min(r) / radius
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self {
            Primitive::Sphere { radius } => *radius,
            Primitive::Ellipsoid { radii } => radii.iter().copied().fold(0.0, f64::max),
            Primitive::Capsule { half_length, radius } => half_length + radius,
            Primitive::TwinSpheres { radius, half_separation } => half_separation + radius,
        }
    }

    fn scaled(&self, s: f64) -> Primitive {
        match self {
            Primitive::Sphere { radius } => Primitive::Sphere { radius: radius * s },
            Primitive::Ellipsoid { radii } => Primitive::Ellipsoid { radii: radii.map(|r| r * s) },
            Primitive::Capsule { half_length, radius } => Primitive::Capsule {
                half_length: half_length * s,
                radius: radius * s,
            },
            Primitive::TwinSpheres { radius, half_separation } => Primitive::TwinSpheres {
                radius: radius * s,
                half_separation: half_separation * s,
            },
        }
    }
}

/// A solid primitive with a soft shell: density rises smoothly from zero at
/// the surface to `amplitude` at depth `falloff` (in normalized units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPart {
    pub primitive: Primitive,
    pub center: Point3,
    pub yaw: f64,
    pub pitch: f64,
    pub amplitude: f64,
    pub falloff: f64,
    pub albedo: [f64; 3],
}

impl AnalyticPart {
    pub fn new(primitive: Primitive, center: Point3, albedo: [f64; 3]) -> Self {
        Self {
            primitive,
            center,
            yaw: 0.0,
            pitch: 0.0,
            amplitude: 80.0,
            falloff: 0.06,
            albedo,
        }
    }

    fn rotation(&self) -> Mat3 {
        rotation_yaw_pitch(self.yaw, self.pitch)
    }

    pub fn density(&self, p: Point3) -> f64 {
        let r = self.rotation();
        let d = sub(p, self.center);
        // inverse rotation = transpose
        let q = [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        let u = ((1.0 - self.primitive.level(q)) / self.falloff).clamp(0.0, 1.0);
        self.amplitude * u * u * (3.0 - 2.0 * u)
    }

    /// Support lies inside the scene box.
    pub fn is_contained(&self) -> bool {
        let r = self.primitive.bounding_radius();
        self.center.iter().all(|c| c.abs() + r <= SCENE_HALF_EXTENT)
    }
}

impl RadianceField for AnalyticPart {
    fn query(&self, points: &[Point3]) -> Result<Vec<FieldSample>> {
        Ok(points
            .iter()
            .map(|p| FieldSample {
                sigma: self.density(*p),
                color: self.albedo,
            })
            .collect())
    }
}

/// All parts merged into one field: densities add, colors mix by density.
pub struct UnionField(pub Vec<AnalyticPart>);

impl RadianceField for UnionField {
    fn query(&self, points: &[Point3]) -> Result<Vec<FieldSample>> {
        Ok(points
            .iter()
            .map(|p| {
                let mut sigma = 0.0;
                let mut color = [0.0; 3];
                for part in &self.0 {
                    let s = part.density(*p);
                    sigma += s;
                    for c in 0..3 {
                        color[c] += s * part.albedo[c];
                    }
                }
                if sigma > 0.0 {
                    color = color.map(|v| v / sigma);
                }
                FieldSample { sigma, color }
            })
            .collect())
    }
}

/// Distribution of one part. A part with an `anchor` is placed relative to
/// that (earlier) part, so the two co-vary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub name: String,
    pub primitive: Primitive,
    #[serde(default)]
    pub anchor: Option<String>,
    pub offset: Point3,
    pub offset_std: f64,
    /// Relative size jitter, uniform in `±size_jitter`.
    pub size_jitter: f64,
    pub yaw_std: f64,
    pub albedo: [f64; 3],
    pub albedo_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub parts: Vec<PartSpec>,
}

impl SceneSpec {
    /// Head and hair, plus twin eyes when `parts == 3`.
    pub fn face_like(parts: usize) -> Result<Self> {
        if !(2..=3).contains(&parts) {
            return Err(Error::InvalidArgument(format!("face-like scenes have 2 or 3 parts, not {parts}")));
        }
        let mut spec = vec![
            PartSpec {
                name: "head".into(),
                primitive: Primitive::Sphere { radius: 0.5 },
                anchor: None,
                offset: [0.0, -0.05, 0.0],
                offset_std: 0.05,
                size_jitter: 0.08,
                yaw_std: 0.0,
                albedo: [0.88, 0.66, 0.52],
                albedo_jitter: 0.06,
            },
            PartSpec {
                name: "hair".into(),
                primitive: Primitive::Ellipsoid { radii: [0.58, 0.4, 0.54] },
                anchor: Some("head".into()),
                offset: [0.0, 0.2, -0.06],
                offset_std: 0.02,
                size_jitter: 0.06,
                yaw_std: 0.1,
                albedo: [0.32, 0.2, 0.12],
                albedo_jitter: 0.08,
            },
        ];
        if parts == 3 {
            spec.push(PartSpec {
                name: "eyes".into(),
                primitive: Primitive::TwinSpheres {
                    radius: 0.09,
                    half_separation: 0.18,
                },
                anchor: Some("head".into()),
                offset: [0.0, 0.02, 0.42],
                offset_std: 0.015,
                size_jitter: 0.1,
                yaw_std: 0.0,
                albedo: [0.15, 0.35, 0.8],
                albedo_jitter: 0.05,
            });
        }
        let spec = Self { parts: spec };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.len() < 2 {
            return Err(Error::Config("a scene needs at least 2 parts".into()));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if self.parts[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Config(format!("duplicate part name {}", p.name)));
            }
            if let Some(a) = &p.anchor {
                if !self.parts[..i].iter().any(|q| &q.name == a) {
                    return Err(Error::Config(format!("part {} anchored to unknown or later part {a}", p.name)));
                }
            }
            if p.offset_std < 0.0 || p.yaw_std < 0.0 || !(0.0..1.0).contains(&p.size_jitter) || p.albedo_jitter < 0.0 {
                return Err(Error::Config(format!("negative spread for part {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.parts.iter().map(|p| p.name.clone()).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

fn clipped_normal<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let v: f64 = Normal::new(0.0, std).expect("finite std").sample(rng);
    v.clamp(-2.5 * std, 2.5 * std)
}

/// Draws one scene. Anchored parts inherit their anchor's center and yaw.
pub fn sample_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Vec<AnalyticPart>> {
    spec.validate()?;
    let mut out: Vec<AnalyticPart> = Vec::with_capacity(spec.parts.len());
    for p in &spec.parts {
        let (base, base_yaw) = match &p.anchor {
            Some(a) => {
                let i = spec.parts.iter().position(|q| &q.name == a).expect("validated anchor");
                (out[i].center, out[i].yaw)
            }
            None => ([0.0; 3], 0.0),
        };
        let yaw = base_yaw + clipped_normal(p.yaw_std, rng);
        let offset = mat_vec(&rotation_yaw_pitch(base_yaw, 0.0), p.offset);
        let jitter = [
            clipped_normal(p.offset_std, rng),
            clipped_normal(p.offset_std, rng),
            clipped_normal(p.offset_std, rng),
        ];
        let scale = 1.0 + if p.size_jitter > 0.0 { rng.random_range(-p.size_jitter..p.size_jitter) } else { 0.0 };
        let albedo = p.albedo.map(|c| {
            let j = if p.albedo_jitter > 0.0 { rng.random_range(-p.albedo_jitter..p.albedo_jitter) } else { 0.0 };
            (c + j).clamp(0.0, 1.0)
        });
        let mut part = AnalyticPart::new(p.primitive.scaled(scale), add(add(base, offset), jitter), albedo);
        part.yaw = yaw;
        if !part.is_contained() {
            return Err(Error::Config(format!("part {} can leave the scene box", p.name)));
        }
        out.push(part);
    }
    Ok(out)
}

/// Image with per-part masks, as rendered or as loaded from a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRecord {
    pub image: Image,
    pub masks: Vec<Mask>,
    pub camera: Camera,
    /// Source latent for records distilled from a generator.
    pub z: Option<Vec<f64>>,
}

impl GroundTruthRecord {
    pub fn foreground(&self) -> Mask {
        let mut m = Mask::empty(self.image.width, self.image.height);
        for part in &self.masks {
            for (d, s) in m.data.iter_mut().zip(&part.data) {
                *d |= *s;
            }
        }
        m
    }
}

/// Foreground is where the residual transmittance drops below this.
pub const FOREGROUND_RESIDUAL: f64 = 0.5;

/// Renders the analytic union and labels each foreground pixel with the part
/// of largest accumulated weight.
pub fn render_gt(parts: &[AnalyticPart], cam: &Camera, samples: usize) -> Result<GroundTruthRecord> {
    let fields: Vec<&dyn RadianceField> = parts.iter().map(|p| p as &dyn RadianceField).collect();
    let (image, packs) = render_fields(&fields, cam, samples, &mut Jitter::Centers, RenderMode::Composite)?;
    let mut masks = vec![Mask::empty(cam.width, cam.height); parts.len()];
    for (px, pack) in packs.iter().enumerate() {
        if pack.residual >= FOREGROUND_RESIDUAL {
            continue;
        }
        let w = part_weight_sums(pack);
        let best = (0..w.len()).fold(0, |b, i| if w[i] > w[b] { i } else { b });
        masks[best].data[px] = true;
    }
    Ok(GroundTruthRecord {
        image,
        masks,
        camera: cam.clone(),
        z: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCamera {
    /// Camera-to-world, row-major.
    pub pose: [[f64; 4]; 4],
    pub fov: f64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub masks: BTreeMap<String, String>,
    pub camera: ManifestCamera,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub parts: Vec<String>,
    pub records: Vec<ManifestRecord>,
    pub seed: u64,
    #[serde(default)]
    pub spec_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl DatasetManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("manifest serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Writes records as PNGs plus a manifest. Paths in the manifest are relative
/// to `dir`.
pub fn write_records(dir: &Path, parts: &[String], records: &[GroundTruthRecord], seed: u64, spec_hash: &str, config_hash: Option<String>) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.masks.len() != parts.len() {
            return Err(Error::InvalidArgument(format!("record {i} has {} masks for {} parts", r.masks.len(), parts.len())));
        }
        let image = format!("images/{i:05}.png");
        r.image.save_png(&dir.join(&image))?;
        let mut masks = BTreeMap::new();
        for (name, m) in parts.iter().zip(&r.masks) {
            let rel = format!("masks/{i:05}_{name}.png");
            m.save_png(&dir.join(&rel))?;
            masks.insert(name.clone(), rel);
        }
        entries.push(ManifestRecord {
            image,
            masks,
            camera: ManifestCamera {
                pose: r.camera.pose,
                fov: r.camera.fov_y,
                near: r.camera.near,
                far: r.camera.far,
            },
            z: r.z.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        parts: parts.to_vec(),
        records: entries,
        seed,
        spec_hash: spec_hash.to_string(),
        config_hash,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &manifest.to_bytes())?;
    Ok(manifest)
}

/// Renders `n` random scenes under random cameras and writes them to `dir`.
pub fn export_dataset(spec: &SceneSpec, cams: &CameraDistribution, n: usize, samples: usize, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let records = generate_records(spec, cams, n, samples, seed)?;
    write_records(dir, &spec.names(), &records, seed, &spec.hash(), None)
}

/// The records [`export_dataset`] would write, kept in memory.
pub fn generate_records(spec: &SceneSpec, cams: &CameraDistribution, n: usize, samples: usize, seed: u64) -> Result<Vec<GroundTruthRecord>> {
    let mut rng = SeededRng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let parts = sample_scene(spec, &mut rng)?;
            let (_, _, cam) = cams.sample(&mut rng)?;
            render_gt(&parts, &cam, samples)
        })
        .collect()
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<GroundTruthRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(&path, format!("unsupported manifest version {}", manifest.version)));
        }
        let records = manifest
            .records
            .iter()
            .map(|r| {
                let image = Image::load_png(&resolve(dir, &r.image))?;
                let masks = manifest
                    .parts
                    .iter()
                    .map(|p| {
                        let rel = r.masks.get(p).ok_or_else(|| Error::format(&path, format!("record {} lacks mask {p}", r.image)))?;
                        let m = Mask::load_png(&resolve(dir, rel))?;
                        if (m.width, m.height) != (image.width, image.height) {
                            return Err(Error::format(&path, format!("mask {rel} does not match image size")));
                        }
                        Ok(m)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let camera = Camera::new(r.camera.pose, r.camera.fov, image.width, image.height, r.camera.near, r.camera.far)?;
                Ok(GroundTruthRecord {
                    image,
                    masks,
                    camera,
                    z: r.z.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, records })
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Produces per-part masks for images that carry none.
pub trait MaskSource {
    fn part_names(&self) -> &[String];
    fn masks(&self, index: usize, image: &Image) -> Result<Vec<Mask>>;
}

/// Nearest-centroid color classifier fitted on labelled records; white is
/// the background class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorSegmenter {
    pub parts: Vec<String>,
    pub centroids: Vec<[f64; 3]>,
}

impl ColorSegmenter {
    pub fn fit(parts: &[String], records: &[GroundTruthRecord]) -> Result<Self> {
        let mut sums = vec![[0.0; 3]; parts.len()];
        let mut counts = vec![0usize; parts.len()];
        for r in records {
            if r.masks.len() != parts.len() {
                return Err(Error::InvalidArgument("mask count differs from part count".into()));
            }
            for (i, m) in r.masks.iter().enumerate() {
                for (px, on) in m.data.iter().enumerate() {
                    if *on {
                        let c = r.image.pixel(px);
                        for ch in 0..3 {
                            sums[i][ch] += c[ch];
                        }
                        counts[i] += 1;
                    }
                }
            }
        }
        if let Some(i) = counts.iter().position(|c| *c == 0) {
            return Err(Error::InvalidArgument(format!("part {} never appears", parts[i])));
        }
        Ok(Self {
            parts: parts.to_vec(),
            centroids: sums.iter().zip(&counts).map(|(s, c)| s.map(|v| v / *c as f64)).collect(),
        })
    }

    pub fn classify(&self, rgb: [f64; 3]) -> Option<usize> {
        let d2 = |c: [f64; 3]| (0..3).map(|i| (c[i] - rgb[i]).powi(2)).sum::<f64>();
        let mut best = (d2([1.0; 3]), None);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = d2(*c);
            if d < best.0 {
                best = (d, Some(i));
            }
        }
        best.1
    }
}

impl MaskSource for ColorSegmenter {
    fn part_names(&self) -> &[String] {
        &self.parts
    }

    fn masks(&self, _index: usize, image: &Image) -> Result<Vec<Mask>> {
        let mut out = vec![Mask::empty(image.width, image.height); self.parts.len()];
        for px in 0..image.pixel_count() {
            if let Some(i) = self.classify(image.pixel(px)) {
                out[i].data[px] = true;
            }
        }
        Ok(out)
    }
}

/// Masks supplied from outside, one set per record index.
pub struct ExternalMasks {
    pub parts: Vec<String>,
    pub masks: Vec<Vec<Mask>>,
}

impl MaskSource for ExternalMasks {
    fn part_names(&self) -> &[String] {
        &self.parts
    }

    fn masks(&self, index: usize, image: &Image) -> Result<Vec<Mask>> {
        let m = self
            .masks
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no external masks for record {index}")))?;
        if m.iter().any(|m| (m.width, m.height) != (image.width, image.height)) {
            return Err(Error::InvalidArgument(format!("external masks for record {index} do not match image size")));
        }
        Ok(m.clone())
    }
}
