//! Site-specific multipath channel synthesis and the channel dataset format.
//!
//! A scene is a set of scatterer anchors, a UE grid, and blockage geometry.
//! Channels are deterministic functions of (scene, position, rng stream):
//! each visible anchor contributes one path departing toward the anchor,
//! plus an optional line-of-sight path, with 1/distance decay and complex
//! Gaussian small-scale fading.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{mix64, standard_complex_gaussian, CVec, RngStream};

/// Antenna array description. The carrier frequency is metadata only; all
/// geometry works in wavelength units via `element_spacing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub num_antennas: usize,
    #[serde(default = "default_spacing")]
    pub element_spacing: f64,
    #[serde(default = "default_carrier")]
    pub carrier_freq_ghz: f64,
}

fn default_spacing() -> f64 {
    0.5
}

fn default_carrier() -> f64 {
    28.0
}

impl ArrayConfig {
    pub fn new(num_antennas: usize) -> Self {
        let cfg = Self {
            num_antennas,
            element_spacing: default_spacing(),
            carrier_freq_ghz: default_carrier(),
        };
        cfg.validate().expect("invalid array config");
        cfg
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_antennas < 2 {
            return Err(format!(
                "array.num_antennas must be >= 2 (got {})",
                self.num_antennas
            ));
        }
        if !(self.element_spacing > 0.0) {
            return Err(format!(
                "array.element_spacing must be > 0 (got {})",
                self.element_spacing
            ));
        }
        if !(self.carrier_freq_ghz > 0.0) {
            return Err(format!(
                "array.carrier_freq_ghz must be > 0 (got {})",
                self.carrier_freq_ghz
            ));
        }
        Ok(())
    }

    /// ULA response at departure angle `theta` (radians, in `[-pi/2, pi/2]`):
    /// entry `n` is `exp(j * 2pi * spacing * n * sin(theta))`.
    pub fn steering_vector(&self, theta: f64) -> CVec {
        assert!(
            (-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2).contains(&theta),
            "steering angle {theta} outside [-pi/2, pi/2]"
        );
        let step = 2.0 * std::f64::consts::PI * self.element_spacing * theta.sin();
        CVec::new(
            (0..self.num_antennas)
                .map(|n| Complex64::from_polar(1.0, step * n as f64))
                .collect(),
        )
    }
}

/// Scene identifier. The two built-in scenes mirror an indoor hall with no
/// direct line-of-sight and a larger outdoor layout with partial blockage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    IndoorNlos,
    UrbanMixed,
}

impl ScenarioId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::IndoorNlos => "indoor_nlos",
            ScenarioId::UrbanMixed => "urban_mixed",
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            ScenarioId::IndoorNlos => 0,
            ScenarioId::UrbanMixed => 1,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ScenarioId::IndoorNlos),
            1 => Some(ScenarioId::UrbanMixed),
            _ => None,
        }
    }
}

/// A point scatterer with a reflectivity factor applied to its path gain.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub position: (f64, f64),
    pub reflectivity: f64,
}

/// Rectangular UE grid swept row-major (y outer, x inner).
#[derive(Debug, Clone, PartialEq)]
pub struct UeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub spacing: f64,
}

impl UeGrid {
    pub fn num_x(&self) -> usize {
        ((self.x_max - self.x_min) / self.spacing + 1e-9) as usize + 1
    }

    pub fn num_y(&self) -> usize {
        ((self.y_max - self.y_min) / self.spacing + 1e-9) as usize + 1
    }

    pub fn num_points(&self) -> usize {
        self.num_x() * self.num_y()
    }

    /// Grid point `i` in row-major order.
    pub fn point(&self, i: usize) -> (f64, f64) {
        let nx = self.num_x();
        let row = i / nx;
        let col = i % nx;
        (
            self.x_min + col as f64 * self.spacing,
            self.y_min + row as f64 * self.spacing,
        )
    }

    pub fn contains(&self, pos: (f64, f64)) -> bool {
        let eps = 1e-9;
        pos.0 >= self.x_min - eps
            && pos.0 <= self.x_max + eps
            && pos.1 >= self.y_min - eps
            && pos.1 <= self.y_max + eps
    }
}

/// Simple polygon used as a blocker. Vertices in order; edges close cyclically.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            vertices: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
        }
    }

    /// Whether the open segment `a -> b` crosses this polygon (intersects an
    /// edge or has an endpoint strictly inside).
    pub fn blocks_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            if segments_intersect(a, b, p, q) {
                return true;
            }
        }
        self.contains_point(a) || self.contains_point(b)
    }

    pub fn contains_point(&self, pt: (f64, f64)) -> bool {
        // ray cast toward +x
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let (x1, y1) = self.vertices[i];
            let (x2, y2) = self.vertices[(i + 1) % n];
            if (y1 > pt.1) != (y2 > pt.1) {
                let x_cross = x1 + (pt.1 - y1) / (y2 - y1) * (x2 - x1);
                if pt.0 < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// Line-of-sight rule for a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LosMode {
    /// LOS blocked at every position (fully non-line-of-sight scene).
    Blocked,
    /// LOS blocked exactly where the segment BS -> UE crosses a blocker.
    ByGeometry,
}

/// A site scene: anchors, UE grid, blockage geometry, and a scene seed folded
/// into every fading stream. The base station sits at the origin with the
/// array broadside along +y; departure angles are measured from broadside.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteScenario {
    pub id: ScenarioId,
    pub anchors: Vec<Anchor>,
    pub ue_grid: UeGrid,
    pub blockers: Vec<Polygon>,
    pub los_mode: LosMode,
    pub rng_seed: u64,
}

impl SiteScenario {
    /// The built-in scene for `id`.
    ///
    /// The indoor scene is a hall partitioned by three radial shelving walls
    /// into four aisles, with the array on the entrance wall and LOS blocked
    /// everywhere. Each central aisle is served by a single reflector at a
    /// half-beamwidth offset from the 16-beam grid. Each side aisle is served
    /// by a strong corner reflector pinned at `sin(theta) = +/-0.875` (the
    /// exact directions of beams 7 and 9) plus a weak cabinet at the entrance
    /// wall seen end-fire, where `sin(theta) = +1` and `-1` alias to the same
    /// array response. Probe subsets that skip beams 7 and 9 therefore receive
    /// identical power profiles from both side aisles (the corner reflectors
    /// fall on nulls of every probed beam, the end-fire cabinets are
    /// indistinguishable from each other), while the matched-filter beams for
    /// the two aisles point 122 degrees apart.
    pub fn default_for(id: ScenarioId) -> Self {
        match id {
            ScenarioId::IndoorNlos => {
                let anchor_at = |sin_theta: f64, dist: f64, reflectivity: f64| Anchor {
                    position: (
                        dist * sin_theta,
                        dist * (1.0 - sin_theta * sin_theta).max(0.0).sqrt(),
                    ),
                    reflectivity,
                };
                // Radial wall slab: tangent of the wall bearing (x = t*y),
                // half-width, radial span. Tangents are tuned so no grid
                // point falls inside a slab.
                let wall = |t: f64, half_width: f64| {
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let (r0, r1) = (3.5, 28.0);
                    Polygon {
                        vertices: vec![
                            (r0 * s - half_width * c, r0 * c + half_width * s),
                            (r1 * s - half_width * c, r1 * c + half_width * s),
                            (r1 * s + half_width * c, r1 * c - half_width * s),
                            (r0 * s + half_width * c, r0 * c - half_width * s),
                        ],
                    }
                };
                SiteScenario {
                    id,
                    anchors: vec![
                        anchor_at(-1.0, 9.0, 0.3),      // left entrance cabinet, end-fire
                        anchor_at(-0.875, 8.0, 1.3),    // left corner, exactly on beam 9
                        anchor_at(-0.3125, 11.0, 1.0),  // left-centre aisle, half-bin offset
                        anchor_at(0.1875, 9.0, 1.0),    // right-centre aisle, half-bin offset
                        anchor_at(0.875, 8.0, 1.3),     // right corner, exactly on beam 7
                        anchor_at(1.0, 9.0, 0.3),       // right entrance cabinet, end-fire
                    ],
                    ue_grid: UeGrid {
                        x_min: -10.0,
                        x_max: 10.0,
                        y_min: 4.0,
                        y_max: 24.0,
                        spacing: 0.5,
                    },
                    blockers: vec![
                        wall(-0.49120, 0.025),
                        wall(1.0 / 56.0, 0.05),
                        wall(0.49120, 0.025),
                    ],
                    los_mode: LosMode::Blocked,
                    rng_seed: 0,
                }
            }
            ScenarioId::UrbanMixed => {
                let anchor_at = |x: f64, y: f64, reflectivity: f64| Anchor {
                    position: (x, y),
                    reflectivity,
                };
                SiteScenario {
                    id,
                    // Facades and street furniture spread across the service
                    // area; all lie above the blocker strip so anchor paths
                    // never cross it.
                    anchors: vec![
                        anchor_at(-46.0, 30.0, 1.2),
                        anchor_at(-30.0, 70.0, 1.0),
                        anchor_at(-18.0, 44.0, 1.4),
                        anchor_at(-8.0, 105.0, 1.0),
                        anchor_at(-4.0, 36.0, 1.3),
                        anchor_at(6.0, 58.0, 1.4),
                        anchor_at(14.0, 92.0, 1.0),
                        anchor_at(24.0, 40.0, 1.3),
                        anchor_at(34.0, 72.0, 1.0),
                        anchor_at(44.0, 28.0, 1.2),
                        anchor_at(50.0, 110.0, 0.9),
                        anchor_at(-50.0, 115.0, 0.9),
                    ],
                    ue_grid: UeGrid {
                        x_min: -50.0,
                        x_max: 50.0,
                        y_min: 20.0,
                        y_max: 120.0,
                        spacing: 2.0,
                    },
                    // Street-level obstructions in a thin strip between the
                    // BS and the grid; their angular shadows cover just under
                    // 40% of the UE positions.
                    blockers: vec![
                        Polygon::rectangle(-5.46, 14.0, -3.84, 16.0),
                        Polygon::rectangle(-0.84, 14.0, 2.1, 16.0),
                        Polygon::rectangle(3.36, 14.0, 5.74, 16.0),
                    ],
                    los_mode: LosMode::ByGeometry,
                    rng_seed: 0,
                }
            }
        }
    }

    /// LOS blockage predicate.
    pub fn los_blocked(&self, pos: (f64, f64)) -> bool {
        match self.los_mode {
            LosMode::Blocked => true,
            LosMode::ByGeometry => self
                .blockers
                .iter()
                .any(|p| p.blocks_segment((0.0, 0.0), pos)),
        }
    }

    /// An anchor contributes a path iff the straight segment UE -> anchor
    /// does not cross a blocker.
    pub fn anchor_visible(&self, pos: (f64, f64), anchor: &Anchor) -> bool {
        !self
            .blockers
            .iter()
            .any(|p| p.blocks_segment(pos, anchor.position))
    }
}

/// One propagation path: departure angle at the BS and complex gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationPath {
    pub angle: f64,
    pub gain: Complex64,
}

/// The channel for one UE position: its path list and the assembled vector
/// `h = sum_l g_l * a(theta_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub ue_position: (f64, f64),
    pub paths: Vec<PropagationPath>,
    pub h: CVec,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Departure angle from broadside toward `pos` (BS at the origin, +y broadside).
fn departure_angle(pos: (f64, f64)) -> f64 {
    pos.0.atan2(pos.1)
}

/// Synthesize the channel at `ue_position`. Paths are ordered LOS first (when
/// present), then anchors in scene order; each consumes one fading draw.
///
/// Panics if the position lies outside the UE grid or the scene yields no
/// propagation path there.
pub fn synthesize_channel(
    scenario: &SiteScenario,
    array: &ArrayConfig,
    ue_position: (f64, f64),
    rng: &mut RngStream,
) -> ChannelSample {
    assert!(
        scenario.ue_grid.contains(ue_position),
        "UE position {ue_position:?} outside the scenario grid"
    );
    let mut paths = Vec::new();
    if !scenario.los_blocked(ue_position) {
        let fading = standard_complex_gaussian(rng, 1)[0];
        let d = dist((0.0, 0.0), ue_position).max(1e-6);
        paths.push(PropagationPath {
            angle: departure_angle(ue_position),
            gain: fading / d,
        });
    }
    for anchor in &scenario.anchors {
        if !scenario.anchor_visible(ue_position, anchor) {
            continue;
        }
        let fading = standard_complex_gaussian(rng, 1)[0];
        let total = dist((0.0, 0.0), anchor.position) + dist(anchor.position, ue_position);
        paths.push(PropagationPath {
            angle: departure_angle(anchor.position),
            gain: fading * anchor.reflectivity / total.max(1e-6),
        });
    }
    assert!(
        !paths.is_empty(),
        "scenario yields no propagation path at {ue_position:?}"
    );
    let mut h = CVec::zeros(array.num_antennas);
    for p in &paths {
        h = h.add(&array.steering_vector(p.angle).scale(p.gain));
    }
    ChannelSample {
        ue_position,
        paths,
        h,
    }
}

/// Train/val/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    fn to_u8(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Test => 2,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SplitTag::Train),
            1 => Some(SplitTag::Val),
            2 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Identifies a built-in scene plus its seed; enough to rebuild the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDescriptor {
    pub id: ScenarioId,
    pub rng_seed: u64,
}

/// A generated channel dataset with per-sample split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub array: ArrayConfig,
    pub scenario: ScenarioDescriptor,
    pub seed: u64,
    pub samples: Vec<ChannelSample>,
    pub split_tags: Vec<SplitTag>,
}

impl ChannelDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices carrying `tag`.
    pub fn split_indices(&self, tag: SplitTag) -> Vec<usize> {
        self.split_tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }
}

const SPLIT_STREAM: u64 = 0x53504c49; // "SPLI"

/// Deterministic 8/1/1 split assignment: a seed-derived permutation of the
/// ten residues `index % 10` is bucketed, so any window of ten consecutive
/// indices holds exactly eight train, one val, and one test sample.
pub fn split_tag_for(seed: u64, index: usize) -> SplitTag {
    let mut rng = RngStream::new(seed, SPLIT_STREAM);
    let sigma = rng.permutation(10);
    match sigma[index % 10] {
        0..=7 => SplitTag::Train,
        8 => SplitTag::Val,
        _ => SplitTag::Test,
    }
}

/// Per-sample fading stream, independent of generation order.
fn sample_stream(scenario: &SiteScenario, seed: u64, index: usize) -> RngStream {
    RngStream::new(mix64(seed, scenario.rng_seed), mix64(seed, index as u64))
}

/// Generate `num_samples` channels by sweeping the UE grid row-major,
/// repeating with fresh fading streams once every grid point has been used.
pub fn generate_dataset(
    scenario: &SiteScenario,
    array: &ArrayConfig,
    num_samples: usize,
    seed: u64,
) -> ChannelDataset {
    assert!(num_samples >= 1, "num_samples must be >= 1");
    let grid_len = scenario.ue_grid.num_points();
    let samples: Vec<ChannelSample> = (0..num_samples)
        .into_par_iter()
        .map(|i| {
            let pos = scenario.ue_grid.point(i % grid_len);
            let mut rng = sample_stream(scenario, seed, i);
            synthesize_channel(scenario, array, pos, &mut rng)
        })
        .collect();
    let split_tags = (0..num_samples).map(|i| split_tag_for(seed, i)).collect();
    ChannelDataset {
        array: array.clone(),
        scenario: ScenarioDescriptor {
            id: scenario.id,
            rng_seed: scenario.rng_seed,
        },
        seed,
        samples,
        split_tags,
    }
}

/// Errors for the dataset file format.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid format: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated dataset file in record {record}")]
    Truncated { record: usize },
    #[error("invalid field in dataset: {0}")]
    InvalidField(String),
}

const DATASET_MAGIC: [u8; 4] = *b"GSBF";
const DATASET_VERSION: u16 = 1;

/// Header duplicated into the JSON sidecar next to the binary file.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    magic: String,
    version: u16,
    num_antennas: usize,
    element_spacing: f64,
    carrier_freq_ghz: f64,
    scenario_id: String,
    scenario_seed: u64,
    seed: u64,
    num_samples: usize,
}

struct LeWriter<W: Write>(W);

impl<W: Write> LeWriter<W> {
    fn u8(&mut self, v: u8) -> io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u16(&mut self, v: u16) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
}

struct LeReader<R: Read>(R);

impl<R: Read> LeReader<R> {
    fn u8(&mut self) -> io::Result<u8> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u16(&mut self) -> io::Result<u16> {
        let mut b = [0u8; 2];
        self.0.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }
    fn u64(&mut self) -> io::Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f32(&mut self) -> io::Result<f32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }
}

/// Write `dataset` to `path` (little-endian binary, channel entries as f32)
/// plus a `<path>.meta.json` sidecar. Both files are written via a temp file
/// and rename.
pub fn write_dataset(path: &Path, dataset: &ChannelDataset) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp)?;
        let mut w = LeWriter(io::BufWriter::new(file));
        w.0.write_all(&DATASET_MAGIC)?;
        w.u16(DATASET_VERSION)?;
        w.u16(dataset.array.num_antennas as u16)?;
        w.f32(dataset.array.element_spacing as f32)?;
        w.f32(dataset.array.carrier_freq_ghz as f32)?;
        w.u8(dataset.scenario.id.to_u8())?;
        w.u64(dataset.scenario.rng_seed)?;
        w.u64(dataset.seed)?;
        w.u64(dataset.samples.len() as u64)?;
        for (sample, tag) in dataset.samples.iter().zip(&dataset.split_tags) {
            w.f32(sample.ue_position.0 as f32)?;
            w.f32(sample.ue_position.1 as f32)?;
            w.u8(tag.to_u8())?;
            w.u16(sample.paths.len() as u16)?;
            for p in &sample.paths {
                w.f32(p.angle as f32)?;
                w.f32(p.gain.re as f32)?;
                w.f32(p.gain.im as f32)?;
            }
            for z in sample.h.iter() {
                w.f32(z.re as f32)?;
                w.f32(z.im as f32)?;
            }
        }
        w.0.flush()?;
    }
    fs::rename(&tmp, path)?;

    let meta = DatasetMeta {
        magic: "GSBF".to_string(),
        version: DATASET_VERSION,
        num_antennas: dataset.array.num_antennas,
        element_spacing: dataset.array.element_spacing,
        carrier_freq_ghz: dataset.array.carrier_freq_ghz,
        scenario_id: dataset.scenario.id.as_str().to_string(),
        scenario_seed: dataset.scenario.rng_seed,
        seed: dataset.seed,
        num_samples: dataset.samples.len(),
    };
    let meta_path = sidecar_path(path);
    let meta_tmp = meta_path.with_extension("tmp");
    fs::write(
        &meta_tmp,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    fs::rename(&meta_tmp, &meta_path)?;
    Ok(())
}

/// `<path>.meta.json`
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<ChannelDataset, DatasetError> {
    let file = fs::File::open(path)?;
    let mut r = LeReader(io::BufReader::new(file));

    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic)?;
    if magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let num_antennas = r.u16()? as usize;
    let element_spacing = r.f32()? as f64;
    let carrier_freq_ghz = r.f32()? as f64;
    let scenario_id = ScenarioId::from_u8(r.u8()?)
        .ok_or_else(|| DatasetError::InvalidField("unknown scenario_id".into()))?;
    let scenario_seed = r.u64()?;
    let seed = r.u64()?;
    let num_samples = r.u64()? as usize;

    let array = ArrayConfig {
        num_antennas,
        element_spacing,
        carrier_freq_ghz,
    };
    array.validate().map_err(DatasetError::InvalidField)?;

    let mut samples = Vec::with_capacity(num_samples);
    let mut split_tags = Vec::with_capacity(num_samples);
    for record in 0..num_samples {
        let truncated = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                DatasetError::Truncated { record }
            } else {
                DatasetError::Io(e)
            }
        };
        let px = r.f32().map_err(truncated)? as f64;
        let py = r.f32().map_err(truncated)? as f64;
        let tag = SplitTag::from_u8(r.u8().map_err(truncated)?)
            .ok_or_else(|| DatasetError::InvalidField(format!("bad split tag in record {record}")))?;
        let path_count = r.u16().map_err(truncated)? as usize;
        let mut paths = Vec::with_capacity(path_count);
        for _ in 0..path_count {
            let angle = r.f32().map_err(truncated)? as f64;
            let re = r.f32().map_err(truncated)? as f64;
            let im = r.f32().map_err(truncated)? as f64;
            paths.push(PropagationPath {
                angle,
                gain: Complex64::new(re, im),
            });
        }
        let mut h = Vec::with_capacity(num_antennas);
        for _ in 0..num_antennas {
            let re = r.f32().map_err(truncated)? as f64;
            let im = r.f32().map_err(truncated)? as f64;
            h.push(Complex64::new(re, im));
        }
        samples.push(ChannelSample {
            ue_position: (px, py),
            paths,
            h: CVec::new(h),
        });
        split_tags.push(tag);
    }
    Ok(ChannelDataset {
        array,
        scenario: ScenarioDescriptor {
            id: scenario_id,
            rng_seed: scenario_seed,
        },
        seed,
        samples,
        split_tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_array(n: usize) -> ArrayConfig {
        ArrayConfig::new(n)
    }

    /// One LOS path, no anchors, everything visible.
    fn los_only_scenario() -> SiteScenario {
        SiteScenario {
            id: ScenarioId::UrbanMixed,
            anchors: Vec::new(),
            ue_grid: UeGrid {
                x_min: -10.0,
                x_max: 10.0,
                y_min: 1.0,
                y_max: 20.0,
                spacing: 1.0,
            },
            blockers: Vec::new(),
            los_mode: LosMode::ByGeometry,
            rng_seed: 7,
        }
    }

    #[test]
    fn steering_broadside_is_all_ones() {
        let a = unit_array(4).steering_vector(0.0);
        for n in 0..4 {
            assert!((a[n] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn steering_endfire_two_elements() {
        let a = unit_array(2).steering_vector(std::f64::consts::FRAC_PI_2);
        assert!((a[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((a[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn steering_thirty_degrees_quarter_turns() {
        // sin(pi/6) = 0.5 forces a phase step of pi/2
        let a = unit_array(4).steering_vector(std::f64::consts::FRAC_PI_6);
        let expect = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
        ];
        for n in 0..4 {
            assert!((a[n] - expect[n]).norm() < 1e-9, "entry {n}: {}", a[n]);
        }
    }

    #[test]
    fn steering_entries_unit_modulus_norm_sqrt_n() {
        let arr = unit_array(16);
        for k in 0..40 {
            let theta = -1.5 + 3.0 * (k as f64) / 39.0;
            let a = arr.steering_vector(theta);
            for z in a.iter() {
                assert!((z.norm() - 1.0).abs() < 1e-12);
            }
            assert!((a.l2_norm() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn los_channel_at_broadside_parallels_broadside_steering() {
        let scenario = los_only_scenario();
        let array = unit_array(8);
        let mut rng = RngStream::new(1, 0);
        let s = synthesize_channel(&scenario, &array, (0.0, 10.0), &mut rng);
        assert_eq!(s.paths.len(), 1);
        // normalized MRT gain of the broadside beam on h must be 1
        let a0 = array.steering_vector(0.0);
        let w = a0.scale(Complex64::new(1.0 / a0.l2_norm(), 0.0));
        let gain = w.hermitian_inner(&s.h).norm_sqr() / (s.h.l2_norm() * s.h.l2_norm());
        assert!((gain - 1.0).abs() < 1e-12, "gain {gain}");
    }

    #[test]
    fn indoor_scene_every_position_reflects_without_los() {
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let array = unit_array(8);
        // The walls must never starve a grid position of paths, and no grid
        // position may sit inside a wall slab.
        for i in 0..scenario.ue_grid.num_points() {
            let pos = scenario.ue_grid.point(i);
            assert!(
                !scenario.blockers.iter().any(|b| b.contains_point(pos)),
                "grid point {pos:?} lies inside a wall"
            );
            let mut rng = RngStream::new(3, i as u64);
            let s = synthesize_channel(&scenario, &array, pos, &mut rng);
            assert!(
                (1..=3).contains(&s.paths.len()),
                "position {pos:?} sees {} anchors",
                s.paths.len()
            );
            // every path angle matches some anchor direction, never the UE direction
            for p in &s.paths {
                let is_anchor_angle = scenario
                    .anchors
                    .iter()
                    .any(|a| (departure_angle(a.position) - p.angle).abs() < 1e-12);
                assert!(is_anchor_angle);
            }
        }
    }

    #[test]
    fn mirrored_scene_mirrors_path_angles() {
        let array = unit_array(8);
        let base = SiteScenario {
            id: ScenarioId::IndoorNlos,
            anchors: vec![
                Anchor {
                    position: (4.0, 9.0),
                    reflectivity: 1.0,
                },
                Anchor {
                    position: (-2.0, 14.0),
                    reflectivity: 0.8,
                },
            ],
            ue_grid: UeGrid {
                x_min: -8.0,
                x_max: 8.0,
                y_min: 2.0,
                y_max: 18.0,
                spacing: 1.0,
            },
            blockers: Vec::new(),
            los_mode: LosMode::ByGeometry,
            rng_seed: 0,
        };
        let mirrored = SiteScenario {
            anchors: base
                .anchors
                .iter()
                .map(|a| Anchor {
                    position: (-a.position.0, a.position.1),
                    reflectivity: a.reflectivity,
                })
                .collect(),
            ..base.clone()
        };
        let pos = (3.0, 7.0);
        let mirror_pos = (-3.0, 7.0);
        let mut r1 = RngStream::new(5, 0);
        let mut r2 = RngStream::new(5, 0);
        let s1 = synthesize_channel(&base, &array, pos, &mut r1);
        let s2 = synthesize_channel(&mirrored, &array, mirror_pos, &mut r2);
        assert_eq!(s1.paths.len(), s2.paths.len());
        // independent geometric recomputation: angle of BS->target mirrors
        for (p1, p2) in s1.paths.iter().zip(&s2.paths) {
            assert!(
                (p1.angle + p2.angle).abs() < 1e-12,
                "angles {} and {} are not mirrored",
                p1.angle,
                p2.angle
            );
        }
    }

    #[test]
    fn channel_resums_from_paths() {
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let array = unit_array(16);
        for i in 0..24 {
            let pos = scenario.ue_grid.point(i * 61);
            let mut rng = RngStream::new(11, i as u64);
            let s = synthesize_channel(&scenario, &array, pos, &mut rng);
            let mut resum = CVec::zeros(16);
            for p in &s.paths {
                resum = resum.add(&array.steering_vector(p.angle).scale(p.gain));
            }
            let mut err = 0.0f64;
            for n in 0..16 {
                err += (resum[n] - s.h[n]).norm_sqr();
            }
            let rel = err.sqrt() / s.h.l2_norm();
            assert!(rel < 1e-9, "relative resum error {rel}");
            assert!(s.h.l2_norm() > 0.0);
        }
    }

    #[test]
    #[should_panic(expected = "outside the scenario grid")]
    fn synthesize_rejects_out_of_grid_position() {
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let array = unit_array(4);
        let mut rng = RngStream::new(1, 0);
        let _ = synthesize_channel(&scenario, &array, (55.0, 55.0), &mut rng);
    }

    #[test]
    fn dataset_same_seed_identical() {
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let array = unit_array(8);
        let d1 = generate_dataset(&scenario, &array, 50, 21);
        let d2 = generate_dataset(&scenario, &array, 50, 21);
        assert_eq!(d1, d2);
    }

    #[test]
    fn dataset_covers_grid_once_when_sizes_match() {
        let scenario = SiteScenario {
            ue_grid: UeGrid {
                x_min: 0.0,
                x_max: 3.0,
                y_min: 5.0,
                y_max: 7.0,
                spacing: 1.0,
            },
            ..SiteScenario::default_for(ScenarioId::IndoorNlos)
        };
        let array = unit_array(4);
        let n = scenario.ue_grid.num_points();
        assert_eq!(n, 12);
        let d = generate_dataset(&scenario, &array, n, 3);
        let mut positions: Vec<(i64, i64)> = d
            .samples
            .iter()
            .map(|s| {
                (
                    (s.ue_position.0 * 1000.0) as i64,
                    (s.ue_position.1 * 1000.0) as i64,
                )
            })
            .collect();
        positions.sort();
        positions.dedup();
        assert_eq!(positions.len(), n);
    }

    #[test]
    fn split_proportions_exact_over_ten_thousand() {
        let n = 10_000usize;
        let mut counts = [0usize; 3];
        for i in 0..n {
            counts[split_tag_for(77, i).to_u8() as usize] += 1;
        }
        assert_eq!(counts[0], 8_000);
        assert_eq!(counts[1], 1_000);
        assert_eq!(counts[2], 1_000);
    }

    #[test]
    fn grid_repeat_uses_fresh_fading() {
        let scenario = SiteScenario {
            ue_grid: UeGrid {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 5.0,
                y_max: 5.0,
                spacing: 1.0,
            },
            ..SiteScenario::default_for(ScenarioId::IndoorNlos)
        };
        let array = unit_array(4);
        let d = generate_dataset(&scenario, &array, 4, 9);
        // samples 0 and 2 share a position but not a fading draw
        assert_eq!(d.samples[0].ue_position, d.samples[2].ue_position);
        assert_ne!(d.samples[0].h, d.samples[2].h);
    }

    #[test]
    fn urban_scene_blocks_a_plausible_fraction_of_los() {
        let scenario = SiteScenario::default_for(ScenarioId::UrbanMixed);
        let total = scenario.ue_grid.num_points();
        let blocked = (0..total)
            .filter(|&i| scenario.los_blocked(scenario.ue_grid.point(i)))
            .count();
        let frac = blocked as f64 / total as f64;
        assert!(
            (0.30..=0.50).contains(&frac),
            "blocked fraction {frac:.3} outside [0.30, 0.50]"
        );
        // anchors stay visible everywhere, so every point keeps >= 1 path
        for i in (0..total).step_by(97) {
            let pos = scenario.ue_grid.point(i);
            let visible = scenario
                .anchors
                .iter()
                .filter(|a| scenario.anchor_visible(pos, a))
                .count();
            assert!(visible >= 1);
        }
    }

    #[test]
    fn polygon_blocks_segment_through_it() {
        let poly = Polygon::rectangle(-1.0, 4.0, 1.0, 6.0);
        assert!(poly.blocks_segment((0.0, 0.0), (0.0, 10.0)));
        assert!(!poly.blocks_segment((0.0, 0.0), (5.0, 2.0)));
        assert!(poly.blocks_segment((0.0, 5.0), (0.0, 20.0))); // endpoint inside
        assert!(poly.contains_point((0.0, 5.0)));
        assert!(!poly.contains_point((3.0, 5.0)));
    }

    #[test]
    fn anchor_visibility_respects_blockers() {
        let scenario = SiteScenario {
            id: ScenarioId::UrbanMixed,
            anchors: vec![Anchor {
                position: (0.0, 30.0),
                reflectivity: 1.0,
            }],
            ue_grid: UeGrid {
                x_min: -10.0,
                x_max: 10.0,
                y_min: 1.0,
                y_max: 20.0,
                spacing: 1.0,
            },
            blockers: vec![Polygon::rectangle(-2.0, 22.0, 2.0, 26.0)],
            los_mode: LosMode::ByGeometry,
            rng_seed: 0,
        };
        let anchor = &scenario.anchors[0];
        assert!(!scenario.anchor_visible((0.0, 10.0), anchor));
        assert!(scenario.anchor_visible((10.0, 28.0), anchor));
    }

    #[test]
    fn dataset_round_trip_within_f32_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gsbf");
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let array = unit_array(8);
        let d = generate_dataset(&scenario, &array, 3, 5);
        write_dataset(&path, &d).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.array, d.array);
        assert_eq!(back.scenario, d.scenario);
        assert_eq!(back.seed, d.seed);
        assert_eq!(back.split_tags, d.split_tags);
        assert_eq!(back.samples.len(), d.samples.len());
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert!((a.ue_position.0 - b.ue_position.0).abs() < 1e-4);
            assert_eq!(a.paths.len(), b.paths.len());
            for n in 0..8 {
                let denom = a.h[n].norm().max(1e-12);
                assert!((a.h[n] - b.h[n]).norm() / denom < 1e-6);
            }
        }
    }

    #[test]
    fn read_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gsbf");
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let d = generate_dataset(&scenario, &unit_array(4), 2, 5);
        write_dataset(&path, &d).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::BadMagic(_)) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn read_names_truncated_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gsbf");
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let d = generate_dataset(&scenario, &unit_array(4), 3, 5);
        write_dataset(&path, &d).unwrap();
        let bytes = fs::read(&path).unwrap();
        // slice off the tail of the final record
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Truncated { record }) => assert_eq!(record, 2),
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn read_rejects_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gsbf");
        let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
        let d = generate_dataset(&scenario, &unit_array(4), 1, 5);
        write_dataset(&path, &d).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9; // version low byte
        fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::UnsupportedVersion(9)) => {}
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }
}
