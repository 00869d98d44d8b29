//! Evaluation: rasterization, adjacency extraction, compatibility and
//! Fréchet distance over image features.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bubblegan_autograd::nn::Conv2d;
use bubblegan_autograd::{ParamStore, Tensor};

use crate::exec::Exec;
use crate::graph::{BubbleDiagram, RoomType};
use crate::synth::{LayoutSample, Rect, GRID};

/// Max gap (px) between two rooms that still counts as adjacency.
pub const ADJACENCY_GAP: i32 = 2;

/// RGB colors by room type id; index 10 is the white background.
pub const PALETTE: [[u8; 3]; 11] = [
    [238, 77, 77],   // living room
    [192, 143, 80],  // kitchen
    [255, 215, 0],   // bedroom
    [69, 146, 219],  // bathroom
    [168, 107, 190], // closet
    [112, 198, 98],  // balcony
    [138, 138, 138], // corridor
    [255, 152, 51],  // dining room
    [66, 199, 191],  // laundry room
    [50, 50, 50],    // unknown
    [255, 255, 255], // background
];
pub const BACKGROUND: u8 = 10;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("expected {expected} rectangles, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("covariance matrix is not symmetric (max asymmetry {0:e})")]
    NonSymmetricCovariance(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding failed: {0}")]
    Image(String),
    #[error("bad extractor file: {0}")]
    Format(String),
}

/// 32×32 grid of palette indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn blank() -> Self {
        Self { pixels: vec![BACKGROUND; (GRID * GRID) as usize] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * GRID as usize + col]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        PALETTE[self.get(row, col) as usize]
    }

    /// `scale`× nearest-neighbour upscaled PNG.
    pub fn write_png(&self, path: &Path, scale: u32) -> Result<(), MetricsError> {
        let side = GRID as u32 * scale.max(1);
        let img = image::RgbImage::from_fn(side, side, |x, y| {
            let s = scale.max(1);
            image::Rgb(self.rgb((y / s) as usize, (x / s) as usize))
        });
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| MetricsError::Image(e.to_string()))
    }
}

/// Paint rooms largest-first so small rooms stay visible; ties keep index order.
pub fn rasterize(rects: &[Rect], types: &[RoomType]) -> RasterImage {
    let rooms: Vec<(Rect, RoomType)> = rects.iter().copied().zip(types.iter().copied()).collect();
    rasterize_rooms(&rooms)
}

fn rasterize_rooms(rooms: &[(Rect, RoomType)]) -> RasterImage {
    let mut order: Vec<usize> = (0..rooms.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(rooms[i].0.area()), i));
    let mut img = RasterImage::blank();
    for i in order {
        let (r, t) = rooms[i];
        for y in r.y0.max(0)..r.y1.min(GRID) {
            for x in r.x0.max(0)..r.x1.min(GRID) {
                img.pixels[(y * GRID + x) as usize] = t.id() as u8;
            }
        }
    }
    img
}

/// Rasterize a generated layout, skipping rooms whose mask came out empty.
pub fn rasterize_partial(rects: &[Option<Rect>], types: &[RoomType]) -> RasterImage {
    let rooms: Vec<(Rect, RoomType)> = rects
        .iter()
        .zip(types)
        .filter_map(|(r, &t)| r.map(|r| (r, t)))
        .collect();
    rasterize_rooms(&rooms)
}

/// Rooms touch when the gap along one axis is at most [`ADJACENCY_GAP`] and
/// their projections on the other axis share at least one pixel.
pub fn rects_adjacent(a: &Rect, b: &Rect) -> bool {
    let gap_x = a.x0.max(b.x0) - a.x1.min(b.x1);
    let gap_y = a.y0.max(b.y0) - a.y1.min(b.y1);
    // a negative gap on one axis is a positive overlap on it
    (gap_x <= ADJACENCY_GAP && -gap_y >= 1) || (gap_y <= ADJACENCY_GAP && -gap_x >= 1)
}

fn adjacency_edges(rects: &[Option<Rect>]) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for i in 0..rects.len() {
        for j in i + 1..rects.len() {
            if let (Some(a), Some(b)) = (&rects[i], &rects[j]) {
                if rects_adjacent(a, b) {
                    edges.insert((i, j));
                }
            }
        }
    }
    edges
}

pub fn extract_bubble_diagram(rects: &[Rect], types: &[RoomType]) -> BubbleDiagram {
    let opt: Vec<Option<Rect>> = rects.iter().copied().map(Some).collect();
    extract_partial(&opt, types)
}

/// Missing rooms keep their node but get no edges.
pub fn extract_partial(rects: &[Option<Rect>], types: &[RoomType]) -> BubbleDiagram {
    assert_eq!(rects.len(), types.len());
    BubbleDiagram::new(types.to_vec(), adjacency_edges(rects)).expect("extracted edges are valid")
}

/// Size of the symmetric difference of two edge sets.
pub fn edge_distance(a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>) -> usize {
    a.symmetric_difference(b).count()
}

/// Graph edit distance under the fixed room-index correspondence.
pub fn compatibility(input: &BubbleDiagram, generated: &[Rect]) -> Result<usize, MetricsError> {
    let opt: Vec<Option<Rect>> = generated.iter().copied().map(Some).collect();
    compatibility_partial(input, &opt)
}

pub fn compatibility_partial(input: &BubbleDiagram, generated: &[Option<Rect>]) -> Result<usize, MetricsError> {
    if generated.len() != input.num_rooms() {
        return Err(MetricsError::LengthMismatch { expected: input.num_rooms(), got: generated.len() });
    }
    Ok(edge_distance(input.edges(), &adjacency_edges(generated)))
}

/// Sample mean and unbiased covariance of row vectors.
pub fn gaussian_stats(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    assert!(!features.is_empty(), "no features");
    let d = features[0].len();
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = (centered.transpose() * &centered) / denom;
    (mu, cov)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<(), MetricsError> {
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    if asym > 1e-8 * scale {
        return Err(MetricsError::NonSymmetricCovariance(asym));
    }
    Ok(())
}

/// PSD square root via symmetric eigendecomposition, negative eigenvalues clipped.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
///
/// `Tr((Σ₁Σ₂)^{1/2})` is computed as `Tr((S Σ₂ S)^{1/2})` with `S = Σ₁^{1/2}`;
/// both matrices share their spectrum and the latter is symmetric.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64, MetricsError> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(MetricsError::DimensionMismatch(format!(
            "means {} / {}, covariances {:?} / {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    check_symmetric(cov1)?;
    check_symmetric(cov2)?;
    let s1 = sqrt_psd(cov1);
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    // round-off can push an exact zero slightly negative
    Ok(value.max(0.0))
}

pub fn frechet_distance_of_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    let (m1, c1) = gaussian_stats(a);
    let (m2, c2) = gaussian_stats(b);
    frechet_distance(&m1, &c1, &m2, &c2)
}

/// Any fixed map from rasterized layouts to feature vectors.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn features(&self, image: &RasterImage) -> Vec<f64>;
}

/// Two strided random convolutions followed by 2×2 average pooling.
/// Weights are drawn once from a seed and can be persisted next to reports.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    seed: u64,
    store: ParamStore,
    convs: [Conv2d; 2],
}

#[derive(Serialize, Deserialize)]
struct ExtractorFile {
    kind: String,
    seed: u64,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl RandomConvExtractor {
    pub const CHANNELS: [usize; 3] = [3, 8, 16];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c0, c1, c2] = Self::CHANNELS;
        let convs = [
            Conv2d::new(&mut store, "feat.0", c0, c1, 3, 2, 1, &mut rng),
            Conv2d::new(&mut store, "feat.1", c1, c2, 3, 2, 1, &mut rng),
        ];
        Self { seed, store, convs }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn to_json(&self) -> String {
        let params = self
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.to_vec()))
            .collect();
        serde_json::to_string(&ExtractorFile { kind: "random_conv".into(), seed: self.seed, params })
            .expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let file: ExtractorFile = serde_json::from_str(text).map_err(|e| MetricsError::Format(e.to_string()))?;
        if file.kind != "random_conv" {
            return Err(MetricsError::Format(format!("unknown extractor kind '{}'", file.kind)));
        }
        let mut ex = Self::new(file.seed);
        for (name, shape, data) in file.params {
            let id = ex
                .store
                .id_of(&name)
                .ok_or_else(|| MetricsError::Format(format!("unknown parameter '{name}'")))?;
            if ex.store.get(id).shape() != shape.as_slice() {
                return Err(MetricsError::Format(format!("shape mismatch for '{name}'")));
            }
            ex.store.set(id, data);
        }
        Ok(ex)
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn dim(&self) -> usize {
        Self::CHANNELS[2] * 4
    }

    fn features(&self, image: &RasterImage) -> Vec<f64> {
        let g = GRID as usize;
        let mut rgb = vec![0.0; 3 * g * g];
        for p in 0..g * g {
            let c = PALETTE[image.pixels[p] as usize];
            for k in 0..3 {
                rgb[k * g * g + p] = c[k] as f64 / 127.5 - 1.0;
            }
        }
        let x = Tensor::new(rgb, &[1, 3, g, g]);
        let h = self.convs[0].forward(&self.store, &x).tanh();
        let h = self.convs[1].forward(&self.store, &h).tanh();
        // [1, 16, 8, 8] -> 2x2 quadrant means
        let data = h.data();
        let (c, s) = (Self::CHANNELS[2], g / 4);
        let half = s / 2;
        let mut out = vec![0.0; c * 4];
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let q = (y / half) * 2 + x / half;
                    out[ch * 4 + q] += data[(ch * s + y) * s + x] / (half * half) as f64;
                }
            }
        }
        out
    }
}

/// Anything that turns a diagram into (possibly missing) room rectangles.
pub trait LayoutModel: Sync {
    fn layout(&self, diagram: &BubbleDiagram, seed: u64) -> Vec<Option<Rect>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub compatibility_mean: f64,
    pub fid: f64,
    pub sample_count: usize,
    pub bucket: String,
}

/// Generate `n_samples` layouts from the held-out diagrams (cycling through
/// them) and compare against the held-out layouts.
pub fn evaluate_suite(
    model: &dyn LayoutModel,
    held_out: &[LayoutSample],
    bucket: &str,
    extractor: &dyn FeatureExtractor,
    n_samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport, MetricsError> {
    if held_out.is_empty() || n_samples == 0 {
        return Ok(EvalReport { compatibility_mean: 0.0, fid: 0.0, sample_count: 0, bucket: bucket.into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_samples).map(|_| rng.random()).collect();
    let generated = exec.map_range(n_samples, |k| {
        let sample = &held_out[k % held_out.len()];
        let rects = model.layout(&sample.diagram, seeds[k]);
        let compat = compatibility_partial(&sample.diagram, &rects)?;
        let feat = extractor.features(&rasterize_partial(&rects, sample.diagram.room_types()));
        Ok::<_, MetricsError>((compat, feat))
    });
    let mut compat_sum = 0usize;
    let mut fake = Vec::with_capacity(n_samples);
    for g in generated {
        let (c, f) = g?;
        compat_sum += c;
        fake.push(f);
    }
    let real = exec.map(held_out, |s| extractor.features(&rasterize(&s.rects, s.diagram.room_types())));
    Ok(EvalReport {
        compatibility_mean: compat_sum as f64 / n_samples as f64,
        fid: frechet_distance_of_features(&fake, &real)?,
        sample_count: n_samples,
        bucket: bucket.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(x0: i32, y0: i32, x1: i32, y1: i32) -> Rect {
        Rect::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn full_canvas_is_one_color() {
        let img = rasterize(&[Rect::full()], &[RoomType::Kitchen]);
        assert!(img.pixels().iter().all(|&p| p == RoomType::Kitchen.id() as u8));
    }

    #[test]
    fn smaller_room_painted_on_top() {
        let big = r(0, 0, 3, 3);
        let small = r(1, 1, 3, 3);
        for order in [[0, 1], [1, 0]] {
            let rects = [[big, small][order[0]], [big, small][order[1]]];
            let types = [[RoomType::Bedroom, RoomType::Closet][order[0]], [RoomType::Bedroom, RoomType::Closet][order[1]]];
            let img = rasterize(&rects, &types);
            assert_eq!(img.get(2, 2), RoomType::Closet.id() as u8);
            assert_eq!(img.get(0, 0), RoomType::Bedroom.id() as u8);
            assert_eq!(img.get(5, 5), BACKGROUND);
        }
    }

    #[test]
    fn equal_areas_later_index_wins() {
        let img = rasterize(&[r(0, 0, 2, 2), r(1, 1, 3, 3)], &[RoomType::Bedroom, RoomType::Bathroom]);
        assert_eq!(img.get(1, 1), RoomType::Bathroom.id() as u8);
    }

    #[test]
    fn adjacency_rule() {
        let a = r(0, 0, 5, 5);
        assert!(rects_adjacent(&a, &r(5, 0, 9, 5))); // shared boundary
        assert!(rects_adjacent(&a, &r(7, 2, 9, 3))); // gap 2
        assert!(!rects_adjacent(&a, &r(8, 0, 12, 5))); // gap 3
        assert!(!rects_adjacent(&a, &r(5, 5, 9, 9))); // corner only
        assert!(rects_adjacent(&a, &r(2, 2, 4, 4))); // overlap
        assert!(rects_adjacent(&a, &r(4, 6, 9, 9))); // 1 px projection overlap, gap 1
    }

    #[test]
    fn compatibility_examples() {
        use RoomType::*;
        let d = BubbleDiagram::new(vec![Kitchen, Bedroom, Closet], [(0, 1), (1, 2)]).unwrap();
        let rects = [r(0, 0, 5, 5), r(5, 0, 10, 5), r(20, 20, 25, 25)];
        assert_eq!(compatibility(&d, &rects).unwrap(), 1);
        let exact = [r(0, 0, 5, 5), r(5, 0, 10, 5), r(10, 0, 15, 5)];
        assert_eq!(compatibility(&d, &exact).unwrap(), 0);
        assert!(matches!(compatibility(&d, &exact[..2]), Err(MetricsError::LengthMismatch { .. })));
        assert_eq!(compatibility_partial(&d, &[Some(exact[0]), None, Some(exact[2])]).unwrap(), 2);
    }

    #[test]
    fn frechet_identity_and_equal_covariance() {
        let mu1 = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let mu2 = DVector::from_vec(vec![0.5, 0.0, 1.0]);
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!(frechet_distance(&mu1, &eye, &mu1, &eye).unwrap().abs() < 1e-6);
        let expected = (mu1.clone() - &mu2).norm_squared();
        assert!((frechet_distance(&mu1, &eye, &mu2, &eye).unwrap() - expected).abs() < 1e-6);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let z = DVector::zeros(2);
        assert!(matches!(
            frechet_distance(&z, &bad, &z, &bad),
            Err(MetricsError::NonSymmetricCovariance(_))
        ));
    }

    #[test]
    fn extractor_is_deterministic_and_persists() {
        let ex = RandomConvExtractor::new(3);
        let img = rasterize(&[r(0, 0, 10, 20), r(11, 0, 32, 32)], &[RoomType::Bedroom, RoomType::Kitchen]);
        let f = ex.features(&img);
        assert_eq!(f.len(), ex.dim());
        let back = RandomConvExtractor::from_json(&ex.to_json()).unwrap();
        assert_eq!(back.features(&img), f);
        assert_ne!(RandomConvExtractor::new(4).features(&img), f);
    }

    #[test]
    fn png_output() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        rasterize(&[r(0, 0, 10, 10)], &[RoomType::Balcony]).write_png(&p, 4).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (128, 128));
        assert_eq!(img.get_pixel(0, 0).0, PALETTE[RoomType::Balcony.id()]);
        assert_eq!(img.get_pixel(127, 127).0, PALETTE[BACKGROUND as usize]);
    }
}
