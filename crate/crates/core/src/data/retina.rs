//! "Retina-toy": a seeded generator of 64x64 fundus-like images whose
//! grade is a fixed function of the number of rendered lesions.

use gues_tensor::{derive_seed, SeededRng};

use crate::error::{Error, Result};
use crate::image::Image;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_GRADES: usize = 5;

/// Grade proportions 0..=4 (imbalanced, dominated by grade 0).
pub const DEFAULT_GRADE_DISTRIBUTION: [f64; NUM_GRADES] = [0.49, 0.10, 0.27, 0.05, 0.09];

/// Inclusive lesion-count range rendered for each grade.
const COUNT_RANGES: [(usize, usize); NUM_GRADES] = [(0, 0), (1, 2), (3, 5), (6, 8), (9, 11)];

const DISC_RGB: [f64; 3] = [0.62, 0.33, 0.15];
const EXUDATE_RGB: [f64; 3] = [0.98, 0.92, 0.55];
const HEMORRHAGE_RGB: [f64; 3] = [0.12, 0.03, 0.02];
const DISC_RADIUS: f64 = 30.0;
/// Lesion radius grows with severity: `base + step * grade`, jittered.
const LESION_RADIUS_BASE: f64 = 1.5;
const LESION_RADIUS_STEP: f64 = 0.7;
const LESION_RADIUS_JITTER: f64 = 0.1;
/// Clearance between lesion rims.
const LESION_CLEARANCE: f64 = 2.0;
const BORDER_MARGIN: f64 = 5.0;
/// Width of the darkening ramp at the fundus edge.
const RIM_WIDTH: f64 = 8.0;
const GAIN_RANGE: (f64, f64) = (0.95, 1.05);
/// Sub-pixel samples per axis for lesion edge coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LesionKind {
    /// Bright yellowish spot.
    Exudate,
    /// Dark red spot.
    Hemorrhage,
}

/// An axis-aligned elliptical lesion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub kind: LesionKind,
    pub center: (f64, f64),
    pub radii: (f64, f64),
}

impl Lesion {
    fn contains(&self, row: f64, col: f64) -> bool {
        let dy = (row - self.center.0) / self.radii.0;
        let dx = (col - self.center.1) / self.radii.1;
        dy * dy + dx * dx <= 1.0
    }

    /// Inclusive pixel bounding box `(row0, col0, row1, col1)`.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let lo = |c: f64, r: f64| (c - r).floor().max(0.0) as usize;
        let hi = |c: f64, r: f64| ((c + r).ceil() as usize).min(IMAGE_SIZE - 1);
        (
            lo(self.center.0, self.radii.0),
            lo(self.center.1, self.radii.1),
            hi(self.center.0, self.radii.0),
            hi(self.center.1, self.radii.1),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetinaToySample {
    pub image: Image,
    pub grade: usize,
    pub domain: Domain,
    pub lesions: Vec<Lesion>,
}

pub fn grade_for_lesion_count(count: usize) -> usize {
    match count {
        0 => 0,
        1..=2 => 1,
        3..=5 => 2,
        6..=8 => 3,
        _ => 4,
    }
}

fn validate_distribution(dist: &[f64]) -> Result<()> {
    if dist.len() != NUM_GRADES {
        return Err(Error::Config(format!("grade distribution needs {NUM_GRADES} entries, got {}", dist.len())));
    }
    if dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Config(format!("grade probabilities must be non-negative: {dist:?}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grade distribution sums to {total}, not 1")));
    }
    Ok(())
}

/// Per-grade quotas by largest remainder, so class counts track the
/// distribution to within one sample.
fn grade_quotas(n: usize, dist: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = dist.iter().map(|p| p * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - quotas.iter().sum::<usize>();
    for &g in order.iter().take(missing) {
        quotas[g] += 1;
    }
    quotas
}

/// Renders `n` source-domain samples. Grades follow `distribution` by
/// quota and are assigned in a seeded shuffled order; sample `i` is drawn
/// from its own derived seed.
pub fn generate_retinatoy(seed: u64, n: usize, distribution: &[f64]) -> Result<Vec<RetinaToySample>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    validate_distribution(distribution)?;
    let mut grades: Vec<usize> = grade_quotas(n, distribution)
        .iter()
        .enumerate()
        .flat_map(|(g, &q)| std::iter::repeat(g).take(q))
        .collect();
    let mut rng = SeededRng::new(derive_seed(seed, u64::MAX));
    for i in (1..grades.len()).rev() {
        let j = rng.int_inclusive(0, i);
        grades.swap(i, j);
    }
    Ok(grades
        .iter()
        .enumerate()
        .map(|(i, &grade)| {
            let mut rng = SeededRng::new(derive_seed(seed, i as u64));
            let (lo, hi) = COUNT_RANGES[grade];
            let total = rng.int_inclusive(lo, hi);
            // mild cases show dark dots only, as early lesions would
            let exudates = if grade == 1 { 0 } else { rng.int_inclusive(0, total) };
            render(&mut rng, exudates, total - exudates)
        })
        .collect())
}

/// Renders one sample with exactly the requested lesion counts.
pub fn render_with_counts(seed: u64, exudates: usize, hemorrhages: usize) -> RetinaToySample {
    render(&mut SeededRng::new(seed), exudates, hemorrhages)
}

fn place_lesions(rng: &mut SeededRng, exudates: usize, hemorrhages: usize, disc: (f64, f64)) -> Vec<Lesion> {
    let mut lesions: Vec<Lesion> = Vec::with_capacity(exudates + hemorrhages);
    let kinds = std::iter::repeat(LesionKind::Exudate)
        .take(exudates)
        .chain(std::iter::repeat(LesionKind::Hemorrhage).take(hemorrhages));
    let max = IMAGE_SIZE as f64 - 1.0 - BORDER_MARGIN;
    let radius = LESION_RADIUS_BASE + LESION_RADIUS_STEP * grade_for_lesion_count(exudates + hemorrhages) as f64;
    for kind in kinds {
        let mut jittered = || radius + rng.uniform_range(-LESION_RADIUS_JITTER, LESION_RADIUS_JITTER);
        let radii = (jittered(), jittered());
        // rejection sampling with a progressively relaxed spacing keeps
        // placement total even for crowded images
        let mut spacing = 2.0 * (radius + LESION_RADIUS_JITTER) + LESION_CLEARANCE;
        let center = loop {
            let mut found = None;
            for _ in 0..200 {
                let c = (rng.uniform_range(BORDER_MARGIN, max), rng.uniform_range(BORDER_MARGIN, max));
                let inside = (c.0 - disc.0).hypot(c.1 - disc.1) < DISC_RADIUS - 5.0;
                let clear = lesions
                    .iter()
                    .all(|l| (l.center.0 - c.0).hypot(l.center.1 - c.1) >= spacing);
                if inside && clear {
                    found = Some(c);
                    break;
                }
            }
            match found {
                Some(c) => break c,
                None => spacing *= 0.8,
            }
        };
        lesions.push(Lesion { kind, center, radii });
    }
    lesions
}

fn render(rng: &mut SeededRng, exudates: usize, hemorrhages: usize) -> RetinaToySample {
    let disc = (
        IMAGE_SIZE as f64 / 2.0 + rng.uniform_range(-2.0, 2.0),
        IMAGE_SIZE as f64 / 2.0 + rng.uniform_range(-2.0, 2.0),
    );
    let gain = rng.uniform_range(GAIN_RANGE.0, GAIN_RANGE.1);
    let lesions = place_lesions(rng, exudates, hemorrhages, disc);
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    let step = 1.0 / SUPERSAMPLE as f64;
    let offsets: Vec<f64> = (0..SUPERSAMPLE).map(|k| (k as f64 + 0.5) * step - 0.5).collect();
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (r, c) = (row as f64, col as f64);
            let radius = (r - disc.0).hypot(c - disc.1);
            if radius > DISC_RADIUS {
                data.extend([0.0; 3]);
                continue;
            }
            // smooth vignette instead of a hard edge, as in real fundus photos
            let t = ((DISC_RADIUS - radius) / RIM_WIDTH).min(1.0);
            let vignette = t * t * (3.0 - 2.0 * t);
            // area-weighted blend so a lesion's integrated intensity tracks
            // its area rather than its pixel-grid alignment
            let mut rgb = [0.0; 3];
            for &dr in &offsets {
                for &dc in &offsets {
                    let colour = match lesions.iter().find(|l| l.contains(r + dr, c + dc)) {
                        Some(l) if l.kind == LesionKind::Exudate => EXUDATE_RGB,
                        Some(_) => HEMORRHAGE_RGB,
                        None => DISC_RGB,
                    };
                    for (acc, v) in rgb.iter_mut().zip(colour) {
                        *acc += v;
                    }
                }
            }
            let norm = gain * vignette / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            data.extend(rgb.map(|v| v * norm));
        }
    }
    RetinaToySample {
        image: Image::from_unclamped(IMAGE_SIZE, IMAGE_SIZE, data),
        grade: grade_for_lesion_count(lesions.len()),
        domain: Domain::Source,
        lesions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        let expected = [0, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4];
        for (count, grade) in expected.iter().enumerate() {
            assert_eq!(grade_for_lesion_count(count), *grade);
        }
    }

    #[test]
    fn forced_zero_lesions_is_grade_zero() {
        let s = render_with_counts(5, 0, 0);
        assert_eq!(s.grade, 0);
        assert!(s.lesions.is_empty());
    }

    #[test]
    fn quotas_match_distribution() {
        let q = grade_quotas(1000, &DEFAULT_GRADE_DISTRIBUTION);
        assert_eq!(q, vec![490, 100, 270, 50, 90]);
        assert_eq!(grade_quotas(7, &[0.5, 0.5, 0.0, 0.0, 0.0]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert!(generate_retinatoy(1, 10, &[0.5, 0.5]).is_err());
        assert!(generate_retinatoy(1, 10, &[0.5, 0.6, 0.0, 0.0, -0.1]).is_err());
        assert!(generate_retinatoy(1, 10, &[0.3, 0.3, 0.0, 0.0, 0.0]).is_err());
        assert!(matches!(generate_retinatoy(1, 0, &DEFAULT_GRADE_DISTRIBUTION), Err(Error::EmptyDataset)));
    }

    #[test]
    fn grade_matches_rendered_lesions() {
        for s in generate_retinatoy(3, 60, &DEFAULT_GRADE_DISTRIBUTION).unwrap() {
            assert_eq!(s.grade, grade_for_lesion_count(s.lesions.len()));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
