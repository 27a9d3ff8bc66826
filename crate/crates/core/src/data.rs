//! Image datasets: CSV/IDX loading, seeded splits and the bundled 8x8 digit
//! corpus generator.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Idx,
}

/// Images stored contiguously as `[C, H, W]` blocks with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], num_classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values do not form {} images of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels_per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("split fractions must lie in [0, 1]".into()));
        }
        if ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {}",
                parts.iter().sum::<f64>()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Seeded shuffle followed by contiguous train/val/test slices. Train and
/// validation sizes are rounded; the test split takes the remainder.
pub fn split(data: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0));
    order.shuffle(&mut rng);
    let n_train = ((fractions.train * n as f64).round() as usize).min(n);
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
    Ok(Splits {
        train: data.subset(&order[..n_train]),
        val: data.subset(&order[n_train..n_train + n_val]),
        test: data.subset(&order[n_train + n_val..]),
    })
}

/// Loads a dataset. CSV rows are `label,p0,p1,...` with 0..=255 pixels; an
/// optional non-numeric header row is skipped. IDX reads an `idx3-ubyte`
/// image file whose labels live next to it (see [`idx_labels_path`]).
pub fn load_dataset(path: &Path, format: DataFormat, shape: [usize; 3], num_classes: usize) -> Result<Dataset> {
    match format {
        DataFormat::Csv => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
            parse_csv(&text, shape, num_classes)
        }
        DataFormat::Idx => {
            let images = fs::read(path)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
            let label_path = idx_labels_path(path);
            let labels = fs::read(&label_path)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", label_path.display())))?;
            parse_idx(&images, &labels, num_classes)
        }
    }
}

/// `foo-images-idx3-ubyte` pairs with `foo-labels-idx1-ubyte`; any other name
/// pairs with `<name>.labels`.
pub fn idx_labels_path(images: &Path) -> std::path::PathBuf {
    let name = images.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.contains("images-idx3") {
        images.with_file_name(name.replace("images-idx3", "labels-idx1"))
    } else {
        images.with_file_name(format!("{name}.labels"))
    }
}

pub fn parse_csv(text: &str, shape: [usize; 3], num_classes: usize) -> Result<Dataset> {
    let per: usize = shape.iter().product();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        let label: usize = match first.parse() {
            Ok(l) => l,
            Err(_) if line_no == 0 && first.parse::<f64>().is_err() => continue,
            Err(_) => {
                return Err(Error::Data(format!(
                    "line {}: label `{first}` is not a non-negative integer",
                    line_no + 1
                )))
            }
        };
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let start = images.len();
        for field in fields {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Data(format!("line {}: bad pixel `{field}`", line_no + 1)))?;
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::Data(format!(
                    "line {}: pixel {v} outside 0..=255",
                    line_no + 1
                )));
            }
            images.push((v / 255.0) as f32);
        }
        if images.len() - start != per {
            return Err(Error::Data(format!(
                "line {}: expected {per} pixels, found {}",
                line_no + 1,
                images.len() - start
            )));
        }
        labels.push(label);
    }
    Dataset::new(shape, num_classes, images, labels)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    if be_u32(images, 0)? != 0x0803 || be_u32(labels, 0)? != 0x0801 {
        return Err(Error::Data("bad IDX magic numbers".into()));
    }
    let (n, h, w) = (be_u32(images, 4)?, be_u32(images, 8)?, be_u32(images, 12)?);
    if be_u32(labels, 4)? != n {
        return Err(Error::Data("IDX image and label counts differ".into()));
    }
    let pixels = images
        .get(16..16 + n * h * w)
        .ok_or_else(|| Error::Data("truncated IDX image payload".into()))?;
    let raw_labels = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Data("truncated IDX label payload".into()))?;
    Dataset::new(
        [1, h, w],
        num_classes,
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        raw_labels.iter().map(|&l| l as usize).collect(),
    )
}

pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..data.len() {
        out.push_str(&data.label(i).to_string());
        for &p in data.image(i) {
            out.push(',');
            out.push_str(&((p * 255.0).round() as u32).to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

// 5x7 glyphs, one string per row, '#' = ink.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

/// Parameters of the synthetic 8x8 digit corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise (pixel range 0..1).
    pub noise: f64,
    /// Probability that any pixel is replaced by a uniform random value.
    pub clutter: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            per_class: 180,
            noise: 0.12,
            clutter: 0.03,
        }
    }
}

/// Generates the 10-class 8x8 digit corpus: each sample is a 5x7 glyph placed
/// at a random offset, randomly thickened or eroded, with intensity jitter,
/// Gaussian noise and random clutter pixels. Deterministic in `seed`.
pub fn generate_digits(params: CorpusParams, seed: u64) -> Dataset {
    const SIDE: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus", 0));
    let noise = Normal::new(0.0, params.noise.max(1e-12)).expect("finite noise");
    let mut images = Vec::with_capacity(params.per_class * 10 * SIDE * SIDE);
    let mut labels = Vec::with_capacity(params.per_class * 10);
    for i in 0..params.per_class * 10 {
        let digit = i % 10;
        let glyph = &GLYPHS[digit];
        let ox = rng.random_range(0..=SIDE - 5);
        let oy = rng.random_range(0..=SIDE - 7);
        let ink = rng.random_range(0.55..1.0);
        let thicken = rng.random_bool(0.25);
        let erode = !thicken && rng.random_bool(0.15);
        let mut img = [0.0f64; SIDE * SIDE];
        for (gy, row) in glyph.iter().enumerate() {
            for (gx, ch) in row.bytes().enumerate() {
                if ch != b'#' || (erode && rng.random_bool(0.2)) {
                    continue;
                }
                let (x, y) = (ox + gx, oy + gy);
                img[y * SIDE + x] = ink;
                if thicken && x + 1 < SIDE {
                    img[y * SIDE + x + 1] = img[y * SIDE + x + 1].max(ink * 0.8);
                }
            }
        }
        for px in img.iter_mut() {
            if rng.random_bool(params.clutter) {
                *px = rng.random_range(0.0..1.0);
            }
            *px = (*px + noise.sample(&mut rng)).clamp(0.0, 1.0);
            // stored at 8-bit resolution, like the CSV export
            *px = (*px * 255.0).round() / 255.0;
        }
        images.extend(img.iter().map(|&v| v as f32));
        labels.push(digit);
    }
    Dataset::new([1, SIDE, SIDE], 10, images, labels).expect("generator produces consistent shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_parses_and_normalizes() {
        let text = "label,a,b\n1,255,0\n0,0,51\n";
        let d = parse_csv(text, [1, 1, 2], 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.image(0), &[1.0, 0.0]);
        assert!((d.image(1)[1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv("3,1,2\n", [1, 1, 2], 3), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(parse_csv("1,1\n", [1, 1, 2], 3), Err(Error::Data(_))));
        assert!(matches!(parse_csv("1,x,2\n", [1, 1, 2], 3), Err(Error::Data(_))));
        assert!(matches!(parse_csv("0,1,2\n1.5,1,2\n", [1, 1, 2], 3), Err(Error::Data(_))));
        assert!(matches!(parse_csv("0,300,2\n", [1, 1, 2], 3), Err(Error::Data(_))));
    }

    #[test]
    fn four_rows_split_three_to_one() {
        let d = parse_csv("0,1\n1,2\n0,3\n1,4\n", [1, 1, 1], 2).unwrap();
        let s = split(
            &d,
            SplitFractions {
                train: 0.75,
                val: 0.0,
                test: 0.25,
            },
            9,
        )
        .unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 0, 1));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let d = generate_digits(
            CorpusParams {
                per_class: 10,
                ..Default::default()
            },
            1,
        );
        let a = split(&d, SplitFractions::default(), 5).unwrap();
        let b = split(&d, SplitFractions::default(), 5).unwrap();
        let c = split(&d, SplitFractions::default(), 6).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = parse_csv("0,1\n", [1, 1, 1], 1).unwrap();
        let bad = SplitFractions {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(matches!(split(&d, bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn idx_roundtrip() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        img.extend([255, 0, 10, 20]);
        let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 2];
        lab.extend([1, 0]);
        let d = parse_idx(&img, &lab, 2).unwrap();
        assert_eq!(d.shape(), [1, 1, 2]);
        assert_eq!(d.image(0), &[1.0, 0.0]);
        assert_eq!(d.labels(), &[1, 0]);
        assert!(parse_idx(&img[..18], &lab, 2).is_err());
    }

    #[test]
    fn corpus_is_balanced_and_deterministic() {
        let p = CorpusParams {
            per_class: 20,
            ..Default::default()
        };
        let a = generate_digits(p, 3);
        assert_eq!(a.len(), 200);
        for c in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 20);
        }
        assert_eq!(a, generate_digits(p, 3));
        assert!(a.image(0).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn csv_export_roundtrips_generated_pixels() {
        let d = generate_digits(
            CorpusParams {
                per_class: 3,
                ..Default::default()
            },
            4,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&d, &path).unwrap();
        let back = load_dataset(&path, DataFormat::Csv, [1, 8, 8], 10).unwrap();
        assert_eq!(back, d);
    }
}
