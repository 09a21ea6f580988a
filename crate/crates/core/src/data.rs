//! Training sets: weighted bitstrings, bars-and-stripes, MNIST and IRIS.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::SiteInputs;
use crate::error::{Error, Result};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Distinct strings with empirical frequencies summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    site_dim: usize,
    samples: Vec<Vec<u8>>,
    weights: Vec<f64>,
}

impl Dataset {
    /// Merges duplicates (first occurrence keeps its position) and normalizes
    /// the weights.
    pub fn from_weighted<I>(site_dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u8>, f64)>,
    {
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut samples: Vec<Vec<u8>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (x, w) in records {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Degenerate(format!("sample weight {w} is not a finite nonnegative number")));
            }
            if let Some(&s) = x.iter().find(|&&s| s as usize >= site_dim) {
                return Err(Error::Dimension(format!("symbol {s} out of range for site dimension {site_dim}")));
            }
            if let Some(first) = samples.first() {
                if first.len() != x.len() {
                    return Err(Error::Dimension("samples differ in length".into()));
                }
            }
            match index.get(&x) {
                Some(&k) => weights[k] += w,
                None => {
                    index.insert(x.clone(), samples.len());
                    samples.push(x);
                    weights.push(w);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if samples.is_empty() || !(total > 0.0) {
            return Err(Error::Degenerate("dataset needs at least one sample with positive weight".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        let drift = 1.0 - weights.iter().sum::<f64>();
        let heaviest = (0..weights.len()).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap();
        weights[heaviest] += drift;
        Ok(Self { site_dim, samples, weights })
    }

    pub fn uniform(site_dim: usize, strings: Vec<Vec<u8>>) -> Result<Self> {
        Self::from_weighted(site_dim, strings.into_iter().map(|x| (x, 1.0)))
    }

    pub fn site_dim(&self) -> usize {
        self.site_dim
    }

    pub fn n_sites(&self) -> usize {
        self.samples[0].len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Vec<u8>] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn to_inputs(&self) -> SiteInputs {
        SiteInputs::Basis { site_dim: self.site_dim, strings: self.samples.clone() }
    }

    /// `count` draws with replacement from this distribution; repeated draws
    /// become repetition weights.
    pub fn draw(&self, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..count).map(|_| {
            let mut u = rng.random::<f64>();
            let mut pick = self.samples.len() - 1;
            for (k, w) in self.weights.iter().enumerate() {
                if u < *w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            (self.samples[pick].clone(), 1.0)
        });
        Self::from_weighted(self.site_dim, draws.collect::<Vec<_>>())
    }

    /// One `bitstring weight` line per sample, symbols written as digits.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for (x, n) in self.samples.iter().zip(&self.weights) {
            let s: String = x.iter().map(|&b| char::from_digit(b as u32, 36).unwrap()).collect();
            writeln!(w, "{s} {n:e}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(site_dim: usize, r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (row, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let bits = parts.next().unwrap();
            let weight = parts.next().ok_or_else(|| Error::Parse {
                row: row + 1,
                column: 2,
                message: "missing weight".into(),
            })?;
            let x = bits
                .chars()
                .enumerate()
                .map(|(col, c)| {
                    c.to_digit(36).map(|d| d as u8).ok_or_else(|| Error::Parse {
                        row: row + 1,
                        column: col + 1,
                        message: format!("bad symbol {c:?}"),
                    })
                })
                .collect::<Result<Vec<u8>>>()?;
            let w: f64 = weight.parse().map_err(|_| Error::Parse {
                row: row + 1,
                column: 2,
                message: format!("bad weight {weight:?}"),
            })?;
            records.push((x, w));
        }
        Self::from_weighted(site_dim, records)
    }
}

/// Real-valued raster, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl GridImage {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols {
            return Err(Error::Dimension(format!("{rows}x{cols} image with {} pixels", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Dimension("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }
}

/// Boustrophedon chain order: position `k` of the chain sits at grid cell
/// `order[k]`.
pub fn snake_order(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        if r % 2 == 0 {
            out.extend((0..cols).map(|c| (r, c)));
        } else {
            out.extend((0..cols).rev().map(|c| (r, c)));
        }
    }
    out
}

/// All distinct bars-and-stripes patterns on an `n x n` grid:
/// `2^(n+1) - 2` of them.
pub fn bas_patterns(n: usize, snake: bool) -> Vec<Vec<u8>> {
    assert!((1..=20).contains(&n), "grid side must be in 1..=20");
    let order: Vec<(usize, usize)> = if snake {
        snake_order(n, n)
    } else {
        (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect()
    };
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let bars = (0..1u32 << n).map(|mask| move |_r: usize, c: usize| (mask >> c) & 1);
    let stripes = (0..1u32 << n).map(|mask| move |r: usize, _c: usize| (mask >> r) & 1);
    let patterns = bars
        .map(|f| order.iter().map(|&(r, c)| f(r, c) as u8).collect::<Vec<u8>>())
        .chain(stripes.map(|f| order.iter().map(|&(r, c)| f(r, c) as u8).collect()));
    for p in patterns {
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

pub fn gen_bas(n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Dimension("grid side must be >= 1".into()));
    }
    Dataset::uniform(2, bas_patterns(n, false))
}

/// Average-pools to `out_side x out_side`, thresholds, and snakes the result.
pub fn mnist_prepare(image: &GridImage, out_side: usize, threshold: f64) -> Result<Vec<u8>> {
    if out_side == 0 || image.rows != image.cols || !image.rows.is_multiple_of(out_side) {
        return Err(Error::Dimension(format!(
            "cannot pool a {}x{} image to {out_side}x{out_side}",
            image.rows, image.cols
        )));
    }
    let k = image.rows / out_side;
    let pooled = |r: usize, c: usize| -> f64 {
        let mut s = 0.0;
        for dr in 0..k {
            for dc in 0..k {
                s += image.at(r * k + dr, c * k + dc);
            }
        }
        s / (k * k) as f64
    };
    Ok(snake_order(out_side, out_side)
        .into_iter()
        .map(|(r, c)| u8::from(pooled(r, c) > threshold))
        .collect())
}

/// Draws `count` images without replacement and prepares them as a dataset.
pub fn mnist_dataset(images: &[GridImage], out_side: usize, count: usize, threshold: f64, seed: u64) -> Result<Dataset> {
    if count == 0 || count > images.len() {
        return Err(Error::Dimension(format!("cannot draw {count} of {} images", images.len())));
    }
    let mut idx: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(count);
    let strings = idx
        .into_iter()
        .map(|i| mnist_prepare(&images[i], out_side, threshold))
        .collect::<Result<Vec<_>>>()?;
    Dataset::uniform(2, strings)
}

/// Parses an IDX image file (`0x00000803`, big-endian dims, u8 payload).
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<GridImage>> {
    let be = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format {
                offset: off,
                message: format!("header needs {} bytes, file has {}", off + 4, bytes.len()),
            })
    };
    let magic = be(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad idx magic {magic:#010x}") });
    }
    let count = be(4)? as usize;
    let rows = be(8)? as usize;
    let cols = be(12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected),
            message: format!("expected {expected} bytes for {count} images of {rows}x{cols}, got {}", bytes.len()),
        });
    }
    bytes[16..]
        .chunks_exact((rows * cols).max(1))
        .take(count)
        .map(|chunk| GridImage::new(rows, cols, chunk.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

pub fn load_mnist_idx(path: impl AsRef<Path>) -> Result<Vec<GridImage>> {
    parse_idx_images(&std::fs::read(path)?)
}

/// Encodes images (values rounded to bytes) in the IDX image layout.
pub fn encode_idx_images(rows: usize, cols: usize, images: &[GridImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend(v.to_be_bytes());
    }
    for img in images {
        out.extend(img.pixels.iter().map(|p| (p * 255.0).round() as u8));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRecord {
    pub features: Vec<f64>,
    pub label: Option<String>,
}

/// Reads comma-separated numeric features with an optional trailing label
/// column. A first row whose leading cell is not numeric is taken as a header.
pub fn parse_iris_csv<R: std::io::Read>(reader: R, n_features: usize) -> Result<Vec<ContinuousRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i + 1, column: 0, message: e.to_string() })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 && rec.get(0).is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() < n_features {
            return Err(Error::Parse {
                row: i + 1,
                column: rec.len() + 1,
                message: format!("expected {n_features} feature columns"),
            });
        }
        let features = (0..n_features)
            .map(|c| {
                rec[c].parse::<f64>().map_err(|_| Error::Parse {
                    row: i + 1,
                    column: c + 1,
                    message: format!("non-numeric cell {:?}", &rec[c]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let label = rec.get(n_features).filter(|s| !s.is_empty()).map(str::to_string);
        out.push(ContinuousRecord { features, label });
    }
    Ok(out)
}

pub fn load_iris_csv(path: impl AsRef<Path>, scale: bool) -> Result<Vec<ContinuousRecord>> {
    let mut records = parse_iris_csv(std::fs::File::open(path)?, 4)?;
    if scale {
        min_max_scale(&mut records);
    }
    Ok(records)
}

/// Maps each feature's minimum to 0 and maximum to 1; constant features go to 0.
pub fn min_max_scale(records: &mut [ContinuousRecord]) {
    let Some(first) = records.first() else { return };
    for f in 0..first.features.len() {
        let (lo, hi) = records
            .iter()
            .map(|r| r.features[f])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for r in records.iter_mut() {
            r.features[f] = if span > 0.0 { (r.features[f] - lo) / span } else { 0.0 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bas_counts() {
        assert_eq!(gen_bas(2).unwrap().len(), 6);
        assert_eq!(gen_bas(4).unwrap().len(), 30);
        assert_eq!(gen_bas(7).unwrap().len(), 254);
        let d = gen_bas(3).unwrap();
        assert!((d.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gen_bas(0).is_err());
    }

    #[test]
    fn bas_is_exactly_the_constant_row_or_column_patterns() {
        let n = 3;
        let d = gen_bas(n).unwrap();
        let mut expected = 0;
        for mask in 0u32..1 << (n * n) {
            let px = |r: usize, c: usize| (mask >> (r * n + c)) & 1;
            let rows_const = (0..n).all(|r| (0..n).all(|c| px(r, c) == px(r, 0)));
            let cols_const = (0..n).all(|c| (0..n).all(|r| px(r, c) == px(0, c)));
            if rows_const || cols_const {
                expected += 1;
                let s: Vec<u8> = (0..n * n).map(|k| ((mask >> k) & 1) as u8).collect();
                assert!(d.samples().contains(&s));
            }
        }
        assert_eq!(d.len(), expected);
    }

    #[test]
    fn snake_orders() {
        assert_eq!(snake_order(2, 2), vec![(0, 0), (0, 1), (1, 1), (1, 0)]);
        assert_eq!(
            snake_order(3, 3),
            vec![(0, 0), (0, 1), (0, 2), (1, 2), (1, 1), (1, 0), (2, 0), (2, 1), (2, 2)]
        );
        for rows in 1..6 {
            for cols in 1..6 {
                let o = snake_order(rows, cols);
                assert_eq!(o.len(), rows * cols);
                for w in o.windows(2) {
                    let dist = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                    assert_eq!(dist, 1);
                }
            }
        }
    }

    #[test]
    fn mnist_pooling() {
        let zeros = GridImage::new(28, 28, vec![0.0; 784]).unwrap();
        assert_eq!(mnist_prepare(&zeros, 7, 0.5).unwrap(), vec![0; 49]);
        let ones = GridImage::new(28, 28, vec![1.0; 784]).unwrap();
        assert_eq!(mnist_prepare(&ones, 7, 0.5).unwrap(), vec![1; 49]);
        let block = |r: usize, c: usize| ((r / 4 + c / 4) % 2) as f64;
        let px: Vec<f64> = (0..784).map(|k| block(k / 28, k % 28)).collect();
        let img = GridImage::new(28, 28, px).unwrap();
        let bits = mnist_prepare(&img, 7, 0.5).unwrap();
        let expected: Vec<u8> = snake_order(7, 7).into_iter().map(|(r, c)| ((r + c) % 2) as u8).collect();
        assert_eq!(bits, expected);
        assert!(mnist_prepare(&GridImage::new(27, 27, vec![0.0; 729]).unwrap(), 7, 0.5).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let imgs: Vec<GridImage> = (0..3)
            .map(|k| GridImage::new(4, 5, (0..20).map(|i| ((i * 13 + k * 7) % 256) as f64 / 255.0).collect()).unwrap())
            .collect();
        let bytes = encode_idx_images(4, 5, &imgs);
        assert_eq!(parse_idx_images(&bytes).unwrap(), imgs);
        let empty = encode_idx_images(28, 28, &[]);
        assert!(parse_idx_images(&empty).unwrap().is_empty());
        match parse_idx_images(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("expected 76") && message.contains("got 75")),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn iris_parsing() {
        let text = "sepal_length,sepal_width,petal_length,petal_width,species\n5.1,3.5,1.4,0.2,Iris-setosa\n7.0,3.2,4.7,1.4,Iris-versicolor\n";
        let recs = parse_iris_csv(text.as_bytes(), 4).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].features, vec![5.1, 3.5, 1.4, 0.2]);
        assert_eq!(recs[0].label.as_deref(), Some("Iris-setosa"));
        assert!(parse_iris_csv("".as_bytes(), 4).unwrap().is_empty());
        match parse_iris_csv("5.1,3.5,1.4,0.2\n4.9,x,1.4,0.2\n".as_bytes(), 4) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn min_max_scaling() {
        let mut recs = vec![
            ContinuousRecord { features: vec![1.0, 5.0], label: None },
            ContinuousRecord { features: vec![3.0, 5.0], label: None },
            ContinuousRecord { features: vec![2.0, 5.0], label: None },
        ];
        min_max_scale(&mut recs);
        assert_eq!(recs[0].features[0], 0.0);
        assert_eq!(recs[1].features[0], 1.0);
        assert_eq!(recs[2].features[0], 0.5);
        assert_eq!(recs[1].features[1], 0.0);
    }

    #[test]
    fn duplicates_merge_and_text_round_trip() {
        let d = Dataset::from_weighted(2, vec![(vec![0, 1], 1.0), (vec![1, 1], 2.0), (vec![0, 1], 1.0)]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.weights(), &[0.5, 0.5]);
        let mut buf = Vec::new();
        d.write_text(&mut buf).unwrap();
        assert_eq!(Dataset::read_text(2, &buf[..]).unwrap(), d);
        let drawn = gen_bas(4).unwrap().draw(60, 1).unwrap();
        assert!(drawn.len() <= 30);
        assert!((drawn.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
