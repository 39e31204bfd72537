//! Visual-word codebooks and spatial regions.
//!
//! A [`Codebook`] is fit with Lloyd's k-means from a seeded k-means++
//! start. Descriptors map to the nearest centroid by squared Euclidean
//! distance and to a region of a `grid_x × grid_y` grid over the image.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"NTDE";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"NTCB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    /// Final within-cluster sum of squared distances.
    pub objective: f64,
    /// Objective after every Lloyd iteration. Not persisted.
    pub history: Vec<f64>,
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; lowest index wins ties.
fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Index of the centroid closest to `descriptor`.
pub fn quantize(codebook: &Codebook, descriptor: &[f64]) -> Result<usize> {
    if descriptor.len() != codebook.dim {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim,
            got: descriptor.len(),
        });
    }
    Ok(nearest(&codebook.centroids, codebook.dim, descriptor).0)
}

fn kmeans_pp<R: Rng>(data: &[f64], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        let c = point(next).to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Lloyd's k-means on the rows of `data` (row-major, `dim` columns).
///
/// Stops when the relative decrease of the objective drops below `rel_tol`
/// or after `max_iters` iterations. Clusters left empty by an assignment
/// step are re-seeded with the points farthest from their centroids, so the
/// codebook always has exactly `k` words.
pub fn kmeans_fit(
    data: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    rel_tol: f64,
) -> Result<Codebook> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument(format!(
            "data length {} is not a multiple of dim {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points for {k} clusters")));
    }
    if max_iters < 1 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if rel_tol.is_nan() || rel_tol < 0.0 {
        return Err(Error::InvalidArgument(format!("rel_tol must be >= 0, got {rel_tol}")));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("descriptors contain non-finite values".into()));
    }

    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = kmeans_pp(data, dim, k, &mut seeded_rng(seed, 0));
    let mut assign = vec![0usize; n];
    let mut history: Vec<f64> = Vec::new();

    for _ in 0..max_iters {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(&centroids, dim, point(i)).0;
        }

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }

        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(usize, f64)> = (0..n)
                .map(|i| (i, sq_dist(point(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim])))
                .collect();
            far.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let mut candidates = far.into_iter();
            for c in empty {
                // take a point from a cluster that keeps at least one member
                let (i, _) = candidates
                    .by_ref()
                    .find(|&(i, _)| counts[assign[i]] > 1)
                    .expect("n >= k leaves a donor cluster");
                counts[assign[i]] -= 1;
                counts[c] = 1;
                assign[i] = c;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(i));
            }
        }

        let objective: f64 = (0..n)
            .map(|i| sq_dist(point(i), &centroids[assign[i] * dim..(assign[i] + 1) * dim]))
            .sum();
        let prev = history.last().copied();
        history.push(objective);
        if let Some(prev) = prev {
            if prev <= 0.0 || (prev - objective) < rel_tol * prev {
                break;
            }
        }
    }

    Ok(Codebook {
        k,
        dim,
        centroids,
        objective: *history.last().expect("at least one iteration"),
        history,
    })
}

/// Region of pixel `(x, y)` in a `grid_x × grid_y` grid, numbered row by
/// row from the top left.
pub fn assign_region(
    x: f64,
    y: f64,
    width: f64,
    height: f64,
    grid_x: usize,
    grid_y: usize,
) -> Result<usize> {
    if grid_x < 1 || grid_y < 1 {
        return Err(Error::InvalidArgument("grid dimensions must be at least 1".into()));
    }
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "image size must be positive, got {width}x{height}"
        )));
    }
    if !(x >= 0.0 && x < width && y >= 0.0 && y < height) {
        return Err(Error::InvalidArgument(format!(
            "point ({x}, {y}) lies outside the {width}x{height} image"
        )));
    }
    let col = ((x * grid_x as f64 / width).floor() as usize).min(grid_x - 1);
    let row = ((y * grid_y as f64 / height).floor() as usize).min(grid_y - 1);
    Ok(row * grid_x + col)
}

/// Dense descriptors of one or more images with their pixel positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    /// Row-major `n × dim`.
    pub data: Vec<f32>,
    pub positions: Vec<(f32, f32)>,
    pub image_sizes: Vec<(f32, f32)>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n < 1 {
            return Err(Error::InsufficientData("descriptor set is empty".into()));
        }
        if self.data.len() != n * self.dim || self.image_sizes.len() != n {
            return Err(Error::Shape("descriptor arrays disagree in length".into()));
        }
        for (i, (&(x, y), &(w, h))) in self.positions.iter().zip(&self.image_sizes).enumerate() {
            if !(x >= 0.0 && x < w && y >= 0.0 && y < h) {
                return Err(Error::InvalidArgument(format!(
                    "descriptor {i}: ({x}, {y}) outside {w}x{h}"
                )));
            }
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite descriptor values".into()));
        }
        Ok(())
    }

    /// All rows widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    /// `(visual word, region)` tokens, one per descriptor.
    pub fn tokenize(&self, codebook: &Codebook, grid_x: usize, grid_y: usize) -> Result<Vec<(usize, usize)>> {
        let mut buf = vec![0.0; self.dim];
        (0..self.len())
            .map(|i| {
                for (b, &x) in buf.iter_mut().zip(self.row(i)) {
                    *b = x as f64;
                }
                let word = quantize(codebook, &buf)?;
                let (x, y) = self.positions[i];
                let (w, h) = self.image_sizes[i];
                let region = assign_region(x as f64, y as f64, w as f64, h as f64, grid_x, grid_y)?;
                Ok((word, region))
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (16 + 4 * self.dim));
        out.extend_from_slice(DESCRIPTOR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for i in 0..self.len() {
            let (x, y) = self.positions[i];
            let (w, h) = self.image_sizes[i];
            for v in [x, y, w, h].iter().chain(self.row(i)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DESCRIPTOR_MAGIC)?;
        r.version()?;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut set = DescriptorSet {
            dim,
            data: Vec::with_capacity(n * dim),
            positions: Vec::with_capacity(n),
            image_sizes: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let (x, y, w, h) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
            set.positions.push((x, y));
            set.image_sizes.push((w, h));
            for _ in 0..dim {
                set.data.push(r.f32()?);
            }
        }
        r.finish()?;
        set.validate()?;
        Ok(set)
    }
}

pub fn read_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let path = path.as_ref();
    DescriptorSet::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_descriptors(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &set.encode())
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * (cb.centroids.len() + 1));
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cb.k as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim as u32).to_le_bytes());
    for x in cb.centroids.iter().chain(std::iter::once(&cb.objective)) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut r = Reader::new(bytes);
    r.magic(CODEBOOK_MAGIC)?;
    r.version()?;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let centroids = (0..k * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let objective = r.f64()?;
    r.finish()?;
    if k < 1 || dim < 1 || centroids.iter().any(|x| !x.is_finite()) {
        return Err(Error::Corrupt("codebook has no centroids or non-finite values".into()));
    }
    Ok(Codebook {
        k,
        dim,
        centroids,
        objective,
        history: Vec::new(),
    })
}

pub fn save_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_codebook(cb))
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    decode_codebook(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Corrupt("unexpected end of file".into()))?;
        self.pos = end;
        Ok(chunk.try_into().unwrap())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if &self.take::<4>()? != magic {
            return Err(Error::Corrupt("bad magic".into()));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Version {
                found: v,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
