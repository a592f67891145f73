//! Frozen multi-scale residual tokenizer.
//!
//! Images live in RGB `[0, 1]`; the latent space is the same three channels
//! shifted by `-0.5`, so a codebook entry is directly an RGB offset. A token
//! map at scale `k` is an `h_k × w_k` grid of codebook indices, and the image
//! is `clamp(0.5 + Σ_k expand(lookup(r_k)))`.
//!
//! The residual loop pools with [`downsample`] and expands back with
//! [`expand`], the cell-constant adjoint of the same pooling partition. With a
//! zero vector in the codebook this makes every added scale non-increasing in
//! reconstruction energy. [`upsample`] (bilinear) is used for the policy's
//! conditioning maps, not by the tokenizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB latent width; the decoder maps latents to pixels by identity.
pub const RGB: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ScaleSchedule {
    scales: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("scale schedule must have at least one scale"));
        }
        if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::invalid("scale extents must be positive"));
        }
        for pair in scales.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 <= h0 || w1 <= w0 {
                return Err(Error::invalid(format!(
                    "scales must be strictly increasing, got ({h0},{w0}) then ({h1},{w1})"
                )));
            }
        }
        Ok(Self { scales })
    }

    /// Square schedule from side lengths, e.g. `[1, 2, 4]`.
    pub fn square(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// `(H, W)` of the decoded image.
    pub fn resolution(&self) -> (usize, usize) {
        *self.scales.last().expect("schedule is non-empty")
    }

    pub fn tokens_at(&self, k: usize) -> usize {
        let (h, w) = self.scales[k];
        h * w
    }

    pub fn total_tokens(&self) -> usize {
        self.scales.iter().map(|&(h, w)| h * w).sum()
    }

    /// Start offset of every scale in the flattened sequence, plus the total.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.scales.len() + 1);
        let mut acc = 0;
        out.push(0);
        for &(h, w) in &self.scales {
            acc += h * w;
            out.push(acc);
        }
        out
    }
}

impl TryFrom<Vec<(usize, usize)>> for ScaleSchedule {
    type Error = Error;

    fn try_from(scales: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(scales)
    }
}

impl From<ScaleSchedule> for Vec<(usize, usize)> {
    fn from(s: ScaleSchedule) -> Self {
        s.scales
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    /// Seeded uniform entries in `[-1, 1]^d`.
    #[default]
    Uniform,
    /// Fixed multi-magnitude lattice with a zero entry at index 0.
    Lattice,
}

/// Frozen `V × d` embedding table. There is no mutable access after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
    vocab: usize,
    dim: usize,
    seed: u64,
    kind: CodebookKind,
}

/// Seeded uniform codebook.
pub fn build_codebook(seed: u64, vocab: usize, dim: usize) -> Result<Codebook> {
    check_codebook_shape(vocab, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..vocab * dim)
        .map(|_| rng.random_range(-1.0f64..=1.0) as f32)
        .collect();
    Ok(Codebook {
        entries,
        vocab,
        dim,
        seed,
        kind: CodebookKind::Uniform,
    })
}

fn check_codebook_shape(vocab: usize, dim: usize) -> Result<()> {
    if vocab < 2 {
        return Err(Error::invalid(format!("vocabulary size must be >= 2, got {vocab}")));
    }
    if dim < 1 {
        return Err(Error::invalid("latent dimension must be >= 1"));
    }
    Ok(())
}

impl Codebook {
    pub fn build(kind: CodebookKind, seed: u64, vocab: usize, dim: usize) -> Result<Self> {
        match kind {
            CodebookKind::Uniform => build_codebook(seed, vocab, dim),
            CodebookKind::Lattice => Self::lattice(seed, vocab, dim),
        }
    }

    /// Zero, then axis entries at ±0.5 and ±0.2, the ±0.3 diagonals, and
    /// progressively finer diagonal/axis entries until `vocab` are placed.
    pub fn lattice(seed: u64, vocab: usize, dim: usize) -> Result<Self> {
        check_codebook_shape(vocab, dim)?;
        let mut rows: Vec<Vec<f32>> = vec![vec![0.0; dim]];
        let axis = |mag: f32, rows: &mut Vec<Vec<f32>>| {
            for i in 0..dim {
                for sign in [1.0f32, -1.0] {
                    let mut e = vec![0.0; dim];
                    e[i] = sign * mag;
                    rows.push(e);
                }
            }
        };
        let diag = |mag: f32, rows: &mut Vec<Vec<f32>>| {
            rows.push(vec![mag; dim]);
            rows.push(vec![-mag; dim]);
        };
        axis(0.5, &mut rows);
        axis(0.2, &mut rows);
        diag(0.3, &mut rows);
        let mut fine = 0.08f32;
        while rows.len() < vocab {
            diag(fine, &mut rows);
            axis(fine, &mut rows);
            fine *= 0.4;
        }
        rows.truncate(vocab);
        Ok(Codebook {
            entries: rows.into_iter().flatten().collect(),
            vocab,
            dim,
            seed,
            kind: CodebookKind::Lattice,
        })
    }

    /// Rebuild from persisted entries.
    pub fn from_entries(
        entries: Vec<f32>,
        vocab: usize,
        dim: usize,
        seed: u64,
        kind: CodebookKind,
    ) -> Result<Self> {
        check_codebook_shape(vocab, dim)?;
        if entries.len() != vocab * dim {
            return Err(Error::invalid(format!(
                "codebook has {} values, expected {vocab}×{dim}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        Ok(Codebook {
            entries,
            vocab,
            dim,
            seed,
            kind,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &[f32] {
        &self.entries[index * self.dim..(index + 1) * self.dim]
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.vocab {
            let d: f64 = self
                .entry(i)
                .iter()
                .zip(v)
                .map(|(&e, &x)| {
                    let diff = x - e as f64;
                    diff * diff
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Embed a token grid as an `h × w × d` map.
    pub fn lookup(&self, grid: &TokenGrid) -> Result<LatentMap> {
        let mut data = Vec::with_capacity(grid.len() * self.dim);
        for &t in grid.values() {
            let t = t as usize;
            if t >= self.vocab {
                return Err(Error::invalid(format!(
                    "token {t} out of range for vocabulary {}",
                    self.vocab
                )));
            }
            data.extend(self.entry(t).iter().map(|&e| e as f64));
        }
        LatentMap::new(grid.height(), grid.width(), self.dim, data)
    }
}

/// `h × w × d` real grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl LatentMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::invalid(format!(
                "map data has {} values, expected {h}×{w}×{d}",
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.w + j) * self.d;
        &self.data[o..o + self.d]
    }

    fn add_scaled(&mut self, other: &LatentMap, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Bilinear interpolation with corner-aligned sampling.
pub fn upsample(grid: &LatentMap, target_h: usize, target_w: usize) -> Result<LatentMap> {
    if target_h < grid.h || target_w < grid.w {
        return Err(Error::invalid(format!(
            "upsample target {target_h}×{target_w} smaller than source {}×{}",
            grid.h, grid.w
        )));
    }
    if target_h == grid.h && target_w == grid.w {
        return Ok(grid.clone());
    }
    let d = grid.d;
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if dst == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let x0 = (x.floor() as usize).min(src - 1);
        let x1 = (x0 + 1).min(src - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = LatentMap::zeros(target_h, target_w, d);
    for i in 0..target_h {
        let (y0, y1, fy) = coord(i, grid.h, target_h);
        for j in 0..target_w {
            let (x0, x1, fx) = coord(j, grid.w, target_w);
            let o = (i * target_w + j) * d;
            for c in 0..d {
                let v00 = grid.at(y0, x0)[c];
                let v01 = grid.at(y0, x1)[c];
                let v10 = grid.at(y1, x0)[c];
                let v11 = grid.at(y1, x1)[c];
                out.data[o + c] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    Ok(out)
}

/// Boundaries of `cells` near-equal parts of `n`, remainder to the earlier cells.
pub(crate) fn partition(n: usize, cells: usize) -> Vec<usize> {
    let base = n / cells;
    let rem = n % cells;
    let mut bounds = Vec::with_capacity(cells + 1);
    bounds.push(0);
    for c in 0..cells {
        let last = *bounds.last().unwrap();
        bounds.push(last + base + usize::from(c < rem));
    }
    bounds
}

/// Average pooling over the per-cell pixel partition.
pub fn downsample(grid: &LatentMap, target_h: usize, target_w: usize) -> Result<LatentMap> {
    if target_h > grid.h || target_w > grid.w || target_h == 0 || target_w == 0 {
        return Err(Error::invalid(format!(
            "downsample target {target_h}×{target_w} invalid for source {}×{}",
            grid.h, grid.w
        )));
    }
    if target_h == grid.h && target_w == grid.w {
        return Ok(grid.clone());
    }
    let rows = partition(grid.h, target_h);
    let cols = partition(grid.w, target_w);
    let d = grid.d;
    let mut out = LatentMap::zeros(target_h, target_w, d);
    for ci in 0..target_h {
        for cj in 0..target_w {
            let o = (ci * target_w + cj) * d;
            let count = ((rows[ci + 1] - rows[ci]) * (cols[cj + 1] - cols[cj])) as f64;
            for i in rows[ci]..rows[ci + 1] {
                for j in cols[cj]..cols[cj + 1] {
                    for (c, v) in grid.at(i, j).iter().enumerate() {
                        out.data[o + c] += v;
                    }
                }
            }
            for c in 0..d {
                out.data[o + c] /= count;
            }
        }
    }
    Ok(out)
}

/// Cell-constant expansion: every pixel of a pooling cell takes the cell's value.
pub fn expand(grid: &LatentMap, target_h: usize, target_w: usize) -> Result<LatentMap> {
    if target_h < grid.h || target_w < grid.w {
        return Err(Error::invalid(format!(
            "expand target {target_h}×{target_w} smaller than source {}×{}",
            grid.h, grid.w
        )));
    }
    if target_h == grid.h && target_w == grid.w {
        return Ok(grid.clone());
    }
    let rows = partition(target_h, grid.h);
    let cols = partition(target_w, grid.w);
    let d = grid.d;
    let mut out = LatentMap::zeros(target_h, target_w, d);
    for ci in 0..grid.h {
        for cj in 0..grid.w {
            let src = grid.at(ci, cj);
            for i in rows[ci]..rows[ci + 1] {
                for j in cols[cj]..cols[cj + 1] {
                    let o = (i * target_w + j) * d;
                    out.data[o..o + d].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

/// `h × w` grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    values: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, values: Vec<u32>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::invalid(format!(
                "token grid has {} values, expected {h}×{w}",
                values.len()
            )));
        }
        Ok(Self { h, w, values })
    }

    pub fn filled(h: usize, w: usize, token: u32) -> Self {
        Self {
            h,
            w,
            values: vec![token; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u32] {
        &mut self.values
    }
}

/// The autoregressive units `r_1..r_K`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiScaleTokens {
    grids: Vec<TokenGrid>,
}

impl MultiScaleTokens {
    pub fn new(grids: Vec<TokenGrid>) -> Self {
        Self { grids }
    }

    pub fn grids(&self) -> &[TokenGrid] {
        &self.grids
    }

    pub fn grids_mut(&mut self) -> &mut [TokenGrid] {
        &mut self.grids
    }

    pub fn num_scales(&self) -> usize {
        self.grids.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.grids.iter().map(TokenGrid::len).sum()
    }

    /// All tokens in scale order, row-major within a scale.
    pub fn flat(&self) -> impl Iterator<Item = u32> + '_ {
        self.grids.iter().flat_map(|g| g.values().iter().copied())
    }

    /// Shapes match the schedule and every index is below `vocab`.
    pub fn validate(&self, schedule: &ScaleSchedule, vocab: usize) -> Result<()> {
        if self.grids.len() != schedule.num_scales() {
            return Err(Error::invalid(format!(
                "expected {} token grids, got {}",
                schedule.num_scales(),
                self.grids.len()
            )));
        }
        for (k, (g, &(h, w))) in self.grids.iter().zip(schedule.scales()).enumerate() {
            if g.h != h || g.w != w {
                return Err(Error::invalid(format!(
                    "scale {k} grid is {}×{}, schedule says {h}×{w}",
                    g.h, g.w
                )));
            }
            if let Some(&t) = g.values.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::invalid(format!(
                    "token {t} at scale {k} out of range for vocabulary {vocab}"
                )));
            }
        }
        Ok(())
    }
}

/// `H × W` RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != h * w * RGB {
            return Err(Error::invalid(format!(
                "image has {} values, expected {h}×{w}×3",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { h, w, pixels })
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(h, w, rgb.iter().copied().cycle().take(h * w * RGB).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = (i * self.w + j) * RGB;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.pixels.chunks_exact(RGB) {
            for c in 0..RGB {
                acc[c] += px[c];
            }
        }
        let n = (self.h * self.w) as f64;
        acc.map(|v| v / n)
    }

    pub fn rmse(&self, other: &Image) -> f64 {
        let sse: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (sse / self.pixels.len() as f64).sqrt()
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("malformed PPM: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("magic is not P6"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("dimension"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        let body = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        if body.len() != w * h * RGB {
            return Err(bad("raster size mismatch"));
        }
        Self::new(h, w, body.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

fn check_rgb(codebook: &Codebook) -> Result<()> {
    if codebook.dim() != RGB {
        return Err(Error::invalid(format!(
            "the identity decoder needs 3 latent channels, codebook has {}",
            codebook.dim()
        )));
    }
    Ok(())
}

/// Quantize an image into one token grid per scale.
pub fn encode(
    image: &Image,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
) -> Result<MultiScaleTokens> {
    check_rgb(codebook)?;
    let (h, w) = schedule.resolution();
    if image.height() != h || image.width() != w {
        return Err(Error::invalid(format!(
            "image is {}×{}, schedule resolution is {h}×{w}",
            image.height(),
            image.width()
        )));
    }
    let mut residual = LatentMap::new(h, w, RGB, image.pixels.iter().map(|p| p - 0.5).collect())?;
    let mut grids = Vec::with_capacity(schedule.num_scales());
    for &(hk, wk) in schedule.scales() {
        let pooled = downsample(&residual, hk, wk)?;
        let values = (0..hk * wk)
            .map(|c| codebook.nearest(&pooled.data[c * RGB..(c + 1) * RGB]) as u32)
            .collect();
        let grid = TokenGrid::new(hk, wk, values)?;
        let step = expand(&codebook.lookup(&grid)?, h, w)?;
        residual.add_scaled(&step, -1.0);
        grids.push(grid);
    }
    Ok(MultiScaleTokens::new(grids))
}

/// Unclamped latent sum `Σ_k expand(lookup(r_k))` over the first `scales` scales.
pub fn reconstruct_latent(
    tokens: &MultiScaleTokens,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
    scales: usize,
) -> Result<LatentMap> {
    check_rgb(codebook)?;
    tokens.validate(schedule, codebook.vocab())?;
    let (h, w) = schedule.resolution();
    let mut acc = LatentMap::zeros(h, w, RGB);
    for grid in tokens.grids().iter().take(scales) {
        acc.add_scaled(&expand(&codebook.lookup(grid)?, h, w)?, 1.0);
    }
    Ok(acc)
}

/// Decode token maps to an image: `clamp(0.5 + latent sum, 0, 1)`.
pub fn decode(
    tokens: &MultiScaleTokens,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
) -> Result<Image> {
    decode_prefix(tokens, schedule, codebook, schedule.num_scales())
}

/// Decode using only the first `scales` token maps.
pub fn decode_prefix(
    tokens: &MultiScaleTokens,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
    scales: usize,
) -> Result<Image> {
    let latent = reconstruct_latent(tokens, schedule, codebook, scales)?;
    let (h, w) = schedule.resolution();
    Image::new(
        h,
        w,
        latent.data.iter().map(|v| (0.5 + v).clamp(0.0, 1.0)).collect(),
    )
}

/// Residual energy `‖(img − 0.5) − partial latent‖²` after each prefix of the schedule,
/// starting with the empty prefix.
pub fn residual_energies(
    image: &Image,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
) -> Result<Vec<f64>> {
    let tokens = encode(image, schedule, codebook)?;
    let (h, w) = schedule.resolution();
    let target = LatentMap::new(h, w, RGB, image.pixels.iter().map(|p| p - 0.5).collect())?;
    (0..=schedule.num_scales())
        .map(|k| {
            let mut r = target.clone();
            r.add_scaled(&reconstruct_latent(&tokens, schedule, codebook, k)?, -1.0);
            Ok(r.energy())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, d: usize, data: &[f64]) -> LatentMap {
        LatentMap::new(h, w, d, data.to_vec()).unwrap()
    }

    fn desk_schedule() -> ScaleSchedule {
        ScaleSchedule::square(&[1, 2, 4, 8, 16]).unwrap()
    }

    #[test]
    fn schedule_rejects_non_increasing_scales() {
        assert!(ScaleSchedule::new(vec![(1, 1), (1, 2)]).is_err());
        assert!(ScaleSchedule::new(vec![]).is_err());
        let s = desk_schedule();
        assert_eq!(s.total_tokens(), 1 + 4 + 16 + 64 + 256);
        assert_eq!(s.offsets(), vec![0, 1, 5, 21, 85, 341]);
    }

    #[test]
    fn codebook_is_reproducible_from_seed() {
        let a = build_codebook(7, 16, 3).unwrap();
        let b = build_codebook(7, 16, 3).unwrap();
        assert_eq!(a.entries(), b.entries());
        assert_eq!(a.entries().len(), 48);
        assert!(a.entries().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn codebook_differs_across_seeds() {
        let a = build_codebook(7, 16, 3).unwrap();
        let b = build_codebook(8, 16, 3).unwrap();
        assert!(a.entries().iter().zip(b.entries()).any(|(x, y)| x != y));
    }

    #[test]
    fn codebook_rejects_tiny_vocab() {
        assert!(matches!(build_codebook(0, 1, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_codebook(0, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn lattice_has_zero_entry_first() {
        let cb = Codebook::lattice(0, 16, 3).unwrap();
        assert_eq!(cb.entry(0), &[0.0, 0.0, 0.0]);
        assert_eq!(cb.entry(1), &[0.5, 0.0, 0.0]);
        assert_eq!(cb.entry(13), &[0.3, 0.3, 0.3]);
        assert_eq!(cb.entry(15), &[0.08, 0.08, 0.08]);
        let big = Codebook::lattice(0, 40, 3).unwrap();
        assert_eq!(big.vocab(), 40);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let g = map(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(upsample(&g, 2, 2).unwrap(), g);
        let one = map(1, 1, 3, &[0.1, 0.2, 0.3]);
        let up = upsample(&one, 4, 4).unwrap();
        assert!(up.data().chunks(3).all(|c| c == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn upsample_is_corner_aligned_bilinear() {
        let g = map(1, 2, 1, &[0.0, 1.0]);
        assert_eq!(upsample(&g, 1, 3).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert!(upsample(&g, 1, 1).is_err());
    }

    #[test]
    fn downsample_partitions_remainder_to_earlier_cells() {
        let g = map(2, 2, 1, &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(downsample(&g, 1, 1).unwrap().data(), &[0.5]);
        let tall = map(3, 1, 1, &[2.0, 4.0, 10.0]);
        assert_eq!(downsample(&tall, 2, 1).unwrap().data(), &[3.0, 10.0]);
        assert_eq!(downsample(&tall, 3, 1).unwrap(), tall);
        assert!(downsample(&tall, 4, 1).is_err());
    }

    #[test]
    fn expand_is_adjoint_partition_of_pooling() {
        let g = map(2, 1, 1, &[1.0, 2.0]);
        assert_eq!(expand(&g, 3, 1).unwrap().data(), &[1.0, 1.0, 2.0]);
    }

    #[test]
    fn encode_constant_image_hits_exact_entry() {
        let cb = Codebook::lattice(0, 16, 3).unwrap();
        let schedule = ScaleSchedule::square(&[4]).unwrap();
        let img = Image::filled(4, 4, [1.0, 0.5, 0.5]).unwrap();
        let tokens = encode(&img, &schedule, &cb).unwrap();
        assert!(tokens.grids()[0].values().iter().all(|&t| t == 1));
        let back = decode(&tokens, &schedule, &cb).unwrap();
        assert_eq!(back.rmse(&img), 0.0);
    }

    #[test]
    fn encode_picks_closer_of_two_entries() {
        let cb = Codebook::from_entries(
            vec![-0.4, -0.4, -0.4, 0.4, 0.4, 0.4],
            2,
            3,
            0,
            CodebookKind::Uniform,
        )
        .unwrap();
        let schedule = ScaleSchedule::square(&[1]).unwrap();
        let img = Image::filled(1, 1, [0.8, 0.8, 0.8]).unwrap();
        assert_eq!(encode(&img, &schedule, &cb).unwrap().grids()[0].values(), &[1]);
    }

    #[test]
    fn encode_ties_go_to_lowest_index() {
        let cb = Codebook::from_entries(
            vec![-0.2, 0.0, 0.0, 0.2, 0.0, 0.0],
            2,
            3,
            0,
            CodebookKind::Uniform,
        )
        .unwrap();
        let schedule = ScaleSchedule::square(&[1]).unwrap();
        let img = Image::filled(1, 1, [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(encode(&img, &schedule, &cb).unwrap().grids()[0].values(), &[0]);
    }

    #[test]
    fn encode_rejects_shape_mismatch() {
        let cb = Codebook::lattice(0, 16, 3).unwrap();
        let img = Image::filled(8, 8, [0.5; 3]).unwrap();
        assert!(matches!(
            encode(&img, &desk_schedule(), &cb),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn decode_zero_entry_is_mid_grey_and_clamps() {
        let cb = Codebook::lattice(0, 16, 3).unwrap();
        let schedule = ScaleSchedule::square(&[2]).unwrap();
        let zero = MultiScaleTokens::new(vec![TokenGrid::filled(2, 2, 0)]);
        let img = decode(&zero, &schedule, &cb).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0.5));

        // two scales each adding +0.5 red: 0.5 + 1.0 clamps to 1.0
        let two = ScaleSchedule::square(&[1, 2]).unwrap();
        let tokens = MultiScaleTokens::new(vec![TokenGrid::filled(1, 1, 1), TokenGrid::filled(2, 2, 1)]);
        let img = decode(&tokens, &two, &cb).unwrap();
        assert!(img.pixels().chunks(3).all(|p| p == [1.0, 0.5, 0.5]));
    }

    #[test]
    fn decode_rejects_out_of_range_token() {
        let cb = Codebook::lattice(0, 16, 3).unwrap();
        let schedule = ScaleSchedule::square(&[1]).unwrap();
        let bad = MultiScaleTokens::new(vec![TokenGrid::filled(1, 1, 16)]);
        assert!(matches!(decode(&bad, &schedule, &cb), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ppm_round_trip_is_exact_on_byte_grid() {
        let px: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f64 / 255.0).collect();
        let img = Image::new(2, 3, px).unwrap();
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Image::from_ppm(&bytes).unwrap(), img);
    }

    fn image_strategy() -> impl Strategy<Value = Image> {
        proptest::collection::vec(0.0f64..=1.0, 16 * 16 * 3)
            .prop_map(|px| Image::new(16, 16, px).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn residual_energy_never_increases_with_more_scales(img in image_strategy()) {
            let cb = Codebook::lattice(0, 16, 3).unwrap();
            let energies = residual_energies(&img, &desk_schedule(), &cb).unwrap();
            for pair in energies.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-9, "{:?}", energies);
            }
        }

        #[test]
        fn decode_rmse_never_increases_with_more_scales(img in image_strategy()) {
            let cb = Codebook::lattice(0, 16, 3).unwrap();
            let schedule = desk_schedule();
            let tokens = encode(&img, &schedule, &cb).unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..=schedule.num_scales() {
                let rmse = decode_prefix(&tokens, &schedule, &cb, k).unwrap().rmse(&img);
                prop_assert!(rmse <= prev + 1e-9);
                prev = rmse;
            }
        }

        #[test]
        fn codec_is_pure_and_in_range(img in image_strategy(), seed in 0u64..1000) {
            let cb = build_codebook(seed, 16, 3).unwrap();
            let schedule = desk_schedule();
            let a = encode(&img, &schedule, &cb).unwrap();
            let b = encode(&img, &schedule, &cb).unwrap();
            prop_assert_eq!(&a, &b);
            let da = decode(&a, &schedule, &cb).unwrap();
            let db = decode(&b, &schedule, &cb).unwrap();
            prop_assert_eq!(da.pixels(), db.pixels());
            prop_assert!(da.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
