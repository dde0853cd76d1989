//! Lattices used for quantizing normalized model updates.
//!
//! A lattice is `{ρ·G·z : z ∈ Zⁿ}` where the columns of `G` are the basis
//! vectors and `ρ > 0` is a scale. Long vectors are quantized block by block
//! with the block lattice (orthogonal construction `diag(G, …, G)`).
//!
//! Identity, hexagonal (A2) and E8 lattices have exact nearest-point decoders.
//! Custom generators fall back to Babai rounding, which is not guaranteed to
//! return the nearest point and is flagged as approximate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Minimum sample count accepted by [`LatticeSpec::estimate_second_moment`].
pub const MIN_SECOND_MOMENT_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeKind {
    Identity,
    Hexagonal,
    E8,
    Custom,
}

impl LatticeKind {
    pub fn name(self) -> &'static str {
        match self {
            LatticeKind::Identity => "identity",
            LatticeKind::Hexagonal => "hexagonal",
            LatticeKind::E8 => "e8",
            LatticeKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for LatticeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "z" | "integer" => Ok(LatticeKind::Identity),
            "hexagonal" | "hex" | "a2" => Ok(LatticeKind::Hexagonal),
            "e8" => Ok(LatticeKind::E8),
            "custom" => Ok(LatticeKind::Custom),
            other => Err(Error::config(format!("unknown lattice '{other}'"))),
        }
    }
}

/// Output of [`LatticeSpec::nearest_point`].
#[derive(Debug, Clone, PartialEq)]
pub struct NearestPoint {
    pub point: Vec<f64>,
    /// True when the point came from Babai rounding rather than an exact decoder.
    pub approximate: bool,
}

/// Dither for a length-`s` vector: `s / n` independent blocks, each uniform
/// over the fundamental Voronoi region of the block lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherVector {
    pub values: Vec<f64>,
    pub block_dim: usize,
}

impl DitherVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.block_dim)
    }
}

#[derive(Debug, Clone)]
pub struct LatticeSpec {
    kind: LatticeKind,
    base: DMatrix<f64>,
    base_inv: DMatrix<f64>,
    scale: f64,
    second_moment: Option<f64>,
}

impl LatticeSpec {
    pub fn new(kind: LatticeKind, scale: f64) -> Result<Self> {
        let base = match kind {
            LatticeKind::Identity => DMatrix::identity(1, 1),
            LatticeKind::Hexagonal => hexagonal_generator(),
            LatticeKind::E8 => e8_generator(),
            LatticeKind::Custom => {
                return Err(Error::config(
                    "custom lattices need a generator; use LatticeSpec::custom",
                ))
            }
        };
        Self::build(kind, base, scale)
    }

    pub fn identity(scale: f64) -> Result<Self> {
        Self::new(LatticeKind::Identity, scale)
    }

    pub fn hexagonal(scale: f64) -> Result<Self> {
        Self::new(LatticeKind::Hexagonal, scale)
    }

    pub fn e8(scale: f64) -> Result<Self> {
        Self::new(LatticeKind::E8, scale)
    }

    /// Lattice from an arbitrary square generator whose columns are the basis.
    pub fn custom(generator: DMatrix<f64>, scale: f64) -> Result<Self> {
        Self::build(LatticeKind::Custom, generator, scale)
    }

    fn build(kind: LatticeKind, base: DMatrix<f64>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config(format!("lattice scale must be positive, got {scale}")));
        }
        if !base.is_square() || base.nrows() == 0 {
            return Err(Error::config("generator must be a non-empty square matrix"));
        }
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generator"));
        }
        let det = (base.clone() * scale).determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::config("generator is rank deficient"));
        }
        let base_inv = base
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::config("generator is not invertible"))?;
        let second_moment = match kind {
            LatticeKind::Identity => Some(scale * scale / 12.0),
            _ => None,
        };
        Ok(Self {
            kind,
            base,
            base_inv,
            scale,
            second_moment,
        })
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn block_dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Scaled generator `ρG`.
    pub fn generator(&self) -> DMatrix<f64> {
        &self.base * self.scale
    }

    pub fn is_exact(&self) -> bool {
        self.kind != LatticeKind::Custom
    }

    /// Volume of the fundamental cell, `|det(ρG)|`.
    pub fn cell_volume(&self) -> f64 {
        self.generator().determinant().abs()
    }

    /// Packing radius of the scaled lattice. Custom lattices find the shortest
    /// vector by sphere enumeration.
    pub fn packing_radius(&self) -> f64 {
        let r = match self.kind {
            LatticeKind::Identity | LatticeKind::Hexagonal => 0.5,
            LatticeKind::E8 => std::f64::consts::SQRT_2 / 2.0,
            LatticeKind::Custom => {
                let n = self.block_dim();
                let bound = (0..n)
                    .map(|j| self.base.column(j).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                let mut best = f64::INFINITY;
                sphere_points(&self.base, &vec![0.0; n], bound * (1.0 + 1e-9), |z, d2| {
                    if z.iter().any(|&v| v != 0) {
                        best = best.min(d2);
                    }
                });
                best.sqrt() / 2.0
            }
        };
        r * self.scale
    }

    /// Per-dimension second moment if known (closed form or cached estimate).
    pub fn cached_second_moment(&self) -> Option<f64> {
        self.second_moment
    }

    /// Override the cached second moment.
    pub fn set_second_moment(&mut self, value: f64) -> Result<()> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::config("second moment must be positive"));
        }
        self.second_moment = Some(value);
        Ok(())
    }

    /// Nearest lattice point to an `n`-dimensional input.
    pub fn nearest_point(&self, x: &[f64]) -> Result<NearestPoint> {
        let n = self.block_dim();
        if x.len() != n {
            return Err(Error::dim("nearest_point input", n, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("nearest_point input"));
        }
        let mut point = vec![0.0; n];
        self.quantize_block(x, &mut point);
        Ok(NearestPoint {
            point,
            approximate: !self.is_exact(),
        })
    }

    /// Blockwise quantization of a vector whose length is a multiple of `n`.
    pub fn quantize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quantize input"));
        }
        let mut out = vec![0.0; x.len()];
        self.quantize_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked blockwise quantization; lengths must already agree.
    pub(crate) fn quantize_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.block_dim();
        for (xb, ob) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            self.quantize_block(xb, ob);
        }
    }

    fn quantize_block(&self, x: &[f64], out: &mut [f64]) {
        let rho = self.scale;
        match self.kind {
            LatticeKind::Identity => out[0] = (x[0] / rho).round() * rho,
            LatticeKind::Hexagonal => {
                let p = decode_hexagonal([x[0] / rho, x[1] / rho]);
                out[0] = p[0] * rho;
                out[1] = p[1] * rho;
            }
            LatticeKind::E8 => {
                let mut y = [0.0; 8];
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi = xi / rho;
                }
                let p = decode_e8(&y);
                for (o, pi) in out.iter_mut().zip(p) {
                    *o = pi * rho;
                }
            }
            LatticeKind::Custom => {
                let n = self.block_dim();
                let z: Vec<f64> = (0..n)
                    .map(|i| (0..n).map(|j| self.base_inv[(i, j)] * x[j] / rho).sum::<f64>().round())
                    .collect();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = rho * (0..n).map(|j| self.base[(i, j)] * z[j]).sum::<f64>();
                }
            }
        }
    }

    /// Generator coordinates `(ρG)⁻¹ p` of a block.
    pub fn coordinates(&self, p: &[f64]) -> Result<Vec<f64>> {
        let n = self.block_dim();
        if p.len() != n {
            return Err(Error::dim("coordinates input", n, p.len()));
        }
        Ok((0..n)
            .map(|i| (0..n).map(|j| self.base_inv[(i, j)] * p[j] / self.scale).sum())
            .collect())
    }

    /// Whether every block of `p` is a lattice point up to `tol` in generator
    /// coordinates.
    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        if self.check_len(p.len()).is_err() {
            return false;
        }
        p.chunks_exact(self.block_dim()).all(|b| {
            self.coordinates(b)
                .map(|z| z.iter().all(|c| (c - c.round()).abs() <= tol))
                .unwrap_or(false)
        })
    }

    /// Exhaustive nearest point: every lattice point no farther from `x` than
    /// the Babai rounding point is enumerated (Fincke-Pohst) and the closest
    /// one kept. Independent of the structured decoders; used as their oracle.
    pub fn enumerate_nearest(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.block_dim();
        if x.len() != n {
            return Err(Error::dim("enumerate_nearest input", n, x.len()));
        }
        let g = self.generator();
        let babai: Vec<f64> = self.coordinates(x)?.iter().map(|c| c.round()).collect();
        let start: f64 = (0..n)
            .map(|i| ((0..n).map(|j| g[(i, j)] * babai[j]).sum::<f64>() - x[i]).powi(2))
            .sum();
        let mut best_z: Vec<i64> = babai.iter().map(|&c| c as i64).collect();
        let mut best_d = start;
        sphere_points(&g, x, start * (1.0 + 1e-9) + 1e-300, |z, d2| {
            if d2 < best_d {
                best_d = d2;
                best_z.copy_from_slice(z);
            }
        });
        Ok((0..n)
            .map(|i| (0..n).map(|j| g[(i, j)] * best_z[j] as f64).sum())
            .collect())
    }

    /// One dither block: uniform over the parallelepiped `ρG·[0,1)ⁿ`, folded
    /// into the Voronoi cell by subtracting its nearest lattice point.
    pub fn sample_dither_block<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.block_dim();
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut p = vec![0.0; n];
        for (i, pi) in p.iter_mut().enumerate() {
            *pi = self.scale * (0..n).map(|j| self.base[(i, j)] * u[j]).sum::<f64>();
        }
        self.quantize_block(&p, out);
        for (o, pi) in out.iter_mut().zip(&p) {
            *o = pi - *o;
        }
    }

    /// Dither for a length-`s` vector.
    pub fn sample_dither<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<DitherVector> {
        self.check_len(s)?;
        let mut values = vec![0.0; s];
        for block in values.chunks_exact_mut(self.block_dim()) {
            self.sample_dither_block(rng, block);
        }
        Ok(DitherVector {
            values,
            block_dim: self.block_dim(),
        })
    }

    /// Monte-Carlo estimate `(1/(nN)) Σ ‖dᵢ‖²` over `N` dither blocks.
    pub fn estimate_second_moment<R: Rng + ?Sized>(&self, num_samples: usize, rng: &mut R) -> Result<f64> {
        if num_samples < MIN_SECOND_MOMENT_SAMPLES {
            return Err(Error::config(format!(
                "second moment needs at least {MIN_SECOND_MOMENT_SAMPLES} samples, got {num_samples}"
            )));
        }
        let n = self.block_dim();
        let mut d = vec![0.0; n];
        let mut acc = 0.0;
        for _ in 0..num_samples {
            self.sample_dither_block(rng, &mut d);
            acc += d.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(acc / (n * num_samples) as f64)
    }

    /// Second moment, estimating and caching it when not yet known. The
    /// identity lattice uses the closed form `ρ²/12`.
    pub fn second_moment<R: Rng + ?Sized>(&mut self, num_samples: usize, rng: &mut R) -> Result<f64> {
        if let Some(v) = self.second_moment {
            return Ok(v);
        }
        let v = self.estimate_second_moment(num_samples, rng)?;
        self.second_moment = Some(v);
        Ok(v)
    }

    pub(crate) fn check_len(&self, s: usize) -> Result<()> {
        let n = self.block_dim();
        if !s.is_multiple_of(n) {
            return Err(Error::config(format!(
                "length {s} is not a multiple of the {} block dimension {n}",
                self.name()
            )));
        }
        Ok(())
    }
}

/// Hexagonal generator with basis columns `(1, 0)` and `(1/2, √3/2)`.
pub fn hexagonal_generator() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, SQRT3 / 2.0])
}

/// E8 generator (columns): `2e₁`, `eᵢ₊₁ − eᵢ` for `i = 1..6`, and `½·1`.
pub fn e8_generator() -> DMatrix<f64> {
    let mut g = DMatrix::zeros(8, 8);
    g[(0, 0)] = 2.0;
    for i in 1..7 {
        g[(i - 1, i)] = -1.0;
        g[(i, i)] = 1.0;
    }
    for i in 0..8 {
        g[(i, 7)] = 0.5;
    }
    g
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A2 as the union of the rectangular lattice `Z × √3Z` and its shift by
/// `(½, √3/2)`; each coset decodes by coordinate rounding.
fn decode_hexagonal(y: [f64; 2]) -> [f64; 2] {
    let c0 = [y[0].round(), (y[1] / SQRT3).round() * SQRT3];
    let c1 = [
        (y[0] - 0.5).round() + 0.5,
        ((y[1] - SQRT3 / 2.0) / SQRT3).round() * SQRT3 + SQRT3 / 2.0,
    ];
    if sq_dist(&y, &c0) <= sq_dist(&y, &c1) {
        c0
    } else {
        c1
    }
}

/// Nearest point of D8 (integer vectors with even coordinate sum).
fn decode_d8(y: &[f64; 8]) -> [f64; 8] {
    let mut f = [0.0; 8];
    let mut sum = 0.0;
    let mut worst = 0;
    let mut worst_err = -1.0;
    for i in 0..8 {
        f[i] = y[i].round();
        sum += f[i];
        let err = (y[i] - f[i]).abs();
        if err > worst_err {
            worst_err = err;
            worst = i;
        }
    }
    if (sum as i64).rem_euclid(2) == 1 {
        f[worst] += if y[worst] >= f[worst] { 1.0 } else { -1.0 };
    }
    f
}

/// E8 = D8 ∪ (D8 + ½·1): decode both cosets and keep the closer point.
fn decode_e8(y: &[f64; 8]) -> [f64; 8] {
    let c0 = decode_d8(y);
    let mut shifted = [0.0; 8];
    for i in 0..8 {
        shifted[i] = y[i] - 0.5;
    }
    let mut c1 = decode_d8(&shifted);
    for v in c1.iter_mut() {
        *v += 0.5;
    }
    if sq_dist(y, &c0) <= sq_dist(y, &c1) {
        c0
    } else {
        c1
    }
}

/// Calls `visit(z, ‖Bz − x‖²)` for every integer `z` with
/// `‖Bz − x‖² ≤ radius2`, via depth-first search on the QR factor of `B`.
fn sphere_points(b: &DMatrix<f64>, x: &[f64], radius2: f64, mut visit: impl FnMut(&[i64], f64)) {
    let n = b.ncols();
    let qr = b.clone().qr();
    let r = qr.r();
    let y = qr.q().transpose() * DVector::from_column_slice(x);
    let mut z = vec![0i64; n];
    descend(&r, y.as_slice(), radius2, n, 0.0, &mut z, &mut visit);
}

fn descend(
    r: &DMatrix<f64>,
    y: &[f64],
    radius2: f64,
    level: usize,
    partial: f64,
    z: &mut [i64],
    visit: &mut impl FnMut(&[i64], f64),
) {
    if level == 0 {
        visit(z, partial);
        return;
    }
    let i = level - 1;
    let n = z.len();
    let shift: f64 = (i + 1..n).map(|j| r[(i, j)] * z[j] as f64).sum();
    let rii = r[(i, i)];
    let center = (y[i] - shift) / rii;
    let width = (radius2 - partial).max(0.0).sqrt() / rii.abs();
    let lo = (center - width).ceil() as i64;
    let hi = (center + width).floor() as i64;
    for zi in lo..=hi {
        let e = rii * zi as f64 + shift - y[i];
        let d = partial + e * e;
        if d <= radius2 {
            z[i] = zi;
            descend(r, y, radius2, i, d, z, visit);
        }
    }
}
