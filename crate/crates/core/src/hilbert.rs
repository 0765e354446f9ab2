//! Truncated number-basis algebra.
//!
//! Density matrices are dense `d × d` complex matrices over |0⟩…|d−1⟩. Ladder
//! operators and their low-order polynomials are banded, so they are stored as
//! diagonals and applied in O(d² · bands) instead of dense O(d³) products.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// One diagonal of a banded operator: entries `(i, i + offset)`.
#[derive(Debug, Clone, PartialEq)]
struct Band {
    offset: isize,
    values: Vec<Complex64>,
}

impl Band {
    /// Row index of `values[0]`.
    fn first_row(&self) -> usize {
        if self.offset < 0 {
            (-self.offset) as usize
        } else {
            0
        }
    }
}

/// Banded operator on the truncated number basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    dim: usize,
    bands: Vec<Band>,
}

impl Operator {
    pub fn zero(dim: usize) -> Self {
        Self { dim, bands: Vec::new() }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(vec![ONE; dim])
    }

    pub fn diagonal(values: Vec<Complex64>) -> Self {
        let dim = values.len();
        Self {
            dim,
            bands: vec![Band { offset: 0, values }],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let offset = col as isize - row as isize;
        self.bands
            .iter()
            .find(|b| b.offset == offset)
            .map(|b| b.values[row - b.first_row()])
            .unwrap_or(ZERO)
    }

    pub fn to_dense(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for b in &self.bands {
            let r0 = b.first_row();
            for (k, v) in b.values.iter().enumerate() {
                let i = r0 + k;
                m[(i, (i as isize + b.offset) as usize)] += *v;
            }
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let bands = self
            .bands
            .iter()
            .map(|b| Band {
                offset: -b.offset,
                values: b.values.iter().map(|v| v.conj()).collect(),
            })
            .collect();
        Self { dim: self.dim, bands }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let bands = self
            .bands
            .iter()
            .map(|b| Band {
                offset: b.offset,
                values: b.values.iter().map(|v| v * c).collect(),
            })
            .collect();
        Self { dim: self.dim, bands }
    }

    fn band_mut(&mut self, offset: isize) -> &mut Band {
        if let Some(pos) = self.bands.iter().position(|b| b.offset == offset) {
            return &mut self.bands[pos];
        }
        let len = self.dim - offset.unsigned_abs();
        self.bands.push(Band {
            offset,
            values: vec![ZERO; len],
        });
        self.bands.sort_by_key(|b| b.offset);
        let pos = self.bands.iter().position(|b| b.offset == offset).unwrap();
        &mut self.bands[pos]
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "operator dimensions differ");
        let mut out = self.clone();
        for b in &other.bands {
            let dst = out.band_mut(b.offset);
            for (d, v) in dst.values.iter_mut().zip(&b.values) {
                *d += v;
            }
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-ONE))
    }

    /// Operator product `self · other`, still banded.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "operator dimensions differ");
        let d = self.dim as isize;
        let mut out = Self::zero(self.dim);
        for l in &self.bands {
            for r in &other.bands {
                let offset = l.offset + r.offset;
                if offset.abs() >= d {
                    continue;
                }
                let mut acc = vec![ZERO; (d - offset.abs()) as usize];
                let first = if offset < 0 { -offset } else { 0 };
                for (k, slot) in acc.iter_mut().enumerate() {
                    let i = first + k as isize;
                    let mid = i + l.offset;
                    let j = mid + r.offset;
                    if mid < 0 || mid >= d || j < 0 || j >= d || i + l.offset < 0 {
                        continue;
                    }
                    let lv = l.values[(i - l.first_row() as isize) as usize];
                    let rv = r.values[(mid - r.first_row() as isize) as usize];
                    *slot = lv * rv;
                }
                let dst = out.band_mut(offset);
                for (dv, v) in dst.values.iter_mut().zip(acc) {
                    *dv += v;
                }
            }
        }
        out.bands.retain(|b| b.values.iter().any(|v| *v != ZERO));
        out
    }

    /// `out += c · self · rho`.
    pub fn left_mul_acc(&self, rho: &CMatrix, c: Complex64, out: &mut CMatrix) {
        let d = self.dim;
        let src = rho.as_slice();
        let dst = out.as_mut_slice();
        for b in &self.bands {
            let r0 = b.first_row();
            for col in 0..d {
                let base = col * d;
                for (k, v) in b.values.iter().enumerate() {
                    let i = r0 + k;
                    let src_row = (i as isize + b.offset) as usize;
                    dst[base + i] += c * v * src[base + src_row];
                }
            }
        }
    }

    /// `out += c · rho · self`.
    pub fn right_mul_acc(&self, rho: &CMatrix, c: Complex64, out: &mut CMatrix) {
        let d = self.dim;
        let src = rho.as_slice();
        let dst = out.as_mut_slice();
        for b in &self.bands {
            let r0 = b.first_row();
            for (k, v) in b.values.iter().enumerate() {
                let i = r0 + k;
                let j = (i as isize + b.offset) as usize;
                // (ρ O)[:, j] += ρ[:, i] · O[i, j]
                let cv = c * v;
                let (s, t) = (i * d, j * d);
                for row in 0..d {
                    dst[t + row] += cv * src[s + row];
                }
            }
        }
    }

    pub fn left_mul(&self, rho: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim, self.dim);
        self.left_mul_acc(rho, ONE, &mut out);
        out
    }

    pub fn right_mul(&self, rho: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim, self.dim);
        self.right_mul_acc(rho, ONE, &mut out);
        out
    }

    /// `out += c · L ρ R`.
    pub fn sandwich_acc(left: &Self, rho: &CMatrix, right: &Self, c: Complex64, out: &mut CMatrix) {
        let tmp = left.left_mul(rho);
        right.right_mul_acc(&tmp, c, out);
    }

    /// `out += c · [self, rho]`.
    pub fn commutator_acc(&self, rho: &CMatrix, c: Complex64, out: &mut CMatrix) {
        self.left_mul_acc(rho, c, out);
        self.right_mul_acc(rho, -c, out);
    }

    /// `out += c · {self, rho}`.
    pub fn anticommutator_acc(&self, rho: &CMatrix, c: Complex64, out: &mut CMatrix) {
        self.left_mul_acc(rho, c, out);
        self.right_mul_acc(rho, c, out);
    }

    /// Tr(self · rho).
    pub fn expect(&self, rho: &CMatrix) -> Complex64 {
        let d = self.dim;
        let src = rho.as_slice();
        let mut acc = ZERO;
        for b in &self.bands {
            let r0 = b.first_row();
            for (k, v) in b.values.iter().enumerate() {
                let i = r0 + k;
                let j = (i as isize + b.offset) as usize;
                // O[i, j] ρ[j, i]
                acc += v * src[i * d + j];
            }
        }
        acc
    }
}

fn ensure_dim(d: usize) -> Result<()> {
    if d < 2 {
        Err(Error::Domain(format!("truncation dimension must be >= 2, got {d}")))
    } else {
        Ok(())
    }
}

/// Annihilation operator with `a[i, i+1] = √(i+1)`.
pub fn annihilation(d: usize) -> Result<Operator> {
    ensure_dim(d)?;
    Ok(Operator {
        dim: d,
        bands: vec![Band {
            offset: 1,
            values: (1..d).map(|k| Complex64::new((k as f64).sqrt(), 0.0)).collect(),
        }],
    })
}

pub fn creation(d: usize) -> Result<Operator> {
    Ok(annihilation(d)?.adjoint())
}

pub fn number(d: usize) -> Result<Operator> {
    ensure_dim(d)?;
    Ok(Operator::diagonal((0..d).map(|k| Complex64::new(k as f64, 0.0)).collect()))
}

/// X_θ = (a e^{iθ} + a† e^{−iθ}) / 2.
pub fn quadrature(d: usize, theta: f64) -> Result<Operator> {
    let a = annihilation(d)?;
    let phase = Complex64::from_polar(0.5, theta);
    Ok(a.scale(phase).add(&a.adjoint().scale(phase.conj())))
}

/// The ladder operators a simulation needs, built once per dimension.
#[derive(Debug, Clone)]
pub struct Ladder {
    pub dim: usize,
    pub a: Operator,
    pub ad: Operator,
    /// a†a
    pub n: Operator,
    /// a a†
    pub n_up: Operator,
    pub a2: Operator,
    pub ad2: Operator,
    /// X = (a + a†)/2
    pub x: Operator,
    /// X²
    pub x2: Operator,
    /// a − a†, generator of the feedback displacement
    pub drive: Operator,
}

impl Ladder {
    pub fn new(d: usize) -> Result<Self> {
        let a = annihilation(d)?;
        let ad = a.adjoint();
        let n = ad.mul(&a);
        let n_up = a.mul(&ad);
        let a2 = a.mul(&a);
        let ad2 = ad.mul(&ad);
        let x = quadrature(d, 0.0)?;
        let x2 = x.mul(&x);
        let drive = a.sub(&ad);
        Ok(Self {
            dim: d,
            a,
            ad,
            n,
            n_up,
            a2,
            ad2,
            x,
            x2,
            drive,
        })
    }
}

/// D[L]ρ = LρL† − ½(L†Lρ + ρL†L).
pub fn dissipator(l: &Operator, rho: &CMatrix) -> Result<CMatrix> {
    check_shape(rho, l.dim())?;
    let ld = l.adjoint();
    let ldl = ld.mul(l);
    let mut out = CMatrix::zeros(l.dim(), l.dim());
    Operator::sandwich_acc(l, rho, &ld, ONE, &mut out);
    ldl.anticommutator_acc(rho, Complex64::new(-0.5, 0.0), &mut out);
    Ok(out)
}

pub(crate) fn check_shape(m: &CMatrix, d: usize) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        Err(Error::ShapeMismatch {
            expected: d,
            got_rows: m.nrows(),
            got_cols: m.ncols(),
        })
    } else {
        Ok(())
    }
}

/// Largest |m[i,j] − conj(m[j,i])|.
pub fn hermiticity_error(m: &CMatrix) -> f64 {
    let d = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..d {
        for i in 0..=j {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn trace(m: &CMatrix) -> Complex64 {
    m.diagonal().iter().sum()
}

/// A Hermitian, unit-trace, numerically positive matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    data: CMatrix,
}

pub const HERMITICITY_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-8;

impl DensityMatrix {
    /// Validates hermiticity, trace and positivity.
    pub fn new(data: CMatrix) -> Result<Self> {
        if data.nrows() != data.ncols() {
            return Err(Error::ShapeMismatch {
                expected: data.nrows(),
                got_rows: data.nrows(),
                got_cols: data.ncols(),
            });
        }
        ensure_dim(data.nrows())?;
        let rho = Self { data };
        let herm = hermiticity_error(&rho.data);
        if herm > HERMITICITY_TOL {
            return Err(Error::Domain(format!("matrix is not Hermitian (deviation {herm:.3e})")));
        }
        let tr = trace(&rho.data);
        if (tr - ONE).norm() > TRACE_TOL {
            return Err(Error::Domain(format!("trace is {tr}, expected 1")));
        }
        let min = rho.min_eigenvalue();
        if min < -POSITIVITY_TOL {
            return Err(Error::Domain(format!("minimum eigenvalue {min:.3e} is negative")));
        }
        Ok(rho)
    }

    /// Wraps a matrix without checks; integrators use this between checkpoints.
    pub fn from_matrix_unchecked(data: CMatrix) -> Self {
        Self { data }
    }

    pub fn fock(d: usize, n: usize) -> Result<Self> {
        ensure_dim(d)?;
        if n >= d {
            return Err(Error::Domain(format!("Fock level {n} outside dimension {d}")));
        }
        let mut m = CMatrix::zeros(d, d);
        m[(n, n)] = ONE;
        Ok(Self { data: m })
    }

    pub fn vacuum(d: usize) -> Result<Self> {
        Self::fock(d, 0)
    }

    /// Geometric populations ∝ (n̄/(n̄+1))^k on the truncated basis, normalized.
    pub fn thermal(d: usize, nbar: f64) -> Result<Self> {
        ensure_dim(d)?;
        if !(nbar >= 0.0) {
            return Err(Error::Domain(format!("nbar must be >= 0, got {nbar}")));
        }
        let ratio = nbar / (nbar + 1.0);
        let weights: Vec<f64> = (0..d).map(|k| ratio.powi(k as i32)).collect();
        let total: f64 = weights.iter().sum();
        let diag = weights.iter().map(|w| Complex64::new(w / total, 0.0)).collect::<Vec<_>>();
        Ok(Self {
            data: CMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)),
        })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }

    pub fn into_matrix(self) -> CMatrix {
        self.data
    }

    pub fn trace(&self) -> Complex64 {
        trace(&self.data)
    }

    pub fn purity(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        hermiticity_error(&self.data)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        // symmetrize so roundoff asymmetry cannot leak into the eigen solver
        let h = (&self.data + self.data.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn populations(&self) -> Vec<f64> {
        self.data.diagonal().iter().map(|z| z.re).collect()
    }

    pub fn expect(&self, op: &Operator) -> Complex64 {
        op.expect(&self.data)
    }

    /// The same state embedded into a larger truncation (zero padded).
    pub fn embed(&self, d: usize) -> Result<Self> {
        if d < self.dim() {
            return Err(Error::Domain(format!("cannot embed dim {} into {d}", self.dim())));
        }
        let mut m = CMatrix::zeros(d, d);
        m.view_mut((0, 0), (self.dim(), self.dim())).copy_from(&self.data);
        Ok(Self { data: m })
    }
}

/// ⟨a⟩, ⟨a²⟩, ⟨a†a⟩ of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean_a: Complex64,
    pub mean_aa: Complex64,
    pub mean_n: f64,
}

impl Moments {
    /// Var(X_θ) = ¼[1 + 2⟨a†a⟩ + 2 Re(⟨a²⟩e^{2iθ})] − (Re(⟨a⟩e^{iθ}))².
    pub fn var_x(&self, theta: f64) -> f64 {
        let first = (self.mean_a * Complex64::from_polar(1.0, theta)).re;
        0.25 * (1.0 + 2.0 * self.mean_n + 2.0 * (self.mean_aa * Complex64::from_polar(1.0, 2.0 * theta)).re)
            - first * first
    }
}

pub fn moments(rho: &DensityMatrix) -> Moments {
    moments_of(rho.matrix())
}

pub(crate) fn moments_of(rho: &CMatrix) -> Moments {
    let d = rho.nrows();
    let src = rho.as_slice();
    let mut mean_a = ZERO;
    let mut mean_aa = ZERO;
    let mut mean_n = 0.0;
    for i in 0..d {
        // ⟨a⟩ = Σ √(i+1) ρ[i+1, i]; column-major index row + col * d
        if i + 1 < d {
            mean_a += (((i + 1) as f64).sqrt()) * src[i * d + i + 1];
        }
        if i + 2 < d {
            mean_aa += (((i + 1) * (i + 2)) as f64).sqrt() * src[i * d + i + 2];
        }
        mean_n += i as f64 * src[i * d + i].re;
    }
    Moments {
        mean_a,
        mean_aa,
        mean_n,
    }
}

/// Total population in the top `margin` basis states.
pub fn tail_mass(rho: &DensityMatrix, margin: usize) -> Result<f64> {
    if margin >= rho.dim() {
        return Err(Error::Domain(format!(
            "margin {margin} must be below the dimension {}",
            rho.dim()
        )));
    }
    Ok(tail_mass_of(rho.matrix(), margin))
}

pub(crate) fn tail_mass_of(rho: &CMatrix, margin: usize) -> f64 {
    let d = rho.nrows();
    (d - margin..d).map(|k| rho[(k, k)].re).sum()
}

/// Warning and error levels for population at the top of the basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy {
    pub warn: f64,
    pub error: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { warn: 1e-6, error: 1e-4 }
    }
}

impl TruncationPolicy {
    /// Number of top levels monitored: the upper fifth of the basis.
    pub fn margin(dim: usize) -> usize {
        dim.div_ceil(5).clamp(1, dim - 1)
    }

    /// Errors above `error`, logs above `warn`; returns the measured tail.
    pub fn check(&self, rho: &CMatrix) -> Result<f64> {
        let d = rho.nrows();
        let tail = tail_mass_of(rho, Self::margin(d));
        if tail > self.error {
            return Err(Error::Truncation {
                tail,
                dim: d,
                limit: self.error,
            });
        }
        if tail > self.warn {
            log::warn!("truncation: tail mass {tail:.3e} at dim {d}");
        }
        Ok(tail)
    }
}
