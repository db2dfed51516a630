//! First-order multivariate stochastic delay equations `dX = η∗X dt + dZ`.
//!
//! A [`DelayMeasure`] is a finite signed matrix measure on `[0, ∞)` made of
//! point masses plus density parts. Densities come either in matrix-exponential
//! form `u ↦ L e^{Gu} R`, whose Laplace transform is exact, or as uniform
//! samples, which are integrated as their piecewise-linear interpolant (this is
//! the trapezoid rule at `z = 0`).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::conv;
use crate::error::{Error, Result};
use crate::linalg;

const MODULE: &str = "msdde";

/// `|density(u)| ≤ constant · e^{-rate·u}` and `density(u) = 0` for `u > support`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayBound {
    pub constant: f64,
    pub rate: f64,
    pub support: f64,
}

impl DecayBound {
    /// First `u` beyond which the bound is below `tol`.
    pub fn horizon(&self, tol: f64) -> f64 {
        if self.constant <= tol {
            return 0.0;
        }
        let t = if self.rate.is_finite() && self.rate > 0.0 {
            (self.constant / tol).ln() / self.rate
        } else {
            f64::INFINITY
        };
        t.min(self.support)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Density {
    /// `u ↦ left · e^{generator·u} · right`, generator strictly stable.
    MatrixExp { left: DMatrix<f64>, generator: DMatrix<f64>, right: DMatrix<f64> },
    /// Values at `u = 0, dt, 2dt, …`, zero past the last sample.
    Sampled { dt: f64, values: Vec<DMatrix<f64>> },
}

impl Density {
    fn shape(&self) -> (usize, usize) {
        match self {
            Density::MatrixExp { left, right, .. } => (left.nrows(), right.ncols()),
            Density::Sampled { values, .. } => (values[0].nrows(), values[0].ncols()),
        }
    }

    /// Abscissa of convergence of the Laplace transform.
    fn strip(&self) -> Result<f64> {
        match self {
            Density::MatrixExp { generator, .. } => Ok(-linalg::spectral_abscissa(generator)?),
            Density::Sampled { .. } => Ok(f64::INFINITY),
        }
    }

    pub fn at(&self, u: f64) -> Result<DMatrix<f64>> {
        let (r, c) = self.shape();
        if u < 0.0 {
            return Ok(DMatrix::zeros(r, c));
        }
        match self {
            Density::MatrixExp { left, generator, right } => Ok(left * linalg::expm(&(generator * u))? * right),
            Density::Sampled { dt, values } => {
                let x = u / dt;
                let k = x.floor() as usize;
                if k + 1 >= values.len() {
                    return Ok(if k + 1 == values.len() && x == k as f64 { values[k].clone() } else { DMatrix::zeros(r, c) });
                }
                let w = x - k as f64;
                Ok(&values[k] * (1.0 - w) + &values[k + 1] * w)
            }
        }
    }

    /// Samples at `u = j·dt`, `j = 0..len`.
    pub fn samples(&self, dt: f64, len: usize) -> Result<Vec<DMatrix<f64>>> {
        match self {
            Density::MatrixExp { left, generator, right } => {
                let step = linalg::expm(&(generator * dt))?;
                let mut phi = DMatrix::identity(generator.nrows(), generator.nrows());
                let mut out = Vec::with_capacity(len);
                for _ in 0..len {
                    out.push(left * &phi * right);
                    phi = &step * phi;
                }
                Ok(out)
            }
            Density::Sampled { dt: own, values } if (own - dt).abs() <= 1e-12 * dt => {
                let (r, c) = self.shape();
                Ok((0..len).map(|j| values.get(j).cloned().unwrap_or_else(|| DMatrix::zeros(r, c))).collect())
            }
            Density::Sampled { .. } => (0..len).map(|j| self.at(j as f64 * dt)).collect(),
        }
    }

    fn laplace(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        match self {
            Density::MatrixExp { left, generator, right } => {
                let k = generator.nrows();
                let shifted = linalg::to_complex(generator) + linalg::complex_identity(k) * z;
                let sol = shifted
                    .lu()
                    .solve(&linalg::to_complex(right))
                    .ok_or_else(|| Error::numerical(MODULE, "singular resolvent in density transform"))?;
                Ok(-(linalg::to_complex(left) * sol))
            }
            Density::Sampled { dt, values } => {
                let (r, c) = self.shape();
                let mut acc = DMatrix::<Complex64>::zeros(r, c);
                if values.len() < 2 {
                    return Ok(acc);
                }
                let (phi, psi) = filon_weights(z * *dt);
                let (w0, w1) = ((phi - psi) * *dt, psi * *dt);
                let rho = (z * *dt).exp();
                let mut scale = Complex64::new(1.0, 0.0);
                for k in 0..values.len() - 1 {
                    let seg = linalg::to_complex(&values[k]) * (w0 * scale) + linalg::to_complex(&values[k + 1]) * (w1 * scale);
                    acc += seg;
                    scale *= rho;
                }
                Ok(acc)
            }
        }
    }

    fn decay(&self) -> Result<DecayBound> {
        match self {
            Density::MatrixExp { left, generator, right } => {
                let abscissa = linalg::spectral_abscissa(generator)?;
                let rate = -0.9 * abscissa;
                let points = 400;
                let h = 4.0 / rate / points as f64;
                let step = linalg::expm(&(generator * h))?;
                let mut phi = DMatrix::identity(generator.nrows(), generator.nrows());
                let mut constant: f64 = 0.0;
                for j in 0..=points {
                    let u = j as f64 * h;
                    constant = constant.max(linalg::max_abs(&(left * &phi * right)) * (rate * u).exp());
                    phi = &step * phi;
                }
                Ok(DecayBound { constant, rate, support: f64::INFINITY })
            }
            Density::Sampled { dt, values } => {
                let constant = values.iter().map(linalg::max_abs).fold(0.0, f64::max);
                Ok(DecayBound { constant, rate: 0.0, support: (values.len() - 1) as f64 * dt })
            }
        }
    }

    /// Places an `n×n` density into block `(row, col)` of an `(mn)×(mn)` one.
    fn embed(&self, n: usize, m: usize, row: usize, col: usize) -> Density {
        match self {
            Density::MatrixExp { left, generator, right } => {
                let k = generator.nrows();
                let mut l = DMatrix::zeros(m * n, k);
                l.view_mut((row * n, 0), (n, k)).copy_from(left);
                let mut r = DMatrix::zeros(k, m * n);
                r.view_mut((0, col * n), (k, n)).copy_from(right);
                Density::MatrixExp { left: l, generator: generator.clone(), right: r }
            }
            Density::Sampled { dt, values } => Density::Sampled {
                dt: *dt,
                values: values.iter().map(|v| embed_block(v, n, m, row, col)).collect(),
            },
        }
    }
}

fn embed_block(v: &DMatrix<f64>, n: usize, m: usize, row: usize, col: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m * n, m * n);
    out.view_mut((row * n, col * n), (n, n)).copy_from(v);
    out
}

/// `φ(w) = ∫_0^1 e^{ws} ds` and `ψ(w) = ∫_0^1 s e^{ws} ds`.
fn filon_weights(w: Complex64) -> (Complex64, Complex64) {
    if w.norm() < 0.5 {
        let mut phi = Complex64::new(0.0, 0.0);
        let mut psi = Complex64::new(0.0, 0.0);
        let mut term = Complex64::new(1.0, 0.0); // w^k / k!
        for k in 0..24 {
            phi += term / (k as f64 + 1.0);
            psi += term / (k as f64 + 2.0);
            term *= w / (k as f64 + 1.0);
        }
        (phi, psi)
    } else {
        let e = w.exp();
        ((e - 1.0) / w, (e * (w - 1.0) + 1.0) / (w * w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayMeasure {
    n: usize,
    atoms: Vec<(f64, DMatrix<f64>)>,
    densities: Vec<Density>,
}

impl DelayMeasure {
    pub fn new(n: usize, atoms: Vec<(f64, DMatrix<f64>)>, densities: Vec<Density>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid(MODULE, "dimension must be positive"));
        }
        for (loc, w) in &atoms {
            if !loc.is_finite() || *loc < 0.0 {
                return Err(Error::invalid(MODULE, format!("atom location {loc} must be finite and non-negative")));
            }
            if w.nrows() != n || w.ncols() != n || w.iter().any(|v| !v.is_finite()) {
                return Err(Error::dimension(MODULE, format!("atom weight must be a finite {n}x{n} matrix")));
            }
        }
        for d in &densities {
            match d {
                Density::MatrixExp { left, generator, right } => {
                    let k = generator.nrows();
                    if generator.ncols() != k || left.nrows() != n || left.ncols() != k || right.nrows() != k || right.ncols() != n {
                        return Err(Error::dimension(MODULE, "inconsistent matrix-exponential density shapes"));
                    }
                    if d.strip()? <= 0.0 {
                        return Err(Error::invalid(MODULE, "density generator must be strictly stable"));
                    }
                }
                Density::Sampled { dt, values } => {
                    if !(*dt > 0.0) || values.len() < 2 {
                        return Err(Error::invalid(MODULE, "sampled density needs dt > 0 and at least two samples"));
                    }
                    if values.iter().any(|v| v.nrows() != n || v.ncols() != n || v.iter().any(|x| !x.is_finite())) {
                        return Err(Error::dimension(MODULE, format!("density samples must be finite {n}x{n} matrices")));
                    }
                }
            }
        }
        Ok(Self { n, atoms, densities })
    }

    pub fn atom_only(n: usize, location: f64, weight: DMatrix<f64>) -> Result<Self> {
        Self::new(n, vec![(location, weight)], Vec::new())
    }

    pub fn zero(n: usize) -> Self {
        Self { n, atoms: Vec::new(), densities: Vec::new() }
    }

    pub fn with_atom(mut self, location: f64, weight: DMatrix<f64>) -> Result<Self> {
        self.atoms.push((location, weight));
        Self::new(self.n, self.atoms, self.densities)
    }

    pub fn with_density(mut self, density: Density) -> Result<Self> {
        self.densities.push(density);
        Self::new(self.n, self.atoms, self.densities)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn atoms(&self) -> &[(f64, DMatrix<f64>)] {
        &self.atoms
    }

    pub fn densities(&self) -> &[Density] {
        &self.densities
    }

    /// Total weight of the atoms located at `0`.
    pub fn atom_at_zero(&self) -> DMatrix<f64> {
        self.atoms
            .iter()
            .filter(|(loc, _)| *loc == 0.0)
            .fold(DMatrix::zeros(self.n, self.n), |acc, (_, w)| acc + w)
    }

    /// The Laplace transform exists for `Re z` below this value.
    pub fn convergence_abscissa(&self) -> Result<f64> {
        let mut s = f64::INFINITY;
        for d in &self.densities {
            s = s.min(d.strip()?);
        }
        Ok(s)
    }

    /// Aggregate bound on the summed density.
    pub fn decay_bound(&self) -> Result<DecayBound> {
        let mut out = DecayBound { constant: 0.0, rate: f64::INFINITY, support: 0.0 };
        for d in &self.densities {
            let b = d.decay()?;
            out.constant += b.constant;
            if b.support.is_finite() {
                out.support = out.support.max(b.support);
            } else {
                out.support = f64::INFINITY;
                out.rate = out.rate.min(b.rate);
            }
        }
        if out.support.is_finite() {
            out.rate = 0.0;
        }
        Ok(out)
    }

    /// Delay beyond which atoms are absent and the density is below `tol`.
    pub fn delay_support(&self, tol: f64) -> Result<f64> {
        let atoms = self.atoms.iter().map(|(loc, _)| *loc).fold(0.0, f64::max);
        let dens = if self.densities.is_empty() { 0.0 } else { self.decay_bound()?.horizon(tol) };
        Ok(atoms.max(dens))
    }

    /// Rough size of the measure: `1 + Σ|atoms| + ∫|density|`, used to scale
    /// frequency grids.
    pub fn spectral_scale(&self) -> Result<f64> {
        let mut tv: f64 = self.atoms.iter().map(|(_, w)| w.norm()).sum();
        for d in &self.densities {
            let b = d.decay()?;
            tv += if b.support.is_finite() { b.constant * b.support } else { b.constant / b.rate };
        }
        Ok(1.0 + tv)
    }

    pub fn density_at(&self, u: f64) -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(self.n, self.n);
        for d in &self.densities {
            acc += d.at(u)?;
        }
        Ok(acc)
    }

    /// Summed density at `u = j·dt`, `j = 0..len`.
    pub fn density_samples(&self, dt: f64, len: usize) -> Result<Vec<DMatrix<f64>>> {
        let mut acc = vec![DMatrix::zeros(self.n, self.n); len];
        for d in &self.densities {
            for (a, s) in acc.iter_mut().zip(d.samples(dt, len)?) {
                *a += s;
            }
        }
        Ok(acc)
    }

    /// `L[η](z) = ∫ e^{zu} η(du)`.
    pub fn laplace(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        let strip = self.convergence_abscissa()?;
        if z.re >= strip {
            return Err(Error::invalid(MODULE, format!("Re z = {} outside the convergence strip (< {strip})", z.re)));
        }
        let mut acc = DMatrix::<Complex64>::zeros(self.n, self.n);
        for (loc, w) in &self.atoms {
            acc += linalg::to_complex(w) * (z * *loc).exp();
        }
        for d in &self.densities {
            acc += d.laplace(z)?;
        }
        Ok(acc)
    }

    /// Characteristic function `h(z) = −zI − L[η](z)`.
    pub fn eval_h(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        Ok(linalg::complex_identity(self.n) * (-z) - self.laplace(z)?)
    }
}

/// `dX^{(m-1)} = Σ_j ϖ_j ∗ X^{(j)} dt + dZ`.
#[derive(Debug, Clone, PartialEq)]
pub struct HigherOrderSdde {
    n: usize,
    varpi: Vec<DelayMeasure>,
}

impl HigherOrderSdde {
    pub fn new(varpi: Vec<DelayMeasure>) -> Result<Self> {
        let n = varpi.first().ok_or_else(|| Error::invalid(MODULE, "order m must be at least 1"))?.dim();
        if varpi.iter().any(|v| v.dim() != n) {
            return Err(Error::dimension(MODULE, "all delay measures must share one dimension"));
        }
        Ok(Self { n, varpi })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.varpi.len()
    }

    pub fn varpi(&self) -> &[DelayMeasure] {
        &self.varpi
    }

    /// Equivalent first-order system of dimension `mn`: identity atoms at 0 on
    /// the block super-diagonal, bottom block row `(ϖ_0, …, ϖ_{m-1})`.
    pub fn nest(&self) -> DelayMeasure {
        let (n, m) = (self.n, self.varpi.len());
        if m == 1 {
            return self.varpi[0].clone();
        }
        let mut atoms = Vec::new();
        let mut densities = Vec::new();
        let eye = DMatrix::identity(n, n);
        for b in 0..m - 1 {
            atoms.push((0.0, embed_block(&eye, n, m, b, b + 1)));
        }
        for (j, w) in self.varpi.iter().enumerate() {
            for (loc, a) in w.atoms() {
                atoms.push((*loc, embed_block(a, n, m, m - 1, j)));
            }
            for d in w.densities() {
                densities.push(d.embed(n, m, m - 1, j));
            }
        }
        DelayMeasure { n: n * m, atoms, densities }
    }

    /// `det(I(−z)^m − Σ_j L[ϖ_j](z)(−z)^j)`.
    pub fn reduced_det(&self, z: Complex64) -> Result<Complex64> {
        let m = self.varpi.len() as i32;
        let mut acc = linalg::complex_identity(self.n) * (-z).powi(m);
        for (j, w) in self.varpi.iter().enumerate() {
            acc -= w.laplace(z)? * (-z).powi(j as i32);
        }
        Ok(acc.determinant())
    }
}

/// `(det h_nested(z), det(I(−z)^m − Σ L[ϖ_j](z)(−z)^j))`.
pub fn det_reduction_check(sys: &HigherOrderSdde, z: Complex64) -> Result<(Complex64, Complex64)> {
    let lhs = sys.nest().eval_h(z)?.determinant();
    Ok((lhs, sys.reduced_det(z)?))
}

/// Matrix-valued kernel sampled at `t = j·dt`, `j = 0..len`. Values are right
/// limits; `atom_at_zero` is the jump of the kernel at the origin, i.e. the
/// point mass of its differential measure.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledKernel {
    dt: f64,
    values: Vec<DMatrix<f64>>,
    atom_at_zero: DMatrix<f64>,
}

impl SampledKernel {
    pub fn new(dt: f64, values: Vec<DMatrix<f64>>, atom_at_zero: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0) || values.is_empty() {
            return Err(Error::invalid(MODULE, "kernel needs dt > 0 and at least one sample"));
        }
        let (r, c) = values[0].shape();
        if values.iter().any(|v| v.shape() != (r, c)) || atom_at_zero.shape() != (r, c) {
            return Err(Error::dimension(MODULE, "kernel samples must share one shape"));
        }
        Ok(Self { dt, values, atom_at_zero })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn atom_at_zero(&self) -> &DMatrix<f64> {
        &self.atom_at_zero
    }

    /// Last sampled time.
    pub fn horizon(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.dt
    }

    /// Linear interpolation; zero outside `[0, horizon]`.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let (r, c) = self.shape();
        if t < 0.0 || t > self.horizon() {
            return DMatrix::zeros(r, c);
        }
        let x = t / self.dt;
        let k = (x.floor() as usize).min(self.values.len() - 1);
        if k + 1 == self.values.len() {
            return self.values[k].clone();
        }
        let w = x - k as f64;
        &self.values[k] * (1.0 - w) + &self.values[k + 1] * w
    }

    /// Keeps the samples on `[0, t]`.
    pub fn truncated(&self, t: f64) -> SampledKernel {
        let keep = ((t / self.dt).round() as usize + 1).clamp(1, self.values.len());
        SampledKernel { dt: self.dt, values: self.values[..keep].to_vec(), atom_at_zero: self.atom_at_zero.clone() }
    }

    /// Block of every sample.
    pub fn block(&self, row: usize, col: usize, rows: usize, cols: usize) -> SampledKernel {
        let pick = |m: &DMatrix<f64>| m.view((row, col), (rows, cols)).into_owned();
        SampledKernel { dt: self.dt, values: self.values.iter().map(pick).collect(), atom_at_zero: pick(&self.atom_at_zero) }
    }

    pub fn entry_series(&self, i: usize, j: usize) -> Vec<f64> {
        self.values.iter().map(|m| m[(i, j)]).collect()
    }
}

/// Output of [`kernel_fft`]: the kernel on `[0, NΔ/2)` plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFft {
    pub kernel: SampledKernel,
    /// Largest entry of the recovered kernel at negative times.
    pub negative_time_max: f64,
    /// Share of `Σ|g|` carried by negative times.
    pub negative_mass_ratio: f64,
    pub min_abs_det: f64,
}

/// Threshold on `|det h(iy)|` below which the frequency response is treated
/// as singular.
pub const SINGULAR_DET_TOL: f64 = 1e-12;

/// Solution kernel `g` with `F[g](y) = h(iy)^{-1}`, by inverse FFT.
///
/// The smooth reference `r(t) = (I + (W₀+I)t)e^{-t}` for `t ≥ 0`, with `W₀` the
/// atom of `η` at the origin, shares the jump of `g` at 0 and its first
/// derivative there. It is removed in frequency and added back exactly in
/// time, so the transformed remainder decays like `|y|^{-3}`.
pub fn kernel_fft(eta: &DelayMeasure, dt: f64, n_fft: usize) -> Result<KernelFft> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(MODULE, "grid step must be positive"));
    }
    if n_fft < 4 || !n_fft.is_power_of_two() {
        return Err(Error::invalid(MODULE, format!("FFT length {n_fft} must be a power of two ≥ 4")));
    }
    let n = eta.dim();
    let w0 = eta.atom_at_zero();
    let slope = linalg::to_complex(&(&w0 + DMatrix::identity(n, n)));
    let eye = linalg::complex_identity(n);
    let scale = eta.spectral_scale()?;

    let mut spectra: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); n_fft]; n * n];
    let mut min_abs_det = f64::INFINITY;
    for k in 0..n_fft {
        let kk = if k < n_fft / 2 { k as f64 } else { k as f64 - n_fft as f64 };
        let y = 2.0 * std::f64::consts::PI * kk / (n_fft as f64 * dt);
        let h = eta.eval_h(Complex64::new(0.0, y))?;
        let det = h.determinant();
        min_abs_det = min_abs_det.min(det.norm());
        if det.norm() < SINGULAR_DET_TOL * scale.powi(n as i32) {
            return Err(Error::hypothesis(MODULE, format!("det h(iy) vanishes near y = {y}")));
        }
        let inv = h.try_inverse().ok_or_else(|| Error::numerical(MODULE, format!("h(iy) not invertible at y = {y}")))?;
        let d = Complex64::new(1.0, -y);
        let residual = inv - &eye / d - &slope / (d * d);
        for i in 0..n {
            for j in 0..n {
                spectra[i * n + j][k] = residual[(i, j)];
            }
        }
    }

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let norm = 1.0 / (n_fft as f64 * dt);
    let half = n_fft / 2;
    let mut values = vec![DMatrix::zeros(n, n); half];
    let mut negative_time_max: f64 = 0.0;
    let mut negative_mass = 0.0;
    let mut total_mass = 0.0;
    for (idx, spec) in spectra.iter_mut().enumerate() {
        let (i, j) = (idx / n, idx % n);
        fft.process(spec);
        for (t, z) in spec.iter().enumerate() {
            let v = z.re * norm;
            if t < half {
                values[t][(i, j)] = v;
            } else {
                negative_time_max = negative_time_max.max(v.abs());
                negative_mass += v.abs();
            }
        }
    }
    let slope_r = &w0 + DMatrix::identity(n, n);
    for (t, v) in values.iter_mut().enumerate() {
        let time = t as f64 * dt;
        *v += (DMatrix::identity(n, n) + &slope_r * time) * (-time).exp();
        total_mass += v.iter().map(|x| x.abs()).sum::<f64>();
    }
    total_mass += negative_mass;
    let kernel = SampledKernel::new(dt, values, DMatrix::identity(n, n))?;
    let negative_mass_ratio = if total_mass > 0.0 { negative_mass / total_mass } else { 0.0 };
    Ok(KernelFft { kernel, negative_time_max, negative_mass_ratio, min_abs_det })
}

/// Samples of the density `(g∗η)(u) = ∫ g(u−v) η(dv)` at the kernel's grid.
pub fn kernel_measure_density(g: &SampledKernel, eta: &DelayMeasure) -> Result<Vec<DMatrix<f64>>> {
    let (dt, len) = (g.dt(), g.len());
    let n = eta.dim();
    if g.shape() != (n, n) {
        return Err(Error::dimension(MODULE, "kernel and measure dimensions differ"));
    }
    let mut out = vec![DMatrix::zeros(n, n); len];
    for (loc, w) in eta.atoms() {
        for (j, o) in out.iter_mut().enumerate() {
            let u = j as f64 * dt;
            if u >= *loc {
                *o += g.at(u - loc) * w;
            }
        }
    }
    if !eta.densities().is_empty() {
        let dens = eta.density_samples(dt, len)?;
        let full = conv::convolve_matrices(g.values(), &dens);
        for j in 1..len {
            let ends = (&g.values()[j] * &dens[0] + &g.values()[0] * &dens[j]) * 0.5;
            out[j] += (&full[j] - ends) * dt;
        }
    }
    Ok(out)
}

/// `(max_t |g(t) − I − ∫_0^t g∗η|, |∫ g∗η + I|)`, integrals by trapezoid.
pub fn kernel_measure_residual(g: &SampledKernel, eta: &DelayMeasure) -> Result<(f64, f64)> {
    let n = eta.dim();
    let dens = kernel_measure_density(g, eta)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut cum = DMatrix::<f64>::zeros(n, n);
    let mut eq: f64 = linalg::max_abs(&(&g.values()[0] - &eye));
    for j in 1..dens.len() {
        cum += (&dens[j - 1] + &dens[j]) * (0.5 * g.dt());
        eq = eq.max(linalg::max_abs(&(&g.values()[j] - &eye - &cum)));
    }
    Ok((eq, linalg::max_abs(&(cum + eye))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn carma21_eta() -> DelayMeasure {
        // −2δ₀ + e^{−2u} du
        DelayMeasure::atom_only(1, 0.0, s(-2.0))
            .unwrap()
            .with_density(Density::MatrixExp { left: s(1.0), generator: s(-2.0), right: s(1.0) })
            .unwrap()
    }

    #[test]
    fn eval_h_examples() {
        let ou = DelayMeasure::atom_only(1, 0.0, s(-3.0)).unwrap();
        let z = c(0.3, -1.2);
        assert!((ou.eval_h(z).unwrap()[(0, 0)] - (-z + 3.0)).norm() < 1e-15);

        let delayed = DelayMeasure::atom_only(1, 1.0, s(1.0)).unwrap();
        let y = 0.7;
        let expect = c(0.0, -y) - c(0.0, y).exp();
        assert!((delayed.eval_h(c(0.0, y)).unwrap()[(0, 0)] - expect).norm() < 1e-15);

        assert!((carma21_eta().eval_h(c(0.0, 0.0)).unwrap()[(0, 0)] - 1.5).norm() < 1e-14);
    }

    #[test]
    fn eval_h_rejects_outside_strip() {
        assert!(carma21_eta().eval_h(c(2.5, 0.0)).is_err());
    }

    #[test]
    fn sampled_density_transform_is_exact_for_linear_pieces() {
        // density 1 on [0, 1] sampled at dt = 0.25: L(z) = (e^z − 1)/z exactly
        let vals = vec![s(1.0); 5];
        let eta = DelayMeasure::zero(1).with_density(Density::Sampled { dt: 0.25, values: vals }).unwrap();
        for z in [c(0.0, 3.0), c(-0.5, 10.0), c(0.0, 1e-3)] {
            let got = eta.laplace(z).unwrap()[(0, 0)];
            let expect = (z.exp() - 1.0) / z;
            assert!((got - expect).norm() < 1e-12, "{got} vs {expect}");
        }
        assert!((eta.laplace(c(0.0, 0.0)).unwrap()[(0, 0)] - 1.0).norm() < 1e-15);
    }

    #[test]
    fn nest_examples() {
        let w0 = DelayMeasure::atom_only(1, 0.0, s(-3.0)).unwrap();
        let single = HigherOrderSdde::new(vec![w0.clone()]).unwrap();
        assert_eq!(single.nest(), w0);

        let w1 = DelayMeasure::atom_only(1, 0.0, s(-4.0)).unwrap();
        let sys = HigherOrderSdde::new(vec![w0, w1]).unwrap();
        let eta = sys.nest();
        assert_eq!(eta.dim(), 2);
        let total = eta.atom_at_zero();
        assert_eq!(total, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -3.0, -4.0]));

        let z = c(0.0, 1.0);
        let (lhs, rhs) = det_reduction_check(&sys, z).unwrap();
        assert!((rhs - c(2.0, -4.0)).norm() < 1e-14);
        assert!((lhs - rhs).norm() < 1e-14);
        let (lhs, rhs) = det_reduction_check(&sys, c(1.0, 1.0)).unwrap();
        assert!((lhs - rhs).norm() <= 1e-8 * (1.0 + rhs.norm()));
    }

    #[test]
    fn ou_kernel_fft() {
        let eta = DelayMeasure::atom_only(1, 0.0, s(-2.0)).unwrap();
        let dt = 1.0 / 256.0;
        let out = kernel_fft(&eta, dt, 1 << 16).unwrap();
        let k = &out.kernel;
        let mut err: f64 = 0.0;
        for j in 0..=(10.0 / dt) as usize {
            let t = j as f64 * dt;
            err = err.max((k.values()[j][(0, 0)] - (-2.0 * t).exp()).abs());
        }
        assert!(err < 1e-4, "err {err}");
        assert!(out.negative_time_max < 1e-6);
        assert!(out.negative_mass_ratio < 1e-5);
    }

    #[test]
    fn carma21_kernel_fft_matches_closed_form() {
        let dt = 1.0 / 256.0;
        let out = kernel_fft(&carma21_eta(), dt, 1 << 16).unwrap();
        let mut err: f64 = 0.0;
        for j in 0..=(20.0 / dt) as usize {
            let t = j as f64 * dt;
            let g = 0.5 * (-t).exp() + 0.5 * (-3.0 * t).exp();
            err = err.max((out.kernel.values()[j][(0, 0)] - g).abs());
        }
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn fourier_roundtrip_on_interior_frequencies() {
        let eta = carma21_eta();
        let dt = 1.0 / 256.0;
        let out = kernel_fft(&eta, dt, 1 << 16).unwrap();
        let g = out.kernel.entry_series(0, 0);
        let w = linalg::fd_weights(0.0, &[0.0, dt, 2.0 * dt, 3.0 * dt, 4.0 * dt], 1);
        let slope0: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
        for y in [0.0, 0.5, 2.0, 7.0, 20.0] {
            // trapezoid from 0⁺ plus the Euler–Maclaurin end correction
            let mut acc = c(0.5 * g[0], 0.0) * dt;
            for (j, v) in g.iter().enumerate().skip(1) {
                acc += c(0.0, y * j as f64 * dt).exp() * (*v * dt);
            }
            acc += (c(0.0, y) * g[0] + slope0) * (dt * dt / 12.0);
            let inv = 1.0 / eta.eval_h(c(0.0, y)).unwrap()[(0, 0)];
            assert!((acc - inv).norm() / inv.norm() < 1e-6, "y={y}: {}", (acc - inv).norm() / inv.norm());
        }
    }

    #[test]
    fn kernel_measure_residuals_ou_and_carma21() {
        let dt = 1.0 / 256.0;
        let ou = DelayMeasure::atom_only(1, 0.0, s(-2.0)).unwrap();
        let g = kernel_fft(&ou, dt, 1 << 16).unwrap().kernel.truncated(40.0);
        let (eq, sum) = kernel_measure_residual(&g, &ou).unwrap();
        assert!(eq < 1e-3 && sum < 1e-3, "{eq} {sum}");

        let eta = carma21_eta();
        let g = kernel_fft(&eta, dt, 1 << 16).unwrap().kernel.truncated(40.0);
        let (eq, sum) = kernel_measure_residual(&g, &eta).unwrap();
        assert!(eq < 1e-3 && sum < 1e-3, "{eq} {sum}");
    }

    #[test]
    fn ou_residual_shrinks_with_horizon() {
        let dt = 1.0 / 64.0;
        let ou = DelayMeasure::atom_only(1, 0.0, s(-0.1)).unwrap();
        let full = kernel_fft(&ou, dt, 1 << 15).unwrap().kernel;
        let sums: Vec<f64> = [20.0, 40.0, 80.0]
            .iter()
            .map(|&t| kernel_measure_residual(&full.truncated(t), &ou).unwrap().1)
            .collect();
        assert!(sums[0] > sums[1] && sums[1] > sums[2], "{sums:?}");
    }

    #[test]
    fn delayed_atom_kernel_is_causal() {
        // dX = (−2X_t + 0.5X_{t−1}) dt + dZ
        let eta = DelayMeasure::atom_only(1, 0.0, s(-2.0)).unwrap().with_atom(1.0, s(0.5)).unwrap();
        let out = kernel_fft(&eta, 1.0 / 128.0, 1 << 15).unwrap();
        assert!(out.negative_mass_ratio < 1e-5);
        // on [0,1) the delayed atom is inactive: g = e^{−2t}
        for j in 0..128 {
            let t = j as f64 / 128.0;
            assert!((out.kernel.values()[j][(0, 0)] - (-2.0 * t).exp()).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_measure_is_singular() {
        let eta = DelayMeasure::zero(1);
        assert!(matches!(kernel_fft(&eta, 0.01, 1024), Err(Error::Hypothesis { .. })));
    }
}
