use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use carma_sdde::drivers::generate;
use carma_sdde::engine::{self, levy_noise_samples, PredictOptions, RecoverOptions};
use carma_sdde::io;
use carma_sdde::matpoly::MatrixPoly;
use carma_sdde::msdde::kernel_fft;
use carma_sdde::stability::{default_scan_grid, halfplane_check, msdde_char_scan, HalfPlaneReport, DEFAULT_SCAN_POINTS};
use carma_sdde::{CarmaModel, DriverPath, DriverSpec, Horizon, NoiseMean, SampledPath};
use nalgebra::{DMatrix, DVector};

use crate::config::{RunConfig, DEFAULT_FFT_DT, DEFAULT_FFT_N, DEFAULT_HORIZON};
use crate::CliError;

fn report(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::Io(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn open(path: &str) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Io(format!("{path}: {e}")))
}

/// Reproducibility header: command, seed, grid step, sample count, truncation
/// horizon and the full configuration.
fn header(command: &str, cfg: &RunConfig, dt: f64, count: usize, horizon: f64) -> Vec<String> {
    let mut lines = vec![
        format!("carma-sdde {command}"),
        format!("seed = {}", cfg.seed()),
        format!("dt = {dt}"),
        format!("N = {count}"),
        format!("T = {horizon}"),
        "config:".to_string(),
    ];
    lines.extend(cfg.to_toml().lines().map(|l| format!("  {l}")));
    lines
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    if m.len() == 1 {
        return format!("{}", m[0]);
    }
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("[{}]", r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn describe(r: &HalfPlaneReport) -> String {
    format!("max Re(root) = {:.6e}, distance to imaginary axis = {:.6e}", r.max_real_part, r.margin)
}

/// Prints the root-location reports for `P` and `Q`, the `det h(iy)` scan
/// and the derived coefficients. Fails with a hypothesis error naming the
/// violated condition.
pub fn check(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let n = cfg.model.n;
    let p_poly = MatrixPoly::monic(n, &cfg.a_matrices())?;
    let b_desc: Vec<DMatrix<f64>> = cfg.b_matrices().into_iter().rev().collect();
    let q_poly = MatrixPoly::monic(n, &b_desc)?;
    report(out, format!("model: n = {n}, p = {}, q = {}", cfg.model.p, cfg.model.q))?;

    let p_rep = halfplane_check(&p_poly)?;
    let mut violated = Vec::new();
    if p_rep.pass {
        report(out, format!("P (causality): pass, {}", describe(&p_rep)))?;
    } else {
        report(out, format!("P (causality): FAIL, {}", describe(&p_rep)))?;
        violated.push("causality: det P(z) vanishes on the closed right half-plane");
    }
    if cfg.model.q == 0 {
        report(out, "Q (invertibility): not applicable (q = 0)")?;
    } else {
        let q_rep = halfplane_check(&q_poly)?;
        if q_rep.pass {
            report(out, format!("Q (invertibility): pass, {}", describe(&q_rep)))?;
        } else {
            report(out, format!("Q (invertibility): FAIL, {}", describe(&q_rep)))?;
            violated.push("invertibility: det Q(z) vanishes on the closed right half-plane");
        }
    }
    if !violated.is_empty() {
        for v in &violated {
            report(out, format!("hypothesis violated: {v}"))?;
        }
        return Err(CliError::Model(carma_sdde::Error::Hypothesis { module: "cli", detail: violated.join("; ") }));
    }

    let model = cfg.model()?;
    let eta = model.to_higher_order()?.nest();
    let grid = default_scan_grid(eta.spectral_scale()?, DEFAULT_SCAN_POINTS);
    let (min_det, argmin) = msdde_char_scan(&eta, &grid)?;
    report(out, format!("det h(iy) scan: min |det h(iy)| = {min_det:.6e} at y = {argmin:.6}"))?;
    for (j, c) in model.c_coeffs().iter().enumerate() {
        report(out, format!("C_{j} = {}", fmt_matrix(c)))?;
    }
    for (i, e) in model.e_coeffs().iter().enumerate() {
        report(out, format!("E_{} = {}", i + 1, fmt_matrix(e)))?;
    }
    for (i, f) in model.f_coeffs().iter().enumerate() {
        report(out, format!("F_{} = {}", i + 1, fmt_matrix(f)))?;
    }
    report(out, format!("decay rate = {}", model.decay_rate()))?;
    report(out, format!("truncation horizon (tol {:e}) = {}", cfg.tol(), model.truncation_horizon(cfg.tol())?))?;
    report(out, "all hypotheses hold")?;
    Ok(())
}

/// Default stem of output files when `task.output` is absent.
pub const DEFAULT_OUTPUT_STEM: &str = "carma-sdde";

fn output_path(cfg: &RunConfig, suffix: &str) -> PathBuf {
    with_suffix(Path::new(cfg.task.output.as_deref().unwrap_or(DEFAULT_OUTPUT_STEM)), suffix)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Samples `g̃`, `f` and `g̃_j` on `[0, T]` and, with `method = "fft"`, the
/// FFT kernel of the delay representation.
pub fn kernel(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model()?;
    let dt = cfg.grid.as_ref().map(|g| g.dt).unwrap_or(DEFAULT_FFT_DT);
    let horizon = model.truncation_horizon(cfg.tol())?;
    let len = (horizon / dt).ceil() as usize + 1;
    let head = header("kernel", cfg, dt, len, horizon);
    let mut files = Vec::new();

    let mut emit = |name: &str, suffix: &str, k: &carma_sdde::SampledKernel| -> Result<(), CliError> {
        let path = output_path(cfg, suffix);
        io::write_kernel(create(&path)?, name, k, &head)?;
        files.push(path);
        Ok(())
    };
    emit("g", ".gtilde.csv", &model.sample_gtilde(dt, len)?)?;
    if let Some(f) = model.sample_f(dt, len)? {
        emit("f", ".f.csv", &f)?;
    }
    for j in 1..=model.order() {
        emit(&format!("g{j}"), &format!(".gtilde_j{j}.csv"), &model.sample_gtilde_j(j, dt, len)?)?;
    }
    if cfg.task.method.as_deref() == Some("fft") {
        let fft_dt = cfg.task.fft_dt.unwrap_or(dt);
        let n_fft = cfg.task.fft_n.unwrap_or(DEFAULT_FFT_N);
        let eta = model.to_higher_order()?.nest();
        let res = kernel_fft(&eta, fft_dt, n_fft)?;
        report(
            out,
            format!(
                "fft kernel: negative-time max = {:.3e}, negative mass ratio = {:.3e}, min |det h| = {:.3e}",
                res.negative_time_max, res.negative_mass_ratio, res.min_abs_det
            ),
        )?;
        let fft_len = ((horizon / fft_dt).ceil() as usize + 1).min(res.kernel.len());
        let trimmed = res.kernel.truncated((fft_len - 1) as f64 * fft_dt);
        let path = output_path(cfg, ".fft.csv");
        io::write_kernel(create(&path)?, "g", &trimmed, &header("kernel", cfg, fft_dt, n_fft, horizon))?;
        files.push(path);
    }
    report(out, format!("truncation horizon T = {horizon}, dt = {dt}, samples = {len}"))?;
    for f in &files {
        report(out, format!("wrote {}", f.display()))?;
    }
    Ok(files)
}

/// A simulated path with the driver increments aligned to its grid.
pub struct Simulation {
    pub path: SampledPath,
    pub driver: DriverPath,
    pub burn_in: f64,
    pub method: &'static str,
}

pub fn simulate_path(cfg: &RunConfig, model: &CarmaModel) -> Result<Simulation, CliError> {
    let spec = cfg.driver_spec()?;
    let grid = cfg.grid()?;
    let dt = grid.dt;
    let horizon = model.truncation_horizon(cfg.tol())?;
    let burn_in = grid.burn_in.unwrap_or((horizon / dt).ceil() * dt);
    let b = (burn_in / dt).round() as usize;
    let method = match cfg.task.method.as_deref() {
        Some("statespace") => "statespace",
        Some("ma") => "ma",
        None | Some("carma") | Some("msdde") | Some("closed_form") | Some("fft") => {
            if matches!(spec, DriverSpec::Brownian { .. }) {
                "statespace"
            } else {
                "ma"
            }
        }
        Some(other) => return Err(CliError::Config(format!("task.method: {other:?} is not a simulation method"))),
    };
    let driver = generate(&spec, grid.t0 - b as f64 * dt, dt, b + grid.steps, cfg.seed(), 0)?;
    let path = match method {
        "statespace" => engine::simulate_statespace(model, &driver, b as f64 * dt)?,
        _ => {
            let len = ((horizon / dt).ceil() as usize + 1).min(b + 1);
            let kernel = model.sample_gtilde(dt, len)?;
            engine::simulate_ma(&kernel, &driver, b as f64 * dt)?
        }
    };
    let aligned = DriverPath {
        t0: grid.t0,
        increments: driver.increments.rows(b, grid.steps).into_owned(),
        ..driver
    };
    Ok(Simulation { path, driver: aligned, burn_in: b as f64 * dt, method })
}

pub fn simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model()?;
    let sim = simulate_path(cfg, &model)?;
    let grid = cfg.grid()?;
    let head = header("simulate", cfg, grid.dt, grid.steps, sim.burn_in);
    let path = output_path(cfg, ".path.csv");
    io::write_path(create(&path)?, &sim.path, &head)?;
    let dp = output_path(cfg, ".driver.csv");
    io::write_driver(create(&dp)?, &sim.driver, &head)?;
    let files = vec![path, dp];
    report(out, format!("method = {}, burn-in = {}, samples = {}", sim.method, sim.burn_in, sim.path.len()))?;
    for f in &files {
        report(out, format!("wrote {}", f.display()))?;
    }
    Ok(files)
}

fn observed_path(cfg: &RunConfig, model: &CarmaModel) -> Result<(SampledPath, Option<DriverPath>), CliError> {
    match &cfg.task.input {
        Some(input) => {
            let path = io::read_path(open(input)?, cfg.model.n)?;
            let truth = match &cfg.task.driver_input {
                Some(d) => Some(io::read_driver(open(d)?, cfg.model.n)?),
                None => None,
            };
            Ok((path, truth))
        }
        None => {
            let sim = simulate_path(cfg, model)?;
            Ok((sim.path, Some(sim.driver)))
        }
    }
}

/// Recovers the driver increments of an observed (or freshly simulated)
/// path and, when the true increments are known, reports the roundtrip error.
pub fn recover(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model()?;
    let (path, truth) = observed_path(cfg, &model)?;
    let opts = RecoverOptions { tol: cfg.tol(), max_amplification: cfg.max_amplification() };
    let rec = engine::recover_noise(&model, &path, &opts)?;
    let t_f = if model.q() > 0 { model.truncation_horizon(cfg.tol())? } else { 0.0 };
    let first = rec.first_valid();
    report(
        out,
        format!(
            "recovered {} steps, {} valid, first valid t = {}",
            rec.valid.len(),
            rec.valid.iter().filter(|v| **v).count(),
            first.map(|k| format!("{}", path.time(k))).unwrap_or_else(|| "none".into())
        ),
    )?;
    if let (Some(truth), Some(first)) = (truth, first) {
        let offset = ((path.t0 - truth.t0) / path.dt).round();
        if offset >= 0.0 && (truth.dt - path.dt).abs() <= 1e-12 * path.dt {
            let offset = offset as usize;
            let stop = rec.path.steps().min(truth.steps().saturating_sub(offset));
            for j in 0..cfg.model.n {
                let est: Vec<f64> = (first..stop).map(|k| rec.path.increments[(k, j)]).collect();
                let tru: Vec<f64> = (first..stop).map(|k| truth.increments[(offset + k, j)]).collect();
                if est.len() > 2 {
                    let (rmse, corr) = roundtrip_stats(&est, &tru);
                    report(out, format!("component {}: normalized RMSE = {rmse:.6}, correlation = {corr:.6}", j + 1))?;
                }
            }
        }
    }
    let head = header("recover", cfg, path.dt, rec.valid.len(), t_f);
    let dest = output_path(cfg, ".increments.csv");
    io::write_recovered(create(&dest)?, &rec, &head)?;
    report(out, format!("wrote {}", dest.display()))?;
    Ok(vec![dest])
}

/// Normalized RMSE `‖est − truth‖/std(truth)` and the correlation.
pub fn roundtrip_stats(est: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = est.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (me, mt) = (mean(est), mean(truth));
    let var_t = truth.iter().map(|t| (t - mt).powi(2)).sum::<f64>() / n;
    let var_e = est.iter().map(|e| (e - me).powi(2)).sum::<f64>() / n;
    let cov = est.iter().zip(truth).map(|(e, t)| (e - me) * (t - mt)).sum::<f64>() / n;
    let mse = est.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / n;
    ((mse / var_t).sqrt(), cov / (var_e * var_t).sqrt())
}

/// Conditional mean on `[s, s + horizon]`, `s` the end of the observed path.
pub fn predict(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let model = cfg.model()?;
    let n = model.dim();
    let (history, _) = observed_path(cfg, &model)?;
    let step = cfg.task.horizon_step.unwrap_or(history.dt);
    let span = cfg.task.horizon.unwrap_or(DEFAULT_HORIZON);
    let count = (span / step).round() as usize;
    let hz = Horizon { step, count };
    let opts = PredictOptions { tol: cfg.tol(), max_amplification: cfg.max_amplification() };
    let zhat = match &cfg.task.zhat_input {
        Some(f) => Some(io::read_vectors(open(f)?, n)?.1),
        None => None,
    };
    let mean_rate = match &cfg.driver {
        Some(_) => cfg.driver_spec()?.mean_rate(),
        None => DVector::zeros(n),
    };
    let method = cfg.task.method.as_deref().unwrap_or("carma");
    let res = match method {
        "carma" | "statespace" | "ma" | "closed_form" | "fft" => {
            let noise = match zhat {
                Some(z) => NoiseMean::Samples(z),
                None => NoiseMean::MeanRate(mean_rate),
            };
            engine::predict(&model, &history, hz, &noise, &opts)?
        }
        _ => {
            if (step - history.dt).abs() > 1e-12 * step {
                return Err(CliError::Config("task.horizon_step: the msdde predictor runs on the path grid".into()));
            }
            let eta = model.to_higher_order()?.nest();
            let d = eta.dim();
            let n_fft = cfg.task.fft_n.unwrap_or(DEFAULT_FFT_N);
            let fft = kernel_fft(&eta, history.dt, n_fft)?;
            if fft.kernel.len() < count + 1 {
                return Err(CliError::Config(format!("task.fft_n: kernel covers {} steps, horizon needs {}", fft.kernel.len(), count + 1)));
            }
            let z = zhat.unwrap_or_else(|| levy_noise_samples(&mean_rate, hz));
            if z.len() != count + 1 {
                return Err(CliError::Config(format!("task.zhat_input: expected {} rows, got {}", count + 1, z.len())));
            }
            // the noise drives the highest derivative block
            let embedded: Vec<DVector<f64>> = z
                .iter()
                .map(|v| {
                    let mut e = DVector::zeros(d);
                    e.rows_mut(d - n, n).copy_from(v);
                    e
                })
                .collect();
            let full = engine::predict_msdde(&eta, &fft.kernel, &history, Some(&embedded), count, &opts)?;
            let cut = |m: &DMatrix<f64>| m.columns(0, n).into_owned();
            carma_sdde::PredictionResult {
                s: full.s,
                times: full.times.clone(),
                mean: cut(&full.mean),
                term1: cut(&full.term1),
                term2: cut(&full.term2),
                term3: cut(&full.term3),
            }
        }
    };
    let t_f = if model.q() > 0 { model.truncation_horizon(cfg.tol())? } else { 0.0 };
    let head = header("predict", cfg, step, count + 1, t_f);
    let dest = output_path(cfg, ".prediction.csv");
    io::write_prediction(create(&dest)?, &res, &head)?;
    report(out, format!("s = {}, horizon = {} steps of {step}", res.s, count))?;
    report(out, format!("wrote {}", dest.display()))?;
    Ok(vec![dest])
}
