//! One driver per subcommand. Each returns CSV tables and checks tagged with their acceptance
//! criterion; the flat cone always runs next to the configured metric.

use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use super::config::{Config, RegimeConfig};
use super::persist::{num, Check, CsvTable};
use super::{ExperimentOutput, HarnessError};
use crate::dynamics::{
    band_gaussian, contraction_sweep, dispersive_fit, nls_picard, scattering_detect, strichartz_experiment, sup_norm,
    Cutoff, DataGenerator, Evolution, NlsConfig,
};
use crate::flow::{
    integrate_flow, principal_symbol, sample_region, scattering_map, ConicRegion, Direction, Flow, PhasePoint,
    RegionKind,
};
use crate::geometry::{normal_form_step, ChartMetric2D, NormalFormOptions, RadialCoefficient, WarpedMetric};
use crate::numerics::fit::power_law_fit;
use crate::oscillatory::{
    bump_amplitude, dispersive_scan, nonstationary_scan, write_samples_csv, DispersiveScan, FioKernelSpec,
    KernelSample, NonstationaryScan, QuadSpec, Regime,
};
use crate::phase::{
    build_eikonal, check_eikonal_expansions, solve_transport, transport_decay_fit, wkb_phase, EikonalOptions,
    EikonalTable, ExpansionSweep, GridSpec, ThetaDomain, TransportOptions, WkbGrid,
};
use crate::spectral::{
    build_mode_operator_windowed, band_product_norm, continuum_resolvent_norm, f0, flat_eigenvalue_errors,
    halving_order, lp_band, lp_inequality_probe, lp_reconstruct, mass_radius, random_band_state, resolvent_probe,
    smoothing_probe, sobolev_extremizer, sobolev_probe, sobolev_sharp_constant, BandDirection, DyadicBand,
    FieldState, ModeFamily, Placement, Weight, INTEGRATED_TAIL,
};
use crate::C64;

fn chart_metrics(cfg: &Config) -> Result<Vec<(String, ChartMetric2D<f64>)>, HarnessError> {
    let mut v = vec![("flat".to_string(), ChartMetric2D::flat())];
    if !cfg.metric.is_flat() {
        v.push((cfg.metric.label(), cfg.metric.chart()?));
    }
    Ok(v)
}

fn warped_metrics(cfg: &Config) -> Result<Vec<(String, WarpedMetric<f64>)>, HarnessError> {
    let mut v = vec![("flat".to_string(), WarpedMetric::flat(cfg.metric.n))];
    if !cfg.metric.is_flat() {
        v.push((cfg.metric.label(), cfg.metric.warped()?));
    }
    Ok(v)
}

fn tag(metric: &str) -> &'static str {
    if metric == "flat" {
        "flat"
    } else {
        "perturbed"
    }
}

fn le(x: f64, bound: f64) -> (bool, String, String) {
    let b = format!("{bound:e}");
    let b = if b.len() > 8 { format!("{bound:.3e}") } else { b };
    (x <= bound, format!("{x:.4e}"), format!("<= {b}"))
}

fn check_le(id: &str, crit: Option<u8>, metric: &str, x: f64, bound: f64) -> Check {
    let (p, o, r) = le(x, bound);
    Check::new(id, crit, metric, p, o, r)
}

fn direction(s: &str) -> Result<Direction, HarnessError> {
    match s {
        "outgoing" => Ok(Direction::Outgoing),
        "incoming" => Ok(Direction::Incoming),
        other => Err(HarnessError::Invalid(format!("direction {other:?} (outgoing or incoming)"))),
    }
}

fn cartesian(p: &PhasePoint<f64>) -> ([f64; 2], [f64; 2]) {
    let (s, c) = p.theta.sin_cos();
    let x = [p.r * c, p.r * s];
    let w = p.eta / p.r;
    let xi = [p.rho * c - w * s, p.rho * s + w * c];
    (x, xi)
}

/// Relative distance of the flow end point from x₀ + 2sξ₀, ξ₀ in Cartesian coordinates.
fn straight_line_error(p: &PhasePoint<f64>, s: f64, q: &PhasePoint<f64>) -> f64 {
    let (x0, xi0) = cartesian(p);
    let x = [x0[0] + 2.0 * s * xi0[0], x0[1] + 2.0 * s * xi0[1]];
    let (xq, xiq) = cartesian(q);
    let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]) / b[0].hypot(b[1]);
    d(xq, x).max(d(xiq, xi0))
}

pub fn flow(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.flow;
    let mut out = ExperimentOutput::default();
    let flat = ChartMetric2D::flat();
    let region = ConicRegion {
        kind: RegionKind::StronglyOutgoing,
        r_min: c.r_min,
        angles: c.angles,
        energies: c.energies,
        param: c.strength,
        eps_scale: 1.0,
    };
    let clock = Instant::now();
    let pts = sample_region(&region, &flat, c.samples, cfg.seed, c.r_span);
    let horizon = |m: &ChartMetric2D<f64>, p: &PhasePoint<f64>| c.horizon * p.r / principal_symbol(m, p, 1.0).sqrt();
    let res: Vec<(f64, PhasePoint<f64>, f64)> = pts
        .par_iter()
        .map(|p| {
            let s = horizon(&flat, p);
            let q = integrate_flow(&flat, p, s, c.tol)?;
            Ok((s, q, straight_line_error(p, s, &q)))
        })
        .collect::<Result<_, HarnessError>>()?;
    let elapsed = clock.elapsed().as_secs_f64();
    let mut t = CsvTable::new(
        "flow_oracle.csv",
        &["r", "theta", "rho", "eta", "s", "r_s", "theta_s", "rho_s", "eta_s", "rel_error"],
    );
    for (p, (s, q, e)) in pts.iter().zip(&res) {
        t.push([p.r, p.theta, p.rho, p.eta, *s, q.r, q.theta, q.rho, q.eta, *e].map(num).to_vec());
    }
    out.tables.push(t);
    let worst = res.iter().map(|x| x.2).fold(0.0, f64::max);
    out.checks.push(
        check_le("straight_line_oracle", Some(1), "flat", worst, c.oracle_tol)
            .detail(format!("{} samples in the strongly outgoing region", pts.len())),
    );
    out.checks.push(check_le("oracle_runtime_seconds", Some(1), "flat", elapsed, 5.0));

    let mut traj = CsvTable::new("trajectories.csv", &["metric", "sample", "s", "r", "theta", "rho", "eta", "symbol"]);
    let mut drifts = Vec::new();
    for (name, m) in chart_metrics(cfg)? {
        let f = Flow::new(&m).with_tol(c.tol);
        let mut drift = 0.0f64;
        let mut bound = 0.0f64;
        for (k, p) in pts.iter().take(c.trajectory_samples).enumerate() {
            let s_end = horizon(&m, p);
            let p0 = f.symbol(p);
            for (s, q) in f.trajectory(p, s_end)? {
                let sym = f.symbol(&q);
                drift = drift.max((sym - p0).abs());
                traj.push(vec![
                    name.clone(),
                    k.to_string(),
                    num(s),
                    num(q.r),
                    num(q.theta),
                    num(q.rho),
                    num(q.eta),
                    num(sym),
                ]);
            }
            bound = bound.max(10.0 * c.tol * s_end.abs().max(1.0) * p0.max(1.0));
        }
        drifts.push(json!({"metric": name, "drift": drift}));
        out.checks.push(check_le("energy_conservation", None, &name, drift, bound));
    }
    out.tables.push(traj);
    out.observed = json!({"max_rel_error": worst, "runtime_seconds": elapsed, "energy_drift": drifts});
    Ok(out)
}

pub fn scatter_map(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.scatter_map;
    let mut out = ExperimentOutput::default();
    let flat = ChartMetric2D::flat();
    let region = ConicRegion {
        kind: RegionKind::StronglyOutgoing,
        r_min: c.r_min,
        angles: c.angles,
        energies: c.energies,
        param: c.strength,
        eps_scale: 1.0,
    };
    let pts = sample_region(&region, &flat, c.samples, cfg.seed.wrapping_add(1), c.r_span);
    let res: Vec<_> = pts
        .par_iter()
        .map(|p| {
            let d = scattering_map(&flat, p, Direction::Outgoing, c.tol)?;
            let xi = principal_symbol(&flat, p, 1.0).sqrt();
            let oracle = [p.r * p.rho / xi, p.theta + (p.eta / p.r).atan2(p.rho), xi, p.eta];
            let got = [d.r_bar, d.theta_bar, d.rho_bar, d.eta_bar];
            let err = got
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                .fold(0.0, f64::max);
            Ok((d, err))
        })
        .collect::<Result<_, HarnessError>>()?;
    let mut t = CsvTable::new(
        "scattering_flat.csv",
        &["r", "theta", "rho", "eta", "r_bar", "theta_bar", "rho_bar", "eta_bar", "extrapolation_error", "oracle_error"],
    );
    for (p, (d, e)) in pts.iter().zip(&res) {
        t.push(
            [p.r, p.theta, p.rho, p.eta, d.r_bar, d.theta_bar, d.rho_bar, d.eta_bar, d.extrapolation_error, *e]
                .map(num)
                .to_vec(),
        );
    }
    out.tables.push(t);
    let worst = res.iter().map(|x| x.1).fold(0.0, f64::max);
    out.checks.push(
        check_le("flat_oracle", Some(2), "flat", worst, c.oracle_tol)
            .detail("(x₀·ξ/|ξ|, arg ξ, |ξ|, η) after Richardson extrapolation"),
    );

    let mut radial_rows = CsvTable::new("radial_line.csv", &["metric", "r", "theta", "rho", "r_bar", "theta_bar", "rho_bar", "eta_bar"]);
    let mut sym = Vec::new();
    for (name, m) in chart_metrics(cfg)? {
        let mut exact = true;
        for p in pts.iter().take(20) {
            let q = PhasePoint::new(p.r, p.theta, p.rho.abs().max(0.1), 0.0);
            let d = scattering_map(&m, &q, Direction::Outgoing, c.tol)?;
            exact &= (d.r_bar, d.theta_bar, d.rho_bar, d.eta_bar) == (q.r, q.theta, q.rho, 0.0);
            radial_rows.push(vec![
                name.clone(),
                num(q.r),
                num(q.theta),
                num(q.rho),
                num(d.r_bar),
                num(d.theta_bar),
                num(d.rho_bar),
                num(d.eta_bar),
            ]);
        }
        out.checks.push(Check::new(
            "eta_zero_line_exact",
            Some(2),
            &name,
            exact,
            if exact { "exact".into() } else { "inexact".into() },
            "(r, θ, ρ, 0) returned bit-for-bit".into(),
        ));
        let mut worst_sym = 0.0f64;
        for p in pts.iter().take(20) {
            let plus = scattering_map(&m, p, Direction::Outgoing, c.tol)?;
            let minus = scattering_map(&m, &p.flipped(), Direction::Incoming, c.tol)?;
            worst_sym = worst_sym
                .max((plus.rho_bar + minus.rho_bar).abs())
                .max((plus.eta_bar + minus.eta_bar).abs())
                .max((plus.theta_bar - minus.theta_bar).abs())
                .max((plus.r_bar - minus.r_bar).abs() / plus.r_bar.abs().max(1.0));
        }
        sym.push(json!({"metric": name, "symmetry_defect": worst_sym}));
        out.checks.push(check_le("time_reversal_symmetry", None, &name, worst_sym, c.symmetry_tol));
    }
    out.tables.push(radial_rows);
    out.observed = json!({"max_oracle_error": worst, "symmetry": sym});
    Ok(out)
}

fn eikonal_csv(name: &str, t: &EikonalTable) -> Result<CsvTable, HarnessError> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut table = CsvTable {
        name: name.to_string(),
        header,
        rows: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HarnessError::Invalid(e.to_string()))?;
        table.rows.push(rec.iter().map(String::from).collect());
    }
    Ok(table)
}

pub fn eikonal(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.eikonal;
    let mut out = ExperimentOutput::default();
    let dom = ThetaDomain::new(c.r_min, c.angles, c.eps_sep, c.energies, direction(&c.direction)?)?;
    let grid = GridSpec {
        r_max: c.r_max,
        n_r: c.n_r,
        n_theta: c.n_theta,
        n_delta: c.n_delta,
    };
    let opts = EikonalOptions {
        circulation_tol: c.circulation_tol,
        ..EikonalOptions::default()
    };
    let sweep = ExpansionSweep {
        r_factor: c.r_factor,
        n_r: c.n_sweep,
        n_delta: c.n_delta_sweep,
        delta_fraction: c.delta_fraction,
        theta: None,
        zero_floor: c.zero_floor,
        order_tol: c.order_tol,
    };
    let mut fits = CsvTable::new(
        "expansion_fits.csv",
        &["metric", "quantity", "power", "expected_order", "exponent", "constant", "pass"],
    );
    let mut observed = Vec::new();
    for (name, m) in chart_metrics(cfg)? {
        let t = build_eikonal(&m, 1.0, &dom, &grid, &opts)?;
        let d = t.diagnostics;
        out.tables.push(eikonal_csv(&format!("eikonal_{}.csv", tag(&name)), &t)?);
        if m.is_flat() {
            let err = t
                .nodes()
                .enumerate()
                .map(|(n, (r, th, vt))| (t.psi[n] - r * (th - vt).cos()).abs())
                .fold(0.0, f64::max);
            out.checks.push(
                check_le("flat_psi_oracle", Some(3), &name, err, c.psi_tol)
                    .detail(format!("ψ = r cos(θ − ϑ) on {}×{}×{}", c.n_r, c.n_theta, c.n_delta)),
            );
        }
        out.checks.push(check_le("hamilton_jacobi_residual", Some(3), &name, d.hj_residual, c.hj_tol));
        out.checks.push(check_le("generating_identity_residual", Some(3), &name, d.identity_residual, c.identity_tol));
        let rep = check_eikonal_expansions(&t, &sweep)?;
        let mut dev = 0.0f64;
        for f in &rep.fits {
            if let Some(x) = &f.fit {
                dev = dev.max((x.exponent - f.expected_order).abs());
            }
            fits.push(vec![
                name.clone(),
                f.quantity.clone(),
                f.power.to_string(),
                num(f.expected_order),
                f.fit.as_ref().map_or("".into(), |x| num(x.exponent)),
                f.fit.as_ref().map_or("".into(), |x| num(x.constant)),
                f.pass.to_string(),
            ]);
        }
        let fitted = rep.fits.iter().filter(|f| f.fit.is_some()).count();
        out.checks.push(
            Check::new(
                "expansion_orders",
                if m.is_flat() { None } else { Some(4) },
                &name,
                rep.pass,
                format!("max |exponent − order| = {dev:.3}"),
                format!("<= {}", c.order_tol),
            )
            .detail(format!("{fitted} fitted terms, nu = {}", rep.nu)),
        );
        observed.push(json!({"metric": name, "diagnostics": d, "expansions": rep}));
    }
    if cfg.metric.is_flat() {
        out.checks.push(
            Check::new("expansion_orders", Some(4), "flat", true, "n/a".into(), "perturbed metric".into())
                .detail("every expansion term vanishes on the flat cone"),
        );
    }
    out.tables.push(fits);
    out.observed = json!(observed);
    Ok(out)
}

pub fn transport(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.transport;
    let mut out = ExperimentOutput::default();
    let dom = ThetaDomain::new(c.r_min, c.angles, c.eps_sep, c.energies, Direction::Outgoing)?;
    let grid = GridSpec {
        r_max: c.r_max,
        n_r: c.n_r,
        n_theta: c.n_theta,
        n_delta: c.n_delta,
    };
    let flat = build_eikonal(&ChartMetric2D::flat(), 1.0, &dom, &grid, &EikonalOptions::default())?;
    let opts = TransportOptions {
        dim: c.dim,
        ..TransportOptions::default()
    };
    let mut t = CsvTable::new("transport_flat.csv", &["r", "theta", "vartheta", "a0", "b_integral", "error"]);
    let mut worst = 0.0f64;
    for &(r, th, vt) in &c.oracle_points {
        let s = solve_transport(&flat, r, th, 1.0, vt, 1.0, None, &opts)?;
        worst = worst.max((s.value - 1.0).abs());
        t.push([r, th, vt, s.value, s.b_integral, s.error].map(num).to_vec());
    }
    out.tables.push(t);
    out.checks.push(check_le("flat_a0_is_one", Some(5), "flat", worst, c.oracle_tol).detail(format!("n = {}", c.dim)));

    if cfg.metric.is_flat() {
        out.checks.push(
            Check::new("b_decay_fit", Some(5), "flat", true, "n/a".into(), "perturbed metric".into())
                .detail("b ≡ 0 on the flat cone"),
        );
        out.observed = json!({"flat_max_error": worst});
        return Ok(out);
    }
    let mc = cfg.metric.with_nu(c.fit_nu);
    let m = mc.chart()?;
    let table = build_eikonal(&m, 1.0, &dom, &grid, &EikonalOptions::default())?;
    let rep = transport_decay_fit(&table, c.dim, c.fit_tol)?;
    let mut f = CsvTable::new("b_decay_fit.csv", &["fit", "exponent", "expected", "residual"]);
    f.push(vec!["s".into(), num(rep.s_fit.exponent), num(rep.expected_s_order), num(rep.s_fit.residual)]);
    if let Some(d) = &rep.r_fit_diagonal {
        f.push(vec!["r_diagonal".into(), num(d.exponent), num(rep.expected_r_order), num(d.residual)]);
    }
    f.push(vec![
        "r_oblique".into(),
        num(rep.r_fit_oblique.exponent),
        num(rep.expected_r_order),
        num(rep.r_fit_oblique.residual),
    ]);
    out.tables.push(f);
    out.checks.push(
        Check::new(
            "b_decay_fit",
            Some(5),
            &mc.label(),
            rep.pass,
            format!(
                "s {:.3}, r {:.3}",
                rep.s_fit.exponent, rep.r_fit_oblique.exponent
            ),
            format!("s {:.2}, r {:.2} within {}", rep.expected_s_order, rep.expected_r_order, c.fit_tol),
        )
        .detail(format!("n = {}", c.dim)),
    );
    out.observed = json!({"flat_max_error": worst, "decay": rep});
    Ok(out)
}

pub fn wkb(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.wkb;
    let mut out = ExperimentOutput::default();
    let grid = WkbGrid {
        theta: c.theta,
        n_r: c.n_r,
        n_theta: c.n_theta,
    };
    let mut t = CsvTable::new("wkb.csv", &["metric", "s", "max_residual", "constant", "min_det"]);
    let mut observed = Vec::new();
    for (name, m) in chart_metrics(cfg)? {
        let mut res = Vec::new();
        let mut worst_const = 0.0f64;
        let mut min_det = f64::INFINITY;
        for &s in &c.times {
            for sign in [1.0, -1.0] {
                let w = wkb_phase(&m, 1.0, c.radius, sign * s, &grid, c.momenta, c.tol)?;
                t.push(vec![name.clone(), num(sign * s), num(w.max_residual), num(w.constant), num(w.min_det)]);
                worst_const = worst_const.max(w.constant);
                min_det = min_det.min(w.min_det);
                if sign > 0.0 {
                    res.push(w.max_residual);
                }
            }
        }
        out.checks.push(Check::new(
            "short_time_diffeomorphism",
            None,
            &name,
            min_det > 0.0 && worst_const.is_finite(),
            format!("min det {min_det:.3}, max constant {worst_const:.3e}"),
            "det > 0, finite constant".into(),
        ));
        if m.is_flat() {
            let fit = power_law_fit(&c.times, &res)?;
            out.checks.push(Check::new(
                "residual_order",
                None,
                &name,
                (fit.exponent - c.order).abs() <= c.order_tol,
                format!("{:.3}", fit.exponent),
                format!("{} ± {}", c.order, c.order_tol),
            ));
        }
        observed.push(json!({"metric": name, "max_constant": worst_const, "min_det": min_det}));
    }
    out.tables.push(t);
    out.observed = json!(observed);
    Ok(out)
}

fn samples_csv(name: String, samples: &[KernelSample]) -> Result<CsvTable, HarnessError> {
    let mut buf = Vec::new();
    write_samples_csv(samples, &mut buf).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let header = rdr
        .headers()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut t = CsvTable {
        name,
        header,
        rows: Vec::new(),
    };
    for rec in rdr.records() {
        t.rows.push(rec.map_err(|e| HarnessError::Invalid(e.to_string()))?.iter().map(String::from).collect());
    }
    Ok(t)
}

fn nonstationary(rc: &RegimeConfig) -> NonstationaryScan {
    NonstationaryScan {
        h_ladder: rc.h_ladder.clone(),
        s: rc.s,
        r_prime: rc.r_prime,
        h_spatial: rc.h_spatial,
        r_prime_ladder: rc.r_prime_ladder.clone(),
        angular_offset: rc.angular_offset,
        envelope: rc.envelope,
        quad: QuadSpec::default(),
    }
}

pub fn oscillatory(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.oscillatory;
    let mut out = ExperimentOutput::default();
    let (run_disp, regimes): (bool, Vec<Regime>) = match c.regime.as_str() {
        "all" => (true, vec![Regime::RadialSep, Regime::AngularSep, Regime::Stationary]),
        "dispersive" => (true, vec![]),
        other => (false, vec![other.parse().map_err(HarnessError::Invalid)?]),
    };
    let dom = ThetaDomain::new(c.r_min, c.angles, c.eps_sep, c.energies, Direction::Outgoing)?;
    let grid = GridSpec {
        r_max: c.r_max,
        n_r: c.n_r,
        n_theta: c.n_theta,
        n_delta: c.n_delta,
    };
    let clock = Instant::now();
    let mut observed = Vec::new();
    for (name, m) in chart_metrics(cfg)? {
        let t = build_eikonal(&m, 1.0, &dom, &grid, &EikonalOptions::default())?;
        let tg = tag(&name);
        if run_disp {
            let h0 = c.h_ladder.first().copied().unwrap_or(0.25);
            let sp = FioKernelSpec::new(&t, &t, bump_amplitude(c.rho, c.vartheta), c.rho, c.vartheta, h0)?;
            let scan = DispersiveScan {
                h_ladder: c.h_ladder.clone(),
                s_over_h: c.s_over_h.clone(),
                r_prime: c.r_prime,
                jitter_points: c.jitter_points,
                seed: cfg.seed,
                large_ratio: c.large_ratio,
                tol: c.exponent_tol,
                quad: QuadSpec::default(),
            };
            let rep = dispersive_scan(&sp, &scan)?;
            out.tables.push(samples_csv(format!("dispersive_{tg}.csv"), &rep.samples)?);
            let e = rep.large_hs_fit.as_ref().map(|f| f.exponent);
            out.checks.push(
                Check::new(
                    "large_hs_exponent",
                    Some(6),
                    &name,
                    e.is_some_and(|e| (e - c.exponent).abs() <= c.exponent_tol),
                    e.map_or("no fit".into(), |e| format!("{e:.3}")),
                    format!("{} ± {}", c.exponent, c.exponent_tol),
                )
                .detail(format!(
                    "C = {:.3e}, small-s exponent {}, {} skipped, {} excluded",
                    rep.c_fit,
                    rep.small_s_fit.as_ref().map_or("n/a".into(), |f| format!("{:.3}", f.exponent)),
                    rep.skipped,
                    rep.excluded
                )),
            );
            observed.push(json!({"metric": name, "scan": "dispersive", "c_fit": rep.c_fit,
                "small_s_fit": rep.small_s_fit, "large_hs_fit": rep.large_hs_fit}));
        }
        for &reg in &regimes {
            let rc = if reg == Regime::AngularSep { &c.angular } else { &c.radial };
            let h0 = rc.h_ladder.first().copied().unwrap_or(0.25);
            let sp = FioKernelSpec::new(&t, &t, bump_amplitude(c.rho, rc.vartheta), c.rho, rc.vartheta, h0)?;
            let rep = nonstationary_scan(&sp, reg, &nonstationary(rc))?;
            let label = serde_json::to_value(reg).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            out.tables.push(samples_csv(format!("{label}_{tg}.csv"), &rep.samples)?);
            let hx = rep.h_fit.as_ref().map(|f| f.exponent);
            let sx = rep.spatial_fit.as_ref().map(|f| f.exponent);
            let fmt = |x: Option<f64>| x.map_or("no fit".into(), |e| format!("{e:.2}"));
            let (id, crit, required, pass) = match reg {
                Regime::Stationary => ("stationary_control", None, "h order >= 0".to_string(), hx.is_some_and(|e| e >= 0.0)),
                _ => (
                    if reg == Regime::RadialSep { "radial_nonstationary" } else { "angular_nonstationary" },
                    Some(6),
                    format!("h and spatial orders <= {}", c.order_bound),
                    hx.is_some_and(|e| e <= c.order_bound) && sx.is_some_and(|e| e <= c.order_bound),
                ),
            };
            out.checks.push(
                Check::new(id, crit, &name, pass, format!("h {}, spatial {}", fmt(hx), fmt(sx)), required)
                    .detail(format!("{} excluded", rep.excluded)),
            );
            observed.push(json!({"metric": name, "scan": label, "h_fit": rep.h_fit, "spatial_fit": rep.spatial_fit}));
        }
    }
    let elapsed = clock.elapsed().as_secs_f64();
    if run_disp || regimes.len() > 1 {
        out.checks.push(check_le("runtime_seconds", Some(6), "all", elapsed, 600.0));
    }
    out.observed = json!({"scans": observed, "runtime_seconds": elapsed});
    Ok(out)
}

pub fn lp_check(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.lp_check;
    let mut out = ExperimentOutput::default();
    let flat = WarpedMetric::flat(cfg.metric.n);
    let mut eig = CsvTable::new("flat_eigenvalues.csv", &["ell", "k", "lambda", "rel_error"]);
    let mut worst = [0.0f64; 2];
    for ell in 0..2 {
        let op = build_mode_operator_windowed(&flat, ell, c.oracle_r_max, c.oracle_dr, c.oracle_lambda_max)?;
        let errs = flat_eigenvalue_errors(&op, c.oracle_modes)?;
        for (k, e) in errs.iter().enumerate() {
            eig.push(vec![ell.to_string(), (k + 1).to_string(), num(op.eigenvalues()[k]), num(*e)]);
            worst[ell] = worst[ell].max(*e);
        }
    }
    out.tables.push(eig);
    out.checks.push(check_le("s_wave_dirichlet", Some(7), "flat", worst[0], c.s_wave_tol).detail("(kπ/R)², lowest modes"));
    out.checks.push(check_le("p_wave_bessel_zeros", Some(7), "flat", worst[1], c.p_wave_tol));
    let orders: Vec<f64> = (0..2)
        .map(|ell| halving_order(&flat, ell, c.oracle_r_max, c.halving_dr, c.oracle_modes))
        .collect::<Result<_, _>>()?;
    let ord = orders.iter().copied().fold(f64::INFINITY, f64::min);
    out.checks.push(Check::new(
        "halving_order",
        Some(7),
        "flat",
        ord >= c.halving_order,
        format!("{ord:.3}"),
        format!(">= {}", c.halving_order),
    ));

    let mut probes = CsvTable::new(
        "lp_probe.csv",
        &["metric", "seed", "lhs", "square_function", "correction", "rhs", "ratio"],
    );
    let mut observed = Vec::new();
    for (name, m) in warped_metrics(cfg)? {
        let fam = ModeFamily::build(&m, c.ell_max, c.r_max, c.dr, Some(c.lambda_max))?;
        let samples: Vec<f64> = fam.ops.iter().flat_map(|op| op.eigenvalues().iter().copied()).collect();
        let low = lp_reconstruct(&samples, BandDirection::Low, c.telescoping_terms);
        let high = lp_reconstruct(&samples, BandDirection::High, c.telescoping_terms);
        let tel = low.max_residual.max(high.max_residual);
        out.checks.push(Check::new(
            "telescoping_exact",
            Some(8),
            &name,
            tel == 0.0,
            format!("{tel:e}"),
            "0".into(),
        ));
        let fo = ModeFamily::build(&m, 1, c.ortho_r_max, c.ortho_dr, None)?;
        let mut ortho = 0.0f64;
        for j in 0..c.ortho_bands {
            for l in j + 3..c.ortho_bands {
                let a = DyadicBand::new(j, BandDirection::Low);
                let b = DyadicBand::new(l, BandDirection::Low);
                ortho = ortho.max(band_product_norm(&fo, a, b));
            }
        }
        out.checks.push(check_le("band_quasi_orthogonality", Some(8), &name, ortho, c.ortho_tol));
        let bands: Vec<DyadicBand> = (0..c.bands).map(|k| DyadicBand::new(k, BandDirection::Low)).collect();
        let reps = (0..c.states)
            .into_par_iter()
            .map(|k| {
                let v = random_band_state(&fam, &bands, c.ell_max, cfg.seed.wrapping_add(k))?;
                Ok((k, lp_inequality_probe(&fam, &v, c.q, BandDirection::Low)?))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let mut ratio = 0.0f64;
        for (k, r) in &reps {
            ratio = ratio.max(r.ratio);
            probes.push(vec![
                name.clone(),
                cfg.seed.wrapping_add(*k).to_string(),
                num(r.lhs),
                num(r.square_function),
                num(r.correction),
                num(r.rhs),
                num(r.ratio),
            ]);
        }
        out.checks.push(
            check_le("square_function_ratio", Some(8), &name, ratio, c.ratio_bound)
                .detail(format!("empirical constant over {} states, q = {}", c.states, c.q)),
        );
        observed.push(json!({"metric": name, "telescoping": tel, "orthogonality": ortho, "lp_constant": ratio}));
    }
    out.tables.push(probes);
    out.observed = json!({"eigen_errors": worst, "halving_orders": orders, "metrics": observed});
    Ok(out)
}

pub fn resolvent(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.resolvent;
    let mut out = ExperimentOutput::default();
    let weight = Weight::Bracket(c.weight);
    let mut t = CsvTable::new("resolvent.csv", &["metric", "lambda_requested", "lambda", "delta", "norm"]);
    let mut observed = Vec::new();
    for (name, m) in warped_metrics(cfg)? {
        let fam = ModeFamily::build(&m, 0, c.r_max, c.dr, None)?;
        let mut worst = 1.0f64;
        let mut plateau = true;
        let mut mid = None;
        for &lam in &c.lambdas {
            let rep = resolvent_probe(&fam, lam, &c.deltas, weight, Placement::MidGap, c.plateau_factor)?;
            for (d, v) in &rep.norms {
                t.push(vec![name.clone(), num(lam), num(rep.lambda), num(*d), num(*v)]);
            }
            worst = worst.max(rep.spread);
            plateau &= rep.plateau;
            if mid.is_none() && lam >= 0.5 {
                mid = Some((lam, rep.extrapolated));
            }
        }
        let (l0, l1) = c
            .lambdas
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        out.checks.push(
            Check::new(
                "weighted_resolvent_plateau",
                Some(9),
                &name,
                plateau,
                format!("spread {worst:.3}"),
                format!("< {}", c.plateau_factor),
            )
            .detail(format!("λ ∈ [{l0}, {l1}], δ ladder {:?}", c.deltas)),
        );
        let bare = resolvent_probe(&fam, c.lambdas[c.lambdas.len() / 2], &c.deltas, Weight::None, Placement::Eigenvalue, c.plateau_factor)?;
        out.checks.push(Check::new(
            "eigenvalue_control_blows_up",
            None,
            &name,
            !bare.plateau,
            format!("spread {:.3e}", bare.spread),
            format!(">= {}", c.plateau_factor),
        ));
        if m.is_flat() {
            if let Some((lam, ext)) = mid {
                let cont = continuum_resolvent_norm(&m, lam, weight, 300.0);
                let rel = (ext / cont - 1.0).abs();
                out.checks.push(
                    check_le("continuum_comparison", None, &name, rel, 0.25)
                        .detail(format!("λ = {lam}: box {ext:.4} vs continuum {cont:.4}")),
                );
            }
        }
        observed.push(json!({"metric": name, "max_spread": worst, "plateau": plateau}));
    }
    out.tables.push(t);
    out.observed = json!(observed);
    Ok(out)
}

pub fn smoothing(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.smoothing;
    let mut out = ExperimentOutput::default();
    let mut t = CsvTable::new("smoothing.csv", &["metric", "eps", "horizon", "ratio", "raw_ratio"]);
    let mut observed = Vec::new();
    for (name, m) in warped_metrics(cfg)? {
        let fam = ModeFamily::build(&m, 0, c.r_max, c.dr, Some(c.lambda_max))?;
        let u0 = FieldState::radial(&fam, |r| C64::new((-(r - c.centre).powi(2) / (2.0 * c.width * c.width)).exp(), 0.0))?;
        let mut finals = Vec::new();
        let mut stable = true;
        let mut max_inc = 0.0f64;
        for &eps in &c.eps {
            let g = fam.apply(|l| C64::new(lp_band(l / (eps * eps)), 0.0), &u0)?;
            let rs = mass_radius(&g, INTEGRATED_TAIL);
            let t_max = 0.99 * (0.8 * c.r_max - rs) / (2.0 * (2.0 * eps * eps).sqrt());
            let horizons: Vec<f64> = c.fractions.iter().map(|f| f * t_max).collect();
            let rep = smoothing_probe(&fam, eps, &u0, &horizons, c.stabilization_tol)?;
            for ((h, r), raw) in rep.horizons.iter().zip(&rep.ratios).zip(&rep.raw_ratios) {
                t.push(vec![name.clone(), num(eps), num(*h), num(*r), num(*raw)]);
            }
            finals.push(*rep.ratios.last().unwrap_or(&0.0));
            stable &= rep.stabilized;
            max_inc = max_inc.max(rep.increment);
        }
        let (lo, hi) = finals.iter().fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        let spread = hi / lo;
        out.checks.push(Check::new(
            "stabilizes_under_doubling",
            Some(9),
            &name,
            stable,
            format!("max increment {max_inc:.2e}"),
            format!("< {}", c.stabilization_tol),
        ));
        out.checks.push(
            Check::new(
                "uniform_in_eps",
                Some(9),
                &name,
                spread < c.spread_bound,
                format!("spread {spread:.3}"),
                format!("< {}", c.spread_bound),
            )
            .detail(format!("ε ∈ {:?}, ratios {:?}", c.eps, finals.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>())),
        );
        observed.push(json!({"metric": name, "ratios": finals, "spread": spread, "max_increment": max_inc}));
    }
    out.tables.push(t);
    out.observed = json!(observed);
    Ok(out)
}

pub fn sobolev(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.sobolev;
    let mut out = ExperimentOutput::default();
    let sharp = sobolev_sharp_constant(cfg.metric.n);
    let mut t = CsvTable::new("sobolev.csv", &["metric", "state", "ratio"]);
    let mut observed = Vec::new();
    for (name, m) in warped_metrics(cfg)? {
        let fam = ModeFamily::build(&m, 0, c.r_max, c.dr, None)?;
        let states: Vec<FieldState> = c
            .widths
            .iter()
            .map(|w| FieldState::radial(&fam, |r| C64::new((-(r / w).powi(2) / 2.0).exp(), 0.0)))
            .collect::<Result<_, _>>()?;
        let rep = sobolev_probe(&fam, &states)?;
        for (w, r) in c.widths.iter().zip(&rep.ratios) {
            t.push(vec![name.clone(), format!("gaussian_w{w}"), num(*r)]);
        }
        let (best, _) = sobolev_extremizer(&fam, &states[0], c.iterations)?;
        t.push(vec![name.clone(), "extremizer".into(), num(best)]);
        if m.is_flat() {
            let rel = (best / sharp - 1.0).abs();
            out.checks.push(
                check_le("extremizer_near_sharp_constant", None, &name, rel, c.sharp_tol)
                    .detail(format!("{best:.4} vs {sharp:.4}")),
            );
        }
        out.checks.push(Check::new(
            "probe_below_extremizer",
            None,
            &name,
            rep.max_ratio <= best * (1.0 + 1e-9),
            format!("{:.4}", rep.max_ratio),
            format!("<= {best:.4}"),
        ));
        observed.push(json!({"metric": name, "ratios": rep.ratios, "extremizer": best}));
    }
    out.tables.push(t);
    out.observed = json!({"sharp_constant": sharp, "metrics": observed});
    Ok(out)
}

pub fn dispersive(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.dispersive;
    let mut out = ExperimentOutput::default();
    let flat = WarpedMetric::flat(cfg.metric.n);
    let fam = ModeFamily::build(&flat, 0, c.gaussian_r_max, c.gaussian_dr, Some(c.gaussian_lambda_max))?;
    let u0 = FieldState::radial(&fam, |r| C64::new((-r * r / 2.0).exp(), 0.0))?;
    let ev = Evolution::new(&fam, &u0)?;
    let t_end = c.gaussian_times.iter().copied().fold(0.0, f64::max);
    ev.check(t_end)?;
    let mut g = CsvTable::new("gaussian_sup.csv", &["t", "sup", "exact", "rel_error"]);
    let mut worst = 0.0f64;
    let half_n = cfg.metric.n as f64 / 4.0;
    for &t in &c.gaussian_times {
        let sup = sup_norm(&ev.at(t), 0.0)?;
        let exact = (1.0 + 4.0 * t * t).powf(-half_n);
        let e = (sup - exact).abs() / exact;
        worst = worst.max(e);
        g.push([t, sup, exact, e].map(num).to_vec());
    }
    out.tables.push(g);
    out.checks.push(
        check_le("flat_gaussian_sup_norm", Some(10), "flat", worst, c.gaussian_tol)
            .detail(format!("(1 + 4t²)^(−n/4) on t ∈ [0, {t_end}]")),
    );

    let mut d = CsvTable::new("exterior_decay.csv", &["metric", "t", "sup", "ratio"]);
    let mut observed = Vec::new();
    for (name, m) in warped_metrics(cfg)? {
        let fam = ModeFamily::build(&m, 0, c.r_max, c.dr, Some(c.lambda_max))?;
        let band = DyadicBand::new(c.band, BandDirection::Low);
        let u0 = band_gaussian(&fam, band, c.width_factor, 0.0)?;
        let horizon = Evolution::new(&fam, &u0)?.max_time();
        let k = c.ladder_points.max(2) - 1;
        let ladder: Vec<f64> = (0..=k)
            .map(|j| horizon / c.ladder_span * c.ladder_span.powf(j as f64 / k as f64))
            .collect();
        let rep = dispersive_fit(&fam, &u0, Cutoff::Exterior(c.cutoff), &ladder)?;
        for s in &rep.samples {
            d.push(vec![name.clone(), num(s.t), num(s.sup), num(s.ratio)]);
        }
        let e = rep.fit.exponent;
        out.checks.push(
            check_le("exterior_decay_exponent", Some(10), &name, e, c.exponent_bound)
                .detail(format!("target {}, t ∈ [{:.0}, {:.0}]", rep.target, ladder[0], horizon)),
        );
        observed.push(json!({"metric": name, "exponent": e, "horizon": horizon}));
    }
    out.tables.push(d);
    out.observed = json!({"gaussian_max_error": worst, "exterior": observed});
    Ok(out)
}

pub fn strichartz(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.strichartz;
    let mut out = ExperimentOutput::default();
    let (p, q) = c.pair;
    let bands: Vec<DyadicBand> = c
        .high_bands
        .iter()
        .map(|&k| DyadicBand::new(k, BandDirection::High))
        .chain(c.low_bands.iter().map(|&k| DyadicBand::new(k, BandDirection::Low)))
        .collect();
    let mut t = CsvTable::new(
        "strichartz.csv",
        &["metric", "direction", "index", "scale", "horizon", "ratio", "ratio_half", "increment", "time_samples"],
    );
    let mut observed = Vec::new();
    for (name, m) in warped_metrics(cfg)? {
        let fam = ModeFamily::build(&m, 0, c.r_max, c.dr, Some(c.lambda_max))?;
        let gen = DataGenerator::Gaussian {
            width_factor: c.width_factor,
        };
        let rep = strichartz_experiment(&fam, p, q, &bands, gen, None, c.increment_limit)?;
        for r in &rep.rows {
            let dir = if r.direction == BandDirection::Low { "low" } else { "high" };
            t.push(vec![
                name.clone(),
                dir.into(),
                r.index.to_string(),
                num(r.scale),
                num(r.horizon),
                num(r.ratio),
                num(r.ratio_half),
                num(r.increment),
                r.time_samples.to_string(),
            ]);
        }
        out.checks.push(
            Check::new(
                "band_ratio_spread",
                Some(11),
                &name,
                rep.spread <= c.spread_bound,
                format!("{:.3}", rep.spread),
                format!("<= {}", c.spread_bound),
            )
            .detail(format!("(p, q) = ({p}, {q}), {} bands", rep.rows.len())),
        );
        out.checks.push(
            Check::new(
                "stabilizes_under_doubling",
                Some(11),
                &name,
                rep.stabilized,
                format!("max increment {:.2}%", 100.0 * rep.max_increment),
                format!("< {}%", 100.0 * c.increment_limit),
            )
            .detail("finite-horizon substitute for the global-in-time constant"),
        );
        observed.push(json!({"metric": name, "spread": rep.spread, "max_increment": rep.max_increment,
            "admissibility_residual": rep.admissibility_residual}));
    }
    out.tables.push(t);
    out.observed = json!(observed);
    Ok(out)
}

pub fn nls(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.nls;
    let mut out = ExperimentOutput::default();
    let ncfg = NlsConfig {
        sigma: c.sigma,
        horizon: c.horizon,
        intervals: c.intervals,
        stages: c.stages,
        tol: c.tol,
        max_iter: c.max_iter,
        backward: true,
    };
    let mut it = CsvTable::new("picard.csv", &["metric", "iterate", "increment", "x_increment", "contraction"]);
    let mut sc = CsvTable::new("scattering.csv", &["metric", "t", "residual", "factor"]);
    let mut sw = CsvTable::new("contraction_sweep.csv", &["metric", "radius", "factor"]);
    let mut observed = Vec::new();
    for (name, m) in warped_metrics(cfg)? {
        let n = m.n as f64;
        let fam = ModeFamily::build(&m, 0, c.r_max, c.dr, Some(c.lambda_max))?;
        let g = FieldState::radial(&fam, |r| C64::new((-r * r / 2.0).exp(), 0.0))?;
        let g = fam.apply(|l| C64::new(f0(l / c.lowpass), 0.0), &g)?;
        let u0 = g.scale(C64::new(c.mass / g.l2_norm(), 0.0));
        let run = nls_picard(&fam, &u0, &ncfg)?;
        for k in 0..run.increments.len() {
            it.push(vec![
                name.clone(),
                (k + 1).to_string(),
                num(run.increments[k]),
                run.x_increments.get(k).map_or(String::new(), |x| num(*x)),
                if k == 0 { String::new() } else { run.contraction.get(k - 1).map_or(String::new(), |x| num(*x)) },
            ]);
        }
        out.checks.push(Check::new(
            "picard_converges",
            Some(12),
            &name,
            run.converged && run.iterations <= c.max_iter,
            format!("{} iterations", run.iterations),
            format!("converged in <= {}", c.max_iter),
        ));
        out.checks.push(
            check_le("mass_conservation", Some(12), &name, run.mass_drift, 10.0 * c.tol)
                .detail(format!("PDE residual {:.2e}", run.pde_residual)),
        );
        let sweep = contraction_sweep(&fam, &u0, &c.sweep_radii, &ncfg)?;
        for (r, f) in sweep.radii.iter().zip(&sweep.factors) {
            sw.push(vec![name.clone(), num(*r), num(*f)]);
        }
        let target = 4.0 / n;
        out.checks.push(Check::new(
            "contraction_exponent",
            Some(12),
            &name,
            (sweep.fit.exponent - target).abs() <= c.exponent_tol,
            format!("{:.4}", sweep.fit.exponent),
            format!("{target:.4} ± {}", c.exponent_tol),
        ));
        let rep = scattering_detect(&run, c.levels)?;
        let factors: Vec<f64> = rep.factors_plus.clone();
        for (k, (t, r)) in rep.plus.iter().chain(&rep.minus).enumerate() {
            let f = if k < rep.plus.len() {
                k.checked_sub(1).and_then(|j| rep.factors_plus.get(j))
            } else {
                (k - rep.plus.len()).checked_sub(1).and_then(|j| rep.factors_minus.get(j))
            };
            sc.push(vec![name.clone(), num(*t), num(*r), f.map_or(String::new(), |x| num(*x))]);
        }
        // the residual ladder runs towards large t, so its last factor is the asymptotic one
        let last = rep
            .factors_plus
            .last()
            .copied()
            .unwrap_or(0.0)
            .min(rep.factors_minus.last().copied().unwrap_or(f64::INFINITY));
        out.checks.push(
            Check::new(
                "scattering_ladder_factor",
                Some(12),
                &name,
                last >= c.ladder_factor,
                format!("{last:.3}"),
                format!(">= {}", c.ladder_factor),
            )
            .detail(format!(
                "factors {:?}; for mass-critical data the residual decays like 1/t, so the doubling factor tends to 2 from below",
                factors.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
            )),
        );
        // residuals grow until the data disperse (t ~ 1 for unit-scale data), then decay
        let late = |l: &[(f64, f64)], f: &[f64]| -> Vec<f64> {
            l.iter().zip(f).filter(|((t, _), _)| t.abs() >= 1.0).map(|(_, f)| *f).collect()
        };
        let tail: Vec<f64> = late(&rep.plus, &rep.factors_plus)
            .into_iter()
            .chain(late(&rep.minus, &rep.factors_minus))
            .collect();
        let decreasing = !tail.is_empty() && tail.iter().all(|f| *f > 1.0);
        out.checks.push(Check::new(
            "scattering_residuals_decrease",
            None,
            &name,
            decreasing,
            format!("min factor for t >= 1: {:.3}", tail.iter().copied().fold(f64::INFINITY, f64::min)),
            "> 1".into(),
        ));
        observed.push(json!({"metric": name, "run": run, "sweep": sweep, "scattering": rep}));
    }
    out.tables.extend([it, sw, sc]);
    out.observed = json!(observed);
    Ok(out)
}

pub fn normal_form(cfg: &Config) -> Result<ExperimentOutput, HarnessError> {
    let c = &cfg.experiment.normal_form;
    let mut out = ExperimentOutput::default();
    let amp = c.amplitude;
    let a = RadialCoefficient::from_deviation(move |x: f64| amp / (1.0 + x * x).sqrt());
    let opts = NormalFormOptions {
        fit_lo: c.fit_lo,
        fit_hi: c.fit_hi,
        fit_samples: c.fit_samples,
        quad_points: c.quad_points,
        jacobian_floor: c.jacobian_floor,
    };
    let step = normal_form_step(&a, c.nu, c.r_inner, opts)?;
    let mut t = CsvTable::new("normal_form.csv", &["x", "deviation", "next_deviation", "sigma"]);
    let k = c.fit_samples.max(2) - 1;
    for j in 0..=k {
        let x = c.r_inner * (c.fit_hi).powf(j as f64 / k as f64);
        t.push([x, a.deviation(x), step.next_deviation(x), step.sigma(x)].map(num).to_vec());
    }
    out.tables.push(t);
    let e_in = step.input_fit.as_ref().map(|f| f.exponent);
    let e_out = step.fit.as_ref().map(|f| f.exponent);
    out.checks.push(Check::new(
        "input_decay",
        Some(13),
        "radial",
        e_in.is_some_and(|e| (e - c.input_order).abs() <= c.input_tol),
        e_in.map_or("none".into(), |e| format!("{e:.3}")),
        format!("{} ± {}", c.input_order, c.input_tol),
    ));
    out.checks.push(
        Check::new(
            "improved_decay",
            Some(13),
            "radial",
            e_out.map_or(true, |e| e <= c.bound),
            e_out.map_or("vanishes".into(), |e| format!("{e:.3}")),
            format!("<= {}", c.bound),
        )
        .detail(format!(
            "A = 1 + {amp}⟨x⟩^(−1); fit on [{:e}, {:e}]·R, min Jacobian {:.3}",
            c.fit_lo, c.fit_hi, step.min_jacobian
        )),
    );
    out.observed = json!({"input_fit": step.input_fit, "fit": step.fit, "ratio_bounds": step.ratio_bounds,
        "min_jacobian": step.min_jacobian});
    Ok(out)
}
