//! Subcommand bodies: wiring from a parsed configuration to library
//! calls, field files and stdout reports.

use std::fs;
use std::path::{Path, PathBuf};

use sandtable::analytic::{self, ErrorNorms};
use sandtable::dynamics::{self, NodeClasses, RunDiagnostics};
use sandtable::equilibrium;
use sandtable::geometry::{GammaGeometry, Point, RegionLabel};
use sandtable::grid::{Grid, ScalarField};
use sandtable::source::RadialBump;
use sandtable::SandtableError;

use crate::config::{CompareConfig, Config};
use crate::csvio;
use crate::{CliError, CompareArgs, RunArgs, SimArgs};

fn cfg_err(e: SandtableError) -> CliError {
    CliError::Config(e.to_string())
}

fn out_dir(args: &RunArgs, config: &Config) -> Result<PathBuf, CliError> {
    let dir = args.out.clone().unwrap_or_else(|| config.outputs.directory.clone());
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Checks requested output names against the known set up front, so a
/// typo fails before any computation.
fn field_filter<'a>(config: &'a Config, known: &[&str]) -> Result<impl Fn(&str) -> bool + 'a, CliError> {
    if let Some(names) = &config.outputs.fields {
        for name in names {
            if !known.contains(&name.as_str()) {
                return Err(CliError::Config(format!(
                    "outputs.fields: unknown field {name:?} (expected one of {})",
                    known.join(", ")
                )));
            }
        }
    }
    Ok(move |name: &str| match &config.outputs.fields {
        Some(names) => names.iter().any(|n| n == name),
        None => true,
    })
}

fn weak_bumps(config: &Config) -> Result<Vec<RadialBump>, CliError> {
    config
        .weak_bumps
        .iter()
        .map(|b| {
            RadialBump::new(Point::new(b.center[0], b.center[1]), b.radius, b.amplitude)
                .map_err(|e| CliError::Config(format!("weak_bumps: {e}")))
        })
        .collect()
}

pub fn equilibrium(args: &RunArgs) -> Result<(), CliError> {
    let config = Config::load(&args.config)?;
    let geo = config.geometry()?;
    let h = config.h(args.h)?;
    let grid = config.node_grid(h)?;
    let f = config.source()?;
    let dir = out_dir(args, &config)?;
    let delta = 2.0 * h;

    const KNOWN: &[&str] = &["dist", "standing", "rolling", "labels", "ridge"];
    let want = field_filter(&config, KNOWN)?;

    if want("dist") {
        csvio::write_field(&dir.join("dist.csv"), &geo.dist_field(&grid))?;
    }
    if want("standing") {
        match equilibrium::minimal_standing_layer(&geo, &grid, &f) {
            Ok(u) => csvio::write_field(&dir.join("standing.csv"), &u)?,
            Err(SandtableError::EmptySupport) => {
                println!("standing layer skipped: source has empty support");
            }
            Err(e) => return Err(cfg_err(e)),
        }
    }
    if want("rolling") {
        let v = equilibrium::transport_density_field(&geo, &grid, &f, delta);
        csvio::write_field(&dir.join("rolling.csv"), &v)?;
    }
    if want("labels") {
        csvio::write_labels(&dir.join("labels.csv"), &geo.region_labels(&grid, delta))?;
    }
    if want("ridge") {
        csvio::write_mask(&dir.join("ridge.csv"), &geo.ridge_mask(&grid, delta))?;
    }

    // Quadrature reports live on a cell-center lattice: midpoints stay off
    // boundary lines and off the branch lines of the transport density.
    let cgrid = config.center_grid(h)?;
    let vc = equilibrium::transport_density_field(&geo, &cgrid, &f, 0.0);
    let weights = equilibrium::dual_cell_weights(&geo, &cgrid);
    let poured = equilibrium::integrate_field(&vc, &weights);
    let expected =
        equilibrium::integrate_fn(&geo, &cgrid, |p| f.eval(p) * geo.dist(p).unwrap_or(0.0));
    println!("rolling-layer mass   : {poured:.12e}");
    println!("source-distance mass : {expected:.12e}");
    let dc = geo.dist_field(&cgrid);
    match equilibrium::mass_identity(&geo, &vc, &f, &dc) {
        Ok(residual) => println!("mass-identity residual (relative): {residual:.6e}"),
        Err(SandtableError::ZeroReference) => {
            println!("mass-identity residual skipped: source pours no mass");
        }
        Err(e) => return Err(cfg_err(e)),
    }
    for (n, bump) in weak_bumps(&config)?.iter().enumerate() {
        let r = equilibrium::weak_residual(&geo, &vc, &f, bump).map_err(|e| {
            CliError::Config(format!("weak_bumps[{n}]: {e}"))
        })?;
        println!(
            "weak residual, bump {n} at ({}, {}) radius {}: {r:.6e}",
            bump.center.x, bump.center.y, bump.radius
        );
    }
    Ok(())
}

fn print_diagnostics(prefix: &str, diag: &RunDiagnostics, time: f64) {
    println!(
        "{prefix}steps {}, time {:.6}, converged {}, final rate {:.6e}",
        diag.steps, time, diag.converged, diag.final_rate
    );
    println!(
        "{prefix}u in [{:.6e}, {:.6e}], v in [{:.6e}, {:.6e}]",
        diag.u_range.0, diag.u_range.1, diag.v_range.0, diag.v_range.1
    );
    println!(
        "{prefix}mass poured {:.6e}, stored {:.6e}, left through open edge {:.6e}",
        diag.mass_source, diag.mass_storage, diag.mass_outflux
    );
    println!("{prefix}wall nodes with neutral sign test: {}", diag.neutral_wall_nodes);
}

fn region_name(label: RegionLabel) -> String {
    match label {
        RegionLabel::Ridge => "ridge".into(),
        RegionLabel::Interior(a) => format!("arc{a}_interior"),
        RegionLabel::EndA(a) => format!("arc{a}_end_a"),
        RegionLabel::EndB(a) => format!("arc{a}_end_b"),
    }
}

fn dump_state(dir: &Path, u: &ScalarField, v: &ScalarField) -> Result<(), CliError> {
    csvio::write_field(&dir.join("u.csv"), u)?;
    csvio::write_field(&dir.join("v.csv"), v)
}

pub fn simulate(args: &SimArgs) -> Result<(), CliError> {
    let config = Config::load(&args.run.config)?;
    let geo = config.geometry()?;
    let h = config.h(args.run.h)?;
    let grid = config.node_grid(h)?;
    let f = config.source()?;
    let params = config.params()?;
    let dir = out_dir(&args.run, &config)?;

    let classes = NodeClasses::full(&geo, &grid).map_err(cfg_err)?;
    csvio::write_kinds(&dir.join("nodes.csv"), &classes)?;
    let (interior, gamma, wall) = classes.counts();
    println!("nodes: {interior} interior, {gamma} open-boundary, {wall} wall");

    if args.decompose {
        let partition = geo.region_labels(&grid, 2.0 * h);
        match dynamics::decomposed_run(&geo, &grid, &f, &params, &partition) {
            Ok(out) => {
                dump_state(&dir, &out.state.u, &out.state.v)?;
                let mut worst: Option<f64> = None;
                for (label, diag) in &out.regions {
                    let name = region_name(*label);
                    println!("region {name}:");
                    print_diagnostics("  ", diag, diag.steps as f64 * params.dt(grid.h));
                    csvio::write_rates(&dir.join(format!("rates_{name}.csv")), &diag.rate_history)?;
                    if !diag.converged {
                        worst = Some(worst.map_or(diag.final_rate, |w: f64| w.max(diag.final_rate)));
                    }
                }
                match worst {
                    Some(rate) => Err(CliError::NotConverged(rate)),
                    None => Ok(()),
                }
            }
            Err(SandtableError::Unstable { step, state }) => {
                dump_state(&dir, &state.u, &state.v)?;
                Err(CliError::Unstable(step))
            }
            Err(e) => Err(cfg_err(e)),
        }
    } else {
        match dynamics::run_to_equilibrium(&geo, &grid, &f, &params) {
            Ok(out) => {
                dump_state(&dir, &out.state.u, &out.state.v)?;
                csvio::write_rates(&dir.join("rates.csv"), &out.diagnostics.rate_history)?;
                print_diagnostics("", &out.diagnostics, out.state.time);
                if out.diagnostics.converged {
                    Ok(())
                } else {
                    Err(CliError::NotConverged(out.diagnostics.final_rate))
                }
            }
            Err(SandtableError::Unstable { step, state }) => {
                dump_state(&dir, &state.u, &state.v)?;
                Err(CliError::Unstable(step))
            }
            Err(e) => Err(cfg_err(e)),
        }
    }
}

/// Oracle closure for comparisons: a named closed form or a second field
/// file looked up by lattice index (exact for matching lattices).
fn oracle_fn<'a>(
    geo: &'a GammaGeometry,
    compare: &CompareConfig,
    reference: Option<&'a ScalarField>,
    grid: &'a Grid,
) -> Result<Box<dyn Fn(Point) -> f64 + 'a>, CliError> {
    if let Some(b) = reference {
        if b.grid() != grid {
            return Err(CliError::Config(format!(
                "lattice mismatch: field is {}x{} step {}, reference is {}x{} step {}",
                grid.nx, grid.ny, grid.h, b.grid().nx, b.grid().ny, b.grid().h
            )));
        }
        return Ok(Box::new(move |p: Point| {
            let (i, j) = grid.nearest(p);
            b.get(i, j)
        }));
    }
    match compare.oracle.as_deref() {
        Some("dist") => Ok(Box::new(move |p| geo.dist(p).unwrap_or(0.0))),
        Some("standing") => Ok(Box::new(analytic::exact_standing)),
        Some("rolling") => Ok(Box::new(|p| analytic::exact_rolling(p).unwrap_or(0.0))),
        Some(other) => Err(CliError::Config(format!(
            "compare.oracle: unknown oracle {other:?} (expected dist, standing or rolling)"
        ))),
        None => Err(CliError::Config(
            "compare: no reference field given and no oracle configured".into(),
        )),
    }
}

pub fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let config = Config::load(&args.config)?;
    let geo = config.geometry()?;
    let field = csvio::read_field(&args.field)?;
    let grid = field.grid();

    let default_compare = CompareConfig { oracle: None, field: None, exclusion: Default::default() };
    let compare = config.compare.as_ref().unwrap_or(&default_compare);

    let reference = match &args.reference {
        Some(path) => Some(csvio::read_field(path)?),
        None => match &compare.field {
            Some(path) if compare.oracle.is_none() => Some(csvio::read_field(path)?),
            _ => None,
        },
    };

    let exclusion = analytic::exclusion_from(grid, |p| {
        compare
            .exclusion
            .disks
            .iter()
            .any(|d| p.dist(Point::new(d.center[0], d.center[1])) <= d.radius)
            || compare
                .exclusion
                .x_bands
                .iter()
                .any(|b| (p.x - b.x).abs() <= b.half_width)
    });

    let oracle = oracle_fn(&geo, compare, reference.as_ref(), grid)?;
    let ErrorNorms { l1, l2, linf } = analytic::error_report(&field, oracle, &exclusion).map_err(cfg_err)?;

    println!("relative L1 error  : {l1:.6e}");
    println!("relative L2 error  : {l2:.6e}");
    println!("absolute sup error : {linf:.6e}");
    println!("l1_rel,l2_rel,linf");
    println!("{l1:.16e},{l2:.16e},{linf:.16e}");
    Ok(())
}
