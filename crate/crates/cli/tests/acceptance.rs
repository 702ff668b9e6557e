//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach the terminal.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use trajguide_cli::*;
use trajguide_core::ablation::AblationTable;
use trajguide_core::energy::{box_energy, control_energy, movement_energy, total_energy, EnergyConfig};
use trajguide_core::formats::{demo_config, save_run_config, RunConfig, SuiteSpec};
use trajguide_core::geometry::{distance_transform, rasterize_polyline};
use trajguide_core::guidance::distance_constraints;
use trajguide_core::metrics::{dtl, InstanceMask, MaskSource};
use trajguide_core::verify::{self, Corruption};
use trajguide_core::{CellSet, GridDims, Mode, Trajectory};

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let (passed, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    let line = format!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    println!("{line}");
    Check { name, passed, detail }
}

fn verdict(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn edt_oracle() -> Result<String, String> {
    let start = Instant::now();
    let r = verify::verify_edt(100, 0, 64, Corruption::None).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    verdict(
        r.passed && r.max_abs_err <= 1e-12 && t < Duration::from_secs(10),
        format!("{} grids, max abs err {:.1e}, {:.2?}", r.cases, r.max_abs_err, t),
    )
}

fn gradient_checks() -> Result<String, String> {
    let start = Instant::now();
    let r = verify::verify_grad(100, 0, Corruption::None).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    verdict(
        r.attention_max_rel <= 1e-6 && r.latent_max_rel <= 1e-4 && t < Duration::from_secs(30),
        format!(
            "{} cases, attention {:.1e}, latent {:.1e}, {:.2?}",
            r.cases, r.attention_max_rel, r.latent_max_rel, t
        ),
    )
}

fn energy_algebra() -> Result<String, String> {
    let cfg = EnergyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let col = |v: &[f64]| ndarray::Array1::from(v.to_vec());

    // zero iff all attention on the trajectory
    for _ in 0..200 {
        let n = rng.gen_range(2..40);
        let d: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { rng.gen_range(0.5..10.0) }).collect();
        let on: Vec<f64> = d.iter().map(|&x| if x == 0.0 { rng.gen_range(0.01..1.0) } else { 0.0 }).collect();
        let e = control_energy(col(&on).view(), &d, &cfg).map_err(|e| e.to_string())?;
        if e > 1e-9 {
            return Err(format!("on-trajectory E_c = {e}"));
        }
        let mut leaky = on.clone();
        leaky[1] += rng.gen_range(1e-3..1.0);
        let e = control_energy(col(&leaky).view(), &d, &cfg).map_err(|e| e.to_string())?;
        if e <= 1e-9 {
            return Err(format!("off-trajectory E_c = {e}"));
        }
    }

    // scale invariance
    let mut worst_scale = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(2..40);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let region: Vec<f64> = (0..n).map(|i| if i == 0 || rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let c = 10f64.powf(rng.gen_range(-3.0..3.0));
        let s: Vec<f64> = a.iter().map(|x| x * c).collect();
        let pairs = [
            (control_energy(col(&a).view(), &d, &cfg), control_energy(col(&s).view(), &d, &cfg)),
            (movement_energy(col(&a).view(), &d, &cfg), movement_energy(col(&s).view(), &d, &cfg)),
            (box_energy(col(&a).view(), &region), box_energy(col(&s).view(), &region)),
        ];
        for (x, y) in pairs {
            let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
            worst_scale = worst_scale.max((x - y).abs());
        }
    }
    if worst_scale > 1e-12 {
        return Err(format!("scale invariance off by {worst_scale:.1e}"));
    }

    // additivity
    let mut worst_add = 0.0f64;
    for _ in 0..50 {
        let case = verify::random_grad_case(&mut rng).map_err(|e| e.to_string())?;
        let lambda = rng.gen_range(0.0..50.0);
        let cfg = EnergyConfig { lambda, ..cfg };
        let constraints = distance_constraints(&case.model, &case.trajectories).map_err(|e| e.to_string())?;
        let maps = case.attention(&case.state).map_err(|e| e.to_string())?;
        let layers: Vec<usize> = (0..maps.len()).collect();
        let e = total_energy(&maps, &constraints, &layers, &cfg).map_err(|e| e.to_string())?;
        worst_add = worst_add.max((e.e_total - (e.e_control + lambda * e.e_movement)).abs());
    }
    if worst_add > 1e-12 {
        return Err(format!("additivity off by {worst_add:.1e}"));
    }

    // mass transport toward the trajectory never raises E_c
    let mut moves = 0;
    while moves < 1000 {
        let n = rng.gen_range(2..40);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let d: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..10.0) }).collect();
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if d[i] == d[j] || a.iter().sum::<f64>() <= 1e-6 {
            continue;
        }
        let (from, to) = if d[i] > d[j] { (i, j) } else { (j, i) };
        let mut b = a.clone();
        let delta = rng.gen_range(0.0..=1.0) * a[from];
        b[from] -= delta;
        b[to] += delta;
        let before = control_energy(col(&a).view(), &d, &cfg).map_err(|e| e.to_string())?;
        let after = control_energy(col(&b).view(), &d, &cfg).map_err(|e| e.to_string())?;
        if after > before + 1e-15 {
            return Err(format!("move {moves} raised E_c {before} -> {after}"));
        }
        moves += 1;
    }
    Ok(format!(
        "zero-iff ok, scale err {worst_scale:.1e}, additivity err {worst_add:.1e}, {moves} monotone moves"
    ))
}

fn dtl_units() -> Result<String, String> {
    let dims = GridDims::new(16, 16);
    let t = Trajectory::new(0, vec![vec![[2.0, 1.0], [9.0, 13.0]]]);
    let cells = rasterize_polyline(&t, dims).map_err(|e| e.to_string())?;
    let field = distance_transform(&cells).map_err(|e| e.to_string())?;
    let on = dtl(
        &[InstanceMask {
            token_index: 0,
            cells,
            source: MaskSource::GroundTruth,
        }],
        &[field],
    )
    .map_err(|e| e.to_string())?
    .dtl;

    let pair = GridDims::new(1, 2);
    let mut source = CellSet::new(pair);
    source.insert((0, 0));
    let field = distance_transform(&source).map_err(|e| e.to_string())?;
    let two = dtl(
        &[InstanceMask {
            token_index: 0,
            cells: CellSet::full(pair),
            source: MaskSource::GroundTruth,
        }],
        &[field],
    )
    .map_err(|e| e.to_string())?
    .dtl;
    let expect = (1.0 + (-1.0f64).exp()) / 2.0;
    verdict(
        on == 1.0 && (two - expect).abs() <= 1e-12,
        format!("on-trajectory {on}, two-pixel {two:.15} vs {expect:.15}"),
    )
}

fn suite_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = demo_config();
    cfg.suite = Some(SuiteSpec { count: 20, seed: 0 });
    let path = dir.join("suite.json");
    save_run_config(&cfg, &path).unwrap();
    path
}

fn out(dir: &Path) -> Overrides {
    Overrides {
        out: Some(dir.to_path_buf()),
        ..Overrides::default()
    }
}

fn mean(t: &AblationTable, name: &str) -> Result<f64, String> {
    t.mean(name).ok_or_else(|| format!("no row {name}"))
}

fn guidance_effect(table: &AblationTable, elapsed: Duration) -> Result<String, String> {
    let (full, control, none) = (mean(table, "full")?, mean(table, "control_only")?, mean(table, "none")?);
    verdict(
        full >= 2.0 * none && full > control && control > none && elapsed < Duration::from_secs(300),
        format!("full {full:.4}, control_only {control:.4}, none {none:.4} (ratio {:.2}), {elapsed:.2?}", full / none),
    )
}

fn lambda_shape(table: &AblationTable, elapsed: Duration) -> Result<String, String> {
    let at = |l: f64| mean(table, &format!("lambda={l}"));
    let interior = [1.0, 5.0, 10.0, 20.0]
        .iter()
        .map(|&l| at(l))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let (zero, hundred) = (at(0.0)?, at(100.0)?);
    let rows: Vec<String> = table.rows.iter().map(|r| format!("{}={:.4}", r.lambda, r.mean_dtl)).collect();
    verdict(
        hundred < interior && zero < interior && elapsed < Duration::from_secs(600),
        format!("{}, {elapsed:.2?}", rows.join(" ")),
    )
}

fn baseline_parity(table: &AblationTable) -> Result<String, String> {
    let full = mean(table, "full")?;
    let (prior, expand) = (mean(table, "prior_structure")?, mean(table, "trajectory_expand")?);
    let failures: usize = table.rows.iter().map(|r| r.failures).sum();
    verdict(
        prior < full && expand < full && failures == 0,
        format!("prior_structure {prior:.4}, trajectory_expand {expand:.4}, full {full:.4}, {failures} failed scenes"),
    )
}

fn determinism(dir: &Path) -> Result<String, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let cfg = dir.join("demo.json");
    save_run_config(&demo_config(), &cfg).map_err(|e| e.to_string())?;
    let seeded = |name: &str| Overrides {
        seed: Some(450),
        out: Some(dir.join(name)),
        ..Overrides::default()
    };
    let a = cmd_run(&cfg, &seeded("a"), true).map_err(|e| e.to_string())?;
    let b = cmd_run(&cfg, &seeded("b"), true).map_err(|e| e.to_string())?;
    let ma = fs::read(a.dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let mb = fs::read(b.dir.join("manifest.json")).map_err(|e| e.to_string())?;
    verdict(ma == mb, format!("{} files, manifests identical: {}", a.manifest.files.len(), ma == mb))
}

fn service_parity(dir: &Path) -> Result<String, String> {
    let cfg: RunConfig = demo_config();
    let cli = execute_run(&cfg, &dir.join("cli"), false).map_err(|e| e.to_string())?;
    let cli_dtl = cli.dtl.ok_or("no CLI DTL")?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let (steps, service_dtl) = runtime.block_on(async {
        let app = trajguide_service::router(trajguide_service::AppState::new(Default::default()));
        let req = |method: &str, uri: &str, body: String| {
            Request::builder()
                .method(method)
                .uri(uri)
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(body))
                .unwrap()
        };
        let resp = app.clone().oneshot(req("POST", "/sessions", cfg.to_json())).await.unwrap();
        if resp.status() != StatusCode::CREATED {
            return Err(format!("create returned {}", resp.status()));
        }
        let body: serde_json::Value =
            serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
        let id = body["session_id"].as_str().unwrap().to_string();
        let resp = app
            .clone()
            .oneshot(req("POST", &format!("/sessions/{id}/run"), "{}".into()))
            .await
            .unwrap();
        let text = String::from_utf8(resp.into_body().collect().await.unwrap().to_bytes().to_vec()).unwrap();
        let mut steps = 0;
        let mut dtl = None;
        for block in text.split("\n\n") {
            let event = block.lines().find_map(|l| l.strip_prefix("event:")).map(str::trim);
            let data: String = block.lines().filter_map(|l| l.strip_prefix("data:")).map(str::trim_start).collect();
            match event {
                Some("step") => steps += 1,
                Some("done") => {
                    let v: serde_json::Value = serde_json::from_str(&data).unwrap();
                    dtl = v["dtl"].as_f64();
                }
                Some(other) => return Err(format!("unexpected {other} event: {data}")),
                None => {}
            }
        }
        Ok((steps, dtl.ok_or("no done event")?))
    })?;
    let t = cfg.guidance.total_steps;
    verdict(
        service_dtl.to_bits() == cli_dtl.to_bits() && steps == t,
        format!("service {service_dtl} vs CLI {cli_dtl}, {steps} step events for T={t}"),
    )
}

fn main() {
    // Suite criteria are single-threaded.
    std::env::set_var(THREADS_ENV, "1");
    let tmp = tempfile::tempdir().expect("temp dir");
    let suite = suite_config(tmp.path());
    let mut checks = vec![
        check("EDT oracle", edt_oracle),
        check("gradient checks", gradient_checks),
        check("energy algebra", energy_algebra),
        check("DTL unit values", dtl_units),
    ];

    let start = Instant::now();
    let ablation = cmd_ablate(&suite, &out(&tmp.path().join("ablation")), Some(&Mode::ALL));
    let ablation_time = start.elapsed();
    let start = Instant::now();
    let sweep = cmd_sweep_lambda(&suite, &out(&tmp.path().join("sweep")), &DEFAULT_LAMBDAS);
    let sweep_time = start.elapsed();

    checks.push(check("guidance effect", || match &ablation {
        Ok(t) => guidance_effect(t, ablation_time),
        Err(e) => Err(e.to_string()),
    }));
    checks.push(check("lambda-sweep shape", || match &sweep {
        Ok(t) => lambda_shape(t, sweep_time),
        Err(e) => Err(e.to_string()),
    }));
    checks.push(check("determinism", || determinism(&tmp.path().join("det"))));
    checks.push(check("baseline parity", || match &ablation {
        Ok(t) => baseline_parity(t),
        Err(e) => Err(e.to_string()),
    }));
    checks.push(check("service parity", || service_parity(&tmp.path().join("parity"))));

    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    println!("{}/{} criteria passed", checks.len() - failed.len(), checks.len());
    if !failed.is_empty() {
        for c in failed {
            eprintln!("failed: {} ({})", c.name, c.detail);
        }
        std::process::exit(1);
    }
}
