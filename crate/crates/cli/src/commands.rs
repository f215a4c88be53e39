use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use cgnnse::bddc::{fit_stats, screen, threshold};
use cgnnse::datagen::sampler::snapshot_rng;
use cgnnse::datagen::{
    build_dataset, operating_grid, pmu_positions, read_dataset, synthesize_history, write_dataset, BandwidthRule,
    DatagenConfig, Dependence, HistorySpec, LoadSampler, NoiseModel, SnapshotDataset,
};
use cgnnse::eval::{run_study, write_report, StudyConfig, StudyData};
use cgnnse::gnn::checkpoint::CHECKPOINT_MAGIC;
use cgnnse::gnn::{load_model, save_model, Architecture, CgnnModel, Checkpoint};
use cgnnse::grid::{build_adjacency, cases, parse_case, perturb_topology, GridGraph};
use cgnnse::numerics::Matrix;
use cgnnse::powerflow::power_mismatch;
use cgnnse::stability::{enumerate_outages, sweep_contingencies, write_csv};
use cgnnse::train::{fit_split, init_model, split, LossWeighting, Optimizer, TrainConfig};
use cgnnse::Error;

use crate::args::{
    ArchFlags, CertifyArgs, DatagenArgs, EstimateArgs, InspectArgs, LossArg, NoiseArg, OptimizerArg, StudyArgs, TrainArgs,
    TrainFlags,
};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::measurements;

const CASE_FILE: &str = "case.m";
const DATASET_FILE: &str = "dataset.bin";
const MODEL_FILE: &str = "model.ckpt";
const LAST_MODEL_FILE: &str = "last.ckpt";

/// Largest power-balance mismatch accepted for a generated snapshot (p.u.).
const MISMATCH_LIMIT: f64 = 1e-8;

fn input_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

fn make_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| input_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    std::fs::write(path, bytes).map_err(|e| input_err(path, e))
}

/// Bundled case by name, or a case file.
fn load_case(spec: &str) -> Result<(GridGraph, Option<PathBuf>), Error> {
    if let Some(text) = cases::by_name(spec) {
        return Ok((parse_case(text)?, None));
    }
    let path = PathBuf::from(spec);
    let text = std::fs::read_to_string(&path).map_err(|e| input_err(&path, e))?;
    Ok((parse_case(&text)?, Some(path)))
}

/// Case given by `spec`, else `case.m` next to `dataset`.
fn case_for(spec: Option<&str>, dataset: &Path) -> Result<(GridGraph, Option<PathBuf>), Error> {
    match spec {
        Some(s) => load_case(s),
        None => {
            let p = dataset.parent().unwrap_or(Path::new(".")).join(CASE_FILE);
            load_case(p.to_str().ok_or_else(|| Error::Input("non-UTF-8 path".into()))?)
        }
    }
}

fn parse_buses(spec: &str) -> Result<Vec<u32>, Error> {
    spec.split(',')
        .map(|s| s.trim().parse::<u32>().map_err(|_| Error::Input(format!("bad bus id `{s}` in `{spec}`"))))
        .collect()
}

fn noise_model(kind: NoiseArg, tve: f64) -> NoiseModel {
    match kind {
        NoiseArg::Gaussian => NoiseModel::gaussian_tve(tve),
        NoiseArg::Gmm => NoiseModel::gmm_tve_default(),
        NoiseArg::None => NoiseModel::none(),
    }
}

fn architecture(f: &ArchFlags, buses: usize, components: usize) -> Architecture {
    Architecture {
        buses,
        hidden: f.hidden,
        heads: f.heads,
        components,
        extra_gcn: f.extra_gcn,
        attention: !f.no_attention,
        slope: f.slope,
        ..Architecture::new(buses)
    }
}

fn train_config(f: &TrainFlags) -> TrainConfig {
    TrainConfig {
        epochs: f.epochs,
        batch_size: f.batch_size,
        learning_rate: f.lr,
        final_learning_rate: f.final_lr,
        patience: f.patience,
        min_delta: f.min_delta,
        validation_fraction: f.val_fraction,
        seed: f.seed,
        optimizer: match f.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        loss_weighting: match f.loss {
            LossArg::Uniform => LossWeighting::Uniform,
            LossArg::Balanced => LossWeighting::Balanced,
        },
    }
}

fn artifact(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

pub fn datagen(a: &DatagenArgs, argv: &[String]) -> Result<(), Error> {
    let (g, case_path) = load_case(&a.case)?;
    let pmu = if a.pmu.trim() == "highest-voltage" {
        g.highest_voltage_buses()
    } else {
        parse_buses(&a.pmu)?
    };
    let mut cfg = DatagenConfig::new(a.count, a.seed, pmu);
    cfg.noise = noise_model(a.noise, a.tve);
    cfg.components = a.components;
    let t0 = Instant::now();
    let ds = build_dataset(&g, &cfg)?;
    let worst = (0..ds.len())
        .map(|s| {
            let t = ds.truth(s);
            let vm: Vec<f64> = (0..t.rows()).map(|i| t[(i, 0)]).collect();
            let va: Vec<f64> = (0..t.rows()).map(|i| t[(i, 1)]).collect();
            power_mismatch(&operating_grid(&g, ds.loads(s)), &vm, &va)
        })
        .try_fold(0.0f64, |m, x| x.map(|x| m.max(x)))?;
    log::info!("generated {} snapshots in {:.1?}", ds.len(), t0.elapsed());
    if !(worst < MISMATCH_LIMIT) {
        return Err(Error::Contract(format!(
            "generated state has power mismatch {worst:.3e} p.u. (limit {MISMATCH_LIMIT:e})"
        )));
    }
    make_dir(&a.out)?;
    let ds_path = artifact(&a.out, DATASET_FILE);
    let case_out = artifact(&a.out, CASE_FILE);
    write_dataset(&ds_path, &ds)?;
    std::fs::write(&case_out, g.to_case_string()).map_err(|e| input_err(&case_out, e))?;
    let mut m = RunManifest::new("datagen", argv, a).seed("datagen", a.seed);
    if let Some(p) = &case_path {
        m.input(p)?;
    }
    m.write(&a.out, &[ds_path.clone(), case_out])?;
    println!(
        "wrote {} snapshots of {} ({} buses, PMUs at {:?}) to {}; worst power mismatch {worst:.2e} p.u.",
        ds.len(),
        g.name(),
        g.bus_count(),
        ds.header.pmu_buses,
        ds_path.display()
    );
    Ok(())
}

fn checkpoint(model: &CgnnModel, g: &GridGraph, ds: &SnapshotDataset, stats: &Option<cgnnse::bddc::ChannelStats>) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        grid: g.clone(),
        pmu_buses: ds.header.pmu_buses.clone(),
        channel_stats: stats.clone(),
    }
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<(), Error> {
    let (g, case_path) = case_for(a.case.as_deref(), &a.dataset)?;
    let ds = read_dataset(&a.dataset, Some(&g))?;
    let cfg = train_config(&a.train);
    cfg.validate()?;
    let components = a.arch.components.unwrap_or(ds.header.components);
    let arch = architecture(&a.arch, ds.bus_count(), components);
    arch.validate()?;
    make_dir(&a.out)?;
    let (train_set, val_set) = split(&ds, cfg.validation_fraction, cfg.seed);
    let stats = match fit_stats(&train_set) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("no bad-data statistics stored: {e}");
            None
        }
    };
    let model = init_model(&train_set, arch, components, cfg.seed)?;
    let adj = build_adjacency(&g);
    let best_path = artifact(&a.out, MODEL_FILE);
    let last_path = artifact(&a.out, LAST_MODEL_FILE);
    let mut save_error = None;
    let mut wrote_last = false;
    let every = a.checkpoint_every;
    let mut hook = |rec: &cgnnse::train::EpochRecord, m: &CgnnModel, best: bool| {
        log::info!(
            "epoch {:>5}  train {:.4e}  val {:.4e}{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            if best { "  *" } else { "" }
        );
        let mut save = |p: &Path| {
            if let Err(e) = save_model(p, &checkpoint(m, &g, &ds, &stats)) {
                save_error.get_or_insert(e);
            }
        };
        if best {
            save(&best_path);
        }
        if every > 0 && rec.epoch % every == 0 {
            save(&last_path);
            wrote_last = true;
        }
    };
    let (model, report) = fit_split(model, &adj, &train_set, &val_set, &cfg, &mut hook)?;
    if let Some(e) = save_error {
        return Err(e.into());
    }
    save_model(&best_path, &checkpoint(&model, &g, &ds, &stats))?;
    let report_path = artifact(&a.out, "train_report.json");
    write_json(&report_path, &report)?;
    let mut files = vec![best_path.clone(), report_path];
    if wrote_last {
        files.push(last_path);
    }
    let mut m = RunManifest::new("train", argv, a).seed("train", cfg.seed);
    m.input(&a.dataset)?;
    if let Some(p) = &case_path {
        m.input(p)?;
    }
    m.write(&a.out, &files)?;
    println!(
        "best epoch {} of {}; validation MAPE {:.4}%, MAE {:.4} deg; model written to {}",
        report.best_epoch,
        report.stopped_epoch,
        report.validation.mape,
        report.validation.mae_deg,
        best_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct BusState {
    bus: u32,
    vm_pu: f64,
    va_deg: f64,
}

#[derive(Serialize)]
struct EstimateLine {
    snapshot: usize,
    wall_ms: f64,
    failed_pmus: Vec<u32>,
    flagged_pmus: Vec<u32>,
    screen: Option<cgnnse::bddc::BddcReport>,
    states: Vec<BusState>,
}

pub fn estimate(a: &EstimateArgs, argv: &[String]) -> Result<(), Error> {
    threshold(a.alpha)?;
    let ck = load_model(&a.model)?;
    let text = std::fs::read_to_string(&a.measurements).map_err(|e| input_err(&a.measurements, e))?;
    let readings = measurements::parse(&text, &ck.pmu_buses).map_err(|e| input_err(&a.measurements, e))?;
    let stats = match (&ck.channel_stats, a.no_screen) {
        (_, true) => None,
        (Some(s), false) => Some(s),
        (None, false) => {
            return Err(Error::Input(
                "checkpoint has no channel statistics; pass --no-screen to skip screening".into(),
            ))
        }
    };
    let outages = a
        .outage
        .iter()
        .map(|s| ck.grid.parse_branch_ref(s))
        .collect::<Result<Vec<_>, _>>()?;
    let grid = if outages.is_empty() { ck.grid.clone() } else { perturb_topology(&ck.grid, &outages)? };
    let adj = build_adjacency(&grid);
    let positions = pmu_positions(&ck.grid, &ck.pmu_buses)?;
    let n = ck.grid.bus_count();
    make_dir(&a.out)?;
    let mut lines = String::new();
    let mut times = Vec::with_capacity(readings.len());
    for (s, r) in readings.iter().enumerate() {
        let t0 = Instant::now();
        let mut z: Vec<f64> = Vec::with_capacity(2 * r.len());
        for (k, v) in r.iter().enumerate() {
            match (v, stats) {
                (Some((vm, va)), _) => z.extend([*vm, *va]),
                // Failed PMUs pass the screen at the training mean.
                (None, Some(st)) => z.extend([st.mean[2 * k], st.mean[2 * k + 1]]),
                (None, None) => z.extend([0.0, 0.0]),
            }
        }
        let report = match stats {
            Some(st) => {
                let (fixed, rep) = screen(&z, st, a.alpha)?;
                z = fixed;
                Some(rep)
            }
            None => None,
        };
        let mut mask = vec![false; n];
        let mut observed = Matrix::zeros(n, 2);
        for (k, &i) in positions.iter().enumerate() {
            if r[k].is_some() {
                mask[i] = true;
                observed[(i, 0)] = z[2 * k];
                observed[(i, 1)] = z[2 * k + 1];
            }
        }
        let pred = ck.model.predict(&adj, &observed, &mask)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        times.push(ms);
        let flagged_pmus = match &report {
            Some(rep) => ck
                .pmu_buses
                .iter()
                .enumerate()
                .filter(|(k, _)| r[*k].is_some() && (rep.flags[2 * k] || rep.flags[2 * k + 1]))
                .map(|(_, &b)| b)
                .collect(),
            None => Vec::new(),
        };
        let line = EstimateLine {
            snapshot: s,
            wall_ms: ms,
            failed_pmus: ck.pmu_buses.iter().zip(r).filter(|(_, v)| v.is_none()).map(|(&b, _)| b).collect(),
            flagged_pmus,
            screen: report,
            states: grid
                .buses()
                .iter()
                .enumerate()
                .map(|(i, b)| BusState {
                    bus: b.id,
                    vm_pu: pred[(i, 0)],
                    va_deg: pred[(i, 1)].to_degrees(),
                })
                .collect(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("line serializes"));
        lines.push('\n');
    }
    let states_path = artifact(&a.out, "states.jsonl");
    std::fs::write(&states_path, lines).map_err(|e| input_err(&states_path, e))?;
    let mut m = RunManifest::new("estimate", argv, a);
    m.input(&a.model)?;
    m.input(&a.measurements)?;
    m.write(&a.out, &[states_path.clone()])?;
    times.sort_by(f64::total_cmp);
    println!(
        "estimated {} snapshots (median {:.3} ms each) into {}",
        readings.len(),
        times[times.len() / 2],
        states_path.display()
    );
    Ok(())
}

pub fn study(a: &StudyArgs, argv: &[String]) -> Result<(), Error> {
    let kind = a.kind.kind();
    let (g, case_path) = case_for(a.case.as_deref(), &a.dataset)?;
    let ds = read_dataset(&a.dataset, Some(&g))?;
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(Error::Input(format!("--test-fraction must lie in (0, 1), got {}", a.test_fraction)));
    }
    if ds.len() < 2 {
        return Err(Error::Input("dataset needs at least 2 snapshots".into()));
    }
    let n_test = ((ds.len() as f64 * a.test_fraction).round() as usize).clamp(1, ds.len() - 1);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (pool, test) = (ds.subset(&idx[..ds.len() - n_test]), ds.subset(&idx[ds.len() - n_test..]));
    let ck = match &a.model {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    if let Some(ck) = &ck {
        if ck.grid.hash() != g.hash() {
            return Err(Error::Input("model was trained on a different grid than the dataset".into()));
        }
    }
    let components = a.arch.components.unwrap_or(ds.header.components);
    let cfg = StudyConfig {
        seed: a.train.seed,
        outages: a.outages,
        max_failures: a.max_failures,
        failure_cap: a.failure_cap,
        alpha: a.alpha,
        bad_fractions: a.bad_fractions.clone(),
        bad_seeds: a.bad_seeds,
        heads: a.sweep_heads.clone(),
        pmu_sets: a.pmu_set.iter().map(|s| parse_buses(s)).collect::<Result<_, _>>()?,
        random_pmu_sets: a.random_pmu_sets,
        components,
        arch: architecture(&a.arch, 0, components),
        train: train_config(&a.train),
        ..StudyConfig::default()
    };
    let data = StudyData {
        grid: &g,
        train: &pool,
        test: &test,
        model: ck.as_ref().map(|c| &c.model),
    };
    let mut report = run_study(kind, &data, &cfg)?;
    let files = write_report(&a.out, &mut report)?;
    let mut m = RunManifest::new("study", argv, a).seed("study", cfg.seed);
    m.input(&a.dataset)?;
    if let Some(p) = &a.model {
        m.input(p)?;
    }
    if let Some(p) = &case_path {
        m.input(p)?;
    }
    m.write(&a.out, &files)?;
    for t in &report.tables {
        println!("{}:", t.name);
        for r in &t.rows {
            println!(
                "  {:<28} {:<14} MAPE {:>9.4}%  MAE {:>9.4} deg  {}",
                r.scenario, r.series, r.mape, r.mae_deg, r.note
            );
        }
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    println!("report written to {}", a.out.join("report.json").display());
    Ok(())
}

/// Load draws for certification: the dataset's, or fresh samples from the
/// default load model.
fn certify_loads(a: &CertifyArgs, g: &GridGraph) -> Result<Vec<Vec<f64>>, Error> {
    if let Some(p) = &a.dataset {
        let ds = read_dataset(p, Some(g))?;
        return Ok((0..ds.len().min(a.snapshots)).map(|s| ds.loads(s).to_vec()).collect());
    }
    let history = synthesize_history(g, &HistorySpec::default());
    let sampler = LoadSampler::fit(&history, BandwidthRule::Silverman, Dependence::Copula)?;
    Ok((0..a.snapshots).map(|s| sampler.sample(g, &mut snapshot_rng(a.seed, s))).collect())
}

pub fn certify(a: &CertifyArgs, argv: &[String]) -> Result<(), Error> {
    let ck = load_model(&a.model)?;
    let g = &ck.grid;
    let loads = certify_loads(a, g)?;
    if loads.is_empty() {
        return Err(Error::Input("no load snapshots to certify".into()));
    }
    let outages = enumerate_outages(g, a.k, a.cap, a.seed)?;
    let positions = pmu_positions(g, &ck.pmu_buses)?;
    let rows = sweep_contingencies(&ck.model, g, &loads, &positions, &outages)?;
    make_dir(&a.out)?;
    let csv_path = artifact(&a.out, "certificates.csv");
    write_csv(&csv_path, &rows)?;
    let violations: Vec<&str> = rows.iter().filter(|r| r.violated).map(|r| r.outage.as_str()).collect();
    let skipped: usize = rows.iter().map(|r| r.skipped).sum();
    let mut m = RunManifest::new("certify", argv, a).seed("certify", a.seed);
    m.input(&a.model)?;
    if let Some(p) = &a.dataset {
        m.input(p)?;
    }
    m.write(&a.out, &[csv_path.clone()])?;
    let worst = rows
        .iter()
        .map(|r| if r.bound > 0.0 { r.measured / r.bound } else { 0.0 })
        .fold(0.0, f64::max);
    println!(
        "{} outage sets of depth {} over {} load snapshots: {} violations, worst measured/bound {:.3e}, {} skipped solves; table in {}",
        rows.len(),
        a.k,
        loads.len(),
        violations.len(),
        worst,
        skipped,
        csv_path.display()
    );
    if !violations.is_empty() {
        return Err(Error::Contract(format!("bound violated for outages {violations:?}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    kind: &'static str,
    header: &'a cgnnse::datagen::DatasetHeader,
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    kind: &'static str,
    grid: &'a str,
    grid_hash: String,
    pmu_buses: &'a [u32],
    arch: &'a Architecture,
    parameters: usize,
    has_channel_stats: bool,
}

#[derive(Serialize)]
struct CaseSummary<'a> {
    kind: &'static str,
    name: &'a str,
    buses: usize,
    branches: usize,
    generators: usize,
    hash: String,
    highest_voltage_buses: Vec<u32>,
}

#[derive(Serialize)]
struct ManifestSummary<'a> {
    kind: &'static str,
    manifest: &'a RunManifest,
    changed_artifacts: Vec<String>,
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

pub fn inspect(a: &InspectArgs) -> Result<(), Error> {
    let path = if a.path.is_dir() { a.path.join(MANIFEST_FILE) } else { a.path.clone() };
    let bytes = std::fs::read(&path).map_err(|e| input_err(&path, e))?;
    if bytes.starts_with(cgnnse::datagen::dataset::DATASET_MAGIC) {
        let ds = SnapshotDataset::from_bytes(&bytes)?;
        print_json(&DatasetSummary {
            kind: "dataset",
            header: &ds.header,
        });
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes)?;
        print_json(&ModelSummary {
            kind: "checkpoint",
            grid: ck.grid.name(),
            grid_hash: ck.grid.hash(),
            pmu_buses: &ck.pmu_buses,
            arch: &ck.model.arch,
            parameters: ck.model.param_count(),
            has_channel_stats: ck.channel_stats.is_some(),
        });
    } else if path.extension().is_some_and(|e| e == "json") {
        let m = RunManifest::read(&path)?;
        let changed = m.verify(&path);
        print_json(&ManifestSummary {
            kind: "manifest",
            manifest: &m,
            changed_artifacts: changed.clone(),
        });
        if !changed.is_empty() {
            return Err(Error::Contract(format!("artifacts changed since the run: {changed:?}")));
        }
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Input(format!("{}: unrecognized file", path.display())))?;
        let g = parse_case(&text)?;
        print_json(&CaseSummary {
            kind: "case",
            name: g.name(),
            buses: g.bus_count(),
            branches: g.branches().len(),
            generators: g.generators().len(),
            hash: g.hash(),
            highest_voltage_buses: g.highest_voltage_buses(),
        });
    }
    Ok(())
}
