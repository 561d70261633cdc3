//! Subcommand implementations.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use flim_core::flim::{build_encoder, EncoderModel, EncoderSpec, FilterBank};
use flim_core::markers::Modality;
use flim_core::metrics::{comparison_table, DiceReport};
use flim_core::phantom::{generate_dataset, load_case, DatasetManifest, PhantomSpec};
use flim_core::pipeline::{encoder_for, evaluate_model, msflim_grid, train_model, Dataset, ExperimentConfig, Layer1};
use flim_core::sunet::{Regime, SunetModel};
use flim_core::volume::write_atomic;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{load_config_file, put, resolve, Recorder};
use crate::{
    Cli, Command, CompareArgs, EncoderArgs, EncoderCmd, EvalArgs, FlimArgs, FlimCmd, GridArgs, MarkerArgs, MsflimCmd,
    PhantomArgs, PhantomCmd, ServeArgs, TrainArgs,
};

pub enum Failure {
    /// Contradictory or unusable arguments (exit code 2).
    Usage(String),
    /// Anything that went wrong while running (exit code 1).
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<flim_core::Error> for Failure {
    fn from(e: flim_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run(cli: Cli) -> Outcome {
    let file = load_config_file(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom(PhantomCmd::Gen(a)) => phantom_gen(&file, a),
        Command::Flim(FlimCmd::Estimate(a)) => flim_estimate(&file, a),
        Command::Msflim(MsflimCmd::Grid(a)) => msflim_grid_cmd(&file, a),
        Command::Encoder(EncoderCmd::Build(a)) => encoder_build(&file, a),
        Command::Train(a) => train_cmd(&file, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn modalities(s: &str) -> std::result::Result<Vec<Modality>, Failure> {
    match s {
        "both" => Ok(Modality::ALL.to_vec()),
        other => Ok(vec![other.parse().map_err(|e: flim_core::Error| usage(e.to_string()))?]),
    }
}

/// Checks the value count of a comma-separated flag.
fn counted<T>(flag: &str, v: Option<Vec<T>>, n: usize) -> std::result::Result<Option<Vec<T>>, Failure> {
    match v {
        Some(v) if v.len() != n => Err(usage(format!("--{flag} takes {n} comma-separated values, got {}", v.len()))),
        v => Ok(v),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PhantomGenConfig {
    n: usize,
    split: [f64; 3],
    marker_voxels: usize,
    spec: PhantomSpec,
}

impl Default for PhantomGenConfig {
    fn default() -> Self {
        Self {
            n: 30,
            split: [0.7, 0.1, 0.2],
            marker_voxels: 20,
            spec: PhantomSpec::default(),
        }
    }
}

fn phantom_gen(file: &Value, a: PhantomArgs) -> Outcome {
    let mut flags = json!({});
    put(&mut flags, &["n"], a.n);
    put(&mut flags, &["marker_voxels"], a.marker_voxels);
    put(&mut flags, &["spec", "seed"], a.seed);
    put(&mut flags, &["spec", "size"], a.size.map(|s| [s, s, s]));
    put(&mut flags, &["split"], counted("split", a.split, 3)?);
    let section = file.get("phantom").cloned().unwrap_or(json!({}));
    let cfg: PhantomGenConfig = resolve(&section, &flags)?;
    cfg.spec.validate().map_err(|e| usage(e.to_string()))?;
    let out = &a.out.out;
    let mut rec = Recorder::new("phantom gen");
    rec.config(&cfg);
    rec.seeds(json!({ "phantom": cfg.spec.seed }));
    let manifest = generate_dataset(out, &cfg.spec, cfg.n, cfg.split, cfg.marker_voxels)?;
    for id in manifest.all() {
        rec.output(out.join(id));
    }
    rec.output(out.join(flim_core::phantom::MANIFEST_FILE));
    eprintln!(
        "{} cases ({} train, {} val, {} test) in {}",
        manifest.n,
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        out.display()
    );
    rec.finish(out)?;
    Ok(())
}

/// Resolves the experiment config from the file and the shared marker flags.
fn experiment(file: &Value, m: &MarkerArgs, extra: impl FnOnce(&mut Value)) -> anyhow::Result<ExperimentConfig> {
    let mut flags = json!({});
    put(&mut flags, &["marked_cases"], m.marked_cases);
    put(&mut flags, &["seed"], m.seed);
    put(&mut flags, &["kernel"], m.kernel);
    put(&mut flags, &["clusters_per_marker"], m.clusters_per_marker);
    extra(&mut flags);
    resolve(file, &flags)
}

fn seeds(cfg: &ExperimentConfig) -> Value {
    json!({
        "seed": cfg.seed,
        "msflim": cfg.msflim_seed(),
        "encoder": cfg.encoder_seed(),
        "init": cfg.init_seed(),
        "train": cfg.train_config().seed,
    })
}

fn load_dataset(m: &MarkerArgs, cfg: &ExperimentConfig, rec: &mut Recorder) -> anyhow::Result<Dataset> {
    let ds = Dataset::load(&m.data.data, cfg.marked_cases)
        .with_context(|| format!("loading dataset {}", m.data.data.display()))?;
    rec.input(&m.data.data);
    Ok(ds)
}

fn bank_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("bank_{}.fb", m.stem()))
}

fn encoder_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("encoder_{}.fenc", m.stem()))
}

fn flim_estimate(file: &Value, a: FlimArgs) -> Outcome {
    let cfg = experiment(file, &a.markers, |f| put(f, &["target_bank"], a.target_bank))?;
    let mods = modalities(&a.markers.modality)?;
    let out = &a.out.out;
    create_out(out)?;
    let mut rec = Recorder::new("flim estimate");
    rec.config(&cfg);
    rec.seeds(seeds(&cfg));
    let ds = load_dataset(&a.markers, &cfg, &mut rec)?;
    let spec = EncoderSpec {
        layers: cfg.encoder_spec().layers[..1].to_vec(),
    };
    for m in mods {
        let enc = build_encoder(&ds.marked_images(m), &ds.marker_sets(m), &spec, None, cfg.encoder_seed())?;
        let path = bank_path(out, m);
        enc.banks[0].save(&path)?;
        eprintln!("{}: {} filters -> {}", m.stem(), enc.banks[0].len(), path.display());
        rec.output(path);
    }
    rec.finish(out)?;
    Ok(())
}

fn parse_grid(cells: &[String]) -> std::result::Result<Vec<(usize, usize)>, Failure> {
    cells
        .iter()
        .map(|c| {
            let (a, b) = c.split_once('x').ok_or_else(|| usage(format!("grid cell {c:?} is not N1xN2")))?;
            let n = |s: &str| s.trim().parse::<usize>().map_err(|_| usage(format!("grid cell {c:?} is not N1xN2")));
            Ok((n(a)?, n(b)?))
        })
        .collect()
}

fn msflim_grid_cmd(file: &Value, a: GridArgs) -> Outcome {
    let grid = a.grid.as_deref().map(parse_grid).transpose()?;
    let cfg = experiment(file, &a.markers, |f| {
        put(f, &["grid"], grid);
        put(f, &["target_bank"], a.target_bank);
        put(f, &["tau"], a.tau);
    })?;
    let mods = modalities(&a.markers.modality)?;
    let out = &a.out.out;
    create_out(out)?;
    let mut rec = Recorder::new("msflim grid");
    rec.config(&cfg);
    rec.seeds(seeds(&cfg));
    let ds = load_dataset(&a.markers, &cfg, &mut rec)?;
    for m in mods {
        let sel = msflim_grid(ds.marked(), &ds.marker_sets(m), m, &cfg)?;
        for run in &sel.runs {
            let dir = out.join("runs").join(m.stem()).join(&run.run_id);
            run.save(&dir)?;
            rec.output(dir);
        }
        let ledger = out.join(format!("ledger_{}.json", m.stem()));
        sel.report.ledger.save(&ledger)?;
        let oracle = out.join(format!("oracle_{}.json", m.stem()));
        write_json(&oracle, &sel.report)?;
        let bank = bank_path(out, m);
        sel.bank.save(&bank)?;
        eprintln!(
            "{}: {} runs, bank of {}, uncovered regions {:?}",
            m.stem(),
            sel.runs.len(),
            sel.bank.len(),
            sel.report.uncovered
        );
        rec.output(ledger);
        rec.output(oracle);
        rec.output(bank);
    }
    rec.finish(out)?;
    Ok(())
}

/// Builds an encoder, taking layer 1 from `banks` when given.
fn build_one(ds: &Dataset, m: Modality, banks: Option<&Path>, cfg: &ExperimentConfig, rec: &mut Recorder) -> anyhow::Result<EncoderModel> {
    match banks {
        Some(dir) => {
            let path = bank_path(dir, m);
            let bank = FilterBank::load(&path).with_context(|| format!("loading {}", path.display()))?;
            rec.input(path);
            Ok(build_encoder(&ds.marked_images(m), &ds.marker_sets(m), &cfg.encoder_spec(), Some(bank), cfg.encoder_seed())?)
        }
        None => Ok(encoder_for(ds, m, Layer1::Flim, cfg)?.0),
    }
}

fn encoder_build(file: &Value, a: EncoderArgs) -> Outcome {
    let deep = counted("deep-widths", a.deep_widths, 2)?;
    let cfg = experiment(file, &a.markers, |f| {
        put(f, &["target_bank"], a.target_bank);
        put(f, &["deep_widths"], deep);
    })?;
    let mods = modalities(&a.markers.modality)?;
    let out = &a.out.out;
    create_out(out)?;
    let mut rec = Recorder::new("encoder build");
    rec.config(&cfg);
    rec.seeds(seeds(&cfg));
    let ds = load_dataset(&a.markers, &cfg, &mut rec)?;
    for m in mods {
        let enc = build_one(&ds, m, a.banks.as_deref(), &cfg, &mut rec)?;
        let path = encoder_path(out, m);
        enc.save(&path)?;
        eprintln!("{}: widths {:?} -> {}", m.stem(), enc.widths(), path.display());
        rec.output(path);
    }
    rec.finish(out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Random,
    Flim,
    Bank,
}

fn train_cmd(file: &Value, a: TrainArgs) -> Outcome {
    let regime: Regime = a
        .regime
        .as_deref()
        .ok_or_else(|| usage("--regime is required (fbp, pbp or ft)"))?
        .parse()
        .map_err(|e: flim_core::Error| usage(e.to_string()))?;
    let init = match a.init.as_deref() {
        None if a.encoders.is_some() => Init::Flim,
        None => match regime {
            Regime::Fbp => Init::Random,
            _ => Init::Flim,
        },
        Some("random") => Init::Random,
        Some("flim") => Init::Flim,
        Some("bank") => Init::Bank,
        Some(other) => return Err(usage(format!("unknown init {other:?}; expected random, flim or bank"))),
    };
    match (regime, init) {
        (Regime::Fbp, Init::Flim | Init::Bank) => {
            return Err(usage("regime fbp trains from random encoders; use pbp or ft with marker-based encoders"))
        }
        (Regime::Pbp | Regime::Ft, Init::Random) => {
            return Err(usage(format!("regime {} needs marker-based encoders, not random ones", regime.as_str())))
        }
        _ => {}
    }
    if init == Init::Random && (a.encoders.is_some() || a.banks.is_some()) {
        return Err(usage("random initialization takes neither --encoders nor --banks"));
    }
    if a.encoders.is_some() && a.banks.is_some() {
        return Err(usage("--encoders and --banks are mutually exclusive"));
    }
    if init == Init::Flim && a.banks.is_some() {
        return Err(usage("--banks goes with --init bank"));
    }
    let deep = counted("deep-widths", a.deep_widths, 2)?;
    let decoder = counted("decoder-widths", a.decoder_widths, 3)?;
    let cfg = experiment(file, &a.markers, |f| {
        put(f, &["train", "epochs"], a.epochs);
        put(f, &["train", "lr0"], a.lr);
        put(f, &["target_bank"], a.target_bank);
        put(f, &["deep_widths"], deep);
        put(f, &["sunet", "decoder_widths"], decoder);
    })?;
    let out = &a.out.out;
    create_out(out)?;
    let mut rec = Recorder::new("train");
    rec.config(&json!({ "regime": regime, "init": format!("{init:?}").to_lowercase(), "experiment": cfg }));
    rec.seeds(seeds(&cfg));
    let ds = load_dataset(&a.markers, &cfg, &mut rec)?;
    let encoders = match (init, &a.encoders) {
        (Init::Random, _) => None,
        (_, Some(dir)) => {
            let mut load = |m| -> anyhow::Result<EncoderModel> {
                let path = encoder_path(dir, m);
                let enc = EncoderModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
                rec.input(path);
                Ok(enc)
            };
            Some((load(Modality::Flair)?, load(Modality::T1Gd)?))
        }
        (Init::Flim, None) => Some((build_one(&ds, Modality::Flair, None, &cfg, &mut rec)?, build_one(&ds, Modality::T1Gd, None, &cfg, &mut rec)?)),
        (Init::Bank, None) => match &a.banks {
            Some(dir) => Some((
                build_one(&ds, Modality::Flair, Some(dir), &cfg, &mut rec)?,
                build_one(&ds, Modality::T1Gd, Some(dir), &cfg, &mut rec)?,
            )),
            None => Some((
                encoder_for(&ds, Modality::Flair, Layer1::Msflim, &cfg)?.0,
                encoder_for(&ds, Modality::T1Gd, Layer1::Msflim, &cfg)?.0,
            )),
        },
    };
    let (model, curve) = train_model(&ds, encoders.as_ref().map(|(f, t)| (f, t)), regime, &cfg, |r| {
        eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}", r.epoch, r.mean_loss, r.lr)
    })?;
    let ckpt = out.join("model.ckpt");
    model.save(&ckpt)?;
    let loss = out.join("loss.csv");
    curve.save_csv(&loss)?;
    rec.output(ckpt);
    rec.output(loss);
    rec.finish(out)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let data = &a.data.data;
    let manifest = DatasetManifest::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let ids = match a.split.as_str() {
        "train" => &manifest.train,
        "val" => &manifest.val,
        "test" => &manifest.test,
        other => return Err(usage(format!("unknown split {other:?}; expected train, val or test"))),
    };
    let out = &a.out.out;
    create_out(out)?;
    let mut rec = Recorder::new("eval");
    rec.config(&json!({ "split": a.split }));
    rec.input(data);
    rec.input(&a.model);
    let model = SunetModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let cases = ids.iter().map(|id| load_case(data, id)).collect::<flim_core::Result<Vec<_>>>()?;
    let report = evaluate_model(&model, &cases)?;
    let csv = out.join("dice.csv");
    report.save_csv(&csv)?;
    let json_path = out.join("report.json");
    write_json(&json_path, &report)?;
    println!("{}", report.summary());
    rec.output(csv);
    rec.output(json_path);
    rec.finish(out)?;
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Outcome {
    let mut reports = Vec::with_capacity(a.reports.len());
    let mut rec = Recorder::new("compare");
    for spec in &a.reports {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("report {spec:?} is not NAME=PATH")))?;
        let mut path = PathBuf::from(path);
        if path.is_dir() {
            path = path.join("report.json");
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: DiceReport =
            serde_json::from_str(&text).map_err(|e| anyhow!("parsing {}: {e}", path.display()))?;
        rec.input(&path);
        reports.push((name.to_string(), report));
    }
    let out = &a.out.out;
    create_out(out)?;
    let table = comparison_table(&reports);
    let path = out.join("comparison.csv");
    write_atomic(&path, table.as_bytes())?;
    print!("{table}");
    rec.output(path);
    rec.finish(out)?;
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Outcome {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let cfg = flim_studio::StudioConfig {
        data_root: a.data.data,
        out_dir: a.out.out,
        workers: a.workers,
    };
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    eprintln!("studio listening on http://{addr}");
    rt.block_on(flim_studio::serve(cfg, addr, a.static_dir))
        .context("studio server")?;
    Ok(())
}
