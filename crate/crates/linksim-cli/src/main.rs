//! `linksim` — train, tune and score OFDM links from the command line.
//!
//! Every verb resolves its run configuration the same way: built-in defaults,
//! then the config a checkpoint was trained with (if one is loaded), then
//! `--config FILE`, then flag overrides. The effective configuration is
//! echoed into `config.json` next to the outputs and embedded in every JSON
//! artifact, so a result can always be traced to the exact settings that
//! produced it. With a fixed `--seed`, every command writes bit-identical
//! outputs on repeat runs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use linksim::channel::ChannelProfile;
use linksim::checkpoint::{self, Checkpoint};
use linksim::coding::LdpcCode;
use linksim::config::{self, Settings};
use linksim::constellation::{index_bits, Constellation};
use linksim::eval::{
    adapt_csv, link_adapt, papr_ccdf, papr_csv, sweep, sweep_csv, Budget, LinkSetup, RxKind,
};
use linksim::phy::{PilotLayout, FS};
use linksim::receiver::{RxShape, TuneMode};
use linksim::training::{self, TrainConfig, TrainRun};

#[derive(Parser)]
#[command(
    name = "linksim",
    version,
    about = "End-to-end differentiable OFDM link simulator",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the learned transceiver from scratch and write a checkpoint.
    Train(TrainArgs),
    /// Continue training from a checkpoint (adapters-only by default).
    Finetune(FinetuneArgs),
    /// Sweep coded BER/BLER/throughput over Eb/N0.
    Evaluate(EvaluateArgs),
    /// Measure the PAPR CCDF of the transmit waveform.
    Papr(CommonArgs),
    /// Dump the constellation as text tables, one file per order.
    ExportConstellation(CommonArgs),
    /// Pick the fastest modulation order per Eb/N0 under a BLER target.
    LinkAdapt(EvaluateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file: `key = value` lines (dotted keys, `#` comments) or JSON.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; sets both train.seed and eval.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all outputs (created if missing).
    #[arg(long, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Checkpoint to load. Its stored config becomes the base layer.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Eb/N0 in dB: a comma list for sweeps, a `lo,hi` range for training.
    #[arg(long, value_name = "DB,..", allow_hyphen_values = true)]
    ebno: Option<String>,
    /// Terminal speed in km/h.
    #[arg(long, value_name = "KMH")]
    speed: Option<f64>,
    /// Channel profile: flat, cdla-like .. cdle-like.
    #[arg(long)]
    profile: Option<String>,
    /// Pilot layout: none or 2sym.
    #[arg(long, value_name = "none|2sym")]
    pilot_layout: Option<String>,
    /// Cyclic prefix length in samples (0 disables, 6 is conventional).
    #[arg(long, value_name = "SAMPLES")]
    cp: Option<usize>,
    /// dB offset on the noise power reported to the receiver.
    #[arg(long, value_name = "DB", allow_hyphen_values = true)]
    noise_mismatch: Option<f64>,
    /// Clip amplitudes to RATE x RMS before PAPR measurement.
    #[arg(long, value_name = "RATE")]
    clip_rate: Option<f64>,
    /// Extra overrides as dotted paths, e.g. `-s train.lr=5e-4`. Applied
    /// last, after the named flags.
    #[arg(long = "set", short = 's', value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// What to tune: full or adapter-only.
    #[arg(long, default_value = "adapter-only")]
    mode: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Receiver: neural, baseline (LS/LMMSE) or perfect-csi. Defaults to
    /// neural with a checkpoint, baseline without.
    #[arg(long)]
    mode: Option<String>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Finetune(args) => cmd_finetune(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Papr(common) => cmd_papr(common),
        Cmd::ExportConstellation(common) => cmd_export(common),
        Cmd::LinkAdapt(args) => cmd_link_adapt(args),
    }
}

// ---- configuration plumbing -------------------------------------------------

/// Comma-separated dB values → JSON array.
fn parse_db_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad Eb/N0 value {:?}", p.trim()))
        })
        .collect()
}

/// Maps the named flags onto dotted config paths. `train_side` decides where
/// the ambiguous flags (Eb/N0, speed, profile, cp) land.
fn flag_overrides(common: &CommonArgs, train_side: bool) -> Result<Vec<(String, Value)>> {
    let mut o: Vec<(String, Value)> = Vec::new();
    let mut push = |path: &str, v: Value| o.push((path.to_string(), v));
    if let Some(seed) = common.seed {
        push("train.seed", json!(seed));
        push("eval.seed", json!(seed));
    }
    if let Some(list) = &common.ebno {
        let vals = parse_db_list(list)?;
        if train_side {
            if vals.len() != 2 {
                bail!("training takes an Eb/N0 range: --ebno LO,HI");
            }
            push("train.ebno_db", json!(vals));
        } else {
            if vals.is_empty() {
                bail!("--ebno needs at least one value");
            }
            push("eval.ebno_db", json!(vals));
        }
    }
    if let Some(speed) = common.speed {
        push("train.speed_kmh", json!(speed));
        push("eval.speed_kmh", json!(speed));
    }
    if let Some(profile) = &common.profile {
        push("train.profiles", json!([profile]));
        push("eval.profile", json!(profile));
    }
    if let Some(layout) = &common.pilot_layout {
        push("eval.pilot_layout", json!(layout));
    }
    if let Some(cp) = common.cp {
        push("train.cp_len", json!(cp));
        push("eval.cp_len", json!(cp));
    }
    if let Some(db) = common.noise_mismatch {
        push("eval.noise_mismatch_db", json!(db));
    }
    if let Some(rate) = common.clip_rate {
        push("eval.clip_rate", json!(rate));
    }
    for kv in &common.set {
        let Some((path, value)) = kv.split_once('=') else {
            bail!("--set expects PATH=VALUE, got {kv:?}");
        };
        o.push((path.trim().to_string(), config::parse_value(value.trim())));
    }
    Ok(o)
}

struct Resolved {
    settings: Settings,
    effective: Value,
    hash: String,
    shape: RxShape,
}

/// Defaults ← checkpoint config (if any) ← file ← flags, then typed and
/// validated. The effective document is what gets echoed everywhere.
fn resolve(
    common: &CommonArgs,
    base: Option<&Value>,
    train_side: bool,
) -> Result<Resolved> {
    let file_text = match &common.config {
        Some(path) => Some(
            fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
        ),
        None => None,
    };
    let overrides = flag_overrides(common, train_side)?;
    let (settings, effective, hash) =
        config::resolve_layers(base, file_text.as_deref(), &overrides)?;
    let shape = settings.shape.to_shape()?;
    Ok(Resolved { settings, effective, hash, shape })
}

/// Every run writes its effective config next to its outputs.
fn emit_config(dir: &Path, effective: &Value) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = serde_json::to_string_pretty(effective)?;
    fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn require_checkpoint(common: &CommonArgs, verb: &str) -> Result<Checkpoint> {
    let Some(path) = &common.checkpoint else {
        bail!("{verb} needs --checkpoint");
    };
    load_checkpoint(path)
}

fn write_json(path: &Path, doc: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(doc)? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "-".to_string(),
    }
}

// ---- train / finetune -------------------------------------------------------

fn announce_papr_constraint(cfg: &TrainConfig) {
    match cfg.eps_p_db {
        Some(db) => println!("PAPR constraint: eps_p = {db} dB"),
        // The constraint is opt-in; say so rather than silently skipping it.
        None => println!("notice: train.eps_p_db is not set; training runs unconstrained"),
    }
}

fn finish_training(
    out_dir: &Path,
    params: &linksim::autodiff::ParamSet,
    run: &TrainRun,
    effective: &Value,
    hash: &str,
) -> Result<()> {
    let ckpt = out_dir.join("checkpoint.ckpt");
    checkpoint::save(&ckpt, params, Some(&run.adam), &run.state, effective, hash)?;
    println!(
        "finished: {} steps over {} outer iterations, final ce {}, final papr penalty {}",
        run.state.step,
        run.state.outer,
        fmt_opt(run.final_ce),
        fmt_opt(run.final_lp)
    );
    println!("wrote {}", ckpt.display());
    println!("config hash: {hash}");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let common = args.common;
    if common.checkpoint.is_some() {
        bail!("train starts from scratch; use finetune to continue a checkpoint");
    }
    let r = resolve(&common, None, true)?;
    emit_config(&common.out_dir, &r.effective)?;
    announce_papr_constraint(&r.settings.train);

    let mut params = training::init_params(&r.shape, r.settings.train.seed)?;
    let log_path = common.out_dir.join("train.log.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let run = training::train(&mut params, &r.shape, &r.settings.train, Some(&mut log))?;
    log.flush()?;
    println!("wrote {}", log_path.display());
    finish_training(&common.out_dir, &params, &run, &r.effective, &r.hash)
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let common = args.common;
    let Some(mode) = TuneMode::parse(&args.mode) else {
        bail!("--mode must be full or adapter-only, got {:?}", args.mode);
    };
    let ck = require_checkpoint(&common, "finetune")?;

    // Base layer: the checkpoint's config with its training section turned
    // into tuning defaults (smaller budget, lower rate). The file and flags
    // still have the last word.
    let (base_settings, _, _) = config::resolve_layers(Some(&ck.config), None, &[])?;
    let mut base = ck.config.clone();
    if let Some(obj) = base.as_object_mut() {
        obj.insert(
            "train".to_string(),
            serde_json::to_value(TrainConfig::finetune_from(&base_settings.train))?,
        );
    }
    let r = resolve(&common, Some(&base), true)?;
    emit_config(&common.out_dir, &r.effective)?;
    announce_papr_constraint(&r.settings.train);
    println!("tuning mode: {}", mode.as_str());

    let mut params = ck.params;
    let log_path = common.out_dir.join("train.log.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let run = training::finetune(&mut params, &r.shape, &r.settings.train, mode, Some(&mut log))?;
    log.flush()?;
    println!("wrote {}", log_path.display());
    finish_training(&common.out_dir, &params, &run, &r.effective, &r.hash)
}

// ---- evaluation verbs -------------------------------------------------------

fn parse_rx(s: &str) -> Result<RxKind> {
    match s {
        "neural" => Ok(RxKind::Neural),
        "baseline" | "lmmse" => Ok(RxKind::Lmmse),
        "perfect-csi" => Ok(RxKind::PerfectCsi),
        other => bail!("--mode must be neural, baseline or perfect-csi, got {other:?}"),
    }
}

/// Shared state for evaluate / papr / link-adapt: the resolved config plus
/// the constellation (learned from the checkpoint, else Gray QAM) and the
/// code and channel the sweep runs over.
struct EvalEnv {
    r: Resolved,
    ck: Option<Checkpoint>,
    cons: Constellation,
    code: LdpcCode,
    profile: ChannelProfile,
}

impl EvalEnv {
    fn new(common: &CommonArgs, qam_order: impl FnOnce(&Settings) -> usize) -> Result<Self> {
        let ck = match &common.checkpoint {
            Some(path) => Some(load_checkpoint(path)?),
            None => None,
        };
        let r = resolve(common, ck.as_ref().map(|c| &c.config), false)?;
        let cons = match &ck {
            Some(ck) => Constellation::from_params(&ck.params)?,
            None => Constellation::qam(qam_order(&r.settings))?,
        };
        let code = LdpcCode::new(r.settings.eval.code_n, r.settings.eval.code_seed)?;
        let profile = ChannelProfile::by_name(
            &r.settings.eval.profile,
            r.settings.eval.speed_kmh,
            r.settings.eval.carrier_hz,
            FS,
            r.settings.eval.delay_spread_s,
        )?;
        Ok(EvalEnv { r, ck, cons, code, profile })
    }

    fn rx_kind(&self, flag: Option<&str>) -> Result<RxKind> {
        let rx = match flag {
            Some(s) => parse_rx(s)?,
            None if self.ck.is_some() => RxKind::Neural,
            None => RxKind::Lmmse,
        };
        if rx == RxKind::Neural && self.ck.is_none() {
            bail!("neural mode needs --checkpoint");
        }
        if rx == RxKind::Lmmse && self.r.settings.eval.layout()? == PilotLayout::None {
            bail!(
                "the baseline receiver estimates the channel from pilots; \
                 use --pilot-layout 2sym or another --mode"
            );
        }
        Ok(rx)
    }

    fn setup(&self) -> Result<LinkSetup<'_>> {
        Ok(LinkSetup {
            constellation: &self.cons,
            code: &self.code,
            profile: &self.profile,
            layout: self.r.settings.eval.layout()?,
            n_r: self.r.shape.n_r,
            n_sym: self.r.shape.n_sym,
            n_sc: self.r.shape.n_sc,
            cp_len: self.r.settings.eval.cp_len,
            noise_mismatch_db: self.r.settings.eval.noise_mismatch_db,
            neural: self.ck.as_ref().map(|ck| (&ck.params, &self.r.shape)),
        })
    }

    fn budget(&self) -> Budget {
        Budget {
            max_slots: self.r.settings.eval.slots,
            min_errors: self.r.settings.eval.min_errors as u64,
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let common = args.common;
    let env = EvalEnv::new(&common, |s| s.eval.order)?;
    let rx = env.rx_kind(args.mode.as_deref())?;
    emit_config(&common.out_dir, &env.r.effective)?;

    let e = &env.r.settings.eval;
    println!(
        "evaluating {} receiver: M={}, {} over {:?} dB, pilots {}, cp {}",
        rx.as_str(),
        e.order,
        e.profile,
        e.ebno_db,
        e.pilot_layout,
        e.cp_len
    );
    let rows = sweep(&env.setup()?, rx, e.order, &e.ebno_db, env.budget(), e.seed)?;
    for p in &rows {
        println!(
            "{:>7.2} dB  ber {:.4e} (±{:.1e})  bler {:.4e} (±{:.1e})  {:>8.4} Mb/s  [{} slots, {} bit errors]",
            p.ebno_db,
            p.ber,
            p.ber_ci95,
            p.bler,
            p.bler_ci95,
            p.throughput_bps / 1e6,
            p.slots,
            p.bit_errors
        );
    }
    write_text(&common.out_dir.join("sweep.csv"), &sweep_csv(&rows))?;
    let doc = json!({
        "config_hash": env.r.hash,
        "config": env.r.effective,
        "rows": rows,
    });
    write_json(&common.out_dir.join("sweep.json"), &doc)
}

fn cmd_papr(common: CommonArgs) -> Result<()> {
    let env = EvalEnv::new(&common, |s| s.eval.order)?;
    emit_config(&common.out_dir, &env.r.effective)?;

    let e = &env.r.settings.eval;
    let ccdf = papr_ccdf(
        &env.cons,
        e.order,
        env.r.shape.n_sym,
        env.r.shape.n_sc,
        e.papr_slots,
        e.clip_rate,
        e.seed,
    )?;
    let at = |db: f64| {
        ccdf.thresholds_db
            .iter()
            .position(|&t| t == db)
            .map(|i| ccdf.ccdf[i])
            .unwrap_or(f64::NAN)
    };
    let clip_note = match e.clip_rate {
        Some(r) => format!(", clipped at {r} x RMS"),
        None => String::new(),
    };
    println!(
        "papr ccdf over {} symbols (M={}{clip_note}): P(>6 dB) = {:.3e}, P(>8 dB) = {:.3e}",
        ccdf.samples,
        e.order,
        at(6.0),
        at(8.0)
    );
    write_text(&common.out_dir.join("papr.csv"), &papr_csv(&ccdf))?;
    let doc = json!({
        "config_hash": env.r.hash,
        "config": env.r.effective,
        "ccdf": ccdf,
    });
    write_json(&common.out_dir.join("papr.json"), &doc)
}

fn cmd_export(common: CommonArgs) -> Result<()> {
    let ck = require_checkpoint(&common, "export-constellation")?;
    let r = resolve(&common, Some(&ck.config), false)?;
    emit_config(&common.out_dir, &r.effective)?;

    let cons = Constellation::from_params(&ck.params)?;
    write_text(&common.out_dir.join("constellation.txt"), &cons.export_table()?)?;
    for &m in &r.settings.eval.orders {
        let sub = cons.subset(m)?;
        let mut table = String::from("index,bits,re,im\n");
        for (i, c) in sub.points.iter().enumerate() {
            let bits: String =
                index_bits(i, m).iter().map(|b| char::from(b'0' + b)).collect();
            table.push_str(&format!("{i},{bits},{:.17e},{:.17e}\n", c.re, c.im));
        }
        write_text(&common.out_dir.join(format!("constellation_m{m}.csv")), &table)?;
    }
    Ok(())
}

fn cmd_link_adapt(args: EvaluateArgs) -> Result<()> {
    let common = args.common;
    if common.checkpoint.is_none() {
        bail!("link-adapt needs a multi-order trained checkpoint (--checkpoint)");
    }
    let env = EvalEnv::new(&common, |s| s.eval.order)?;
    let rx = env.rx_kind(args.mode.as_deref())?;
    emit_config(&common.out_dir, &env.r.effective)?;

    let e = &env.r.settings.eval;
    println!(
        "adapting {} receiver over orders {:?}, target bler {}",
        rx.as_str(),
        e.orders,
        e.bler_target
    );
    let (picks, table) = link_adapt(
        &env.setup()?,
        rx,
        &e.orders,
        &e.ebno_db,
        e.bler_target,
        env.budget(),
        e.seed,
    )?;
    for p in &picks {
        println!(
            "{:>7.2} dB → M={}  (bler {:.3e}, {:>8.4} Mb/s){}",
            p.ebno_db,
            p.order,
            p.bler,
            p.throughput_bps / 1e6,
            if p.met_target { "" } else { "  [no order met the target]" }
        );
    }
    write_text(&common.out_dir.join("link_adapt.csv"), &adapt_csv(&picks))?;
    write_text(&common.out_dir.join("link_adapt_table.csv"), &sweep_csv(&table))?;
    let doc = json!({
        "config_hash": env.r.hash,
        "config": env.r.effective,
        "picks": picks,
        "table": table,
    });
    write_json(&common.out_dir.join("link_adapt.json"), &doc)
}
