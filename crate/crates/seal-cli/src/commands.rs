//! One function per subcommand, each resolving its parameters, calling
//! into the core library, and writing its artifacts under the output
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use seal_core::bounds::{
    calibration_bound, collision_bound, finetune_bound, geometric_bound, MomentEstimate,
};
use seal_core::harness::dataset::{flatten_images, load_dataset, DatasetSpec, ShapesDataset};
use seal_core::harness::eval::{eval_fpr, eval_lock, fpr_csv, lock_csv};
use seal_core::harness::mc::{
    calibration_csv, geometric_csv, validate_calibration_bound, validate_geometric_bound,
    GeometricTrialRow, McDist,
};
use seal_core::harness::prune::{detector_survival, prune_l1};
use seal_core::harness::train::{accuracy, train_small, TrainOpts};
use seal_core::io::{read_ppm, write_ppm};
use seal_core::lock::{
    inject_sqex, lock_internal, lock_sqex, make_edited, prune_detector, save_lock, LockKind,
    LockOptions,
};
use seal_core::models::{random_mlp, toy_cnn, toy_cnn_bn};
use seal_core::nn::{serial, GateKind};
use seal_core::rng::derive_seed;
use seal_core::stain::{
    load_record, save_record, schema_activation, schema_output, schema_weight, stain_conv,
    stain_mlp, verify_stain, OffResponse, OutputStainOpts, StainKind,
};
use seal_core::trigger::{
    apply_patch, extract_patch, patch_from_bytes, patch_to_bytes, Reduction, TriggerOpts,
};
use seal_core::{Network, Result, Rng, SealError, Tensor};
use serde::Serialize;

use crate::config::{self, Params};

/// Seed stream for squeeze-excite injection, clear of the detector,
/// trigger, probe, and disruptor streams the stain and lock surgeries
/// derive from the same run seed.
const STREAM_INJECT: u64 = 8;

/// Resolves the configuration, writes the manifest, and dispatches.
pub fn run(name: &str, matches: &clap::ArgMatches) -> Result<()> {
    let spec = config::command_spec(name)?;
    let params = config::resolve(spec, matches)?;
    let out = out_dir(matches)?;
    if spec.jobs {
        configure_jobs(matches)?;
    }
    announce(&config::write_manifest(&out, &params)?);
    match spec.name {
        "gen-model" => gen_model(&params, &out),
        "train" => train(&params, &out),
        "stain" => stain(&params, &out),
        "lock" => lock(&params, &out),
        "edited" => edited(&params, &out),
        "trigger" => trigger(&params, &out),
        "patch-apply" => patch_apply(&params, &out),
        "verify" => verify(&params, &out),
        "certify" => certify(&params, &out),
        "eval-fpr" => eval_fpr_cmd(&params, &out),
        "eval-lock" => eval_lock_cmd(&params, &out),
        "prune-attack" => prune_attack(&params, &out),
        "validate-bounds" => validate_bounds(&params, &out),
        other => Err(SealError::InvalidArgument(format!("unknown command {other:?}"))),
    }
}

fn out_dir(matches: &clap::ArgMatches) -> Result<PathBuf> {
    let dir = PathBuf::from(matches.get_one::<String>("out").expect("--out has a default"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn configure_jobs(matches: &clap::ArgMatches) -> Result<()> {
    let Some(raw) = matches.get_one::<String>("jobs") else {
        return Ok(());
    };
    let jobs: usize = raw
        .parse()
        .map_err(|_| SealError::InvalidArgument(format!("--jobs {raw:?} is not a count")))?;
    if jobs == 0 {
        return Err(SealError::InvalidArgument("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| SealError::InvalidArgument(format!("worker pool setup failed: {e}")))
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text)?;
    announce(&path);
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| SealError::Format(format!("{name} serialization failed: {e}")))?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn save_model(dir: &Path, name: &str, net: &Network) -> Result<()> {
    let path = dir.join(name);
    serial::save(net, &path)?;
    announce(&path);
    Ok(())
}

fn load_model(params: &Params, key: &str) -> Result<Network> {
    serial::load(&params.path(key)?)
}

/// Either the named dataset file or a generation spec keyed off
/// `data-seed`; exactly one source must be present.
fn resolve_dataset(p: &Params) -> Result<ShapesDataset> {
    match (p.opt_raw("data"), p.opt_u64("data-seed")?) {
        (Some(path), None) => load_dataset(Path::new(path)),
        (None, Some(seed)) => ShapesDataset::generate(DatasetSpec {
            seed,
            count: p.usize("data-count")?,
            channels: p.usize("data-channels")?,
            size: p.usize("data-size")?,
            classes: p.usize("data-classes")?,
            noise_sigma: p.f64("data-noise")?,
        }),
        (Some(_), Some(_)) => Err(SealError::InvalidArgument(
            "both data= and data-seed= given; choose one dataset source".into(),
        )),
        (None, None) => Err(SealError::InvalidArgument(
            "provide a dataset: data=<file> or data-seed=<seed>".into(),
        )),
    }
}

/// Flattens the dataset's images when the model takes flat vectors of
/// the matching size, so MLPs evaluate on image datasets directly.
fn fit_dataset(net: &Network, data: ShapesDataset) -> ShapesDataset {
    let flat_input = net.input_shape().len() == 1;
    let matches_flat = data
        .images
        .first()
        .is_some_and(|t| t.shape() != net.input_shape() && t.data().len() == net.input_shape()[0]);
    if flat_input && matches_flat {
        let images = flatten_images(&data.images);
        return ShapesDataset { images, ..data };
    }
    data
}

fn trigger_opts(p: &Params) -> Result<TriggerOpts> {
    Ok(TriggerOpts {
        iters: p.usize("trigger-iters")?,
        step_frac: p.f64("trigger-step-frac")?,
        restarts: p.usize("trigger-restarts")?,
        input_min: p.f32("input-min")?,
        input_max: p.f32("input-max")?,
    })
}

/// `index=min-l1` (the default) lets the surgery pick the unit; a
/// number pins it.
fn unit_index(p: &Params) -> Result<Option<usize>> {
    match p.str("index")? {
        "min-l1" => Ok(None),
        raw => raw
            .parse()
            .map(Some)
            .map_err(|_| {
                SealError::InvalidArgument(format!(
                    "index={raw:?} is neither a unit index nor min-l1"
                ))
            }),
    }
}

fn off_response(p: &Params) -> Result<OffResponse> {
    Ok(match p.str("off")? {
        "fixed" => OffResponse::Fixed(p.f64("off-value")?),
        "calibrated" => OffResponse::Calibrated,
        "calibrated_silence" => OffResponse::CalibratedSilence,
        other => {
            return Err(SealError::InvalidArgument(format!(
                "off={other:?} is not fixed, calibrated, or calibrated_silence"
            )))
        }
    })
}

fn position_pair(p: &Params) -> Result<Option<(usize, usize)>> {
    match (p.opt_usize("row")?, p.opt_usize("col")?) {
        (Some(row), Some(col)) => Ok(Some((row, col))),
        (None, None) => Ok(None),
        _ => Err(SealError::InvalidArgument("row= and col= go together".into())),
    }
}

fn message_bits(p: &Params) -> Result<Vec<bool>> {
    let raw = p.opt_raw("message").ok_or_else(|| {
        SealError::InvalidArgument("the message schemas need message=<bit string>".into())
    })?;
    raw.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(SealError::InvalidArgument(format!(
                "message contains {other:?}; only 0 and 1 are allowed"
            ))),
        })
        .collect()
}

fn gen_model(p: &Params, out: &Path) -> Result<()> {
    let seed = p.u64("seed")?;
    let mut rng = Rng::new(seed);
    let mut net = match p.str("arch")? {
        "mlp" => {
            let dims = p.usize_list("dims")?;
            random_mlp(&dims, &mut rng)?
        }
        "cnn" => toy_cnn(p.usize("channels")?, p.usize("size")?, p.usize("classes")?, &mut rng)?,
        "cnn_bn" | "cnn-bn" => {
            toy_cnn_bn(p.usize("channels")?, p.usize("size")?, p.usize("classes")?, &mut rng)?
        }
        other => {
            return Err(SealError::InvalidArgument(format!(
                "arch={other:?} is not mlp, cnn, or cnn_bn"
            )))
        }
    };
    if let Some(after) = p.opt_usize("sqex-after")? {
        net = inject_sqex(
            &net,
            after,
            p.usize("sqex-hidden")?,
            p.f64("sqex-scale")?,
            GateKind::from_name(p.str("sqex-gate")?)?,
            &mut Rng::new(derive_seed(seed, STREAM_INJECT)),
        )?;
    }
    save_model(out, "model.net", &net)
}

#[derive(Serialize)]
struct TrainSummary {
    train_accuracy: f64,
    eval_accuracy: Option<f64>,
}

fn train(p: &Params, out: &Path) -> Result<()> {
    let net = load_model(p, "model")?;
    let data = fit_dataset(&net, resolve_dataset(p)?);
    let opts = TrainOpts {
        epochs: p.usize("epochs")?,
        batch: p.usize("batch")?,
        lr: p.f64("lr")?,
        seed: p.u64("seed")?,
    };
    let (trained, train_accuracy) = train_small(&net, &data, &opts)?;
    let eval_accuracy = match (p.opt_u64("eval-seed")?, p.opt_usize("eval-count")?) {
        (Some(seed), Some(count)) => {
            let held_out = ShapesDataset::generate(DatasetSpec { seed, count, ..data.spec })?;
            Some(accuracy(&trained, &fit_dataset(&trained, held_out))?)
        }
        (None, None) => None,
        _ => {
            return Err(SealError::InvalidArgument(
                "eval-seed= and eval-count= go together".into(),
            ))
        }
    };
    save_model(out, "trained.net", &trained)?;
    write_json(out, "train.json", &TrainSummary { train_accuracy, eval_accuracy })?;
    match eval_accuracy {
        Some(acc) => println!("train accuracy {train_accuracy:.4}, eval accuracy {acc:.4}"),
        None => println!("train accuracy {train_accuracy:.4}"),
    }
    Ok(())
}

fn stain(p: &Params, out: &Path) -> Result<()> {
    let net = load_model(p, "model")?;
    let seed = p.u64("seed")?;
    let j = p.usize("layer")?;
    let k = unit_index(p)?;
    let delta = p.f64("delta")?;
    let off = off_response(p)?;
    let opts = trigger_opts(p)?;
    let kind = stain_kind(p.str("kind")?)?;
    let (stained, record) = match kind {
        StainKind::DenseNeuron => {
            stain_mlp(&net, j, k, delta, off, p.bool("additive")?, &opts, seed)?
        }
        StainKind::ConvKernel => {
            let reduction = match p.str("reduction")? {
                "mean" => Reduction::Mean,
                "position" => {
                    let Some((row, col)) = position_pair(p)? else {
                        return Err(SealError::InvalidArgument(
                            "reduction=position needs row= and col=".into(),
                        ));
                    };
                    Reduction::Position { row, col }
                }
                other => {
                    return Err(SealError::InvalidArgument(format!(
                        "reduction={other:?} is not mean or position"
                    )))
                }
            };
            stain_conv(&net, j, k, delta, off, reduction, &opts, seed)?
        }
        StainKind::WeightSchema => {
            schema_weight(&net, j, k, &message_bits(p)?, delta, off, &opts, seed)?
        }
        StainKind::ActivationSchema => {
            schema_activation(&net, j, &message_bits(p)?, delta, &opts, seed)?
        }
        StainKind::OutputSchema => schema_output(
            &net,
            j,
            k,
            p.usize("target")?,
            delta,
            off,
            &opts,
            &OutputStainOpts {
                budget: p.usize("budget")?,
                step: p.f64("step")?,
                confidence: p.f64("confidence")?,
            },
            seed,
        )?,
    };
    save_model(out, "stained.net", &stained)?;
    let path = out.join("stain.rec");
    save_record(&record, &path)?;
    announce(&path);
    println!(
        "{} at layer {j}, raw trigger response {:.6}",
        kind.name(),
        record.raw_response
    );
    Ok(())
}

/// Accepts the record names plus short aliases.
fn stain_kind(raw: &str) -> Result<StainKind> {
    let canonical = match raw {
        "dense" => "dense_neuron",
        "conv" => "conv_kernel",
        "weight" => "weight_schema",
        "activation" => "activation_schema",
        "output" => "output_schema",
        other => other,
    };
    StainKind::from_name(canonical)
}

fn lock_kind(raw: &str) -> Result<LockKind> {
    let canonical = match raw {
        "sqex" | "sq-ex" => "sq_ex",
        other => other,
    };
    LockKind::from_name(canonical)
}

fn lock(p: &Params, out: &Path) -> Result<()> {
    let mut net = load_model(p, "model")?;
    let seed = p.u64("seed")?;
    let kind = lock_kind(p.str("kind")?)?;
    if let Some(after) = p.opt_usize("inject-after")? {
        net = inject_sqex(
            &net,
            after,
            p.usize("inject-hidden")?,
            p.f64("inject-scale")?,
            GateKind::from_name(p.str("inject-gate")?)?,
            &mut Rng::new(derive_seed(seed, STREAM_INJECT)),
        )?;
        save_model(out, "injected.net", &net)?;
    }
    let opts = LockOptions {
        response: p.f64("response")?,
        scale: p.opt_f64("scale")?,
        offset: p.opt_f32_list("offset")?.map(Tensor::from_vec),
        position: position_pair(p)?,
        flip_offset_sign: p.bool("flip-offset-sign")?,
        trigger: trigger_opts(p)?,
    };
    let probes = lock_probes(p, &net)?;
    let j = p.usize("layer")?;
    let k = unit_index(p)?;
    let (locked, record) = match kind {
        LockKind::Internal => lock_internal(&net, j, k, &opts, &probes, seed)?,
        LockKind::SqEx => lock_sqex(&net, j, k, &opts, &probes, seed)?,
    };
    save_model(out, "locked.net", &locked)?;
    let path = out.join("lock.lck");
    save_lock(&record, &path, p.bool("keep-backup")?)?;
    announce(&path);
    println!(
        "{} lock at layer {j}, disruption scale {:.4}, patch at layer {} channel 0",
        kind.name(),
        record.scale,
        record.stain.layer
    );
    Ok(())
}

/// Silence-calibration probes for a lock: dataset images when a source
/// is configured, otherwise empty (the lock falls back to uniform
/// noise).
fn lock_probes(p: &Params, net: &Network) -> Result<Vec<Tensor>> {
    if p.opt_raw("data").is_none() && p.opt_raw("data-seed").is_none() {
        return Ok(Vec::new());
    }
    let data = fit_dataset(net, resolve_dataset(p)?);
    let count = p.usize("probe-count")?.min(data.images.len());
    Ok(data.images[..count].to_vec())
}

fn edited(p: &Params, out: &Path) -> Result<()> {
    let locked = load_model(p, "model")?;
    let record = seal_core::lock::load_lock(&p.path("lock")?)?;
    save_model(out, "edited.net", &make_edited(&locked, &record)?)
}

fn trigger(p: &Params, out: &Path) -> Result<()> {
    match (p.opt_raw("record"), p.opt_raw("lock")) {
        (Some(rec_path), None) => {
            let record = load_record(Path::new(rec_path))?;
            let ppm = out.join("trigger.ppm");
            write_ppm(&ppm, &record.trigger)?;
            announce(&ppm);
            if let Some(model_path) = p.opt_raw("model") {
                let net = serial::load(Path::new(model_path))?;
                let position = match position_pair(p)? {
                    Some(pos) => Some(pos),
                    None => match record.reduction {
                        Some(Reduction::Position { row, col }) => Some((row, col)),
                        _ => None,
                    },
                };
                let Some((row, col)) = position else {
                    return Err(SealError::InvalidArgument(
                        "the record carries no response-map position; pass row= and col= \
                         to cut a patch"
                            .into(),
                    ));
                };
                let patch = extract_patch(&net, record.layer, &record.trigger, row, col)?;
                let path = out.join("patch.pch");
                fs::write(&path, patch_to_bytes(&patch)?)?;
                announce(&path);
            }
        }
        (None, Some(lock_path)) => {
            let record = seal_core::lock::load_lock(Path::new(lock_path))?;
            let ppm = out.join("trigger.ppm");
            write_ppm(&ppm, &record.stain.trigger)?;
            announce(&ppm);
            let path = out.join("patch.pch");
            fs::write(&path, patch_to_bytes(&record.patch)?)?;
            announce(&path);
        }
        _ => {
            return Err(SealError::InvalidArgument(
                "provide exactly one of record= or lock=".into(),
            ))
        }
    }
    Ok(())
}

fn patch_apply(p: &Params, out: &Path) -> Result<()> {
    let image = read_ppm(&p.path("image")?)?;
    let patch = patch_from_bytes(&fs::read(p.path("patch")?)?)?;
    let patched = apply_patch(&image, &patch)?;
    let path = out.join("patched.ppm");
    write_ppm(&path, &patched)?;
    announce(&path);
    Ok(())
}

fn verify(p: &Params, out: &Path) -> Result<()> {
    let net = load_model(p, "model")?;
    let record = load_record(&p.path("record")?)?;
    let threshold = p.opt_f64("threshold")?.unwrap_or(0.5 * record.response);
    let outcome = verify_stain(&net, &record, threshold)?;
    write_json(out, "verify.json", &outcome)?;
    println!(
        "match={} response={:.6} threshold={:.6}",
        outcome.matched, outcome.response, outcome.threshold
    );
    Ok(())
}

fn certify(p: &Params, out: &Path) -> Result<()> {
    let cert = match p.str("thm")? {
        "1" | "geometric" => {
            let moments =
                MomentEstimate::exact(p.usize("dim")?, p.f64("mean-norm")?, p.f64("cov-trace")?);
            geometric_bound(&moments, p.f64("threshold")?)?
        }
        "2" | "calibration" => calibration_bound(p.usize("m")?, p.usize("n")?)?,
        "finetune" => {
            let moments =
                MomentEstimate::exact(p.usize("dim")?, p.f64("mean-norm")?, p.f64("cov-trace")?);
            finetune_bound(&moments, p.f64("threshold")?, p.f64("perturbation")?)?
        }
        "collision" => collision_bound(p.usize("dim")?, p.f64("theta")?)?,
        other => {
            return Err(SealError::InvalidArgument(format!(
                "thm={other:?} is not 1, 2, finetune, or collision"
            )))
        }
    };
    write_json(out, "certificate.json", &cert)?;
    println!("{} bound {:.6}{}", cert.kind.name(), cert.value, if cert.clamped { " (clamped)" } else { "" });
    Ok(())
}

fn eval_fpr_cmd(p: &Params, out: &Path) -> Result<()> {
    let net = load_model(p, "model")?;
    let record = load_record(&p.path("record")?)?;
    let data = fit_dataset(&net, resolve_dataset(p)?);
    let threshold = p.opt_f64("threshold")?.unwrap_or(record.raw_response);
    let report = eval_fpr(&net, &record, &data.images, threshold)?;
    write_text(out, "fpr.csv", &fpr_csv(&report))?;
    write_json(out, "fpr.json", &report)?;
    println!(
        "{} false positives over {} placements (threshold {:.6})",
        report.false_positives, report.positions, report.threshold
    );
    Ok(())
}

fn eval_lock_cmd(p: &Params, out: &Path) -> Result<()> {
    let original = load_model(p, "original")?;
    let edited = load_model(p, "edited")?;
    let locked = load_model(p, "locked")?;
    let record = seal_core::lock::load_lock(&p.path("lock")?)?;
    let data = resolve_dataset(p)?;
    let eval = eval_lock(&original, &edited, &locked, &record.patch, &data.images, &data.labels)?;
    write_text(out, "lock.csv", &lock_csv(&eval))?;
    write_json(out, "lock_eval.json", &eval)?;
    for s in &eval.settings {
        println!(
            "{:<8} {} accuracy {:.4}",
            s.model,
            if s.patched { "patched  " } else { "unpatched" },
            s.accuracy
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct PruneSummary {
    mode: String,
    fraction: Option<f64>,
    structured: Option<bool>,
    survival: f64,
}

fn prune_attack(p: &Params, out: &Path) -> Result<()> {
    let net = load_model(p, "model")?;
    let summary = match p.str("mode")? {
        "l1" => {
            let record = load_record(&p.path("record")?)?;
            let fraction = p.f64("fraction")?;
            let structured = p.bool("structured")?;
            let pruned = prune_l1(&net, fraction, structured)?;
            let survival = detector_survival(&net, &pruned, &record)?;
            save_model(out, "pruned.net", &pruned)?;
            PruneSummary { mode: "l1".into(), fraction: Some(fraction), structured: Some(structured), survival }
        }
        "detector" => {
            let record = seal_core::lock::load_lock(&p.path("lock")?)?;
            let pruned = prune_detector(&net, &record)?;
            let survival = detector_survival(&net, &pruned, &record.stain)?;
            save_model(out, "pruned.net", &pruned)?;
            PruneSummary { mode: "detector".into(), fraction: None, structured: None, survival }
        }
        other => {
            return Err(SealError::InvalidArgument(format!(
                "mode={other:?} is not l1 or detector"
            )))
        }
    };
    write_json(out, "prune.json", &summary)?;
    println!("detector response changed by {:.2}%", 100.0 * summary.survival);
    Ok(())
}

#[derive(Serialize)]
struct GeometricValidation {
    total_failures: usize,
    rows: Vec<GeometricTrialRow>,
}

fn validate_bounds(p: &Params, out: &Path) -> Result<()> {
    let seed = p.u64("seed")?;
    match p.str("thm")? {
        "1" | "geometric" => {
            let dist = match p.str("dist")? {
                "gaussian" => McDist::StandardGaussian,
                "point" => McDist::PointMass { norm: p.f64("dist-norm")? },
                other => {
                    return Err(SealError::InvalidArgument(format!(
                        "dist={other:?} is not gaussian or point"
                    )))
                }
            };
            let rows = validate_geometric_bound(
                &p.usize_list("dims")?,
                dist,
                &p.f64_list("thresholds")?,
                p.usize("trials")?,
                p.usize("samples")?,
                seed,
            )?;
            write_text(out, "geometric.csv", &geometric_csv(&rows))?;
            let total_failures = rows.iter().map(|r| r.failures).sum();
            let cells = rows.len();
            write_json(out, "validate.json", &GeometricValidation { total_failures, rows })?;
            println!("{cells} cells, {total_failures} failures");
        }
        "2" | "calibration" => {
            let report = validate_calibration_bound(
                p.usize("m")?,
                p.usize("fresh")?,
                p.usize("repeats")?,
                seed,
            )?;
            write_text(out, "calibration.csv", &calibration_csv(&report))?;
            write_json(out, "validate.json", &report)?;
            println!(
                "violation rate {:.4} over {} repeats (bound {:.6})",
                report.violation_rate, report.repeats, report.bound
            );
        }
        other => {
            return Err(SealError::InvalidArgument(format!("thm={other:?} is not 1 or 2")))
        }
    }
    Ok(())
}
