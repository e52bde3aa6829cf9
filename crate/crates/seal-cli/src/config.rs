//! Flat key=value run configuration.
//!
//! A command's parameters come from three layers: an optional config
//! file, repeated `--set key=value` overrides, and direct `--key value`
//! flags, in increasing precedence. The fully resolved map (defaults
//! included) is echoed into a per-command manifest, so any run can be
//! reproduced from its manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use seal_core::{Result, SealError};
use serde::Serialize;

/// One accepted configuration key.
#[derive(Clone, Copy, Debug)]
pub struct ParamSpec {
    pub key: &'static str,
    /// Filled into the resolved map when the key is absent.
    pub default: Option<&'static str>,
    /// Rejects the run when the key is absent after merging; mutually
    /// exclusive with a default.
    pub required: bool,
    pub help: &'static str,
}

const fn req(key: &'static str, help: &'static str) -> ParamSpec {
    ParamSpec { key, default: None, required: true, help }
}

const fn opt(key: &'static str, help: &'static str) -> ParamSpec {
    ParamSpec { key, default: None, required: false, help }
}

const fn def(key: &'static str, default: &'static str, help: &'static str) -> ParamSpec {
    ParamSpec { key, default: Some(default), required: false, help }
}

/// One subcommand: its parameter schema and whether it evaluates over
/// many images (and therefore accepts `--jobs`).
#[derive(Debug)]
pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub params: &'static [ParamSpec],
    pub jobs: bool,
}

/// Dataset source shared by the commands that evaluate or train over
/// images: a file, or a generation spec keyed off `data-seed`.
const DATASET_PARAMS: [ParamSpec; 7] = [
    opt("data", "Dataset file; omit to generate one from data-seed"),
    opt("data-seed", "Dataset generation seed (required without data=)"),
    def("data-count", "512", "Generated dataset size"),
    def("data-channels", "1", "Generated image channels (1 or 3)"),
    def("data-size", "16", "Generated square image side"),
    def("data-classes", "5", "Generated shape classes (2..=5)"),
    def("data-noise", "0.05", "Generated pixel noise sigma"),
];

const TRIGGER_PARAMS: [ParamSpec; 5] = [
    def("trigger-iters", "1500", "Trigger ascent iterations per restart"),
    def("trigger-restarts", "5", "Trigger ascent random restarts"),
    def("trigger-step-frac", "0.02", "Trigger step size as a fraction of the input range"),
    def("input-min", "0.0", "Lower input-box bound the trigger is clamped into"),
    def("input-max", "1.0", "Upper input-box bound the trigger is clamped into"),
];

const fn gen_model_params() -> [ParamSpec; 10] {
    [
        req("arch", "Architecture: mlp, cnn, or cnn_bn"),
        req("seed", "Weight initialization seed"),
        opt("dims", "MLP widths, comma separated: input,hidden...,output (arch=mlp)"),
        def("channels", "1", "CNN input channels"),
        def("size", "16", "CNN square input size"),
        def("classes", "5", "CNN output classes"),
        opt("sqex-after", "Insert a squeeze-excite block after this layer index"),
        def("sqex-hidden", "4", "Squeeze-excite bottleneck width"),
        def("sqex-scale", "0.0", "Squeeze-excite init scale (0 preserves the function exactly)"),
        def("sqex-gate", "hard_sigmoid", "Squeeze-excite gate: sigmoid or hard_sigmoid"),
    ]
}

const fn train_params() -> [ParamSpec; 14] {
    let d = DATASET_PARAMS;
    [
        req("model", "Model file to train"),
        req("seed", "Mini-batch shuffling seed"),
        def("epochs", "10", "Training epochs"),
        def("batch", "16", "Mini-batch size"),
        def("lr", "0.05", "Learning rate"),
        d[0], d[1], d[2], d[3], d[4], d[5], d[6],
        opt("eval-seed", "Held-out dataset seed for the summary's eval accuracy"),
        opt("eval-count", "Held-out dataset size (required with eval-seed)"),
    ]
}

const fn stain_params() -> [ParamSpec; 22] {
    let t = TRIGGER_PARAMS;
    [
        req("model", "Model file to stain"),
        req("seed", "Detector, trigger, and probe seed"),
        req("kind", "dense_neuron, conv_kernel, weight_schema, activation_schema, or output_schema"),
        req("layer", "Layer index the stain lives in"),
        def("index", "min-l1", "Unit index within the layer, or min-l1 for the lowest-norm unit"),
        req("delta", "Target post-bias trigger response"),
        def("off", "calibrated", "Off-trigger bias: fixed, calibrated, or calibrated_silence"),
        def("off-value", "-1.0", "Bias value when off=fixed"),
        def("additive", "false", "Perturb the existing unit instead of replacing it (dense_neuron)"),
        def("reduction", "mean", "Conv response-map reduction: mean or position"),
        opt("row", "Response-map row for reduction=position"),
        opt("col", "Response-map column for reduction=position"),
        opt("message", "Bit string, e.g. 0110..., for the message schemas"),
        opt("target", "Class the output schema redirects the prediction to"),
        def("confidence", "0.99", "Target softmax confidence (output_schema)"),
        def("budget", "2000", "Logit-column descent iterations (output_schema)"),
        def("step", "0.05", "Logit-column descent step size (output_schema)"),
        t[0], t[1], t[2], t[3], t[4],
    ]
}

const fn lock_params() -> [ParamSpec; 29] {
    let d = DATASET_PARAMS;
    let t = TRIGGER_PARAMS;
    [
        req("model", "Model file to lock"),
        req("seed", "Detector, trigger, probe, and disruptor seed"),
        req("kind", "Lock kind: internal or sqex"),
        req("layer", "Conv layer the detector is planted in"),
        def("index", "min-l1", "Detector channel, or min-l1 for the lowest-norm kernel"),
        def("response", "50.0", "Detector response the trigger is pinned to"),
        opt("scale", "Disruption magnitude; omit to scale with the disrupted parameters"),
        opt("offset", "Disruption offset, comma-separated values"),
        opt("row", "Response-map row the patch drives (default: map center)"),
        opt("col", "Response-map column the patch drives (default: map center)"),
        def("flip-offset-sign", "false", "Use the alternate offset sign convention"),
        def("keep-backup", "true", "Store the disrupted parameters' originals in the record"),
        opt("inject-after", "Insert a squeeze-excite block after this layer before locking"),
        def("inject-hidden", "4", "Injected squeeze-excite bottleneck width"),
        def("inject-scale", "0.0", "Injected squeeze-excite init scale"),
        def("inject-gate", "hard_sigmoid", "Injected squeeze-excite gate"),
        def("probe-count", "32", "Dataset images used as silence-calibration probes"),
        d[0], d[1], d[2], d[3], d[4], d[5], d[6],
        t[0], t[1], t[2], t[3], t[4],
    ]
}

const fn edited_params() -> [ParamSpec; 2] {
    [
        req("model", "Locked model file"),
        req("lock", "Lock record file (must contain the parameter backup)"),
    ]
}

const fn trigger_cmd_params() -> [ParamSpec; 5] {
    [
        opt("record", "Stain record to export the trigger from"),
        opt("lock", "Lock record to export the trigger and patch from"),
        opt("model", "Model file, needed to cut a patch from a stain record"),
        opt("row", "Response-map row to cut the patch at (default: the record's)"),
        opt("col", "Response-map column to cut the patch at (default: the record's)"),
    ]
}

const fn patch_apply_params() -> [ParamSpec; 2] {
    [
        req("image", "Base image (PPM/PGM)"),
        req("patch", "Trigger patch file"),
    ]
}

const fn verify_params() -> [ParamSpec; 3] {
    [
        req("model", "Model file to verify"),
        req("record", "Stain record to verify against"),
        opt("threshold", "Detection threshold (default: half the record's target response)"),
    ]
}

const fn certify_params() -> [ParamSpec; 9] {
    [
        req("thm", "Bound to certify: 1 (geometric), 2 (calibration), finetune, or collision"),
        opt("dim", "Feature dimension (thm 1, finetune, collision)"),
        def("mean-norm", "0.0", "Feature mean norm (thm 1, finetune)"),
        opt("cov-trace", "Feature covariance trace (thm 1, finetune)"),
        opt("threshold", "Detection threshold (thm 1, finetune)"),
        opt("perturbation", "Weight perturbation norm (finetune)"),
        opt("m", "Calibration sample count (thm 2)"),
        def("n", "0", "Allowed exceedances during calibration (thm 2)"),
        opt("theta", "Collision angle in radians (collision)"),
    ]
}

const fn eval_fpr_params() -> [ParamSpec; 10] {
    let d = DATASET_PARAMS;
    [
        req("model", "Stained model file"),
        req("record", "Stain record naming the detector"),
        opt("threshold", "Detection threshold (default: the record's raw trigger response)"),
        d[0], d[1], d[2], d[3], d[4], d[5], d[6],
    ]
}

const fn eval_lock_params() -> [ParamSpec; 11] {
    let d = DATASET_PARAMS;
    [
        req("original", "Original model file"),
        req("edited", "Edited (unlocked) model file"),
        req("locked", "Locked model file"),
        req("lock", "Lock record holding the trigger patch"),
        d[0], d[1], d[2], d[3], d[4], d[5], d[6],
    ]
}

const fn prune_attack_params() -> [ParamSpec; 6] {
    [
        def("mode", "l1", "l1 (magnitude pruning) or detector (zero the lock's detector channel)"),
        req("model", "Model file to prune"),
        opt("record", "Stain record for survival measurement (mode=l1)"),
        opt("lock", "Lock record naming the detector channel (mode=detector)"),
        def("fraction", "0.3", "Weight fraction to prune (mode=l1)"),
        def("structured", "false", "Prune whole kernels/rows instead of single weights"),
    ]
}

const fn validate_bounds_params() -> [ParamSpec; 11] {
    [
        req("thm", "Bound to validate: 1 (geometric) or 2 (calibration)"),
        req("seed", "Monte-Carlo seed"),
        def("dims", "16,64,256", "Feature dimensions, comma separated (thm 1)"),
        def("thresholds", "1,2,3", "Detection thresholds, comma separated (thm 1)"),
        def("dist", "gaussian", "Feature distribution: gaussian or point (thm 1)"),
        def("dist-norm", "1.0", "Point-mass norm for dist=point"),
        def("trials", "100", "Detector draws per cell (thm 1)"),
        def("samples", "2000", "Feature samples per trial (thm 1)"),
        def("m", "2000", "Calibration sample count (thm 2)"),
        def("fresh", "10000", "Fresh samples per repeat (thm 2)"),
        def("repeats", "1000", "Calibration repeats (thm 2)"),
    ]
}

static GEN_MODEL: [ParamSpec; 10] = gen_model_params();
static TRAIN: [ParamSpec; 14] = train_params();
static STAIN: [ParamSpec; 22] = stain_params();
static LOCK: [ParamSpec; 29] = lock_params();
static EDITED: [ParamSpec; 2] = edited_params();
static TRIGGER: [ParamSpec; 5] = trigger_cmd_params();
static PATCH_APPLY: [ParamSpec; 2] = patch_apply_params();
static VERIFY: [ParamSpec; 3] = verify_params();
static CERTIFY: [ParamSpec; 9] = certify_params();
static EVAL_FPR: [ParamSpec; 10] = eval_fpr_params();
static EVAL_LOCK: [ParamSpec; 11] = eval_lock_params();
static PRUNE_ATTACK: [ParamSpec; 6] = prune_attack_params();
static VALIDATE_BOUNDS: [ParamSpec; 11] = validate_bounds_params();

/// Every subcommand the binary accepts.
pub static COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "gen-model",
        about: "Generate a randomly initialized model",
        params: &GEN_MODEL,
        jobs: false,
    },
    CommandSpec {
        name: "train",
        about: "Train a model on a synthetic shapes dataset",
        params: &TRAIN,
        jobs: true,
    },
    CommandSpec {
        name: "stain",
        about: "Plant a detector or message schema into a model",
        params: &STAIN,
        jobs: false,
    },
    CommandSpec {
        name: "lock",
        about: "Lock a model so only the trigger patch restores it",
        params: &LOCK,
        jobs: false,
    },
    CommandSpec {
        name: "edited",
        about: "Rebuild the unlocked (edited) model from a lock record",
        params: &EDITED,
        jobs: false,
    },
    CommandSpec {
        name: "trigger",
        about: "Export a record's trigger image and input patch",
        params: &TRIGGER,
        jobs: false,
    },
    CommandSpec {
        name: "patch-apply",
        about: "Paste a trigger patch onto an image",
        params: &PATCH_APPLY,
        jobs: false,
    },
    CommandSpec {
        name: "verify",
        about: "Re-verify a stain record against a model",
        params: &VERIFY,
        jobs: false,
    },
    CommandSpec {
        name: "certify",
        about: "Compute an analytic false-positive bound certificate",
        params: &CERTIFY,
        jobs: false,
    },
    CommandSpec {
        name: "eval-fpr",
        about: "Measure detector false positives over a dataset",
        params: &EVAL_FPR,
        jobs: true,
    },
    CommandSpec {
        name: "eval-lock",
        about: "Compare original, edited, and locked accuracy with and without the patch",
        params: &EVAL_LOCK,
        jobs: true,
    },
    CommandSpec {
        name: "prune-attack",
        about: "Prune a model and measure the detector's survival",
        params: &PRUNE_ATTACK,
        jobs: false,
    },
    CommandSpec {
        name: "validate-bounds",
        about: "Monte-Carlo validation of the probability bounds",
        params: &VALIDATE_BOUNDS,
        jobs: true,
    },
];

/// Looks a subcommand up by name.
pub fn command_spec(name: &str) -> Result<&'static CommandSpec> {
    COMMANDS
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| SealError::InvalidArgument(format!("unknown command {name:?}")))
}

/// The resolved configuration of one run.
#[derive(Debug)]
pub struct Params {
    spec: &'static CommandSpec,
    values: BTreeMap<String, String>,
}

/// Merges config file, `--set` overrides, and direct flags (in that
/// precedence order), fills defaults, and checks required keys.
pub fn resolve(spec: &'static CommandSpec, matches: &clap::ArgMatches) -> Result<Params> {
    let mut values = BTreeMap::new();
    if let Some(path) = matches.get_one::<String>("config") {
        for (line, key, value) in parse_config_file(Path::new(path))? {
            check_known(spec, &key)
                .map_err(|e| SealError::InvalidArgument(format!("{path} line {line}: {e}")))?;
            values.insert(key, value);
        }
    }
    for item in matches.get_many::<String>("set").into_iter().flatten() {
        let Some((key, value)) = item.split_once('=') else {
            return Err(SealError::InvalidArgument(format!(
                "--set expects key=value, got {item:?}"
            )));
        };
        check_known(spec, key).map_err(|e| SealError::InvalidArgument(format!("--set: {e}")))?;
        values.insert(key.to_string(), value.to_string());
    }
    for p in spec.params {
        if let Some(v) = matches.get_one::<String>(p.key) {
            values.insert(p.key.to_string(), v.clone());
        }
    }
    for p in spec.params {
        if !values.contains_key(p.key) {
            if let Some(d) = p.default {
                values.insert(p.key.to_string(), d.to_string());
            } else if p.required {
                return Err(SealError::InvalidArgument(format!(
                    "{} needs {}=<value> (config file, --set, or --{})",
                    spec.name, p.key, p.key
                )));
            }
        }
    }
    Ok(Params { spec, values })
}

fn check_known(spec: &CommandSpec, key: &str) -> std::result::Result<(), String> {
    if spec.params.iter().any(|p| p.key == key) {
        return Ok(());
    }
    let known: Vec<&str> = spec.params.iter().map(|p| p.key).collect();
    Err(format!(
        "unknown key {key:?} for {}; accepted keys: {}",
        spec.name,
        known.join(", ")
    ))
}

/// Lines as `(line_number, key, value)`; blank lines and `#` comments
/// are skipped.
fn parse_config_file(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(SealError::Format(format!(
                "{} line {}: expected key=value, got {line:?}",
                path.display(),
                i + 1
            )));
        };
        entries.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

impl Params {
    pub fn command(&self) -> &'static str {
        self.spec.name
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn raw(&self, key: &str) -> Result<&str> {
        debug_assert!(
            self.spec.params.iter().any(|p| p.key == key),
            "getter for a key missing from the {} table: {key}",
            self.spec.name
        );
        self.values.get(key).map(String::as_str).ok_or_else(|| {
            SealError::InvalidArgument(format!(
                "{} needs {key}=<value> (config file, --set, or --{key})",
                self.spec.name
            ))
        })
    }

    pub fn opt_raw(&self, key: &str) -> Option<&str> {
        debug_assert!(
            self.spec.params.iter().any(|p| p.key == key),
            "getter for a key missing from the {} table: {key}",
            self.spec.name
        );
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.raw(key)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, value: &str, ty: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| SealError::InvalidArgument(format!("{key}={value:?} is not a valid {ty}")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.raw(key)?;
        self.parse(key, v, "unsigned integer")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key)?;
        self.parse(key, v, "unsigned integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        self.parse(key, v, "number")
    }

    pub fn f32(&self, key: &str) -> Result<f32> {
        let v = self.raw(key)?;
        self.parse(key, v, "number")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            other => Err(SealError::InvalidArgument(format!(
                "{key}={other:?} is not a boolean (true/false)"
            ))),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw(key)?))
    }

    pub fn opt_u64(&self, key: &str) -> Result<Option<u64>> {
        self.opt_raw(key).map(|v| self.parse(key, v, "unsigned integer")).transpose()
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        self.opt_raw(key).map(|v| self.parse(key, v, "unsigned integer")).transpose()
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        self.opt_raw(key).map(|v| self.parse(key, v, "number")).transpose()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.raw(key)?;
        v.split(',').map(|e| self.parse(key, e.trim(), "unsigned integer")).collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.raw(key)?;
        v.split(',').map(|e| self.parse(key, e.trim(), "number")).collect()
    }

    pub fn opt_f32_list(&self, key: &str) -> Result<Option<Vec<f32>>> {
        let Some(v) = self.opt_raw(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|e| self.parse(key, e.trim(), "number"))
            .collect::<Result<_>>()
            .map(Some)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    toolkit_version: &'a str,
    config: &'a BTreeMap<String, String>,
}

/// Writes `<command>.manifest.json` echoing the resolved configuration;
/// reruns with the same config produce byte-identical manifests.
pub fn write_manifest(dir: &Path, params: &Params) -> Result<PathBuf> {
    let manifest = Manifest {
        command: params.command(),
        toolkit_version: env!("CARGO_PKG_VERSION"),
        config: params.values(),
    };
    let path = dir.join(format!("{}.manifest.json", params.command()));
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SealError::Format(format!("manifest serialization failed: {e}")))?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matches_for(cmd: &str, args: &[&str]) -> clap::ArgMatches {
        let all: Vec<String> = ["seal", cmd]
            .into_iter()
            .map(String::from)
            .chain(args.iter().map(|s| s.to_string()))
            .collect();
        let m = crate::build_cli().try_get_matches_from(all).expect("arguments parse");
        m.subcommand().expect("subcommand").1.clone()
    }

    #[test]
    fn defaults_fill_and_required_keys_are_enforced() {
        let spec = command_spec("certify").unwrap();
        let err = resolve(spec, &matches_for("certify", &[])).unwrap_err();
        assert!(err.to_string().contains("thm"));
        let p = resolve(spec, &matches_for("certify", &["--thm", "2", "--m", "100"])).unwrap();
        assert_eq!(p.str("n").unwrap(), "0");
        assert_eq!(p.usize("m").unwrap(), 100);
    }

    #[test]
    fn flags_override_set_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "thm=2\nm=100\nn=1\n# comment\n\n").unwrap();
        let spec = command_spec("certify").unwrap();
        let p = resolve(
            spec,
            &matches_for(
                "certify",
                &["--config", cfg.to_str().unwrap(), "--set", "m=200", "--n", "2"],
            ),
        )
        .unwrap();
        assert_eq!(p.usize("m").unwrap(), 200);
        assert_eq!(p.usize("n").unwrap(), 2);
        assert_eq!(p.str("thm").unwrap(), "2");
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "bogus=1\n").unwrap();
        let spec = command_spec("certify").unwrap();
        let err =
            resolve(spec, &matches_for("certify", &["--config", cfg.to_str().unwrap()]))
                .unwrap_err();
        assert!(err.to_string().contains("bogus"));

        fs::write(&cfg, "no equals sign\n").unwrap();
        let err =
            resolve(spec, &matches_for("certify", &["--config", cfg.to_str().unwrap()]))
                .unwrap_err();
        assert!(err.to_string().contains("key=value"));

        let err = resolve(spec, &matches_for("certify", &["--set", "novalue", "--thm", "2"]))
            .unwrap_err();
        assert!(err.to_string().contains("key=value"));
    }

    #[test]
    fn typed_getters_report_the_offending_key() {
        let spec = command_spec("certify").unwrap();
        let p = resolve(spec, &matches_for("certify", &["--thm", "2", "--m", "abc"])).unwrap();
        let err = p.usize("m").unwrap_err();
        assert!(err.to_string().contains("m="));
        assert!(err.to_string().contains("abc"));
    }

    #[test]
    fn every_command_table_is_consistent() {
        for spec in COMMANDS {
            for p in spec.params {
                assert!(
                    !(p.required && p.default.is_some()),
                    "{}.{} is required but has a default",
                    spec.name,
                    p.key
                );
                for reserved in ["config", "set", "out", "jobs"] {
                    assert_ne!(p.key, reserved, "{} shadows a global flag", spec.name);
                }
                let dups = spec.params.iter().filter(|q| q.key == p.key).count();
                assert_eq!(dups, 1, "{}.{} appears {} times", spec.name, p.key, dups);
            }
        }
    }
}
