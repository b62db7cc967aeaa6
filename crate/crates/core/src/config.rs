//! Plain-text `key = value` experiment configuration.
//!
//! Lines are `key = value`, blank, or comments; `#` starts a comment
//! anywhere on a line. Unknown and duplicate keys are rejected with the
//! offending line number. Defaults depend on
//! other keys where noted (learning rate on the optimizer, augmentation
//! and warmup on the dataset). [`ExperimentConfig::resolved_text`] emits a
//! document this parser accepts, so records echo a re-runnable config.

use std::collections::HashMap;
use std::path::PathBuf;

use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::exper::ExperimentConfig;
use crate::models::{
    Activation, Arch, ExtraAct, GenHardtanhConfig, ModelSpec, Pooling, Precision, SignActConfig,
};
use crate::optim::OptimizerKind;

pub const KNOWN_KEYS: &[&str] = &[
    "arch",
    "precision",
    "activation",
    "shifts",
    "ste_clip",
    "trainable_threshold",
    "per_channel_threshold",
    "act_y_offset",
    "act_range",
    "pooling",
    "extra_act",
    "extra_act_slope",
    "binarize_first_last",
    "dataset",
    "augment",
    "optimizer",
    "lr",
    "momentum",
    "epochs",
    "batch_size",
    "warmup_epochs",
    "seeds",
    "record_distributions",
    "init_from",
    "init_fp_shift",
    "data_dir",
    "out_dir",
];

/// A parsed config: experiment semantics plus filesystem locations (the
/// latter stay out of the resolved-config echo and hash).
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub exp: ExperimentConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

struct Raw {
    values: HashMap<String, (usize, String)>, // key -> (line, value)
}

impl Raw {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.values.remove(key)
    }
}

fn err(line: usize, reason: impl Into<String>) -> Error {
    Error::ConfigLine {
        line,
        reason: reason.into(),
    }
}

pub fn parse(text: &str) -> Result<ParsedConfig> {
    let mut values: HashMap<String, (usize, String)> = HashMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(
                line_no,
                format!("expected `key = value`, got {line:?}"),
            ));
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(err(line_no, format!("unknown key \"{key}\"")));
        }
        if let Some((prev, _)) = values.get(key) {
            return Err(err(
                line_no,
                format!("duplicate key \"{key}\" (first set on line {prev})"),
            ));
        }
        values.insert(key.to_string(), (line_no, value.to_string()));
    }
    let mut raw = Raw { values };

    let req = |raw: &mut Raw, key: &str| -> Result<(usize, String)> {
        raw.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key \"{key}\"")))
    };

    let (arch_line, arch_s) = req(&mut raw, "arch")?;
    let arch = match arch_s.as_str() {
        "mlp2" => Arch::Mlp2,
        "lenet5" => Arch::Lenet5,
        "vggsmall" => Arch::VggSmall,
        "resnet20ds" => Arch::Resnet20ds,
        other => return Err(err(arch_line, format!("unknown arch \"{other}\""))),
    };

    let (ds_line, ds_s) = req(&mut raw, "dataset")?;
    let dataset = match ds_s.as_str() {
        "mnist" => DatasetId::Mnist,
        "cifar10" => DatasetId::Cifar10,
        other => return Err(err(ds_line, format!("unknown dataset \"{other}\""))),
    };

    let (ep_line, ep_s) = req(&mut raw, "epochs")?;
    let epochs = parse_usize(&ep_s, ep_line, "epochs")?;

    let precision = match raw.take("precision") {
        None => Precision::Binary,
        Some((line, s)) => match s.as_str() {
            "fp" => Precision::Fp,
            "binary_weight" => Precision::BinaryWeight,
            "binary" => Precision::Binary,
            other => return Err(err(line, format!("unknown precision \"{other}\""))),
        },
    };

    let trainable = parse_opt_bool(&mut raw, "trainable_threshold")?.unwrap_or(false);
    let per_channel = parse_opt_bool(&mut raw, "per_channel_threshold")?.unwrap_or(trainable);
    let ste_clip = parse_opt_f64(&mut raw, "ste_clip")?.unwrap_or(1.0);
    let act_y_offset = parse_opt_f64(&mut raw, "act_y_offset")?.unwrap_or(0.0);
    let act_range = parse_opt_f64(&mut raw, "act_range")?.unwrap_or(1.0);

    let activation = match raw.take("activation") {
        None => Activation::Sign(SignActConfig {
            threshold_shift: 0.0,
            trainable,
            per_channel,
            ste_clip,
        }),
        Some((line, s)) => match s.as_str() {
            "sign" => Activation::Sign(SignActConfig {
                threshold_shift: 0.0,
                trainable,
                per_channel,
                ste_clip,
            }),
            "gen_hardtanh" => Activation::GenHardtanh(GenHardtanhConfig {
                x_offset: 0.0,
                y_offset: act_y_offset,
                range: act_range,
            }),
            "relu6" => Activation::Relu6,
            other => return Err(err(line, format!("unknown activation \"{other}\""))),
        },
    };

    let pooling = match raw.take("pooling") {
        None => Pooling::Max,
        Some((line, s)) => match s.as_str() {
            "max" => Pooling::Max,
            "avg" => Pooling::Avg,
            other => return Err(err(line, format!("unknown pooling \"{other}\""))),
        },
    };

    let extra_slope = parse_opt_f64(&mut raw, "extra_act_slope")?.unwrap_or(0.25);
    let extra_act = match raw.take("extra_act") {
        None => ExtraAct::None,
        Some((line, s)) => match s.as_str() {
            "none" => ExtraAct::None,
            "prelu" => ExtraAct::PRelu {
                init_slope: extra_slope,
            },
            "leaky" => ExtraAct::Leaky { slope: extra_slope },
            other => return Err(err(line, format!("unknown extra_act \"{other}\""))),
        },
    };

    let binarize_first_last = parse_opt_bool(&mut raw, "binarize_first_last")?.unwrap_or(false);

    let optimizer = match raw.take("optimizer") {
        None => OptimizerKind::Adam,
        Some((line, s)) => match s.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::SgdMomentum,
            other => return Err(err(line, format!("unknown optimizer \"{other}\""))),
        },
    };

    let lr = parse_opt_f64(&mut raw, "lr")?.unwrap_or(match optimizer {
        OptimizerKind::Adam => 0.01,
        OptimizerKind::SgdMomentum => 0.1,
    });
    let momentum = parse_opt_f64(&mut raw, "momentum")?.unwrap_or(0.9);
    let batch_size = parse_opt_usize(&mut raw, "batch_size")?.unwrap_or(256);
    let warmup_epochs = parse_opt_usize(&mut raw, "warmup_epochs")?.unwrap_or(match dataset {
        DatasetId::Mnist => 0,
        DatasetId::Cifar10 => 5,
    });
    let augment = parse_opt_bool(&mut raw, "augment")?.unwrap_or(match dataset {
        DatasetId::Mnist => false,
        DatasetId::Cifar10 => true,
    });

    let shift_grid = match raw.take("shifts") {
        None => vec![0.0],
        Some((line, s)) => parse_f64_list(&s, line, "shifts")?,
    };
    let seeds = match raw.take("seeds") {
        None => vec![1],
        Some((line, s)) => parse_u64_list(&s, line, "seeds")?,
    };
    let record_distributions = parse_opt_bool(&mut raw, "record_distributions")?.unwrap_or(false);

    let init_from = match raw.take("init_from") {
        None => None,
        Some((_, s)) if s.is_empty() => None,
        Some((_, s)) => Some(PathBuf::from(s)),
    };
    let init_fp_shift = parse_opt_f64(&mut raw, "init_fp_shift")?.unwrap_or(0.0);

    let data_dir = raw
        .take("data_dir")
        .map(|(_, s)| PathBuf::from(s))
        .unwrap_or_else(|| PathBuf::from("data"));
    let out_dir = raw
        .take("out_dir")
        .map(|(_, s)| PathBuf::from(s))
        .unwrap_or_else(|| PathBuf::from("runs"));

    let exp = ExperimentConfig {
        model: ModelSpec {
            arch,
            precision,
            activation,
            pooling,
            extra_act,
            binarize_first_last,
        },
        dataset,
        optimizer,
        lr,
        momentum,
        epochs,
        batch_size,
        warmup_epochs,
        augment,
        shift_grid,
        seeds,
        record_distributions,
        init_from,
        init_fp_shift,
    };
    exp.validate()?;
    Ok(ParsedConfig {
        exp,
        data_dir,
        out_dir,
    })
}

fn parse_opt_bool(raw: &mut Raw, key: &str) -> Result<Option<bool>> {
    match raw.take(key) {
        None => Ok(None),
        Some((line, s)) => match s.as_str() {
            "true" => Ok(Some(true)),
            "false" => Ok(Some(false)),
            other => Err(err(
                line,
                format!("{key}: expected true or false, got \"{other}\""),
            )),
        },
    }
}

fn parse_opt_f64(raw: &mut Raw, key: &str) -> Result<Option<f64>> {
    match raw.take(key) {
        None => Ok(None),
        Some((line, s)) => s
            .parse::<f64>()
            .map(Some)
            .map_err(|_| err(line, format!("{key}: \"{s}\" is not a number"))),
    }
}

fn parse_opt_usize(raw: &mut Raw, key: &str) -> Result<Option<usize>> {
    match raw.take(key) {
        None => Ok(None),
        Some((line, s)) => s.parse::<usize>().map(Some).map_err(|_| {
            err(
                line,
                format!("{key}: \"{s}\" is not a non-negative integer"),
            )
        }),
    }
}

fn parse_usize(s: &str, line: usize, key: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| {
        err(
            line,
            format!("{key}: \"{s}\" is not a non-negative integer"),
        )
    })
}

pub fn parse_f64_list(s: &str, line: usize, key: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| err(line, format!("{key}: \"{p}\" is not a number")))
        })
        .collect()
}

pub fn parse_u64_list(s: &str, line: usize, key: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| err(line, format!("{key}: \"{p}\" is not an integer")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "arch = mlp2\ndataset = mnist\nepochs = 3\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let p = parse(MINIMAL).unwrap();
        assert_eq!(p.exp.model.arch, Arch::Mlp2);
        assert_eq!(p.exp.lr, 0.01, "adam default");
        assert_eq!(p.exp.batch_size, 256);
        assert_eq!(p.exp.warmup_epochs, 0, "mnist default");
        assert!(!p.exp.augment, "mnist default");
        assert_eq!(p.exp.shift_grid, vec![0.0]);
        assert_eq!(p.exp.seeds, vec![1]);
        assert_eq!(p.data_dir, PathBuf::from("data"));
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let text = "arch = mlp2\ndataset = mnist\nepochs = 3\nshfit = 1\n";
        let e = parse(text).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("shfit"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = "arch = mlp2\narch = lenet5\ndataset = mnist\nepochs = 1\n";
        let e = parse(text).unwrap_err().to_string();
        assert!(e.contains("duplicate key \"arch\""), "{e}");
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let text = "arch = mlp2\ndataset = mnist\nepochs = 3\nlr = fast\n";
        let e = parse(text).unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("lr"), "{e}");
    }

    #[test]
    fn sgd_default_lr() {
        let text = "arch = mlp2\ndataset = mnist\nepochs = 3\noptimizer = sgd\n";
        let p = parse(text).unwrap();
        assert_eq!(p.exp.lr, 0.1);
    }

    #[test]
    fn cifar_defaults() {
        let text = "arch = vggsmall\ndataset = cifar10\nepochs = 1\n";
        let p = parse(text).unwrap();
        assert!(p.exp.augment);
        assert_eq!(p.exp.warmup_epochs, 5);
    }

    #[test]
    fn lists_and_flags() {
        let text = "arch = mlp2\ndataset = mnist\nepochs = 2\n\
                    shifts = -1, -0.5, 0, 0.5, 1\nseeds = 1,2,3\n\
                    trainable_threshold = true\nrecord_distributions = true\n";
        let p = parse(text).unwrap();
        assert_eq!(p.exp.shift_grid, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(p.exp.seeds, vec![1, 2, 3]);
        match p.exp.model.activation {
            Activation::Sign(c) => {
                assert!(c.trainable);
                assert!(c.per_channel, "per_channel defaults to trainable");
            }
            _ => panic!("expected sign"),
        }
    }

    #[test]
    fn trainable_without_per_channel_rejected() {
        let text = "arch = mlp2\ndataset = mnist\nepochs = 2\n\
                    trainable_threshold = true\nper_channel_threshold = false\n";
        assert!(parse(text).is_err());
    }

    #[test]
    fn resolved_text_roundtrips() {
        let text = "arch = vggsmall\ndataset = cifar10\nepochs = 40\n\
                    precision = binary\nshifts = -1.5,0,1.5\nseeds = 5,6\n\
                    pooling = avg\nlr = 0.02\nbatch_size = 128\n";
        let p = parse(text).unwrap();
        let echoed = p.exp.resolved_text();
        let p2 = parse(&echoed).unwrap();
        assert_eq!(p.exp, p2.exp, "resolved config must be re-runnable");
        assert_eq!(p.exp.hash_hex(), p2.exp.hash_hex());
    }

    #[test]
    fn gen_hardtanh_roundtrips() {
        let text = "arch = vggsmall\ndataset = cifar10\nepochs = 1\n\
                    precision = binary_weight\nactivation = gen_hardtanh\n\
                    act_y_offset = 0.5\nact_range = 2\n";
        let p = parse(text).unwrap();
        match p.exp.model.activation {
            Activation::GenHardtanh(c) => {
                assert_eq!(c.y_offset, 0.5);
                assert_eq!(c.range, 2.0);
            }
            _ => panic!("expected gen_hardtanh"),
        }
        let p2 = parse(&p.exp.resolved_text()).unwrap();
        assert_eq!(p.exp, p2.exp);
    }

    #[test]
    fn missing_required_key() {
        let e = parse("arch = mlp2\nepochs = 1\n").unwrap_err().to_string();
        assert!(e.contains("dataset"), "{e}");
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "conf") {
                let text = std::fs::read_to_string(&path).unwrap();
                let parsed = parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                // and the echo round-trips
                let again = parse(&parsed.exp.resolved_text()).unwrap();
                assert_eq!(parsed.exp, again.exp, "{}", path.display());
                seen += 1;
            }
        }
        assert!(seen >= 10, "expected the shipped config set, found {seen}");
    }
}
