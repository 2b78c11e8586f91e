"""Flat key=value run configuration.

One registry defines every key, its type, and its default. Values merge in
order: defaults, then a config file, then command-line overrides. Unknown
keys are rejected. The fully resolved configuration is echoed to the run
directory in the same ``key = value`` syntax, so an echoed file reproduces
the run.
"""

from .model import ModelConfig


class UsageError(ValueError):
    pass


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "on", "yes"):
        return True
    if t in ("0", "false", "off", "no"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _parse_int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _parse_str_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(text)
    text = text.strip()
    if not text:
        return ()
    return tuple(v.strip() for v in text.split(","))


def _choice(*options):
    def parse(text):
        t = str(text).strip()
        if t not in options:
            raise UsageError(f"expected one of {options}, got {text!r}")
        return t
    return parse


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# key -> (parser, default)
REGISTRY = {
    "run.seed": (int, 0),
    "model.T": (int, 8),
    "model.height": (int, 48),
    "model.width": (int, 24),
    "model.widths": (_parse_int_list, (16, 32, 64, 128)),
    "model.blocks": (_parse_int_list, (1, 1, 1, 1)),
    "ssam.stages": (_parse_str_list, ("shallow", "deep")),
    "ssam.variant": (_choice("staw", "faw", "zaw"), "staw"),
    "ssam.value_mode": (_choice("literal", "standard-causal"), "literal"),
    "ssam.residual": (_parse_bool, True),
    "stfs.enabled": (_parse_bool, True),
    "stfs.temporal": (_parse_bool, True),
    "stfs.spatial": (_parse_bool, True),
    "loss.lambda1": (float, 1.0),
    "loss.lambda2": (float, 0.1),
    "loss.margin": (float, 0.3),
    "loss.epsilon": (float, 0.1),
    "batch.P": (int, 4),
    "batch.K": (int, 4),
    "train.epochs": (int, 100),
    "train.lr": (float, 3.5e-4),
    "train.lr_decay_every": (int, 30),
    "train.lr_decay_factor": (float, 1.0 / 3.0),
    "train.eval_every": (int, 1),
    "train.holdout_per_cam": (int, 2),
    "train.batches_per_epoch": (int, 0),
    "spiking.surrogate_a": (float, 1.0),
    "data.window_us": (int, 0),
    "data.bin_clip": (float, 0.0),
    "eval.split": (_choice("holdout", "train", "all"), "holdout"),
    "synth.ids": (int, 8),
    "synth.seqs": (int, 6),
    "synth.frames": (int, 64),
    "synth.frame_dt_us": (int, 33333),
    "synth.threshold": (float, 0.35),
    "synth.noise": (float, 0.02),
}


def default_config():
    return {k: v for k, (_, v) in REGISTRY.items()}


def set_key(cfg, key, raw_value):
    if key not in REGISTRY:
        raise UsageError(f"unknown config key {key!r}")
    parser, _ = REGISTRY[key]
    try:
        cfg[key] = parser(raw_value)
    except UsageError:
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {raw_value!r} ({exc})") from None


def load_config_file(path, cfg):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            set_key(cfg, key.strip(), value.strip())
    return cfg


def format_config(cfg):
    lines = [f"{k} = {_fmt(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def validate(cfg):
    stages = cfg["ssam.stages"]
    for s in stages:
        if s not in ("shallow", "deep"):
            raise UsageError(f"ssam.stages entries must be shallow/deep, got {s!r}")
    if len(cfg["model.widths"]) != 4 or len(cfg["model.blocks"]) != 4:
        raise UsageError("model.widths and model.blocks need exactly 4 entries")
    return cfg


def to_model_config(cfg, num_classes):
    return ModelConfig(
        time_steps=cfg["model.T"],
        height=cfg["model.height"],
        width=cfg["model.width"],
        widths=cfg["model.widths"],
        blocks=cfg["model.blocks"],
        num_classes=num_classes,
        ssam_stages=cfg["ssam.stages"],
        ssam_variant=cfg["ssam.variant"],
        ssam_value_mode=cfg["ssam.value_mode"],
        ssam_residual=cfg["ssam.residual"],
        stfs_enabled=cfg["stfs.enabled"],
        stfs_temporal=cfg["stfs.temporal"],
        stfs_spatial=cfg["stfs.spatial"],
        lambda1=cfg["loss.lambda1"],
        lambda2=cfg["loss.lambda2"],
        margin=cfg["loss.margin"],
        epsilon=cfg["loss.epsilon"],
        batch_p=cfg["batch.P"],
        batch_k=cfg["batch.K"],
        epochs=cfg["train.epochs"],
        lr=cfg["train.lr"],
        lr_decay_every=cfg["train.lr_decay_every"],
        lr_decay_factor=cfg["train.lr_decay_factor"],
        eval_every=cfg["train.eval_every"],
        holdout_per_cam=cfg["train.holdout_per_cam"],
        batches_per_epoch=cfg["train.batches_per_epoch"],
        surrogate_a=cfg["spiking.surrogate_a"],
        window_us=cfg["data.window_us"],
        bin_clip=cfg["data.bin_clip"],
    )
