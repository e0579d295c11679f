"""Flat key=value run configuration shared by the command line tools.

One file can set model, training, and evaluation options together; each
consumer picks out its own keys. Unknown keys are rejected so typos
surface at parse time, and the effective configuration is echoed back
into the output directory of every training run.
"""

from __future__ import annotations

from .errors import InvalidInputError
from .model import ModelConfig
from .training import TrainConfig

MODEL_KEYS = ("t_in", "t_out", "d_model", "num_heads", "hidden",
              "attn_window", "dropout", "relations")
TRAIN_KEYS = ("epochs", "batch_size", "lr", "weight_decay", "patience",
              "num_workers", "seed", "executor", "check_synchrony")
EVAL_KEYS = ("noise_std", "groupings", "start_timestamp", "split")


def parse_kv(text: str) -> dict:
    """Parse `key = value` lines; # starts a comment, blanks are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"line {lineno}: expected key=value, "
                                    f"got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise InvalidInputError(f"line {lineno}: empty key or value")
        if key in out:
            raise InvalidInputError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict:
    try:
        with open(path) as fh:
            return parse_kv(fh.read())
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}")


def write_kv(mapping: dict, path) -> None:
    with open(path, "w") as fh:
        for key in sorted(mapping):
            fh.write(f"{key} = {mapping[key]}\n")


def _convert(kv: dict, key: str, kind, default):
    if key not in kv:
        return default
    raw = kv[key]
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0"):
                raise ValueError(f"not a boolean: {raw!r}")
            return lowered in ("true", "1")
        return kind(raw)
    except ValueError as exc:
        raise InvalidInputError(f"bad value for {key}: {exc}")


def model_config_from_kv(kv: dict) -> ModelConfig:
    base = ModelConfig()
    relations = _convert(kv, "relations", str, ",".join(base.relations))
    return ModelConfig(
        t_in=_convert(kv, "t_in", int, base.t_in),
        t_out=_convert(kv, "t_out", int, base.t_out),
        d_model=_convert(kv, "d_model", int, base.d_model),
        num_heads=_convert(kv, "num_heads", int, base.num_heads),
        hidden=_convert(kv, "hidden", int, base.hidden),
        attn_window=_convert(kv, "attn_window", int, base.attn_window),
        dropout=_convert(kv, "dropout", float, base.dropout),
        relations=tuple(part.strip() for part in relations.split(",")
                        if part.strip()),
    )


def train_config_from_kv(kv: dict) -> TrainConfig:
    base = TrainConfig()
    return TrainConfig(
        epochs=_convert(kv, "epochs", int, base.epochs),
        batch_size=_convert(kv, "batch_size", int, base.batch_size),
        lr=_convert(kv, "lr", float, base.lr),
        weight_decay=_convert(kv, "weight_decay", float, base.weight_decay),
        patience=_convert(kv, "patience", int, base.patience),
        num_workers=_convert(kv, "num_workers", int, base.num_workers),
        seed=_convert(kv, "seed", int, base.seed),
        executor=_convert(kv, "executor", str, base.executor),
        check_synchrony=_convert(kv, "check_synchrony", bool,
                                 base.check_synchrony),
    )


def eval_options_from_kv(kv: dict) -> dict:
    groupings = _convert(kv, "groupings", str, "basin,station,lead")
    return {
        "noise_std": _convert(kv, "noise_std", float, 0.0),
        "groupings": tuple(part.strip() for part in groupings.split(",")
                           if part.strip()),
        "start_timestamp": _convert(kv, "start_timestamp", str, None),
        "split": _convert(kv, "split", str, "test"),
    }


def check_known_keys(kv: dict) -> None:
    known = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(EVAL_KEYS)
    unknown = sorted(set(kv) - known)
    if unknown:
        raise InvalidInputError(f"unknown config keys {unknown}")


def load_run_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    kv = read_kv(path)
    check_known_keys(kv)
    return (model_config_from_kv(kv), train_config_from_kv(kv),
            eval_options_from_kv(kv))


def effective_kv(mcfg: ModelConfig, tcfg: TrainConfig,
                 eval_options: dict | None = None) -> dict:
    """The fully resolved configuration as writable key=value strings."""
    out = {
        "t_in": mcfg.t_in, "t_out": mcfg.t_out, "d_model": mcfg.d_model,
        "num_heads": mcfg.num_heads, "hidden": mcfg.hidden,
        "attn_window": mcfg.attn_window, "dropout": mcfg.dropout,
        "relations": ",".join(mcfg.relations),
        "epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
        "lr": tcfg.lr, "weight_decay": tcfg.weight_decay,
        "patience": tcfg.patience, "num_workers": tcfg.num_workers,
        "seed": tcfg.seed, "executor": tcfg.executor,
        "check_synchrony": tcfg.check_synchrony,
    }
    if eval_options:
        out["noise_std"] = eval_options["noise_std"]
        out["groupings"] = ",".join(eval_options["groupings"])
        out["split"] = eval_options["split"]
        if eval_options.get("start_timestamp"):
            out["start_timestamp"] = eval_options["start_timestamp"]
    return {k: str(v) for k, v in out.items()}
