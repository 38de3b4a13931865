"""
Run configuration: dataclass sections, the flat "section.key = value" file
and command-line overrides.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import configparser
import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from ..dataset import parse_segments, place_labeling, synth_config
from ..metric import train_config

logger = logging.getLogger(__name__)

# pylint: disable=too-few-public-methods,too-many-instance-attributes

_FILE_SECTION = "seasonmatch"


@dataclass
class corpus_section:
    # comma-separated manifest paths; empty means use the synth stage output
    manifests: str = ""
    height: int = 0
    width: int = 0
    channels: int = 0


@dataclass
class synth_section:
    n_places: int = 500
    n_conditions: int = 4
    height: int = 32
    width: int = 64
    channels: int = 3
    strength: float = 1.0
    stride: int = 4


@dataclass
class filter_section:
    speed_min: float = 15.0
    darkness_min: float = 0.2
    align_tol_m: float = 20.0


@dataclass
class partition_section:
    # "a:b,c:d"; empty means three segments laid out like the reference corpus
    test_segments: str = ""
    buffer: Optional[int] = None


@dataclass
class labeling_section:
    same_place_sep: int = 3
    window: int = 5


@dataclass
class mine_section:
    n_pairs: int = 10000
    n_triplets: int = 20000
    negative_exclusion: int = 3


@dataclass
class train_section:
    loss: str = "triplet"
    epochs: int = 5
    batch_size: int = 32
    lr: Optional[float] = None
    margin: float = 1.0
    contrastive_margin: float = 1.0
    fine_tune: bool = False


@dataclass
class model_section:
    backbone: str = "desk"
    tap: str = "pool4"
    head_dim: int = 128
    subtract_mean: bool = False
    # optional pre-trained backbone weights (SMW1), loaded non-strictly
    weights: str = ""


@dataclass
class eval_section:
    tolerance: int = 2
    source: str = "head128"
    thresholds: int = 50
    # comma-separated taps, each scored as a raw-tap descriptor by evaluate
    sweep_taps: str = ""


@dataclass
class report_section:
    # comma-separated method=path entries naming fc_matrix.csv files of other runs
    compare: str = ""


@dataclass
class log_section:
    level: str = "INFO"


@dataclass
class run_config:
    """
    Everything a pipeline run needs. seed feeds the synthetic corpus, the
    miners, model initialisation and batch order.
    """

    outdir: str = "runs/default"
    seed: int = 0
    corpus: corpus_section = field(default_factory=corpus_section)
    synth: synth_section = field(default_factory=synth_section)
    filter: filter_section = field(default_factory=filter_section)
    partition: partition_section = field(default_factory=partition_section)
    labeling: labeling_section = field(default_factory=labeling_section)
    mine: mine_section = field(default_factory=mine_section)
    train: train_section = field(default_factory=train_section)
    model: model_section = field(default_factory=model_section)
    eval: eval_section = field(default_factory=eval_section)
    report: report_section = field(default_factory=report_section)
    log: log_section = field(default_factory=log_section)

    def to_synth_config(self) -> synth_config:
        # pylint: disable=missing-function-docstring
        s = self.synth
        return synth_config(
            n_places=s.n_places,
            n_conditions=s.n_conditions,
            image_size=(s.height, s.width, s.channels),
            strength=s.strength,
            stride=s.stride,
            seed=self.seed,
        )

    def to_labeling(self) -> place_labeling:
        # pylint: disable=missing-function-docstring
        return place_labeling(self.labeling.same_place_sep, self.labeling.window)

    def to_train_config(self) -> train_config:
        # pylint: disable=missing-function-docstring
        t = self.train
        return train_config(
            epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.lr,
            margin=t.margin,
            contrastive_margin=t.contrastive_margin,
            fine_tune=t.fine_tune,
            seed=self.seed,
            negative_exclusion=self.mine.negative_exclusion,
            loss=t.loss,
        )

    def sweep_taps(self) -> List[str]:
        # pylint: disable=missing-function-docstring
        return [tap.strip() for tap in self.eval.sweep_taps.split(",") if tap.strip()]

    def compare_runs(self) -> Dict[str, Path]:
        """
        @brief report.compare as method -> fc_matrix.csv path.
        """
        runs: Dict[str, Path] = {}
        for item in self.report.compare.split(","):
            if not item.strip():
                continue
            method, sep, path = item.partition("=")
            method, path = method.strip(), path.strip()
            if not sep or not method or not path:
                raise ValueError(f"report.compare expects method=path entries, got {item!r}")
            if method in runs:
                raise ValueError(f"report.compare names method {method!r} twice")
            runs[method] = Path(path)
        return runs

    def validate(self) -> None:
        """
        @brief Reject malformed free-form values before any stage runs.
        """
        if self.partition.test_segments:
            try:
                parse_segments(self.partition.test_segments)
            except ValueError as exc:
                raise ValueError(f"config key partition.test_segments: {exc}") from exc
        self.compare_runs()


def config_keys() -> Dict[str, type]:
    """
    @brief Every settable key ("seed", "train.lr", ...) with its value type.
    """
    keys: Dict[str, type] = {}
    hints = typing.get_type_hints(run_config)
    for f in dataclasses.fields(run_config):
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            section_hints = typing.get_type_hints(hint)
            for sub in dataclasses.fields(hint):
                keys[f"{f.name}.{sub.name}"] = section_hints[sub.name]
        else:
            keys[f.name] = hint
    return keys


def _coerce(key: str, hint: Any, text: str) -> Any:
    args = typing.get_args(hint)
    if typing.get_origin(hint) is Union and type(None) in args:
        if text.strip().lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
    text = text.strip()
    try:
        if hint is bool:
            states = configparser.ConfigParser.BOOLEAN_STATES
            if text.lower() not in states:
                raise ValueError(f"not a boolean: {text!r}")
            return states[text.lower()]
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError as exc:
        raise ValueError(f"config key {key}: {exc}") from exc
    return text


def apply_overrides(cfg: run_config, values: Mapping[str, Any]) -> run_config:
    """
    @brief Set dotted keys on cfg; string values are coerced to the field type.

    @param cfg: Configuration, modified in place.
    @param values: key -> value; None values are skipped.

    @return cfg.
    """
    keys = config_keys()
    for key, value in values.items():
        if value is None:
            continue
        if key not in keys:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _coerce(key, keys[key], value)
        section, _, name = key.rpartition(".")
        target = getattr(cfg, section) if section else cfg
        setattr(target, name, value)
    return cfg


def parse_config_text(text: str) -> Dict[str, str]:
    """
    @brief Parse flat "section.key = value" lines ("#" comments allowed).

    Usage:
        parse_config_text("train.lr = 0.001\\nseed = 3\\n")
    """
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str
    try:
        parser.read_string(f"[{_FILE_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from exc
    return dict(parser.items(_FILE_SECTION))


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> run_config:
    """
    @brief Defaults, then the config file, then overrides (flags win).
    """
    cfg = run_config()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValueError(f"config file not found: {path}")
        apply_overrides(cfg, parse_config_text(path.read_text(encoding="utf-8")))
        logger.debug("read config %s", path)
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def dump_config(cfg: run_config) -> str:
    # pylint: disable=missing-function-docstring
    lines = []
    for key in config_keys():
        section, _, name = key.rpartition(".")
        value = getattr(getattr(cfg, section) if section else cfg, name)
        lines.append(f"{key} = {'' if value is None else value}\n")
    return "".join(lines)
