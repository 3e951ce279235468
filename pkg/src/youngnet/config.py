"""Run configuration: a flat key = value file with section headers.

Every field has a default, so an empty file is a valid Case-1 run. The
resolved configuration is written back to the run directory and can be fed
to ``run --config`` to repeat the run exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .network import TRUNK_MODES, NetworkConfig
from .problems import CASES, LossWeights, ProblemSpec
from .sampling import LATENT_DRAWS, LATENT_SAMPLING_MODES
from .trainer import TrainConfig

DEFAULT_ANCHORS_2D = ((0.5, 0.5), (0.25, 0.75), (0.75, 0.25))
DEFAULT_ANCHORS_1D = tuple((round(0.1 * i, 10),) for i in range(11))
PATH_MODES = ("x-then-y", "y-then-x", "straight")


class ConfigError(ValueError):
    """One or more configuration fields are invalid; ``fields`` names them."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.fields = problems


@dataclass
class RunSection:
    case: str = "bolza-1d"
    seed: int = 0
    out: str = "runs/default"


@dataclass
class NetworkSection:
    depth: int = 4
    hidden_width: int = 25
    trunk_mode: str = "literal-block"


@dataclass
class LossSection:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    alpha: float = 1e-2


@dataclass
class TrainSection:
    epochs: int = 2000
    lr: float = 1e-3
    batch_initial: int = 5
    batch_multiplier: float = 2.0
    batch_period: int = 250
    batch_cap: int = 4096
    grid_x: int = 201
    grid_xi: int = 201
    aux_physical: int = 9
    aux_latent: int = 9
    lr_factor: float = 0.5
    lr_patience: int = 50
    lr_min: float = 1e-6
    lr_threshold: float = 1e-4
    lr_window: int = 250
    checkpoint_every: int = 250


@dataclass
class SamplingSection:
    latent_sampling: str = "weighted-uniform"
    latent_range: float = 2.0


@dataclass
class AnalysisSection:
    # empty means: 11 probes x = 0, 0.1, ..., 1 in 1D, three interior points in 2D
    anchors: str = ""
    histogram_samples: int = 10_000
    # stratified: normal quantiles in random order; random: i.i.d. normal draws
    latent_draw: str = "stratified"
    histogram_bins: int = 81
    histogram_lo: float = -2.0
    histogram_hi: float = 2.0
    probe_physical: int = 33
    probe_latent: int = 33
    probe_latent_range: float = 4.0
    path_mode: str = "x-then-y"


SECTIONS = {
    "run": RunSection,
    "network": NetworkSection,
    "loss": LossSection,
    "train": TrainSection,
    "sampling": SamplingSection,
    "analysis": AnalysisSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    # -- derived objects ----------------------------------------------------
    @property
    def problem(self) -> ProblemSpec:
        return ProblemSpec(self.run.case, self.loss.alpha)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(self.problem.input_dim, self.network.depth, self.network.hidden_width,
                             self.network.trunk_mode, self.run.seed)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            problem=self.problem,
            weights=LossWeights(self.loss.lambda1, self.loss.lambda2, self.loss.lambda3),
            epochs=t.epochs, lr=t.lr, seed=self.run.seed,
            batch_initial=t.batch_initial, batch_multiplier=t.batch_multiplier,
            batch_period=t.batch_period, batch_cap=t.batch_cap,
            latent_sampling=self.sampling.latent_sampling, latent_range=self.sampling.latent_range,
            grid_x=t.grid_x, grid_xi=t.grid_xi, aux_physical=t.aux_physical, aux_latent=t.aux_latent,
            lr_factor=t.lr_factor, lr_patience=t.lr_patience, lr_min=t.lr_min,
            lr_threshold=t.lr_threshold, lr_window=t.lr_window, checkpoint_every=t.checkpoint_every,
        )

    def anchors(self) -> tuple[tuple[float, ...], ...]:
        if self.analysis.anchors.strip():
            return parse_anchors(self.analysis.anchors)
        return DEFAULT_ANCHORS_1D if self.problem.input_dim == 2 else DEFAULT_ANCHORS_2D

    # -- validation -----------------------------------------------------------
    def validate(self) -> "RunConfig":
        bad = []

        def need(ok, name, msg):
            if not ok:
                bad.append(f"{name}: {msg}")

        need(self.run.case in CASES, "run.case", f"must be one of {', '.join(CASES)}")
        need(self.network.depth >= 0, "network.depth", "must be >= 0")
        need(self.network.hidden_width >= 1, "network.hidden_width", "must be >= 1")
        need(self.network.trunk_mode in TRUNK_MODES, "network.trunk_mode", f"must be one of {', '.join(TRUNK_MODES)}")
        for k in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self.loss, k)
            need(math.isfinite(v) and v >= 0, f"loss.{k}", "must be finite and >= 0")
        need(self.loss.lambda1 > 0, "loss.lambda1", "must be > 0")
        need(math.isfinite(self.loss.alpha), "loss.alpha", "must be finite")
        t = self.train
        need(t.epochs >= 0, "train.epochs", "must be >= 0")
        need(t.lr > 0 and math.isfinite(t.lr), "train.lr", "must be positive")
        need(t.batch_initial >= 1, "train.batch_initial", "must be >= 1")
        need(t.batch_multiplier >= 1, "train.batch_multiplier", "must be >= 1")
        need(t.batch_period >= 1, "train.batch_period", "must be >= 1")
        need(t.batch_cap >= 1, "train.batch_cap", "must be >= 1")
        need(t.grid_x >= 2 and t.grid_xi >= 2, "train.grid_x/grid_xi", "must be >= 2")
        need(t.aux_physical >= 2 and t.aux_latent >= 2, "train.aux_physical/aux_latent", "must be >= 2")
        need(0 < t.lr_factor < 1, "train.lr_factor", "must lie in (0, 1)")
        need(t.lr_patience >= 1, "train.lr_patience", "must be >= 1")
        need(t.lr_window >= 1, "train.lr_window", "must be >= 1")
        need(t.checkpoint_every >= 0, "train.checkpoint_every", "must be >= 0")
        need(self.sampling.latent_sampling in LATENT_SAMPLING_MODES, "sampling.latent_sampling",
             f"must be one of {', '.join(LATENT_SAMPLING_MODES)}")
        need(self.sampling.latent_range > 0, "sampling.latent_range", "must be > 0")
        a = self.analysis
        need(a.histogram_samples >= 1, "analysis.histogram_samples", "must be >= 1")
        need(a.latent_draw in LATENT_DRAWS, "analysis.latent_draw", f"must be one of {', '.join(LATENT_DRAWS)}")
        need(a.histogram_bins >= 1, "analysis.histogram_bins", "must be >= 1")
        need(a.histogram_lo < a.histogram_hi, "analysis.histogram_lo/hi", "need lo < hi")
        need(a.probe_physical >= 2 and a.probe_latent >= 2, "analysis.probe_*", "must be >= 2")
        need(a.path_mode in PATH_MODES, "analysis.path_mode", f"must be one of {', '.join(PATH_MODES)}")
        if a.anchors.strip():
            try:
                pts = parse_anchors(a.anchors)
                dim = 1 if self.run.case == "bolza-1d" else 2
                need(all(len(p) == dim for p in pts), "analysis.anchors", f"each anchor needs {dim} coordinate(s)")
            except ValueError as exc:
                bad.append(f"analysis.anchors: {exc}")
        if bad:
            raise ConfigError(bad)
        return self

    # -- text form ------------------------------------------------------------
    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """``overrides`` maps ``section.key`` to a value (already typed or a string)."""
        cfg = dataclasses.replace(self, **{n: dataclasses.replace(getattr(self, n)) for n in SECTIONS})
        bad = []
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            try:
                _set(cfg, section, key, value)
            except ValueError as exc:
                bad.append(f"{dotted}: {exc}")
        if bad:
            raise ConfigError(bad)
        return cfg


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _set(cfg: RunConfig, section: str, key: str, value):
    if section not in SECTIONS:
        raise ValueError("unknown section")
    sec = getattr(cfg, section)
    types = {f.name: f.type for f in dataclasses.fields(sec)}
    if key not in types:
        raise ValueError("unknown key")
    kind = types[key]
    try:
        if kind in ("int", int):
            v = int(value)
        elif kind in ("float", float):
            v = float(value)
        else:
            v = str(value)
    except (TypeError, ValueError):
        raise ValueError(f"cannot parse {value!r} as {kind}") from None
    setattr(sec, key, v)


def parse_anchors(text: str) -> tuple[tuple[float, ...], ...]:
    """``"0.5 0.5; 0.25 0.75"`` -> ((0.5, 0.5), (0.25, 0.75))."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        coords = tuple(float(c) for c in chunk.replace(",", " ").split())
        if not coords or any(not 0.0 <= c <= 1.0 for c in coords):
            raise ValueError(f"anchor {chunk!r} must have coordinates in [0, 1]")
        out.append(coords)
    if not out:
        raise ValueError("no anchors given")
    return tuple(out)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (if given), apply ``overrides``, validate."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser()
        with open(path) as fh:
            cp.read_file(fh)
        flat = {}
        for section in cp.sections():
            for key, value in cp[section].items():
                flat[f"{section}.{key}"] = value
        cfg = cfg.with_overrides(flat)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()
