"""Residual potential network F(x, latent; theta).

Each block maps ``z -> gelu(W2 @ gelu(W1 @ z + b1) + b2) + z``. In
``literal-block`` mode the trunk stays at the input dimension and only the
hidden layer is ``hidden_width`` wide; in ``lifted-trunk`` mode a linear lift
first maps the input to ``hidden_width`` and every block is square. A final
affine head reduces the trunk to the scalar F.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .sampling import substream

TRUNK_MODES = ("literal-block", "lifted-trunk")

CHECKPOINT_MAGIC = "youngnet-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 2
    depth: int = 4
    hidden_width: int = 25
    trunk_mode: str = "literal-block"
    seed: int = 0

    def __post_init__(self):
        if self.input_dim not in (2, 4):
            raise ValueError(f"input_dim must be 2 or 4, got {self.input_dim}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.hidden_width < 1:
            raise ValueError(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.trunk_mode not in TRUNK_MODES:
            raise ValueError(f"trunk_mode must be one of {TRUNK_MODES}, got {self.trunk_mode!r}")

    @property
    def trunk_width(self) -> int:
        return self.input_dim if self.trunk_mode == "literal-block" else self.hidden_width


class ParameterLayout:
    """Maps named parameter roles to contiguous slices of one flat vector.

    Names are ``lift.W``, ``lift.b``, ``block{i}.W1``, ``block{i}.b1``,
    ``block{i}.W2``, ``block{i}.b2``, ``head.W``, ``head.b``.
    """

    def __init__(self, config: NetworkConfig):
        n, m, t = config.input_dim, config.hidden_width, config.trunk_width
        shapes: list[tuple[str, tuple]] = []
        if config.trunk_mode == "lifted-trunk":
            shapes += [("lift.W", (m, n)), ("lift.b", (m,))]
        for i in range(config.depth):
            shapes += [
                (f"block{i}.W1", (m, t)),
                (f"block{i}.b1", (m,)),
                (f"block{i}.W2", (t, m)),
                (f"block{i}.b2", (t,)),
            ]
        shapes += [("head.W", (1, t)), ("head.b", (1,))]
        self.entries: dict[str, tuple[int, tuple]] = {}
        offset = 0
        for name, shape in shapes:
            self.entries[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.size = offset

    def slice(self, name: str) -> slice:
        start, shape = self.entries[name]
        return slice(start, start + int(np.prod(shape)))

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise ValueError(f"expected a flat vector of length {self.size}, got shape {flat.shape}")
        return {name: flat[self.slice(name)].reshape(shape) for name, (_, shape) in self.entries.items()}

    def pack(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        flat = np.empty(self.size)
        for name, (start, shape) in self.entries.items():
            arr = np.asarray(parts[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            flat[self.slice(name)] = arr.ravel()
        return flat


@dataclass
class PotentialNetwork:
    config: NetworkConfig
    params: np.ndarray

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.layout.size,):
            raise ValueError(
                f"parameter vector has length {self.params.size}, architecture needs {self.layout.size}")

    @property
    def layout(self) -> ParameterLayout:
        return ParameterLayout(self.config)

    def unpack(self) -> dict[str, np.ndarray]:
        return self.layout.unpack(self.params)

    def with_params(self, params: np.ndarray) -> "PotentialNetwork":
        return PotentialNetwork(self.config, np.array(params, dtype=np.float64))

    def __call__(self, points):
        return evaluate(self, points)


def param_count(config: NetworkConfig) -> int:
    """Number of trainable reals: per block 2*m*t + m + t, plus lift and head."""
    n, m, t = config.input_dim, config.hidden_width, config.trunk_width
    count = config.depth * (2 * m * t + m + t) + (t + 1)
    if config.trunk_mode == "lifted-trunk":
        count += m * n + m
    return count


def init_xavier(config: NetworkConfig) -> PotentialNetwork:
    """Uniform Xavier weights, zero biases, drawn from the ``init`` sub-stream of ``config.seed``."""
    rng = substream(config.seed, "init")
    layout = ParameterLayout(config)
    parts = {}
    for name, (_, shape) in layout.entries.items():
        if name.endswith(".b") or name[-2:] in ("b1", "b2"):
            parts[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            parts[name] = rng.uniform(-bound, bound, size=shape)
    return PotentialNetwork(config, layout.pack(parts))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _as_points(net: PotentialNetwork, points) -> tuple[np.ndarray, bool]:
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != net.config.input_dim:
        raise ValueError(
            f"points must have trailing dimension {net.config.input_dim}, got shape {np.shape(points)}")
    return pts, single


def evaluate(net: PotentialNetwork, points) -> np.ndarray | float:
    """F at each point; ``points`` has shape (P, input_dim) or (input_dim,)."""
    z, single = _as_points(net, points)
    p = net.unpack()
    if net.config.trunk_mode == "lifted-trunk":
        z = z @ p["lift.W"].T + p["lift.b"]
    for i in range(net.config.depth):
        h = ad.gelu(z @ p[f"block{i}.W1"].T + p[f"block{i}.b1"])
        z = ad.gelu(h @ p[f"block{i}.W2"].T + p[f"block{i}.b2"]) + z
    out = (z @ p["head.W"].T + p["head.b"])[:, 0]
    return float(out[0]) if single else out


def bind(net: PotentialNetwork, tape: ad.Tape) -> dict[str, ad.Var]:
    """Register the flat parameter vector on ``tape`` (once) and return per-role views."""
    theta = tape.params.get("theta")
    if theta is None:
        theta = tape.param("theta", net.params)
    elif theta.value.shape != net.params.shape:
        raise ad.UsageError("tape already holds a parameter vector of a different size")
    if not tape.record:
        return {name: arr for name, arr in net.unpack().items()}
    return {name: ad.view(theta, start, shape) for name, (start, shape) in net.layout.entries.items()}


def forward_jet(net: PotentialNetwork, points, dirs, mixed: bool = True,
                tape: ad.Tape | None = None) -> ad.Jet2:
    """F with exact input partials along ``dirs`` at every point.

    ``dirs`` holds one or two input axes. With two axes and ``mixed`` the
    mixed second partial is carried too; a repeated axis gives the pure second
    partial. With ``mixed=False`` the jet's ``dab`` is None.

    Without a tape the result holds plain arrays; with a recording tape the
    components are tape variables differentiable with respect to ``theta``.
    """
    pts, single = _as_points(net, points)
    dirs = tuple(int(d) for d in dirs)
    if len(dirs) not in (1, 2) or any(not 0 <= d < net.config.input_dim for d in dirs):
        raise ValueError(f"dirs must name one or two input axes in [0, {net.config.input_dim}), got {dirs}")
    if len(dirs) == 1 and mixed:
        dirs = (dirs[0], dirs[0])
    npts, n = pts.shape
    nfirst = 1 if len(dirs) == 1 else 2
    channels = 1 + nfirst + (1 if mixed else 0)
    z0 = np.zeros((channels, npts, n))
    z0[0] = pts
    z0[1, :, dirs[0]] = 1.0
    if nfirst == 2:
        z0[2, :, dirs[1]] = 1.0

    own_tape = tape is None
    if own_tape:
        tape = ad.Tape(record=False)
    p = bind(net, tape)
    z = tape.leaf(z0)
    if net.config.trunk_mode == "lifted-trunk":
        z = ad.jet_linear(z, p["lift.W"], p["lift.b"])
    for i in range(net.config.depth):
        h = ad.jet_gelu(ad.jet_linear(z, p[f"block{i}.W1"], p[f"block{i}.b1"]), mixed)
        z = ad.jet_gelu(ad.jet_linear(h, p[f"block{i}.W2"], p[f"block{i}.b2"]), mixed) + z
    out = ad.jet_linear(z, p["head.W"], p["head.b"])

    def channel(c):
        var = out[c, :, 0]
        if own_tape:
            val = var.value
            return float(val[0]) if single else val
        return var[0] if single else var

    a, b = (dirs[0], dirs[0]) if len(dirs) == 1 else dirs
    da = channel(1)
    db = channel(2) if nfirst == 2 else da
    dab = channel(channels - 1) if mixed else None
    return ad.Jet2(channel(0), da, db, dab, (a, b))


def lipschitz_bound(net: PotentialNetwork) -> float:
    """Upper bound on the Lipschitz constant of F in the Euclidean norm.

    GELU has Lipschitz constant ``max |gelu'| ~= 1.129``; each block is bounded
    by ``1 + L^2 ||W2|| ||W1||`` and the head by its norm.
    """
    lip = float(np.max(np.abs(ad.gelu_d1(np.linspace(-4, 4, 80001)))))
    p = net.unpack()
    bound = 1.0
    if net.config.trunk_mode == "lifted-trunk":
        bound *= np.linalg.norm(p["lift.W"], 2)
    for i in range(net.config.depth):
        bound *= 1.0 + lip * lip * np.linalg.norm(p[f"block{i}.W2"], 2) * np.linalg.norm(p[f"block{i}.W1"], 2)
    return float(bound * np.linalg.norm(p["head.W"], 2))


# ---------------------------------------------------------------------------
# checkpoint format: text header, then little-endian float64 payload
# ---------------------------------------------------------------------------

_OFFSET_DIGITS = 12


def save_checkpoint(path, net: PotentialNetwork, meta: dict | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``net`` (plus optional extra arrays and string metadata).

    The header is ``key=value`` lines; its last line gives the byte offset of
    the payload. Sections of the payload are listed in ``sections``.
    """
    path = Path(path)
    blocks = [("params", net.params)] + [(k, np.asarray(v, dtype=np.float64).ravel())
                                         for k, v in (arrays or {}).items()]
    sections, offset = [], 0
    for name, arr in blocks:
        sections.append(f"{name}:{offset}:{arr.size}")
        offset += arr.size
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for field in dataclasses.fields(NetworkConfig):
        lines.append(f"config.{field.name}={getattr(net.config, field.name)}")
    lines.append("sections=" + ",".join(sections))
    for key, value in (meta or {}).items():
        text = value if isinstance(value, str) else json.dumps(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"metadata {key!r} must be a single line")
        lines.append(f"meta.{key}={text}")
    head = "\n".join(lines) + "\n"
    head_len = len(head.encode()) + len("data_offset=") + _OFFSET_DIGITS + 1
    pad = (-head_len) % 8
    head += " " * pad if pad else ""
    data_offset = head_len + pad
    header = (head + f"data_offset={data_offset:0{_OFFSET_DIGITS}d}\n").encode()
    assert len(header) == data_offset
    payload = np.concatenate([arr for _, arr in blocks]).astype("<f8").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[PotentialNetwork, dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"data_offset="
    pos = raw.find(marker)
    first = raw.split(b"\n", 1)[0].decode(errors="replace")
    if pos < 0 or not first.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint")
    version = first[len(CHECKPOINT_MAGIC):].strip()
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r} "
                              f"(expected {CHECKPOINT_VERSION})")
    end = raw.find(b"\n", pos)
    try:
        data_offset = int(raw[pos + len(marker):end])
        header = raw[:pos].decode()
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    fields: dict[str, str] = {}
    for line in header.splitlines()[1:]:
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key] = value
    try:
        config = NetworkConfig(
            input_dim=int(fields["config.input_dim"]),
            depth=int(fields["config.depth"]),
            hidden_width=int(fields["config.hidden_width"]),
            trunk_mode=fields["config.trunk_mode"],
            seed=int(fields["config.seed"]),
        )
        sections = {}
        for item in fields["sections"].split(","):
            name, start, size = item.split(":")
            sections[name] = (int(start), int(size))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: incomplete or invalid header ({exc})") from exc
    payload = raw[data_offset:]
    total = sum(size for _, size in sections.values())
    if len(payload) != 8 * total:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, header promises {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays = {name: flat[s:s + n].copy() for name, (s, n) in sections.items()}
    if arrays["params"].size != param_count(config):
        raise CheckpointError(f"{path}: parameter count does not match the stored architecture")
    meta = {k[len("meta."):]: v for k, v in fields.items() if k.startswith("meta.")}
    net = PotentialNetwork(config, arrays.pop("params"))
    return net, meta, arrays
