"""Flat experiment configuration, presets and seeded stream derivation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass
class ExperimentConfig:
    name: str = "hyperplane-desk"
    # manifold and data
    manifold: str = "hyperplane"
    so_k: int = 3
    mesh_path: str = ""
    mesh_radius: float = 1.0
    dataset: str = "gmm_plane"
    dataset_size: int = 10000
    train_fraction: float = 0.8
    son_modes: int = 3
    son_scale: float = 0.3
    eigen_indices: list = field(default_factory=lambda: [0, 20, 40])
    face_blacklist: list = field(default_factory=list)
    # noise schedule
    sigma_min: float = 0.001
    sigma_max: float = 3.0
    T: float = 1.0
    # method
    method: str = "iso"
    rescale: bool = True
    c_niso: float = 0.2
    c_tango: float = 0.2
    # network and training
    width: int = 64
    depth: int = 3
    time_input: str = "t"
    epochs: int = 100
    batch_size: int = 512
    lr: float = 0.0005
    clip: float = 10.0
    ema_decay: float = 0.999
    # sampling
    samplers: list = field(default_factory=lambda: ["reverse"])
    n_steps: int = 500
    n_langevin: int = 10
    alpha_ld: float = 0.01
    sigma_switch: float = 0.0  # 0 -> c_niso (niso) or c_tango (otherwise)
    n_samples: int = 0         # 0 -> size of the held-out split
    # metrics
    metrics: list = field(default_factory=lambda: ["mmd"])
    mmd_bandwidth: float = 0.0  # 0 -> median heuristic on the held-out split
    n_proj: int = 128
    w2_max_points: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in ("iso", "niso", "tango", "rssm"):
            raise ConfigError(f"unknown method {self.method!r}")
        for s in self.samplers:
            if s not in ("reverse", "annealing"):
                raise ConfigError(f"unknown sampler {s!r}")
        if self.method in ("tango", "rssm") and "reverse" in self.samplers:
            raise ConfigError(
                f"reverse SDE sampling is not applicable to {self.method}-trained models; "
                "use the annealing sampler")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("need 0 < sigma_min < sigma_max")
        for m in self.metrics:
            if m not in ("mmd", "sliced_w1", "w2", "js_faces"):
                raise ConfigError(f"unknown metric {m!r}")
        return self

    # -- derived ----------------------------------------------------------
    @property
    def switch_sigma(self):
        if self.sigma_switch > 0:
            s = self.sigma_switch
        else:
            s = self.c_niso if self.method == "niso" else self.c_tango
        return float(min(max(s, self.sigma_min), self.sigma_max))

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return ExperimentConfig(**{**self.to_dict(), **changes})

    def config_hash(self):
        """sha256 over the canonical (sorted-key) JSON, excluding the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    # -- text form ----------------------------------------------------------
    def to_toml(self):
        lines = [f"# config hash {self.config_hash()}"]
        for f in fields(self):
            lines.append(f"{f.name} = {_toml_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_toml(cls, text, base=None):
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"invalid config: {err}") from err
        preset = raw.pop("preset", None)
        start = PRESETS[preset] if preset else (base or cls())
        return start.updated(raw)

    @classmethod
    def load(cls, path, base=None):
        with open(path) as fh:
            return cls.from_toml(fh.read(), base)

    def updated(self, raw):
        known = {f.name: f for f in fields(self)}
        out = self.to_dict()
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = _coerce(known[key], value)
        return ExperimentConfig(**out)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(f, value):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        elem = type(default[0]) if default else None
        if elem is None and value and all(str(v).lstrip("-").isdigit() for v in value):
            elem = int
        return [elem(v) if elem else v for v in value]
    return str(value)


def parse_assignment(text):
    """``key=value`` with the value parsed as a TOML scalar or list when possible."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key.strip().replace("-", "_"), parsed


def derive_rng(master_seed, stage, index=0):
    """Independent generator for (master seed, stage name, index)."""
    digest = hashlib.sha256(str(stage).encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *words, int(index)]))


_HYPERPLANE = dict(
    manifold="hyperplane", dataset="gmm_plane", sigma_min=0.001, sigma_max=3.0, T=1.0,
    c_niso=0.2, c_tango=0.2, n_steps=500, n_langevin=10, alpha_ld=0.01, width=64, depth=3,
    epochs=200, batch_size=512, lr=0.0005, clip=10.0, dataset_size=50000, metrics=["mmd"],
)
_MESH = dict(
    manifold="mesh", dataset="mesh_eigen", sigma_min=0.001, sigma_max=3.0, T=1.0,
    c_niso=0.002, c_tango=0.002, n_steps=200, n_langevin=20, alpha_ld=0.05, width=256,
    depth=3, epochs=20000, batch_size=4096, lr=0.0005, clip=10.0, dataset_size=60000,
    eigen_indices=[0, 500, 1000], metrics=["js_faces"], samplers=["annealing"],
    method="tango",
)
_SO10 = dict(
    manifold="so", so_k=10, dataset="wrapped_normal", son_modes=5, son_scale=0.3,
    sigma_min=0.0005, sigma_max=3.0, T=1.0, c_niso=0.01, c_tango=0.05, n_steps=500,
    n_langevin=10, alpha_ld=0.05, width=512, depth=3, epochs=5000, batch_size=512,
    lr=0.001, clip=1.0, dataset_size=50000, metrics=["sliced_w1"],
)

PRESETS = {
    "hyperplane": ExperimentConfig(name="hyperplane", **_HYPERPLANE),
    "hyperplane-desk": ExperimentConfig(name="hyperplane-desk", **{
        **_HYPERPLANE, "epochs": 100, "dataset_size": 10000}),
    "bunny": ExperimentConfig(name="bunny", **{**_MESH, "mesh_path": "bunny.obj"}),
    "spot": ExperimentConfig(name="spot", **{**_MESH, "mesh_path": "spot.obj", "n_langevin": 10}),
    "so10": ExperimentConfig(name="so10", **_SO10),
    "so3-desk": ExperimentConfig(name="so3-desk", **{
        **_SO10, "so_k": 3, "son_modes": 3, "dataset_size": 10000, "epochs": 100,
        "width": 128}),
    "icosahedron-desk": ExperimentConfig(name="icosahedron-desk", **{
        **_MESH, "manifold": "icosahedron", "eigen_indices": [0, 5, 9], "dataset_size": 10000,
        "epochs": 300, "batch_size": 512, "width": 64, "lr": 1e-4, "sigma_min": 0.01,
        "c_niso": 0.1, "c_tango": 0.1, "n_steps": 200, "n_langevin": 20, "alpha_ld": 0.005}),
}
