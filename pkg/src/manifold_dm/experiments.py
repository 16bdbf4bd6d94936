"""End-to-end runs: data, training, sampling, metrics and persisted reports.

Every random draw comes from ``derive_rng(seed, stage, index)`` so a master
seed fixes the whole run. Artifacts go to ``<root>/<hash12>/seed-<s>`` and a
rerun of the same configuration lands in a fresh sibling directory rather
than overwriting anything.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import metrics as metricmod
from . import oracles
from .config import ExperimentConfig, derive_rng
from .errors import ConfigError, StageError
from .losses import loss_and_grad, make_batch, method_constant, rescale_method_for
from .manifold import build_manifold, icosahedron, read_obj
from .network import EMA, Adam, ScoreModel, train_step
from .noise import NoiseSchedule
from .samplers import SampleConfig, annealing_sde_sample, reverse_sde_sample

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------
def schedule_for(cfg):
    return NoiseSchedule(cfg.sigma_min, cfg.sigma_max, cfg.T)


def manifold_for(cfg):
    if cfg.manifold == "mesh":
        if not cfg.mesh_path:
            raise ConfigError("manifold 'mesh' needs mesh_path")
        return read_obj(cfg.mesh_path)
    if cfg.manifold == "icosahedron":
        return icosahedron(cfg.mesh_radius)
    if cfg.manifold == "so":
        return build_manifold("so", k=cfg.so_k)
    if cfg.manifold in ("hyperplane", "sphere", "circle"):
        return build_manifold(cfg.manifold)
    raise ConfigError(f"unknown manifold {cfg.manifold!r}")


@dataclass
class Dataset:
    points: np.ndarray
    is_test: np.ndarray
    faces: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def train(self):
        return self.points[~self.is_test]

    @property
    def test(self):
        return self.points[self.is_test]

    @property
    def test_faces(self):
        return None if self.faces is None else self.faces[self.is_test]

    def to_csv(self, path):
        cols = [self.points, self.is_test[:, None].astype(float)]
        names = [f"x{i}" for i in range(self.points.shape[1])] + ["test"]
        if self.faces is not None:
            cols.append(self.faces[:, None].astype(float))
            names.append("face")
        np.savetxt(path, np.concatenate(cols, axis=1), delimiter=",", fmt="%.17g",
                   header=",".join(names), comments="")
        if self.meta:
            with open(str(path) + ".meta.json", "w") as fh:
                json.dump(self.meta, fh, indent=2, sort_keys=True)

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            names = fh.readline().strip().split(",")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        has_face = names[-1] == "face"
        npts = len(names) - (2 if has_face else 1)
        faces = arr[:, -1].astype(np.int64) if has_face else None
        return cls(arr[:, :npts], arr[:, npts].astype(bool), faces)


def generate_dataset(cfg, manifold, seed):
    """Sample ``dataset_size`` points and mark a random 20% (by default) as held out."""
    rng = derive_rng(seed, "data")
    n = cfg.dataset_size
    faces = None
    meta = {"dataset": cfg.dataset, "seed": int(seed), "size": n,
            "train_fraction": cfg.train_fraction}
    if cfg.dataset == "gmm_plane":
        pts = datamod.sample_gmm_plane(n, rng)
        meta.update(means=datamod.GRID_MEANS.tolist(), std=datamod.GRID_STD)
    elif cfg.dataset == "wrapped_normal":
        centers = datamod.random_son_centers(cfg.so_k, cfg.son_modes, derive_rng(seed, "centers"))
        pts = datamod.sample_wrapped_normal_son(cfg.so_k, centers, cfg.son_scale, n, rng)
        meta.update(k=cfg.so_k, scale=cfg.son_scale, centers=centers.tolist(),
                    tangent_law="skew-symmetric with iid N(0, scale^2) upper entries")
    elif cfg.dataset == "mesh_eigen":
        dens = datamod.mesh_eigen_density(manifold, cfg.eigen_indices, cfg.face_blacklist)
        pts, faces = datamod.sample_mesh_density(dens, n, rng, return_faces=True)
        meta.update(eigen_indices=list(dens.eigen_indices),
                    eigenvalues=dens.eigenvalues.tolist(),
                    face_blacklist=list(cfg.face_blacklist),
                    laplacian="cotangent weights, lumped barycentric mass",
                    clamp="sign chosen so the positive part has the larger mass, "
                          "then max(phi, 0) normalized to unit integral",
                    mixture="equal weights over components",
                    upsampling="none; points drawn directly from the piecewise-linear density")
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    n_test = n - int(round(cfg.train_fraction * n))
    perm = derive_rng(seed, "split").permutation(n)
    is_test = np.zeros(n, dtype=bool)
    is_test[perm[:n_test]] = True
    return Dataset(pts, is_test, faces, meta)


def new_model(cfg, ambient_dim, seed):
    c = method_constant(cfg.method, cfg.c_niso, cfg.c_tango)
    model = ScoreModel(ambient_dim, cfg.width, cfg.depth,
                       rescale_method_for(cfg.method, cfg.rescale), c, cfg.time_input,
                       rng=derive_rng(seed, "init"))
    model.method = cfg.method
    return model


def train_model(cfg, manifold, train, seed, history=None):
    """Adam with global-norm clipping and EMA over ``epochs`` passes of ``train``."""
    schedule = schedule_for(cfg)
    model = new_model(cfg, train.shape[1], seed)
    opt = Adam(model.params, lr=cfg.lr)
    ema = EMA(model, cfg.ema_decay)
    order_rng = derive_rng(seed, "order")
    noise_rng = derive_rng(seed, "noise")
    lg = lambda m, b: loss_and_grad(m, b, schedule)  # noqa: E731
    n_batches = math.ceil(len(train) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(train))
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = make_batch(cfg.method, manifold, train[idx], schedule, noise_rng,
                               c_niso=cfg.c_niso, c_tango=cfg.c_tango, rescale=cfg.rescale)
            total += train_step(model, opt, batch, lg, clip=cfg.clip, ema=ema)
        if history is not None:
            history.append((epoch, total / n_batches))
        if epoch % max(1, cfg.epochs // 10) == 0:
            log.info("epoch %d loss %.6g", epoch, total / n_batches)
    return model


def sample_model(cfg, model, manifold, sampler, count, seed):
    schedule = schedule_for(cfg)
    sc = SampleConfig(cfg.n_steps, cfg.n_langevin, cfg.alpha_ld, cfg.switch_sigma, count)
    rng = derive_rng(seed, "sample-" + sampler)
    fn = model.as_score_fn(schedule, use_ema=model.ema is not None)
    if sampler == "reverse":
        return reverse_sde_sample(fn, manifold, schedule, sc, rng)
    return annealing_sde_sample(fn, manifold, schedule, sc, rng)


def sampler_params(cfg, sampler, count):
    out = {"sampler": sampler, "n_steps": cfg.n_steps, "n_chains": count}
    if sampler == "annealing":
        out.update(n_langevin=cfg.n_langevin, alpha_ld=cfg.alpha_ld,
                   sigma_switch=cfg.switch_sigma)
    return out


def evaluate_samples(cfg, manifold, samples, dataset, seed, sampler="external"):
    """Metric entries ``{"<sampler>/<metric>": {"value": ..., hyperparameters}}``."""
    ref = dataset.test
    out = {}
    for name in cfg.metrics:
        entry = {"metric": name, "n_generated": len(samples), "n_reference": len(ref)}
        if name == "mmd":
            g = cfg.mmd_bandwidth or metricmod.median_bandwidth(ref)
            entry.update(kernel="gaussian", bandwidth=g, estimator="biased-V",
                         value=metricmod.mmd(samples, ref, g))
        elif name == "sliced_w1":
            rng = derive_rng(seed, "metric-sw1")
            entry.update(n_proj=cfg.n_proj,
                         value=metricmod.sliced_w1(samples, ref, cfg.n_proj, rng))
        elif name == "w2":
            rng = derive_rng(seed, "metric-w2")
            m = min(len(samples), len(ref), cfg.w2_max_points)
            a = samples[rng.choice(len(samples), m, replace=False)]
            b = ref[rng.choice(len(ref), m, replace=False)]
            entry.update(subsample=m, value=metricmod.w2(a, b))
        elif name == "js_faces":
            entry.update(units="nats", value=metricmod.js_face_histogram(
                manifold, samples, ref, labels_y=dataset.test_faces))
        out[f"{sampler}/{name}"] = entry
    return out


# ---------------------------------------------------------------------------
# run directories and reports
# ---------------------------------------------------------------------------
def fresh_dir(path):
    """``path`` if unused, else ``path.r1``, ``path.r2`` ... (never overwrites)."""
    candidate, k = path, 0
    while True:
        try:
            os.makedirs(candidate)
            return candidate
        except FileExistsError:
            k += 1
            candidate = f"{path}.r{k}"


def write_samples(path, x, meta):
    np.savetxt(path, x, delimiter=",", fmt="%.17g",
               header=",".join(f"x{i}" for i in range(x.shape[1])), comments="")
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def read_samples(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


@dataclass
class RunReport:
    config_hash: str
    config: dict
    seeds: list
    per_seed: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    artifacts: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    def summarize(self):
        keys = sorted({k for v in self.per_seed.values() for k in v})
        self.summary = {}
        for k in keys:
            vals = [self.per_seed[s][k]["value"] for s in self.per_seed if k in self.per_seed[s]]
            self.summary[k] = {"values": vals, "mean": float(np.mean(vals)),
                               "std": float(np.std(vals)), "median": float(np.median(vals))}
        return self

    def to_dict(self):
        return {"config_hash": self.config_hash, "config": self.config, "seeds": self.seeds,
                "per_seed": {str(k): v for k, v in self.per_seed.items()},
                "summary": self.summary, "wall_clock": self.wall_clock,
                "artifacts": self.artifacts, "checks": self.checks}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as err:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, f"{type(err).__name__}: {err}") from err


def run_seed(cfg, seed, out_root=None):
    """Metric entries for one master seed; artifacts are written when ``out_root`` is set."""
    cfg = cfg.replace(seed=int(seed)).validate()
    run_dir = None
    if out_root:
        run_dir = fresh_dir(os.path.join(out_root, cfg.config_hash()[:12], f"seed-{seed}"))
        with open(os.path.join(run_dir, "config.toml"), "w") as fh:
            fh.write(cfg.to_toml())
    manifold = _stage("setup", manifold_for, cfg)
    ds = _stage("generate-data", generate_dataset, cfg, manifold, seed)
    if run_dir:
        ds.to_csv(os.path.join(run_dir, "dataset.csv"))
    history = []
    model = _stage("train", train_model, cfg, manifold, ds.train, seed, history)
    if run_dir:
        model.save(os.path.join(run_dir, "checkpoint.bin"))
        np.savetxt(os.path.join(run_dir, "train_log.csv"), np.array(history), delimiter=",",
                   fmt=["%d", "%.10g"], header="epoch,loss", comments="")
    count = cfg.n_samples or int(ds.is_test.sum())
    results = {}
    for sampler in cfg.samplers:
        x = _stage("sample", sample_model, cfg, model, manifold, sampler, count, seed)
        params = sampler_params(cfg, sampler, count)
        if run_dir:
            write_samples(os.path.join(run_dir, f"samples-{sampler}.csv"), x,
                          {**params, "seed": seed, "config_hash": cfg.config_hash()})
        entries = _stage("evaluate", evaluate_samples, cfg, manifold, x, ds, seed, sampler)
        for e in entries.values():
            e.update(params, method=cfg.method, rescale=cfg.rescale)
        results.update(entries)
    if run_dir:
        with open(os.path.join(run_dir, "report.json"), "w") as fh:
            json.dump({"seed": seed, "config_hash": cfg.config_hash(), "metrics": results},
                      fh, indent=2, sort_keys=True)
    return results, run_dir


def run_experiment(cfg, seeds=(1, 2, 3), out_root=None, workers=1):
    """Run every seed and aggregate mean, std and median per metric."""
    cfg.validate()
    start = time.perf_counter()
    report = RunReport(cfg.config_hash(), cfg.to_dict(), [int(s) for s in seeds])
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(run_seed, [cfg] * len(seeds), seeds, [out_root] * len(seeds)))
    else:
        outs = [run_seed(cfg, s, out_root) for s in seeds]
    for s, (res, rd) in zip(seeds, outs):
        report.per_seed[int(s)] = res
        if rd:
            report.artifacts[int(s)] = rd
    report.summarize()
    report.wall_clock = time.perf_counter() - start
    if out_root:
        base = os.path.join(out_root, cfg.config_hash()[:12])
        path = fresh_dir(os.path.join(base, "aggregate"))
        report.write(os.path.join(path, "report.json"))
        report.artifacts["report"] = os.path.join(path, "report.json")
    return report


# ---------------------------------------------------------------------------
# small-noise verification sweeps
# ---------------------------------------------------------------------------
@dataclass
class VerifyConfig:
    kappa: float = 1.0
    mu: float = 0.3
    delta_iso: float = 0.02
    delta_niso: float = 0.1
    c_niso: float = 0.05
    n_thetas: int = 16
    log_sigma_lo: float = -3.0
    log_sigma_hi: float = -1.5
    n_sigmas: int = 6
    slope_target: float = -2.0
    slope_tol: float = 0.1
    r2_min: float = 0.999
    tangential_exponent_min: float = 0.9
    niso_rel_tol: float = 0.02
    niso_sigma_max: float = 0.01


def verify_theorems(vcfg=None, out_dir=None):
    """Quadrature sweeps behind the small-noise claims, with pass/fail checks.

    Checks: slope of the isotropic normal score norm on the circle, the
    tangential convergence exponent (with and without extra normal noise),
    and the fixed-c normal score on a plane patch.
    """
    v = vcfg or VerifyConfig()
    start = time.perf_counter()
    sigmas = oracles.log_sigmas(v.log_sigma_lo, v.log_sigma_hi, v.n_sigmas)
    vm = oracles.VonMises(kappa=v.kappa, mu=v.mu)
    circle = oracles.CircleQuadrature(vm)
    thetas = np.linspace(0, 2 * np.pi, v.n_thetas, endpoint=False)
    rows, checks = [], []

    x_off = (1.0 + v.delta_iso) * np.array([np.cos(0.7), np.sin(0.7)])
    normal = oracles.normal_scale_sweep(circle, x_off, sigmas)
    fit = oracles.scale_exponent_fit(sigmas, normal)
    checks.append({"name": "iso-normal-slope", "value": fit.slope, "r2": fit.r2,
                   "target": v.slope_target, "tol": v.slope_tol, "r2_min": v.r2_min,
                   "passed": bool(abs(fit.slope - v.slope_target) <= v.slope_tol
                                  and fit.r2 >= v.r2_min)})

    tan_iso = oracles.circle_tangential_errors(circle, thetas, sigmas)
    fit_t = oracles.scale_exponent_fit(sigmas, tan_iso)
    checks.append({"name": "iso-tangential-exponent", "value": fit_t.slope, "r2": fit_t.r2,
                   "min": v.tangential_exponent_min,
                   "passed": bool(fit_t.slope >= v.tangential_exponent_min)})

    tan_niso = oracles.circle_tangential_errors(circle, thetas, sigmas, v.c_niso)
    fit_n = oracles.scale_exponent_fit(sigmas, tan_niso)
    checks.append({"name": "niso-tangential-exponent", "value": fit_n.slope, "r2": fit_n.r2,
                   "c_niso": v.c_niso, "min": v.tangential_exponent_min,
                   "passed": bool(fit_n.slope >= v.tangential_exponent_min)})

    patch = oracles.PlanePatchQuadrature()
    foot = np.array([0.4, -0.2, 0.0])
    x_patch = foot + np.array([0.0, 0.0, v.delta_niso])
    small = sigmas[sigmas <= v.niso_sigma_max * (1 + 1e-12)]
    measured, expected = oracles.niso_normal_check(patch, x_patch, foot, small, v.c_niso)
    rel = np.abs(measured - expected) / np.abs(expected)
    checks.append({"name": "niso-fixed-c-normal", "value": float(rel.max()),
                   "c_niso": v.c_niso, "tol": v.niso_rel_tol,
                   "saturation": v.delta_niso / v.c_niso ** 2,
                   "passed": bool(rel.max() <= v.niso_rel_tol)})

    for i, s in enumerate(sigmas):
        row = {"sigma": s, "iso_normal_norm": normal[i], "iso_tangential_err": tan_iso[i],
               "niso_tangential_err": tan_niso[i], "niso_normal_measured": np.nan,
               "niso_normal_expected": np.nan}
        j = np.flatnonzero(np.isclose(small, s))
        if j.size:
            row["niso_normal_measured"] = measured[j[0]]
            row["niso_normal_expected"] = expected[j[0]]
        rows.append(row)

    report = RunReport("verify", vars(v).copy(), [])
    report.checks = checks
    report.summary = {c["name"]: {"value": c["value"], "passed": c["passed"]} for c in checks}
    report.wall_clock = time.perf_counter() - start
    if out_dir:
        path = fresh_dir(os.path.join(out_dir, "verify"))
        keys = list(rows[0])
        np.savetxt(os.path.join(path, "sweep.csv"),
                   np.array([[r[k] for k in keys] for r in rows]), delimiter=",",
                   fmt="%.12g", header=",".join(keys), comments="")
        report.artifacts = {"sweep": os.path.join(path, "sweep.csv"),
                            "report": os.path.join(path, "report.json")}
        report.write(report.artifacts["report"])
    return report


__all__ = [
    "Dataset", "RunReport", "VerifyConfig", "ExperimentConfig", "evaluate_samples",
    "generate_dataset", "manifold_for", "new_model", "run_experiment", "run_seed",
    "sample_model", "schedule_for", "train_model", "verify_theorems",
]
