"""Command-line front end.

Configuration is an INI file with the sections ``[paths]``, ``[model]``,
``[sampler]``, ``[compose]``, ``[predict]``, ``[validate]``, ``[simulate]``
and ``[run]``. Values are resolved as: built-in defaults, then the config
file, then command-line flags. Relative paths are taken relative to the
config file. The output directory is ``--out``, else ``[run] out_dir``,
else ``$RESP_OUT_DIR``, else ``./resp_out``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Errors are also printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .assess import (
    ModelConfig,
    ValidateConfig,
    loo_validate,
    read_skill_csv,
    vif_draws,
    vif_local_all,
    vif_remote_all,
    write_skill_csv,
    write_skill_summary,
)
from .data import (
    AnomalyPipeline,
    DataError,
    Dataset,
    check_centered,
    read_locations,
    read_series,
    write_locations,
    write_series,
)
from .kernels import NearSingularError
from .likelihood import ModelState, NumericalError, Priors, simulate
from .linalg import SingularMatrixError
from .posterior import compose_alpha, predict, read_cov_binary, transform_to_eof
from .reduced_rank import (
    BasisBuilder,
    EmptyKnotsError,
    RankError,
    compute_eofs,
    place_knot_grid,
    reparam_map,
)
from .sampler import Chain, SamplerConfig, hpd_interval, run_chain

log = logging.getLogger("resp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, message: str, detail: dict | None = None):
        super().__init__(message)
        self.detail = detail or {}


# ---------------------------------------------------------------- config


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _strs(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass
class SimulateConfig:
    n_s: int = 30
    n_t: int = 25
    k: int = 10
    remote_shape: tuple = (10, 6)
    local_bbox: tuple = (-109.0, -102.0, 37.0, 41.0)
    remote_bbox: tuple = (-170.0, -120.0, -10.0, 30.0)
    beta: tuple = (0.0, -0.3)
    sigma2_w: float = 0.6
    nugget_ratio: float = 0.05
    sigma2_alpha: float = 2.0
    rho_w: float = 150.0
    rho_alpha: float = 800.0
    remote_range: float = 1500.0
    start_year: int = 1981


@dataclass
class RunConfig:
    base: Path = field(default_factory=Path.cwd)
    paths: dict = field(default_factory=dict)
    knot_grid: tuple | None = None
    knot_count: int = 30
    priors: Priors = field(default_factory=Priors)
    nu_w: float = 0.5
    nu_alpha: float = 0.5
    eofs: int = 3
    intercept: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    compose_draws: int = 500
    workers: int = 1
    predict_time: str | None = None
    predict_draws: int = 500
    validate_draws: int = 200
    validate_years: tuple | None = None
    validate_models: tuple = ("RESP", "CLIM")
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    seed: int | None = None
    standardize: bool = True
    train_times: tuple | None = None
    out_dir: str | None = None

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise ConfigError(f"[paths] {key} is required")
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.base / p

    def covariate_paths(self) -> list:
        raw = self.paths.get("covariates", "")
        return [(Path(p) if Path(p).is_absolute() else self.base / p) for p in _strs(raw)]

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required (set [run] seed or pass --seed)")
        return self.seed

    def fit_fingerprint(self) -> dict:
        """Everything that determines a fitted chain."""
        return {
            "paths": {k: v for k, v in sorted(self.paths.items())},
            "knot_grid": list(self.knot_grid) if self.knot_grid else None,
            "knot_count": self.knot_count,
            "priors": self.priors.to_dict(),
            "nu_w": self.nu_w,
            "nu_alpha": self.nu_alpha,
            "intercept": self.intercept,
            "sampler": asdict(self.sampler),
            "seed": self.seed,
            "standardize": self.standardize,
            "train_times": list(self.train_times) if self.train_times else None,
        }


_SAMPLER_TYPES = {f.name: f.type for f in fields(SamplerConfig)}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    sampler_kw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg.base = path.resolve().parent
        try:
            _apply_sections(cfg, parser, sampler_kw)
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: {exc}") from exc
    overrides = overrides or {}
    if overrides.get("seed") is not None:
        cfg.seed = int(overrides["seed"])
    if overrides.get("workers") is not None:
        cfg.workers = int(overrides["workers"])
    if cfg.seed is not None:
        sampler_kw["seed"] = cfg.seed
    try:
        cfg.sampler = SamplerConfig(**sampler_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[sampler] {exc}") from exc
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.knot_count < 1:
        raise ConfigError("[paths] knot_count must be >= 1")
    return cfg


def _apply_sections(cfg: RunConfig, parser, sampler_kw: dict) -> None:
    if parser.has_section("paths"):
        sec = dict(parser["paths"])
        if "knot_grid" in sec:
            cfg.knot_grid = _floats(sec.pop("knot_grid"))
            if len(cfg.knot_grid) != 4:
                raise ConfigError("[paths] knot_grid needs lon_min, lon_max, lat_min, lat_max")
        if "knot_count" in sec:
            cfg.knot_count = int(sec.pop("knot_count"))
        cfg.paths = sec
    if parser.has_section("model"):
        m = parser["model"]
        prior_kw = {}
        if "beta_cov" in m:
            prior_kw["beta_cov"] = m.getfloat("beta_cov")
        for key in ("ig_w", "ig_alpha", "ig_eps", "unif_rho_w", "unif_rho_alpha"):
            if key in m:
                prior_kw[key] = _floats(m[key])
        try:
            cfg.priors = Priors(**prior_kw)
        except ValueError as exc:
            raise ConfigError(f"[model] {exc}") from exc
        cfg.nu_w = m.getfloat("nu_w", cfg.nu_w)
        cfg.nu_alpha = m.getfloat("nu_alpha", cfg.nu_alpha)
        cfg.eofs = m.getint("eofs", cfg.eofs)
        cfg.intercept = m.getboolean("intercept", cfg.intercept)
    if parser.has_section("sampler"):
        for key, val in parser["sampler"].items():
            if key not in _SAMPLER_TYPES:
                raise ConfigError(f"[sampler] unknown key {key!r}")
            typ = _SAMPLER_TYPES[key]
            sampler_kw[key] = int(val) if typ == "int" else float(val) if typ == "float" else val
    if parser.has_section("compose"):
        c = parser["compose"]
        cfg.compose_draws = c.getint("draws", cfg.compose_draws)
        cfg.workers = c.getint("workers", cfg.workers)
    if parser.has_section("predict"):
        p = parser["predict"]
        cfg.predict_time = p.get("time", cfg.predict_time)
        cfg.predict_draws = p.getint("draws", cfg.predict_draws)
    if parser.has_section("validate"):
        v = parser["validate"]
        cfg.validate_draws = v.getint("draws", cfg.validate_draws)
        if "years" in v:
            cfg.validate_years = _strs(v["years"])
        if "models" in v:
            cfg.validate_models = _strs(v["models"])
    if parser.has_section("simulate"):
        s = parser["simulate"]
        kw = {}
        for f in fields(SimulateConfig):
            if f.name not in s:
                continue
            if f.type == "int":
                kw[f.name] = s.getint(f.name)
            elif f.type == "float":
                kw[f.name] = s.getfloat(f.name)
            elif f.name == "remote_shape":
                kw[f.name] = tuple(int(x) for x in _floats(s[f.name]))
            else:
                kw[f.name] = _floats(s[f.name])
        cfg.simulate = SimulateConfig(**kw)
    if parser.has_section("run"):
        r = parser["run"]
        if "seed" in r:
            cfg.seed = r.getint("seed")
        cfg.standardize = r.getboolean("standardize", cfg.standardize)
        if "train_times" in r:
            cfg.train_times = _strs(r["train_times"])
        cfg.out_dir = r.get("out_dir", cfg.out_dir)


def out_dir(cfg: RunConfig, flag=None) -> Path:
    if flag:
        d = Path(flag)
    elif cfg.out_dir:
        d = Path(cfg.out_dir)
        if not d.is_absolute():
            d = cfg.base / d
    elif os.environ.get("RESP_OUT_DIR"):
        d = Path(os.environ["RESP_OUT_DIR"])
    else:
        d = Path("resp_out")
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- manifests


def _sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def file_hash(path) -> str:
    return _sha256_bytes(Path(path).read_bytes())


def json_hash(obj) -> str:
    return _sha256_bytes(json.dumps(obj, sort_keys=True, default=str).encode())


def versions() -> dict:
    return {
        "resp": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def write_manifest(path, payload: dict, outputs=()) -> None:
    payload = dict(payload)
    payload["versions"] = versions()
    payload["outputs"] = {Path(p).name: file_hash(p) for p in sorted(outputs, key=str)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path.name} not found; run the prerequisite subcommand first")
    return json.loads(path.read_text())


def _check_against_fit(cfg: RunConfig, fit_manifest: dict) -> None:
    want = {"config_hash": json_hash(cfg.fit_fingerprint()), "data_hash": data_hashes(cfg)["combined"]}
    diff = {
        k: {"fit": fit_manifest.get(k), "current": v}
        for k, v in want.items()
        if fit_manifest.get(k) != v
    }
    if diff:
        raise ConfigError("current config or data differ from the fitted chain", {"manifest_diff": diff})


# ---------------------------------------------------------------- ingestion


def data_hashes(cfg: RunConfig) -> dict:
    roles = ["locations", "response", "remote_locations", "remote"]
    if "knots" in cfg.paths:
        roles.append("knots")
    out = {r: file_hash(cfg.path(r)) for r in roles}
    for i, p in enumerate(cfg.covariate_paths()):
        out[f"covariate_{i}"] = file_hash(p)
    out["combined"] = json_hash(out)
    return out


def _read_inputs(cfg: RunConfig) -> Dataset:
    for role in ("locations", "response", "remote_locations", "remote"):
        p = cfg.path(role)
        if not p.exists():
            raise DataError(f"{role} file {p} does not exist")
    ids, ll = read_locations(cfg.path("locations"))
    rids, rll = read_locations(cfg.path("remote_locations"))
    response = read_series(cfg.path("response"), ids, ll)
    remote = read_series(cfg.path("remote"), rids, rll)
    covs = tuple(read_series(p, ids, ll) for p in cfg.covariate_paths())
    return Dataset(response, remote, covs, intercept=cfg.intercept)


def train_indices(cfg: RunConfig, full: Dataset) -> np.ndarray:
    times = full.time_index
    if cfg.train_times:
        missing = [t for t in cfg.train_times if t not in times]
        if missing:
            raise DataError(f"training times not in data: {missing}")
        idx = [times.index(t) for t in cfg.train_times]
    else:
        idx = [i for i, t in enumerate(times) if t != cfg.predict_time]
    return np.array(idx)


def ingest(cfg: RunConfig, standardize: bool | None = None):
    """Read all inputs; standardize on the training scope if requested.

    Returns the dataset over every time in the files and the fitted
    :class:`AnomalyPipeline` (``None`` when passing data through).
    """
    standardize = cfg.standardize if standardize is None else standardize
    full = _read_inputs(cfg)
    idx = train_indices(cfg, full)
    if standardize:
        pipe = AnomalyPipeline.fit(full, idx)
        return pipe.transform(full), pipe, idx
    check_centered(full.select_times(idx))
    return full, None, idx


def load_knots(cfg: RunConfig, data: Dataset):
    if "knots" in cfg.paths:
        ids, ll = read_locations(cfg.path("knots"))
        return ids, ll
    if cfg.knot_grid is None:
        lon, lat = data.remote.lonlat[:, 0], data.remote.lonlat[:, 1]
        bbox = (lon.min(), lon.max(), lat.min(), lat.max())
    else:
        bbox = cfg.knot_grid
    ll = place_knot_grid(bbox, cfg.knot_count)
    return tuple(f"knot{j:03d}" for j in range(len(ll))), ll


# ---------------------------------------------------------------- subcommands


def cmd_simulate(cfg: RunConfig, args, out: Path) -> dict:
    seed = cfg.require_seed()
    s = cfg.simulate
    rng = np.random.default_rng([seed, 1])
    lon0, lon1, lat0, lat1 = s.local_bbox
    locs = np.c_[rng.uniform(lon0, lon1, s.n_s), rng.uniform(lat0, lat1, s.n_s)]
    r0, r1, q0, q1 = s.remote_bbox
    n_lon, n_lat = s.remote_shape
    rl = np.array([(lo, la) for la in np.linspace(q0, q1, n_lat) for lo in np.linspace(r0, r1, n_lon)])
    knots = place_knot_grid(s.remote_bbox, s.k)
    truth = ModelState(np.array(s.beta), s.sigma2_w, s.nugget_ratio, s.sigma2_alpha, s.rho_w, s.rho_alpha,
                       nu_w=cfg.nu_w, nu_alpha=cfg.nu_alpha)
    times = tuple(str(s.start_year + t) for t in range(s.n_t))
    rule = "intercept+field" if len(s.beta) == 2 else "intercept"
    if len(s.beta) not in (1, 2):
        raise ConfigError("[simulate] beta must have one (intercept) or two entries")
    sim = simulate(truth, locs, rl, knots, s.n_t, design_rule=rule, seed=seed,
                   remote_range=s.remote_range, times=times)
    d = sim.data
    files = {
        "locations": out / "locations.csv",
        "response": out / "response.csv",
        "remote_locations": out / "remote_locations.csv",
        "remote": out / "remote.csv",
        "knots": out / "knots.csv",
    }
    write_locations(files["locations"], d.response.ids, d.response.lonlat)
    write_series(files["response"], d.response)
    write_locations(files["remote_locations"], d.remote.ids, d.remote.lonlat)
    write_series(files["remote"], d.remote)
    write_locations(files["knots"], [f"knot{j:03d}" for j in range(len(knots))], knots)
    cov_files = []
    for i, c in enumerate(d.covariates):
        p = out / f"covariate_{i + 1}.csv"
        write_series(p, c)
        cov_files.append(p)
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps({"state": truth.to_dict(),
                                      "alpha_star": sim.alpha_star.tolist()}, indent=2, sort_keys=True) + "\n")
    ini = configparser.ConfigParser()
    ini["paths"] = {k: v.name for k, v in files.items()}
    if cov_files:
        ini["paths"]["covariates"] = ", ".join(p.name for p in cov_files)
    ini["model"] = {"nu_w": str(cfg.nu_w), "nu_alpha": str(cfg.nu_alpha)}
    ini["run"] = {"seed": str(seed), "standardize": "false"}
    cfg_path = out / "config.ini"
    with cfg_path.open("w") as fh:
        ini.write(fh)
    outputs = [*files.values(), *cov_files, truth_path, cfg_path]
    write_manifest(out / "simulate_manifest.json",
                   {"command": "simulate", "seed": seed, "config_hash": json_hash(asdict(s))}, outputs)
    return {"out_dir": str(out), "n_s": d.n_s, "n_t": d.n_t, "n_r": d.n_r, "k": len(knots)}


def _builder(cfg, data, knots):
    return BasisBuilder(data.remote.lonlat, knots, data.Z, cfg.nu_alpha)


def cmd_fit(cfg: RunConfig, args, out: Path) -> dict:
    seed = cfg.require_seed()
    if cfg.predict_time is not None and cfg.train_times and cfg.predict_time in cfg.train_times:
        raise ConfigError(f"prediction time {cfg.predict_time} is part of the training index")
    full, pipe, idx = ingest(cfg)
    train = full.select_times(idx)
    knot_ids, knots = load_knots(cfg, train)
    builder = _builder(cfg, train, knots)
    ckpt = out / "checkpoint.json"
    chain = run_chain(train, builder, cfg.priors, cfg.sampler, nu_w=cfg.nu_w, nu_alpha=cfg.nu_alpha,
                      checkpoint_path=ckpt, resume=getattr(args, "resume", False))
    chain_path = out / "chain.csv"
    chain.to_csv(chain_path)
    knot_path = out / "knots_used.csv"
    write_locations(knot_path, knot_ids, knots)
    if ckpt.exists():
        ckpt.unlink()
    write_manifest(out / "fit_manifest.json", {
        "command": "fit",
        "seed": seed,
        "config_hash": json_hash(cfg.fit_fingerprint()),
        "config": cfg.fit_fingerprint(),
        "data_hash": data_hashes(cfg)["combined"],
        "dims": {"n_s": train.n_s, "n_t": train.n_t, "n_r": train.n_r, "p": train.p, "k": builder.k},
        "standardization": {
            "enabled": pipe is not None,
            "scope": [full.time_index[i] for i in idx],
            "pipeline": pipe.to_dict() if pipe is not None else None,
        },
        "chain": chain.manifest(),
    }, [chain_path, knot_path])
    return {"chain": str(chain_path), "acceptance_rates": chain.acceptance_rates()}


def _load_fit(cfg: RunConfig, out: Path):
    manifest = read_manifest(out / "fit_manifest.json")
    _check_against_fit(cfg, manifest)
    cfg.train_times = tuple(manifest["standardization"]["scope"])
    chain = Chain.from_csv(out / "chain.csv", manifest["chain"])
    full, pipe, idx = ingest(cfg)
    train = full.select_times(idx)
    knot_ids, knots = read_locations(out / "knots_used.csv")
    return manifest, chain, full, pipe, train, knot_ids, knots


def cmd_compose(cfg: RunConfig, args, out: Path) -> dict:
    seed = cfg.require_seed()
    G = args.draws or cfg.compose_draws
    _, chain, _, _, train, knot_ids, knots = _load_fit(cfg, out)
    post = compose_alpha(chain, train, _builder(cfg, train, knots), G,
                         workers=cfg.workers, seed=seed, knot_ids=knot_ids)
    csv_path, cov_path = out / "alpha.csv", out / "alpha_cov.bin"
    post.write_csv(csv_path)
    post.write_cov(cov_path)
    write_manifest(out / "compose_manifest.json",
                   {"command": "compose", "seed": seed, "draws": G,
                    "config_hash": json_hash(cfg.fit_fingerprint())}, [csv_path, cov_path])
    return {"alpha": str(csv_path), "n_draws": post.n_draws}


def cmd_eofs(cfg: RunConfig, args, out: Path) -> dict:
    K = args.K or cfg.eofs
    full, pipe, idx = ingest(cfg)
    train = full.select_times(idx)
    Z = train.Z - train.Z.mean(axis=1, keepdims=True)
    eof = compute_eofs(Z, K)
    pat_path, score_path = out / "eof_patterns.csv", out / "eof_scores.csv"
    with pat_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["remote_id", "eof", "weight"])
        for i, rid in enumerate(train.remote.ids):
            for j in range(K):
                w.writerow([rid, f"eof{j + 1}", repr(float(eof.W[i, j]))])
    with score_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eof", "time", "score"])
        for j in range(K):
            for t, tt in enumerate(train.time_index):
                w.writerow([f"eof{j + 1}", tt, repr(float(eof.A[j, t]))])
    outputs = [pat_path, score_path]
    result = {"explained": eof.explained.tolist()}
    if (out / "alpha.csv").exists() and (out / "fit_manifest.json").exists():
        _, chain, _, _, train, knot_ids, knots = _load_fit(cfg, out)
        post = _read_alpha(out, train, knot_ids)
        basis = _builder(cfg, train, knots).build_for(chain.posterior_mean_state())
        eof_post = transform_to_eof(post, reparam_map(eof.W, basis))
        a_path, c_path = out / "alpha_eof.csv", out / "alpha_eof_cov.bin"
        eof_post.write_csv(a_path)
        eof_post.write_cov(c_path)
        outputs += [a_path, c_path]
        result["alpha_eof"] = str(a_path)
    write_manifest(out / "eofs_manifest.json",
                   {"command": "eofs", "K": K, "explained": eof.explained.tolist()}, outputs)
    return result


def _read_alpha(out: Path, train: Dataset, knot_ids):
    from .posterior import AlphaPosterior

    k = len(knot_ids)
    mean = np.zeros(train.n_s * k)
    pos = {(s, j): i * k + jj for i, s in enumerate(train.response.ids) for jj, j in enumerate(knot_ids)}
    n_draws = json.loads((out / "compose_manifest.json").read_text())["draws"]
    with (out / "alpha.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            mean[pos[(row["location_id"], row["knot_or_eof_id"])]] = float(row["mean"])
    cov = read_cov_binary(out / "alpha_cov.bin")
    return AlphaPosterior(mean, cov, train.response.ids, tuple(knot_ids), n_draws)


def cmd_predict(cfg: RunConfig, args, out: Path) -> dict:
    seed = cfg.require_seed()
    if args.time:
        cfg.predict_time = args.time
    if cfg.predict_time is None:
        raise ConfigError("no prediction time ([predict] time or --time)")
    G = args.draws or cfg.predict_draws
    _, chain, full, _, train, _, knots = _load_fit(cfg, out)
    if cfg.predict_time not in full.time_index:
        raise DataError(f"covariates for time {cfg.predict_time} are missing from the input files")
    if cfg.predict_time in train.time_index:
        raise ConfigError(f"prediction time {cfg.predict_time} is part of the training index")
    t0 = full.time_index.index(cfg.predict_time)
    pred = predict(chain, train, _builder(cfg, train, knots), full.X[t0], full.Z[:, t0], G, seed)
    path = out / f"prediction_{cfg.predict_time}.csv"
    pred.write_csv(path)
    write_manifest(out / "predict_manifest.json",
                   {"command": "predict", "seed": seed, "time": cfg.predict_time, "draws": G,
                    "config_hash": json_hash(cfg.fit_fingerprint())}, [path])
    return {"prediction": str(path)}


def cmd_validate(cfg: RunConfig, args, out: Path) -> dict:
    seed = cfg.require_seed()
    full = _read_inputs(cfg)
    knot_ids, knots = load_knots(cfg, full)
    years = args.years.split(",") if args.years else cfg.validate_years
    model = ModelConfig(knots, cfg.priors, cfg.nu_w, cfg.nu_alpha)
    vcfg = ValidateConfig(G=cfg.validate_draws, standardize=cfg.standardize,
                          workers=cfg.workers, models=cfg.validate_models)
    reports = loo_validate(full, model, cfg.sampler, vcfg, years=years)
    csv_path, js_path = out / "skill.csv", out / "skill_summary.json"
    write_skill_csv(csv_path, reports)
    write_skill_summary(js_path, reports)
    failed = {r.year: r.error for r in reports if r.error}
    write_manifest(out / "validate_manifest.json", {
        "command": "validate",
        "seed": seed,
        "config_hash": json_hash(cfg.fit_fingerprint()),
        "data_hash": data_hashes(cfg)["combined"],
        "standardization": {"enabled": cfg.standardize, "scope": "per fold, training years only"},
        "failed_years": failed,
    }, [csv_path, js_path])
    return {"skill": str(csv_path), "years": len(reports), "failed": len(failed)}


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def skill_svg(rows, metric: str = "rps_relative", width: int = 480, height: int = 320) -> str:
    """Box-and-whisker summary of one metric per model as a standalone SVG."""
    models = sorted({r["model"] for r in rows})
    vals = {m: np.array([r[metric] for r in rows if r["model"] == m]) for m in models}
    allv = np.concatenate([v for v in vals.values() if v.size]) if rows else np.zeros(1)
    lo, hi = float(allv.min()), float(allv.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    left, right, top, bottom = 60, 20, 30, 40

    def y(v):
        return top + (hi - v) / (hi - lo) * (height - top - bottom)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{metric} by model</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
    ]
    for tick in np.linspace(lo, hi, 5):
        parts.append(f'<text x="{left - 6}" y="{y(tick) + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    if lo < 0 < hi:
        parts.append(f'<line x1="{left}" y1="{y(0):.1f}" x2="{width - right}" y2="{y(0):.1f}" '
                     'stroke="#999" stroke-dasharray="4 3"/>')
    slot = (width - left - right) / max(len(models), 1)
    for j, m in enumerate(models):
        v = vals[m]
        cx = left + (j + 0.5) * slot
        color = _SVG_COLORS[j % len(_SVG_COLORS)]
        parts.append(f'<text x="{cx:.1f}" y="{height - bottom + 18}" text-anchor="middle">{m}</text>')
        if not v.size:
            continue
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        half = slot * 0.25
        parts.append(f'<line x1="{cx:.1f}" y1="{y(v.max()):.1f}" x2="{cx:.1f}" y2="{y(v.min()):.1f}" stroke="{color}"/>')
        parts.append(f'<rect x="{cx - half:.1f}" y="{y(q3):.1f}" width="{2 * half:.1f}" '
                     f'height="{max(y(q1) - y(q3), 0.5):.1f}" fill="white" stroke="{color}"/>')
        parts.append(f'<line x1="{cx - half:.1f}" y1="{y(med):.1f}" x2="{cx + half:.1f}" y2="{y(med):.1f}" '
                     f'stroke="{color}" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(cfg: RunConfig, args, out: Path) -> dict:
    lines = ["# RESP report", ""]
    outputs = []
    result = {}
    if (out / "skill.csv").exists():
        rows = read_skill_csv(out / "skill.csv")
        summary = json.loads((out / "skill_summary.json").read_text())
        lines += ["## Skill scores", "", "| model | metric | median | q1 | q3 | years |", "|---|---|---|---|---|---|"]
        for m, entry in sorted(summary["models"].items()):
            for metric in ("heidke", "rps", "rps_relative"):
                if metric in entry:
                    e = entry[metric]
                    lines.append(f"| {m} | {metric} | {e['median']:.4f} | {e['q1']:.4f} | {e['q3']:.4f} | {entry['n_years']} |")
        if summary.get("failed_years"):
            lines += ["", f"Failed years: {', '.join(summary['failed_years'])}"]
        lines.append("")
        for metric in ("rps_relative", "heidke"):
            p = out / f"skill_{metric}.svg"
            p.write_text(skill_svg(rows, metric))
            outputs.append(p)
        result["models"] = sorted(summary["models"])
    if (out / "fit_manifest.json").exists():
        _, chain, _, _, train, knot_ids, knots = _load_fit(cfg, out)
        names = chain.column_names()[1:-1]
        lines += ["## Posterior summary", "", "| parameter | mean | hpd95_low | hpd95_high |", "|---|---|---|---|"]
        for name in names:
            x = chain.param(name)
            lo, hi = hpd_interval(x)
            lines.append(f"| {name} | {x.mean():.4f} | {lo:.4f} | {hi:.4f} |")
        state = chain.posterior_mean_state()
        builder = _builder(cfg, train, knots)
        basis = builder.build_for(state)
        vl = vif_local_all(train, state, basis, cfg.priors)
        vr = vif_remote_all(state, basis)
        vif_path = out / "vif.csv"
        with vif_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "id", "vif"])
            for j, v in enumerate(vl):
                w.writerow(["local", f"beta_{j}", repr(float(v))])
            for kid, v in zip(knot_ids, vr):
                w.writerow(["remote", kid, repr(float(v))])
        outputs.append(vif_path)
        lines += ["", "## Variance inflation (posterior-mean parameters)", "",
                  f"local: {', '.join(f'{v:.3f}' for v in vl)}",
                  f"remote: min {vr.min():.3f}, median {np.median(vr):.3f}, max {vr.max():.3f}", ""]
        if args.per_draw_vif:
            dl, dr = vif_draws(chain, train, builder, cfg.priors, G=args.per_draw_vif)
            p = out / "vif_draws.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["draw", *[f"beta_{j}" for j in range(dl.shape[1])], *knot_ids])
                for g in range(len(dl)):
                    w.writerow([g, *[repr(float(v)) for v in dl[g]], *[repr(float(v)) for v in dr[g]]])
            outputs.append(p)
    if len(lines) == 2:
        raise ConfigError("nothing to report: run fit or validate first")
    md = out / "report.md"
    md.write_text("\n".join(lines) + "\n")
    outputs.append(md)
    write_manifest(out / "report_manifest.json", {"command": "report"}, outputs)
    result["report"] = str(md)
    return result


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "compose": cmd_compose,
    "eofs": cmd_eofs,
    "predict": cmd_predict,
    "validate": cmd_validate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--workers", type=int, help="overrides [compose] workers")
    common.add_argument("--out", help="output directory (else [run] out_dir, $RESP_OUT_DIR, ./resp_out)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="resp", description="Remote-effects spatial process models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="draw a synthetic dataset")
    p = sub.add_parser("fit", parents=[common], help="run the MCMC sampler")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint.json")
    p = sub.add_parser("compose", parents=[common], help="composition-sample the knot coefficients")
    p.add_argument("--draws", type=int)
    p = sub.add_parser("eofs", parents=[common], help="EOFs of the remote field")
    p.add_argument("-K", type=int)
    p = sub.add_parser("predict", parents=[common], help="posterior predictive at a new time")
    p.add_argument("--time")
    p.add_argument("--draws", type=int)
    p = sub.add_parser("validate", parents=[common], help="leave-one-year-out validation")
    p.add_argument("--years", help="comma-separated subset of held-out years")
    p = sub.add_parser("report", parents=[common], help="score tables, VIFs and SVG summaries")
    p.add_argument("--per-draw-vif", type=int, default=0, metavar="G",
                   help="also write VIFs for G strided posterior draws")
    return parser


def _error_category(exc: BaseException):
    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, (DataError, EmptyKnotsError, RankError, FileNotFoundError)):
        return "data", EXIT_DATA
    if isinstance(exc, (NumericalError, SingularMatrixError, NearSingularError, np.linalg.LinAlgError,
                        FloatingPointError)):
        return "numerical", EXIT_NUMERICAL
    if isinstance(exc, (ValueError, TypeError)):
        # remaining validation failures come from user-supplied settings
        return "config", EXIT_CONFIG
    return None, None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers})
        out = out_dir(cfg, args.out)
        result = COMMANDS[args.command](cfg, args, out)
    except Exception as exc:
        category, code = _error_category(exc)
        if category is None:
            raise
        payload = {"error": category, "type": type(exc).__name__, "message": str(exc)}
        payload.update(getattr(exc, "detail", {}) or {})
        print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
        return code
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
