"""Experiment configuration loader: flat section-prefixed YAML keys."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from ncpvi.gibbs import GibbsConfig
from ncpvi.ncp_vi import ViConfig
from ncpvi.prior import ELLIPTIC1D_PRIOR_SCALE, LambdaPrior

PROBLEMS = ("elliptic1d",)


class ConfigError(ValueError):
    """Raised when experiment configuration is invalid."""


def _int_tuple(value: Any) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)) or not value:
        raise TypeError("expected a non-empty list")
    return tuple(int(v) for v in value)


def _optional_float(value: Any) -> float | None:
    return None if value is None else float(value)


# key -> (default, coercion)
_SCHEMA: dict[str, tuple[Any, Callable[[Any], Any]]] = {
    "problem": ("elliptic1d", str),
    "output_dir": ("runs/elliptic1d", str),
    "mesh.n_coarse": (100, int),
    "mesh.n_fine": (10_000, int),
    "mesh.sizes": ((100, 300, 500, 700, 900), _int_tuple),
    "mesh.workers": (1, int),
    "prior.alpha": (0.05, float),
    "prior.scale": (ELLIPTIC1D_PRIOR_SCALE, float),
    "prior.lambda_mean": (1.0, float),
    "prior.lambda_variance": (1.0e4, float),
    "forward.alpha_pde": (0.05, float),
    "forward.noise_pct": (0.05, float),
    "vi.tol": (1.0e-4, float),
    "vi.max_iter": (3000, int),
    "vi.c_lambda0": (None, _optional_float),
    "vi.r_max": (10, int),
    "vi.oversample": (10, int),
    "vi.solver": ("smw", str),
    "vi.cg_maxiter": (10, int),
    "vi.cg_rtol": (1.0e-10, float),
    "vi.n_eig_dump": (40, int),
    "gibbs.beta": (0.02, float),
    "gibbs.n_samples": (100_000, int),
    "gibbs.burn_in": (10_000, int),
    "gibbs.thin": (10, int),
    "gibbs.n_chains": (1, int),
    "gibbs.max_seconds": (None, _optional_float),
    "bands.offsets": ((0, 20, 40, 50), _int_tuple),
    "credibility.level": (0.95, float),
    "seeds.data": (1, int),
    "seeds.eig": (2, int),
    "seeds.chain": (3, int),
}

SEED_KEYS = ("seeds.data", "seeds.eig", "seeds.chain")


@dataclass(frozen=True)
class Seeds:
    data: int
    eig: int
    chain: int


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    n_coarse: int
    n_fine: int
    alpha_prior: float
    alpha_pde: float
    noise_pct: float
    prior_scale: float
    lambda_prior: LambdaPrior
    vi: ViConfig
    gibbs: GibbsConfig
    seeds: Seeds
    output_dir: Path
    mesh_sizes: tuple[int, ...] = (100, 300, 500, 700, 900)
    mesh_workers: int = 1
    band_offsets: tuple[int, ...] = (0, 20, 40, 50)
    credibility_level: float = 0.95
    n_eig_dump: int = 40
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def config_hash(self) -> str:
        return config_hash(self.raw)


def _resolve(raw: dict[str, Any]) -> dict[str, Any]:
    unknown = set(raw).difference(_SCHEMA)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")
    resolved: dict[str, Any] = {}
    for key, (default, coerce) in _SCHEMA.items():
        value = raw.get(key, default)
        try:
            resolved[key] = coerce(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid value for {key}: {value!r} ({exc})") from exc
    return resolved


def _build(resolved: dict[str, Any]) -> ExperimentConfig:
    if resolved["problem"] not in PROBLEMS:
        raise ConfigError(f"Unsupported problem {resolved['problem']!r}; expected one of {', '.join(PROBLEMS)}")
    if resolved["mesh.n_fine"] <= resolved["mesh.n_coarse"]:
        raise ConfigError(
            f"mesh.n_fine ({resolved['mesh.n_fine']}) must exceed mesh.n_coarse ({resolved['mesh.n_coarse']})"
        )
    if resolved["forward.noise_pct"] < 0:
        raise ConfigError(f"forward.noise_pct must be non-negative, got {resolved['forward.noise_pct']}")

    try:
        vi = ViConfig(
            tol=resolved["vi.tol"],
            max_iter=resolved["vi.max_iter"],
            c_lambda0=resolved["vi.c_lambda0"],
            r_max=resolved["vi.r_max"],
            oversample=resolved["vi.oversample"],
            solver=resolved["vi.solver"],
            cg_maxiter=resolved["vi.cg_maxiter"],
            cg_rtol=resolved["vi.cg_rtol"],
            eig_seed=resolved["seeds.eig"],
        )
        gibbs = GibbsConfig(
            beta=resolved["gibbs.beta"],
            n_samples=resolved["gibbs.n_samples"],
            burn_in=resolved["gibbs.burn_in"],
            thin=resolved["gibbs.thin"],
            rng_seed=resolved["seeds.chain"],
            n_chains=resolved["gibbs.n_chains"],
            max_seconds=resolved["gibbs.max_seconds"],
            band_offsets=tuple(k for k in resolved["bands.offsets"] if k > 0),
        )
        lambda_prior = LambdaPrior(resolved["prior.lambda_mean"], resolved["prior.lambda_variance"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return ExperimentConfig(
        problem=resolved["problem"],
        n_coarse=resolved["mesh.n_coarse"],
        n_fine=resolved["mesh.n_fine"],
        alpha_prior=resolved["prior.alpha"],
        alpha_pde=resolved["forward.alpha_pde"],
        noise_pct=resolved["forward.noise_pct"],
        prior_scale=resolved["prior.scale"],
        lambda_prior=lambda_prior,
        vi=vi,
        gibbs=gibbs,
        seeds=Seeds(resolved["seeds.data"], resolved["seeds.eig"], resolved["seeds.chain"]),
        output_dir=Path(resolved["output_dir"]),
        mesh_sizes=resolved["mesh.sizes"],
        mesh_workers=resolved["mesh.workers"],
        band_offsets=resolved["bands.offsets"],
        credibility_level=resolved["credibility.level"],
        n_eig_dump=resolved["vi.n_eig_dump"],
        raw=resolved,
    )


def parse_overrides(pairs: list[str]) -> dict[str, int]:
    """Parse `k=v` seed overrides; `k` may omit the `seeds.` prefix."""
    overrides: dict[str, int] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"Seed override must look like key=value, got {pair!r}")
        if not key.startswith("seeds."):
            key = f"seeds.{key}"
        if key not in SEED_KEYS:
            raise ConfigError(f"Unknown seed {key!r}; expected one of {', '.join(SEED_KEYS)}")
        try:
            overrides[key] = int(value)
        except ValueError as exc:
            raise ConfigError(f"Seed {key} must be an integer, got {value!r}") from exc
    return overrides


def build_config(raw: dict[str, Any] | None = None, **overrides: Any) -> ExperimentConfig:
    """Resolve a flat key mapping plus keyword overrides (dots written as `__`)."""
    merged = dict(raw or {})
    merged.update({key.replace("__", "."): value for key, value in overrides.items()})
    return _build(_resolve(merged))


def load_config(
    path: Path | None,
    *,
    seed_overrides: list[str] | None = None,
    output_dir: str | None = None,
) -> ExperimentConfig:
    """Load a YAML config; a missing path yields the defaults."""
    raw: dict[str, Any] = {}
    if path is not None:
        if not path.exists():
            raise ConfigError(f"Config not found: {path}")
        try:
            with path.open("r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"Config is not valid YAML: {path} ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"Config file must contain a mapping: {path}")
    raw.update(parse_overrides(seed_overrides or []))
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return _build(_resolve(raw))


def config_hash(resolved: dict[str, Any]) -> str:
    canonical = json.dumps({k: resolved[k] for k in sorted(resolved)}, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def describe(cfg: ExperimentConfig) -> dict[str, Any]:
    """JSON-friendly view used in run records."""
    view = asdict(cfg)
    view.pop("raw", None)
    view["output_dir"] = str(cfg.output_dir)
    return view
