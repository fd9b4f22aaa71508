"""Key/value configuration files for simulations and Monte Carlo runs.

Files use INI syntax (``configparser``). Lists are comma separated and
booleans accept ``true/false/yes/no/1/0``. A Monte Carlo file has one
``[experiment]`` section and any number of ``[model.<name>]`` sections;
when no model section is present the three benchmark designs are used.
A single-simulation file has one ``[dgp]`` section.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .dgp import MODELS, DgpConfig
from .exceptions import ConfigError
from .weights import build_lattice_queen, read_weights_csv

__all__ = [
    "ModelSpec",
    "McConfig",
    "ESTIMATORS",
    "EXAMPLE_CONFIG",
    "default_models",
    "parse_mc_config",
    "load_mc_config",
    "dump_mc_config",
    "parse_dgp_config",
    "load_dgp_config",
    "quick_config",
]

ESTIMATORS = ("gmm", "qml_transformed", "qml_direct")
TRANSFORMED_FORMS = ("exact", "flipped", "uncorrected")
DIRECT_TIME_EFFECTS = ("auto", "always", "never")
GMM_INSTRUMENTS = ("backward", "levels", "rotated")
DEFAULT_SEED = 1

EXAMPLE_CONFIG = """\
[experiment]
replications = 1000
lattice_sides = 5, 7, 9
T_values = 5, 10, 20
estimators = gmm, qml_transformed, qml_direct
base_seed = 1
parallel_workers = 0
transformed_form = uncorrected
direct_time_effects = auto
gmm_instruments = backward

[model.M1]
rho0 = 0.2
gamma0 = 0.5
delta0 = -0.2
beta0 = 0.5, 1.0
use_time_effects = false

[model.M2]
rho0 = 0.3
gamma0 = 0.2
delta0 = 0.2
beta0 = 0.5, 1.0
use_time_effects = false

[model.M3]
rho0 = 0.8
gamma0 = 0.1
delta0 = -0.2
beta0 = 0.5, 1.0
use_time_effects = true
"""


@dataclass(frozen=True)
class ModelSpec:
    """Parameters of one design; the lattice and T are supplied per cell."""

    name: str
    rho0: float
    gamma0: float
    delta0: float
    beta0: tuple[float, ...] = (0.5, 1.0)
    use_time_effects: bool = False
    sigma_mu: float = 1.0
    sigma_alpha: float = 1.0
    burn_in: int = 100

    def dgp(self, side: int, T: int, seed: int = DEFAULT_SEED) -> DgpConfig:
        return DgpConfig(
            W=build_lattice_queen(side),
            T=T,
            rho0=self.rho0,
            gamma0=self.gamma0,
            delta0=self.delta0,
            beta0=self.beta0,
            sigma_mu=self.sigma_mu,
            use_time_effects=self.use_time_effects,
            sigma_alpha=self.sigma_alpha,
            burn_in=self.burn_in,
            seed=seed,
            name=self.name,
        )


def default_models() -> tuple[ModelSpec, ...]:
    return tuple(ModelSpec(name=k, **v) for k, v in MODELS.items())


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo study definition.

    ``parallel_workers = 0`` means one worker per logical core. The three
    estimator options select likelihood and moment variants:
    ``transformed_form`` (see :data:`spatarch.qml.FORMS`),
    ``direct_time_effects`` (``auto`` follows the design's time effects) and
    ``gmm_instruments``.
    """

    models: tuple[ModelSpec, ...] = field(default_factory=default_models)
    lattice_sides: tuple[int, ...] = (5, 7, 9)
    T_values: tuple[int, ...] = (5, 10, 20)
    replications: int = 1000
    estimators: tuple[str, ...] = ESTIMATORS
    base_seed: int = DEFAULT_SEED
    parallel_workers: int = 0
    transformed_form: str = "uncorrected"
    direct_time_effects: str = "auto"
    gmm_instruments: str = "backward"

    def __post_init__(self):
        for name in ("lattice_sides", "T_values", "estimators", "models"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if not self.models or not self.lattice_sides or not self.T_values or not self.estimators:
            raise ConfigError("models, lattice_sides, T_values and estimators must be non-empty")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimator(s) {bad}; expected a subset of {list(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("duplicate estimator names")
        if len({m.name for m in self.models}) != len(self.models):
            raise ConfigError("duplicate model names")
        if any(s < 2 for s in self.lattice_sides):
            raise ConfigError("lattice sides must be >= 2")
        if any(T < 2 for T in self.T_values):
            raise ConfigError("T values must be >= 2")
        if self.parallel_workers < 0:
            raise ConfigError("parallel_workers must be >= 0")
        for name, allowed in (
            ("transformed_form", TRANSFORMED_FORMS),
            ("direct_time_effects", DIRECT_TIME_EFFECTS),
            ("gmm_instruments", GMM_INSTRUMENTS),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def validate_models(self) -> None:
        """Build every DGP once so that invalid designs fail before any work."""
        for m in self.models:
            for side in self.lattice_sides:
                m.dgp(side, self.T_values[0], self.base_seed)

    def digest(self) -> str:
        return hashlib.sha256(dump_mc_config(self).encode()).hexdigest()[:12]


def quick_config(**overrides) -> McConfig:
    """Smoke-run preset: 100 replications of M1 on the 5 x 5 lattice, T in {5, 10}."""
    base = dict(
        models=(default_models()[0],),
        lattice_sides=(5,),
        T_values=(5, 10),
        replications=100,
    )
    base.update(overrides)
    return McConfig(**base)


# -- parsing ---------------------------------------------------------------

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _bool(s: str, key: str) -> bool:
    v = s.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ConfigError(f"{key}: expected a boolean, got {s!r}")


def _list(s: str, conv, key: str) -> tuple:
    try:
        return tuple(conv(p.strip()) for p in s.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _num(s: str, conv, key: str):
    try:
        return conv(s.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {s!r} as {conv.__name__}") from None


def _reader(text: str, source: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str  # keep T_values as written
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cp


_MODEL_KEYS = {
    "rho0": float,
    "gamma0": float,
    "delta0": float,
    "beta0": "floats",
    "use_time_effects": "bool",
    "sigma_mu": float,
    "sigma_alpha": float,
    "burn_in": int,
}


def _model_kwargs(sec, where: str) -> dict:
    kw = {}
    for key, raw in sec.items():
        if key not in _MODEL_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kind = _MODEL_KEYS[key]
        if kind == "floats":
            kw[key] = _list(raw, float, f"{where}.{key}")
        elif kind == "bool":
            kw[key] = _bool(raw, f"{where}.{key}")
        else:
            kw[key] = _num(raw, kind, f"{where}.{key}")
    return kw


def parse_mc_config(text: str, source: str = "<string>") -> McConfig:
    cp = _reader(text, source)
    unknown = [s for s in cp.sections() if s != "experiment" and not s.startswith("model.")]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}")
    kw: dict = {}
    if cp.has_section("experiment"):
        sec = cp["experiment"]
        spec = {
            "replications": lambda v, k: _num(v, int, k),
            "lattice_sides": lambda v, k: _list(v, int, k),
            "T_values": lambda v, k: _list(v, int, k),
            "estimators": lambda v, k: _list(v, str, k),
            "base_seed": lambda v, k: _num(v, int, k),
            "parallel_workers": lambda v, k: _num(v, int, k),
            "transformed_form": lambda v, k: v.strip(),
            "direct_time_effects": lambda v, k: v.strip(),
            "gmm_instruments": lambda v, k: v.strip(),
        }
        for key, raw in sec.items():
            if key not in spec:
                raise ConfigError(f"{source}: [experiment] unknown key {key!r}")
            kw[key] = spec[key](raw, f"experiment.{key}")
    models = []
    for s in cp.sections():
        if s.startswith("model."):
            name = s.split(".", 1)[1]
            mk = _model_kwargs(cp[s], s)
            base = MODELS.get(name, {})
            missing = [k for k in ("rho0", "gamma0", "delta0") if k not in mk and k not in base]
            if missing:
                raise ConfigError(f"{source}: [{s}] missing {missing}")
            merged = {**base, **mk}
            models.append(ModelSpec(name=name, **merged))
    if models:
        kw["models"] = tuple(models)
    try:
        return McConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_mc_config(path: str | Path) -> McConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_mc_config(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_mc_config(cfg: McConfig) -> str:
    """Inverse of :func:`parse_mc_config` (canonical form, every key written)."""
    out = ["[experiment]"]
    for f in fields(McConfig):
        if f.name != "models":
            out.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    for m in cfg.models:
        out += ["", f"[model.{m.name}]"]
        for f in fields(ModelSpec):
            if f.name != "name":
                out.append(f"{f.name} = {_fmt(getattr(m, f.name))}")
    return "\n".join(out) + "\n"


# -- single DGP --------------------------------------------------------------

def parse_dgp_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> tuple[DgpConfig, int]:
    """Parse a ``[dgp]`` section into ``(DgpConfig, replication)``.

    Keys: ``model`` (optional benchmark name supplying defaults), ``side``
    or ``weights`` (CSV path), ``T``, ``seed``, ``replication`` and any
    model key (``rho0``, ``beta0``, ...). Validity errors of the design
    itself (admissibility, stationarity) propagate unchanged.
    """
    cp = _reader(text, source)
    if not cp.has_section("dgp"):
        raise ConfigError(f"{source}: missing [dgp] section")
    sec = dict(cp["dgp"])
    base = {}
    if "model" in sec:
        name = sec.pop("model").strip()
        if name not in MODELS:
            raise ConfigError(f"{source}: unknown model {name!r}")
        base = dict(MODELS[name])
    else:
        name = "custom"
    side = sec.pop("side", None)
    wpath = sec.pop("weights", None)
    if (side is None) == (wpath is None):
        raise ConfigError(f"{source}: give exactly one of 'side' or 'weights'")
    if "T" not in sec:
        raise ConfigError(f"{source}: missing T")
    T = _num(sec.pop("T"), int, "dgp.T")
    seed = _num(sec.pop("seed", str(DEFAULT_SEED)), int, "dgp.seed")
    rep = _num(sec.pop("replication", "0"), int, "dgp.replication")
    mk = {**base, **_model_kwargs(sec, f"{source} [dgp]")}
    missing = [k for k in ("rho0", "gamma0", "delta0") if k not in mk]
    if missing:
        raise ConfigError(f"{source}: [dgp] missing {missing}")
    if wpath is not None:
        p = Path(wpath.strip())
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        try:
            W = read_weights_csv(p)
        except OSError as exc:
            raise ConfigError(f"cannot read weights {p}: {exc}") from None
    else:
        W = build_lattice_queen(_num(side, int, "dgp.side"))
    if T < 1:
        raise ConfigError(f"{source}: T must be >= 1")
    return DgpConfig(W=W, T=T, seed=seed, name=name, **mk), rep


def load_dgp_config(path: str | Path) -> tuple[DgpConfig, int]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_dgp_config(text, str(path), base_dir=path.parent)
