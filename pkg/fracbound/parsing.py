import json
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .eigenbasis import BoxDomain, InitialDatum, datum_from_dict
from .hkernel import Route
from .mixing import Atom, DensityComponent, MixingMeasure
from .solver_mc import COMMUTATION_LEVELS
from .subordinate import DEFAULT_LEVELS
from .tools import DEFAULT_TOLERANCES, FracboundError, Tolerances

COMMANDS = (
    "solve-spectral",
    "solve-mc",
    "eval-h",
    "sample-subordinator",
    "verify",
    "verify-commutation",
    "ctrw",
)
STOCHASTIC_COMMANDS = frozenset(
    {"solve-mc", "sample-subordinator", "verify", "verify-commutation", "ctrw"}
)
NEEDS_DOMAIN = frozenset(COMMANDS) - {"eval-h", "sample-subordinator"}
DEFAULT_OUT = "fracbound-out"
MAX_SEED = 2**64 - 1


class ParsingError(FracboundError):
    def __init__(self, path: Path | None, key: str = "", message: str = ""):
        super().__init__(message)
        self.path = path
        self.key = key
        self.message = message

    def __repr__(self) -> str:
        return str(self)

    def __str__(self) -> str:
        return f"Invalid configuration {self.path}: {self.message}"


class ConfigFileError(ParsingError):
    def __str__(self) -> str:
        return f"Could not read configuration file {self.path}: {self.message}"


class SchemaError(ParsingError):
    def __str__(self) -> str:
        return (
            f"Invalid value for '{self.key}' in {self.path or '<config>'}: "
            f"{self.message}"
        )


class UnknownCommandError(ParsingError):
    def __str__(self) -> str:
        return (
            f"Unknown command '{self.key}', expected one of "
            f"{', '.join(COMMANDS)}"
        )


@dataclass(frozen=True)
class ResidualSettings:
    t_end: float = 2.0
    steps: int = 2000
    t_min: float = 0.5
    tolerance: float = 1e-3
    grading: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """
    Validated run configuration. `raw` is the effective JSON document, with
    command line overrides applied, which reproduces the run.
    """

    command: str
    raw: dict[str, Any] = field(repr=False)
    measure: MixingMeasure | None = None
    domain: BoxDomain | None = None
    datum: InitialDatum | None = None
    times: tuple[float, ...] = ()
    points: tuple[tuple[float, ...], ...] = ()
    lambdas: tuple[float, ...] = ()
    truncation: int | None = None
    target_tail: float | None = None
    route: Route = Route.AUTO
    paths: int = 10000
    dtau: float = 1e-3
    sub_step: float = 1e-3
    bridge: bool = False
    levels: int = DEFAULT_LEVELS
    horizon: float = 1.0
    s_values: tuple[float, ...] = (0.5, 1.0, 2.0)
    relation: tuple[tuple[float, float], ...] = ()
    write_paths: int = 0
    commutation_levels: tuple[int, ...] = COMMUTATION_LEVELS
    walkers: int = 10000
    scales: tuple[float, ...] = (1e4,)
    allowance: float = 0.01
    residual: ResidualSettings = ResidualSettings()
    seed: int | None = None
    threads: int = 1
    out: Path = Path(DEFAULT_OUT)
    tolerances: Tolerances = DEFAULT_TOLERANCES

    @property
    def is_stochastic(self) -> bool:
        return self.command in STOCHASTIC_COMMANDS

    def to_dict(self) -> dict[str, Any]:
        return dict(self.raw)


class _Reader:
    """
    Typed access to the configuration document, turning every problem into
    a SchemaError naming the offending key
    """

    def __init__(self, data: dict[str, Any], path: Path | None) -> None:
        super().__init__()
        self._data = data
        self._path = path

    def error(self, key: str, message: str) -> SchemaError:
        return SchemaError(self._path, key, message)

    def has(self, key: str) -> bool:
        return key in self._data and self._data[key] is not None

    def get(self, key: str, default: Any = None) -> Any:
        return self._data.get(key, default)

    def convert(self, key: str, converter: Callable[[Any], Any]) -> Any:
        try:
            return converter(self._data[key])
        except SchemaError:
            raise
        except (TypeError, ValueError, KeyError, IndexError) as e:
            raise self.error(key, str(e) or type(e).__name__)

    def number(
        self,
        key: str,
        default: float,
        low: float = -math.inf,
        high: float = math.inf,
        strict_low: bool = False,
    ) -> float:
        if not self.has(key):
            return default
        value = self.convert(key, float)
        if not math.isfinite(value):
            raise self.error(key, "must be finite")
        if value < low or (strict_low and value == low) or value > high:
            raise self.error(key, f"must lie in [{low}, {high}], got {value}")
        return float(value)

    def integer(self, key: str, default: int, low: int = 0) -> int:
        if not self.has(key):
            return default
        value = self.get(key)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, f"must be an integer, got {value!r}")
        if value < low:
            raise self.error(key, f"must be >= {low}, got {value}")
        return value

    def boolean(self, key: str, default: bool) -> bool:
        if not self.has(key):
            return default
        value = self.get(key)
        if not isinstance(value, bool):
            raise self.error(key, f"must be true or false, got {value!r}")
        return value

    def integers(self, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        if not self.has(key):
            return default
        values = self.get(key)
        if not isinstance(values, list) or not values:
            raise self.error(key, "must be a non-empty list of integers")
        if any(isinstance(v, bool) or not isinstance(v, int) for v in values):
            raise self.error(key, f"must hold integers, got {values!r}")
        return tuple(values)

    def floats(
        self, key: str, default: tuple[float, ...], low: float = -math.inf
    ) -> tuple[float, ...]:
        if not self.has(key):
            return default
        values = self.convert(key, lambda x: tuple(float(v) for v in x))
        if any(not math.isfinite(v) or v < low for v in values):
            raise self.error(key, f"values must be finite and >= {low}")
        return values


def measure_from_dict(data: dict[str, Any]) -> MixingMeasure:
    atoms = []
    for atom in data.get("atoms", []):
        if "scale" in atom:
            atoms.append(
                Atom.from_scale(float(atom["beta"]), float(atom["scale"]))
            )
        else:
            atoms.append(Atom(float(atom["beta"]), float(atom["weight"])))
    density = None
    if data.get("density"):
        spec = data["density"]
        if "p" in spec:
            density = DensityComponent.tabulated(spec["p"])
        elif spec.get("shape") == "polynomial":
            density = DensityComponent.polynomial(
                float(spec["beta0"]),
                float(spec["beta1"]),
                spec["coefficients"],
            )
        else:
            value = spec.get("value", (spec.get("coefficients") or [None])[0])
            density = DensityComponent.constant(
                float(spec["beta0"]), float(spec["beta1"]), float(value)
            )
    return MixingMeasure(tuple(atoms), density)


def _times(reader: _Reader) -> tuple[float, ...]:
    if not reader.has("times"):
        return (1.0,)
    value = reader.get("times")
    if isinstance(value, dict):

        def grid(x: dict[str, Any]) -> tuple[float, ...]:
            t_end, steps = float(x["t_end"]), int(x["steps"])
            if t_end <= 0 or steps < 1:
                raise ValueError("t_end must be > 0 and steps >= 1")
            return tuple(t_end * k / steps for k in range(steps + 1))

        return reader.convert("times", grid)
    return reader.floats("times", (1.0,), low=0.0)


def _points(
    reader: _Reader, domain: BoxDomain | None
) -> tuple[tuple[float, ...], ...]:
    if domain is None:
        return ()
    if not reader.has("points"):
        return (tuple(s / 2 for s in domain.sides),)
    value = reader.get("points")
    if isinstance(value, dict):

        def grid(x: dict[str, Any]) -> tuple[tuple[float, ...], ...]:
            per_axis = int(x["per_axis"])
            if per_axis < 2:
                raise ValueError("per_axis must be >= 2")
            axes = [
                [s * k / (per_axis - 1) for k in range(per_axis)]
                for s in domain.sides
            ]
            result: list[tuple[float, ...]] = [()]
            for axis in axes:
                result = [p + (v,) for p in result for v in axis]
            return tuple(result)

        return reader.convert("points", grid)

    def explicit(x: Any) -> tuple[tuple[float, ...], ...]:
        points = tuple(
            tuple(float(v) for v in (p if isinstance(p, list) else [p]))
            for p in x
        )
        for point in points:
            if len(point) != domain.dims:
                raise ValueError(f"{point} does not have {domain.dims} axes")
            if any(not 0 <= v <= s for v, s in zip(point, domain.sides)):
                raise ValueError(f"{point} lies outside the box")
        return points

    return reader.convert("points", explicit)


def parse_config(
    data: dict[str, Any],
    command: str | None = None,
    path: Path | None = None,
) -> RunConfig:
    if not isinstance(data, dict):
        raise SchemaError(
            path, "<root>", "the configuration must be an object"
        )
    data = dict(data)
    if command is not None:
        data["command"] = command
    name = data.get("command")
    if name not in COMMANDS:
        raise UnknownCommandError(path, str(name))
    reader = _Reader(data, path)

    tolerances = DEFAULT_TOLERANCES
    if reader.has("tolerances"):
        tolerances = reader.convert("tolerances", Tolerances.from_dict)
    if not reader.has("measure"):
        raise reader.error("measure", "a mixing measure is required")
    measure = reader.convert("measure", measure_from_dict)

    domain = None
    datum = None
    if name in NEEDS_DOMAIN:
        if not reader.has("domain"):
            raise reader.error("domain", "a box domain is required")
        domain = reader.convert(
            "domain", lambda x: BoxDomain(tuple(float(v) for v in x["sides"]))
        )
        box = domain
        datum = datum_from_dict(
            {"kind": "eigenmode", "index": [1] * box.dims}, box
        )
        if reader.has("datum"):
            datum = reader.convert("datum", lambda x: datum_from_dict(x, box))

    seed = None
    if reader.has("seed"):
        seed = reader.integer("seed", 0)
        if seed > MAX_SEED:
            raise reader.error("seed", "must fit in 64 bits")
    elif name in STOCHASTIC_COMMANDS:
        raise reader.error("seed", f"a seed is mandatory for {name}")

    route = Route.AUTO
    if reader.has("route"):
        route = reader.convert("route", Route)
    truncation = (
        reader.integer("truncation", 1, low=1)
        if reader.has("truncation")
        else None
    )
    target_tail = (
        reader.number("target_tail", 1e-8, low=0.0, strict_low=True)
        if reader.has("target_tail")
        else None
    )
    if name in ("solve-spectral", "verify") and truncation is None:
        if target_tail is None:
            target_tail = 1e-8
            data["target_tail"] = target_tail

    residual = ResidualSettings()
    if reader.has("residual"):
        sub = _Reader(reader.convert("residual", dict), path)
        residual = ResidualSettings(
            sub.number("t_end", residual.t_end, low=0.0, strict_low=True),
            sub.integer("steps", residual.steps, low=2),
            sub.number("t_min", residual.t_min, low=0.0, strict_low=True),
            sub.number("tolerance", residual.tolerance, low=0.0),
            sub.number("grading", residual.grading, low=1.0, high=4.0),
        )
        if residual.t_min > residual.t_end:
            raise reader.error("residual", "t_min exceeds t_end")

    def pairs(x: Any) -> tuple[tuple[float, float], ...]:
        result = tuple((float(a), float(b)) for a, b in x)
        if any(a <= 0 or b <= 0 for a, b in result):
            raise ValueError("(t, x) pairs must be positive")
        return result

    relation = (
        reader.convert("relation", pairs) if reader.has("relation") else ()
    )
    out = Path(str(reader.get("out", DEFAULT_OUT)))
    data.setdefault("out", str(out))
    threads = reader.integer("threads", 1)
    data.setdefault("threads", threads)
    return RunConfig(
        command=name,
        raw=data,
        measure=measure,
        domain=domain,
        datum=datum,
        times=_times(reader),
        points=_points(reader, domain),
        lambdas=reader.floats("lambdas", (0.5, 1.0, 5.0, 25.0), low=0.0),
        truncation=truncation,
        target_tail=target_tail,
        route=route,
        paths=reader.integer("paths", 10000, low=2),
        dtau=reader.number("dtau", 1e-3, low=0.0, strict_low=True),
        sub_step=reader.number("sub_step", 1e-3, low=0.0, strict_low=True),
        bridge=reader.boolean("bridge", False),
        levels=reader.integer("levels", DEFAULT_LEVELS, low=1),
        horizon=reader.number("horizon", 1.0, low=0.0, strict_low=True),
        s_values=reader.floats("s_values", (0.5, 1.0, 2.0), low=0.0),
        relation=relation,
        write_paths=reader.integer("write_paths", 0),
        commutation_levels=reader.integers(
            "commutation_levels", COMMUTATION_LEVELS
        ),
        walkers=reader.integer("walkers", 10000, low=2),
        scales=reader.floats("scales", (1e4,), low=0.0),
        allowance=reader.number("allowance", 0.01, low=0.0),
        residual=residual,
        seed=seed,
        threads=threads,
        out=out,
        tolerances=tolerances,
    )


def load_config(
    path: Path,
    overrides: dict[str, Any] | None = None,
    command: str | None = None,
) -> RunConfig:
    """
    Reads a JSON configuration and applies command line overrides (keys
    whose value is None are ignored)
    """
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigFileError(path, message=e.strerror or str(e))
    except json.JSONDecodeError as e:
        raise ConfigFileError(path, message=f"invalid JSON ({e})")
    if not isinstance(data, dict):
        raise SchemaError(
            path, "<root>", "the configuration must be an object"
        )
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return parse_config(data, command, path)
