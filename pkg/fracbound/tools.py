import pprint
from dataclasses import asdict, dataclass, fields, replace
from enum import StrEnum
from typing import Any, Self

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]


class FracboundError(Exception):
    pass


class DomainError(FracboundError, ValueError):
    pass


class QuadratureError(FracboundError):
    def __init__(self, what: str, achieved: float, requested: float):
        super().__init__(what)
        self.what = what
        self.achieved = achieved
        self.requested = requested

    def __str__(self) -> str:
        return (
            f"Quadrature for {self.what} did not converge: achieved "
            f"{self.achieved:.3e}, requested {self.requested:.3e}"
        )


class UnsupportedCaseError(FracboundError):
    def __init__(self, message: str, hint: str = ""):
        super().__init__(message)
        self.hint = hint

    def __str__(self) -> str:
        if self.hint:
            return f"{self.args[0]} ({self.hint})"
        return str(self.args[0])


class InsufficientHorizonError(FracboundError):
    pass


class InversionError(FracboundError):
    pass


@dataclass(frozen=True)
class Tolerances:
    """
    Numerical knobs shared by every module, overridable from the run
    configuration
    """

    quad_abs: float = 1e-10
    quad_rel: float = 1e-8
    quad_limit: int = 200
    beta_nodes: int = 64
    talbot_nodes: int = 32
    stehfest_order: int = 14
    ml_series_radius: float = 1.0
    bound_slack: float = 0.05
    route_abs: float = 1e-6
    boundary_eps: float = 1e-12

    @classmethod
    def from_dict(cls, overrides: dict[str, Any]) -> "Tolerances":
        known = {x.name: x.type for x in fields(cls)}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            raise DomainError(f"Unknown tolerance keys: {', '.join(unknown)}")
        converted: dict[str, Any] = {}
        for key, value in overrides.items():
            if known[key] in (int, "int"):
                converted[key] = int(value)
            else:
                converted[key] = float(value)
        return replace(cls(), **converted)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


DEFAULT_TOLERANCES = Tolerances()


class Severity(StrEnum):
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"


class CheckStatus(StrEnum):
    PASSED = "passed"
    FAILED = "failed"
    INCONCLUSIVE = "inconclusive"


class CheckReport:
    """
    Outcome of a numerical verification. Subclasses set the error code,
    the severity used when the check does not pass, and the message.
    """

    err_code: str
    severity: Severity
    name: str

    def __init__(
        self,
        status: CheckStatus,
        values: dict[str, float] | None = None,
        message_data: dict[str, str] | None = None,
    ) -> None:
        super().__init__()
        self.status = status
        self.values: dict[str, float] = {
            k: float(v) for k, v in (values or {}).items()
        }
        self._init_message_data(dict(message_data or {}))

    @classmethod
    def from_bound(
        cls,
        lhs: float,
        rhs: float,
        values: dict[str, float] | None = None,
        **message_data: str,
    ) -> Self:
        """
        Passes when lhs <= rhs, both are recorded
        """
        recorded = {"lhs": lhs, "rhs": rhs}
        recorded.update(values or {})
        if not (np.isfinite(lhs) and np.isfinite(rhs)):
            status = CheckStatus.INCONCLUSIVE
        elif lhs <= rhs:
            status = CheckStatus.PASSED
        else:
            status = CheckStatus.FAILED
        return cls(status, recorded, message_data)

    def __repr__(self) -> str:
        value = self.format_severity()
        value += self.format_error_code()
        value += f" {self.name} ({self.status}): "
        value += self.format_message()
        return value

    def get_severity(self) -> Severity:
        if self.status == CheckStatus.PASSED:
            return Severity.INFO
        return self.severity

    def format_severity(self) -> str:
        return f"[{self.get_severity().name}]"

    def format_error_code(self) -> str:
        return f"[fracbound-{self.err_code}]"

    def format_message(self) -> str:
        raise NotImplementedError

    def _init_message_data(self, message_data: dict[str, str]) -> None:
        if message_data:
            raise ValueError

    def passed(self) -> bool:
        return self.status == CheckStatus.PASSED

    def failed(self) -> bool:
        return self.status == CheckStatus.FAILED

    def to_dict(self) -> dict[str, Any]:
        return {
            "code": self.err_code,
            "name": self.name,
            "status": str(self.status),
            "severity": str(self.get_severity()),
            "message": self.format_message(),
            "values": dict(self.values),
        }


class Admissibility(CheckReport):
    err_code = "0001"
    severity = Severity.ERROR
    name = "admissibility"

    def format_message(self) -> str:
        return (
            "integral of (1-beta)^-1 mu(dbeta) = "
            f"{self.values.get('lhs', float('nan')):.6g}"
        )


class RouteAgreement(CheckReport):
    err_code = "0101"
    severity = Severity.ERROR
    name = "route-agreement"
    first: str
    second: str

    def _init_message_data(self, message_data: dict[str, str]) -> None:
        self.first = message_data.pop("first")
        self.second = message_data.pop("second")

    def format_message(self) -> str:
        return (
            f"max |{self.first} - {self.second}| = "
            f"{self.values['lhs']:.3e} (tolerance {self.values['rhs']:.1e})"
        )


class DerivativeBound(CheckReport):
    err_code = "0102"
    severity = Severity.ERROR
    name = "derivative-bound"

    def format_message(self) -> str:
        return (
            f"|d/dt h| = {self.values['lhs']:.6g} against bound "
            f"{self.values['rhs']:.6g} at t={self.values.get('t', 0):g}, "
            f"lambda={self.values.get('lambda', 0):g}"
        )


class EigenResidual(CheckReport):
    err_code = "0103"
    severity = Severity.ERROR
    name = "eigen-residual"

    def format_message(self) -> str:
        return (
            f"max |D h + lambda h| = {self.values['lhs']:.3e} "
            f"(tolerance {self.values['rhs']:.1e}, "
            f"lambda={self.values.get('lambda', 0):g})"
        )


class SpectralResidual(CheckReport):
    err_code = "0201"
    severity = Severity.ERROR
    name = "spectral-residual"

    def format_message(self) -> str:
        message = (
            f"max relative |D u - Laplacian u| = {self.values['lhs']:.3e} "
            f"(tolerance {self.values['rhs']:.1e})"
        )
        if self.status == CheckStatus.INCONCLUSIVE:
            message += ", refine the time grid"
        return message


class DecayEstimate(CheckReport):
    err_code = "0202"
    severity = Severity.ERROR
    name = "decay-estimate"

    def format_message(self) -> str:
        return (
            f"max ||u(t)|| / (h(t, lambda_1) ||f||) = "
            f"{self.values['lhs']:.8f}"
        )


class InitialDatumCheck(CheckReport):
    err_code = "0203"
    severity = Severity.ERROR
    name = "initial-datum"

    def format_message(self) -> str:
        return (
            "||u(t) - f|| decreasing as t -> 0, largest increase "
            f"{self.values['lhs']:.3e}"
        )


class BoundaryCondition(CheckReport):
    err_code = "0204"
    severity = Severity.ERROR
    name = "boundary"

    def format_message(self) -> str:
        return (
            f"max boundary |u| = {self.values['lhs']:.3e} "
            f"(tail bound {self.values['rhs']:.3e})"
        )


class TruncationWarning(CheckReport):
    err_code = "0205"
    severity = Severity.WARNING
    name = "truncation"
    reason: str

    def _init_message_data(self, message_data: dict[str, str]) -> None:
        self.reason = message_data.pop("reason", "")

    def format_message(self) -> str:
        message = (
            f"N={int(self.values.get('n', 0))}, estimated tail "
            f"{self.values.get('lhs', float('nan')):.3e}"
        )
        if self.reason:
            message += f": {self.reason}"
        return message


class ClassicalHypothesis(CheckReport):
    err_code = "0206"
    severity = Severity.WARNING
    name = "classical-hypothesis"

    def format_message(self) -> str:
        return (
            "sum of lambda_n |f(n)| sup|phi_n|: last partial sums "
            f"grow by {self.values['lhs']:.3e} (threshold "
            f"{self.values['rhs']:.1e}), fitted decay exponent "
            f"{self.values.get('decay', float('nan')):.3g}"
        )


class Commutation(CheckReport):
    err_code = "0301"
    severity = Severity.ERROR
    name = "commutation"

    def format_message(self) -> str:
        rates = ", ".join(
            f"{k[5:]}: {v:.4f}"
            for k, v in self.values.items()
            if k.startswith("rate_")
        )
        message = f"indicator disagreement rates per level {rates}"
        if "decay" in self.values:
            message += f", {self.values['decay']:.2f} bits per level"
        return message


class CtrwAgreement(CheckReport):
    err_code = "0302"
    severity = Severity.ERROR
    name = "ctrw"

    def format_message(self) -> str:
        return (
            f"|z| = {self.values['lhs']:.3f} (CTRW mean "
            f"{self.values.get('ctrw_mean', 0):.6f}, time-changed mean "
            f"{self.values.get('mc_mean', 0):.6f})"
        )


class MonteCarloAgreement(CheckReport):
    err_code = "0303"
    severity = Severity.ERROR
    name = "mc-agreement"

    def format_message(self) -> str:
        return (
            f"|MC - reference| = {self.values['lhs']:.3e} against "
            f"3 SE + allowance = {self.values['rhs']:.3e}"
        )


def print_reports(title: str, reports: list[CheckReport]) -> None:
    print(title)
    pprint.pprint(reports)


def pairwise_sum(values: FloatArray) -> float:
    """
    Deterministic pairwise reduction, independent of how the values were
    produced
    """
    data = np.asarray(values, dtype=np.float64).ravel()
    while data.size > 1:
        if data.size % 2:
            data = np.append(data, 0.0)
        data = data[0::2] + data[1::2]
    return float(data[0]) if data.size else 0.0
