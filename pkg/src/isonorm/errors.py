"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
distinct process exit statuses without a lookup table of its own.
"""

from __future__ import annotations


class IsonormError(Exception):
    exit_code = 1

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self), "exit_code": self.exit_code}


# -- shapes and input data ---------------------------------------------------


class ShapeError(IsonormError, ValueError):
    exit_code = 10


class NonFiniteInput(IsonormError, ValueError):
    exit_code = 11


class InsufficientData(IsonormError, ValueError):
    exit_code = 12


# -- hadamard ----------------------------------------------------------------


class SizeLimitExceeded(IsonormError, ValueError):
    exit_code = 20


class InvalidResidueClass(IsonormError, ValueError):
    exit_code = 21


class NotPrimePower(IsonormError, ValueError):
    exit_code = 22


class NoKnownConstruction(IsonormError, LookupError):
    exit_code = 23


# -- linear algebra / fitting ------------------------------------------------


class EigenFailure(IsonormError, ArithmeticError):
    exit_code = 30


class DegenerateDistribution(IsonormError, ValueError):
    exit_code = 31


class DegenerateChannel(IsonormError, ValueError):
    exit_code = 32

    def __init__(self, index: int, sigma: float, floor: float):
        super().__init__(f"channel {index} has sigma {sigma:.6g} below floor {floor:.6g}")
        self.index = index
        self.sigma = sigma
        self.floor = floor


class RankDeficient(IsonormError, ValueError):
    exit_code = 33

    def __init__(self, effective_rank: float, ratio: float, floor: float):
        super().__init__(
            f"lambda_min/lambda_max = {ratio:.3g} is below floor {floor:.3g} "
            f"(effective rank {effective_rank:.4g})"
        )
        self.effective_rank = effective_rank
        self.ratio = ratio
        self.floor = floor


class IncompleteNormalizer(IsonormError, ValueError):
    exit_code = 34


class TrainingDiverged(IsonormError, ArithmeticError):
    exit_code = 40

    def __init__(self, step: int, detail: str = ""):
        msg = f"loss became non-finite at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.step = step


# -- files -------------------------------------------------------------------


class FormatError(IsonormError, ValueError):
    exit_code = 50


class ChecksumFailure(FormatError):
    exit_code = 51


class VersionMismatch(FormatError):
    exit_code = 52


class ParseError(FormatError):
    exit_code = 53

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
