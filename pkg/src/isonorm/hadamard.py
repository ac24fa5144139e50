"""Normalized Hadamard matrices (entries +-1/sqrt(C)).

Sizes are reached by Sylvester doubling, the two Paley quadratic-residue
constructions (prime ``q`` only), and Kronecker products of those.
Every matrix remembers the recipe that produced it, and replaying a recipe
is deterministic, so a recipe string is a complete description of ``H``.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import (
    InvalidResidueClass,
    NoKnownConstruction,
    NotPrimePower,
    ShapeError,
    SizeLimitExceeded,
)

MAX_SIZE = 4096


# -- recipes -----------------------------------------------------------------


@dataclass(frozen=True)
class Sylvester:
    order: int  # size is 2**order

    @property
    def size(self) -> int:
        return 1 << self.order

    def sexpr(self) -> str:
        return f"(sylvester {self.order})"


@dataclass(frozen=True)
class Paley1:
    q: int  # size is q + 1

    @property
    def size(self) -> int:
        return self.q + 1

    def sexpr(self) -> str:
        return f"(paley1 {self.q})"


@dataclass(frozen=True)
class Paley2:
    q: int  # size is 2(q + 1)

    @property
    def size(self) -> int:
        return 2 * (self.q + 1)

    def sexpr(self) -> str:
        return f"(paley2 {self.q})"


@dataclass(frozen=True)
class Kron:
    left: "Recipe"
    right: "Recipe"

    @property
    def size(self) -> int:
        return self.left.size * self.right.size

    def sexpr(self) -> str:
        return f"(kron {self.left.sexpr()} {self.right.sexpr()})"


Recipe = Union[Sylvester, Paley1, Paley2, Kron]


def factor_sizes(recipe: Recipe) -> list[int]:
    """Sizes of the leaf factors, left to right."""
    if isinstance(recipe, Kron):
        return factor_sizes(recipe.left) + factor_sizes(recipe.right)
    return [recipe.size]


def parse_recipe(text: str) -> Recipe:
    """Parse the s-expression produced by ``Recipe.sexpr()``."""
    tokens = re.findall(r"\(|\)|[^\s()]+", text)
    pos = 0

    def expect(tok):
        nonlocal pos
        if pos >= len(tokens) or tokens[pos] != tok:
            raise ValueError(f"malformed recipe {text!r}: expected {tok!r} at token {pos}")
        pos += 1

    def node() -> Recipe:
        nonlocal pos
        expect("(")
        if pos >= len(tokens):
            raise ValueError(f"malformed recipe {text!r}")
        head = tokens[pos]
        pos += 1
        if head == "kron":
            left = node()
            right = node()
            out: Recipe = Kron(left, right)
        elif head in ("sylvester", "paley1", "paley2"):
            try:
                arg = int(tokens[pos])
            except (IndexError, ValueError):
                raise ValueError(f"malformed recipe {text!r}: {head} needs an integer") from None
            pos += 1
            out = {"sylvester": Sylvester, "paley1": Paley1, "paley2": Paley2}[head](arg)
        else:
            raise ValueError(f"unknown recipe node {head!r}")
        expect(")")
        return out

    result = node()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens in recipe {text!r}")
    return result


# -- matrices ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HadamardMatrix:
    entries: np.ndarray
    recipe: Recipe

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _check_size(size: int, max_size: int) -> None:
    if size > max_size:
        raise SizeLimitExceeded(f"Hadamard size {size} exceeds configured maximum {max_size}")


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    for d in range(3, math.isqrt(n) + 1, 2):
        if n % d == 0:
            return False
    return True


def _quadratic_character(q: int) -> np.ndarray:
    """chi[a] = Legendre symbol (a/q) for a in [0, q)."""
    chi = -np.ones(q, dtype=np.int64)
    chi[0] = 0
    x = np.arange(1, q, dtype=np.int64)
    chi[(x * x) % q] = 1
    return chi


def _jacobsthal(q: int) -> np.ndarray:
    chi = _quadratic_character(q)
    idx = np.arange(q)
    return chi[(idx[None, :] - idx[:, None]) % q]


def _normalize_border(h: np.ndarray) -> np.ndarray:
    # flip rows, then columns, so the first column and first row are all +1
    h = h * np.sign(h[:, :1])
    return h * np.sign(h[:1, :])


def _check_paley_arg(q: int, residue: int, name: str) -> None:
    if q < 3 or q % 4 != residue:
        raise InvalidResidueClass(f"{name} needs q = {residue} (mod 4), got q={q} ({q % 4} mod 4)")
    if not is_prime(q):
        raise NotPrimePower(f"{name}: q={q} is not prime (prime-power fields are not supported)")


def _sylvester_int(order: int) -> np.ndarray:
    h = np.ones((1, 1), dtype=np.int64)
    for _ in range(order):
        h = np.block([[h, h], [h, -h]])
    return h


def _paley1_int(q: int) -> np.ndarray:
    core = np.zeros((q + 1, q + 1), dtype=np.int64)
    core[0, 1:] = 1
    core[1:, 0] = -1
    core[1:, 1:] = _jacobsthal(q)
    return _normalize_border(core + np.eye(q + 1, dtype=np.int64))


def _paley2_int(q: int) -> np.ndarray:
    conf = np.zeros((q + 1, q + 1), dtype=np.int64)
    conf[0, 1:] = 1
    conf[1:, 0] = 1
    conf[1:, 1:] = _jacobsthal(q)
    # zeros (the diagonal) become [[1,-1],[-1,-1]], +-1 become +-[[1,1],[1,-1]]
    plus = np.array([[1, 1], [1, -1]], dtype=np.int64)
    zero = np.array([[1, -1], [-1, -1]], dtype=np.int64)
    h = np.kron(conf, plus) + np.kron(np.eye(q + 1, dtype=np.int64), zero)
    return _normalize_border(h)


def sylvester(order: int, max_size: int = MAX_SIZE) -> HadamardMatrix:
    """Sylvester matrix of size ``2**order``.

    The integer +-1 doubling is done first and scaled once by ``2**(-order/2)``,
    which equals the per-level ``1/sqrt(2)`` recursion but keeps every entry
    at exactly the same rounded magnitude.
    """
    if order < 0:
        raise ValueError("order must be non-negative")
    _check_size(1 << order, max_size)
    h = _sylvester_int(order)
    return HadamardMatrix(_frozen(h / math.sqrt(h.shape[0])), Sylvester(order))


def paley1(q: int, max_size: int = MAX_SIZE) -> HadamardMatrix:
    """Paley I matrix of size ``q + 1`` for prime ``q = 3 (mod 4)``."""
    _check_paley_arg(q, 3, "paley1")
    _check_size(q + 1, max_size)
    h = _paley1_int(q)
    return HadamardMatrix(_frozen(h / math.sqrt(q + 1)), Paley1(q))


def paley2(q: int, max_size: int = MAX_SIZE) -> HadamardMatrix:
    """Paley II matrix of size ``2(q + 1)`` for prime ``q = 1 (mod 4)``."""
    _check_paley_arg(q, 1, "paley2")
    _check_size(2 * (q + 1), max_size)
    h = _paley2_int(q)
    return HadamardMatrix(_frozen(h / math.sqrt(2 * (q + 1))), Paley2(q))


def kron(a: HadamardMatrix, b: HadamardMatrix, max_size: int = MAX_SIZE) -> HadamardMatrix:
    _check_size(a.size * b.size, max_size)
    return HadamardMatrix(_frozen(np.kron(a.entries, b.entries)), Kron(a.recipe, b.recipe))


def replay(recipe: Recipe, max_size: int = MAX_SIZE) -> HadamardMatrix:
    _check_size(recipe.size, max_size)
    if isinstance(recipe, Sylvester):
        return sylvester(recipe.order, max_size)
    if isinstance(recipe, Paley1):
        return paley1(recipe.q, max_size)
    if isinstance(recipe, Paley2):
        return paley2(recipe.q, max_size)
    if isinstance(recipe, Kron):
        return kron(replay(recipe.left, max_size), replay(recipe.right, max_size), max_size)
    raise TypeError(f"not a recipe: {recipe!r}")


# -- plan search -------------------------------------------------------------

PINNED_PLANS: dict[int, Recipe] = {
    768: Kron(Sylvester(1), Paley1(383)),
    1024: Sylvester(10),
    1152: Kron(Sylvester(5), Paley2(17)),
    1280: Kron(Sylvester(6), Paley1(19)),
    1408: Kron(Sylvester(5), Paley1(43)),
}


def _paley_node(size: int) -> Recipe | None:
    q = size - 1
    if q >= 3 and q % 4 == 3 and is_prime(q):
        return Paley1(q)
    if size % 2 == 0:
        q = size // 2 - 1
        if q >= 5 and q % 4 == 1 and is_prime(q):
            return Paley2(q)
    return None


def plan(size: int, max_size: int = MAX_SIZE) -> Recipe:
    """Find a construction recipe for a ``size x size`` Hadamard matrix.

    Search order: the pinned plans, then a pure Sylvester matrix, then
    ``S(2**s) (x) P(size / 2**s)`` for ``s`` from the full power of two down
    to zero, trying Paley I before Paley II. First match wins.
    """
    if size < 1:
        raise ShapeError(f"Hadamard size must be positive, got {size}")
    _check_size(size, max_size)
    if size in PINNED_PLANS:
        return PINNED_PLANS[size]
    if size & (size - 1) == 0:
        return Sylvester(size.bit_length() - 1)
    twos = (size & -size).bit_length() - 1
    for s in range(twos, -1, -1):
        node = _paley_node(size >> s)
        if node is not None:
            return node if s == 0 else Kron(Sylvester(s), node)
    raise NoKnownConstruction(f"no Sylvester/Paley construction known for size {size}")


@functools.lru_cache(maxsize=32)
def construct(size: int, max_size: int = MAX_SIZE) -> HadamardMatrix:
    """Normalized Hadamard matrix of the given size (cached; result is read-only)."""
    return replay(plan(size, max_size), max_size)


@dataclass(frozen=True)
class ValidationReport:
    max_orthogonality_residual: float
    entry_magnitude_error: float

    def ok(self, orth_tol: float = 1e-9, entry_tol: float = 1e-12) -> bool:
        return self.max_orthogonality_residual < orth_tol and self.entry_magnitude_error < entry_tol


def validate(h) -> ValidationReport:
    """Orthogonality residual ``max|HH^T - I|`` and ``max||H_ij| - 1/sqrt(C)|``."""
    m = np.asarray(h, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    c = m.shape[0]
    orth = np.abs(m @ m.T - np.eye(c)).max()
    mag = np.abs(np.abs(m) - 1.0 / math.sqrt(c)).max()
    return ValidationReport(float(orth), float(mag))
