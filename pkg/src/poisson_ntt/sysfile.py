"""Reader for the line-oriented system definition format.

Example::

    # so(3)-type rigid body
    [system]
    vars = x1 x2 x3
    rank = 2
    J 1 2 = x3
    J 1 3 = -x2
    J 2 3 = x1
    H = x1^2/2 + x2^2
    casimir = (x1^2 + x2^2 + x3^2)/2

    [domain]
    range x1 = 0.5 2
    range x2 = 0.5 2
    range x3 = 0.5 2

    [sample]
    points = 200
    seed = 42

    [ntt]
    Phi = z1*z2^2
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .expr import Expr, ParseError, parse
from .ntt import parse_phi, parse_relation
from .poisson import Domain, PoissonSystem, SamplePlan, StructureMatrix

SECTIONS = ("system", "domain", "sample", "ntt")
NTT_KINDS = ("eta", "Phi", "F")
_J_KEY = re.compile(r"J\s+(\S+)\s+(\S+)$")
_RANGE_KEY = re.compile(r"range\s+(\S+)$")


class SystemFileError(ValueError):
    def __init__(self, message: str, source: str = "<input>", line: int | None = None):
        self.source = source
        self.line = line
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {message}")


@dataclass
class SystemFile:
    system: PoissonSystem
    points: int = 200
    seed: int = 42
    atol: float = 1e-9
    rtol: float = 1e-9
    min_eta: float = 1e-10
    ntt: dict[str, Expr] = field(default_factory=dict)
    c: Fraction | None = None
    source: str = "<input>"

    def plan(self, **overrides) -> SamplePlan:
        settings = dict(points=self.points, seed=self.seed, atol=self.atol,
                        rtol=self.rtol, min_eta=self.min_eta)
        settings.update({k: v for k, v in overrides.items() if v is not None})
        return self.system.plan(**settings)

    @property
    def ntt_kind(self) -> str | None:
        for kind in NTT_KINDS:
            if kind in self.ntt:
                return kind
        return None


def load(path: str | Path) -> SystemFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise SystemFileError(f"cannot read file: {err.strerror}", str(path)) from None
    return loads(text, str(path))


def loads(text: str, source: str = "<input>") -> SystemFile:
    def fail(msg, line=None):
        raise SystemFileError(msg, source, line)

    section = None
    raw: dict[str, list[tuple[str, str, int]]] = {s: [] for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1].strip() not in SECTIONS:
                fail(f"unknown section header {line!r} (expected one of "
                     f"{', '.join('[' + s + ']' for s in SECTIONS)})", lineno)
            section = line[1:-1].strip()
            continue
        if section is None:
            fail("content before the first section header", lineno)
        if "=" not in line:
            fail(f"expected 'key = value', got {line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        key = " ".join(key.split())
        if not value:
            fail(f"empty value for {key!r}", lineno)
        raw[section].append((key, value, lineno))

    # -- [system]
    single: dict[str, tuple[str, int]] = {}
    entries: list[tuple[str, str, str, int]] = []
    casimir_src: list[tuple[str, int]] = []
    for key, value, lineno in raw["system"]:
        m = _J_KEY.match(key)
        if m:
            entries.append((m.group(1), m.group(2), value, lineno))
        elif key == "casimir":
            casimir_src.append((value, lineno))
        elif key in ("vars", "rank", "H"):
            if key in single:
                fail(f"duplicate key {key!r}", lineno)
            single[key] = (value, lineno)
        else:
            fail(f"unknown key {key!r} in [system]", lineno)
    if "vars" not in single:
        fail("[system] must declare 'vars'")
    if "H" not in single:
        fail("[system] must declare 'H'")
    variables = single["vars"][0].split()
    if len(set(variables)) != len(variables):
        fail("duplicate variable names", single["vars"][1])
    for v in variables:
        if not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", v):
            fail(f"invalid variable name {v!r}", single["vars"][1])
    n = len(variables)

    def expr(value, lineno, names=variables, parser=None):
        try:
            return parser(value) if parser else parse(value, names)
        except (ParseError, ValueError) as err:
            fail(f"in expression {value!r}: {err}", lineno)

    upper = {}
    for si, sj, value, lineno in entries:
        try:
            i, j = int(si), int(sj)
        except ValueError:
            fail(f"structure indices must be integers, got 'J {si} {sj}'", lineno)
        if not 1 <= i < j <= n:
            fail(f"'J {i} {j}': only entries with 1 <= i < j <= {n} may be given "
                 "(the lower triangle follows from skew-symmetry)", lineno)
        if (i - 1, j - 1) in upper:
            fail(f"duplicate entry 'J {i} {j}'", lineno)
        upper[(i - 1, j - 1)] = expr(value, lineno)
    H = expr(*single["H"])
    casimirs = tuple(expr(v, ln) for v, ln in casimir_src)
    rank = None
    if "rank" in single:
        value, lineno = single["rank"]
        try:
            rank = int(value)
        except ValueError:
            fail(f"rank must be an integer, got {value!r}", lineno)

    # -- [domain]
    ranges: dict[str, tuple[float, float]] = {}
    exclusions = []
    eps = 1e-6
    for key, value, lineno in raw["domain"]:
        m = _RANGE_KEY.match(key)
        if m:
            name = m.group(1)
            if name not in variables:
                fail(f"range for undeclared variable {name!r}", lineno)
            parts = value.split()
            try:
                lo, hi = (float(x) for x in parts)
            except ValueError:
                fail(f"range needs two numbers 'lo hi', got {value!r}", lineno)
            if not lo < hi:
                fail(f"empty range [{lo}, {hi}]", lineno)
            ranges[name] = (lo, hi)
        elif key == "exclude":
            exclusions.append(expr(value, lineno))
        elif key == "epsilon_exclude":
            eps = _number(value, float, fail, lineno)
        else:
            fail(f"unknown key {key!r} in [domain]", lineno)
    missing = [v for v in variables if v not in ranges]
    if missing:
        fail(f"[domain] has no range for {', '.join(missing)}")
    domain = Domain(tuple(ranges[v] for v in variables), tuple(exclusions), eps)

    try:
        system = PoissonSystem(tuple(variables), StructureMatrix(n, upper), H, casimirs, rank, domain)
    except ValueError as err:
        fail(str(err), single.get("rank", (None, None))[1])
    result = SystemFile(system, source=source)

    # -- [sample]
    casts = {"points": int, "seed": int, "atol": float, "rtol": float, "min_eta": float}
    for key, value, lineno in raw["sample"]:
        if key not in casts:
            fail(f"unknown key {key!r} in [sample]", lineno)
        setattr(result, key, _number(value, casts[key], fail, lineno))
    if result.points <= 0:
        fail("points must be positive")

    # -- [ntt]
    seen = set()
    for key, value, lineno in raw["ntt"]:
        if key in seen:
            fail(f"duplicate key {key!r} in [ntt]", lineno)
        seen.add(key)
        if key in ("eta", "Hstar", "eta0", "casimir_factor"):
            result.ntt[key] = expr(value, lineno)
        elif key == "Phi":
            result.ntt[key] = expr(value, lineno, parser=lambda s: parse_phi(system, s))
        elif key == "F":
            result.ntt[key] = expr(value, lineno, parser=lambda s: parse_relation(system, s))
        elif key == "c":
            try:
                result.c = Fraction(value)
            except ValueError:
                fail(f"c must be a number, got {value!r}", lineno)
        else:
            fail(f"unknown key {key!r} in [ntt]", lineno)
    kinds = [k for k in NTT_KINDS if k in result.ntt]
    if len(kinds) > 1:
        fail(f"[ntt] must contain exactly one of eta, Phi, F (found {', '.join(kinds)})")
    return result


def _number(value, cast, fail, lineno):
    try:
        return cast(value)
    except ValueError:
        fail(f"expected a number, got {value!r}", lineno)
