"""Named benchmark problems for the coarse-graining pipeline.

Every entry has slow drifts of the form f_i = -L[g_i], where L is the
generator of the gradient fast dynamics and g_i a smooth observable.  This
makes the centering condition hold identically (generators integrate to zero
against their invariant measure) and gives the exact corrector g_i minus its
mean, which the oracle tests exploit.
"""

from __future__ import annotations

from .errors import UsageError
from .expressions import Expression, apply_generator, neg, parse
from .sde import FastSlowProblem

# observables g feeding f = -L[g], kept accessible for analytic oracles
OBSERVABLES: dict[str, tuple[str, ...]] = {
    "ou": ("sin(x0) * y0",),
    "bistable": ("x0 * sin(y0)",),
    "tilted": ("x0 * sin(y0) + y0^2",),
    "single-well-2d": ("cos(x0 + y0 + y1)", "sin(x1) * sin(y0 + y1)"),
    "single-well-3d": ("cos(x0 + y0 + y1)", "sin(x1) * sin(y0 + y1 + 2*y2)"),
    "three-well": ("cos(x0 + y0 + y1)", "sin(x1) * sin(y0 + y1)"),
}

POTENTIALS: dict[str, str] = {
    "ou": "y0^2/2 + 0.9189385332046727",
    "bistable": "y0^4/4 - y0^2/2",
    "tilted": "y0^4/4 - y0^2/2 + 10*y0",
    "single-well-2d": "y0^2 + y1^2 + 0.5*(y0^2 + y1^2)^2",
    "single-well-3d": "y0^4 + 2*y1^4 + 3*y2^4",
    "three-well": (
        "((y0 - 1)^2 + y1^2)"
        " * ((y0 + 0.5)^2 + (y1 - sqrt3/2)^2)"
        " * ((y0 + 0.5)^2 + (y1 + sqrt3/2)^2)"
    ),
}

_SETTINGS: dict[str, dict] = {
    "ou": dict(n=1, lam=1.0, x0=(1.0,), d_ref=8, ou_rates=(1.0,)),
    "bistable": dict(n=1, lam=0.5, x0=(1.0,), d_ref=40),
    "tilted": dict(n=1, lam=1.0, x0=(1.0,), d_ref=40),
    "single-well-2d": dict(n=2, lam=0.5, x0=(0.2, 0.2), d_ref=30),
    "single-well-3d": dict(n=3, lam=0.5, x0=(0.2, 0.2), d_ref=20),
    "three-well": dict(n=2, lam=0.35, x0=(0.2, 0.2), d_ref=36),
}


def observable_expressions(name: str) -> tuple[Expression, ...]:
    """Parsed observables g for a registry problem."""
    if name not in OBSERVABLES:
        raise UsageError(f"unknown problem {name!r}")
    return tuple(parse(text) for text in OBSERVABLES[name])


def get_problem(name: str, eps: float = 0.1, lam: float | None = None) -> FastSlowProblem:
    """Build a registry problem, optionally overriding eps and lam."""
    if name not in OBSERVABLES:
        raise UsageError(
            f"unknown problem {name!r}; available: {', '.join(problem_names())}"
        )
    settings = _SETTINGS[name]
    V = parse(POTENTIALS[name])
    g = observable_expressions(name)
    f = tuple(neg(apply_generator(V, gi)) for gi in g)
    return FastSlowProblem(
        name=name,
        m=len(g),
        n=settings["n"],
        f=f,
        V=V,
        alpha=None,
        eps=eps,
        lam=settings["lam"] if lam is None else float(lam),
        x0=settings["x0"],
        d_ref=settings["d_ref"],
        ou_rates=settings.get("ou_rates"),
    )


def problem_names() -> list[str]:
    return sorted(OBSERVABLES)
