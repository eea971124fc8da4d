"""Spatial profiles: the mean and variance functions of the random field.

A profile is either a number or a short numpy expression in the continuum
coordinates, e.g. ``"1 + 0.5*sin(pi*x[0])"``.  Keeping the source text
(rather than a closure) makes profiles picklable and lets run configs echo
them verbatim.
"""

from __future__ import annotations

import numpy as np

_NAMESPACE = {
    name: getattr(np, name)
    for name in (
        "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "minimum",
        "maximum", "where", "tanh", "cosh", "sinh", "arctan", "clip",
    )
}
_NAMESPACE.update(pi=np.pi, e=np.e)


class Profile:
    """A real function on the continuum domain, evaluated pointwise.

    ``Profile(3.0)`` is constant; ``Profile("x[0]**2 + x[1]")`` is an
    expression where ``x[i]`` is the i-th coordinate array and ``r`` the
    Euclidean distance from the origin.  Any callable mapping an ``(n, d)``
    array to ``(n,)`` values is accepted as well, at the cost of
    picklability.
    """

    def __init__(self, source):
        if isinstance(source, Profile):
            source = source.source
        self.source = source
        self._code = None
        if isinstance(source, str):
            try:
                value = float(eval(source, {"__builtins__": {}}, dict(_NAMESPACE)))
            except Exception:
                self._code = compile(source, "<profile>", "eval")
            else:
                self.source = value
        elif not callable(source):
            self.source = float(source)

    @property
    def is_constant(self):
        return isinstance(self.source, float)

    @property
    def constant(self):
        if not self.is_constant:
            raise ValueError(f"profile {self.source!r} is not constant")
        return self.source

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        if self.is_constant:
            return np.full(n, self.source)
        if self._code is not None:
            scope = dict(_NAMESPACE)
            scope["x"] = tuple(points.T)
            scope["r"] = np.sqrt(np.sum(points**2, axis=1))
            out = eval(self._code, {"__builtins__": {}}, scope)
        else:
            out = self.source(points)
        return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()

    def __eq__(self, other):
        return isinstance(other, Profile) and self.source == other.source

    def __hash__(self):
        return hash(self.source) if not callable(self.source) else id(self.source)

    def __repr__(self):
        return f"Profile({self.source!r})"

    def __getstate__(self):
        return {"source": self.source}

    def __setstate__(self, state):
        self.__init__(state["source"])

    def describe(self):
        """JSON-friendly echo of the profile."""
        if callable(self.source):
            return getattr(self.source, "__name__", "<callable>")
        return self.source


def as_profile(value):
    if value is None:
        return None
    return value if isinstance(value, Profile) else Profile(value)
