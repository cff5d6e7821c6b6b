"""Velocity-field objects: callables ``(t, x) -> tangent`` with metadata."""
import numpy as np

from ..errors import DomainError


def check_time(t):
    t = float(t)
    if not np.isfinite(t) or t < 0.0 or t >= 1.0:
        raise DomainError(f"field time must lie in [0, 1), got {t}")
    return t


class VelocityField:
    """Base class.  Subclasses implement ``__call__`` for batched ``x``.

    ``ambient_jacobian(t, x)`` returns the ambient derivative of the field
    (shape ``(..., D, D)`` on the sphere) when it is available in closed form;
    the sampler uses it to track the log-determinant of each Euler step.
    """

    variant = "generic"

    def __init__(self, manifold):
        self.manifold = manifold

    def __call__(self, t, x):
        raise NotImplementedError

    def ambient_jacobian(self, t, x):
        raise NotImplementedError(f"{type(self).__name__} has no closed-form jacobian")

    @property
    def has_jacobian(self):
        return False

    def describe(self):
        return {"field": type(self).__name__, "variant": self.variant}


class ZeroField(VelocityField):
    variant = "population"

    def __call__(self, t, x):
        check_time(t)
        return np.zeros_like(np.asarray(x, dtype=float))

    @property
    def has_jacobian(self):
        return True

    def ambient_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        D = x.shape[-1]
        return np.zeros(x.shape + (D,))


class LinearField(VelocityField):
    """``v(t, x) = A x`` on Euclidean space."""

    def __init__(self, manifold, A):
        super().__init__(manifold)
        self.A = np.asarray(A, dtype=float)

    def __call__(self, t, x):
        return np.asarray(x, dtype=float) @ self.A.T

    @property
    def has_jacobian(self):
        return True

    def ambient_jacobian(self, t, x):
        return np.broadcast_to(self.A, np.shape(x) + (self.A.shape[0],)).copy()


class FunctionField(VelocityField):
    """Wrap a plain function ``fn(t, x)``."""

    def __init__(self, manifold, fn, variant="generic"):
        super().__init__(manifold)
        self.fn = fn
        self.variant = variant

    def __call__(self, t, x):
        return self.fn(t, x)


class BridgeConditionalField(VelocityField):
    """Conditional field ``Log_x(x1) / (1 - t)`` towards a fixed endpoint."""

    variant = "bridge-conditional"

    def __init__(self, manifold, x1):
        super().__init__(manifold)
        self.x1 = np.asarray(x1, dtype=float)

    def __call__(self, t, x):
        t = check_time(t)
        return self.manifold.log(x, self.x1) / (1.0 - t)


class PerturbedField(VelocityField):
    """``base + perturbation``; the "learned" field of the experiments."""

    variant = "perturbed"

    def __init__(self, base, perturbation, eps, mode):
        super().__init__(base.manifold)
        self.base = base
        self.perturbation = perturbation
        self.eps = float(eps)
        self.mode = mode

    def __call__(self, t, x):
        return self.base(t, x) + self.perturbation(t, x)

    @property
    def has_jacobian(self):
        return self.base.has_jacobian and self.perturbation.has_jacobian

    def ambient_jacobian(self, t, x):
        return self.base.ambient_jacobian(t, x) + self.perturbation.ambient_jacobian(t, x)

    def describe(self):
        out = dict(self.base.describe())
        out.update(variant=self.variant, eps=self.eps, perturbation=self.mode)
        return out
