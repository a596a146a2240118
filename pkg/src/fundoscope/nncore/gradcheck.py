"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STEP_LADDER = (1.0, 10.0, 0.1, 0.01)


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # parameter name -> max relative error
    tolerance: float = 1e-5
    checked: int = 0
    refined: int = 0  # probes that needed a second step size
    zero: int = 0  # probes where both gradients sit below the round-off floor
    kinks: int = 0  # probes whose base step crossed a ReLU/max-pool switch
    kink_limited: dict = field(default_factory=dict)  # label -> best error of unresolvable kink probes

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self):
        for name, err in self.errors.items():
            yield f"{name:<24s} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"

    def to_dict(self):
        return {"max_error": self.max_error, "passed": self.passed, "tolerance": self.tolerance,
                "checked": self.checked, "refined": self.refined, "zero": self.zero,
                "kinks": self.kinks, "kink_limited": dict(self.kink_limited), "errors": dict(self.errors)}


def relative_error(analytic, numeric, floor=1e-12):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def roundoff_floor(loss_value, epsilon, dtype=np.float64):
    """Magnitude below which a central difference is indistinguishable from zero."""
    return 100 * np.finfo(dtype).eps * max(1.0, abs(loss_value)) / epsilon


def _param_label(network, idx, name):
    return f"{idx:02d}.{network.layers[idx].kind}.{name}"


def analytic_gradients(network, x, labels):
    with network.deterministic():
        _, grads = network.loss_and_grads(x, labels)
        input_grad = network.input_grad.copy()
    return grads, input_grad


def compare_gradients(network, x, labels, grads, input_grad=None, epsilon=1e-6,
                      tolerance=1e-5, max_entries=None, seed=0, ladder=STEP_LADDER):
    """Check supplied analytic gradients against central differences.

    ``max_entries`` caps the number of coordinates probed per tensor (chosen
    at random with ``seed``); ``None`` checks all of them.

    A probe that misses ``tolerance`` at ``epsilon`` is repeated at the other
    multiples of ``epsilon`` in ``ladder`` and keeps its smallest error: a
    larger step suppresses round-off on tiny gradients, a smaller one limits
    truncation in strongly curved directions. Coordinates whose analytic and
    numeric values both fall below :func:`roundoff_floor` count as agreeing.

    A probe whose base step moves a ReLU gate or max-pool winner straddles a
    kink, where a central difference does not estimate the derivative. Only
    kink-free steps count for it; if none of them reaches ``tolerance`` the
    kink lies closer than round-off allows to resolve, and the probe goes to
    ``kink_limited`` instead of the error maximum.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    def loss():
        return network.loss_and_branches(x, labels)

    def probe(arr, grad, label):
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = rng.choice(arr.size, max_entries, replace=False)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        worst = 0.0
        for k in idx:
            orig, a = flat[k], float(gflat[k])
            best, kinked = np.inf, False
            for j, mult in enumerate(ladder):
                eps = epsilon * mult
                flat[k] = orig + eps
                up, up_branches = loss()
                flat[k] = orig - eps
                down, down_branches = loss()
                flat[k] = orig
                crossed = up_branches != base_branches or down_branches != base_branches
                if j == 0 and crossed:
                    kinked = True
                    report.kinks += 1
                if kinked and (crossed or mult > 1):
                    continue  # only steps below the base one can slip under a nearby kink
                numeric = (up - down) / (2 * eps)
                if max(abs(a), abs(numeric)) < roundoff_floor(base_loss, eps, arr.dtype):
                    report.zero += 1
                    best = 0.0
                else:
                    best = min(best, relative_error(a, numeric))
                if best < tolerance:
                    break
                if j + 1 < len(ladder):
                    report.refined += 1
            if kinked and not best < tolerance:
                report.kink_limited[label] = max(report.kink_limited.get(label, 0.0), best)
            else:
                worst = max(worst, best)
        report.errors[label] = worst
        report.checked += len(idx)

    with network.deterministic():
        base_loss, base_branches = loss()
        for (i, name), value in network.named_parameters():
            probe(value, grads[i][name], _param_label(network, i, name))
        if input_grad is not None:
            x = np.array(x, dtype=network.dtype)
            probe(x, input_grad, "input")
    return report


def gradient_check(network, x, labels, epsilon=1e-6, tolerance=1e-5, max_entries=None, seed=0):
    """Analytic vs central-difference gradients for every parameter and the input.

    Run in 64-bit. Dropout is disabled and batch-norm uses batch statistics
    without touching the running estimates, so the loss is a pure function of
    the parameters.
    """
    if np.dtype(network.dtype) != np.float64:
        raise ValueError("gradient checks require a float64 network")
    grads, input_grad = analytic_gradients(network, x, labels)
    return compare_gradients(network, x, labels, grads, input_grad, epsilon=epsilon,
                             tolerance=tolerance, max_entries=max_entries, seed=seed)
