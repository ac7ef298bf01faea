"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tape, Tensor

from .ops import LOG_FLOOR


def _kink_signature(tape: Tape) -> list[np.ndarray]:
    """Which side of every non-smooth point the recorded forward pass sat on."""
    sig = []
    for node in tape.nodes:
        x = node.inputs[0].data
        if node.primitive in ("relu", "leaky_relu"):
            sig.append(x > 0)
        elif node.primitive == "abs_mean":
            sig.append(np.sign(x))
        elif node.primitive == "clamp":
            sig.append(node.output.data == x)
        elif node.primitive == "log":
            sig.append(x >= LOG_FLOOR)
        elif node.primitive == "max_pool2d":
            k = x.shape[2] // node.output.shape[2]
            win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::k, ::k]
            sig.append(win.reshape(*win.shape[:4], -1).argmax(-1))
    return sig


def _same_side(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped_kinks: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst <= tol and sum(self.checked.values()) > 0

    def __str__(self) -> str:
        rows = [
            f"{name}: max_rel={err:.3e} checked={self.checked[name]} kinks={self.skipped_kinks[name]}"
            for name, err in self.max_rel_error.items()
        ]
        return "\n".join(rows)


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    max_coords: int | None = 12,
    floor: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar loss from the current values of
    ``params``.  Coordinates whose +h/-h evaluations straddle a kink of a
    piecewise primitive are skipped and counted.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = fn()
    analytic = tape.gradient(loss, [p for _, p in params])
    report = GradCheckReport()
    for (name, p), grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        worst, checked, kinks = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with Tape() as tape:
                fp = fn().item()
            sig_p = _kink_signature(tape)  # read before the coordinate moves again
            flat[i] = orig - h
            with Tape() as tape:
                fm = fn().item()
            sig_m = _kink_signature(tape)
            flat[i] = orig
            if not _same_side(sig_p, sig_m):
                kinks += 1
                continue
            num = (fp - fm) / (2 * h)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            checked += 1
        report.max_rel_error[name] = worst
        report.checked[name] = checked
        report.skipped_kinks[name] = kinks
    return report
