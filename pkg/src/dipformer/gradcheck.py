"""Centered finite-difference checks of analytic gradients.

All checks run in 64-bit Verification precision. The scalar probed is
``sum(op(*inputs) * R)`` for a fixed random ``R``; finite differences are
taken on the output difference ``op(x+h) - op(x-h)`` rather than on two large
sums, which keeps rounding noise well below the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import Precision, Tensor, no_grad, precision

OP_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4
FD_STEP = 1e-5


@dataclass
class GradcheckResult:
    name: str
    worst_rel_error: float
    worst_input: int
    worst_index: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.worst_rel_error <= self.tolerance)

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: worst rel err {self.worst_rel_error:.3e} "
            f"(input {self.worst_input}, flat index {self.worst_index}, tol {self.tolerance:g})"
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)


def check_function(
    name: str,
    fn: Callable[..., Tensor],
    inputs: list[np.ndarray],
    seed: int = 0,
    step: float = FD_STEP,
    tolerance: float = OP_TOLERANCE,
    max_elements: int | None = None,
) -> GradcheckResult:
    """Compare backward() against centered differences for every input element."""
    rng = np.random.default_rng(seed)
    with precision(Precision.VERIFICATION):
        leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        out = fn(*leaves)
        weights = rng.standard_normal(out.shape)
        ops.sum(ops.mul(out, Tensor(weights))).backward()

        worst = (0.0, 0, 0)
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            idxs = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idxs = np.sort(rng.choice(flat.size, max_elements, replace=False))
            for j in idxs:
                orig = flat[j]
                probe = [Tensor(l.data.copy()) if k == i else Tensor(l.data) for k, l in enumerate(leaves)]
                pflat = probe[i].data.reshape(-1)
                pflat[j] = orig + step
                plus = fn(*probe).data
                pflat[j] = orig - step
                minus = fn(*probe).data
                numeric = float(((plus - minus) * weights).sum() / (2 * step))
                err = float(relative_error(analytic.reshape(-1)[j], numeric))
                if err > worst[0]:
                    worst = (err, i, int(j))
    return GradcheckResult(name, worst[0], worst[1], worst[2], tolerance)


def _conv_case(rng):
    return (
        lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
        [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)],
    )


def _conv_strided_case(rng):
    return (
        lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
        [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
    )


def _depthwise_case(rng):
    return (
        lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1, groups=3),
        [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 1, 3, 3)), rng.standard_normal(3)],
    )


def _group_norm_case(rng):
    return (
        lambda x, g, b: ops.group_norm(x, 2, g, b, eps=1e-5),
        [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)],
    )


def _linear_case(rng):
    return ops.linear, [rng.standard_normal((2, 5, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)]


def _max_pool_case(rng):
    return lambda x: ops.max_pool2d(x, 2, 2), [rng.standard_normal((2, 2, 4, 6))]


def _adaptive_pool_case(rng):
    return lambda x: ops.adaptive_avg_pool2d(x, 3), [rng.standard_normal((1, 2, 7, 5))]


def _softmax_case(rng):
    return ops.softmax, [rng.standard_normal((2, 3, 5))]


def _bilinear_up_case(rng):
    return lambda x: ops.bilinear_resize(x, 7, 8), [rng.standard_normal((1, 2, 3, 4))]


def _bilinear_down_case(rng):
    return lambda x: ops.bilinear_resize(x, 3, 2), [rng.standard_normal((1, 2, 6, 5))]


def _matmul_case(rng):
    return ops.matmul, [rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 5, 2))]


def _elementwise_case(rng):
    return (
        lambda a, b, c: ops.relu(ops.sub(ops.mul(a, b), c)),
        [rng.standard_normal((2, 3, 4)), rng.standard_normal((1, 3, 1)), rng.standard_normal(4)],
    )


def _shape_case(rng):
    return (
        lambda a, b: ops.reshape(ops.permute(ops.concat([a, b], axis=1), (0, 2, 1, 3)), (2, 3, -1)),
        [rng.standard_normal((2, 2, 3, 2)), rng.standard_normal((2, 1, 3, 2))],
    )


def _cross_entropy_case(rng):
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    return lambda z: ops.cross_entropy(z, labels, 255), [rng.standard_normal((2, 4, 3, 3))]


def _reductions_case(rng):
    return lambda a: ops.add(ops.mean(a), ops.sum(ops.mul(a, a))), [rng.standard_normal((3, 4))]


OP_CASES: dict[str, Callable] = {
    "conv2d": _conv_case,
    "conv2d_strided": _conv_strided_case,
    "conv2d_depthwise": _depthwise_case,
    "group_norm": _group_norm_case,
    "linear": _linear_case,
    "max_pool2d": _max_pool_case,
    "adaptive_avg_pool2d": _adaptive_pool_case,
    "softmax": _softmax_case,
    "bilinear_resize_up": _bilinear_up_case,
    "bilinear_resize_down": _bilinear_down_case,
    "matmul": _matmul_case,
    "elementwise": _elementwise_case,
    "shape": _shape_case,
    "cross_entropy": _cross_entropy_case,
    "reductions": _reductions_case,
}


def check_op(name: str, seed: int = 0) -> GradcheckResult:
    fn, inputs = OP_CASES[name](np.random.default_rng(seed))
    return check_function(name, fn, inputs, seed=seed)


def check_all_ops(seed: int = 0) -> list[GradcheckResult]:
    return [check_op(name, seed) for name in OP_CASES]


def check_end_to_end(seed: int = 0, n_params: int = 20) -> GradcheckResult:
    """Gradient of the training loss w.r.t. randomly chosen model parameters.

    Uses a one-stage model on a 1x3x16x16 input. Parameters are redrawn at
    unit-ish scale so the probed gradients sit far above rounding noise.
    """
    from .model import ModelConfig, forward, init_params

    cfg = ModelConfig(
        stage_channels=(4,),
        stage_heads=(2,),
        pool_size=3,
        n_cls=3,
        decoder_channels=4,
        decoder_hidden=6,
        image_size=(16, 16),
        precision=Precision.VERIFICATION,
    )
    rng = np.random.default_rng(seed)
    with precision(Precision.VERIFICATION):
        params = init_params(cfg, seed)
        for t in params.values():
            fan_in = max(1, t.size // t.shape[0]) if t.ndim > 1 else 1
            t.data = rng.standard_normal(t.shape) / np.sqrt(fan_in)
        rgb = Tensor(rng.random((1, 3, 16, 16)))
        depth = Tensor(rng.random((1, 1, 16, 16)))
        labels = rng.integers(0, cfg.n_cls, size=(1, 16, 16))

        names = list(params)
        sizes = np.array([params[n].size for n in names])
        flat_choices = rng.choice(int(sizes.sum()), n_params, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def loss_value():
            return ops.cross_entropy(forward(rgb, depth, cfg, params), labels)

        for t in params.values():
            t.requires_grad = True
            t.grad = None
        loss_value().backward()

        worst = (0.0, 0, 0)
        for k in flat_choices:
            pi = int(np.searchsorted(offsets, k, side="right") - 1)
            j = int(k - offsets[pi])
            t = params[names[pi]]
            flat = t.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + FD_STEP
            with no_grad():
                plus = loss_value().item()
            flat[j] = orig - FD_STEP
            with no_grad():
                minus = loss_value().item()
            flat[j] = orig
            numeric = (plus - minus) / (2 * FD_STEP)
            err = float(relative_error(t.grad.reshape(-1)[j], numeric))
            if err > worst[0]:
                worst = (err, pi, j)
    name = f"end_to_end[{names[worst[1]]}]"
    return GradcheckResult(name, worst[0], worst[1], worst[2], END_TO_END_TOLERANCE)
