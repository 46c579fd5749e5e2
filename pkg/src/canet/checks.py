"""Named finite-difference gradient checks for every op and block."""
from __future__ import annotations

from typing import Callable, Dict, List, Optional

import numpy as np

from . import ops
from .blocks import CBAMBlock, ConvBlock, FFBlock, ICMBlock, SEBlock
from .gradcheck import GradcheckReport, gradcheck
from .model import CANetModel
from .nn import BNBank, Module
from .tensor import Tensor, precision

__all__ = ["CASES", "DEFAULT_TOLERANCE", "MODEL_TOLERANCE", "run_case", "run_cases"]

DEFAULT_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _rand(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        # keep relu kinks well outside the finite-difference step
        x = np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-12) * 0.1, x)
    return Tensor(x, dtype=np.float64)


def _distinct(rng, *shape):
    # a shuffled grid of well-separated values: no pooling ties within eps
    n = int(np.prod(shape))
    return Tensor(rng.permutation(np.linspace(-2, 2, n)).reshape(shape), dtype=np.float64)


def _module_check(name, module: Module, call, inputs: List[Tensor], tol, max_samples=None, eps=1e-5):
    module.astype(np.float64)
    params = [p for _, p in module.named_parameters()]
    names = [f"input{i}" for i in range(len(inputs))] + [n for n, _ in module.named_parameters()]
    return gradcheck(lambda *args: call(*args[: len(inputs)]), inputs + params, tol, eps=eps, names=names, max_samples=max_samples, name=name)


def _bank(channels, rng):
    bank = BNBank(channels, ["a"])
    e = bank.entry("a")
    e.gamma.data = rng.uniform(0.5, 1.5, channels)
    e.beta.data = rng.standard_normal(channels)
    e.running_mean = rng.standard_normal(channels)
    e.running_var = rng.uniform(0.5, 2.0, channels)
    return bank


def _case_conv2d(tol):
    rng = np.random.default_rng(1)
    x, w, b = _rand(rng, 1, 2, 4, 4), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    return gradcheck(lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1), [x, w, b], tol, names=["x", "w", "b"], name="conv2d")


def _case_conv2d_strided(tol):
    rng = np.random.default_rng(2)
    x, w = _rand(rng, 2, 3, 6, 6), _rand(rng, 4, 3, 3, 3)
    return gradcheck(lambda x, w: ops.conv2d(x, w, stride=2, padding=1), [x, w], tol, names=["x", "w"], name="conv2d_strided")


def _case_depthwise(tol):
    rng = np.random.default_rng(3)
    x, w = _rand(rng, 2, 3, 5, 5), _rand(rng, 3, 1, 3, 3)
    return gradcheck(lambda x, w: ops.depthwise_conv2d(x, w, stride=2, padding=1), [x, w], tol, names=["x", "w"], name="depthwise_conv2d")


def _case_conv_transpose(tol):
    rng = np.random.default_rng(4)
    x, w = _rand(rng, 2, 3, 3, 3), _rand(rng, 3, 2, 2, 2)
    return gradcheck(lambda x, w: ops.conv_transpose2d(x, w, stride=2), [x, w], tol, names=["x", "w"], name="conv_transpose2d")


def _case_conv_transpose_overlap(tol):
    rng = np.random.default_rng(5)
    x, w = _rand(rng, 1, 2, 3, 3), _rand(rng, 2, 3, 3, 3)
    return gradcheck(lambda x, w: ops.conv_transpose2d(x, w, stride=2), [x, w], tol, names=["x", "w"], name="conv_transpose2d_k3")


def _case_maxpool(tol):
    rng = np.random.default_rng(6)
    x = _distinct(rng, 1, 2, 6, 6)
    return gradcheck(lambda x: ops.maxpool2d(x, 3, 1, 1), [x], tol, names=["x"], name="maxpool2d")


def _case_avgpool(tol):
    rng = np.random.default_rng(7)
    x = _rand(rng, 1, 2, 6, 6)
    return gradcheck(lambda x: ops.avgpool2d(x, 3, 1, 1), [x], tol, names=["x"], name="avgpool2d")


def _case_global_avg(tol):
    x = _rand(np.random.default_rng(8), 2, 3, 4, 4)
    return gradcheck(ops.global_avg_pool, [x], tol, names=["x"], name="global_avg_pool")


def _case_global_max(tol):
    x = _distinct(np.random.default_rng(9), 2, 3, 4, 4)
    return gradcheck(ops.global_max_pool, [x], tol, names=["x"], name="global_max_pool")


def _case_channel_max(tol):
    x = _distinct(np.random.default_rng(10), 2, 5, 4, 4)
    return gradcheck(ops.channel_reduce_max, [x], tol, names=["x"], name="channel_reduce_max")


def _case_channel_mean(tol):
    x = _rand(np.random.default_rng(11), 2, 5, 4, 4)
    return gradcheck(ops.channel_reduce_mean, [x], tol, names=["x"], name="channel_reduce_mean")


def _case_concat(tol):
    rng = np.random.default_rng(12)
    a, b, c = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 1, 3, 3), _rand(rng, 1, 3, 3, 3)
    return gradcheck(lambda a, b, c: ops.concat_channels([a, b, c]), [a, b, c], tol, names=["a", "b", "c"], name="concat_channels")


def _case_bn_train(tol):
    rng = np.random.default_rng(13)
    bank = _bank(3, rng)
    e = bank.entry("a")
    x = _rand(rng, 2, 3, 3, 3)
    return gradcheck(lambda x, g, b: ops.batchnorm2d(x, bank, "a", "train"), [x, e.gamma, e.beta], tol, names=["x", "gamma", "beta"], name="batchnorm2d_train")


def _case_bn_eval(tol):
    rng = np.random.default_rng(14)
    bank = _bank(3, rng)
    e = bank.entry("a")
    x = _rand(rng, 2, 3, 3, 3)
    return gradcheck(lambda x, g, b: ops.batchnorm2d(x, bank, "a", "eval"), [x, e.gamma, e.beta], tol, names=["x", "gamma", "beta"], name="batchnorm2d_eval")


def _case_sigmoid(tol):
    x = _rand(np.random.default_rng(15), 2, 3, 4, 4)
    return gradcheck(ops.sigmoid, [x], tol, names=["x"], name="sigmoid")


def _case_relu(tol):
    x = _rand(np.random.default_rng(16), 2, 3, 4, 4, away_from_zero=True)
    return gradcheck(ops.relu, [x], tol, names=["x"], name="relu")


def _case_relu6(tol):
    x = Tensor(np.random.default_rng(17).uniform(-3, 9, (2, 3, 4, 4)), dtype=np.float64)
    x.data[np.abs(x.data) < 0.05] += 0.1
    x.data[np.abs(x.data - 6) < 0.05] += 0.1
    return gradcheck(ops.relu6, [x], tol, names=["x"], name="relu6")


def _case_linear(tol):
    rng = np.random.default_rng(18)
    x, w, b = _rand(rng, 3, 8), _rand(rng, 5, 8), _rand(rng, 5)
    return gradcheck(lambda x, w, b: ops.linear(x, w, b), [x, w, b], tol, names=["x", "w", "b"], name="linear")


def _case_arith(tol):
    rng = np.random.default_rng(19)
    a, b, s = _rand(rng, 2, 3, 3, 3), _rand(rng, 2, 3, 3, 3), _rand(rng, 2, 3, 1, 1)

    def f(a, b, s):
        return ops.mul(ops.sub(ops.add(a, b), ops.mul(a, a)), s)

    return gradcheck(f, [a, b, s], tol, names=["a", "b", "s"], name="add_sub_mul")


def _case_softmax_ce(tol):
    rng = np.random.default_rng(20)
    z = _rand(rng, 2, 2, 3, 3)
    t = rng.integers(0, 2, (2, 3, 3))
    return gradcheck(lambda z: ops.softmax_cross_entropy(z, t), [z], tol, names=["logits"], name="softmax_cross_entropy")


def _case_convblock(tol):
    rng = np.random.default_rng(21)
    blk = ConvBlock(rng, 3, 4, dataset_ids=["a"])
    x = _rand(rng, 2, 3, 5, 5)
    return _module_check("conv_block", blk, lambda x: blk(x, "a", "train"), [x], tol)


def _case_se(tol):
    rng = np.random.default_rng(22)
    blk = SEBlock(rng, 6, ratio=2)
    x = _rand(rng, 2, 6, 3, 3)
    return _module_check("se_block", blk, blk, [x], tol)


def _case_cbam(tol):
    rng = np.random.default_rng(23)
    blk = CBAMBlock(rng, 6, ratio=2)
    x = _distinct(rng, 2, 6, 4, 4)
    return _module_check("cbam_block", blk, blk, [x], tol)


def _case_ff(tol):
    rng = np.random.default_rng(24)
    blk = FFBlock(rng, 3 + 2 * 2, 3, ratio=2, dataset_ids=["a"])
    prev, f1, f2 = _distinct(rng, 2, 3, 2, 2), _distinct(rng, 2, 2, 2, 2), _distinct(rng, 2, 2, 2, 2)
    return _module_check("ff_block", blk, lambda p, a, b: blk(p, a, b, "a", "train"), [prev, f1, f2], tol)


def _case_icm(tol, pool_mode="channel"):
    rng = np.random.default_rng(25)
    blk = ICMBlock(rng, width=4, pool_mode=pool_mode, ratio=2)
    p = _distinct(rng, 2, 2, 4, 4)
    return _module_check(f"icm_block_{pool_mode}", blk, lambda p: blk(p)[1], [p], tol)


def _case_model(tol):
    """End-to-end: every parameter tensor, 5 sampled entries each, step 1e-4."""
    with precision(np.float64):
        model = CANetModel(dataset_ids=["a"], seed=3)
    model.astype(np.float64)
    rng = np.random.default_rng(26)
    x1 = Tensor(rng.random((2, 3, 16, 16)), dtype=np.float64)
    x2 = Tensor(rng.random((2, 3, 16, 16)), dtype=np.float64)
    y = rng.integers(0, 2, (2, 16, 16))
    named = list(model.named_parameters())

    def loss(*_):
        logits, _m = model.forward(x1, x2, "a", "train")
        return ops.softmax_cross_entropy(logits, y)

    params = [p for _, p in named]
    return gradcheck(loss, params, tol, eps=1e-4, names=[n for n, _ in named], max_samples=5, name="canet_end_to_end", freeze_branches=True, stencil=5)


CASES: Dict[str, Callable[[float], GradcheckReport]] = {
    "conv2d": _case_conv2d,
    "conv2d_strided": _case_conv2d_strided,
    "depthwise_conv2d": _case_depthwise,
    "conv_transpose2d": _case_conv_transpose,
    "conv_transpose2d_k3": _case_conv_transpose_overlap,
    "maxpool2d": _case_maxpool,
    "avgpool2d": _case_avgpool,
    "global_avg_pool": _case_global_avg,
    "global_max_pool": _case_global_max,
    "channel_reduce_max": _case_channel_max,
    "channel_reduce_mean": _case_channel_mean,
    "concat_channels": _case_concat,
    "batchnorm2d_train": _case_bn_train,
    "batchnorm2d_eval": _case_bn_eval,
    "sigmoid": _case_sigmoid,
    "relu": _case_relu,
    "relu6": _case_relu6,
    "linear": _case_linear,
    "add_sub_mul": _case_arith,
    "softmax_cross_entropy": _case_softmax_ce,
    "conv_block": _case_convblock,
    "se_block": _case_se,
    "cbam_block": _case_cbam,
    "ff_block": _case_ff,
    "icm_block": _case_icm,
    "icm_block_spatial": lambda tol: _case_icm(tol, "spatial"),
    "model": _case_model,
}


def default_tolerance(name: str) -> float:
    return MODEL_TOLERANCE if name == "model" else DEFAULT_TOLERANCE


def run_case(name: str, tolerance: Optional[float] = None) -> GradcheckReport:
    if name not in CASES:
        raise KeyError(name)
    tol = default_tolerance(name) if tolerance is None else tolerance
    with precision(np.float64):
        return CASES[name](tol)


def run_cases(names=None, tolerance: Optional[float] = None) -> List[GradcheckReport]:
    names = list(CASES) if names is None else list(names)
    for n in names:
        if n not in CASES:
            raise KeyError(n)
    return [run_case(n, tolerance) for n in names]
