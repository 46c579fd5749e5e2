"""Parameter containers, per-dataset batch-norm banks and basic layers."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype

__all__ = [
    "UnknownDatasetError",
    "Module",
    "BNEntry",
    "BNBank",
    "Conv2d",
    "DepthwiseConv2d",
    "ConvTranspose2d",
    "Linear",
    "BatchNorm2d",
    "kaiming_uniform",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class UnknownDatasetError(KeyError):
    pass


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # negative slope sqrt(5), i.e. bound = 1/sqrt(fan_in)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    """Walks attributes in assignment order to find parameters and children.

    ``banks`` selects what :meth:`named_parameters` yields: ``"all"``
    (everything), ``"none"`` (everything except dataset-specific BN
    entries) or a dataset id (only that dataset's BN entries).
    """

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "", banks="all") -> Iterator[Tuple[str, Parameter]]:
        if banks in ("all", "none"):
            for name, value in vars(self).items():
                if isinstance(value, Parameter):
                    yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.", banks)

    def parameters(self, banks="all"):
        return [p for _, p in self.named_parameters(banks=banks)]

    def num_parameters(self, banks="all") -> int:
        return int(np.sum([p.size for p in self.parameters(banks)], dtype=np.int64))

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Optional[np.ndarray]]]:
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def banks(self) -> Iterator["BNBank"]:
        for _, child in self.children():
            if isinstance(child, BNBank):
                yield child
            else:
                yield from child.banks()

    def set_trainable(self, flag: bool, banks="all") -> None:
        for p in self.parameters(banks):
            p.trainable = flag

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        for bank in self.banks():
            for e in bank.entries.values():
                if e.running_mean is not None:
                    e.running_mean = e.running_mean.astype(dtype)
                    e.running_var = e.running_var.astype(dtype)
        return self


@dataclass
class BNEntry:
    gamma: Parameter
    beta: Parameter
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def update_running(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.running_mean is None:
            self.running_mean = np.zeros_like(self.gamma.data)
            self.running_var = np.ones_like(self.gamma.data)
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.gamma.dtype)
        self.running_var = ((1 - m) * self.running_var + m * var).astype(self.gamma.dtype)


class BNBank(Module):
    """Per-dataset (gamma, beta, running mean, running var) for one BN layer.

    After :meth:`share` every dataset id routes to a single entry.
    """

    def __init__(self, channels: int, dataset_ids=()):
        self.channels = channels
        self.entries: Dict[str, BNEntry] = {}
        self.shared_key: Optional[str] = None
        for ds in dataset_ids:
            self.add(ds)

    def _fresh(self) -> BNEntry:
        dt = self._dtype()
        return BNEntry(Parameter(np.ones(self.channels, dt)), Parameter(np.zeros(self.channels, dt)))

    def add(self, dataset_id: str, init_from: Optional[str] = None) -> None:
        if self.shared_key is not None:
            return
        if dataset_id in self.entries:
            raise ValueError(f"dataset {dataset_id!r} already has a BN entry")
        if init_from is None:
            entry = self._fresh()
        else:
            src = self.entry(init_from)
            entry = BNEntry(
                Parameter(src.gamma.data.copy()),
                Parameter(src.beta.data.copy()),
                None if src.running_mean is None else src.running_mean.copy(),
                None if src.running_var is None else src.running_var.copy(),
                src.eps,
                src.momentum,
            )
        self.entries[dataset_id] = entry

    def _dtype(self):
        for e in self.entries.values():
            return e.gamma.dtype
        return default_dtype()

    def remove(self, dataset_id: str) -> None:
        del self.entries[dataset_id]

    def rename(self, old: str, new: str) -> None:
        self.entries = {(new if k == old else k): v for k, v in self.entries.items()}
        if self.shared_key == old:
            self.shared_key = new

    def share(self, key: str) -> None:
        """Collapse the bank so every dataset uses the entry of ``key``."""
        self.entries = {key: self.entry(key)}
        self.shared_key = key

    def entry(self, dataset_id: str) -> BNEntry:
        key = self.shared_key if self.shared_key is not None else dataset_id
        try:
            return self.entries[key]
        except KeyError:
            raise UnknownDatasetError(f"no BN entry for dataset {dataset_id!r}") from None

    def __contains__(self, dataset_id) -> bool:
        return self.shared_key is not None or dataset_id in self.entries

    def named_parameters(self, prefix: str = "", banks="all"):
        for ds, e in self.entries.items():
            shared = self.shared_key is not None
            if banks == "all" or (banks == "none" and shared) or (banks == ds and not shared):
                yield f"{prefix}{ds}.gamma", e.gamma
                yield f"{prefix}{ds}.beta", e.beta

    def named_buffers(self, prefix: str = ""):
        for ds, e in self.entries.items():
            yield f"{prefix}{ds}.running_mean", e.running_mean
            yield f"{prefix}{ds}.running_var", e.running_var

    def banks(self):
        return iter(())


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, padding=0, bias=True):
        fan_in = c_in * k * k
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in))
        self.bias = Parameter(kaiming_uniform(rng, (c_out,), fan_in)) if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, rng, channels, k, stride=1, padding=0):
        self.weight = Parameter(kaiming_uniform(rng, (channels, 1, k, k), k * k))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in, c_out, k=2, stride=2):
        self.weight = Parameter(kaiming_uniform(rng, (c_in, c_out, k, k), c_out * k * k))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.stride)


class Linear(Module):
    def __init__(self, rng, f_in, f_out):
        self.weight = Parameter(kaiming_uniform(rng, (f_out, f_in), f_in))
        self.bias = Parameter(kaiming_uniform(rng, (f_out,), f_in))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """BN layer over a bank. A frozen entry always normalizes with its running stats."""

    def __init__(self, channels: int, dataset_ids=()):
        self.bank = BNBank(channels, dataset_ids)

    def __call__(self, x: Tensor, dataset_id: str, mode: str) -> Tensor:
        entry = self.bank.entry(dataset_id)
        if mode == "train" and not entry.gamma.trainable:
            mode = "eval"
        return ops.batchnorm2d(x, self.bank, dataset_id, mode)


def clone(module: Module) -> Module:
    return copy.deepcopy(module)
