"""The change adapter network: shared siamese encoder and decoder prefix,
per-dataset adapters and per-dataset batch-norm banks."""
from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .blocks import POOL_MODES, ConvBlock, FFBlock, ICMBlock
from .nn import Conv2d, DepthwiseConv2d, BatchNorm2d, Module, UnknownDatasetError
from .tensor import Parameter, Tensor

__all__ = [
    "EncoderConfig",
    "ModelConfig",
    "Encoder",
    "AdapterModule",
    "CANetModel",
    "ParamPartition",
    "ABLATIONS",
    "BLOCK_KINDS",
    "apply_ablation",
]

BLOCK_KINDS = ("plain", "residual", "inverted-residual")
ABLATIONS = ("none", "no_icm", "shared_icm", "shared_bn")
BN_SCOPES = ("all", "encoder")
SCOPES = ("full", "adapter_only")
EXPANSION = 4
_ID_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


@dataclass
class EncoderConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    kinds: Tuple[str, ...] = ("plain",)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.kinds = (self.kinds,) if isinstance(self.kinds, str) else tuple(self.kinds)
        if len(self.kinds) == 1:
            self.kinds = self.kinds * len(self.widths)
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid stage widths {self.widths}")
        if len(self.kinds) != len(self.widths):
            raise ValueError("one block kind per encoder stage is required")
        for k in self.kinds:
            if k not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {k!r}; expected one of {BLOCK_KINDS}")

    @property
    def depth(self) -> int:
        return len(self.widths)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eta: int = 3
    icm_width: int = 16
    pool_mode: str = "channel"
    ratio: int = 16
    in_channels: int = 3
    bn_scope: str = "all"
    ablation: str = "none"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        depth = self.encoder.depth
        if not 2 <= self.eta <= depth:
            raise ValueError(f"eta must lie in [2, {depth}], got {self.eta}")
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"unknown pool_mode {self.pool_mode!r}")
        if self.bn_scope not in BN_SCOPES:
            raise ValueError(f"unknown bn_scope {self.bn_scope!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = {"widths": list(self.encoder.widths), "kinds": list(self.encoder.kinds)}
        return d


# -- encoder ------------------------------------------------------------------


class PlainStage(Module):
    def __init__(self, rng, c_in, c_out):
        self.down = ConvBlock(rng, c_in, c_out, stride=2)
        self.body = ConvBlock(rng, c_out, c_out)

    def __call__(self, x, ds, mode):
        return self.body(self.down(x, ds, mode), ds, mode)


class ResidualStage(Module):
    def __init__(self, rng, c_in, c_out):
        self.down = ConvBlock(rng, c_in, c_out, stride=2)
        self.body = ConvBlock(rng, c_out, c_out, activation="none")
        self.skip = ConvBlock(rng, c_in, c_out, k=1, stride=2, activation="none")

    def __call__(self, x, ds, mode):
        y = self.body(self.down(x, ds, mode), ds, mode)
        return ops.relu(ops.add(y, self.skip(x, ds, mode)))


class InvertedResidualStage(Module):
    """1x1 expand -> 3x3 depthwise (stride 2) -> 1x1 linear projection."""

    def __init__(self, rng, c_in, c_out):
        hidden = c_in * EXPANSION
        self.expand = ConvBlock(rng, c_in, hidden, k=1, activation="relu6")
        self.dw = DepthwiseConv2d(rng, hidden, 3, stride=2, padding=1)
        self.dw_bn = BatchNorm2d(hidden)
        self.project = ConvBlock(rng, hidden, c_out, k=1, activation="none")

    def __call__(self, x, ds, mode):
        y = ops.relu6(self.dw_bn(self.dw(self.expand(x, ds, mode)), ds, mode))
        return self.project(y, ds, mode)


_STAGES = {"plain": PlainStage, "residual": ResidualStage, "inverted-residual": InvertedResidualStage}


class Encoder(Module):
    def __init__(self, rng, cfg: EncoderConfig, in_channels=3):
        c = in_channels
        self.stages = []
        for width, kind in zip(cfg.widths, cfg.kinds):
            self.stages.append(_STAGES[kind](rng, c, width))
            c = width

    def __call__(self, x: Tensor, ds: str, mode: str) -> List[Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x, ds, mode)
            feats.append(x)
        return feats


# -- decoder ------------------------------------------------------------------


def _ff_channels(widths: Sequence[int]) -> List[Tuple[int, int]]:
    """(c_in, c_out) of each FF block, mirroring the encoder widths in reverse."""
    out = []
    prev = 0
    depth = len(widths)
    for i in range(depth):
        level = depth - 1 - i
        c_in = prev + 2 * widths[level]
        c_out = widths[level - 1] if level > 0 else widths[0]
        out.append((c_in, c_out))
        prev = c_out
    return out


class AdapterModule(Module):
    """Last eta FF blocks, a 2-channel prediction head and (optionally) an ICM block."""

    def __init__(self, rng, cfg: ModelConfig, dataset_id: str, with_icm: bool = True):
        channels = _ff_channels(cfg.encoder.widths)[-cfg.eta :]
        ids = [dataset_id]
        self.ff = [FFBlock(rng, ci, co, cfg.ratio, ids) for ci, co in channels]
        w0 = cfg.encoder.widths[0]
        self.head = ConvBlock(rng, w0, w0, dataset_ids=ids)
        self.classifier = Conv2d(rng, w0, 2, 1)
        self.icm = ICMBlock(rng, cfg.icm_width, cfg.pool_mode, cfg.ratio) if with_icm else None

    def predict_logits(self, y: Tensor, ds: str, mode: str) -> Tensor:
        return self.classifier(self.head(y, ds, mode))


@dataclass
class ParamPartition:
    shared_count: int
    adapter_count: int
    bn_bank_count_per_dataset: int
    total: int

    @property
    def updated_count(self) -> int:
        return self.adapter_count + self.bn_bank_count_per_dataset

    @property
    def fraction(self) -> float:
        return self.updated_count / self.total


class CANetModel(Module):
    """Siamese encoder + fusion decoder split into a shared prefix and
    per-dataset adapters.

    Parameters
    ----------
    config : ModelConfig, optional
        Architecture and initialisation seed; keyword overrides are
        forwarded to :class:`ModelConfig`.
    dataset_ids : sequence of str
        Datasets registered (fresh) at construction.
    """

    def __init__(self, config: Optional[ModelConfig] = None, dataset_ids: Sequence[str] = (), **overrides):
        if config is None:
            config = ModelConfig(**overrides)
        elif overrides:
            raise TypeError("pass either a config or keyword overrides, not both")
        self.config = config
        self.adapter_serial = 0
        self.meta: dict = {}
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        self.encoder = Encoder(rng, config.encoder, config.in_channels)
        n_shared = config.encoder.depth - config.eta
        self.shared_ff = [FFBlock(rng, ci, co, config.ratio) for ci, co in _ff_channels(config.encoder.widths)[:n_shared]]
        self.adapters: Dict[str, AdapterModule] = {}
        self.shared_icm: Optional[ICMBlock] = None
        if config.ablation == "shared_icm":
            self.shared_icm = ICMBlock(rng, config.icm_width, config.pool_mode, config.ratio)
        for ds in dataset_ids:
            self.add_dataset(ds)

    # -- structure ------------------------------------------------------------

    @property
    def eta(self) -> int:
        return self.config.eta

    @property
    def ablation(self) -> str:
        return self.config.ablation

    @property
    def dataset_ids(self) -> List[str]:
        return list(self.adapters)

    def shared_modules(self) -> List[Module]:
        mods: List[Module] = [self.encoder, *self.shared_ff]
        if self.shared_icm is not None:
            mods.append(self.shared_icm)
        return mods

    def _shared_banks(self):
        for m in self.shared_modules():
            yield from m.banks()

    def _check_id(self, dataset_id: str) -> None:
        if dataset_id not in self.adapters:
            raise UnknownDatasetError(f"dataset {dataset_id!r} is not registered")

    def add_dataset(self, dataset_id: str, init_from: Optional[str] = None) -> AdapterModule:
        """Register a dataset with a new adapter and BN bank entries.

        With ``init_from`` the adapter and bank entries are copies of that
        dataset's; otherwise the adapter is freshly initialised and the BN
        entries start at gamma=1, beta=0 with no running statistics.
        """
        if not isinstance(dataset_id, str) or not _ID_RE.match(dataset_id):
            raise ValueError(f"invalid dataset id {dataset_id!r}")
        if dataset_id in self.adapters:
            raise ValueError(f"dataset {dataset_id!r} is already registered")
        if init_from is not None:
            self._check_id(init_from)
        first = not self.adapters
        for bank in self._shared_banks():
            bank.add(dataset_id, init_from)
        if init_from is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 1, self.adapter_serial]))
            adapter = AdapterModule(rng, self.config, dataset_id, with_icm=self.ablation not in ("no_icm", "shared_icm"))
        else:
            adapter = copy.deepcopy(self.adapters[init_from])
            for bank in adapter.banks():
                bank.rename(init_from, dataset_id)
            for p in adapter.parameters():
                p.momentum_buffer[...] = 0
                p.grad = None
        self.adapter_serial += 1
        self.adapters[dataset_id] = adapter
        if first:
            if self.ablation == "shared_bn":
                for bank in self._shared_banks():
                    bank.share(dataset_id)
            elif self.config.bn_scope == "encoder":
                for ff in self.shared_ff:
                    for bank in ff.banks():
                        bank.share(dataset_id)
        return adapter

    # -- forward --------------------------------------------------------------

    def _validate(self, x1: Tensor, x2: Tensor) -> None:
        if x1.shape != x2.shape:
            raise ValueError(f"temporal inputs differ in shape: {x1.shape} vs {x2.shape}")
        if x1.data.ndim != 4 or x1.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (n, {self.config.in_channels}, h, w) inputs, got {x1.shape}")
        f = 2 ** self.config.encoder.depth
        if x1.shape[2] % f or x1.shape[3] % f:
            raise ValueError(f"spatial dims {x1.shape[2:]} must be divisible by {f}")

    def encode(self, x: Tensor, dataset_id: str, mode: str = "eval") -> List[Tensor]:
        return self.encoder(x, dataset_id, mode)

    def forward(self, x1, x2, dataset_id: str, mode: str = "eval") -> Tuple[Tensor, Optional[Tensor]]:
        """Return (logits, mask); mask is None when the ICM is ablated away."""
        x1 = x1 if isinstance(x1, Tensor) else Tensor(x1)
        x2 = x2 if isinstance(x2, Tensor) else Tensor(x2)
        self._validate(x1, x2)
        self._check_id(dataset_id)
        adapter = self.adapters[dataset_id]
        feats1 = self.encoder(x1, dataset_id, mode)
        feats2 = self.encoder(x2, dataset_id, mode)
        depth = len(feats1)
        y = None
        for i, ff in enumerate([*self.shared_ff, *adapter.ff]):
            level = depth - 1 - i
            y = ff(y, feats1[level], feats2[level], dataset_id, mode)
        p = adapter.predict_logits(y, dataset_id, mode)
        icm = self.shared_icm if self.shared_icm is not None else adapter.icm
        if icm is None:
            return p, None
        m, masked = icm(p)
        return masked, m

    __call__ = forward

    def predict(self, x1, x2, dataset_id: str) -> np.ndarray:
        """Binary change map (n, h, w); changed iff logit(changed) > logit(unchanged)."""
        logits, _ = self.forward(x1, x2, dataset_id, "eval")
        return (logits.data[:, 1] > logits.data[:, 0]).astype(np.uint8)

    # -- parameter bookkeeping --------------------------------------------------

    def shared_parameters(self) -> List[Parameter]:
        return [p for m in self.shared_modules() for p in m.parameters(banks="none")]

    def bank_parameters(self, dataset_id: str) -> List[Parameter]:
        return [p for m in self.shared_modules() for p in m.parameters(banks=dataset_id)]

    def trainable_set(self, dataset_id: str, scope: str = "full") -> List[Parameter]:
        """Mark exactly the parameters trained for ``dataset_id`` under ``scope`` as trainable."""
        self._check_id(dataset_id)
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}")
        self.set_trainable(False)
        selected = self.bank_parameters(dataset_id) + self.adapters[dataset_id].parameters()
        if scope == "full":
            selected = self.shared_parameters() + selected
        for p in selected:
            p.trainable = True
        return selected

    def param_partition(self, dataset_id: Optional[str] = None) -> ParamPartition:
        """Exact parameter counts; ``total`` is the network serving one dataset."""
        if dataset_id is None:
            if not self.adapters:
                raise ValueError("no dataset registered")
            dataset_id = self.dataset_ids[0]
        self._check_id(dataset_id)
        shared = sum(p.size for p in self.shared_parameters())
        adapter = self.adapters[dataset_id].num_parameters()
        bank = sum(p.size for p in self.bank_parameters(dataset_id))
        return ParamPartition(shared, adapter, bank, shared + adapter + bank)

    def copy(self) -> "CANetModel":
        return copy.deepcopy(self)


def apply_ablation(model: CANetModel, ablation: str, copy_model: bool = True) -> CANetModel:
    """Rewire a model into one of the ablated variants.

    ``no_icm`` drops every ICM so the adapter emits its prediction directly;
    ``shared_icm`` keeps the first dataset's ICM as one block used by all
    adapters; ``shared_bn`` routes all datasets through the first dataset's
    BN entries in the shared module.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    m = model.copy() if copy_model else model
    if ablation == "none" or m.ablation == ablation:
        return m
    if m.ablation != "none":
        raise ValueError(f"model already carries ablation {m.ablation!r}")
    first = m.dataset_ids[0] if m.dataset_ids else None
    if ablation == "no_icm":
        for a in m.adapters.values():
            a.icm = None
    elif ablation == "shared_icm":
        if first is None:
            raise ValueError("shared_icm needs a registered dataset to take the ICM from")
        m.shared_icm = m.adapters[first].icm
        for a in m.adapters.values():
            a.icm = None
    elif ablation == "shared_bn" and first is not None:
        for bank in m._shared_banks():
            bank.share(first)
    m.config.ablation = ablation
    return m
