"""The registration network: encoder/decoder trunk with displacement heads.

Layout for input dims divisible by 16 (five levels s0..s4, channel count
n0 * 2**k at level k):

  stem      7x7x7 conv + BN + relu on the 2-channel (moving, fixed) stack
  down k    maxpool, then a residual conv pair doubling channels
  up k      deconv(+trilinear additive upsampling) halving channels,
            summed with the down-path feature at the target level, then a
            residual conv pair
  head k    3x3x3 conv + bias, no BN/relu, zero-initialized, emitting a
            3-channel displacement summand at level k

The output field is the sum of the summands after trilinear upsampling to
level 0, so a freshly initialized network emits an exactly-zero field.  The
affine head variant keeps the stem + down trunk and regresses 12 transform
parameters from globally pooled bottom features, initialized to the
identity transform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .axisops import resize3_adjoint
from .layers import (
    BatchNorm3d,
    ChannelPairMean,
    Conv3d,
    Deconv2x,
    GlobalAvgPool,
    Linear,
    MaxPool2x,
    ParameterStore,
    ReLU,
    TrilinearUp2x,
)
from .spatial import aggregate_summand_arrays, summand_dims

__all__ = [
    "NetworkConfig",
    "RegistrationNet",
    "init_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

N_LEVELS = 5
IDENTITY_AFFINE_FLAT = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0, 0, 0, 0])
CHECKPOINT_FORMAT = "weakreg-checkpoint-v1"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyper-parameters."""

    n0: int = 32
    summand_levels: tuple[int, ...] = (0, 1, 2, 3, 4)
    head: str = "ddf"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "summand_levels", tuple(sorted(int(l) for l in self.summand_levels)))
        if self.n0 < 1:
            raise ValueError(f"n0 must be >= 1, got {self.n0}")
        if self.head not in ("ddf", "affine"):
            raise ValueError(f"head must be 'ddf' or 'affine', got {self.head!r}")
        if self.head == "ddf" and not self.summand_levels:
            raise ValueError("ddf head needs at least one summand level")
        if any(l < 0 or l >= N_LEVELS for l in self.summand_levels):
            raise ValueError(f"summand levels must lie in [0, {N_LEVELS - 1}]")

    def channels(self, level: int) -> int:
        return self.n0 * (1 << level)


class _ResidualPair:
    """conv-BN-relu, conv-BN, identity shortcut, relu.

    When the pair doubles channels the shortcut pads the input with zero
    channels so the summation stays parameter-free.
    """

    def __init__(self, store, name, c_in, c_out, rng, cfg, k_first=3):
        self.c_in = c_in
        self.c_out = c_out
        self.conv1 = Conv3d(store, f"{name}.conv1", c_in, c_out, k_first, rng)
        self.bn1 = BatchNorm3d(store, f"{name}.bn1", c_out, cfg.bn_eps, cfg.bn_momentum)
        self.relu1 = ReLU()
        self.conv2 = Conv3d(store, f"{name}.conv2", c_out, c_out, 3, rng)
        self.bn2 = BatchNorm3d(store, f"{name}.bn2", c_out, cfg.bn_eps, cfg.bn_momentum)
        self.relu2 = ReLU()

    def forward(self, x, training):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x), training))
        y = self.bn2.forward(self.conv2.forward(h), training)
        if self.c_out != self.c_in:
            pad = np.zeros((x.shape[0], self.c_out - self.c_in) + x.shape[2:], dtype=x.dtype)
            shortcut = np.concatenate([x, pad], axis=1)
        else:
            shortcut = x
        return self.relu2.forward(y + shortcut)

    def backward(self, dy, need_dx=True):
        dz = self.relu2.backward(dy)
        dx = self.conv1.backward(
            self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(dz)))),
            need_dx=need_dx,
        )
        if not need_dx:
            return None
        return dx + dz[:, : self.c_in]


class _DownBlock:
    def __init__(self, store, name, c_in, c_out, rng, cfg):
        self.pool = MaxPool2x()
        self.pair = _ResidualPair(store, name, c_in, c_out, rng, cfg)

    def forward(self, x, training):
        return self.pair.forward(self.pool.forward(x), training)

    def backward(self, dy):
        return self.pool.backward(self.pair.backward(dy))


class _UpBlock:
    """Deconv summed with trilinear additive upsampling, skip sum, conv pair."""

    def __init__(self, store, name, c_in, c_out, rng, cfg):
        self.deconv = Deconv2x(store, f"{name}.deconv", c_in, c_out, rng)
        self.up = TrilinearUp2x()
        self.pair_mean = ChannelPairMean()
        self.pair = _ResidualPair(store, name, c_out, c_out, rng, cfg)

    def forward(self, x, skip, training):
        u = self.deconv.forward(x) + self.pair_mean.forward(self.up.forward(x))
        return self.pair.forward(u + skip, training)

    def backward(self, dy):
        du = self.pair.backward(dy)
        dx = self.deconv.backward(du) + self.up.backward(self.pair_mean.backward(du))
        return dx, du


class _SummandHead:
    def __init__(self, store, name, c_in):
        self.conv = Conv3d(store, name, c_in, 3, 3, rng=None, zero_init=True)

    def forward(self, x):
        return self.conv.forward(x)

    def backward(self, dy):
        return self.conv.backward(dy)


class RegistrationNet:
    """Network instance: configuration, parameters and the forward/backward
    passes.  Tensors are (N, C, X, Y, Z); construction is deterministic per
    seed."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = int(seed)
        self.store = ParameterStore(dtype)
        rng = np.random.default_rng(self.seed)
        ch = cfg.channels

        self.stem_conv = Conv3d(self.store, "stem.conv", 2, ch(0), 7, rng)
        self.stem_bn = BatchNorm3d(self.store, "stem.bn", ch(0), cfg.bn_eps, cfg.bn_momentum)
        self.stem_relu = ReLU()
        self.down = [
            _DownBlock(self.store, f"down{k}", ch(k - 1), ch(k), rng, cfg)
            for k in range(1, N_LEVELS)
        ]
        if cfg.head == "ddf":
            self.up = [
                _UpBlock(self.store, f"up{k}", ch(k), ch(k - 1), rng, cfg)
                for k in range(N_LEVELS - 1, 0, -1)
            ]
            self.heads = {
                lvl: _SummandHead(self.store, f"head{lvl}", ch(lvl))
                for lvl in cfg.summand_levels
            }
        else:
            self.gap = GlobalAvgPool()
            self.fc = Linear(
                self.store, "affine.fc", ch(N_LEVELS - 1), 12, rng=None,
                zero_init=True, bias_init=IDENTITY_AFFINE_FLAT,
            )

    # -- forward ---------------------------------------------------------

    def _trunk(self, moving, fixed, training):
        if moving.shape != fixed.shape:
            raise ValueError(f"moving/fixed shapes differ: {moving.shape} vs {fixed.shape}")
        if any(d % 16 for d in moving.shape[1:]):
            raise ValueError(f"spatial dims must be divisible by 16, got {moving.shape[1:]}")
        x = np.stack([moving, fixed], axis=1)
        feats = [self.stem_relu.forward(self.stem_bn.forward(self.stem_conv.forward(x), training))]
        for block in self.down:
            feats.append(block.forward(feats[-1], training))
        return feats

    def forward_summands(self, moving, fixed, training=True) -> dict[int, np.ndarray]:
        """Per-level displacement summand arrays {level: (N, 3, dims_k)}."""
        if self.cfg.head != "ddf":
            raise ValueError("forward_summands requires a ddf head")
        feats = self._trunk(moving, fixed, training)
        g = feats[N_LEVELS - 1]
        levels = {N_LEVELS - 1: g}
        for i, block in enumerate(self.up):
            lvl = N_LEVELS - 2 - i
            g = block.forward(g, feats[lvl], training)
            levels[lvl] = g
        self._g0_shape = levels[0].shape
        return {lvl: self.heads[lvl].forward(levels[lvl]) for lvl in self.cfg.summand_levels}

    def forward_ddf(self, moving, fixed, training=True):
        """Returns (summands, aggregated field (N, 3) + input dims)."""
        summands = self.forward_summands(moving, fixed, training)
        ddf = aggregate_summand_arrays(summands, moving.shape[1:])
        return summands, ddf

    def forward_affine(self, moving, fixed, training=True) -> np.ndarray:
        """(N, 12) transform parameters, identity at initialization."""
        if self.cfg.head != "affine":
            raise ValueError("forward_affine requires an affine head")
        feats = self._trunk(moving, fixed, training)
        return self.fc.forward(self.gap.forward(feats[-1]))

    # -- backward --------------------------------------------------------

    def _trunk_backward(self, d_feats):
        d = d_feats[N_LEVELS - 1]
        for lvl in range(N_LEVELS - 1, 0, -1):
            d = self.down[lvl - 1].backward(d)
            if d_feats[lvl - 1] is not None:
                d = d + d_feats[lvl - 1]
        self.stem_conv.backward(self.stem_bn.backward(self.stem_relu.backward(d)), need_dx=False)

    def backward_summands(self, d_summands: dict[int, np.ndarray]):
        """Accumulate parameter gradients for summand cotangents."""
        d_levels = {lvl: None for lvl in range(N_LEVELS)}
        for lvl, d in d_summands.items():
            d_levels[lvl] = self.heads[lvl].backward(d)
        d_feats = [None] * N_LEVELS

        def _acc(a, b):
            return b if a is None else a + b

        d_g = d_levels[0]
        if d_g is None:
            d_g = np.zeros(self._g0_shape, dtype=self.store.dtype)
        for i in range(len(self.up) - 1, -1, -1):
            lvl = N_LEVELS - 2 - i  # level produced by up block i
            dx, dskip = self.up[i].backward(d_g)
            d_feats[lvl] = _acc(d_feats[lvl], dskip)
            d_g = dx
            if lvl + 1 <= N_LEVELS - 2 and d_levels[lvl + 1] is not None:
                d_g = d_g + d_levels[lvl + 1]
        if d_levels[N_LEVELS - 1] is not None:
            d_g = d_g + d_levels[N_LEVELS - 1]
        d_feats[N_LEVELS - 1] = d_g
        self._trunk_backward(d_feats)

    def backward_ddf(self, d_ddf: np.ndarray):
        """Backward from a cotangent on the aggregated field."""
        full_dims = tuple(d_ddf.shape[-3:])
        d_summands = {}
        for lvl in self.cfg.summand_levels:
            if lvl == 0:
                d_summands[0] = d_ddf
            else:
                d_summands[lvl] = resize3_adjoint(d_ddf, summand_dims(full_dims, lvl))
        self.backward_summands(d_summands)

    def backward_affine(self, d_params: np.ndarray):
        self._trunk_backward([None] * (N_LEVELS - 1) + [self.gap.backward(self.fc.backward(d_params))])


def init_parameters(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Xavier-initialized parameter store; displacement/affine heads zeroed."""
    return RegistrationNet(cfg, seed, dtype).store


# -- checkpoint IO ---------------------------------------------------------


def _tensor_items(store: ParameterStore):
    for name, p in store.params.items():
        yield f"{name}", "param", p.value
        yield f"{name}", "adam_m", p.m
        yield f"{name}", "adam_v", p.v
    for name, arr in store.state.items():
        yield name, "state", arr


def save_checkpoint(path, net: RegistrationNet, iteration: int = 0, extra: dict | None = None) -> Path:
    """Write a JSON manifest + raw little-endian f32 payload pair."""
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(net.cfg),
        "seed": net.seed,
        "iteration": int(iteration),
        "extra": extra or {},
        "tensors": [
            {"name": name, "kind": kind, "shape": list(arr.shape)}
            for name, kind, arr in _tensor_items(net.store)
        ],
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n")
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for _, _, arr in _tensor_items(net.store):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return stem.with_suffix(".json")


def load_checkpoint(path) -> tuple[RegistrationNet, dict]:
    """Rebuild a network from a checkpoint pair; round-trips bitwise."""
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    cfg_dict = dict(manifest["config"])
    cfg_dict["summand_levels"] = tuple(cfg_dict["summand_levels"])
    cfg = NetworkConfig(**cfg_dict)
    net = RegistrationNet(cfg, seed=manifest["seed"])
    payload = np.fromfile(stem.with_suffix(".bin"), dtype="<f4")
    offset = 0
    expected = [(e["name"], e["kind"], tuple(e["shape"])) for e in manifest["tensors"]]
    actual = [(name, kind, arr.shape) for name, kind, arr in _tensor_items(net.store)]
    if expected != actual:
        raise ValueError("checkpoint tensor manifest does not match the configuration")
    for name, kind, arr in _tensor_items(net.store):
        n = arr.size
        arr[...] = payload[offset : offset + n].reshape(arr.shape)
        offset += n
    if offset != payload.size:
        raise ValueError(f"checkpoint payload has {payload.size} values, expected {offset}")
    return net, manifest
