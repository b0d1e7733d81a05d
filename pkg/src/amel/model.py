"""The expert-mixture network: shared backbone, per-domain residual experts,
masked-softmax expert aggregation, classifier and depth heads.

The backbone's first block is conv -> instance norm -> relu (instance norm
strips per-domain style early); later blocks are stride-2 conv -> batch norm
-> relu. Each expert is a lightweight residual block whose output is added to
the shared feature, either via its own domain's expert during training or as
a relevance-weighted sum over experts at inference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ConfigError, DataFormatError, ShapeMismatchError

EXPERT_DESIGNS = ("conv_bn_relu", "bn_conv_relu", "in_conv_relu", "conv_in_relu")

CHECKPOINT_MAGIC = b"AMELCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    input_hw: int = 32
    channels: int = 32
    num_domains: int = 3
    depth_map_hw: int = 16
    backbone_blocks: int = 3
    expert_design: str = "conv_bn_relu"

    def validate(self) -> None:
        if self.backbone_blocks < 2:
            raise ConfigError("backbone_blocks", "need at least 2 blocks")
        downsamples = self.backbone_blocks - 1
        if self.input_hw % (2**downsamples) != 0:
            raise ConfigError(
                "input_hw",
                f"{self.input_hw} not divisible by 2^{downsamples} downsampling stages",
            )
        if self.num_domains < 1:
            raise ConfigError("num_domains", "need at least one domain expert")
        if self.channels < 1:
            raise ConfigError("channels", "need at least one channel")
        fhw = self.feature_hw
        if self.depth_map_hw % fhw != 0 or self.depth_map_hw < fhw:
            raise ConfigError(
                "depth_map_hw",
                f"{self.depth_map_hw} must be an integer multiple of the feature extent {fhw}",
            )
        if self.expert_design not in EXPERT_DESIGNS:
            raise ConfigError("expert_design", f"unknown design {self.expert_design!r}")

    @property
    def feature_hw(self) -> int:
        return self.input_hw // (2 ** (self.backbone_blocks - 1))


@dataclass
class AggregationOutput:
    """Aggregated expert feature plus the per-sample relevance weights."""

    features: Tensor  # [B, C, h, w]
    weights: Tensor  # [B, K'], rows sum to 1


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


class ExpertBlock:
    """One domain expert: a 1x1 conv residual block.

    The default design is conv -> batch norm -> relu; the alternatives swap
    the normalization kind or position and exist for the expert-design
    ablation.
    """

    def __init__(self, channels: int, design: str, rng: np.random.Generator, dtype=np.float32):
        if design not in EXPERT_DESIGNS:
            raise ConfigError("expert_design", f"unknown design {design!r}")
        self.design = design
        self.channels = channels
        self.conv_w = _he_conv(rng, channels, channels, 1, dtype)
        self.conv_b = _zeros((channels,), dtype)
        if self.has_bn:
            self.gamma = _ones((channels,), dtype)
            self.beta = _zeros((channels,), dtype)
            self.bn = ops.BatchNormState(channels, dtype=dtype)
        else:
            self.gamma = None
            self.beta = None
            self.bn = None

    @property
    def has_bn(self) -> bool:
        return self.design in ("conv_bn_relu", "bn_conv_relu")

    def parameters(self) -> list[Tensor]:
        params = [self.conv_w, self.conv_b]
        if self.has_bn:
            params += [self.gamma, self.beta]
        return params

    def with_parameters(self, params: Sequence[Tensor]) -> "ExpertBlock":
        """Shallow clone using ``params`` but sharing the BN state."""
        clone = object.__new__(ExpertBlock)
        clone.design = self.design
        clone.channels = self.channels
        clone.conv_w, clone.conv_b = params[0], params[1]
        if self.has_bn:
            clone.gamma, clone.beta = params[2], params[3]
        else:
            clone.gamma = clone.beta = None
        clone.bn = self.bn
        return clone

    def forward(self, x: Tensor, train: bool) -> Tensor:
        mode = "train" if train else "eval"
        if self.design == "conv_bn_relu":
            h = ops.conv2d(x, self.conv_w, self.conv_b)
            h = ops.batch_norm(h, self.gamma, self.beta, self.bn, mode)
        elif self.design == "bn_conv_relu":
            h = ops.batch_norm(x, self.gamma, self.beta, self.bn, mode)
            h = ops.conv2d(h, self.conv_w, self.conv_b)
        elif self.design == "in_conv_relu":
            h = ops.conv2d(ops.instance_norm(x), self.conv_w, self.conv_b)
        else:  # conv_in_relu
            h = ops.instance_norm(ops.conv2d(x, self.conv_w, self.conv_b))
        return ops.relu(h)


class AmelModel:
    """Parameter container plus the forward paths.

    In eval mode every forward is read-only and the model may be shared
    across threads; any train-mode forward mutates BN running statistics and
    needs exclusive access.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype).type
        C = config.channels

        self.stem_w = _he_conv(rng, C, 3, 3, dtype)
        self.stem_b = _zeros((C,), dtype)
        self.down_blocks: list[dict] = []
        for _ in range(config.backbone_blocks - 1):
            self.down_blocks.append(
                {
                    "w": _he_conv(rng, C, C, 3, dtype),
                    "b": _zeros((C,), dtype),
                    "gamma": _ones((C,), dtype),
                    "beta": _zeros((C,), dtype),
                    "bn": ops.BatchNormState(C, dtype=dtype),
                }
            )

        self.cls_w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(C), size=(C, 2)), requires_grad=True, dtype=dtype
        )
        self.cls_b = _zeros((2,), dtype)

        c_mid = max(C // 2, 1)
        self.dep1_w = _he_conv(rng, c_mid, C, 3, dtype)
        self.dep1_b = _zeros((c_mid,), dtype)
        self.dep2_w = _he_conv(rng, 1, c_mid, 3, dtype)
        self.dep2_b = _zeros((1,), dtype)
        self.depth_upsample = config.depth_map_hw // config.feature_hw

        self.experts = [
            ExpertBlock(C, config.expert_design, rng, dtype) for _ in range(config.num_domains)
        ]

        n_expert = sum(p.size for p in self.experts[0].parameters())
        n_backbone = sum(p.size for p in self._backbone_feature_parameters())
        if n_expert >= 0.2 * n_backbone:
            raise ConfigError(
                "channels",
                f"expert parameter count {n_expert} is not small next to the backbone's {n_backbone}",
            )

    # -- parameter groups ---------------------------------------------------

    def _backbone_feature_parameters(self) -> list[Tensor]:
        params = [self.stem_w, self.stem_b]
        for blk in self.down_blocks:
            params += [blk["w"], blk["b"], blk["gamma"], blk["beta"]]
        return params

    def backbone_parameters(self) -> list[Tensor]:
        """The normal-train update target: feature extractor plus both heads."""
        return self._backbone_feature_parameters() + [
            self.cls_w,
            self.cls_b,
            self.dep1_w,
            self.dep1_b,
            self.dep2_w,
            self.dep2_b,
        ]

    def expert_parameters(self, k: int) -> list[Tensor]:
        return self.experts[k].parameters()

    def all_expert_parameters(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"stem.w": self.stem_w, "stem.b": self.stem_b}
        for i, blk in enumerate(self.down_blocks):
            named.update(
                {
                    f"down{i}.w": blk["w"],
                    f"down{i}.b": blk["b"],
                    f"down{i}.gamma": blk["gamma"],
                    f"down{i}.beta": blk["beta"],
                }
            )
        named.update(
            {
                "cls.w": self.cls_w,
                "cls.b": self.cls_b,
                "depth1.w": self.dep1_w,
                "depth1.b": self.dep1_b,
                "depth2.w": self.dep2_w,
                "depth2.b": self.dep2_b,
            }
        )
        for k, e in enumerate(self.experts):
            named[f"expert{k}.conv_w"] = e.conv_w
            named[f"expert{k}.conv_b"] = e.conv_b
            if e.has_bn:
                named[f"expert{k}.gamma"] = e.gamma
                named[f"expert{k}.beta"] = e.beta
        return named

    def bn_states(self) -> list[ops.BatchNormState]:
        states = [blk["bn"] for blk in self.down_blocks]
        states += [e.bn for e in self.experts if e.bn is not None]
        return states

    def snapshot_bn(self) -> list[tuple]:
        return [s.snapshot() for s in self.bn_states()]

    def restore_bn(self, snaps: list[tuple]) -> None:
        for s, snap in zip(self.bn_states(), snaps):
            s.restore(snap)

    def seed_normalization_stats(self) -> None:
        """Seed every BN state with mean 0 / var 1 so eval mode is usable
        before any training (fresh-model inference in tests and demos)."""
        for s in self.bn_states():
            s.seed(np.zeros(s.channels), np.ones(s.channels))

    # -- forward paths ------------------------------------------------------

    def forward_common(self, x: Tensor, train: bool = False) -> Tensor:
        """Shared-backbone feature of shape [B, C, h, w]."""
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatchError("forward_common", "input", ("B", 3, "H", "W"), x.shape)
        if x.shape[2] != self.config.input_hw or x.shape[3] != self.config.input_hw:
            raise ShapeMismatchError(
                "forward_common",
                "spatial extent",
                (self.config.input_hw, self.config.input_hw),
                x.shape[2:],
            )
        h = ops.conv2d(x, self.stem_w, self.stem_b, padding=1)
        h = ops.relu(ops.instance_norm(h))
        mode = "train" if train else "eval"
        for blk in self.down_blocks:
            h = ops.conv2d(h, blk["w"], blk["b"], padding=1, stride=2)
            h = ops.relu(ops.batch_norm(h, blk["gamma"], blk["beta"], blk["bn"], mode))
        return h

    def forward_expert(self, k: int, common: Tensor, train: bool = False) -> Tensor:
        """Expert k's residual feature; the full per-domain feature is
        ``common + forward_expert(k, common)``."""
        if not 0 <= k < len(self.experts):
            raise IndexError(f"expert index {k} out of range for {len(self.experts)} experts")
        return self.experts[k].forward(common, train)

    def aggregate(self, common: Tensor, expert_feats: Sequence[Tensor]) -> AggregationOutput:
        """Relevance-weighted sum of expert features.

        The pooled common feature queries the pooled expert features; a
        masked softmax restricted to each sample's own K' entries yields the
        weights, and the output feature is their convex combination.
        """
        expert_feats = list(expert_feats)
        if not expert_feats:
            raise ShapeMismatchError("aggregate", "expert count", ">=1", 0)
        B = common.shape[0]
        q = ops.global_avg_pool(common)
        keys = ops.global_avg_pool(ops.concat_batch(expert_feats))
        scores = ops.matmul(q, keys, transpose_b=True)  # [B, K'B]
        mask = ops.expert_mask(B, len(expert_feats))
        w_full = ops.masked_softmax(scores, mask)
        weights = ops.take_expert_weights(w_full, len(expert_feats))  # [B, K']
        features = ops.weighted_expert_sum(weights, expert_feats)
        return AggregationOutput(features=features, weights=weights)

    def classify(self, feat: Tensor) -> Tensor:
        return ops.linear(ops.global_avg_pool(feat), self.cls_w, self.cls_b)

    def estimate_depth(self, feat: Tensor) -> Tensor:
        h = ops.relu(ops.conv2d(feat, self.dep1_w, self.dep1_b, padding=1))
        h = ops.upsample_nearest(h, self.depth_upsample)
        return ops.conv2d(h, self.dep2_w, self.dep2_b, padding=1)

    def forward_inference(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Full eval-mode forward: common + aggregated feature into both heads.

        Returns (logits [B,2], depth [B,1,d,d], weights [B,K]). The positive
        class (index 1) is "live".
        """
        common = self.forward_common(x, train=False)
        feats = [self.forward_expert(k, common, train=False) for k in range(len(self.experts))]
        agg = self.aggregate(common, feats)
        fused = ops.add(common, agg.features)
        return self.classify(fused), self.estimate_depth(fused), agg.weights

    def forward_single_expert(self, x: Tensor, k: int) -> tuple[Tensor, Tensor]:
        """Eval-mode forward through one expert only (inference ablation)."""
        common = self.forward_common(x, train=False)
        fused = ops.add(common, self.forward_expert(k, common, train=False))
        return self.classify(fused), self.estimate_depth(fused)

    def forward_backbone_only(self, x: Tensor, train: bool = False) -> tuple[Tensor, Tensor]:
        """Heads applied straight to the shared feature (no experts)."""
        common = self.forward_common(x, train=train)
        return self.classify(common), self.estimate_depth(common)

    def forward_with_strategy(self, x: Tensor, strategy: str) -> tuple[Tensor, Tensor, Tensor]:
        """Inference under an aggregation-strategy variant.

        ``dea`` is the learned masked softmax and delegates to
        :meth:`forward_inference` so the two paths cannot drift apart.
        """
        if strategy == "dea":
            return self.forward_inference(x)
        common = self.forward_common(x, train=False)
        feats = [self.forward_expert(k, common, train=False) for k in range(len(self.experts))]
        B, K = x.shape[0], len(feats)
        if strategy == "average_voting":
            weights = Tensor(np.full((B, K), 1.0 / K), dtype=common.data.dtype)
        elif strategy == "expert_ensembling":
            weights = Tensor(np.ones((B, K)), dtype=common.data.dtype)
        elif strategy == "max_selection":
            q = ops.global_avg_pool(common)
            keys = ops.global_avg_pool(ops.concat_batch(feats))
            scores = ops.matmul(q, keys, transpose_b=True)
            own = ops.take_expert_weights(scores, K)  # [B, K] relevance scores
            onehot = np.zeros((B, K), dtype=common.data.dtype)
            onehot[np.arange(B), own.data.argmax(axis=1)] = 1.0
            weights = Tensor(onehot)
        else:
            raise ConfigError("strategy", f"unknown aggregation strategy {strategy!r}")
        fused = ops.add(common, ops.weighted_expert_sum(weights, feats))
        return self.classify(fused), self.estimate_depth(fused), weights

    def with_substituted_experts(self, replacements: dict[int, Sequence[Tensor]]) -> "AmelModel":
        """Shallow copy whose listed experts carry replacement parameters.

        Backbone tensors and all BN state objects are shared; used for the
        inner-updated expert snapshot during episodic training.
        """
        clone = object.__new__(AmelModel)
        clone.__dict__.update(self.__dict__)
        clone.experts = list(self.experts)
        for k, params in replacements.items():
            clone.experts[k] = self.experts[k].with_parameters(list(params))
        return clone

    # -- checkpoint I/O -----------------------------------------------------

    def state_arrays(self) -> list[np.ndarray]:
        """Every persistent array in declaration order: parameters first,
        then BN running statistics (mean, var, updates-seen counter)."""
        arrays = [p.data for p in self.backbone_parameters() + self.all_expert_parameters()]
        for s in self.bn_states():
            arrays += [s.running_mean, s.running_var, np.asarray(float(s.updates_seen))]
        return arrays

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.backbone_parameters() + self.all_expert_parameters()
        states = self.bn_states()
        expected = len(params) + 3 * len(states)
        if len(arrays) != expected:
            raise DataFormatError(
                f"checkpoint holds {len(arrays)} tensors, model declares {expected}"
            )
        it = iter(arrays)
        for p in params:
            a = next(it)
            if a.shape != p.shape:
                raise DataFormatError(f"checkpoint tensor shape {a.shape} != expected {p.shape}")
            p.data = np.ascontiguousarray(a, dtype=self.dtype)
        for s in states:
            s.running_mean = np.ascontiguousarray(next(it), dtype=self.dtype)
            s.running_var = np.ascontiguousarray(next(it), dtype=self.dtype)
            s.updates_seen = int(next(it))


def save_checkpoint(model: AmelModel, path) -> None:
    cfg = model.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(
            struct.pack(
                "<5I",
                cfg.input_hw,
                cfg.channels,
                cfg.num_domains,
                cfg.depth_map_hw,
                cfg.backbone_blocks,
            )
        )
        design = cfg.expert_design.encode("utf-8")
        f.write(struct.pack("<H", len(design)))
        f.write(design)
        arrays = model.state_arrays()
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype="<f4")
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
            f.write(a.tobytes(order="C"))


def _read_exact(f, n: int, section: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"unexpected end of checkpoint while reading {section}")
    return buf


def load_checkpoint(path, dtype=np.float32) -> AmelModel:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        hw, ch, k, d, blocks = struct.unpack("<5I", _read_exact(f, 20, "model config"))
        (dlen,) = struct.unpack("<H", _read_exact(f, 2, "expert design"))
        design = _read_exact(f, dlen, "expert design").decode("utf-8")
        cfg = ModelConfig(
            input_hw=hw,
            channels=ch,
            num_domains=k,
            depth_map_hw=d,
            backbone_blocks=blocks,
            expert_design=design,
        )
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        arrays = []
        for i in range(count):
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, f"tensor {i} rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"tensor {i} shape"))
            n = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(f, 4 * n, f"tensor {i} data")
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape))
    model = AmelModel(cfg, np.random.default_rng(0), dtype=dtype)
    model.load_state_arrays(arrays)
    return model
