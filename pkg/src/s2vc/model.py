"""The voice-conversion network and its on-disk formats.

Source encoder (4 x linear + batch norm), target encoder (3 x conv1d),
self-attention-pooling conditioning, cross attention with instance
normalization and a low-dimensional bottleneck on the Q/K path, and a
conformer decoder projecting to log-mel frames.

Checkpoints and attention traces use small CRC-guarded binary containers
documented in docs/formats.md.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .dsp import MelConfig
from .features import FeatureSequence, align_frame_rate, concat_target, resolve_kind
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "S2VCModel",
    "AttentionTrace",
    "ModelError",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "write_trace",
    "read_trace",
]

CHECKPOINT_MAGIC = b"S2VC"
TRACE_MAGIC = b"S2VT"
FORMAT_VERSION = 1


class ModelError(Exception):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    source_feature_kind: str = "cpc"
    target_feature_kind: str = "cpc"
    source_dim: int = 0   # 0 -> nominal dim of the kind
    target_dim: int = 0
    n_source_layers: int = 4
    n_target_conv: int = 3
    conv_kernel: int = 5
    n_decoder_conformer: int = 3
    conformer_heads: int = 2
    conformer_ff_dim: int = 1024
    conformer_conv_kernel: int = 15
    n_attention_blocks: int = 1
    attn_bottleneck_dim: int = 4
    use_bottleneck: bool = True
    use_instance_norm: bool = True
    use_sap: bool = True
    use_cross_attention: bool = True
    sap_strategy: str = "add"  # "add" | "concat_project"
    mel_dim: int = 80
    dropout: float = 0.0

    def __post_init__(self):
        if self.attn_bottleneck_dim > self.d_model:
            raise ModelError("attn_bottleneck_dim must not exceed d_model")
        for f in ("d_model", "n_source_layers", "n_target_conv", "conv_kernel",
                  "n_decoder_conformer", "conformer_heads", "conformer_ff_dim",
                  "conformer_conv_kernel", "attn_bottleneck_dim", "mel_dim",
                  "n_attention_blocks"):
            if getattr(self, f) <= 0:
                raise ModelError(f"{f} must be positive")
        if self.sap_strategy not in ("add", "concat_project"):
            raise ModelError(f"unknown sap_strategy {self.sap_strategy!r}")

    @property
    def attn_dim(self):
        return self.attn_bottleneck_dim if self.use_bottleneck else self.d_model

    def resolved_source_dim(self):
        return self.source_dim or resolve_kind(self.source_feature_kind, dim=self.source_dim or None).nominal_dim

    def resolved_target_dim(self):
        return self.target_dim or resolve_kind(self.target_feature_kind, dim=self.target_dim or None).nominal_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AttentionTrace:
    """Per-conversion record of the attention internals."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_weights: np.ndarray
    pooled_target: np.ndarray | None = None


class S2VCModel:
    """All learnable parameters plus architecture configuration."""

    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        self.buffers = {}
        self._build(np.random.default_rng(seed))

    def _build(self, rng):
        cfg = self.config
        d = cfg.d_model
        src_dim = cfg.resolved_source_dim()
        tgt_dim = cfg.resolved_target_dim()

        for i in range(cfg.n_source_layers):
            d_in = src_dim if i == 0 else d
            nn.init_linear(self.params, f"src.{i}", d_in, d, rng)
            nn.init_batchnorm(self.params, self.buffers, f"src.{i}.bn", d)

        for i in range(cfg.n_target_conv):
            c_in = tgt_dim if i == 0 else d
            nn.init_conv1d(self.params, f"tgt.{i}", c_in, d, cfg.conv_kernel, rng)

        if cfg.use_sap:
            nn.init_sap(self.params, "sap", d, rng)
            if cfg.sap_strategy == "concat_project":
                nn.init_linear(self.params, "sap.proj", 2 * d, d, rng)

        for i in range(cfg.n_attention_blocks):
            nn.init_linear(self.params, f"attn.{i}.wq", d, d, rng)
            nn.init_linear(self.params, f"attn.{i}.wk", d, d, rng)
            nn.init_linear(self.params, f"attn.{i}.wv", d, d, rng)
            if cfg.use_bottleneck:
                nn.init_linear(self.params, f"attn.{i}.bq", d, cfg.attn_bottleneck_dim, rng)
                nn.init_linear(self.params, f"attn.{i}.bk", d, cfg.attn_bottleneck_dim, rng)

        for i in range(cfg.n_decoder_conformer):
            nn.init_conformer_block(self.params, self.buffers, f"dec.{i}", cfg, rng)
        nn.init_linear(self.params, "dec.out", d, cfg.mel_dim, rng)

    # -- encoders ----------------------------------------------------------

    def source_encode(self, src, train=False):
        cfg = self.config
        self._check_kind(src, cfg.source_feature_kind, "source")
        h = Tensor(src.frames)
        for i in range(cfg.n_source_layers):
            h = nn.linear(self.params, f"src.{i}", h)
            h = nn.batchnorm(self.params, self.buffers, f"src.{i}.bn", h, train)
            if i < cfg.n_source_layers - 1:
                h = T.relu(h)
        return h

    def target_encode(self, tgt, train=False):
        cfg = self.config
        self._check_kind(tgt, cfg.target_feature_kind, "target")
        h = Tensor(tgt.frames)
        for i in range(cfg.n_target_conv):
            h = T.relu(nn.conv1d(self.params, f"tgt.{i}", h))
        return h

    def _check_kind(self, seq, expected, role):
        if seq.kind.name != expected:
            raise ModelError(
                f"{role} feature kind mismatch: model expects {expected!r}, "
                f"got {seq.kind.name!r}"
            )

    # -- attention ---------------------------------------------------------

    def cross_attention(self, src_h, tgt_h, block=0):
        """One attention block; returns (output, AttentionTrace)."""
        cfg = self.config
        if not cfg.use_cross_attention:
            d = cfg.attn_dim
            empty = np.zeros((src_h.shape[0], 0), dtype=np.float32)
            trace = AttentionTrace(
                q=empty, k=np.zeros((0, d), dtype=np.float32),
                v=np.zeros((0, cfg.d_model), dtype=np.float32),
                attn_weights=np.zeros((src_h.shape[0], 0), dtype=np.float32),
            )
            return src_h, trace
        if tgt_h.shape[0] < 1:
            raise ModelError("cross attention needs at least one target frame")

        q = nn.linear(self.params, f"attn.{block}.wq", src_h)
        k = nn.linear(self.params, f"attn.{block}.wk", tgt_h)
        v = nn.linear(self.params, f"attn.{block}.wv", tgt_h)
        if cfg.use_instance_norm and src_h.shape[0] > 1:
            q = nn.instance_norm(q)
        if cfg.use_instance_norm and tgt_h.shape[0] > 1:
            k = nn.instance_norm(k)
        if cfg.use_bottleneck:
            q = nn.linear(self.params, f"attn.{block}.bq", q)
            k = nn.linear(self.params, f"attn.{block}.bk", k)
        scale = 1.0 / float(np.sqrt(cfg.attn_dim))
        attn = T.softmax(T.matmul(q, T.transpose(k)) * scale, axis=1)
        out = T.matmul(attn, v) + src_h
        trace = AttentionTrace(
            q=q.data.astype(np.float32, copy=True),
            k=k.data.astype(np.float32, copy=True),
            v=v.data.astype(np.float32, copy=True),
            attn_weights=attn.data.astype(np.float32, copy=True),
        )
        return out, trace

    # -- decoder -----------------------------------------------------------

    def decode(self, h, train=False, rng=None):
        cfg = self.config
        for i in range(cfg.n_decoder_conformer):
            h = nn.conformer_block(self.params, self.buffers, f"dec.{i}", h, cfg,
                                   train=train, rng=rng)
        return nn.linear(self.params, "dec.out", h)

    # -- full forward ------------------------------------------------------

    def forward(self, src, tgts, train=False, rng=None):
        """Run the conversion network.

        ``src`` is one FeatureSequence, ``tgts`` a list of sequences from the
        target speaker; returns (mel prediction Ts x mel_dim, AttentionTrace).
        """
        cfg = self.config
        if isinstance(tgts, FeatureSequence):
            tgts = [tgts]
        aligned = [align_frame_rate(s, src.fps) for s in tgts]
        # validates kind/speaker homogeneity across the target set
        concat_target(aligned)

        src_h = self.source_encode(src, train=train)
        # encode per utterance so conv padding never leaks across utterance
        # boundaries; attention and pooling see the concatenated encodings
        tgt_h = T.concat_rows([self.target_encode(s, train=train) for s in aligned])

        pooled = None
        if cfg.use_sap:
            pooled = nn.self_attention_pool(self.params, "sap", tgt_h)  # 1 x d
            if cfg.sap_strategy == "add":
                src_h = src_h + pooled
            else:
                tiled = T.matmul(Tensor(np.ones((src_h.shape[0], 1), dtype=np.float32)),
                                 pooled)
                src_h = nn.linear(self.params, "sap.proj", T.concat_cols([src_h, tiled]))

        h, trace = self.cross_attention(src_h, tgt_h)
        if pooled is not None:
            trace.pooled_target = pooled.data.reshape(-1).astype(np.float32, copy=True)
        mel = self.decode(h, train=train, rng=rng)
        return mel, trace

    # -- parameter access --------------------------------------------------

    def named_parameters(self):
        return self.params

    def state_arrays(self):
        out = {f"param.{k}": p.data for k, p in self.params.items()}
        out.update({f"buffer.{k}": b.data for k, b in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays):
        for k, p in self.params.items():
            key = f"param.{k}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {k!r}")
            if arrays[key].shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {k!r}: {arrays[key].shape} vs {p.data.shape}")
            p.data[...] = arrays[key]
        for k, b in self.buffers.items():
            key = f"buffer.{k}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing buffer {k!r}")
            b.data[...] = arrays[key]


# ---------------------------------------------------------------------------
# CRC-guarded blob container shared by checkpoints and traces

def _pack_blob_file(magic, meta, arrays):
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = [magic, struct.pack("<HI", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
            struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        body.append(struct.pack("<H", len(nb)))
        body.append(nb)
        body.append(struct.pack("<B", arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.tobytes())
    payload = b"".join(body)
    return payload + struct.pack("<I", zlib.crc32(payload))


def _unpack_blob_file(raw, magic, path):
    if len(raw) < 8 or raw[:4] != magic:
        raise CheckpointError(f"{path}: bad magic")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupted")
    version, meta_len = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 10
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw[pos:pos + 4 * size], dtype="<f4").reshape(shape).copy()
        pos += 4 * size
    return meta, arrays


def save_checkpoint(model, path, mel_config=None, extra_meta=None, extra_arrays=None):
    """Serialize parameters, batch-norm stats, and configs; CRC-trailed."""
    meta = {
        "model_config": model.config.to_dict(),
        "mel_config": (mel_config or MelConfig()).to_dict(),
    }
    if extra_meta:
        meta["extra"] = extra_meta
    arrays = model.state_arrays()
    if extra_arrays:
        arrays.update({f"extra.{k}": v for k, v in extra_arrays.items()})
    with open(path, "wb") as fh:
        fh.write(_pack_blob_file(CHECKPOINT_MAGIC, meta, arrays))


def load_checkpoint(path, expect_source_kind=None, expect_target_kind=None):
    """Load a checkpoint; returns (model, mel_config, extra_meta, extra_arrays)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, arrays = _unpack_blob_file(raw, CHECKPOINT_MAGIC, path)
    config = ModelConfig.from_dict(meta["model_config"])
    if expect_source_kind and config.source_feature_kind != expect_source_kind:
        raise CheckpointError(
            f"source feature kind mismatch: checkpoint has "
            f"{config.source_feature_kind!r}, requested {expect_source_kind!r}")
    if expect_target_kind and config.target_feature_kind != expect_target_kind:
        raise CheckpointError(
            f"target feature kind mismatch: checkpoint has "
            f"{config.target_feature_kind!r}, requested {expect_target_kind!r}")
    model = S2VCModel(config, seed=0)
    model.load_state_arrays(arrays)
    mel_cfg = MelConfig.from_dict(meta["mel_config"])
    extra_arrays = {k[len("extra."):]: v for k, v in arrays.items()
                    if k.startswith("extra.")}
    return model, mel_cfg, meta.get("extra", {}), extra_arrays


def write_trace(path, trace):
    arrays = {
        "q": trace.q, "k": trace.k, "v": trace.v,
        "attn_weights": trace.attn_weights,
    }
    meta = {"has_pooled": trace.pooled_target is not None}
    if trace.pooled_target is not None:
        arrays["pooled_target"] = trace.pooled_target
    with open(path, "wb") as fh:
        fh.write(_pack_blob_file(TRACE_MAGIC, meta, arrays))


def read_trace(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, arrays = _unpack_blob_file(raw, TRACE_MAGIC, path)
    return AttentionTrace(
        q=arrays["q"], k=arrays["k"], v=arrays["v"],
        attn_weights=arrays["attn_weights"],
        pooled_target=arrays.get("pooled_target") if meta.get("has_pooled") else None,
    )
