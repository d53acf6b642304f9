"""Feature sequences: native mel extraction plus ingestion of externally
pre-computed representation matrices from the S2VF binary format.

The file format is the bridge to external feature exporters and is therefore
strict: bad magic, version drift, dimension drift, and trailing bytes are all
hard errors.  See docs/formats.md for the byte layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp

__all__ = [
    "FeatureKind",
    "FeatureSequence",
    "FeatureError",
    "FeatureFileError",
    "KIND_REGISTRY",
    "resolve_kind",
    "extract_mel",
    "write_feature_file",
    "load_feature_file",
    "align_frame_rate",
    "concat_target",
    "Manifest",
    "ManifestEntry",
]

MAGIC = b"S2VF"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class FeatureError(Exception):
    pass


class FeatureFileError(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureKind:
    name: str
    nominal_dim: int
    nominal_fps: float

    def __post_init__(self):
        # nominal_dim 0 marks a dim-from-header registry entry (ppg)
        if self.nominal_dim < 0 or self.nominal_fps <= 0:
            raise FeatureError(f"invalid feature kind {self}")


# nominal dims/rates are defaults; external kinds carry theirs in the file header
KIND_REGISTRY = {
    "mel": FeatureKind("mel", 80, 100.0),
    "ppg": FeatureKind("ppg", 0, 100.0),   # dim taken from the file header
    "apc": FeatureKind("apc", 512, 100.0),
    "cpc": FeatureKind("cpc", 256, 100.0),
    "w2v": FeatureKind("w2v", 768, 50.0),
}


def resolve_kind(name, dim=None, fps=None):
    """Look a kind up by name; unknown names become external kinds."""
    key = name.lower()
    if key in KIND_REGISTRY:
        base = KIND_REGISTRY[key]
        if base.nominal_dim == 0:  # dim-from-header kinds (ppg)
            if dim is None:
                raise FeatureError(f"kind {name!r} needs an explicit dimension")
            return FeatureKind(base.name, dim, fps or base.nominal_fps)
        if dim is not None and dim != base.nominal_dim:
            raise FeatureFileError(
                f"kind {name!r} has nominal dim {base.nominal_dim}, file claims {dim}"
            )
        return base
    if dim is None or fps is None:
        raise FeatureError(f"external kind {name!r} needs explicit dim and fps")
    return FeatureKind(key, dim, fps)


@dataclass
class FeatureSequence:
    kind: FeatureKind
    frames: np.ndarray  # T x D float32
    fps: float
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise FeatureError(f"frames must be T x D with T >= 1, got {self.frames.shape}")
        if self.frames.shape[1] != self.kind.nominal_dim:
            raise FeatureError(
                f"kind {self.kind.name!r} expects D={self.kind.nominal_dim}, "
                f"got {self.frames.shape[1]}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise FeatureError("non-finite feature values")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def extract_mel(buf, cfg=None, utterance_id="", speaker_id=""):
    """Log-mel features at 100 fps wrapped as a FeatureSequence."""
    cfg = cfg or dsp.MelConfig()
    if buf.sample_rate != 16000:
        raise FeatureError(f"expected 16 kHz audio, got {buf.sample_rate} Hz")
    spec = dsp.log_mel(buf, cfg)
    kind = resolve_kind("mel")
    fps = cfg.sample_rate / cfg.hop_length
    return FeatureSequence(kind, spec.frames, fps, utterance_id, speaker_id)


# ---------------------------------------------------------------------------
# S2VF binary format

def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(raw, pos):
    if pos + 2 > len(raw):
        raise FeatureFileError("truncated string field")
    (n,) = struct.unpack_from("<H", raw, pos)
    end = pos + 2 + n
    if end > len(raw):
        raise FeatureFileError("truncated string payload")
    return raw[pos + 2:end].decode("utf-8"), end


def write_feature_file(path, seq):
    t, d = seq.frames.shape
    header = (
        MAGIC
        + struct.pack("<HBII f", FORMAT_VERSION, DTYPE_F32, t, d, seq.fps)
        + _pack_str(seq.kind.name)
        + _pack_str(seq.speaker_id)
    )
    payload = seq.frames.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_feature_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FeatureFileError(f"bad magic in {path}")
    if len(raw) < 4 + struct.calcsize("<HBII f"):
        raise FeatureFileError("truncated header")
    version, dtype, t, d, fps = struct.unpack_from("<HBII f", raw, 4)
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"unsupported format version {version}")
    if dtype != DTYPE_F32:
        raise FeatureFileError(f"unsupported dtype code {dtype}")
    pos = 4 + struct.calcsize("<HBII f")
    kind_name, pos = _unpack_str(raw, pos)
    speaker_id, pos = _unpack_str(raw, pos)
    expected = 4 * t * d
    payload = raw[pos:]
    if len(payload) != expected:
        raise FeatureFileError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    if not np.all(np.isfinite(frames)):
        raise FeatureFileError("non-finite values in feature payload")
    kind = resolve_kind(kind_name, dim=d, fps=fps)
    utterance_id = Path(path).stem
    return FeatureSequence(kind, frames, fps, utterance_id, speaker_id)


# ---------------------------------------------------------------------------
# frame-rate alignment and target concatenation

def align_frame_rate(seq, target_fps):
    """Nearest-neighbor repetition/decimation to ``target_fps``."""
    if target_fps <= 0:
        raise FeatureError(f"invalid target fps {target_fps}")
    if abs(seq.fps - target_fps) < 1e-9:
        return seq
    t = seq.num_frames
    new_t = max(1, int(round(t * target_fps / seq.fps)))
    # map each output frame back to the source frame covering its center
    idx = np.minimum((np.arange(new_t) * seq.fps / target_fps).astype(np.int64), t - 1)
    return FeatureSequence(seq.kind, seq.frames[idx], target_fps,
                           seq.utterance_id, seq.speaker_id)


def concat_target(seqs):
    """Time-axis concatenation of same-kind, same-speaker sequences."""
    seqs = list(seqs)
    if not seqs:
        raise FeatureError("concat_target of zero sequences")
    first = seqs[0]
    for s in seqs[1:]:
        if s.kind != first.kind:
            raise FeatureError(f"mixed kinds {first.kind.name!r} vs {s.kind.name!r}")
        if abs(s.fps - first.fps) > 1e-9:
            raise FeatureError("mixed frame rates")
        if s.speaker_id != first.speaker_id:
            raise FeatureError(
                f"mixed speakers {first.speaker_id!r} vs {s.speaker_id!r}"
            )
    if len(seqs) == 1:
        return first
    frames = np.concatenate([s.frames for s in seqs], axis=0)
    utt_id = "+".join(s.utterance_id for s in seqs)
    return FeatureSequence(first.kind, frames, first.fps, utt_id, first.speaker_id)


# ---------------------------------------------------------------------------
# dataset manifest (JSON lines)

@dataclass
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    wav: str = ""
    features: dict = field(default_factory=dict)  # kind name -> file path

    def to_json(self):
        return json.dumps(
            {
                "utterance_id": self.utterance_id,
                "speaker_id": self.speaker_id,
                "wav": self.wav,
                "features": self.features,
            },
            sort_keys=True,
        )


@dataclass
class Manifest:
    entries: list

    @classmethod
    def load(cls, path):
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    d = json.loads(line)
                    entries.append(ManifestEntry(
                        utterance_id=d["utterance_id"],
                        speaker_id=d["speaker_id"],
                        wav=d.get("wav", ""),
                        features=d.get("features", {}),
                    ))
                except (json.JSONDecodeError, KeyError) as e:
                    raise FeatureError(f"{path}:{line_no}: bad manifest line: {e}") from e
        return cls(entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")

    def speakers(self):
        out = {}
        for e in self.entries:
            out.setdefault(e.speaker_id, []).append(e)
        return out

    def __len__(self):
        return len(self.entries)
