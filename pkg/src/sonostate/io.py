"""File formats: run configuration, PGM frames, label CSV, contours, dataset
layout and the binary model container."""

from __future__ import annotations

import hashlib
import io
import re
import struct
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .asm import ShapeModel
from .augment import AugmentConfig
from .errors import CorruptFile, InvalidConfiguration, ParseError, VersionMismatch
from .harness import TrainConfig
from .model import SIGNALS, ConvBlock, ModelParams, NetworkSpec, gating_mask
from .tensor import LayerParams

# ---------------------------------------------------------------- run configuration

_BLOCK = re.compile(r"^(\d+)@(\d+)x(\d+)(?:s(\d+))?(?:p(\d+))?$")


def format_blocks(blocks) -> str:
    """``16@5x5`` = 16 channels, 5x5 kernel; optional ``sN`` conv stride and
    ``pN`` square pool window (pool stride equals the window)."""
    parts = []
    for b in blocks:
        s = f"{b.out_channels}@{b.kernel[0]}x{b.kernel[1]}"
        if b.stride != 1:
            s += f"s{b.stride}"
        if tuple(b.pool) != (2, 2) or b.pool_stride != 2:
            s += f"p{b.pool[0]}"
        parts.append(s)
    return ",".join(parts)


def parse_blocks(text: str) -> tuple:
    out = []
    for part in text.split(","):
        m = _BLOCK.match(part.strip())
        if not m:
            raise ValueError(f"bad block {part!r} (expected e.g. 16@5x5, 8@5x5s2, 32@3x3p1)")
        c, kh, kw, s, p = m.groups()
        pool = int(p) if p else 2
        out.append(ConvBlock(int(c), (int(kh), int(kw)), int(s or 1), 0, (pool, pool), pool))
    return tuple(out)


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    """Every tunable with its default. Flat ``key = value`` text form."""

    # architecture
    blocks: str = "16@5x5,32@3x3,48@3x3,64@3x3"
    fc_width: int = 256
    dropout: str = "0.05,0.1,0.15,0.2,0.4"
    # augmentation
    lcn_window: int = 31
    rot_range: float = 5.0
    trans_range: float = 10.0
    train_rigid: bool = True
    # optimizer and loop
    lr: float = 5e-5
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    eval_every: int = 500
    patience: int = 8
    max_steps: int = 50_000
    pair_budget: int = 20_000
    swap: bool = True
    eval_stride: int = 1
    symmetric_eval: bool = False
    seed: int = 0
    # data and folds
    mode: str = "cv"            # cv: cross-validation; fit: train on every participant
    folds: str = "default"      # or explicit "test:validation" pairs, comma separated
    frame_stride: int = 1
    seg_every: int = 25
    data: str = ""
    out: str = ""

    _PARSERS = {bool: _bool, int: int, float: float, str: str}

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, path="<config>") -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(path, n, f"expected key = value, got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ParseError(path, n, f"unknown key {key!r}")
            if key in values:
                raise ParseError(path, n, f"duplicate key {key!r}")
            kind = {"bool": bool, "int": int, "float": float, "str": str}[types[key]]
            try:
                values[key] = cls._PARSERS[kind](val)
            except ValueError as e:
                raise ParseError(path, n, f"bad value for {key}: {e}") from None
        cfg = cls(**values)
        try:
            cfg.train_config()
        except (ValueError, InvalidConfiguration) as e:
            raise ParseError(path, 0, str(e)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Digest of everything that affects results (the output location does not)."""
        text = "".join(line for line in self.dumps().splitlines(True) if not line.startswith("out ="))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def network(self) -> NetworkSpec:
        return NetworkSpec(parse_blocks(self.blocks), self.fc_width, _floats(self.dropout))

    def train_config(self) -> TrainConfig:
        if self.mode not in ("cv", "fit"):
            raise InvalidConfiguration(f"mode must be cv or fit, got {self.mode!r}")
        tc = TrainConfig(
            network=self.network(),
            augment=AugmentConfig(self.lcn_window, self.rot_range, self.trans_range, self.train_rigid),
            lr=self.lr, lr_schedule=self.lr_schedule, beta1=self.beta1, beta2=self.beta2, eps=self.eps, batch_size=self.batch_size,
            eval_every=self.eval_every, patience=self.patience, max_steps=self.max_steps,
            pair_budget=self.pair_budget, swap=self.swap, eval_stride=self.eval_stride,
            symmetric_eval=self.symmetric_eval, seed=self.seed)
        tc.validate()
        if self.frame_stride < 1 or self.seg_every < 1:
            raise InvalidConfiguration("frame_stride and seg_every must be >= 1")
        return tc

    def fold_pairs(self):
        if self.folds == "default":
            return None
        out = []
        for part in self.folds.split(","):
            t, _, v = part.partition(":")
            if not t or not v:
                raise InvalidConfiguration(f"bad fold pair {part!r}; expected test:validation")
            out.append((t.strip(), v.strip()))
        return out


# ---------------------------------------------------------------- PGM


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM frames must be 2-D uint8")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, 1, "truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(path, 1, f"not a binary PGM (magic {tokens[0][:8]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(path, 1, "non-numeric PGM header field") from None
    if maxval != 255 or w < 1 or h < 1:
        raise ParseError(path, 1, f"unsupported PGM geometry {w}x{h} maxval {maxval}")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ParseError(path, 1, f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------- labels CSV

LABEL_HEADER = "frame,time_s,emg_gm_mv,emg_so_mv,moment_nm,angle_deg"


def _comments(comment) -> list:
    return [f"# {c}" for c in comment.splitlines()] if comment else []


def write_labels(path, frames, times, labels, comment: str = "") -> None:
    lines = _comments(comment) + [LABEL_HEADER]
    for f, t, row in zip(frames, times, labels):
        lines.append(",".join([str(int(f)), repr(float(t))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path):
    """(frames int array, times, labels (N, 4)). Lines starting with # are ignored."""
    text = Path(path).read_text().splitlines()
    first = next((n for n, line in enumerate(text) if not line.startswith("#")), len(text))
    if first == len(text) or text[first].strip() != LABEL_HEADER:
        raise ParseError(path, first + 1, f"expected header {LABEL_HEADER!r}")
    frames, times, rows = [], [], []
    for n, line in enumerate(text[first + 1:], first + 2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ParseError(path, n, f"expected 6 fields, got {len(parts)}")
        try:
            frames.append(int(parts[0]))
            times.append(float(parts[1]))
            rows.append([float(x) for x in parts[2:]])
        except ValueError as e:
            raise ParseError(path, n, str(e)) from None
    return np.array(frames, dtype=np.int64), np.array(times), np.array(rows).reshape(-1, 4)


# ---------------------------------------------------------------- contours


def write_contours(path, contours, comment: str = "") -> None:
    lines = _comments(comment) + [",".join(repr(float(v)) for v in np.asarray(c, dtype=np.float64).ravel()) for c in contours]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_contours(path) -> list:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            vals = [float(x) for x in line.split(",")]
        except ValueError as e:
            raise ParseError(path, n, str(e)) from None
        if len(vals) % 2 or len(vals) < 6:
            raise ParseError(path, n, "need an even number (>= 6) of coordinates")
        out.append(np.array(vals).reshape(-1, 2))
    return out


# ---------------------------------------------------------------- dataset layout


def participant_dir(root, k: int) -> Path:
    return Path(root) / f"p{k:02d}"


def trial_dir(root, k: int, task: str) -> Path:
    return participant_dir(root, k) / f"t{task}"


def frame_path(tdir, i: int) -> Path:
    return Path(tdir) / "frames" / f"{i:06d}.pgm"


def write_manifest(path, entries: dict) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(path, n, "expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def list_trials(root):
    """Sorted (participant id, task, directory) triples found under ``root``."""
    out = []
    for pdir in sorted(Path(root).glob("p[0-9]*")):
        for tdir in sorted(pdir.glob("t*")):
            if (tdir / "labels.csv").exists():
                out.append((pdir.name, tdir.name[1:], tdir))
    return out


# ---------------------------------------------------------------- model container

MAGIC = b"SONO"
FORMAT_VERSION = 1


@dataclass
class ModelContainer:
    params: ModelParams | None = None
    shape_models: dict = field(default_factory=dict)    # muscle -> ShapeModel
    meta: dict = field(default_factory=dict)            # extra key/value text


def _section(name: str, payload: bytes) -> bytes:
    nb = name.encode("utf-8")
    return struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload


def _array_blob(arr: np.ndarray, dtype: str) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _read_array(buf: bytes, dtype: str, where: str) -> np.ndarray:
    try:
        (ndim,) = struct.unpack_from("<I", buf, 0)
        shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    except struct.error:
        raise CorruptFile(f"{where}: truncated array header") from None
    start = 4 + 4 * ndim
    dt = np.dtype(dtype).newbyteorder("<")
    n = int(np.prod(shape)) if ndim else 1
    if len(buf) - start != n * dt.itemsize:
        raise CorruptFile(f"{where}: array payload size mismatch")
    return np.frombuffer(buf, dtype=dt, offset=start).reshape(shape).astype(np.dtype(dtype))


def _spec_meta(spec: NetworkSpec) -> dict:
    return {"blocks": format_blocks(spec.blocks), "fc_width": str(spec.fc_width),
            "dropout": ",".join(repr(float(r)) for r in spec.dropout),
            "input_shape": "x".join(str(d) for d in spec.input_shape),
            "signals": ",".join(SIGNALS)}


def save_model(path, container: ModelContainer) -> None:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
    meta = dict(container.meta)
    p = container.params
    if p is not None:
        meta.update(_spec_meta(p.spec))
    out.write(_section("meta", "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")))
    if p is not None:
        out.write(_section("mask", _array_blob(p.mask, "f4")))
        if p.label_std is not None:
            out.write(_section("label_std", _array_blob(p.label_std, "f8")))
        for name, arr in p.named_arrays().items():
            out.write(_section("param:" + name, _array_blob(arr, "f4")))
    for m, sm in sorted(container.shape_models.items()):
        for key in ("mean", "modes", "eigenvalues", "explained"):
            out.write(_section(f"shape:{m}:{key}", _array_blob(getattr(sm, key), "f8")))
        pose = np.array([sm.ref_scale.real, sm.ref_scale.imag, sm.ref_center.real, sm.ref_center.imag])
        out.write(_section(f"shape:{m}:pose", _array_blob(pose, "f8")))
    Path(path).write_bytes(out.getvalue())


def _sections(data: bytes, path):
    pos = 8
    while pos < len(data):
        try:
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + nlen].decode("utf-8")
            (plen,) = struct.unpack_from("<Q", data, pos + 4 + nlen)
        except (struct.error, UnicodeDecodeError):
            raise CorruptFile(f"{path}: truncated section header at byte {pos}") from None
        start = pos + 12 + nlen
        if len(name) != nlen or start + plen > len(data):
            raise CorruptFile(f"{path}: section {name!r} truncated")
        yield name, data[start:start + plen]
        pos = start + plen


def load_model(path) -> ModelContainer:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptFile(f"{path}: bad magic, not a model container")
    (version,) = struct.unpack_from("<I", data, 4)
    if version < 1:
        raise VersionMismatch(f"{path}: unsupported container version {version}")
    if version > FORMAT_VERSION:
        warnings.warn(f"{path}: container version {version} is newer than {FORMAT_VERSION}; "
                      "reading known sections only")
    meta, arrays, shapes = {}, {}, {}
    for name, payload in list(_sections(data, path)):
        if name == "meta":
            for line in payload.decode("utf-8").splitlines():
                k, _, v = line.partition("=")
                meta[k] = v
        elif name == "mask" or name.startswith("param:"):
            arrays[name] = _read_array(payload, "f4", f"{path}:{name}")
        elif name == "label_std":
            arrays[name] = _read_array(payload, "f8", f"{path}:{name}")
        elif name.startswith("shape:"):
            _, m, key = name.split(":", 2)
            shapes.setdefault(m, {})[key] = _read_array(payload, "f8", f"{path}:{name}")
        else:
            warnings.warn(f"{path}: skipping unknown section {name!r}")
    params = _params_from(meta, arrays, path) if "blocks" in meta else None
    models = {}
    for m, d in shapes.items():
        try:
            pose = d["pose"]
            models[m] = ShapeModel(d["mean"], d["modes"], d["eigenvalues"], d["explained"],
                                   complex(pose[0], pose[1]), complex(pose[2], pose[3]))
        except KeyError as e:
            raise CorruptFile(f"{path}: shape model {m!r} missing {e}") from None
    spec_keys = {"blocks", "fc_width", "dropout", "input_shape", "signals"}
    extra = {k: v for k, v in meta.items() if k not in spec_keys}
    return ModelContainer(params, models, extra)


def _params_from(meta, arrays, path) -> ModelParams:
    try:
        spec = NetworkSpec(parse_blocks(meta["blocks"]), int(meta["fc_width"]), _floats(meta["dropout"]))
        shapes = spec.validate()
    except (KeyError, ValueError) as e:
        raise CorruptFile(f"{path}: bad architecture metadata ({e})") from None
    c = spec.input_shape[0]
    expected = {}
    for i, b in enumerate(spec.blocks):
        expected[f"trunk.{i}.weights"] = (b.out_channels, c, *b.kernel)
        expected[f"trunk.{i}.biases"] = (b.out_channels,)
        c = b.out_channels
    expected["fc.weights"] = (spec.fc_width, int(np.prod(shapes[-1])))
    expected["fc.biases"] = (spec.fc_width,)
    expected["head.weights"] = (4, 2 * spec.fc_width)
    expected["head.biases"] = (4,)
    for name, shape in expected.items():
        arr = arrays.get("param:" + name)
        if arr is None:
            raise CorruptFile(f"{path}: missing parameter {name}")
        if arr.shape != shape:
            raise VersionMismatch(f"{path}: parameter {name} has shape {arr.shape}, architecture needs {shape}")
    mask = arrays.get("mask")
    if mask is None or not np.array_equal(mask, gating_mask(spec.fc_width)):
        raise CorruptFile(f"{path}: gating mask missing or inconsistent with the architecture")

    def lp(kind, prefix):
        return LayerParams(kind, arrays["param:" + prefix + ".weights"], arrays["param:" + prefix + ".biases"])

    trunk = [lp("conv2d", f"trunk.{i}") for i in range(len(spec.blocks))]
    return ModelParams(spec, trunk, lp("dense", "fc"), lp("dense", "head"), mask.astype(np.float32),
                       arrays.get("label_std"))


def check_architecture(params: ModelParams, spec: NetworkSpec) -> None:
    """Raise when a checkpoint does not match the configured architecture."""
    if format_blocks(params.spec.blocks) != format_blocks(spec.blocks) or params.spec.fc_width != spec.fc_width:
        raise VersionMismatch(
            f"checkpoint architecture {format_blocks(params.spec.blocks)}/fc{params.spec.fc_width} "
            f"does not match configured {format_blocks(spec.blocks)}/fc{spec.fc_width}")
