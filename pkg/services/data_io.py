"""Feature, attribute, checkpoint, config and dataset-directory files."""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import find_key, merge_settings, render_config, schema_defaults
from errors import ConfigurationError, DataError, ParseError
from models import ClassPool, EmbedderSpec, LogitConfig, ZslDataset
from services.core_math import Rng
from services.embedder import Embedder
from services.zsl_service import ZslModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FEATURE_MAGIC = b"ZSLF"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sHHQQ")
FLAG_LABELS = 0x1

CHECKPOINT_MAGIC = b"ZSLC"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<4sHI")
TENSOR_HEADER = struct.Struct("<HB")

TRAIN_FEATURES = "train.zslf"
TEST_FEATURES = "test.zslf"
ATTRIBUTES = "attributes.csv"
SPLIT = "split.json"


def save_features(path: PathLike, features: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    features = np.ascontiguousarray(features, dtype="<f8")
    if features.ndim != 2:
        raise DataError(f"Features must be 2-D, got shape {features.shape}")
    flags = 0
    if labels is not None:
        labels = np.ascontiguousarray(labels, dtype="<i4")
        if labels.shape != (features.shape[0],):
            raise DataError(f"Expected {features.shape[0]} labels, got shape {labels.shape}")
        flags |= FLAG_LABELS
    with Path(path).open("wb") as f:
        f.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, flags, *features.shape))
        f.write(features.tobytes())
        if labels is not None:
            f.write(labels.tobytes())


def load_features(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Read a feature file; returns (features, labels or None)."""
    raw = Path(path).read_bytes()
    if len(raw) < FEATURE_HEADER.size:
        raise ParseError(f"{path}: header needs {FEATURE_HEADER.size} bytes, got {len(raw)}", offset=0)
    magic, version, flags, n, d = FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FEATURE_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    has_labels = bool(flags & FLAG_LABELS)
    expected = FEATURE_HEADER.size + n * d * 8 + (n * 4 if has_labels else 0)
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, got {len(raw)}", offset=min(len(raw), expected))
    offset = FEATURE_HEADER.size
    features = np.frombuffer(raw, dtype="<f8", count=n * d, offset=offset).reshape(n, d).astype(np.float64)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset + n * d * 8).astype(np.int64)
    return features, labels


def save_attributes(path: PathLike, attributes: np.ndarray) -> None:
    attributes = np.asarray(attributes, dtype=np.float64)
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id"] + [f"a{j}" for j in range(attributes.shape[1])])
        for class_id, row in enumerate(attributes):
            writer.writerow([class_id] + [repr(float(v)) for v in row])


def load_attributes(path: PathLike) -> np.ndarray:
    """Read an attribute CSV; class ids must be exactly 0..K-1 (any order)."""
    rows: Dict[int, List[float]] = {}
    width = None
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        for line_no, record in enumerate(csv.reader(f), start=1):
            if not record or all(not cell.strip() for cell in record):
                continue
            if line_no == 1 and record[0].strip() == "class_id":
                continue
            if width is None:
                width = len(record)
                if width < 2:
                    raise ParseError(f"{path}: row {line_no} has no attribute columns", line=line_no)
            elif len(record) != width:
                raise ParseError(f"{path}: row {line_no} has {len(record)} columns, expected {width}", line=line_no)
            try:
                class_id = int(record[0])
                values = [float(cell) for cell in record[1:]]
            except ValueError as e:
                raise ParseError(f"{path}: row {line_no}: {e}", line=line_no)
            if class_id in rows:
                raise ParseError(f"{path}: duplicate class id {class_id} on row {line_no}", line=line_no)
            rows[class_id] = values
    if not rows:
        raise ParseError(f"{path}: no attribute rows", line=0)
    if set(rows) != set(range(len(rows))):
        raise DataError(f"{path}: class ids must be exactly 0..{len(rows) - 1}")
    return np.array([rows[c] for c in range(len(rows))], dtype=np.float64)


def save_checkpoint(path: PathLike, model: ZslModel) -> None:
    """Write the embedder tensors and a `<path>.json` sidecar with the model config."""
    path = Path(path)
    state = model.embedder.state_dict()
    with path.open("wb") as f:
        f.write(CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(state)))
        for name in sorted(state):
            tensor = np.ascontiguousarray(state[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(TENSOR_HEADER.pack(len(encoded), tensor.ndim))
            f.write(encoded)
            f.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            f.write(tensor.tobytes())
    sidecar = {
        "format_version": CHECKPOINT_VERSION,
        "embedder": model.embedder.spec.to_dict(),
        "logits": model.logit_config.to_dict(),
        "attribute_preproc": model.attribute_preproc,
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")


def _read_tensors(path: Path) -> Dict[str, np.ndarray]:
    raw = path.read_bytes()

    def need(offset: int, size: int) -> None:
        if offset + size > len(raw):
            raise ParseError(f"{path}: expected {offset + size} bytes, got {len(raw)}", offset=len(raw))

    need(0, CHECKPOINT_HEADER.size)
    magic, version, count = CHECKPOINT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", offset=4)
    offset = CHECKPOINT_HEADER.size
    tensors = {}
    for _ in range(count):
        need(offset, TENSOR_HEADER.size)
        name_len, ndim = TENSOR_HEADER.unpack_from(raw, offset)
        offset += TENSOR_HEADER.size
        need(offset, name_len + 8 * ndim)
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
        offset += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        need(offset, 8 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * size
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes", offset=offset)
    return tensors


def load_checkpoint(path: PathLike) -> ZslModel:
    """Rebuild the ZslModel saved by `save_checkpoint`."""
    path = Path(path)
    sidecar_path = Path(f"{path}.json")
    if not sidecar_path.exists():
        raise DataError(f"Missing checkpoint sidecar {sidecar_path}")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{sidecar_path}: {e.msg}", line=e.lineno, offset=e.pos)
    if sidecar.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"{sidecar_path}: unsupported format version {sidecar.get('format_version')}")
    spec = EmbedderSpec.from_dict(sidecar["embedder"])
    # weights are overwritten by the stored tensors
    embedder = Embedder.initialize(spec, Rng(0))
    embedder.load_state_dict(_read_tensors(path))
    return ZslModel(embedder, LogitConfig(**sidecar["logits"]), sidecar["attribute_preproc"])


def parse_config_text(text: str, source: str = "<config>") -> List[Tuple[str, str]]:
    """Parse key=value lines ('#' starts a comment); keys are checked against the schema."""
    entries = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ParseError(f"{source}: line {line_no}: expected key=value, got '{content}'", line=line_no)
        name, value = (part.strip() for part in content.split("=", 1))
        try:
            find_key(name).parse(value)
        except ConfigurationError as e:
            raise ConfigurationError(f"{source}: line {line_no}: {e}")
        entries.append((name, value))
    return entries


def load_config(path: PathLike, base: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Settings from a config file layered over `base` (schema defaults when omitted)."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file {path} does not exist")
    entries = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    return merge_settings(base if base is not None else schema_defaults(), entries)


def save_config(path: PathLike, settings: Dict[str, Any]) -> None:
    Path(path).write_text(render_config(settings), encoding="utf-8")


def save_dataset(directory: PathLike, pool: ClassPool, seen_ids: Sequence[int], unseen_ids: Sequence[int]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_features(directory / TRAIN_FEATURES, pool.train_features, pool.train_labels)
    save_features(directory / TEST_FEATURES, pool.test_features, pool.test_labels)
    save_attributes(directory / ATTRIBUTES, pool.attributes)
    split = {"seen_class_ids": [int(c) for c in seen_ids], "unseen_class_ids": [int(c) for c in unseen_ids]}
    (directory / SPLIT).write_text(json.dumps(split, indent=2), encoding="utf-8")
    logger.info(f"Saved dataset with {pool.n_classes} classes to {directory}")


def load_pool(directory: PathLike) -> Tuple[ClassPool, Tuple[int, ...], Tuple[int, ...]]:
    """Load a dataset directory as a class pool plus its seen/unseen split."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"Dataset directory {directory} does not exist")
    train_x, train_y = load_features(directory / TRAIN_FEATURES)
    test_x, test_y = load_features(directory / TEST_FEATURES)
    if train_y is None or test_y is None:
        raise DataError(f"Feature files in {directory} must carry labels")
    attributes = load_attributes(directory / ATTRIBUTES)
    try:
        split = json.loads((directory / SPLIT).read_text(encoding="utf-8"))
        seen, unseen = tuple(split["seen_class_ids"]), tuple(split["unseen_class_ids"])
    except json.JSONDecodeError as e:
        raise ParseError(f"{directory / SPLIT}: {e.msg}", line=e.lineno, offset=e.pos)
    except (KeyError, TypeError):
        raise DataError(f"{directory / SPLIT} must define seen_class_ids and unseen_class_ids")
    pool = ClassPool(train_x, train_y, test_x, test_y, attributes)
    return pool, seen, unseen


def load_dataset(directory: PathLike) -> ZslDataset:
    pool, seen, unseen = load_pool(directory)
    return ZslDataset.from_pool(pool, seen, unseen)
