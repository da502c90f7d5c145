"""File formats: key = value configs, matrix CSVs, sample manifests, labels,
tidy result tables and run manifests.

Floats are written with ``repr`` (shortest round-trip form), so every CSV and
JSON artifact parses back to the exact values that were computed.
"""
import configparser
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .corrmat import TwoGroupSample, check_correlation, group_average
from .errors import DimensionMismatch, EmptyGroup, InvalidCorrelationMatrix, ValidationError

log = logging.getLogger(__name__)

SECTION = "corrdiff"


class ConfigError(ValidationError):
    """Malformed or unknown entries in a key = value config file."""


def _parse_scalar(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_value(text):
    """Scalar, or a tuple when the value contains commas (``20, 40, 80``).

    An empty value or ``()`` gives an empty tuple.
    """
    text = text.strip()
    if text in ("", "()"):
        return ()
    if "," in text:
        return tuple(_parse_scalar(t) for t in text.strip("()").split(",") if t.strip())
    return _parse_scalar(text)


def read_config(path):
    """Parse a ``key = value`` file (``#`` comments, no sections) into a dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{SECTION}]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return {k: parse_value(v) for k, v in parser[SECTION].items()}


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (tuple, list)):
        return " ".join(_fmt(v) for v in x)
    return str(x)


def write_matrix_csv(R, path):
    R = np.asarray(R, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in R:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path):
    """Read a headerless p x p CSV; empty cells become NaN."""
    rows = []
    with open(path, newline="") as fh:
        for line in csv.reader(fh):
            if not line:
                continue
            try:
                rows.append([float(c) if c.strip() else np.nan for c in line])
            except ValueError as exc:
                raise InvalidCorrelationMatrix("numeric", f"{path}: {exc}") from None
    if not rows or any(len(r) != len(rows) for r in rows):
        raise InvalidCorrelationMatrix("square", f"{path}: not a p x p table")
    return np.array(rows)


def write_rows_csv(rows, path, columns=None):
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config):
    text = json.dumps(_jsonable(config), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def now_iso():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_digest: str
    input_digests: dict
    software_version: str
    seed: int
    started: str
    finished: str = None
    extra: dict = field(default_factory=dict)

    def write(self, path):
        write_json(asdict(self), path)


def verify_digests(manifest):
    """Recompute input digests; returns the list of paths that no longer match."""
    return [p for p, d in manifest.input_digests.items() if file_digest(p) != d]


# sample manifests and labels

def read_sample_manifest(path):
    """Rows ``(subject_id, group, path)``; relative paths resolve against the manifest."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest {path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "group", "path"} - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing column(s) {sorted(missing)}")
        rows = []
        for row in reader:
            group = row["group"].strip().upper()
            if group not in ("H", "D"):
                raise ValidationError(f"{path}: group must be H or D, got {row['group']!r}")
            file = Path(row["path"].strip())
            if not file.is_absolute():
                file = path.parent / file
            rows.append((row["subject_id"].strip(), group, file))
    return rows


def read_labels(path, p):
    """Map 0-based variable index to name from a CSV with columns ``index,name`` (1-based)."""
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"index", "name"} <= set(reader.fieldnames or ()):
            raise ValidationError(f"{path}: labels need columns index,name")
        for row in reader:
            k = int(row["index"]) - 1
            if k in labels:
                raise ValidationError(f"{path}: duplicate label index {k + 1}")
            if not 0 <= k < p:
                raise ValidationError(f"{path}: label index {k + 1} outside 1..{p}")
            labels[k] = row["name"]
    if labels and len(labels) != p:
        raise ValidationError(f"{path}: labels cover {len(labels)} of {p} variables")
    return labels


@dataclass
class Ingested:
    sample: TwoGroupSample
    labels: list
    dropped: list
    subject_ids: tuple
    files: list


def ingest(manifest_path, labels_path=None, T=None):
    """Load and validate all matrices listed in a sample manifest.

    A variable whose column holds a missing value in any subject is dropped
    for everyone before validation. ``labels`` always has one name per kept variable;
    unlabeled data gets 1-based index strings.
    """
    rows = read_sample_manifest(manifest_path)
    mats, groups, ids, files = [], [], [], []
    for sid, group, file in rows:
        if not file.is_file():
            raise ValidationError(f"matrix file {file} (subject {sid}) does not exist")
        mats.append(read_matrix_csv(file))
        groups.append(group)
        ids.append(sid)
        files.append(file)
    if not mats:
        raise EmptyGroup(f"{manifest_path}: no subjects listed")
    p = mats[0].shape[0]
    for file, R in zip(files, mats):
        if R.shape != (p, p):
            raise DimensionMismatch(f"{file}: shape {R.shape}, expected {(p, p)}")

    bad = np.zeros(p, dtype=bool)
    for R in mats:
        bad |= np.isnan(R).any(axis=0)
    keep = np.flatnonzero(~bad)
    dropped = [int(k) for k in np.flatnonzero(bad)]
    if dropped:
        log.warning("dropping %d variable(s) with missing values: %s",
                    len(dropped), [k + 1 for k in dropped])
    mats = [R[np.ix_(keep, keep)] for R in mats]
    for file, R in zip(files, mats):
        try:
            check_correlation(R)
        except InvalidCorrelationMatrix as exc:
            raise InvalidCorrelationMatrix(exc.invariant, f"{file}: {exc.detail or ''}".strip()) from None

    h = [R for R, g in zip(mats, groups) if g == "H"]
    d = [R for R, g in zip(mats, groups) if g == "D"]
    if len(h) < 2 or len(d) < 2:
        raise EmptyGroup(f"need at least 2 subjects per group, got H={len(h)} D={len(d)}")
    sample = TwoGroupSample(np.stack(h), np.stack(d), T, validate=False)

    all_labels = read_labels(labels_path, p) if labels_path else {}
    labels = [all_labels.get(int(k), str(int(k) + 1)) for k in keep]
    return Ingested(sample, labels, dropped, tuple(ids), files)


def write_sample(sample, directory, prefix="subject"):
    """Write every matrix plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for group, stack in (("H", sample.healthy), ("D", sample.diseased)):
        for i, R in enumerate(stack):
            sid = f"{group}{i + 1:03d}"
            name = f"{prefix}_{sid}.csv"
            write_matrix_csv(R, directory / name)
            rows.append(dict(subject_id=sid, group=group, path=name))
    manifest = directory / "manifest.csv"
    write_rows_csv(rows, manifest, ["subject_id", "group", "path"])
    return manifest


def write_group_averages(sample, directory):
    directory = Path(directory)
    write_matrix_csv(group_average(sample.healthy), directory / "average_H.csv")
    write_matrix_csv(group_average(sample.diseased), directory / "average_D.csv")


def resolve_threads(value=None):
    """Thread count from the flag, else CORRDIFF_THREADS, else 1."""
    if value is None:
        env = os.environ.get("CORRDIFF_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"CORRDIFF_THREADS must be an integer, got {env!r}") from None
        else:
            value = 1
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value
