"""Parsers for CAN logs and flow CSVs, plus a labeled synthetic CAN generator.

All parsers emit lists of :class:`TrafficRecord` with non-decreasing
timestamps; that ordering is what the chunking stage relies on, so a
violation is a hard error rather than a warning.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

from .errors import ConfigError, LabelingError, ParseError, SchemaError

SCHEMA_FILE_VERSION = 1
SYNTH_FILE_VERSION = 1

NORMAL_CLASS = 0


@dataclass(frozen=True)
class TrafficRecord:
    """One traffic sample: timestamp, raw feature vector, class label."""

    timestamp: float
    features: tuple[float, ...]
    label: int


@dataclass(frozen=True)
class DatasetSchema:
    """Declared shape of one dataset: feature order, classes, parse rules.

    ``parse_rules`` maps a feature name to ``"hex"`` or ``"dec"``;
    unlisted features default to decimal. ``class_names[0]`` must be
    the normal/benign class.
    """

    name: str
    feature_names: tuple[str, ...]
    class_names: tuple[str, ...]
    parse_rules: Mapping[str, str] = field(default_factory=dict)
    label_map: Mapping[str, str] = field(default_factory=dict)
    timestamp_column: str | None = None

    def __post_init__(self):
        if not self.feature_names:
            raise ConfigError("schema needs at least one feature")
        if len(self.class_names) < 2:
            raise ConfigError("schema needs at least two classes")
        if self.class_names[0] != "Normal":
            raise ConfigError("class_names[0] must be 'Normal'")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise LabelingError(
                f"unknown class {name!r}; expected one of {list(self.class_names)}"
            ) from None


# Car-Hacking layout: CAN ID plus the 8-byte data field.
CAN_FEATURES = ("can_id",) + tuple(f"data{i}" for i in range(8))

CAN_SCHEMA = DatasetSchema(
    name="car-hacking",
    feature_names=CAN_FEATURES,
    class_names=("Normal", "DoS", "Fuzzy", "Gear", "RPM"),
    parse_rules={name: "hex" for name in CAN_FEATURES},
)

# Default 20 flow features. The source papers only cite the feature list,
# so this is a documented stand-in; override via a schema file if your CSV
# uses a different selection.
FLOW_FEATURES = (
    "Destination Port",
    "Flow Duration",
    "Total Fwd Packets",
    "Total Backward Packets",
    "Total Length of Fwd Packets",
    "Total Length of Bwd Packets",
    "Fwd Packet Length Max",
    "Fwd Packet Length Mean",
    "Bwd Packet Length Max",
    "Bwd Packet Length Mean",
    "Flow Bytes/s",
    "Flow Packets/s",
    "Flow IAT Mean",
    "Flow IAT Max",
    "Fwd IAT Mean",
    "Bwd IAT Mean",
    "Fwd PSH Flags",
    "SYN Flag Count",
    "ACK Flag Count",
    "Average Packet Size",
)

# Raw CICIDS2017 labels consolidated into five attack groups. Editable via
# a schema file; Infiltration is grouped with web attacks for lack of a
# better bucket.
FLOW_LABEL_MAP = {
    "benign": "Normal",
    "dos hulk": "DoS",
    "dos goldeneye": "DoS",
    "dos slowloris": "DoS",
    "dos slowhttptest": "DoS",
    "ddos": "DoS",
    "heartbleed": "DoS",
    "portscan": "Port-Scan",
    "ftp patator": "Brute-Force",
    "ssh patator": "Brute-Force",
    "web attack brute force": "Web-Attack",
    "web attack xss": "Web-Attack",
    "web attack sql injection": "Web-Attack",
    "infiltration": "Web-Attack",
    "bot": "Botnet",
}

FLOW_SCHEMA = DatasetSchema(
    name="cicids2017-flow",
    feature_names=FLOW_FEATURES,
    class_names=("Normal", "DoS", "Port-Scan", "Brute-Force", "Web-Attack", "Botnet"),
    label_map=FLOW_LABEL_MAP,
)


def _norm_token(s: str) -> str:
    """Lowercase and collapse punctuation so header/label variants match."""
    out = []
    prev_space = True
    for ch in s.strip().lower():
        if ch.isalnum():
            out.append(ch)
            prev_space = False
        elif not prev_space:
            out.append(" ")
            prev_space = True
    return "".join(out).strip()


def _open_text(source: str | Path | IO[bytes] | IO[str]):
    """Yield a text stream and whether we own (must close) it."""
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def _parse_value(text: str, rule: str, line: int, column: str) -> float:
    text = text.strip()
    if text == "":
        return 0.0
    try:
        if rule == "hex":
            return float(int(text, 16))
        return float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as {rule}", line)


def _check_time_order(ts: float, prev: float, line: int) -> None:
    if ts < prev:
        raise ParseError(
            f"timestamp {ts} decreases from {prev}; records must be time-ordered",
            line,
        )


def parse_can_log(
    source,
    schema: DatasetSchema = CAN_SCHEMA,
    attack_class: str | int | None = None,
) -> list[TrafficRecord]:
    """Parse a Car-Hacking style CAN capture.

    Rows are ``timestamp, can_id(hex), dlc, data bytes..., flag`` where
    flag R marks normal traffic and T marks injected frames. DLC-short
    rows carry fewer data bytes; the missing bytes are zero-filled.
    ``attack_class`` declares which class the file's T rows belong to.
    """
    if isinstance(attack_class, str):
        attack_label = schema.class_index(attack_class)
    elif isinstance(attack_class, int):
        if not 0 <= attack_class < len(schema.class_names):
            raise LabelingError(f"attack class index {attack_class} out of range")
        attack_label = attack_class
    else:
        attack_label = None

    id_rule = schema.parse_rules.get(schema.feature_names[0], "hex")
    byte_rule = schema.parse_rules.get(schema.feature_names[1], "hex")
    n_bytes = schema.n_features - 1

    records: list[TrafficRecord] = []
    stream, own = _open_text(source)
    try:
        prev_ts = -np.inf
        for line_no, row in enumerate(csv.reader(stream), start=1):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row):
                continue
            if line_no == 1 and not _looks_numeric(row[0]):
                continue  # optional header
            if len(row) < 5:
                raise ParseError(f"expected at least 5 fields, got {len(row)}", line_no)
            try:
                ts = float(row[0])
            except ValueError:
                raise ParseError(f"bad timestamp {row[0]!r}", line_no)
            _check_time_order(ts, prev_ts, line_no)
            prev_ts = ts

            can_id = _parse_value(row[1], id_rule, line_no, schema.feature_names[0])
            try:
                dlc = int(row[2])
            except ValueError:
                raise ParseError(f"bad DLC {row[2]!r}", line_no)
            if not 0 <= dlc <= n_bytes:
                raise ParseError(f"DLC {dlc} outside [0, {n_bytes}]", line_no)

            fields = [c for c in row[3:] if c != ""]
            if len(fields) < dlc + 1:
                raise ParseError(
                    f"DLC {dlc} but only {len(fields)} data+flag fields", line_no
                )
            data = [
                _parse_value(fields[i], byte_rule, line_no, schema.feature_names[1 + i])
                for i in range(dlc)
            ]
            data += [0.0] * (n_bytes - dlc)
            flag = fields[dlc].upper()
            if flag == "R":
                label = NORMAL_CLASS
            elif flag == "T":
                if attack_label is None:
                    raise LabelingError(
                        f"line {line_no}: injected frame (flag T) but no attack "
                        "class declared for this file"
                    )
                label = attack_label
            else:
                raise ParseError(f"unknown flag {flag!r} (expected R or T)", line_no)

            records.append(TrafficRecord(ts, (can_id, *data), label))
    finally:
        if own:
            stream.close()
    return records


def _looks_numeric(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def parse_flow_csv(source, schema: DatasetSchema = FLOW_SCHEMA) -> list[TrafficRecord]:
    """Parse a flow-statistics CSV (CICIDS2017 style) with a header row.

    The header must contain every schema feature (matching ignores case
    and punctuation) plus a label column. Label strings are consolidated
    through ``schema.label_map`` into the schema classes.
    """
    stream, own = _open_text(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: no header row")
        col_of = {_norm_token(h): i for i, h in enumerate(header)}

        feature_cols = []
        for name in schema.feature_names:
            key = _norm_token(name)
            if key not in col_of:
                raise SchemaError(f"configured feature {name!r} missing from header")
            feature_cols.append(col_of[key])
        if "label" not in col_of:
            raise SchemaError("label column missing from header")
        label_col = col_of["label"]
        ts_col = None
        if schema.timestamp_column is not None:
            key = _norm_token(schema.timestamp_column)
            if key not in col_of:
                raise SchemaError(
                    f"timestamp column {schema.timestamp_column!r} missing from header"
                )
            ts_col = col_of[key]

        label_map = {_norm_token(k): v for k, v in schema.label_map.items()}
        records: list[TrafficRecord] = []
        prev_ts = -np.inf
        for line_no, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) <= max(max(feature_cols), label_col):
                raise ParseError(f"row has {len(row)} fields, header has more", line_no)
            feats = []
            for name, col in zip(schema.feature_names, feature_cols):
                text = row[col].strip()
                try:
                    v = float(text) if text else 0.0
                except ValueError:
                    raise ParseError(f"column {name!r}: bad value {text!r}", line_no)
                feats.append(0.0 if v != v else v)  # NaN -> 0

            raw_label = row[label_col].strip()
            mapped = label_map.get(_norm_token(raw_label))
            if mapped is None:
                raise LabelingError(
                    f"line {line_no}: unmappable label {raw_label!r}"
                )
            label = schema.class_index(mapped)

            if ts_col is not None:
                try:
                    ts = float(row[ts_col])
                except ValueError:
                    raise ParseError(f"bad timestamp {row[ts_col]!r}", line_no)
                _check_time_order(ts, prev_ts, line_no)
                prev_ts = ts
            else:
                ts = float(len(records))
            records.append(TrafficRecord(ts, tuple(feats), label))
    finally:
        if own:
            stream.close()
    return records


def class_counts(records: Iterable[TrafficRecord], n_classes: int) -> list[int]:
    counts = [0] * n_classes
    for r in records:
        counts[r.label] += 1
    return counts


# ---------------------------------------------------------------------------
# Synthetic CAN traffic
# ---------------------------------------------------------------------------

DEFAULT_ID_POOL = (0x043, 0x0F0, 0x12C, 0x1A0, 0x220, 0x2C0, 0x316, 0x43F, 0x545)
DEFAULT_SPOOF_IDS = {"Gear": 0x43F, "RPM": 0x316}
DOS_ID = 0x000


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic CAN generator.

    ``attack_mix`` maps class names (including Normal) to proportions that
    must sum to 1. Attack records are laid down in bursts of ``burst_len``
    records aligned to ``align``-record boundaries, mimicking sustained
    injection events rather than isolated frames.
    """

    n_records: int
    attack_mix: Mapping[str, float]
    rng_seed: int
    id_pool: tuple[int, ...] = DEFAULT_ID_POOL
    spoof_ids: Mapping[str, int] = field(
        default_factory=lambda: dict(DEFAULT_SPOOF_IDS)
    )
    burst_len: int = 108
    align: int = 27
    dt: float = 0.0005

    def __post_init__(self):
        if self.n_records <= 0:
            raise ConfigError("n_records must be positive")
        if self.burst_len <= 0 or self.align <= 0:
            raise ConfigError("burst_len and align must be positive")
        total = 0.0
        for name, p in self.attack_mix.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"proportion for {name!r} outside [0, 1]: {p}")
            total += p
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"attack_mix proportions sum to {total}, expected 1")
        if not self.id_pool:
            raise ConfigError("id_pool must not be empty")


def _exact_counts(n: int, proportions: list[float]) -> list[int]:
    """Largest-remainder apportionment: counts sum to n, each within 1 of n*p."""
    raw = [n * p for p in proportions]
    counts = [int(x) for x in raw]
    short = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _base_payload(can_id: int) -> np.ndarray:
    """Stable per-ID payload template (independent of the stream RNG)."""
    g = np.random.Generator(np.random.PCG64(0xC0FFEE ^ can_id))
    return g.integers(0, 256, size=8, dtype=np.int64)


def generate_synthetic_can(
    config: SynthConfig, schema: DatasetSchema = CAN_SCHEMA
) -> list[TrafficRecord]:
    """Generate labeled CAN traffic exhibiting the four attack signatures.

    DoS frames are highest-priority (ID 0) with all-zero payloads; fuzzy
    frames have uniformly random IDs and payloads; spoofing frames repeat
    a fixed payload template under a legitimate ID; normal frames cycle
    the ID pool with low-variance payloads. Pure function of ``config``.
    """
    classes = list(schema.class_names)
    mix = [float(config.attack_mix.get(name, 0.0)) for name in classes]
    for name in config.attack_mix:
        if name not in classes:
            raise ConfigError(f"attack_mix class {name!r} not in schema classes")
    quotas = _exact_counts(config.n_records, mix)

    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    align = config.align
    burst_chunks = max(1, config.burst_len // align)

    # Whole-chunk runs per class; leftovers go to the tail of the stream.
    runs: list[tuple[int, int]] = []  # (label, n_chunks)
    leftovers: list[tuple[int, int]] = []  # (label, n_records)
    normal_chunks = quotas[NORMAL_CLASS] // align
    if quotas[NORMAL_CLASS] % align:
        leftovers.append((NORMAL_CLASS, quotas[NORMAL_CLASS] % align))
    attack_runs: list[tuple[int, int]] = []
    for label in range(1, len(classes)):
        full = quotas[label] // align
        rem = quotas[label] % align
        while full > 0:
            take = min(burst_chunks, full)
            attack_runs.append((label, take))
            full -= take
        if rem:
            leftovers.append((label, rem))
    rng.shuffle(attack_runs)  # burst order varies with the seed

    # Weave normal runs between attack bursts.
    n_gaps = len(attack_runs) + 1
    gap_sizes = [normal_chunks // n_gaps] * n_gaps
    for i in range(normal_chunks % n_gaps):
        gap_sizes[i] += 1
    for i, (label, n) in enumerate(attack_runs):
        if gap_sizes[i]:
            runs.append((NORMAL_CLASS, gap_sizes[i]))
        runs.append((label, n))
    if gap_sizes[-1]:
        runs.append((NORMAL_CLASS, gap_sizes[-1]))

    labels: list[int] = []
    for label, n_chunks in runs:
        labels.extend([label] * (n_chunks * align))
    for label, n in leftovers:
        labels.extend([label] * n)
    assert len(labels) == config.n_records

    spoof_ids = {schema.class_index(k): v for k, v in config.spoof_ids.items()}
    spoof_payloads = {
        label: _base_payload(cid ^ 0x5A5A) for label, cid in spoof_ids.items()
    }
    id_pool = np.asarray(config.id_pool, dtype=np.int64)
    pool_bases = np.stack([_base_payload(i) for i in config.id_pool])

    records: list[TrafficRecord] = []
    cursor = int(rng.integers(0, len(id_pool)))  # normal ECUs broadcast cyclically
    for i, label in enumerate(labels):
        ts = i * config.dt
        name = classes[label]
        if label == NORMAL_CLASS:
            if rng.random() < 0.04:  # occasional missed slot shifts the phase
                cursor += 1
            k = cursor % len(id_pool)
            cursor += 1
            payload = pool_bases[k].copy()
            jitter_at = rng.integers(0, 8, size=2)
            payload[jitter_at] = np.clip(
                payload[jitter_at] + rng.integers(-2, 3, size=2), 0, 255
            )
            can_id = int(id_pool[k])
        elif name == "DoS":
            can_id = DOS_ID
            payload = np.zeros(8, dtype=np.int64)
        elif name == "Fuzzy":
            can_id = int(rng.integers(0, 0x800))
            payload = rng.integers(0, 256, size=8, dtype=np.int64)
        else:
            if label not in spoof_ids:
                raise ConfigError(f"no spoof ID configured for class {name!r}")
            can_id = spoof_ids[label]
            payload = spoof_payloads[label]
        features = (float(can_id), *(float(b) for b in payload))
        records.append(TrafficRecord(ts, features, label))
    return records


# ---------------------------------------------------------------------------
# Labeled CAN CSV round trip (synthetic output format)
# ---------------------------------------------------------------------------

LABELED_CAN_HEADER = [
    "timestamp", "can_id", "dlc",
    "data0", "data1", "data2", "data3", "data4", "data5", "data6", "data7",
    "flag", "class",
]


def write_labeled_can_csv(records: list[TrafficRecord], schema: DatasetSchema, path):
    """Write records in Car-Hacking column order plus a class-name column."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABELED_CAN_HEADER)
        for r in records:
            can_id = int(r.features[0])
            data = [int(b) for b in r.features[1:]]
            flag = "R" if r.label == NORMAL_CLASS else "T"
            writer.writerow(
                [f"{r.timestamp:.6f}", f"{can_id:04x}", len(data)]
                + [f"{b:02x}" for b in data]
                + [flag, schema.class_names[r.label]]
            )


def parse_labeled_can_csv(source, schema: DatasetSchema = CAN_SCHEMA) -> list[TrafficRecord]:
    """Read back the labeled CAN CSV produced by :func:`write_labeled_can_csv`."""
    stream, own = _open_text(source)
    try:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None:
            raise SchemaError("empty file: no header row")
        records: list[TrafficRecord] = []
        prev_ts = -np.inf
        for line_no, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(LABELED_CAN_HEADER):
                raise ParseError(
                    f"expected {len(LABELED_CAN_HEADER)} fields, got {len(row)}",
                    line_no,
                )
            ts = float(row[0])
            _check_time_order(ts, prev_ts, line_no)
            prev_ts = ts
            can_id = float(int(row[1], 16))
            data = [float(int(c, 16)) for c in row[3:11]]
            label = schema.class_index(row[12].strip())
            records.append(TrafficRecord(ts, (can_id, *data), label))
        return records
    finally:
        if own:
            stream.close()


# ---------------------------------------------------------------------------
# Schema / synth config files (JSON with a mandatory version field)
# ---------------------------------------------------------------------------

def load_schema(path) -> DatasetSchema:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("version") != SCHEMA_FILE_VERSION:
        raise ConfigError(
            f"schema file version {raw.get('version')!r} != {SCHEMA_FILE_VERSION}"
        )
    try:
        return DatasetSchema(
            name=raw["name"],
            feature_names=tuple(raw["feature_names"]),
            class_names=tuple(raw["class_names"]),
            parse_rules=dict(raw.get("parse_rules", {})),
            label_map=dict(raw.get("label_map", {})),
            timestamp_column=raw.get("timestamp_column"),
        )
    except KeyError as exc:
        raise ConfigError(f"schema file missing key {exc}") from None


def save_schema(schema: DatasetSchema, path) -> None:
    doc = {
        "version": SCHEMA_FILE_VERSION,
        "name": schema.name,
        "feature_names": list(schema.feature_names),
        "class_names": list(schema.class_names),
        "parse_rules": dict(schema.parse_rules),
        "label_map": dict(schema.label_map),
        "timestamp_column": schema.timestamp_column,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_synth_config(path) -> SynthConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("version") != SYNTH_FILE_VERSION:
        raise ConfigError(
            f"synth config version {raw.get('version')!r} != {SYNTH_FILE_VERSION}"
        )
    try:
        return SynthConfig(
            n_records=int(raw["n_records"]),
            attack_mix={k: float(v) for k, v in raw["attack_mix"].items()},
            rng_seed=int(raw["rng_seed"]),
            id_pool=tuple(int(x, 0) if isinstance(x, str) else int(x)
                          for x in raw.get("id_pool", DEFAULT_ID_POOL)),
            spoof_ids={k: (int(v, 0) if isinstance(v, str) else int(v))
                       for k, v in raw.get("spoof_ids", DEFAULT_SPOOF_IDS).items()},
            burst_len=int(raw.get("burst_len", 108)),
            align=int(raw.get("align", 27)),
            dt=float(raw.get("dt", 0.0005)),
        )
    except KeyError as exc:
        raise ConfigError(f"synth config missing key {exc}") from None
