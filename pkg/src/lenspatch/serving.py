"""Serving pre-crafted perturbations: the record database, route simulation and ASR harnesses.

Evaluation always passes perturbations through the oracle channel
(:func:`lenspatch.optics.oracle_cdtf`), never the surrogate, so reported
attack success measures transfer across the modeled optics.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from filelock import FileLock

from .attack import ALL, PerturbationRecord
from .errors import DomainError, RecordNotFound
from .optics import oracle_cdtf
from .perturb import render
from .utils import derive_seed, read_json, write_json
from .victim import NUM_CLASSES

log = logging.getLogger(__name__)


# -- perturbation database ----------------------------------------------------------

def _key(class_id):
    if class_id == ALL:
        return ALL
    if isinstance(class_id, str) and class_id.isdigit():
        class_id = int(class_id)
    if not isinstance(class_id, (int, np.integer)) or not 0 <= class_id < NUM_CLASSES:
        raise DomainError(f"record key must be a class id or {ALL!r}, got {class_id!r}")
    return f"{int(class_id):02d}"


class PerturbDB:
    """Directory of JSON records, one per target class, plus a manifest.

    Writers serialize on a lock file; reads never modify the directory.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.directory / ".lock"))
        if not self.manifest_path.exists():
            with self.lock:
                if not self.manifest_path.exists():
                    write_json(self.manifest_path, {"records": {}})

    @property
    def manifest_path(self):
        return self.directory / "manifest.json"

    def manifest(self):
        return read_json(self.manifest_path)

    def keys(self):
        return sorted(self.manifest()["records"])

    def __len__(self):
        return len(self.manifest()["records"])

    def __contains__(self, class_id):
        return _key(class_id) in self.manifest()["records"]

    def put(self, record):
        key = record.key
        name = f"record_{key}.json"
        with self.lock:
            write_json(self.directory / name, record.to_dict())
            manifest = self.manifest()
            manifest["records"][key] = {"file": name, "config_hash": record.config_hash,
                                        "record_id": record.record_id, "mode": record.mode}
            write_json(self.manifest_path, manifest)

    def get(self, class_id):
        key = _key(class_id)
        entry = self.manifest()["records"].get(key)
        if entry is None:
            raise RecordNotFound(f"no perturbation stored for class {key}")
        return PerturbationRecord.from_dict(read_json(self.directory / entry["file"]))


def db_put(db, record):
    db.put(record)


def db_get(db, class_id):
    return db.get(class_id)


# -- sign maps and routes -------------------------------------------------------------

@dataclass(frozen=True)
class SignMap:
    """Road-side signs as ``(position id, class id)`` entries."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((int(p), int(c)) for p, c in self.entries)
        if not entries:
            raise DomainError("sign map is empty")
        if any(not 0 <= c < NUM_CLASSES for _, c in entries):
            raise DomainError("sign map holds an unknown class id")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def class_of(self, index):
        return self.entries[index][1]

    @classmethod
    def generate(cls, n_positions, seed):
        """Random map in which every class appears at least once (when ``n_positions >= 17``)."""
        rng = np.random.default_rng(seed)
        classes = np.concatenate([np.arange(NUM_CLASSES), rng.integers(0, NUM_CLASSES, max(n_positions - NUM_CLASSES, 0))])
        classes = rng.permutation(classes)[:n_positions]
        return cls(tuple(enumerate(classes.tolist())))

    def to_dict(self):
        return {"entries": [list(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(e) for e in d["entries"]))


def sample_routes(sign_map, n_routes, route_len, seed):
    """``n_routes`` routes of ``route_len`` map indices drawn uniformly with replacement."""
    if route_len < 1 or n_routes < 0:
        raise DomainError("route_len must be >= 1 and n_routes >= 0")
    rng = np.random.default_rng(seed)
    return [rng.integers(0, len(sign_map), route_len).tolist() for _ in range(n_routes)]


# -- frame synthesis ------------------------------------------------------------------

def perturbation_appearance(record, world, seed):
    """Oracle-channel appearance of a record (zeros when ``record`` is None)."""
    if record is None:
        return np.zeros(tuple(world.frame_shape) + (3,))
    return oracle_cdtf(render(record.dot_params, world.frame_shape), world.optics, seed)


def attack_frames(record, world, n, seed, lux=None, nd_filter=None, class_ids=None, i_p=None):
    """Matched adversarial and benign frames of the record's target class.

    Returns ``(adversarial, benign, labels)``. Both stacks share scenes,
    environment samples and sensor noise. ALL records (and ``record=None``)
    draw classes uniformly unless ``class_ids`` is given.
    """
    rng = np.random.default_rng(seed)
    if class_ids is None:
        target = None if record is None else record.target_class
        class_ids = rng.integers(0, NUM_CLASSES, n) if target in (None, ALL) else np.full(n, int(target))
    class_ids = np.asarray(class_ids)
    envs = world.sample_envs(len(class_ids), rng)
    if lux is not None or nd_filter is not None:
        envs = [replace(e, illuminance=float(e.illuminance if lux is None else lux),
                        nd_filter=bool(e.nd_filter if nd_filter is None else nd_filter)) for e in envs]
    scenes, _ = world.scenes(class_ids, envs)
    if i_p is None:
        i_p = perturbation_appearance(record, world, int(rng.integers(0, 2 ** 62)))
    noise_seed = int(rng.integers(0, 2 ** 62))
    adv = world.frames(class_ids, envs, i_p, seed=noise_seed, scenes=scenes)
    benign = world.frames(class_ids, envs, None, seed=noise_seed, scenes=scenes)
    return adv, benign, class_ids


def _record_id(record):
    return "none" if record is None else record.record_id


def eval_asr(record, victim, world, lux_levels, frames_per_level=100, seed=0, nd_filter=False):
    """Attack success rate per pinned illuminance level.

    Returns rows ``{lux, asr, n_frames, record_id}``. ``record=None`` evaluates
    the unperturbed pipeline.
    """
    rows = []
    for i, lux in enumerate(lux_levels):
        adv, _, labels = attack_frames(record, world, frames_per_level, derive_seed(seed, f"lux{i}"), lux=lux,
                                       nd_filter=nd_filter)
        rows.append({"lux": float(lux), "asr": float(victim.success(adv, labels).mean()),
                     "n_frames": int(len(labels)), "record_id": _record_id(record)})
    return rows


def transfer_eval(records, victims, world, lux=120.0, frames=100, seed=0):
    """``M[i][j]``: ASR of record ``i`` against victim ``j`` at one illuminance."""
    return [[eval_asr(r, v, world, [lux], frames, seed)[0]["asr"] for v in victims] for r in records]


# -- route simulation ----------------------------------------------------------------------

@dataclass
class RouteResult:
    mode: str
    per_sign: list
    asr: float
    n_frames: int
    fallbacks: int


def simulate_route(route, sign_map, mode, db, victim, world, frames_per_sign=20, seed=0, lookup_error=0.0):
    """Drive past every sign on ``route`` and measure frame-level attack success.

    ``dynamic`` looks up the record for the sign's class (the map lookup
    stands in for positioning plus a sign map; with probability
    ``lookup_error`` it returns a random wrong class). ``static`` always
    shows the ALL record. A missing record is logged and the sign is served
    unperturbed; its frames count as failures.
    """
    if mode not in ("dynamic", "static"):
        raise DomainError(f"mode must be 'dynamic' or 'static', got {mode!r}")
    rng = np.random.default_rng(seed)
    cache = {}
    per_sign, successes, total, fallbacks = [], 0, 0, 0
    for pos, index in enumerate(route):
        true_class = sign_map.class_of(index)
        looked_up = true_class
        if lookup_error > 0 and rng.random() < lookup_error:
            looked_up = int((true_class + rng.integers(1, NUM_CLASSES)) % NUM_CLASSES)
        key = looked_up if mode == "dynamic" else ALL
        if key not in cache:
            try:
                cache[key] = db_get(db, key)
            except RecordNotFound:
                cache[key] = None
        record = cache[key]
        frame_seed = int(rng.integers(0, 2 ** 62))
        if record is None:
            fallbacks += 1
            log.warning("no perturbation for class %s at route position %d; serving none", key, pos)
            hits = 0
        else:
            ip_key = ("ip", key)
            if ip_key not in cache:
                cache[ip_key] = perturbation_appearance(record, world, derive_seed(seed, f"ip{key}"))
            adv, _, labels = attack_frames(record, world, frames_per_sign, frame_seed,
                                           class_ids=np.full(frames_per_sign, true_class), i_p=cache[ip_key])
            hits = int(victim.success(adv, labels).sum())
        per_sign.append({"position": pos, "map_index": int(index), "class_id": int(true_class),
                         "record": None if record is None else record.key, "successes": hits,
                         "frames": frames_per_sign})
        successes += hits
        total += frames_per_sign
    return RouteResult(mode, per_sign, successes / total if total else 0.0, total, fallbacks)


# -- CSV output -------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def csv_text(rows, columns, provenance):
    """Deterministic CSV with a leading ``# key=value`` provenance comment."""
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns, provenance):
    Path(path).write_text(csv_text(rows, columns, provenance))


def read_csv(path):
    """``(provenance dict, rows as dicts of strings)``."""
    lines = Path(path).read_text().splitlines()
    prov = {}
    if lines and lines[0].startswith("#"):
        prov = dict(item.split("=", 1) for item in lines[0][1:].split())
        lines = lines[1:]
    return prov, list(csv.DictReader(lines))


ASR_COLUMNS = ("lux", "asr", "n_frames", "record_id")
