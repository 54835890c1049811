"""Dataset container, synthetic multi-view generator, and protocol splits.

A dataset on disk is a directory with two files:

* ``manifest.json``  - name, joint topology, class names, per-sample records
  (id, label, subject, per-view blob offset/length/crc32), and the default
  train/test split assignments for the cross-subject and cross-view
  protocols.
* ``data.stgd``      - binary blob: magic ``STGD``, u32 format version, then
  raw little-endian float64 (T, M, 3) payloads at the offsets the manifest
  declares.  Every record is checksummed, so loads are validated and
  round-trips are bit-exact.

The synthetic generator produces class-separable multi-view data with the
real-world nuisances multi-camera capture introduces: per-view reference
rotations and translations, per-view joint occlusions, sensor noise, and
small temporal misalignment between views.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import resample_array, rotation_matrix
from .errors import ContractViolation, DataError
from .graph import SkeletonTopology, ntu25_topology
from .rng import SplitMix64

STGD_MAGIC = b"STGD"
STGD_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "data.stgd"


@dataclass
class ViewRecord:
    offset: int
    length: int
    crc32: int


@dataclass
class SampleRecord:
    sample_id: str
    label: int
    subject: int
    views: list[ViewRecord]


@dataclass
class DatasetManifest:
    name: str
    topology: SkeletonTopology
    num_views: int
    num_frames: int
    class_names: list[str]
    samples: list[SampleRecord]
    splits: dict = field(default_factory=dict)

    @property
    def num_joints(self) -> int:
        return self.topology.num_joints

    def sample_by_id(self, sample_id: str) -> SampleRecord:
        for rec in self.samples:
            if rec.sample_id == sample_id:
                return rec
        raise DataError(f"unknown sample id {sample_id!r}")


class SequenceStore:
    """In-memory (sample, view) -> coordinate array map with access counters.

    Arrays are handed out read-only; `access_counts` lets evaluation code
    audit which sequences a training phase actually touched.
    """

    def __init__(self):
        self._data: dict[tuple[str, int], np.ndarray] = {}
        self.access_counts: dict[tuple[str, int], int] = {}

    def put(self, sample_id: str, view: int, coords: np.ndarray) -> None:
        arr = np.asarray(coords, dtype=np.float64)
        arr.setflags(write=False)
        self._data[(sample_id, view)] = arr
        self.access_counts.setdefault((sample_id, view), 0)

    def get(self, sample_id: str, view: int) -> np.ndarray:
        key = (sample_id, view)
        if key not in self._data:
            raise DataError(f"no sequence stored for sample {sample_id!r} view {view}")
        self.access_counts[key] += 1
        return self._data[key]

    def keys(self):
        return self._data.keys()

    def snapshot_counts(self) -> dict[tuple[str, int], int]:
        return dict(self.access_counts)


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def _topology_to_json(topology: SkeletonTopology) -> dict:
    return {
        "num_joints": topology.num_joints,
        "edges": [list(e) for e in topology.edges],
        "center_joint": topology.center_joint,
        "body_part_groups": [list(g) for g in topology.body_part_groups],
    }


def _topology_from_json(obj: dict) -> SkeletonTopology:
    return SkeletonTopology(
        num_joints=int(obj["num_joints"]),
        edges=tuple((int(i), int(j)) for i, j in obj["edges"]),
        center_joint=int(obj["center_joint"]),
        body_part_groups=tuple(tuple(int(j) for j in g)
                               for g in obj.get("body_part_groups", [])),
    )


def save_dataset(manifest: DatasetManifest, store: SequenceStore, path) -> None:
    """Write manifest.json and data.stgd; fills in view records."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob_path = out_dir / BLOB_NAME
    with open(blob_path, "wb") as fh:
        fh.write(STGD_MAGIC)
        fh.write(STGD_VERSION.to_bytes(4, "little"))
        offset = 8
        for rec in manifest.samples:
            views = []
            for view in range(manifest.num_views):
                coords = store.get(rec.sample_id, view)
                payload = np.ascontiguousarray(coords, dtype="<f8").tobytes()
                fh.write(payload)
                views.append(ViewRecord(offset=offset, length=len(payload),
                                        crc32=zlib.crc32(payload)))
                offset += len(payload)
            rec.views = views

    doc = {
        "format": "stgd",
        "version": STGD_VERSION,
        "name": manifest.name,
        "num_views": manifest.num_views,
        "num_frames": manifest.num_frames,
        "topology": _topology_to_json(manifest.topology),
        "class_names": manifest.class_names,
        "splits": manifest.splits,
        "samples": [
            {
                "id": rec.sample_id,
                "label": rec.label,
                "subject": rec.subject,
                "views": [
                    {"offset": v.offset, "length": v.length, "crc32": v.crc32}
                    for v in rec.views
                ],
            }
            for rec in manifest.samples
        ],
    }
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> tuple[DatasetManifest, SequenceStore]:
    """Load and validate a dataset directory."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    blob_path = root / BLOB_NAME
    if not manifest_path.exists():
        raise DataError(f"missing {manifest_path}")
    if not blob_path.exists():
        raise DataError(f"missing {blob_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if doc.get("format") != "stgd" or int(doc.get("version", -1)) != STGD_VERSION:
        raise DataError(f"{manifest_path}: unsupported manifest format/version")

    blob = blob_path.read_bytes()
    if blob[:4] != STGD_MAGIC:
        raise DataError(f"{blob_path}: bad magic (corrupt header)")
    if int.from_bytes(blob[4:8], "little") != STGD_VERSION:
        raise DataError(f"{blob_path}: unsupported blob version")

    topology = _topology_from_json(doc["topology"])
    num_views = int(doc["num_views"])
    num_frames = int(doc["num_frames"])
    class_names = list(doc["class_names"])
    expected_len = num_frames * topology.num_joints * 3 * 8

    manifest = DatasetManifest(
        name=doc["name"], topology=topology, num_views=num_views,
        num_frames=num_frames, class_names=class_names, samples=[],
        splits=doc.get("splits", {}),
    )
    store = SequenceStore()
    seen_ids = set()
    for sample in doc["samples"]:
        sid = sample["id"]
        if sid in seen_ids:
            raise DataError(f"duplicate sample id {sid!r}")
        seen_ids.add(sid)
        label = int(sample["label"])
        if not 0 <= label < len(class_names):
            raise DataError(f"sample {sid!r}: label {label} outside class range")
        views_doc = sample["views"]
        if len(views_doc) != num_views:
            raise DataError(
                f"sample {sid!r}: expected {num_views} views, found {len(views_doc)}")
        views = []
        for view, vdoc in enumerate(views_doc):
            offset, length = int(vdoc["offset"]), int(vdoc["length"])
            if length != expected_len:
                raise DataError(
                    f"sample {sid!r} view {view}: payload length {length} != "
                    f"expected {expected_len}")
            payload = blob[offset:offset + length]
            if len(payload) != length:
                raise DataError(f"sample {sid!r} view {view}: truncated payload")
            if zlib.crc32(payload) != int(vdoc["crc32"]):
                raise DataError(f"sample {sid!r} view {view}: checksum mismatch")
            coords = np.frombuffer(payload, dtype="<f8").astype(np.float64)
            coords = coords.reshape(num_frames, topology.num_joints, 3)
            if not np.all(np.isfinite(coords)):
                raise DataError(f"sample {sid!r} view {view}: non-finite coordinates")
            store.put(sid, view, coords)
            views.append(ViewRecord(offset=offset, length=length,
                                    crc32=int(vdoc["crc32"])))
        manifest.samples.append(SampleRecord(sample_id=sid, label=label,
                                             subject=int(sample["subject"]),
                                             views=views))
    _validate_splits(manifest)
    return manifest, store


def _validate_splits(manifest: DatasetManifest) -> None:
    cs = manifest.splits.get("cross_subject")
    if cs:
        train, test = set(cs["train_subjects"]), set(cs["test_subjects"])
        if train & test:
            raise DataError("cross-subject split subjects overlap")
    cv = manifest.splits.get("cross_view")
    if cv:
        if int(cv["test_view"]) in set(int(v) for v in cv["train_views"]):
            raise DataError("cross-view split: test view also listed for training")


def resample_to_length(coords: np.ndarray, target_len: int = 100) -> np.ndarray:
    """Linear temporal resampling of a (T, M, 3) array to target_len frames."""
    if coords.shape[0] == target_len:
        return coords
    return resample_array(coords, target_len)


# ---------------------------------------------------------------------------
# protocol splits
# ---------------------------------------------------------------------------

@dataclass
class Split:
    """Train/test assignment over (sample_id, view) pairs."""

    protocol: str
    train_pairs: list[tuple[str, int]]
    test_pairs: list[tuple[str, int]]
    train_views_per_sample: dict[str, list[int]]


def split_dataset(manifest: DatasetManifest, protocol: str, params: dict | None = None) -> Split:
    """Resolve a protocol into concrete train/test (sample, view) pairs."""
    params = dict(params or {})
    if protocol == "cross_subject":
        declared = manifest.splits.get("cross_subject", {})
        train_subjects = set(params.get("train_subjects",
                                        declared.get("train_subjects", [])))
        test_subjects = set(params.get("test_subjects",
                                       declared.get("test_subjects", [])))
        if not train_subjects or not test_subjects:
            raise ContractViolation("cross-subject split needs train and test subjects")
        if train_subjects & test_subjects:
            raise ContractViolation("cross-subject split subjects overlap")
        train, test, train_views = [], [], {}
        for rec in manifest.samples:
            pairs = [(rec.sample_id, v) for v in range(manifest.num_views)]
            if rec.subject in train_subjects:
                train.extend(pairs)
                train_views[rec.sample_id] = list(range(manifest.num_views))
            elif rec.subject in test_subjects:
                test.extend(pairs)
        if not train or not test:
            raise ContractViolation("cross-subject split produced an empty side")
        return Split("cross_subject", train, test, train_views)

    if protocol == "cross_view":
        declared = manifest.splits.get("cross_view", {})
        test_view = int(params.get("test_view", declared.get("test_view", 0)))
        default_train = [v for v in range(manifest.num_views) if v != test_view]
        train_views = [int(v) for v in params.get("train_views",
                                                  declared.get("train_views", default_train))]
        if test_view in train_views:
            raise ContractViolation("cross-view split: test view is also a training view")
        if not train_views:
            raise ContractViolation("cross-view split has no training views")
        if not 0 <= test_view < manifest.num_views:
            raise ContractViolation(f"test view {test_view} out of range")
        train = [(rec.sample_id, v) for rec in manifest.samples for v in train_views]
        test = [(rec.sample_id, test_view) for rec in manifest.samples]
        per_sample = {rec.sample_id: list(train_views) for rec in manifest.samples}
        return Split("cross_view", train, test, per_sample)

    raise ContractViolation(f"unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    samples_per_class: int = 25
    num_subjects: int = 10
    num_frames: int = 100
    num_views: int = 2
    base_yaw_deg: float = 180.0
    view_yaw_deg: tuple[tuple[float, float], ...] | None = None
    view_tilt_deg: float = 5.0
    occlusion_prob: float = 0.15
    noise_sigma: float = 0.05
    temporal_offset_range: int = 8
    translation_range: float = 0.2
    amplitude_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 2:
            raise ContractViolation("need at least 2 frames")
        if min(self.num_classes, self.samples_per_class, self.num_subjects,
               self.num_views) < 1:
            raise ContractViolation("counts must be positive")
        if (self.occlusion_prob < 0 or self.noise_sigma < 0
                or self.temporal_offset_range < 0 or self.translation_range < 0
                or self.amplitude_jitter < 0 or self.view_tilt_deg < 0
                or self.base_yaw_deg < 0):
            raise ContractViolation("ranges must be nonnegative")
        if self.view_yaw_deg is not None and len(self.view_yaw_deg) != self.num_views:
            raise ContractViolation("need one yaw range per view")

    def yaw_ranges(self) -> tuple[tuple[float, float], ...]:
        if self.view_yaw_deg is not None:
            return self.view_yaw_deg
        # cameras spaced 40 degrees apart, each with +/-15 degrees of wobble
        return tuple((40.0 * v - 15.0, 40.0 * v + 15.0) for v in range(self.num_views))


def _rest_pose() -> np.ndarray:
    """Canonical standing pose for the 25-joint topology (y is up)."""
    pose = np.zeros((25, 3))
    pose[0] = (0.00, 0.00, 0.00)    # spine base
    pose[1] = (0.00, 0.25, 0.00)    # spine mid
    pose[20] = (0.00, 0.50, 0.00)   # spine shoulder
    pose[2] = (0.00, 0.62, 0.00)    # neck
    pose[3] = (0.00, 0.78, 0.00)    # head
    for side, sign in ((4, 1.0), (8, -1.0)):  # arms: left 4..7, right 8..11
        pose[side + 0] = (0.22 * sign, 0.50, 0.00)   # shoulder
        pose[side + 1] = (0.28 * sign, 0.24, 0.02)   # elbow
        pose[side + 2] = (0.30 * sign, 0.00, 0.04)   # wrist
        pose[side + 3] = (0.31 * sign, -0.08, 0.05)  # hand
    pose[21] = (0.31, -0.16, 0.06)   # left hand tip
    pose[22] = (0.27, -0.12, 0.09)   # left thumb
    pose[23] = (-0.31, -0.16, 0.06)  # right hand tip
    pose[24] = (-0.27, -0.12, 0.09)  # right thumb
    for side, sign in ((12, 1.0), (16, -1.0)):  # legs: left 12..15, right 16..19
        pose[side + 0] = (0.10 * sign, -0.08, 0.00)  # hip
        pose[side + 1] = (0.12 * sign, -0.52, 0.02)  # knee
        pose[side + 2] = (0.13 * sign, -0.96, 0.02)  # ankle
        pose[side + 3] = (0.14 * sign, -1.02, 0.12)  # foot
    return pose


@dataclass
class _MotionProgram:
    active_joints: np.ndarray  # (K,)
    amplitudes: np.ndarray     # (K, 3)
    frequencies: np.ndarray    # (K,)
    phases: np.ndarray         # (K,)

    def evaluate(self, times: np.ndarray, rest: np.ndarray,
                 amp_scale: float = 1.0, phase_shift: float = 0.0) -> np.ndarray:
        """Joint trajectories at fractional times (in units of one period)."""
        t = times[:, None]
        waves = np.sin(2.0 * np.pi * self.frequencies[None, :] * t
                       + self.phases[None, :] + phase_shift)
        coords = np.broadcast_to(rest, (len(times),) + rest.shape).copy()
        contrib = waves[:, :, None] * (amp_scale * self.amplitudes)[None, :, :]
        np.add.at(coords, (slice(None), self.active_joints), contrib)
        return coords


def _class_program(rng: SplitMix64, num_joints: int) -> _MotionProgram:
    count = 8 + rng.below(5)  # 8..12 moving joints
    joints = rng.choice_without_replacement(num_joints, count)
    amplitudes = rng.uniform_range(0.25, 0.7, (count, 3)) * np.where(
        rng.uniform((count, 3)) < 0.5, -1.0, 1.0)
    frequencies = np.array([1.0 + rng.below(4) for _ in range(count)])
    phases = rng.uniform_range(0.0, 2.0 * np.pi, (count,))
    return _MotionProgram(active_joints=joints, amplitudes=amplitudes,
                          frequencies=frequencies, phases=phases)


def synth_generate(config: SynthConfig) -> tuple[DatasetManifest, SequenceStore]:
    """Deterministic multi-view synthetic dataset from a seeded config."""
    topology = ntu25_topology()
    rest = _rest_pose()
    master = SplitMix64(config.seed)
    programs = [_class_program(master.derive("class", c), topology.num_joints)
                for c in range(config.num_classes)]
    subject_rng = [master.derive("subject", s) for s in range(config.num_subjects)]
    subject_amp = [1.0 + config.amplitude_jitter * (r.uniform() * 2.0 - 1.0)
                   for r in subject_rng]
    subject_limb = [0.9 + 0.2 * r.uniform() for r in subject_rng]

    t_frames = config.num_frames
    yaw_ranges = config.yaw_ranges()
    manifest = DatasetManifest(
        name=f"synth-{config.num_classes}x{config.samples_per_class}",
        topology=topology, num_views=config.num_views, num_frames=t_frames,
        class_names=[f"action_{c}" for c in range(config.num_classes)],
        samples=[],
    )
    store = SequenceStore()

    gidx = 0
    for label in range(config.num_classes):
        for _ in range(config.samples_per_class):
            subject = gidx % config.num_subjects
            sid = f"sample{gidx:04d}"
            srng = master.derive("sample", gidx)
            phase_shift = srng.uniform_range(0.0, 0.6)
            amp = subject_amp[subject] * (1.0 + 0.08 * (srng.uniform() * 2.0 - 1.0))
            rest_s = rest * subject_limb[subject]
            # the performer faces a random direction; all cameras share it
            base_yaw = srng.uniform_range(-config.base_yaw_deg, config.base_yaw_deg)
            for view in range(config.num_views):
                vrng = srng.derive("view", view)
                offset = (vrng.below(2 * config.temporal_offset_range + 1)
                          - config.temporal_offset_range
                          if config.temporal_offset_range > 0 else 0)
                times = (np.arange(t_frames, dtype=np.float64) + offset) / t_frames
                coords = programs[label].evaluate(times, rest_s, amp, phase_shift)

                lo, hi = yaw_ranges[view]
                yaw = np.deg2rad(base_yaw + vrng.uniform_range(lo, hi))
                tilt = np.deg2rad(config.view_tilt_deg)
                pitch = vrng.uniform_range(-tilt, tilt)
                roll = vrng.uniform_range(-tilt, tilt)
                coords = coords @ rotation_matrix(pitch, yaw, roll)
                coords = coords + vrng.uniform_range(
                    -config.translation_range, config.translation_range, (3,))
                if config.noise_sigma > 0:
                    coords = coords + vrng.normal(coords.shape,
                                                  sigma=config.noise_sigma)
                occluded = vrng.uniform((topology.num_joints,)) < config.occlusion_prob
                coords[:, occluded, :] = 0.0
                store.put(sid, view, coords)
            manifest.samples.append(SampleRecord(sample_id=sid, label=label,
                                                 subject=subject, views=[]))
            gidx += 1

    subjects = sorted({rec.subject for rec in manifest.samples})
    half = (len(subjects) + 1) // 2
    manifest.splits["cross_subject"] = {
        "train_subjects": subjects[:half],
        "test_subjects": subjects[half:],
    }
    if config.num_views >= 2:
        manifest.splits["cross_view"] = {
            "train_views": list(range(1, config.num_views)),
            "test_view": 0,
        }
    return manifest, store


# ---------------------------------------------------------------------------
# import hooks for external datasets
# ---------------------------------------------------------------------------

_IMPORTERS: dict[str, callable] = {}


def register_importer(name: str, loader) -> None:
    """Register `loader(path) -> (DatasetManifest, SequenceStore)` under a name."""
    _IMPORTERS[name] = loader


def import_dataset(name: str, path):
    if name not in _IMPORTERS:
        known = ", ".join(sorted(_IMPORTERS)) or "none"
        raise DataError(f"no importer registered for {name!r} (known: {known})")
    return _IMPORTERS[name](path)
