"""Synthetic head-and-neck phantom dataset and volume I/O.

Each generated case mimics the shape of a knowledge-based-planning sample:
a CT-like intensity volume in [0,1], ten boolean structure masks (three
nested planning targets and seven organs at risk), a ground-truth dose in
Gy, and a body mask limiting the valid region. Cases are deterministic
functions of (dataset seed, case index).

Volumes travel on disk in the EVDV container: a 24-byte header (magic,
version, four extents) followed by little-endian float32 data in row-major
order.
"""

import dataclasses
import logging
import os
import struct

import numpy as np

log = logging.getLogger(__name__)

ROI_NAMES = (
    "ptv70",
    "ptv63",
    "ptv56",
    "brainstem",
    "spinal_cord",
    "parotid_r",
    "parotid_l",
    "esophagus",
    "larynx",
    "mandible",
)

# fixed input-channel convention: CT first, then the masks in ROI_NAMES order
CHANNEL_ORDER = ("ct",) + ROI_NAMES

VOLUME_MAGIC = b"EVDV"
VOLUME_VERSION = 1

DOSE_CAP = 80.0
PRESCRIPTIONS = {"ptv70": 70.0, "ptv63": 63.0, "ptv56": 56.0}

_N_BEAMS = 9
_DEPTH_SLOPE = 0.35
_SCATTER_BASE_GY = 5.0
_SCATTER_WAVES = 10
_SCATTER_FADE_GY = 30.0
_GEOMETRY_RETRIES = 25

# template anatomy in normalized [-1,1] coordinates: name -> (center, semi-axes)
_OAR_TEMPLATE = {
    "brainstem": ((0.00, 0.30, 0.35), (0.10, 0.10, 0.16)),
    "spinal_cord": ((0.00, 0.35, -0.15), (0.07, 0.07, 0.45)),
    "parotid_r": ((-0.45, 0.05, 0.10), (0.10, 0.14, 0.16)),
    "parotid_l": ((0.45, 0.05, 0.10), (0.10, 0.14, 0.16)),
    "esophagus": ((0.00, 0.25, -0.45), (0.07, 0.07, 0.25)),
    "larynx": ((0.00, -0.15, -0.30), (0.10, 0.10, 0.12)),
    "mandible": ((0.00, -0.40, 0.05), (0.30, 0.12, 0.10)),
}

_CT_BASE = 0.25
_CT_OFFSETS = {
    "ptv70": 0.12,
    "ptv63": 0.10,
    "ptv56": 0.08,
    "brainstem": 0.06,
    "spinal_cord": 0.10,
    "parotid_r": 0.04,
    "parotid_l": 0.04,
    "esophagus": -0.06,
    "larynx": 0.02,
    "mandible": 0.45,
}


@dataclasses.dataclass
class PatientCase:
    """One volumetric sample: image, structures, dose, and body mask."""

    id: str
    ct: np.ndarray
    roi_masks: dict
    dose_gt: np.ndarray
    valid_mask: np.ndarray

    def input_channels(self):
        """Stack CT plus the ten masks into a (11, E, E, E) float32 grid."""
        planes = [self.ct.astype(np.float32, copy=False)]
        for name in ROI_NAMES:
            planes.append(self.roi_masks[name].astype(np.float32))
        return np.ascontiguousarray(np.stack(planes, axis=0))

    def validate(self):
        shape = self.ct.shape
        if len(shape) != 3:
            raise ValueError(f"ct must be rank 3, got shape {shape}")
        if set(self.roi_masks) != set(ROI_NAMES):
            raise ValueError("roi_masks must contain exactly the ten known structures")
        for name, mask in self.roi_masks.items():
            if mask.shape != shape:
                raise ValueError(f"mask {name} shape {mask.shape} != ct shape {shape}")
            if mask.dtype != np.bool_:
                raise ValueError(f"mask {name} must be boolean")
        if self.dose_gt.shape != shape or self.valid_mask.shape != shape:
            raise ValueError("dose_gt and valid_mask must share the ct extent")
        if self.valid_mask.dtype != np.bool_:
            raise ValueError("valid_mask must be boolean")
        if self.ct.min() < 0.0 or self.ct.max() > 1.0:
            raise ValueError("ct intensities must lie in [0, 1]")
        if self.dose_gt.min() < 0.0 or self.dose_gt.max() > DOSE_CAP:
            raise ValueError(f"dose must lie in [0, {DOSE_CAP}] Gy")
        if np.any(self.dose_gt[~self.valid_mask] != 0.0):
            raise ValueError("dose must vanish outside the body mask")
        for a in range(3):
            for b in range(a + 1, 3):
                pa = self.roi_masks[ROI_NAMES[a]]
                pb = self.roi_masks[ROI_NAMES[b]]
                if np.any(pa & pb):
                    raise ValueError("target masks must be pairwise disjoint")


@dataclasses.dataclass
class PhantomConfig:
    grid_extent: int = 32
    train_cases: int = 40
    val_cases: int = 8
    test_cases: int = 16
    seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.grid_extent < 8:
            raise ValueError("grid_extent must be at least 8")
        for field in ("train_cases", "val_cases", "test_cases"):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclasses.dataclass
class PhantomDataset:
    train: tuple
    val: tuple
    test: tuple

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _grid_coords(extent):
    axis = (np.arange(extent, dtype=np.float64) + 0.5) / extent * 2.0 - 1.0
    return np.meshgrid(axis, axis, axis, indexing="ij")


def _ellipsoid(coords, center, semi_axes):
    x, y, z = coords
    q = (
        ((x - center[0]) / semi_axes[0]) ** 2
        + ((y - center[1]) / semi_axes[1]) ** 2
        + ((z - center[2]) / semi_axes[2]) ** 2
    )
    return q <= 1.0


def _beam_dose(coords, centroid, phase):
    """Max over equiangular coplanar beams of lateral Gaussian x depth falloff."""
    x, y, z = coords
    d0 = x - centroid[0]
    d1 = y - centroid[1]
    d2 = z - centroid[2]
    r2 = d0 * d0 + d1 * d1 + d2 * d2
    sigma2 = 2.0 * (0.30**2)
    span = np.sqrt(3.0)
    best = np.zeros_like(d0)
    for j in range(_N_BEAMS):
        theta = phase + 2.0 * np.pi * j / _N_BEAMS
        s = d0 * np.cos(theta) + d1 * np.sin(theta)
        lat2 = r2 - s * s
        depth_frac = (s + span) / (2.0 * span)
        profile = np.exp(-lat2 / sigma2) * (1.0 - _DEPTH_SLOPE * depth_frac)
        np.maximum(best, profile, out=best)
    return best


def _scatter_dose(coords, dose, rng):
    """Smooth scatter/leakage field, visible only where primary dose is low.

    The field has absolute amplitude (a few Gy) untied to the local primary
    dose and varies smoothly from case to case, the way room scatter and
    collimator leakage shift with each delivered plan; it fades out above
    _SCATTER_FADE_GY so high-dose regions stay plan-determined.
    """
    x, y, z = coords
    field = np.full_like(dose, _SCATTER_BASE_GY)
    for _ in range(_SCATTER_WAVES):
        w = rng.uniform(0.5, 2.0, 3) * rng.choice((-1.0, 1.0), 3)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(1.2, 2.4)
        field += amp * np.cos(np.pi * (w[0] * x + w[1] * y + w[2] * z) + ph)
    fade = np.clip(1.0 - dose / _SCATTER_FADE_GY, 0.0, 1.0)
    return np.maximum(field, 0.0) * fade


def _sample_geometry(rng, coords):
    """Draw one candidate anatomy; returns (body, masks dict, ptv centroid)."""
    body_axes = np.array([0.80, 0.85, 0.90]) + rng.uniform(-0.05, 0.05, 3)
    body = _ellipsoid(coords, (0.0, 0.0, 0.0), body_axes)

    center = np.concatenate([rng.uniform(-0.08, 0.08, 2), rng.uniform(-0.05, 0.05, 1)])
    r1 = rng.uniform(0.16, 0.24)
    r2 = r1 * rng.uniform(1.4, 1.6)
    r3 = r2 * rng.uniform(1.25, 1.4)
    shells = []
    for r in (r1, r2, r3):
        shells.append(_ellipsoid(coords, center, r * rng.uniform(0.9, 1.1, 3)))
    e1, e2, e3 = shells
    masks = {
        "ptv70": e1 & body,
        "ptv63": (e2 & ~e1) & body,
        "ptv56": (e3 & ~(e1 | e2)) & body,
    }
    for name, (c, ax) in _OAR_TEMPLATE.items():
        jc = np.asarray(c) + rng.uniform(-0.04, 0.04, 3)
        jax = np.asarray(ax) * rng.uniform(0.85, 1.15, 3)
        masks[name] = _ellipsoid(coords, jc, jax) & body
    return body, masks, center


def _dose_noise_scale(dose, noise_sigma):
    """Per-voxel noise level: a small dose-proportional delivery jitter plus
    a dominant term that grows with the local spatial gradient, where
    registration and setup errors concentrate."""
    gx, gy, gz = np.gradient(dose)
    grad = np.sqrt(gx * gx + gy * gy + gz * gz)
    return noise_sigma * (0.005 * dose + 0.12 * grad)


def _make_case(case_id, rng, extent, noise_sigma=0.0, retries=_GEOMETRY_RETRIES):
    coords = _grid_coords(extent)
    for _ in range(retries):
        body, masks, centroid = _sample_geometry(rng, coords)
        if not body.any():
            continue
        if not all(masks[n].any() for n in ("ptv70", "ptv63", "ptv56")):
            continue

        phase = rng.uniform(0.0, 2.0 * np.pi)
        raw = _beam_dose(coords, centroid, phase)
        target_median = np.median(raw[masks["ptv70"]])
        if target_median <= 0.0:
            continue
        dose = raw * (PRESCRIPTIONS["ptv70"] / target_median)
        dose += _scatter_dose(coords, dose, rng)
        np.clip(dose, 0.0, DOSE_CAP, out=dose)
        dose[~body] = 0.0

        ct = np.full(coords[0].shape, _CT_BASE)
        for name in ROI_NAMES:
            ct[masks[name]] += _CT_OFFSETS[name]
        x, y, z = coords
        for _ in range(3):
            w = rng.integers(1, 3, size=3)
            amp = rng.uniform(-0.04, 0.04)
            ph = rng.uniform(0.0, 2.0 * np.pi)
            ct += amp * np.cos(np.pi * (w[0] * x + w[1] * y + w[2] * z) + ph)
        np.clip(ct, 0.0, 1.0, out=ct)
        ct[~body] = 0.0

        # drawn last so toggling the noise level never reshuffles geometry
        if noise_sigma > 0.0:
            dose = dose + rng.standard_normal(dose.shape) * _dose_noise_scale(
                dose, noise_sigma
            )
            np.clip(dose, 0.0, DOSE_CAP, out=dose)
            dose[~body] = 0.0

        case = PatientCase(
            id=case_id,
            ct=ct.astype(np.float32),
            roi_masks=masks,
            dose_gt=dose.astype(np.float32),
            valid_mask=body,
        )
        case.validate()
        median = float(np.median(case.dose_gt[masks["ptv70"]]))
        if not (65.0 <= median <= 75.0):
            continue
        return case
    raise RuntimeError(
        f"could not fit case geometry on a {extent}^3 grid after {retries} attempts"
    )


def generate(cfg: PhantomConfig) -> PhantomDataset:
    """Build the train/val/test phantom splits deterministically from cfg.seed."""
    splits = {}
    index = 0
    for split, count in (
        ("train", cfg.train_cases),
        ("val", cfg.val_cases),
        ("test", cfg.test_cases),
    ):
        cases = []
        for _ in range(count):
            rng = np.random.default_rng([cfg.seed, index])
            cases.append(
                _make_case(
                    f"case_{index:04d}", rng, cfg.grid_extent, cfg.noise_sigma
                )
            )
            index += 1
        splits[split] = tuple(cases)
    return PhantomDataset(**splits)


def add_ct_noise(case: PatientCase, sigma: float, rng) -> PatientCase:
    """Perturb the CT with iid Gaussian noise, clamped back into [0,1].

    Masks and dose are carried over untouched.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    noisy = case.ct + rng.normal(0.0, sigma, size=case.ct.shape)
    noisy = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return PatientCase(
        id=case.id,
        ct=noisy,
        roi_masks=case.roi_masks,
        dose_gt=case.dose_gt,
        valid_mask=case.valid_mask,
    )


def write_volume(path, volume):
    """Serialize a rank-4 grid: 24-byte header then float32 little-endian data."""
    vol = np.asarray(volume)
    if vol.ndim != 4:
        raise ValueError(f"volume must be rank 4, got rank {vol.ndim}")
    if not np.all(np.isfinite(vol)):
        raise ValueError("volume contains non-finite values")
    vol = np.ascontiguousarray(vol, dtype="<f4")
    header = VOLUME_MAGIC + struct.pack("<5I", VOLUME_VERSION, *vol.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vol.tobytes())


def read_volume(path):
    """Read an EVDV file back into a rank-4 float32 array (bit-exact round trip)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise ValueError(f"truncated header: expected 24 bytes, found {len(blob)}")
    if blob[:4] != VOLUME_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r} at offset 0, expected {VOLUME_MAGIC!r}")
    version, *extents = struct.unpack("<5I", blob[4:24])
    if version != VOLUME_VERSION:
        raise ValueError(f"unsupported volume version {version}")
    expected = 4 * int(np.prod(extents))
    actual = len(blob) - 24
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise ValueError(f"{kind} payload: expected {expected} bytes, found {actual}")
    data = np.frombuffer(blob, dtype="<f4", offset=24).reshape(extents)
    return np.ascontiguousarray(data)


def save_case(case: PatientCase, path):
    """Pack a case into one 13-channel volume: channels, then dose, then body."""
    planes = [case.input_channels()]
    planes.append(case.dose_gt[None].astype(np.float32))
    planes.append(case.valid_mask[None].astype(np.float32))
    write_volume(path, np.concatenate(planes, axis=0))


def load_case(path, case_id):
    vol = read_volume(path)
    if vol.shape[0] != len(CHANNEL_ORDER) + 2:
        raise ValueError(
            f"case file must have {len(CHANNEL_ORDER) + 2} channels, found {vol.shape[0]}"
        )
    masks = {name: vol[i + 1] > 0.5 for i, name in enumerate(ROI_NAMES)}
    return PatientCase(
        id=case_id,
        ct=vol[0],
        roi_masks=masks,
        dose_gt=vol[len(CHANNEL_ORDER)],
        valid_mask=vol[len(CHANNEL_ORDER) + 1] > 0.5,
    )


def write_manifest(path, entries):
    """Write `id<TAB>path` lines, one per case."""
    with open(path, "w", encoding="utf-8") as fh:
        for case_id, case_path in entries:
            fh.write(f"{case_id}\t{case_path}\n")


def read_manifest(path):
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            case_id, _, case_path = line.partition("\t")
            if not case_path:
                raise ValueError(f"malformed manifest line: {line!r}")
            entries.append((case_id, case_path))
    return entries


def save_dataset(dataset: PhantomDataset, out_dir):
    """Write every case as an EVDV file plus one manifest per split."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_paths = {}
    for split, cases in dataset.splits().items():
        entries = []
        for case in cases:
            rel = f"{case.id}.evdv"
            save_case(case, os.path.join(out_dir, rel))
            entries.append((case.id, rel))
        mpath = os.path.join(out_dir, f"manifest_{split}.txt")
        write_manifest(mpath, entries)
        manifest_paths[split] = mpath
    return manifest_paths


def load_split(out_dir, split):
    entries = read_manifest(os.path.join(out_dir, f"manifest_{split}.txt"))
    return tuple(load_case(os.path.join(out_dir, rel), cid) for cid, rel in entries)


# sparse-CSV adapter for the public head-and-neck planning dataset layout

_OPENKBP_ROI_FILES = {
    "ptv70": "PTV70",
    "ptv63": "PTV63",
    "ptv56": "PTV56",
    "brainstem": "Brainstem",
    "spinal_cord": "SpinalCord",
    "parotid_r": "RightParotid",
    "parotid_l": "LeftParotid",
    "esophagus": "Esophagus",
    "larynx": "Larynx",
    "mandible": "Mandible",
}

CT_MAX_RAW = 4095.0


def _read_sparse_csv(path, extent):
    """Densify `index[,value]` rows over a flattened extent^3 grid."""
    flat = np.zeros(extent**3, dtype=np.float64)
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            head = line.split(",")[0].strip()
            if not head.lstrip("-").isdigit():
                continue  # header row
            parts = [p.strip() for p in line.split(",")]
            idx = int(parts[0])
            if not 0 <= idx < flat.size:
                raise ValueError(f"voxel index {idx} out of range for extent {extent}")
            value = float(parts[1]) if len(parts) > 1 and parts[1] else 1.0
            flat[idx] = value
    return flat.reshape((extent, extent, extent))


def load_openkbp_case(case_dir, extent=128):
    """Assemble a PatientCase from a directory of sparse voxel CSV files.

    The raw image values are clipped to [0, 4095] and scaled to [0,1]. A
    missing dose file rejects the case; a missing structure file becomes an
    empty mask with a logged warning.
    """
    dose_path = os.path.join(case_dir, "dose.csv")
    if not os.path.exists(dose_path):
        raise FileNotFoundError(f"missing dose file: {dose_path}")
    ct_path = os.path.join(case_dir, "ct.csv")
    if not os.path.exists(ct_path):
        raise FileNotFoundError(f"missing ct file: {ct_path}")

    ct_raw = _read_sparse_csv(ct_path, extent)
    ct = (np.clip(ct_raw, 0.0, CT_MAX_RAW) / CT_MAX_RAW).astype(np.float32)
    dose = _read_sparse_csv(dose_path, extent).astype(np.float32)

    masks = {}
    for name, stem in _OPENKBP_ROI_FILES.items():
        roi_path = os.path.join(case_dir, f"{stem}.csv")
        if os.path.exists(roi_path):
            masks[name] = _read_sparse_csv(roi_path, extent) > 0.0
        else:
            log.warning("structure %s missing in %s; using empty mask", stem, case_dir)
            masks[name] = np.zeros((extent, extent, extent), dtype=bool)

    valid_path = os.path.join(case_dir, "possible_dose_mask.csv")
    if os.path.exists(valid_path):
        valid = _read_sparse_csv(valid_path, extent) > 0.0
    else:
        log.warning("possible_dose_mask missing in %s; treating full grid as valid", case_dir)
        valid = np.ones((extent, extent, extent), dtype=bool)

    dose[~valid] = 0.0
    return PatientCase(
        id=os.path.basename(os.path.normpath(case_dir)),
        ct=ct,
        roi_masks=masks,
        dose_gt=dose,
        valid_mask=valid,
    )
