"""Synthetic two-view angiography of a trapezoid stenosis with exact labels.

A vessel centreline lives in 3-d (mm). Each view rotates it about the vertical
axis (LAO/RAO) then the horizontal axis (CRA/CAU) and projects orthographically.
The lumen darkens the background in proportion to the chord length through a
cylinder of the local diameter; contrast fills the vessel from its proximal end
and is complete from ``contrast_arrival`` onward.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .errors import ArgumentError, DimensionError, GenerationError
from .model import INDEX_NAMES

SCHEMA_VERSION = 1
FRAME_MAGIC = b"DMQF"
BACKGROUND = 0.8
DIP_PER_MM = 0.1
SAMPLE_STEP_MM = 0.05


def compute_rvd(rvd1, rvd2, ll1, ll2):
    """Length-weighted reference diameter: ``(RVD2*LL1 + RVD1*LL2) / (LL1 + LL2)``."""
    if ll1 < 0 or ll2 < 0 or ll1 + ll2 <= 0:
        raise ArgumentError(f"lesion lengths must be non-negative with positive sum, got {ll1}, {ll2}")
    return (rvd2 * ll1 + rvd1 * ll2) / (ll1 + ll2)


@dataclass
class StenosisSpec:
    rvd1: float
    rvd2: float
    mld: float
    ll1: float
    ll2: float
    lesion_center: float  # arclength (mm) of the lesion midpoint
    control_points: list  # 3-d centreline control points, mm
    views: list  # [(lao_deg, cra_deg) main, (lao_deg, cra_deg) support]
    mm_per_pixel: float
    noise: float = 0.02
    contrast_arrival: int = 2
    illumination: list = field(default_factory=lambda: [0.0, 0.0])  # (x, y) gradient across the field
    contrast: float = DIP_PER_MM  # intensity dip per mm of chord

    def __post_init__(self):
        if not 0 < self.mld < min(self.rvd1, self.rvd2):
            raise ArgumentError(f"need 0 < MLD < min(RVD1, RVD2), got MLD={self.mld}")
        if self.ll1 <= 0 or self.ll2 <= 0:
            raise ArgumentError("lesion lengths must be positive")
        if self.mm_per_pixel <= 0:
            raise ArgumentError("mm_per_pixel must be positive")
        self._line = None

    @property
    def rvd(self):
        return compute_rvd(self.rvd1, self.rvd2, self.ll1, self.ll2)

    @property
    def lesion_start(self):
        return self.lesion_center - 0.5 * (self.ll1 + self.ll2)

    @property
    def lesion_end(self):
        return self.lesion_start + self.ll1 + self.ll2

    @property
    def lesion_minimum(self):
        return self.lesion_start + self.ll1

    def label(self):
        return np.array([self.rvd1, self.rvd2, self.rvd, self.mld, self.ll1, self.ll2])

    def centerline(self):
        """Uniformly resampled centreline: ``(points[K, 3], arclength[K])``."""
        if self._line is None:
            self._line = _resample_centerline(np.asarray(self.control_points, dtype=np.float64))
        return self._line

    @property
    def length(self):
        return float(self.centerline()[1][-1])

    def to_dict(self):
        d = asdict(self)
        d["views"] = [list(v) for v in self.views]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _resample_centerline(ctrl):
    chord = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(ctrl, axis=0), axis=1))]
    spline = CubicSpline(chord, ctrl, bc_type="natural")
    fine_t = np.linspace(0.0, chord[-1], 4000)
    fine = spline(fine_t)
    arc = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(fine, axis=0), axis=1))]
    s = np.arange(0.0, arc[-1], SAMPLE_STEP_MM)
    t = np.interp(s, arc, fine_t)
    return spline(t), s


def diameter_profile(spec, s):
    """Lumen diameter (mm) at arclength ``s``: flat, linear taper to MLD, linear widening, flat."""
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > spec.length):
        raise ArgumentError(f"arclength outside vessel extent [0, {spec.length:.3f}]")
    return _profile(spec, s_arr)


def _profile(spec, s):
    xp = [spec.lesion_start, spec.lesion_minimum, spec.lesion_end]
    out = np.interp(s, xp, [spec.rvd1, spec.mld, spec.rvd2])
    return out if out.ndim else float(out)


def view_rotation(lao_deg, cra_deg):
    a, b = np.deg2rad(lao_deg), np.deg2rad(cra_deg)
    ry = np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(b), -np.sin(b)], [0.0, np.sin(b), np.cos(b)]])
    return rx @ ry


def project(points, viewpoint):
    """Orthographic projection of ``points[K, 3]`` to image-plane mm ``[K, 2]`` (x right, y down)."""
    return (np.asarray(points) @ view_rotation(*viewpoint).T)[:, :2]


def to_pixels(xy_mm, shape, mm_per_pixel):
    """Image-plane mm to (row, col) pixel coordinates; pixel centres sit at integer positions."""
    h, w = shape
    return np.stack([xy_mm[:, 1] / mm_per_pixel + h / 2 - 0.5, xy_mm[:, 0] / mm_per_pixel + w / 2 - 0.5], axis=1)


def _viewpoint(spec, viewpoint):
    if isinstance(viewpoint, (int, np.integer)):
        return tuple(spec.views[viewpoint])
    return tuple(viewpoint)


def background(spec, shape):
    h, w = shape
    gx, gy = spec.illumination
    yy = (np.arange(h) + 0.5) / h - 0.5
    xx = (np.arange(w) + 0.5) / w - 0.5
    return BACKGROUND + gx * xx[None, :] + gy * yy[:, None]


def check_placement(spec, viewpoint, shape):
    """Raise ``GenerationError`` unless the whole lesion projects inside the image with a margin."""
    pts, s = spec.centerline()
    h, w = shape
    lo, hi = spec.lesion_start - spec.rvd1, spec.lesion_end + spec.rvd2
    if lo < 0 or hi > s[-1]:
        raise GenerationError("lesion does not fit on the centreline")
    sel = (s >= lo) & (s <= hi)
    rc = to_pixels(project(pts[sel], _viewpoint(spec, viewpoint)), shape, spec.mm_per_pixel)
    margin = max(spec.rvd1, spec.rvd2) / spec.mm_per_pixel + 1
    if rc[:, 0].min() < margin or rc[:, 0].max() > h - 1 - margin or rc[:, 1].min() < margin or rc[:, 1].max() > w - 1 - margin:
        raise GenerationError("lesion projects outside the image")


def render_sequence(spec, viewpoint, T, H, W, seed):
    """Render ``T`` frames ``[T, H, W]`` in [0, 1] for one viewpoint (index into ``spec.views`` or angles)."""
    if T < 1 or H < 1 or W < 1:
        raise DimensionError(f"invalid frame shape {(T, H, W)}")
    vp = _viewpoint(spec, viewpoint)
    check_placement(spec, vp, (H, W))
    pts, s = spec.centerline()
    xy = project(pts, vp)
    mpp = spec.mm_per_pixel
    rows, cols = np.mgrid[0:H, 0:W]
    grid = np.stack([(cols.ravel() + 0.5 - W / 2) * mpp, (rows.ravel() + 0.5 - H / 2) * mpp], axis=1)
    dist, nearest = cKDTree(xy).query(grid)
    s_pix = s[nearest]
    radius = 0.5 * _profile(spec, s_pix)
    chord = 2.0 * np.sqrt(np.maximum(radius * radius - dist * dist, 0.0))
    dip = (spec.contrast * chord).reshape(H, W)
    s_pix = s_pix.reshape(H, W)
    bg = background(spec, (H, W))
    rng = np.random.default_rng(seed)
    out = np.empty((T, H, W))
    for t in range(T):
        if t >= spec.contrast_arrival:
            frame = bg - dip
        else:
            front = s[-1] * t / spec.contrast_arrival
            frame = bg - np.where(s_pix <= front, dip, 0.0)
        if spec.noise > 0:
            frame = frame + spec.noise * rng.standard_normal((H, W))
        out[t] = np.clip(frame, 0.0, 1.0)
    return out


# dataset generation


@dataclass
class PhantomRanges:
    rvd: tuple = (2.0, 4.5)
    mld_fraction: tuple = (0.5, 0.9)
    ll: tuple = (2.0, 12.0)

    def __post_init__(self):
        self.rvd, self.mld_fraction, self.ll = tuple(self.rvd), tuple(self.mld_fraction), tuple(self.ll)
        for lo, hi in (self.rvd, self.mld_fraction, self.ll):
            if not 0 < lo <= hi:
                raise ArgumentError(f"invalid range ({lo}, {hi})")
        if self.mld_fraction[1] >= 1:
            raise ArgumentError("MLD fraction must stay below 1")


@dataclass
class PhantomConfig:
    frames: int = 4
    height: int = 64
    width: int = 64
    mm_per_pixel: float = 0.7
    noise: float = 0.02
    orientation_jitter_deg: float = 20.0
    bend_fraction: float = 0.05
    depth_fraction: float = 0.1
    main_lao_deg: float = 20.0
    main_cra_deg: float = 15.0
    support_cra_deg: tuple = (25.0, 45.0)
    illumination: float = 0.1
    contrast: float = DIP_PER_MM
    lesion_jitter_fraction: float = 0.1  # lesion-minimum offset from the view centre, fraction of the field
    ranges: PhantomRanges = field(default_factory=PhantomRanges)

    def __post_init__(self):
        if isinstance(self.ranges, dict):
            self.ranges = PhantomRanges(**self.ranges)
        self.support_cra_deg = tuple(self.support_cra_deg)

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def paper(cls, **kw):
        base = dict(frames=10, height=256, width=256, mm_per_pixel=0.7 * 64 / 256)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["ranges"] = {k: list(v) for k, v in asdict(self.ranges).items()}
        d["support_cra_deg"] = list(self.support_cra_deg)
        return d


def sample_spec(rng, cfg: PhantomConfig, max_tries=50):
    """Draw indices, centreline and poses; resample geometry until the lesion is in view."""
    r = cfg.ranges
    rvd1, rvd2 = rng.uniform(*r.rvd, size=2)
    mld = rng.uniform(*r.mld_fraction) * min(rvd1, rvd2)
    ll1, ll2 = rng.uniform(*r.ll, size=2)
    arrival = int(rng.integers(1, cfg.frames)) if cfg.frames > 1 else 0
    fov = cfg.width * cfg.mm_per_pixel
    for _ in range(max_tries):
        xs = np.linspace(-0.9 * fov, 0.9 * fov, 5)
        ys = rng.normal(0.0, cfg.bend_fraction * fov, 5)
        zs = rng.normal(0.0, cfg.depth_fraction * fov, 5)
        psi = np.deg2rad(rng.uniform(-cfg.orientation_jitter_deg, cfg.orientation_jitter_deg))
        rot = np.array([[np.cos(psi), -np.sin(psi)], [np.sin(psi), np.cos(psi)]])
        ctrl = np.column_stack([np.stack([xs, ys], axis=1) @ rot.T, zs])
        main = (rng.uniform(-cfg.main_lao_deg, cfg.main_lao_deg), rng.uniform(-cfg.main_cra_deg, cfg.main_cra_deg))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        support = (rng.uniform(-cfg.main_lao_deg, cfg.main_lao_deg), sign * rng.uniform(*cfg.support_cra_deg))
        illum = rng.uniform(-cfg.illumination, cfg.illumination, size=2)
        probe = StenosisSpec(rvd1, rvd2, mld, ll1, ll2, 0.0, ctrl.tolist(), [main, support],
                             cfg.mm_per_pixel, cfg.noise, arrival, illum.tolist(), cfg.contrast)
        pts, s = probe.centerline()
        # lesion minimum lands near the point of the curve closest to the image centre
        centre_s = s[np.argmin(np.linalg.norm(pts[:, :2], axis=1))]
        jitter = rng.uniform(-cfg.lesion_jitter_fraction, cfg.lesion_jitter_fraction) * fov
        probe.lesion_center = float(centre_s + jitter + 0.5 * (ll2 - ll1))
        try:
            for v in range(2):
                check_placement(probe, v, (cfg.height, cfg.width))
        except GenerationError:
            continue
        return probe
    raise GenerationError(f"could not place lesion in view after {max_tries} tries")


@dataclass
class Sample:
    main_view: np.ndarray  # [T, H, W]
    support_view: np.ndarray  # [T, H, W]
    keyframe: np.ndarray  # [H, W]
    label: np.ndarray  # [6] (RVD1, RVD2, RVD, MLD, LL1, LL2) mm
    id: str = ""


def make_sample(spec, cfg: PhantomConfig, seed, sample_id=""):
    T_, H, W = cfg.frames, cfg.height, cfg.width
    main = render_sequence(spec, 0, T_, H, W, [seed, 1])
    support = render_sequence(spec, 1, T_, H, W, [seed, 2])
    return Sample(main, support, main[-1].copy(), spec.label(), sample_id)


def write_frames(path, frames):
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    t, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<3I", t, h, w))
        fh.write(frames.astype("<f4").tobytes())


def read_frames(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FRAME_MAGIC or len(buf) < 16:
        raise OSError(f"{path}: not a DMQF frame file")
    t, h, w = struct.unpack_from("<3I", buf, 4)
    if len(buf) != 16 + 4 * t * h * w:
        raise OSError(f"{path}: truncated frame file")
    return np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float64).reshape(t, h, w)


def generate_dataset(n, seed, out_dir, cfg: PhantomConfig | None = None):
    """Render ``n`` samples into ``out_dir`` and write ``manifest.json``; returns the manifest dict.

    Sample ``i`` uses seed ``seed + i`` so results do not depend on generation order.
    """
    if n < 1:
        raise ArgumentError("n must be >= 1")
    cfg = cfg or PhantomConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        base = seed + i
        spec = sample_spec(np.random.default_rng([base, 0]), cfg)
        sid = f"s{i:04d}"
        sample = make_sample(spec, cfg, base, sid)
        files = {k: f"{sid}_{k}.dmqf" for k in ("main", "support", "keyframe")}
        write_frames(out / files["main"], sample.main_view)
        write_frames(out / files["support"], sample.support_view)
        write_frames(out / files["keyframe"], sample.keyframe)
        entries.append({"id": sid, "seed": base, "spec": spec.to_dict(),
                        "label": sample.label.tolist(), "files": files})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "n": n,
        "index_names": list(INDEX_NAMES),
        "config": cfg.to_dict(),
        "samples": entries,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir):
    with open(Path(data_dir) / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise OSError(f"unsupported manifest schema {manifest.get('schema_version')}")
    return manifest


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    samples = []
    for e in manifest["samples"]:
        f = e["files"]
        samples.append(Sample(read_frames(data_dir / f["main"]), read_frames(data_dir / f["support"]),
                              read_frames(data_dir / f["keyframe"])[0], np.array(e["label"]), e["id"]))
    return samples


def synthesize(n, seed, cfg: PhantomConfig | None = None):
    """In-memory samples, float32-rounded exactly as a dataset written to disk would be."""
    cfg = cfg or PhantomConfig()
    out = []
    for i in range(n):
        spec = sample_spec(np.random.default_rng([seed + i, 0]), cfg)
        s = make_sample(spec, cfg, seed + i, f"s{i:04d}")
        for name in ("main_view", "support_view", "keyframe"):
            setattr(s, name, getattr(s, name).astype(np.float32).astype(np.float64))
        out.append(s)
    return out
