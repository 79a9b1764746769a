"""Seeded synthetic thermogram subjects with ground-truth breast masks.

Stands in for the private clinical dataset: each subject is a short sequence
of 16-bit frames showing a torso with neck/shoulder/abdomen distractors and
two bright breast lobes that cool down over the acquisition, plus the exact
lobe-support mask.  Everything is a pure function of the seed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .irprep import Gray8Frame, Rect, ThermalFrame
from .pgmio import read_pgm, write_pgm
from .rng import Rng, derive_seed

PATIENT = "patient"
VOLUNTEER = "volunteer"


@dataclass
class PhantomParams:
    image_hw: int = 64
    frames_per_subject: int = 15  # one frame per minute of acquisition
    background_level: int = 3000
    body_level: int = 26000
    breast_excess: int = 14000
    noise_sigma: float = 120.0
    cooldown_rate: float = 0.012  # per-frame decay of excess over background
    # shape randomization, as fractions of image extent
    torso_rx: Tuple[float, float] = (0.28, 0.36)
    torso_ry: Tuple[float, float] = (0.30, 0.42)
    lobe_radius: Tuple[float, float] = (0.16, 0.22)
    small_lobe_radius: Tuple[float, float] = (0.091, 0.0945)
    small_breast_prob: float = 0.3
    lobe_offset_x: Tuple[float, float] = (0.10, 0.15)
    lobe_y: Tuple[float, float] = (0.52, 0.62)
    hotspot_excess: int = 6000  # patients only
    hotspot_radius: float = 0.03

    def validate(self):
        if not (0 <= self.background_level < self.body_level
                and self.body_level + self.breast_excess <= 65535):
            raise ValueError(
                f"levels must satisfy background < body < body+excess <= 65535, got "
                f"{self.background_level}, {self.body_level}, {self.breast_excess}")
        if not 0.0 <= self.cooldown_rate * (self.frames_per_subject - 1) < 1.0:
            raise ValueError(
                f"cooldown_rate {self.cooldown_rate} drains the signal within "
                f"{self.frames_per_subject} frames")
        if self.frames_per_subject < 1 or self.image_hw < 8:
            raise ValueError("need at least one frame and an 8-pixel image")


@dataclass
class Subject:
    subject_id: str
    kind: str  # PATIENT or VOLUNTEER
    frames: List[ThermalFrame]
    mask: Gray8Frame
    recommended_crop: Rect
    seed: int = 0
    small_breast: bool = False

    def checksum(self) -> int:
        acc = derive_seed(0xC0FFEE, self.subject_id, self.kind, *self.recommended_crop)
        for f in self.frames:
            acc = derive_seed(acc, int(np.bitwise_xor.reduce(f.pixels.view(np.uint16).ravel())),
                              int(f.pixels.sum()))
        return derive_seed(acc, int(self.mask.pixels.sum()))


def _disc_distance(hw: int, cx: float, cy: float) -> np.ndarray:
    y, x = np.mgrid[0:hw, 0:hw]
    return np.hypot(x - cx, y - cy)


def generate_subject(seed: int, params: PhantomParams, kind: str) -> Subject:
    params.validate()
    if kind not in (PATIENT, VOLUNTEER):
        raise ValueError(f"kind must be {PATIENT!r} or {VOLUNTEER!r}, got {kind!r}")
    rng = Rng(seed)
    hw = params.image_hw
    y, x = np.mgrid[0:hw, 0:hw]

    # torso ellipse slightly above center, distractor bands at the image edges
    rx = rng.uniform(low=params.torso_rx[0], high=params.torso_rx[1]) * hw
    ry = rng.uniform(low=params.torso_ry[0], high=params.torso_ry[1]) * hw
    tcx, tcy = 0.5 * hw, 0.46 * hw
    torso = ((x - tcx) / rx) ** 2 + ((y - tcy) / ry) ** 2 <= 1.0

    band_h = max(2, int(0.08 * hw))
    neck = (y < band_h) & (np.abs(x - tcx) < 0.12 * hw)
    shoulders = (y < band_h) & ((x < 0.18 * hw) | (x > 0.82 * hw))
    abdomen = (y >= hw - band_h) & (np.abs(x - tcx) < 0.34 * hw)
    body = torso | neck | shoulders | abdomen

    # breast lobes: smooth-falloff discs, mask is the exact support inside the torso
    small = rng.uniform() < params.small_breast_prob
    r_lo, r_hi = params.small_lobe_radius if small else params.lobe_radius
    excess = np.zeros((hw, hw))
    excess[body] = params.body_level - params.background_level
    mask = np.zeros((hw, hw), dtype=bool)
    lobe_centers = []
    for side in (-1.0, 1.0):
        radius = rng.uniform(low=r_lo, high=r_hi) * hw
        cx = 0.5 * hw + side * rng.uniform(low=params.lobe_offset_x[0],
                                           high=params.lobe_offset_x[1]) * hw
        cy = rng.uniform(low=params.lobe_y[0], high=params.lobe_y[1]) * hw
        d = _disc_distance(hw, cx, cy)
        support = (d <= radius) & torso
        falloff = np.clip((radius - d) / (0.3 * radius), 0.0, 1.0)
        excess += np.where(support, params.breast_excess * falloff, 0.0)
        mask |= support
        lobe_centers.append((cx, cy, radius))

    if kind == PATIENT:
        cx, cy, radius = lobe_centers[rng.integer(2)]
        d = _disc_distance(hw, cx, cy)
        excess += np.where((d <= params.hotspot_radius * hw) & torso,
                           float(params.hotspot_excess), 0.0)

    ys, xs = np.nonzero(torso)
    crop_y0 = max(int(ys.min()), band_h)
    crop_y1 = min(int(ys.max()) + 1, hw - band_h)
    recommended_crop = (int(xs.min()), crop_y0, int(xs.max()) + 1, crop_y1)

    frames = []
    for t in range(params.frames_per_subject):
        img = params.background_level + excess * (1.0 - params.cooldown_rate * t)
        if params.noise_sigma > 0:
            img = img + rng.normal((hw, hw), sigma=params.noise_sigma)
        img = np.clip(np.floor(img + 0.5), 0, 65535).astype(np.uint16)
        frames.append(ThermalFrame(img, subject_id="", minute_index=t))

    mask8 = Gray8Frame(np.where(mask, 255, 0).astype(np.uint8))
    return Subject("", kind, frames, mask8, recommended_crop, seed=seed,
                   small_breast=small)


def generate_dataset(n_patients: int, n_volunteers: int, seed: int,
                     params: Optional[PhantomParams] = None) -> List[Subject]:
    if n_patients < 1 or n_volunteers < 1:
        raise ValueError("need at least one patient and one volunteer")
    params = params or PhantomParams()
    subjects = []
    specs = [(PATIENT, "P", i + 1) for i in range(n_patients)] + \
            [(VOLUNTEER, "V", i + 1) for i in range(n_volunteers)]
    for idx, (kind, prefix, number) in enumerate(specs):
        sub = generate_subject(derive_seed(seed, "subject", idx), params, kind)
        sub.subject_id = f"{prefix}{number}"
        for frame in sub.frames:
            frame.subject_id = sub.subject_id
        subjects.append(sub)
    # guarantee the small-breast failure mode appears in every group of ten
    forced = replace(params, small_breast_prob=1.0)
    for start in range(0, len(subjects), 10):
        group = subjects[start:start + 10]
        if len(group) == 10 and not any(s.small_breast for s in group):
            old = subjects[start]
            sub = generate_subject(derive_seed(seed, "subject-small", start),
                                   forced, old.kind)
            sub.subject_id = old.subject_id
            for frame in sub.frames:
                frame.subject_id = sub.subject_id
            subjects[start] = sub
    return subjects


# ---------------------------------------------------------------------------
# on-disk layout: one directory per subject


def write_subject(subject: Subject, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for frame in subject.frames:
        write_pgm(directory / f"frame_{frame.minute_index:02d}.pgm", frame.pixels)
    write_pgm(directory / "mask.pgm", subject.mask.pixels)
    crop = ",".join(str(v) for v in subject.recommended_crop)
    (directory / "meta.txt").write_text(
        f"id={subject.subject_id}\nkind={subject.kind}\ncrop={crop}\n"
        f"seed={subject.seed}\nsmall_breast={int(subject.small_breast)}\n")


def read_subject(directory) -> Subject:
    directory = Path(directory)
    meta = {}
    for line in (directory / "meta.txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    frames = []
    for path in sorted(directory.glob("frame_*.pgm")):
        minute = int(re.search(r"frame_(\d+)", path.stem).group(1))
        frames.append(ThermalFrame(read_pgm(path).astype(np.uint16),
                                   subject_id=meta["id"], minute_index=minute))
    mask = Gray8Frame(read_pgm(directory / "mask.pgm"))
    crop = tuple(int(v) for v in meta["crop"].split(","))
    return Subject(meta["id"], meta["kind"], frames, mask, crop,
                   seed=int(meta.get("seed", 0)),
                   small_breast=bool(int(meta.get("small_breast", 0))))


def write_dataset(subjects: List[Subject], root):
    root = Path(root)
    for sub in subjects:
        write_subject(sub, root / sub.subject_id)


def read_dataset(root) -> List[Subject]:
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"no such dataset directory: {root}")
    dirs = sorted(d for d in root.iterdir() if (d / "meta.txt").exists())
    if not dirs:
        raise ValueError(f"no subject directories under {root}")
    return [read_subject(d) for d in dirs]
