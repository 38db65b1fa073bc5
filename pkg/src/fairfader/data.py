"""Dataset ingestion, split protocol and the synthetic biased-image generator.

Label conventions: gender 0 = male, 1 = female; race 0..4 = White, Black,
Asian, Indian, Others (the UTKFace ordering).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

RACES = ("White", "Black", "Asian", "Indian", "Others")
GENDERS = ("male", "female")
# race composition of the training data reported for the UTKFace subset
UTK_FRACTIONS = (0.88, 0.04, 0.035, 0.03, 0.015)

_UTK_NAME = re.compile(r"^(\d+)_(\d+)_(\d+)_(.*)\.[A-Za-z0-9]+$")


class FilenameError(ValueError):
    def __init__(self, name, reason):
        super().__init__(f"{name!r}: {reason}")
        self.filename = name


@dataclass
class SampleRecord:
    image: np.ndarray  # C x H x W float32 in [-1, 1]
    gender: int
    race: int
    age: int | None = None
    source_id: str = ""


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int = 0

    @property
    def manifest(self):
        return {name: [r.source_id for r in getattr(self, name)]
                for name in ("train", "validation", "test")}

    @property
    def manifest_hash(self):
        blob = json.dumps(self.manifest, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class LoadedDataset(list):
    """Records plus the per-file errors hit while loading."""

    def __init__(self, records=(), errors=()):
        super().__init__(records)
        self.errors = list(errors)


def parse_utk_filename(name, num_races=5):
    """``"25_0_1_20170116.jpg" -> (25, 0, 1)``."""
    base = os.path.basename(name)
    m = _UTK_NAME.match(base)
    if m is None:
        raise FilenameError(base, "expected [age]_[gender]_[race]_[tag].ext")
    age, gender, race = (int(g) for g in m.groups()[:3])
    if gender not in (0, 1):
        raise FilenameError(base, f"gender {gender} not in {{0, 1}}")
    if not 0 <= race < num_races:
        raise FilenameError(base, f"race {race} not in [0, {num_races})")
    return age, gender, race


def manifest_hash(records):
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.source_id}|{r.gender}|{r.race}|{r.age}|{r.image.shape}".encode())
        h.update(np.ascontiguousarray(r.image, dtype="<f4").tobytes())
    return h.hexdigest()


def to_unit_range(pixels):
    """8-bit pixels -> float32 in [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def load_dataset(directory, target_size=256, channels=3, num_races=5):
    """Load UTKFace-style images, resized bilinearly to ``target_size``.

    Files whose names or contents are bad are recorded in ``.errors`` of the
    result as ``(filename, message)`` and skipped; the load continues.
    """
    from PIL import Image

    mode = {1: "L", 3: "RGB"}[channels]
    records, errors = [], []
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if not os.path.isfile(path):
            continue
        try:
            age, gender, race = parse_utk_filename(name, num_races)
            with Image.open(path) as im:
                im = im.convert(mode).resize((target_size, target_size), Image.BILINEAR)
                px = np.asarray(im)
        except FilenameError as exc:
            errors.append((name, str(exc)))
            continue
        except (OSError, ValueError) as exc:
            errors.append((name, f"cannot decode image: {exc}"))
            continue
        img = to_unit_range(px)
        img = img[None] if channels == 1 else img.transpose(2, 0, 1)
        records.append(SampleRecord(np.ascontiguousarray(img), gender, race, age, name))
    for name, msg in errors:
        log.warning("skipped %s: %s", name, msg)
    return LoadedDataset(records, errors)


def write_images(records, directory):
    """Write records as 8-bit PNGs named by the UTKFace grammar."""
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    for r in records:
        px = np.clip(np.rint((r.image + 1.0) * 127.5), 0, 255).astype(np.uint8)
        px = px[0] if px.shape[0] == 1 else px.transpose(1, 2, 0)
        tag = re.sub(r"[^A-Za-z0-9]", "", r.source_id) or "x"
        Image.fromarray(px).save(os.path.join(directory, f"{r.age or 0}_{r.gender}_{r.race}_{tag}.png"))


def make_splits(records, n_test_per_race, val_fraction, seed=0, num_races=None):
    """Stratified test draw of ``n_test_per_race`` per race, then a random
    ``val_fraction`` of the remainder for validation; the rest is train."""
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    records = sorted(records, key=lambda r: r.source_id)
    ids = [r.source_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("source_id values must be unique")
    if num_races is None:
        num_races = max((r.race for r in records), default=-1) + 1
    rng = np.random.default_rng(seed)
    by_race = [[r for r in records if r.race == k] for k in range(num_races)]
    test, rest = [], []
    for k, group in enumerate(by_race):
        if n_test_per_race and len(group) <= n_test_per_race:
            raise ValueError(f"race class {k} has {len(group)} records, needs more than {n_test_per_race}")
        order = rng.permutation(len(group))
        test += [group[i] for i in order[:n_test_per_race]]
        rest += [group[i] for i in order[n_test_per_race:]]
    rest.sort(key=lambda r: r.source_id)
    order = rng.permutation(len(rest))
    n_val = int(round(val_fraction * len(rest)))
    val = sorted((rest[i] for i in order[:n_val]), key=lambda r: r.source_id)
    train = sorted((rest[i] for i in order[n_val:]), key=lambda r: r.source_id)
    test.sort(key=lambda r: r.source_id)
    return DatasetSplit(train, val, test, seed)


@dataclass
class SynthConfig:
    n_samples: int = 5000
    image_size: int = 32
    K: int = 5
    class_fractions: tuple = UTK_FRACTIONS
    gender_balance: float = 0.5
    nuisance_correlation: float = 0.6
    noise_std: float = 0.1
    seed: int = 0
    # races whose gender cue is attenuated with probability nuisance_correlation
    confound_races: tuple = (1, 2, 3, 4)
    bar_level: float = 0.9
    attenuation: float = 0.35
    bar_length: float = 0.75  # fractions of image_size
    bar_width: float = 0.2
    channels: int = 1

    def validate(self):
        fr = np.asarray(self.class_fractions, dtype=float)
        if fr.shape != (self.K,):
            raise ValueError(f"class_fractions: need {self.K} entries, got {fr.size}")
        if np.any(fr <= 0) or abs(fr.sum() - 1) > 1e-6:
            raise ValueError("class_fractions: must be positive and sum to 1")
        if self.image_size < 8 or self.image_size & (self.image_size - 1):
            raise ValueError(f"image_size: {self.image_size} is not a power of two >= 8")
        if not 0 <= self.nuisance_correlation <= 1:
            raise ValueError("nuisance_correlation: must lie in [0, 1]")
        if not 0 < self.gender_balance < 1:
            raise ValueError("gender_balance: must lie in (0, 1)")
        if self.n_samples < 1:
            raise ValueError("n_samples: must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std: must be nonnegative")
        if not 0 < self.bar_width <= self.bar_length < 1:
            raise ValueError("bar_length: need 0 < bar_width <= bar_length < 1")
        if self.image_size - max(2, round(self.image_size * self.bar_length)) < 4:
            raise ValueError(f"bar_length: bar does not fit a {self.image_size} pixel image")
        if any(not 0 <= k < self.K for k in self.confound_races):
            raise ValueError("confound_races: entries must lie in [0, K)")


def background_levels(K):
    """Background luminance assigned to each race."""
    return np.linspace(-0.85, 0.05, K)


def gen_synthetic(cfg: SynthConfig):
    """Biased toy faces: a bar of luminance ``bar_level`` whose orientation
    encodes gender (vertical = 0, horizontal = 1) drawn over a background
    whose luminance encodes race.

    With probability ``nuisance_correlation`` a sample of a race listed in
    ``confound_races`` has its bar-to-background contrast scaled by
    ``attenuation``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, s = cfg.n_samples, cfg.image_size
    races = rng.choice(cfg.K, size=n, p=np.asarray(cfg.class_fractions, dtype=float))
    genders = (rng.random(n) < cfg.gender_balance).astype(np.int64)
    bg = background_levels(cfg.K)[races] + rng.uniform(-0.05, 0.05, n)
    confounded = np.isin(races, cfg.confound_races) & (rng.random(n) < cfg.nuisance_correlation)
    contrast = (cfg.bar_level - bg) * np.where(confounded, cfg.attenuation, 1.0)
    length, thick = max(2, int(round(s * cfg.bar_length))), max(2, int(round(s * cfg.bar_width)))
    lo = np.stack([rng.integers(2, s - length - 1, n), rng.integers(2, s - thick - 1, n)], axis=1)
    noise = rng.normal(0.0, 1.0, (n, cfg.channels, s, s)) * cfg.noise_std

    out = []
    for i in range(n):
        img = np.full((s, s), bg[i])
        a, b = lo[i]
        if genders[i] == 0:
            img[a : a + length, b : b + thick] += contrast[i]
        else:
            img[b : b + thick, a : a + length] += contrast[i]
        img = np.clip(img[None] + noise[i], -1.0, 1.0).astype(np.float32)
        out.append(SampleRecord(img, int(genders[i]), int(races[i]), None, f"synth_{i:06d}"))
    return out


def write_synthetic(records, directory):
    """Raw little-endian float32 tensors plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    manifest = []
    for r in records:
        with open(os.path.join(directory, f"{r.source_id}.f32"), "wb") as fh:
            fh.write(np.ascontiguousarray(r.image, dtype="<f4").tobytes())
        manifest.append({"source_id": r.source_id, "gender": r.gender, "race": r.race,
                         "shape": list(r.image.shape)})
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def read_synthetic(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for m in manifest:
        raw = np.fromfile(os.path.join(directory, f"{m['source_id']}.f32"), dtype="<f4")
        out.append(SampleRecord(raw.astype(np.float32).reshape(m["shape"]), int(m["gender"]),
                                int(m["race"]), None, m["source_id"]))
    return out


def stack(records):
    """``(images [N,C,H,W], genders [N], races [N])`` arrays."""
    x = np.stack([r.image for r in records]).astype(np.float32)
    return x, np.array([r.gender for r in records]), np.array([r.race for r in records])


def race_fractions(records, num_races):
    counts = np.bincount([r.race for r in records], minlength=num_races)
    return counts / counts.sum()
