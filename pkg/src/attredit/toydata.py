"""Synthetic cartoon faces with per-region masks for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .masks import BinaryMask, RegionLibrary

HAIR_COLORS = {
    "black": (0.08, 0.07, 0.06),
    "brown": (0.40, 0.25, 0.12),
    "blond": (0.90, 0.80, 0.45),
    "gray": (0.65, 0.65, 0.65),
}


@dataclass
class ToyFace:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    regions: dict  # region name -> bool array


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def toy_face(subject_seed: int, size: int = 64, variant: int = 0, hair: Optional[str] = None,
             bald: bool = False) -> ToyFace:
    """Draw a face whose proportions and colours depend on ``subject_seed``.

    ``variant`` adds small pose/lighting jitter so one subject can supply
    several distinct exemplars.
    """
    rng = np.random.default_rng(subject_seed)
    jit = np.random.default_rng((subject_seed, variant))
    s = size / 64.0
    h = w = size
    skin = np.clip(rng.uniform([0.55, 0.40, 0.30], [0.95, 0.80, 0.70]), 0, 1)
    hair_rgb = np.array(HAIR_COLORS[hair] if hair else HAIR_COLORS[rng.choice(list(HAIR_COLORS))])
    bg = rng.uniform(0.2, 0.9, 3)
    face_rx = rng.uniform(14, 19) * s
    face_ry = rng.uniform(18, 22) * s
    eye_dx = rng.uniform(6, 9) * s
    dy, dx = (jit.uniform(-1.5, 1.5, 2) * s) if variant else (0.0, 0.0)
    light = 1.0 + (jit.uniform(-0.06, 0.06) if variant else 0.0)
    cy, cx = 32 * s + dy, 32 * s + dx

    regions = {}
    regions["cloth"] = np.zeros((h, w), bool)
    regions["cloth"][int(56 * s):, :] = True
    neck = np.zeros((h, w), bool)
    neck[int(cy + face_ry * 0.7):int(56 * s), int(cx - 6 * s):int(cx + 6 * s)] = True
    regions["neck"] = neck
    skin_m = _ellipse(h, w, cy, cx, face_ry, face_rx)
    hair_m = _ellipse(h, w, cy - 6 * s, cx, face_ry + 2 * s, face_rx + 3 * s) & ~skin_m
    hair_m |= skin_m & (np.mgrid[0:h, 0:w][0] < cy - face_ry * 0.55)
    skin_m &= ~hair_m
    ey = cy - 3 * s
    l_eye = _ellipse(h, w, ey, cx - eye_dx, 1.6 * s, 2.8 * s)
    r_eye = _ellipse(h, w, ey, cx + eye_dx, 1.6 * s, 2.8 * s)
    l_brow = _ellipse(h, w, ey - 4 * s, cx - eye_dx, 1.0 * s, 3.2 * s)
    r_brow = _ellipse(h, w, ey - 4 * s, cx + eye_dx, 1.0 * s, 3.2 * s)
    nose = _ellipse(h, w, cy + 3 * s, cx, 3.5 * s, 2.0 * s)
    u_lip = _ellipse(h, w, cy + 10 * s, cx, 1.2 * s, 5.0 * s)
    l_lip = _ellipse(h, w, cy + 12 * s, cx, 1.4 * s, 5.0 * s)
    for name, m in [("l_eye", l_eye), ("r_eye", r_eye), ("l_brow", l_brow), ("r_brow", r_brow),
                    ("nose", nose), ("u_lip", u_lip), ("l_lip", l_lip)]:
        regions[name] = m & skin_m
    parts = l_eye | r_eye | l_brow | r_brow | nose | u_lip | l_lip
    regions["skin"] = skin_m & ~parts
    regions["hair"] = np.zeros((h, w), bool) if bald else hair_m
    if bald:
        regions["skin"] = regions["skin"] | (hair_m & _ellipse(h, w, cy, cx, face_ry + 1, face_rx + 1))

    img = np.empty((h, w, 3))
    img[:] = bg
    img[regions["cloth"]] = rng.uniform(0.1, 0.9, 3)
    img[neck] = skin * 0.9
    img[regions["skin"]] = skin
    img[regions["hair"]] = hair_rgb
    img[l_eye & skin_m] = img[r_eye & skin_m] = (0.95, 0.95, 0.95)
    img[_ellipse(h, w, ey, cx - eye_dx, 1.0 * s, 1.0 * s)] = (0.1, 0.1, 0.2)
    img[_ellipse(h, w, ey, cx + eye_dx, 1.0 * s, 1.0 * s)] = (0.1, 0.1, 0.2)
    img[(l_brow | r_brow) & skin_m] = hair_rgb * 0.8
    img[nose & skin_m] = skin * 0.85
    img[(u_lip | l_lip) & skin_m] = (0.75, 0.30, 0.30)
    img = np.clip(img * light, 0, 1)
    return ToyFace(img, regions)


def blank_image(size: int = 64, value: float = 0.5) -> np.ndarray:
    return np.full((size, size, 3), value)


def region_library(faces: dict) -> RegionLibrary:
    """Build a :class:`RegionLibrary` from ``image_id -> ToyFace``."""
    lib = RegionLibrary()
    for image_id, face in faces.items():
        for name, m in face.regions.items():
            lib.add(image_id, name, BinaryMask(m))
    return lib


def save_png(image: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).save(path)
    return path


def write_subject(directory, subject_seed: int, n_images: int, size: int = 64) -> list[Path]:
    """Write ``n_images`` exemplars and their region masks under ``masks/``."""
    directory = Path(directory)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    paths = []
    for v in range(n_images):
        face = toy_face(subject_seed, size, variant=v)
        paths.append(save_png(face.image, directory / f"{v:03d}.png"))
        for name, m in face.regions.items():
            BinaryMask(m).save_png(directory / "masks" / f"{v:03d}_{name}.png")
    return paths


def write_attribute_pool(directory, attribute_ids, per_attribute: int, size: int = 64,
                         seed_offset: int = 10_000) -> Path:
    """One subdirectory of synthetic exemplars per attribute (toy reg set)."""
    directory = Path(directory)
    k = 0
    for attr in attribute_ids:
        for i in range(per_attribute):
            kw = {}
            if attr.endswith("_hair") and attr.split("_")[0] in HAIR_COLORS:
                kw["hair"] = attr.split("_")[0]
            if attr == "bald":
                kw["bald"] = True
            save_png(toy_face(seed_offset + k, size, **kw).image, directory / attr / f"reg{seed_offset + k}.png")
            k += 1
    return directory


TOY_ATTRIBUTES = ("blond_hair", "big_lips", "eyeglasses")


def make_toy_workspace(root, n_subjects: int = 2, attributes=TOY_ATTRIBUTES, methods=("cn_ip",),
                       matchers=("arcface", "adaface"), n_gallery: int = 3, n_probes: int = 1,
                       sampling_steps: int = 20, train_steps: int = 20, reg_per_attribute: int = 3,
                       seed: int = 0) -> Path:
    """Write synthetic subjects, a small regularization pool and ``manifest.toml``.

    Returns the manifest path. Defaults give the desk-scale smoke run:
    2 subjects x 3 attributes with stub clients.
    """
    import tomli_w

    root = Path(root)
    subjects = []
    for i in range(n_subjects):
        sid = f"s{i + 1:02d}"
        write_subject(root / "subjects" / sid, 1000 + 97 * i, n_gallery + n_probes)
        names = [f"{v:03d}.png" for v in range(n_gallery + n_probes)]
        subjects.append({"id": sid, "gallery": names[:n_gallery], "probes": names[n_gallery:]})
    dataset = {"name": "toy", "images": "subjects"}
    needs_reg = any(m in ("db_base", "db_prop") for m in methods)
    if needs_reg:
        editable = [a for a in attributes if a != "no_attribute"]
        write_attribute_pool(root / "reg", editable, reg_per_attribute)
        dataset["regularization"] = "reg"
    manifest = {
        "name": "toy",
        "backbone": "toy-v1",
        "methods": list(methods),
        "attributes": list(attributes),
        "matchers": list(matchers),
        "fmr_targets": [1e-4, 1e-3],
        "seed": seed,
        "output": "out",
        "dataset": dataset,
        "subjects": subjects,
        "clients": {"matcher": "stub", "vqa": "stub", "depth": "stub"},
        "train": {"steps": train_steps, "batch_size": 2, "reg_per_attribute": reg_per_attribute,
                  "require_full_reg": False},
        "sampling": {"steps": sampling_steps},
    }
    path = root / "manifest.toml"
    path.write_bytes(tomli_w.dumps(manifest).encode())
    return path
