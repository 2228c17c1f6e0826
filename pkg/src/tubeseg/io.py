"""PNG image/mask I/O, dataset manifests and atomic file writes."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(TypeError):
    pass


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _atomic(path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.chmod(tmp, 0o666 & ~_umask())  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    _atomic(path, lambda fh: fh.write(data))


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return img


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageFormatError(f"{path}: expected (H, W, 3) uint8 RGB, got {image.shape} {image.dtype}")
    _atomic(path, lambda fh: Image.fromarray(image, mode="RGB").save(fh, format="PNG"))


def read_image(path) -> np.ndarray:
    img = _open(path)
    if img.mode == "RGBA":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise ImageFormatError(f"{path}: expected an 8-bit RGB image, found mode {img.mode}")
    return np.asarray(img, dtype=np.uint8).copy()


def write_mask(path, mask: np.ndarray, instances: bool = False) -> None:
    """Class masks as 8-bit gray PNG; instance maps (``instances=True``) as 16-bit."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ImageFormatError(f"{path}: mask must be 2-d, got shape {mask.shape}")
    limit = 65535 if instances else 255
    if mask.size and (mask.min() < 0 or mask.max() > limit):
        raise ValueError(f"{path}: mask values outside 0..{limit}")
    if instances:
        img = Image.fromarray(mask.astype(np.uint16))
    else:
        img = Image.fromarray(mask.astype(np.uint8), mode="L")
    _atomic(path, lambda fh: img.save(fh, format="PNG"))


def read_mask(path) -> np.ndarray:
    img = _open(path)
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8).copy()
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.asarray(img).astype(np.int32)
    raise ImageFormatError(f"{path}: expected a single-channel mask, found mode {img.mode}")


@dataclass
class Record:
    image: Path
    mask2: Path
    mask3: Path
    instances: Path
    split: str = "train"

    @property
    def name(self) -> str:
        return self.image.stem


def write_manifest(path, records) -> None:
    """Tab-separated: image, 2-class mask, 3-class mask, instance map, split tag.

    Paths are stored relative to the manifest's directory when possible.
    """
    base = Path(path).resolve().parent
    lines = ["# image\tmask2\tmask3\tinstances\tsplit"]
    for r in records:
        cols = []
        for p in (r.image, r.mask2, r.mask3, r.instances):
            p = Path(p).resolve()
            try:
                cols.append(str(p.relative_to(base)))
            except ValueError:
                cols.append(str(p))
        lines.append("\t".join(cols + [r.split]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path, check: bool = True) -> list:
    path = Path(path)
    base = path.resolve().parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (4, 5):
            raise ValueError(f"{path}:{lineno}: expected 4 paths and an optional split tag, got {len(cols)} fields")
        paths = [base / c if not Path(c).is_absolute() else Path(c) for c in cols[:4]]
        rec = Record(*paths, split=cols[4] if len(cols) == 5 else "train")
        if check:
            missing = [str(p) for p in paths if not p.exists()]
            if missing:
                raise FileNotFoundError(f"{path}:{lineno}: missing files {missing}")
        records.append(rec)
    return records


def load_record(rec: Record) -> dict:
    image = read_image(rec.image)
    out = {
        "name": rec.name,
        "image": image,
        "mask2": read_mask(rec.mask2),
        "mask3": read_mask(rec.mask3),
        "instances": read_mask(rec.instances),
    }
    for key in ("mask2", "mask3", "instances"):
        if out[key].shape != image.shape[:2]:
            raise ValueError(f"{rec.image}: {key} extents {out[key].shape} != image extents {image.shape[:2]}")
    return out
