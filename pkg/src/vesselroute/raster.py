"""Image-grid primitives: loading, thresholding, closing, distance transform, thinning.

Coordinates are ``(row, col)`` throughout. Spacing is given as ``(s_x, s_y)``:
``s_x`` scales column steps and ``s_y`` scales row steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidParameter, UnboundedDistance

Spacing = tuple[float, float]

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Grid:
    """A 2D scalar field with physical pixel spacing."""

    values: np.ndarray
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise InvalidParameter(f"grid must be a non-empty 2D array, got shape {self.values.shape}")
        check_spacing(self.spacing)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


def check_spacing(spacing: Spacing) -> Spacing:
    sx, sy = (float(s) for s in spacing)
    if not (sx > 0 and sy > 0 and np.isfinite(sx) and np.isfinite(sy)):
        raise InvalidParameter(f"spacing must be positive, got {spacing}")
    return sx, sy


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8/16-bit grayscale PNG or PGM and rescale it to [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            top = 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            top = 255.0
    if arr.ndim != 2:
        raise InvalidParameter(f"{path}: expected a single-channel image")
    return np.clip(arr / top, 0.0, 1.0)


def save_image(path: str | Path, values: np.ndarray, bits: int = 8) -> None:
    """Write values in [0, 1] as a grayscale PNG/PGM with a fixed encoder setup."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        im = Image.fromarray(np.round(v * 65535.0).astype(np.uint16))
    elif bits == 8:
        im = Image.fromarray(np.round(v * 255.0).astype(np.uint8))
    else:
        raise InvalidParameter("bits must be 8 or 16")
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".pnm"):
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG", optimize=False, compress_level=6)


def binarize(prob: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Threshold a probability map: pixel is foreground iff value >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidParameter(f"tau must lie in [0, 1], got {tau}")
    return np.asarray(prob) >= tau


def _square_kernel(kernel: int | np.ndarray) -> np.ndarray:
    if isinstance(kernel, (int, np.integer)):
        k = int(kernel)
        if k < 1 or k % 2 == 0:
            raise InvalidParameter(f"kernel size must be a positive odd integer, got {k}")
        return np.ones((k, k), dtype=bool)
    se = np.asarray(kernel, dtype=bool)
    if se.ndim != 2 or se.shape[0] != se.shape[1] or se.shape[0] % 2 == 0 or not se.any():
        raise InvalidParameter(f"structuring element must be a nonempty odd square, got shape {se.shape}")
    return se


def morphological_close(mask: np.ndarray, kernel: int | np.ndarray = 3) -> np.ndarray:
    """Dilate then erode; everything outside the grid counts as background.

    The mask is padded by the kernel radius so the result equals closing on
    the infinite plane restricted to the grid.
    """
    se = _square_kernel(kernel)
    r = se.shape[0] // 2
    m = np.pad(np.asarray(mask, dtype=bool), r, constant_values=False)
    m = ndimage.binary_dilation(m, structure=se, border_value=0)
    m = ndimage.binary_erosion(m, structure=se, border_value=0)
    return m[r:m.shape[0] - r, r:m.shape[1] - r] if r else m


def distance_transform(mask: np.ndarray, spacing: Spacing = (1.0, 1.0)) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest background pixel center."""
    sx, sy = check_spacing(spacing)
    m = np.asarray(mask, dtype=bool)
    if m.all():
        raise UnboundedDistance("mask has no background pixel; distances are unbounded")
    return ndimage.distance_transform_edt(m, sampling=(sy, sx))


def neighbor_count(img: np.ndarray) -> np.ndarray:
    """Number of 8-neighbours set, evaluated at every pixel."""
    a = np.asarray(img, dtype=np.uint8)
    n = ndimage.convolve(a, np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=np.uint8),
                         mode="constant", cval=0)
    return n.astype(np.int32)


def count_components(img: np.ndarray) -> int:
    return int(ndimage.label(np.asarray(img, dtype=bool), structure=_EIGHT)[1])


# Neighbour bits, clockwise from north.
_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _neighbourhood_codes(img: np.ndarray) -> np.ndarray:
    p = np.pad(img.astype(np.uint16), 1)
    h, w = img.shape
    code = np.zeros((h, w), dtype=np.uint16)
    for bit, (dr, dc) in enumerate(_OFFSETS):
        code |= p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] << bit
    return code


def _bits(code: int) -> list[int]:
    return [(code >> k) & 1 for k in range(8)]


def _is_simple(code: int) -> bool:
    """8-connected foreground / 4-connected background simple-point test."""
    b = _bits(code)
    if sum(b) == 0:
        return False

    def comps(members: list[int], adjacent) -> int:
        seen: set[int] = set()
        n = 0
        for m in members:
            if m in seen:
                continue
            n += 1
            stack = [m]
            while stack:
                x = stack.pop()
                if x in seen:
                    continue
                seen.add(x)
                stack.extend(y for y in members if y not in seen and adjacent(x, y))
        return n

    pos = [_OFFSETS[k] for k in range(8)]

    def adj8(x: int, y: int) -> bool:
        return max(abs(pos[x][0] - pos[y][0]), abs(pos[x][1] - pos[y][1])) == 1

    def adj4(x: int, y: int) -> bool:
        return abs(pos[x][0] - pos[y][0]) + abs(pos[x][1] - pos[y][1]) == 1

    fg = comps([k for k in range(8) if b[k]], adj8)
    # Background components that touch the centre through a 4-neighbour.
    bg_members = [k for k in range(8) if not b[k]]
    seen: set[int] = set()
    bg = 0
    for start in (k for k in (0, 2, 4, 6) if not b[k]):
        if start in seen:
            continue
        bg += 1
        stack = [start]
        while stack:
            x = stack.pop()
            if x in seen:
                continue
            seen.add(x)
            stack.extend(y for y in bg_members if y not in seen and adj4(x, y))
    return fg == 1 and bg == 1


def _build_tables() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deletion tables for the two Guo-Hall subiterations plus the simple-point table."""
    simple = np.zeros(256, dtype=bool)
    sub1 = np.zeros(256, dtype=bool)
    sub2 = np.zeros(256, dtype=bool)
    for code in range(256):
        b = _bits(code)
        # x1..x8 counter-clockwise from east
        x = [b[2], b[1], b[0], b[7], b[6], b[5], b[4], b[3]]
        x9 = x + [x[0]]
        crossing = sum(1 for i in range(4) if not x9[2 * i] and (x9[2 * i + 1] or x9[2 * i + 2]))
        n1 = sum(1 for k in range(4) if x9[2 * k] or x9[2 * k + 1])
        n2 = sum(1 for k in range(4) if x9[2 * k + 1] or x9[2 * k + 2])
        base = crossing == 1 and 2 <= min(n1, n2) <= 3
        x1, x2, x3, x4, x5, x6, x7, x8 = x
        sub1[code] = base and not ((x2 or x3 or not x8) and x1)
        sub2[code] = base and not ((x6 or x7 or not x4) and x5)
        simple[code] = _is_simple(code)
    return sub1, sub2, simple


_SUB1, _SUB2, _SIMPLE = _build_tables()


def _code_at(img: np.ndarray, r: int, c: int) -> int:
    h, w = img.shape
    code = 0
    for bit, (dr, dc) in enumerate(_OFFSETS):
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w and img[rr, cc]:
            code |= 1 << bit
    return code


def _sequential_delete(img: np.ndarray, candidates: np.ndarray, table: np.ndarray) -> int:
    """Delete candidates in raster order, re-checking the table and simplicity on the live image."""
    removed = 0
    for r, c in zip(*np.nonzero(candidates)):
        code = _code_at(img, r, c)
        if table[code] and _SIMPLE[code]:
            img[r, c] = False
            removed += 1
    return removed


def remove_redundant(skel: np.ndarray) -> np.ndarray:
    """Strip simple, non-terminal pixels until the skeleton is one pixel wide.

    Deletion is sequential in raster order so topology is preserved exactly;
    pixels with a single neighbour are never touched.
    """
    img = np.asarray(skel, dtype=bool).copy()
    keep_ends = np.zeros(256, dtype=bool)
    for code in range(256):
        keep_ends[code] = bin(code).count("1") >= 2
    while True:
        codes = _neighbourhood_codes(img)
        cand = img & _SIMPLE[codes] & keep_ends[codes]
        if not cand.any():
            return img
        if _sequential_delete(img, cand, keep_ends) == 0:
            return img


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Two-subiteration parallel thinning (Guo-Hall tables) plus a redundancy sweep.

    A subiteration whose parallel deletion would change the number of
    8-connected components is redone sequentially with a simple-point guard.
    The sweep strips the remaining simple non-terminal pixels so every
    surviving pixel with two or more neighbours is needed for connectivity.
    """
    img = np.asarray(mask, dtype=bool).copy()
    if not img.any():
        return img
    n_comp = count_components(img)
    changed = True
    while changed:
        changed = False
        for table in (_SUB1, _SUB2):
            codes = _neighbourhood_codes(img)
            cand = img & table[codes]
            if not cand.any():
                continue
            trial = img & ~cand
            if count_components(trial) == n_comp:
                img = trial
                changed = True
            elif _sequential_delete(img, cand, table):
                changed = True
    return remove_redundant(img)


def skeleton_coords(skel: np.ndarray) -> list[tuple[int, int]]:
    """Foreground pixels of a skeleton in (row, col) order."""
    rows, cols = np.nonzero(skel)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]
