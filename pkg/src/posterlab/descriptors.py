"""Per-poster feature channels.

Every extractor returns a 1-D float64 vector of fixed length for a given
configuration. Histogram channels are L1-normalized per block and come back
all-zero when there is nothing to count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pfv
from .codebook import Codebook, assign_many
from .imageops import (
    CANONICAL_SIZE,
    GIST_SIZE,
    GradientField,
    gradients,
    resize,
    rgb_to_lab,
    to_grayscale,
)

HANDCRAFT_CHANNELS = ("lab", "lbp", "hog", "cohog", "ecohog", "gist", "siftbof")
BUILTIN_CHANNELS = HANDCRAFT_CHANNELS + ("emotion",)

EXPRESSIONS = (
    "neutral",
    "happiness",
    "surprise",
    "sadness",
    "anger",
    "disgust",
    "fear",
    "contempt",
)


@dataclass
class FeatureVector:
    channel: str
    poster_id: str
    values: np.ndarray


def _l1(hist: np.ndarray) -> np.ndarray:
    total = hist.sum()
    return hist / total if total > 0 else np.zeros_like(hist, dtype=np.float64)


# --- color -----------------------------------------------------------------

LAB_BINS = 30
_NEUTRAL_SNAP = 1e-6


def lab_histogram(lab: np.ndarray, bins: int = LAB_BINS) -> np.ndarray:
    """Concatenated L, a, b histograms (L over [0, 100], a/b over [-128, 128))."""
    lab = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    if lab.shape[0] == 0:
        raise ValueError("lab_histogram on an empty image")
    ab = lab[:, 1:].copy()
    # neutral pixels sit exactly on the a = 0 / b = 0 bin edge; keep float noise
    # from scattering them across two bins
    ab[np.abs(ab) < _NEUTRAL_SNAP] = 0.0
    blocks = []
    for values, lo, hi in (
        (lab[:, 0], 0.0, 100.0),
        (ab[:, 0], -128.0, 128.0),
        (ab[:, 1], -128.0, 128.0),
    ):
        idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
        idx = np.clip(idx, 0, bins - 1)
        blocks.append(_l1(np.bincount(idx, minlength=bins).astype(np.float64)))
    return np.concatenate(blocks)


# --- LBP -------------------------------------------------------------------

# clockwise from the top-left neighbour; bit i is set when neighbour i is
# strictly brighter than the centre
_LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _transitions(code: int) -> int:
    bits = [(code >> i) & 1 for i in range(8)]
    return sum(bits[i] != bits[(i + 1) % 8] for i in range(8))


def _uniform_table() -> np.ndarray:
    table = np.full(256, 58, dtype=np.intp)
    uniform = [c for c in range(256) if _transitions(c) <= 2]
    assert len(uniform) == 58
    table[uniform] = np.arange(58)
    return table


LBP_UNIFORM_TABLE = _uniform_table()


def lbp_codes(gray: np.ndarray) -> np.ndarray:
    """8-neighbour LBP code for every interior pixel."""
    g = np.asarray(gray, dtype=np.int32)
    if g.ndim != 2 or min(g.shape) < 3:
        raise ValueError(f"LBP needs a grayscale image of at least 3x3, got {g.shape}")
    h, w = g.shape
    center = g[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.intp)
    for bit, (dy, dx) in enumerate(_LBP_OFFSETS):
        neighbour = g[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        codes |= (neighbour > center).astype(np.intp) << bit
    return codes


def lbp_histogram(gray: np.ndarray) -> np.ndarray:
    """59 bins: 58 uniform patterns in code order, then one bin for the rest."""
    mapped = LBP_UNIFORM_TABLE[lbp_codes(gray)]
    return _l1(np.bincount(mapped.ravel(), minlength=59).astype(np.float64))


# --- HOG -------------------------------------------------------------------

HOG_CELL = 8
HOG_BINS = 9
HOG_BLOCK = 2
HOG_CLIP = 0.2
_HOG_EPS = 1e-5


def hog_cells(gray: np.ndarray, cell: int = HOG_CELL, bins: int = HOG_BINS) -> np.ndarray:
    """Per-cell orientation histograms, shape ``(rows, cols, bins)``.

    Bin centres sit at ``i * pi / bins``; each pixel votes its magnitude into
    the two nearest centres.
    """
    h, w = gray.shape
    if h % cell or w % cell:
        raise ValueError(f"image {w}x{h} is not a multiple of the {cell}px cell size")
    field = gradients(gray, "unsigned")
    pos = field.orientation / (np.pi / bins)
    lo = np.floor(pos)
    w_hi = pos - lo
    lo = lo.astype(np.intp) % bins
    hi = (lo + 1) % bins
    rows, cols = h // cell, w // cell
    cell_idx = (np.arange(h)[:, None] // cell) * cols + (np.arange(w)[None, :] // cell)
    mag = field.magnitude
    n = rows * cols * bins
    hist = np.bincount((cell_idx * bins + lo).ravel(), (mag * (1 - w_hi)).ravel(), minlength=n)
    hist += np.bincount((cell_idx * bins + hi).ravel(), (mag * w_hi).ravel(), minlength=n)
    return hist.reshape(rows, cols, bins)


def _l2_hys(v: np.ndarray, clip: float = HOG_CLIP) -> np.ndarray:
    v = v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + _HOG_EPS**2)
    v = np.minimum(v, clip)
    return v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + _HOG_EPS**2)


def hog_blocks(gray: np.ndarray, cell: int = HOG_CELL, bins: int = HOG_BINS) -> np.ndarray:
    """Normalized block descriptors, shape ``(block_rows, block_cols, 4 * bins)``."""
    cells = hog_cells(gray, cell, bins)
    rows, cols = cells.shape[:2]
    if rows < HOG_BLOCK or cols < HOG_BLOCK:
        raise ValueError("image too small for a single HOG block")
    blocks = np.concatenate(
        [
            cells[:-1, :-1],
            cells[:-1, 1:],
            cells[1:, :-1],
            cells[1:, 1:],
        ],
        axis=-1,
    )
    return _l2_hys(blocks)


def hog(gray: np.ndarray) -> np.ndarray:
    return hog_blocks(gray).ravel()


def hog_dim(width: int = CANONICAL_SIZE[0], height: int = CANONICAL_SIZE[1]) -> int:
    return (width // HOG_CELL - 1) * (height // HOG_CELL - 1) * 4 * HOG_BINS


# --- CoHOG / ECoHOG --------------------------------------------------------

COHOG_BINS = 8
COHOG_TAU = 1.0
COHOG_GRID = 2


def _cohog_offsets() -> tuple[tuple[int, int], ...]:
    # zero offset plus the 30 lattice offsets of the upper half-disc r^2 <= 18
    # (dy < 0 is "up" since rows grow downward)
    half = [
        (dx, dy)
        for dy in range(-4, 1)
        for dx in range(-4, 5)
        if dx * dx + dy * dy <= 18 and (dy < 0 or dx > 0)
    ]
    return ((0, 0),) + tuple(half)


COHOG_OFFSETS = _cohog_offsets()
COHOG_DIM = COHOG_GRID * COHOG_GRID * len(COHOG_OFFSETS) * COHOG_BINS * COHOG_BINS


def cooccurrence_histogram(
    field: GradientField, weighted: bool = False, tau: float = COHOG_TAU
) -> np.ndarray:
    """Orientation co-occurrence matrices from a gradient field.

    Output layout is ``(grid cell, offset, bin_p * 8 + bin_q)`` flattened, grid
    cells ordered UL, UR, LL, LR. A pair is counted in the grid cell holding its
    first pixel; pairs touching a pixel with magnitude below ``tau`` are dropped.
    """
    mag = field.magnitude
    h, w = mag.shape
    if h < 2 * COHOG_GRID or w < 2 * COHOG_GRID:
        raise ValueError(f"image too small for CoHOG: {w}x{h}")
    nb = COHOG_BINS
    ori = field.orientation % np.pi if field.signed else field.orientation
    q = np.minimum((ori / (np.pi / nb)).astype(np.intp), nb - 1)
    valid = mag >= tau
    col_cell = (np.arange(w) >= w // 2).astype(np.intp)
    row_cell = (np.arange(h) >= h // 2).astype(np.intp)
    grid = row_cell[:, None] * COHOG_GRID + col_cell[None, :]

    n_off = len(COHOG_OFFSETS)
    out = np.zeros((COHOG_GRID * COHOG_GRID, n_off, nb * nb))
    for k, (dx, dy) in enumerate(COHOG_OFFSETS):
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        yq = slice(ys.start + dy, ys.stop + dy)
        xq = slice(xs.start + dx, xs.stop + dx)
        pair_ok = valid[ys, xs] & valid[yq, xq]
        idx = grid[ys, xs] * (nb * nb) + q[ys, xs] * nb + q[yq, xq]
        if weighted:
            weights = (mag[ys, xs] * mag[yq, xq])[pair_ok]
        else:
            weights = None
        counts = np.bincount(idx[pair_ok], weights, minlength=COHOG_GRID**2 * nb * nb)
        out[:, k, :] = counts.reshape(COHOG_GRID**2, nb * nb)
    totals = out.sum(axis=2, keepdims=True)
    out = np.divide(out, totals, out=np.zeros_like(out), where=totals > 0)
    return out.ravel()


def cohog(gray: np.ndarray, tau: float = COHOG_TAU) -> np.ndarray:
    return cooccurrence_histogram(gradients(gray, "unsigned"), weighted=False, tau=tau)


def ecohog(gray: np.ndarray, tau: float = COHOG_TAU) -> np.ndarray:
    return cooccurrence_histogram(gradients(gray, "unsigned"), weighted=True, tau=tau)


# --- GIST ------------------------------------------------------------------

GIST_SCALES = 4
GIST_ORIENTATIONS = 8
GIST_GRID = 4
GIST_DIM = GIST_SCALES * GIST_ORIENTATIONS * GIST_GRID * GIST_GRID
GIST_PEAK_FREQUENCIES = tuple(0.25 / 2**s for s in range(GIST_SCALES))  # cycles/pixel
_GIST_RADIAL_SIGMA = 0.3  # in ln(frequency) units; one octave is ln 2
_GIST_ANGULAR_SIGMA = np.pi / 18


@lru_cache(maxsize=4)
def gist_filter_bank(height: int, width: int) -> np.ndarray:
    """Frequency-domain log-Gabor bank, shape ``(scales * orientations, H, W)``.

    Each filter is even (symmetric under f -> -f) and zero at DC.
    """
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.hypot(fx, fy)
    angle = np.mod(np.arctan2(fy, fx), np.pi)
    with np.errstate(divide="ignore"):
        log_r = np.log(radius)
    bank = np.empty((GIST_SCALES * GIST_ORIENTATIONS, height, width))
    for s, f0 in enumerate(GIST_PEAK_FREQUENCIES):
        radial = np.exp(-((log_r - np.log(f0)) ** 2) / (2 * _GIST_RADIAL_SIGMA**2))
        radial[0, 0] = 0.0
        for o in range(GIST_ORIENTATIONS):
            theta = o * np.pi / GIST_ORIENTATIONS
            d = np.abs(angle - theta)
            d = np.minimum(d, np.pi - d)
            angular = np.exp(-(d**2) / (2 * _GIST_ANGULAR_SIGMA**2))
            bank[s * GIST_ORIENTATIONS + o] = radial * angular
    # on the Nyquist row/column +0.5 and -0.5 alias to one sample, so the
    # angle above is not symmetric there; average with the mirrored bank
    mirrored = np.roll(bank[:, ::-1, ::-1], 1, axis=(1, 2))
    bank = 0.5 * (bank + mirrored)
    bank.setflags(write=False)
    return bank


def gist_energies(gray: np.ndarray) -> np.ndarray:
    """Mean squared filter response per grid cell, shape ``(32, 4, 4)``."""
    img = np.asarray(gray, dtype=np.float64)
    h, w = img.shape
    if h % GIST_GRID or w % GIST_GRID:
        raise ValueError(f"GIST input {w}x{h} must divide into a {GIST_GRID}x{GIST_GRID} grid")
    img = img - img.mean()
    spectrum = np.fft.fft2(img)
    bank = gist_filter_bank(h, w)
    responses = np.fft.ifft2(spectrum[None] * bank, axes=(-2, -1))
    energy = responses.real**2 + responses.imag**2
    gh, gw = h // GIST_GRID, w // GIST_GRID
    return energy.reshape(len(bank), GIST_GRID, gh, GIST_GRID, gw).mean(axis=(2, 4))


def gist(gray: np.ndarray) -> np.ndarray:
    """512-dim GIST vector (filter-major, then grid row, grid column), unit L2 norm."""
    if gray.shape[::-1] != GIST_SIZE:
        gray = resize(gray, *GIST_SIZE)
    v = gist_energies(gray).ravel()
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return np.zeros(GIST_DIM)
    return v / norm


# --- dense SIFT + bag of features ------------------------------------------

SIFT_STRIDE = 16
SIFT_BIN_SIZE = 8
SIFT_SPATIAL_BINS = 4
SIFT_ORIENTATIONS = 8
SIFT_DIM = SIFT_SPATIAL_BINS * SIFT_SPATIAL_BINS * SIFT_ORIENTATIONS
SIFT_CLIP = 0.2


@lru_cache(maxsize=2)
def _sift_spatial_weights(bin_size: int) -> np.ndarray:
    """(patch pixels, 16 spatial bins) bilinear weights times the Gaussian window."""
    nb = SIFT_SPATIAL_BINS
    patch = nb * bin_size
    coord = (np.arange(patch) + 0.5) / bin_size - 0.5
    axis = np.zeros((patch, nb))
    for i, c in enumerate(coord):
        b0 = int(np.floor(c))
        frac = c - b0
        if 0 <= b0 < nb:
            axis[i, b0] += 1 - frac
        if 0 <= b0 + 1 < nb:
            axis[i, b0 + 1] += frac
    sigma = patch / 2.0
    centre = (patch - 1) / 2.0
    g = np.exp(-((np.arange(patch) - centre) ** 2) / (2 * sigma**2))
    # weights[y, x, by, bx] = axis[y, by] * axis[x, bx] * g[y] * g[x]
    wy = axis * g[:, None]
    wx = axis * g[:, None]
    weights = np.einsum("ya,xb->yxab", wy, wx).reshape(patch * patch, nb * nb)
    weights.setflags(write=False)
    return weights


def dense_grid(width: int, height: int, stride: int = SIFT_STRIDE, bin_size: int = SIFT_BIN_SIZE):
    """Top-left corners (x, y) of every full patch on the dense grid."""
    patch = SIFT_SPATIAL_BINS * bin_size
    xs = range(0, width - patch + 1, stride)
    ys = range(0, height - patch + 1, stride)
    return [(x, y) for y in ys for x in xs]


def dense_sift(
    gray: np.ndarray, stride: int = SIFT_STRIDE, bin_size: int = SIFT_BIN_SIZE
) -> np.ndarray:
    """128-dim SIFT descriptors on a dense grid, shape ``(n_keypoints, 128)``.

    Layout per descriptor: (spatial row, spatial column, orientation).
    """
    field = gradients(np.asarray(gray, dtype=np.float64), "signed")
    h, w = field.magnitude.shape
    corners = dense_grid(w, h, stride, bin_size)
    if not corners:
        return np.zeros((0, SIFT_DIM))
    patch = SIFT_SPATIAL_BINS * bin_size
    spatial = _sift_spatial_weights(bin_size)

    nori = SIFT_ORIENTATIONS
    pos = field.orientation / (2 * np.pi / nori)
    lo = np.floor(pos)
    w_hi = pos - lo
    lo = lo.astype(np.intp) % nori
    hi = (lo + 1) % nori
    # per-pixel orientation votes, (H, W, 8)
    votes = np.zeros((h, w, nori))
    rows, cols = np.indices((h, w))
    np.add.at(votes, (rows, cols, lo), field.magnitude * (1 - w_hi))
    np.add.at(votes, (rows, cols, hi), field.magnitude * w_hi)

    patches = np.stack([votes[y : y + patch, x : x + patch].reshape(-1, nori) for x, y in corners])
    desc = np.einsum("ps,kpo->kso", spatial, patches).reshape(len(corners), SIFT_DIM)
    return normalize_sift(desc)


def normalize_sift(desc: np.ndarray, clip: float = SIFT_CLIP) -> np.ndarray:
    desc = np.array(desc, dtype=np.float64)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    desc = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 1e-12)
    desc = np.minimum(desc, clip)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    return np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 1e-12)


def bof_histogram(descriptors: np.ndarray, codebook: Codebook) -> np.ndarray:
    if codebook is None or codebook.k == 0:
        raise ValueError("bag-of-features encoding needs a non-empty codebook")
    words = assign_many(codebook, descriptors)
    return _l1(np.bincount(words, minlength=codebook.k).astype(np.float64))


def sift_bof(gray: np.ndarray, codebook: Codebook) -> np.ndarray:
    return bof_histogram(dense_sift(gray), codebook)


# --- facial expressions ----------------------------------------------------


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class FaceAnnotation:
    bbox: tuple[float, float, float, float]  # x, y, w, h in image pixels
    expression: str
    confidence: float = 1.0

    def __post_init__(self):
        if self.expression not in EXPRESSIONS:
            raise AnnotationError(f"unknown expression {self.expression!r}")
        if len(self.bbox) != 4 or self.bbox[2] < 0 or self.bbox[3] < 0:
            raise AnnotationError(f"bad bbox {self.bbox!r}")


def load_face_annotations(path: Path | str) -> list[FaceAnnotation]:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{path}: invalid JSON ({exc.msg})") from None
    faces = doc.get("faces", []) if isinstance(doc, dict) else None
    if not isinstance(faces, list):
        raise AnnotationError(f"{path}: expected an object with a 'faces' list")
    out = []
    for face in faces:
        try:
            out.append(
                FaceAnnotation(
                    bbox=tuple(float(v) for v in face["bbox"]),
                    expression=str(face["expression"]).lower(),
                    confidence=float(face.get("confidence", 1.0)),
                )
            )
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"{path}: malformed face entry {face!r}") from exc
    return out


def _clamp_bbox(bbox, width: float, height: float):
    x, y, w, h = bbox
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, width), min(y + h, height)
    if x1 < x0 or y1 < y0:
        return None
    return x0, y0, x1, y1


def emotion_histogram(
    faces: Sequence[FaceAnnotation], image_size: tuple[int, int], normalize: str = "quadrant"
) -> np.ndarray:
    """32 bins: quadrant (UL, UR, LL, LR) times the 8 expressions.

    Each face counts in the quadrant holding the centre of its (clamped) box.
    ``normalize="quadrant"`` L1-normalizes each 8-bin block separately;
    ``"global"`` normalizes the whole vector instead.
    """
    width, height = image_size
    hist = np.zeros((4, len(EXPRESSIONS)))
    for face in faces:
        box = _clamp_bbox(face.bbox, width, height)
        if box is None:
            raise AnnotationError(f"face bbox {face.bbox} lies outside the {width}x{height} image")
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        quadrant = 2 * int(cy >= height // 2) + int(cx >= width // 2)
        hist[quadrant, EXPRESSIONS.index(face.expression)] += 1
    if normalize == "quadrant":
        return np.concatenate([_l1(row) for row in hist])
    if normalize == "global":
        return _l1(hist.ravel())
    raise ValueError(f"normalize must be 'quadrant' or 'global', got {normalize!r}")


def crop_faces(faces: Sequence[FaceAnnotation], box: tuple[int, int, int, int]) -> list[FaceAnnotation]:
    """Faces re-expressed in a crop's coordinates; faces whose centre falls outside are dropped."""
    bx, by, bw, bh = box
    out = []
    for face in faces:
        x, y, w, h = face.bbox
        cx, cy = x + w / 2, y + h / 2
        if bx <= cx < bx + bw and by <= cy < by + bh:
            out.append(FaceAnnotation((x - bx, y - by, w, h), face.expression, face.confidence))
    return out


# --- channel dispatch ------------------------------------------------------


def canonical_gray(image: np.ndarray) -> np.ndarray:
    return to_grayscale(resize(image, *CANONICAL_SIZE))


def channel_dim(channel: str, codebook_k: int | None = None) -> int:
    dims = {
        "lab": 3 * LAB_BINS,
        "lbp": 59,
        "hog": hog_dim(),
        "cohog": COHOG_DIM,
        "ecohog": COHOG_DIM,
        "gist": GIST_DIM,
        "emotion": 4 * len(EXPRESSIONS),
    }
    if channel == "siftbof":
        if not codebook_k:
            raise ValueError("siftbof dimension depends on the codebook size")
        return codebook_k
    return dims[channel]


def extract_channel(
    channel: str,
    image: np.ndarray,
    faces: Sequence[FaceAnnotation] | None = None,
    codebook: Codebook | None = None,
) -> np.ndarray:
    """Compute one built-in channel for an 8-bit image at its native size.

    Appearance channels work on the canonical 256x384 resize; ``emotion``
    uses ``faces`` in the image's own pixel coordinates.
    """
    if channel == "emotion":
        h, w = image.shape[:2]
        return emotion_histogram(faces or [], (w, h))
    if channel == "lab":
        rgb = image if image.ndim == 3 else np.repeat(image[..., None], 3, axis=2)
        return lab_histogram(rgb_to_lab(resize(rgb, *CANONICAL_SIZE)))
    if channel == "gist":
        return gist(resize(to_grayscale(image), *GIST_SIZE))
    gray = canonical_gray(image)
    if channel == "lbp":
        return lbp_histogram(gray)
    if channel == "hog":
        return hog(gray)
    if channel == "cohog":
        return cohog(gray)
    if channel == "ecohog":
        return ecohog(gray)
    if channel == "siftbof":
        return sift_bof(gray, codebook)
    raise ValueError(f"unknown channel {channel!r}")


def load_external_features(path: Path | str) -> list[FeatureVector]:
    """Read precomputed (mid-level / deep) features from a PFV file."""
    channel, ids, mat = pfv.read(path)
    return [FeatureVector(channel, pid, mat[i].astype(np.float64)) for i, pid in enumerate(ids)]


def write_external_features(path: Path | str, vectors: Sequence[FeatureVector]) -> None:
    pfv.write_records(path, vectors)
