"""Sequence ingestion, synchronization, background learning and detection.

The capture convention: each camera writes 8-bit binary PGM files named
``<camera_id>_<index:08d>_<timestamp_us:016d>.pgm`` where ``index`` is the
camera's own save counter and the timestamp comes from the camera's own
clock. Every N triggers both cameras record a deliberately underexposed
*black frame*; those are the anchors for synchronizing the two
independently time-stamped streams.

Background learning is a sliding-window temporal median per pixel,
maintained incrementally with one 256-bin histogram per pixel so that a
301-frame window costs O(1) amortized work per frame. Background removal
takes the absolute difference and resamples it into undistorted pixel
space, so everything downstream works with distortion-free coordinates.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Intrinsics
from .quadrics import Conic2D, NotAnEllipseError, fit_ellipse

__all__ = [
    "BLACK_FRAME_THRESHOLD",
    "BackgroundStream",
    "BubbleDetection",
    "DetectionParams",
    "DropEvent",
    "Frame",
    "FrameInfo",
    "SlidingMedian",
    "StereoPair",
    "SyncResult",
    "UndistortMap",
    "UnsynchronizableError",
    "bilinear_sample",
    "build_undistort_maps",
    "canny_edges",
    "convex_hull",
    "detect_black_frames",
    "detect_bubbles",
    "frame_filename",
    "is_black_frame",
    "median_background",
    "read_pgm",
    "remove_background",
    "scan_sequence",
    "synchronize",
    "write_pgm",
]

BLACK_FRAME_THRESHOLD = 8  # strict upper bound for 8-bit sync frames


class UnsynchronizableError(RuntimeError):
    """The sequences contain no black frames to synchronize on."""


# ---------------------------------------------------------------------------
# Frames and PGM I/O
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    """A single 8-bit grayscale camera frame."""

    pixels: np.ndarray
    timestamp_us: int
    index: int
    camera_id: int


@dataclass(frozen=True)
class FrameInfo:
    """Lazy handle to an on-disk frame."""

    path: Path
    camera_id: int
    index: int
    timestamp_us: int

    def load(self) -> Frame:
        return Frame(
            pixels=read_pgm(self.path),
            timestamp_us=self.timestamp_us,
            index=self.index,
            camera_id=self.camera_id,
        )


@dataclass
class StereoPair:
    left: Frame
    right: Frame
    pair_time_us: int


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Write an 8-bit grayscale image as binary PGM (P5)."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) file."""
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", data[pos:])
        if m is None:
            raise ValueError(f"truncated PGM header: {path}")
        pos += m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (P5) file: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    img = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return img.reshape(h, w).copy()


def frame_filename(camera_id: int, index: int, timestamp_us: int) -> str:
    return f"{camera_id}_{index:08d}_{timestamp_us:016d}.pgm"


_NAME_RE = re.compile(r"^(\d+)_(\d{8})_(\d{16})\.pgm$")


def scan_sequence(directory: str | Path) -> list[FrameInfo]:
    """All frames of a camera directory, sorted by save index."""
    infos = []
    for p in Path(directory).iterdir():
        m = _NAME_RE.match(p.name)
        if m:
            infos.append(
                FrameInfo(
                    path=p,
                    camera_id=int(m.group(1)),
                    index=int(m.group(2)),
                    timestamp_us=int(m.group(3)),
                )
            )
    infos.sort(key=lambda fi: fi.index)
    return infos


# ---------------------------------------------------------------------------
# Black-frame detection and synchronization
# ---------------------------------------------------------------------------

def is_black_frame(pixels: np.ndarray, threshold: int = BLACK_FRAME_THRESHOLD) -> bool:
    """True if all sampled diagonal pixels are strictly below the threshold.

    Samples the full main diagonal and counter diagonal (corner to
    corner, rounded to the pixel grid for non-square images).
    """
    h, w = pixels.shape
    n = max(h, w)
    r = np.round(np.linspace(0, h - 1, n)).astype(int)
    c = np.round(np.linspace(0, w - 1, n)).astype(int)
    main = pixels[r, c]
    counter = pixels[r, c[::-1]]
    return bool(np.all(main < threshold) and np.all(counter < threshold))


def detect_black_frames(
    frames: Iterable[Frame | np.ndarray], threshold: int = BLACK_FRAME_THRESHOLD
) -> list[int]:
    """Positions of black frames in an iterable of frames or pixel arrays."""
    out = []
    for i, f in enumerate(frames):
        pixels = f.pixels if isinstance(f, Frame) else f
        if is_black_frame(pixels, threshold):
            out.append(i)
    return out


@dataclass(frozen=True)
class DropEvent:
    """A detected frame drop in one camera's stream."""

    camera_id: int
    after_index: int  # save index of the last frame before the gap
    missing_trigger_index: int  # trigger counter of the (first) lost frame
    n_dropped: int
    time_us: int  # approximate capture time of the lost frame


@dataclass
class _Meta:
    pos: int
    index: int
    timestamp_us: int
    is_black: bool


@dataclass
class SyncResult:
    """Outcome of temporal synchronization of the two camera streams.

    ``pairs`` holds positions into the input sequences (black frames are
    excluded; they are sync infrastructure, not data). ``offset_us`` is
    the estimated clock offset (camera2 minus camera1).
    """

    pairs: list[tuple[int, int]]
    offset_us: float
    frame_interval_us: float
    drops: list[DropEvent]
    black1: list[int] = field(default_factory=list)
    black2: list[int] = field(default_factory=list)

    def pair_time_us(self, frames1: Sequence, pos1: int) -> int:
        return int(frames1[pos1].timestamp_us)


def _collect_meta(seq: Iterable, threshold: int) -> list[_Meta]:
    metas = []
    for pos, f in enumerate(seq):
        if isinstance(f, _Meta):
            metas.append(f)
            continue
        pixels = getattr(f, "pixels", None)
        if callable(getattr(f, "load", None)) and pixels is None:
            pixels = f.load().pixels
        metas.append(
            _Meta(
                pos=pos,
                index=int(f.index),
                timestamp_us=int(f.timestamp_us),
                is_black=is_black_frame(pixels, threshold),
            )
        )
    return metas


def _scan_gaps(metas: list[_Meta], interval: float, camera_id: int) -> list[DropEvent]:
    """Frame drops from timestamp gaps within one camera stream."""
    events = []
    cum = 0
    for prev, cur in zip(metas, metas[1:]):
        gap = cur.timestamp_us - prev.timestamp_us
        n_missing = int(round(gap / interval)) - 1
        if n_missing > 0:
            events.append(
                DropEvent(
                    camera_id=camera_id,
                    after_index=prev.index,
                    missing_trigger_index=prev.index + cum + 1,
                    n_dropped=n_missing,
                    time_us=int(prev.timestamp_us + interval),
                )
            )
            cum += n_missing
    return events


def synchronize(
    seq1: Iterable,
    seq2: Iterable,
    frame_interval_us: float | None = None,
    black_threshold: int = BLACK_FRAME_THRESHOLD,
) -> SyncResult:
    """Pair two independently time-stamped camera streams.

    Accepts sequences of :class:`Frame` or :class:`FrameInfo` (loaded
    lazily for black-frame detection). Black frames, aligned in capture
    order, provide the average clock offset; every remaining frame of
    sequence 1 is paired with the sequence-2 frame minimizing
    ``|t2 - t1 - offset|`` and pairs with residual above half the frame
    interval are discarded, which silently absorbs frame drops. Drops are
    additionally detected as jumps of the black-frame counter difference
    and localized by timestamp gaps.

    Assumes the black frames themselves were not dropped.
    """
    metas1 = _collect_meta(seq1, black_threshold)
    metas2 = _collect_meta(seq2, black_threshold)
    blacks1 = [m for m in metas1 if m.is_black]
    blacks2 = [m for m in metas2 if m.is_black]
    if not blacks1 or not blacks2:
        raise UnsynchronizableError("no black frames found in one or both sequences")

    if frame_interval_us is None:
        ts1 = np.array([m.timestamp_us for m in metas1], dtype=float)
        frame_interval_us = float(np.median(np.diff(ts1))) if len(ts1) > 1 else 1.0

    n_black = min(len(blacks1), len(blacks2))
    offsets = [
        blacks2[k].timestamp_us - blacks1[k].timestamp_us for k in range(n_black)
    ]
    offset = float(np.mean(offsets))

    # frame drops make the black-frame counter difference jump
    drops: list[DropEvent] = []
    counter_diff = [blacks2[k].index - blacks1[k].index for k in range(n_black)]
    if any(d != counter_diff[0] for d in counter_diff):
        drops.extend(_scan_gaps(metas1, frame_interval_us, camera_id=1))
        drops.extend(_scan_gaps(metas2, frame_interval_us, camera_id=2))

    # pair every non-black frame of sequence 1
    cand2 = [m for m in metas2 if not m.is_black]
    ts2 = np.array([m.timestamp_us for m in cand2], dtype=float)
    pairs = []
    for m1 in metas1:
        if m1.is_black:
            continue
        target = m1.timestamp_us + offset
        j = int(np.searchsorted(ts2, target))
        best = None
        for jj in (j - 1, j, j + 1):
            if 0 <= jj < len(cand2):
                resid = abs(ts2[jj] - target)
                if best is None or resid < best[0]:
                    best = (resid, jj)
        if best is not None and best[0] <= 0.5 * frame_interval_us:
            pairs.append((m1.pos, cand2[best[1]].pos))

    return SyncResult(
        pairs=pairs,
        offset_us=offset,
        frame_interval_us=frame_interval_us,
        drops=drops,
        black1=[m.pos for m in blacks1],
        black2=[m.pos for m in blacks2],
    )


# ---------------------------------------------------------------------------
# Temporal median background
# ---------------------------------------------------------------------------

def median_background(window: np.ndarray) -> np.ndarray:
    """Per-pixel median over a stack of frames (frames, H, W), uint8.

    Uses the lower median for even counts so that partial windows at the
    sequence boundaries stay bit-compatible with the incremental filter.
    """
    window = np.asarray(window)
    k = (window.shape[0] - 1) // 2
    return np.partition(window, k, axis=0)[k].astype(np.uint8)


class SlidingMedian:
    """Incremental per-pixel median over a sliding frame window.

    One 256-bin histogram per pixel plus a tracked median position and
    below-median count; add/remove is O(pixels) and the median walk is
    O(1) amortized for slowly changing backgrounds. Bit-identical to
    recomputing :func:`median_background` from the window contents.
    """

    def __init__(self, shape: tuple[int, int]):
        self.shape = shape
        npix = shape[0] * shape[1]
        self._hist = np.zeros((npix, 256), dtype=np.uint16)
        self._rows = np.arange(npix)
        self._med = np.zeros(npix, dtype=np.int16)
        self._less = np.zeros(npix, dtype=np.int32)
        self.count = 0

    def add(self, pixels: np.ndarray) -> None:
        v = np.ascontiguousarray(pixels, dtype=np.uint8).reshape(-1)
        if self.count == 0:
            # seed the tracked position to avoid a long initial walk
            self._med[:] = v
            self._less[:] = 0
        self._hist[self._rows, v] += 1
        self._less += v < self._med
        self.count += 1

    def remove(self, pixels: np.ndarray) -> None:
        v = np.ascontiguousarray(pixels, dtype=np.uint8).reshape(-1)
        self._hist[self._rows, v] -= 1
        self._less -= v < self._med
        self.count -= 1

    def median(self) -> np.ndarray:
        """Current lower median per pixel as an (H, W) uint8 image."""
        if self.count <= 0:
            raise ValueError("median of an empty window")
        k = (self.count - 1) // 2
        med, less, hist = self._med, self._less, self._hist
        while True:
            idx = np.flatnonzero(less > k)
            if idx.size == 0:
                break
            med[idx] -= 1
            less[idx] -= hist[idx, med[idx]]
        while True:
            cur = hist[self._rows, med]
            idx = np.flatnonzero(less + cur <= k)
            if idx.size == 0:
                break
            less[idx] += cur[idx]
            med[idx] += 1
        return med.astype(np.uint8).reshape(self.shape)


class BackgroundStream:
    """Centered sliding-window median over a frame stream.

    Feeding frame ``i`` makes the background for frame
    ``i - (window//2) * stride`` available (windows are clipped at the
    sequence start, so every frame gets one). Frames must arrive in
    capture order. With ``stride > 1`` only every stride-th frame enters
    the median window, which spreads the same window length over
    ``window * stride`` frames of time at a fraction of the cost; with
    the default stride of 1 the emitted background for frame ``j`` is
    bit-identical to the lower median over frames
    ``[j - window//2, j + window//2]`` clipped to the sequence.
    """

    def __init__(self, shape: tuple[int, int], window: int, stride: int = 1):
        if window < 5 or window % 2 == 0:
            raise ValueError("window must be odd and >= 5")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.window = window
        self.stride = stride
        self.half_span = (window // 2) * stride
        self._median = SlidingMedian(shape)
        self._ring: list[np.ndarray] = []
        self._fed = 0
        self._emitted = 0

    def feed(self, pixels: np.ndarray) -> list[tuple[int, np.ndarray]]:
        """Add one frame; returns the (frame position, background) now ready."""
        i = self._fed
        self._fed += 1
        if i % self.stride == 0:
            self._median.add(pixels)
            self._ring.append(np.asarray(pixels, dtype=np.uint8))
            if len(self._ring) > self.window:
                self._median.remove(self._ring.pop(0))
        out = []
        while self._emitted + self.half_span <= i:
            out.append((self._emitted, self._median.median()))
            self._emitted += 1
        return out

    def finish(self) -> list[tuple[int, np.ndarray]]:
        """Emit the remaining tail backgrounds (right-clipped windows)."""
        out = []
        while self._emitted < self._fed:
            j = self._emitted
            if self.stride == 1:
                # shrink the window's left edge to max(0, j - half) so the
                # tail windows stay exactly centered-and-clipped
                lo_needed = max(0, j - self.half_span)
                lo_current = self._fed - len(self._ring)
                while lo_current < lo_needed:
                    self._median.remove(self._ring.pop(0))
                    lo_current += 1
            out.append((j, self._median.median()))
            self._emitted += 1
        return out


# ---------------------------------------------------------------------------
# Background removal and undistortion resampling
# ---------------------------------------------------------------------------

class UndistortMap:
    """Precomputed bilinear resampling from raw into undistorted pixel space."""

    def __init__(self, coords: np.ndarray, shape: tuple[int, int]):
        self.coords = coords
        h, w = shape
        x = coords[..., 0]
        y = coords[..., 1]
        x0 = np.floor(x).astype(np.int32)
        y0 = np.floor(y).astype(np.int32)
        self._fx = (x - x0).astype(np.float32)
        self._fy = (y - y0).astype(np.float32)
        self._valid = (x0 >= 0) & (x0 < w - 1) & (y0 >= 0) & (y0 < h - 1)
        self._x0 = np.clip(x0, 0, w - 2)
        self._y0 = np.clip(y0, 0, h - 2)

    def apply(self, img: np.ndarray) -> np.ndarray:
        f = img.astype(np.float32)
        x0, y0, fx, fy = self._x0, self._y0, self._fx, self._fy
        out = (
            f[y0, x0] * (1 - fx) * (1 - fy)
            + f[y0, x0 + 1] * fx * (1 - fy)
            + f[y0 + 1, x0] * (1 - fx) * fy
            + f[y0 + 1, x0 + 1] * fx * fy
        )
        out[~self._valid] = 0.0
        return out


def build_undistort_maps(intr: Intrinsics, shape: tuple[int, int]) -> UndistortMap:
    """Resampling map from the undistorted pixel grid into the raw image."""
    h, w = shape
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    grid = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    src = intr.distort_pixel(grid).reshape(h, w, 2).astype(np.float32)
    return UndistortMap(src, shape)


def bilinear_sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (H, W) image at (..., 2) pixel coords, 0 outside."""
    h, w = img.shape
    x = coords[..., 0]
    y = coords[..., 1]
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    valid = (x0 >= 0) & (x0 < w - 1) & (y0 >= 0) & (y0 < h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    f = img.astype(np.float32)
    v00 = f[y0c, x0c]
    v01 = f[y0c, x0c + 1]
    v10 = f[y0c + 1, x0c]
    v11 = f[y0c + 1, x0c + 1]
    out = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )
    return np.where(valid, out, 0.0)


def remove_background(
    frame_pixels: np.ndarray,
    background: np.ndarray,
    undistort_map: UndistortMap | np.ndarray | None = None,
) -> np.ndarray:
    """Absolute difference to the background, then undistortion resampling.

    With ``undistort_map`` (from :func:`build_undistort_maps`, or a raw
    (H, W, 2) coordinate array) the output is the foreground in
    undistorted pixel space; without it the raw difference is returned.
    """
    if frame_pixels.shape != background.shape:
        raise ValueError("frame and background dimensions differ")
    diff = np.abs(frame_pixels.astype(np.int16) - background.astype(np.int16))
    if undistort_map is None:
        return diff.astype(np.uint8)
    if isinstance(undistort_map, UndistortMap):
        resampled = undistort_map.apply(diff.astype(np.uint8))
    else:
        resampled = bilinear_sample(diff.astype(np.uint8), undistort_map)
    return np.clip(np.rint(resampled), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Bubble detection
# ---------------------------------------------------------------------------

@dataclass
class DetectionParams:
    """Tunables of the edge-based bubble detector."""

    min_contour_px: int = 30
    smooth_sigma: float = 0.7
    canny_high: float | None = None  # None: Otsu over gradient magnitudes
    canny_low_ratio: float = 0.4
    merge_gap_px: float = 3.0
    min_gradient: float = 4.0  # floor that keeps sensor noise out of Otsu
    min_edge_strength: float = 20.0  # floor on the auto (Otsu) strong threshold
    subpixel: bool = True  # parabolic edge localization along the gradient
    crop_threshold: float | None = 16.0  # restrict edge detection to active regions


@dataclass
class BubbleDetection:
    """One detected bubble silhouette in a single (undistorted) frame."""

    contour: np.ndarray  # (N, 2) edge pixels as (u, v), ordered by angle
    ellipse: Conic2D
    bbox: np.ndarray  # (u_min, v_min, u_max, v_max)
    frame_index: int
    camera_id: int
    contour_len: int
    merged: bool = False  # built from overlapping, non-nested edge groups

    @property
    def center(self) -> np.ndarray:
        return self.ellipse.center


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a 1D sample of positive values."""
    values = values[np.isfinite(values)]
    if values.size == 0:
        return 0.0
    hist, edges = np.histogram(values, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight = hist.astype(float)
    total = weight.sum()
    if total == 0:
        return 0.0
    w0 = np.cumsum(weight)
    w1 = total - w0
    mu_cum = np.cumsum(weight * centers)
    mu_total = mu_cum[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = mu_cum / w0
        mu1 = (mu_total - mu_cum) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def _canny(
    image: np.ndarray,
    sigma: float,
    high: float | None,
    low_ratio: float,
    min_gradient: float,
    min_edge_strength: float = 20.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Canny edges plus subpixel offsets.

    Returns the edge mask and an (H, W, 2) array of subpixel corrections
    (du, dv) from a parabolic fit of the gradient magnitude along the
    quantized gradient direction; edge position = pixel + correction.
    """
    img = ndimage.gaussian_filter(image.astype(np.float32), sigma)
    gx = ndimage.sobel(img, axis=1)
    gy = ndimage.sobel(img, axis=0)
    mag = np.hypot(gx, gy)

    # quantize gradient direction into 4 sectors and compare the two
    # neighbors along it
    angle = np.arctan2(gy, gx) % np.pi
    sector = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    shifts = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    nms = np.zeros_like(mag, dtype=bool)
    offsets = np.zeros(mag.shape + (2,), dtype=np.float32)
    for s, (dy, dx) in shifts.items():
        n_plus = np.roll(mag, (-dy, -dx), axis=(0, 1))
        n_minus = np.roll(mag, (dy, dx), axis=(0, 1))
        keep = (sector == s) & (mag >= n_plus) & (mag >= n_minus)
        nms |= keep
        denom = n_minus - 2.0 * mag + n_plus
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = 0.5 * (n_minus - n_plus) / denom
        delta = np.clip(np.nan_to_num(delta), -0.5, 0.5)
        offsets[keep, 0] = (delta * dx)[keep]
        offsets[keep, 1] = (delta * dy)[keep]
    nms &= mag > min_gradient
    nms[0, :] = nms[-1, :] = False
    nms[:, 0] = nms[:, -1] = False

    if high is None:
        pool = mag[nms]
        high = otsu_threshold(pool) if pool.size else np.inf
        # Otsu on a pure-noise pool splits the noise mode; a floor on the
        # strong threshold keeps bubble-free frames empty
        high = max(high, min_edge_strength)
    low = low_ratio * high
    strong = nms & (mag >= high)
    weak = nms & (mag >= low)
    if not strong.any():
        return strong, offsets
    edges = ndimage.binary_propagation(strong, mask=weak, structure=np.ones((3, 3)))
    return edges, offsets


def canny_edges(
    image: np.ndarray,
    sigma: float = 1.0,
    high: float | None = None,
    low_ratio: float = 0.4,
    min_gradient: float = 4.0,
    min_edge_strength: float = 20.0,
) -> np.ndarray:
    """Canny edge mask: smoothed gradients, non-maximum suppression, hysteresis."""
    edges, _ = _canny(image, sigma, high, low_ratio, min_gradient, min_edge_strength)
    return edges


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Convex hull (CCW vertex list) by the monotone chain algorithm."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(iterable):
        chain: list[np.ndarray] = []
        for p in iterable:
            while len(chain) >= 2:
                a = chain[-1] - chain[-2]
                b = p - chain[-2]
                if a[0] * b[1] - a[1] * b[0] > 0:
                    break
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _hull_contains(hull: np.ndarray, points: np.ndarray) -> bool:
    """True if all points lie inside a CCW convex hull (inclusive)."""
    if len(hull) < 3:
        return False
    a = hull
    b = np.roll(hull, -1, axis=0)
    edge = b - a  # (m, 2)
    rel = points[:, None, :] - a[None, :, :]  # (n, m, 2)
    cross = edge[None, :, 0] * rel[..., 1] - edge[None, :, 1] * rel[..., 0]
    return bool(np.all(cross >= -1e-9))


def _hulls_intersect(h1: np.ndarray, h2: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons."""
    for hull in (h1, h2):
        edges = np.roll(hull, -1, axis=0) - hull
        normals = np.column_stack([-edges[:, 1], edges[:, 0]])
        p1 = h1 @ normals.T
        p2 = h2 @ normals.T
        if np.any(
            (p1.max(axis=0) < p2.min(axis=0)) | (p2.max(axis=0) < p1.min(axis=0))
        ):
            return False
    return True


def _points_to_segments(points: np.ndarray, hull: np.ndarray) -> float:
    """Minimum distance from a point set to a polygon's edges (vectorized)."""
    a = hull
    b = np.roll(hull, -1, axis=0)
    ab = b - a  # (m, 2)
    denom = np.maximum(np.einsum("md,md->m", ab, ab), 1e-300)
    ap = points[:, None, :] - a[None, :, :]  # (n, m, 2)
    t = np.clip(np.einsum("nmd,md->nm", ap, ab) / denom, 0.0, 1.0)
    d = ap - t[..., None] * ab[None, :, :]
    return float(np.sqrt(np.einsum("nmd,nmd->nm", d, d).min()))


def _hull_gap(h1: np.ndarray, h2: np.ndarray, upper_bound: float = np.inf) -> float:
    """Minimum gap between two convex hulls (0 if they intersect).

    The bounding-box gap is a lower bound, so hulls whose boxes are
    already ``upper_bound`` apart shortcut without the exact sweep. For
    disjoint convex polygons the closest approach is at a vertex of one
    against an edge of the other, so two vectorized point-to-edge sweeps
    give the exact value.
    """
    gap_x = max(h1[:, 0].min(), h2[:, 0].min()) - min(h1[:, 0].max(), h2[:, 0].max())
    gap_y = max(h1[:, 1].min(), h2[:, 1].min()) - min(h1[:, 1].max(), h2[:, 1].max())
    bbox_gap = float(np.hypot(max(gap_x, 0.0), max(gap_y, 0.0)))
    if bbox_gap >= upper_bound:
        return bbox_gap
    if bbox_gap == 0.0 and _hulls_intersect(h1, h2):
        return 0.0
    return min(_points_to_segments(h1, h2), _points_to_segments(h2, h1))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        self.parent[self.find(i)] = self.find(j)


def detect_bubbles(
    foreground: np.ndarray,
    params: DetectionParams | None = None,
    frame_index: int = 0,
    camera_id: int = 1,
) -> list[BubbleDetection]:
    """Detect bubble silhouettes in a background-removed frame.

    Edge pixels are grouped by 8-connectivity, groups shorter than
    ``min_contour_px`` are rejected as drifting particles, a convex hull
    is built per group, hulls that intersect or come closer than
    ``merge_gap_px`` are merged (a bubble's inner and outer rim edges,
    or genuinely overlapping bubbles), and an ellipse is fitted to the
    merged hull points. Detections assembled from overlapping but
    non-nested groups are flagged ``merged``.
    """
    if params is None:
        params = DetectionParams()

    # restrict the (full-frame-cost) edge machinery to the active region;
    # background-removed frames are mostly empty
    x_off = y_off = 0
    region = foreground
    if params.crop_threshold is not None:
        ys, xs = np.nonzero(foreground >= params.crop_threshold)
        if len(xs) == 0:
            return []
        pad = 12
        h, w = foreground.shape
        y0 = max(int(ys.min()) - pad, 0)
        y1 = min(int(ys.max()) + pad + 1, h)
        x0 = max(int(xs.min()) - pad, 0)
        x1 = min(int(xs.max()) + pad + 1, w)
        if (y1 - y0) * (x1 - x0) < 0.6 * h * w:
            region = foreground[y0:y1, x0:x1]
            x_off, y_off = x0, y0

    edges, offsets = _canny(
        region,
        sigma=params.smooth_sigma,
        high=params.canny_high,
        low_ratio=params.canny_low_ratio,
        min_gradient=params.min_gradient,
        min_edge_strength=params.min_edge_strength,
    )
    labels, n_groups = ndimage.label(edges, structure=np.ones((3, 3)))
    if n_groups == 0:
        return []

    groups = []
    for sl, lab in zip(ndimage.find_objects(labels), range(1, n_groups + 1)):
        if sl is None:
            continue
        ys, xs = np.nonzero(labels[sl] == lab)
        if len(xs) < params.min_contour_px:
            continue
        pts = np.column_stack(
            [xs + sl[1].start + x_off, ys + sl[0].start + y_off]
        ).astype(float)
        if params.subpixel:
            pts = pts + offsets[ys + sl[0].start, xs + sl[1].start]
        hull = convex_hull(pts)
        if len(hull) < 3:
            continue
        groups.append((pts, hull))
    if not groups:
        return []

    uf = _UnionFind(len(groups))
    nested_pairs = set()
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            gap = _hull_gap(groups[i][1], groups[j][1], upper_bound=params.merge_gap_px)
            if gap < params.merge_gap_px:
                uf.union(i, j)
                if _hull_contains(groups[i][1], groups[j][1]) or _hull_contains(
                    groups[j][1], groups[i][1]
                ):
                    nested_pairs.add((i, j))

    clusters: dict[int, list[int]] = {}
    for i in range(len(groups)):
        clusters.setdefault(uf.find(i), []).append(i)

    detections = []
    for members in clusters.values():
        pts = np.vstack([groups[i][0] for i in members])
        hull = convex_hull(pts)
        try:
            ellipse = fit_ellipse(hull)
        except NotAnEllipseError:
            continue
        centroid = pts.mean(axis=0)
        order = np.argsort(np.arctan2(pts[:, 1] - centroid[1], pts[:, 0] - centroid[0]))
        contour = pts[order]
        bbox = np.array(
            [pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()]
        )
        merged = False
        if len(members) > 1:
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    i, j = sorted((members[a], members[b]))
                    if uf.find(i) == uf.find(j) and (i, j) not in nested_pairs:
                        merged = True
        detections.append(
            BubbleDetection(
                contour=contour,
                ellipse=ellipse,
                bbox=bbox,
                frame_index=frame_index,
                camera_id=camera_id,
                contour_len=len(pts),
                merged=merged,
            )
        )
    detections.sort(key=lambda d: (d.center[0], d.center[1]))
    return detections
