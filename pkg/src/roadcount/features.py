"""LBP and multi-scale-block LBP codes, uniform patterns and histograms.

The 8-bit code compares the 8 neighbors of a site against its center,
clockwise from the top-left neighbor, most-significant bit first: a bit is 1
when neighbor >= center. MB-LBP replaces single pixels with the means of
equal-sized blocks in a 3x3 grid; since all nine blocks share one size, the
mean comparison is performed on exact integer block sums.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .imaging import Frame, IntegralImage, Rect

# (dx, dy, bit shift) for the 8 neighbors in clockwise order TL,T,TR,R,BR,B,BL,L;
# offsets are in block units, the center block sits at (1, 1).
_NEIGHBORS = (
    (0, 0, 7),
    (1, 0, 6),
    (2, 0, 5),
    (2, 1, 4),
    (2, 2, 3),
    (1, 2, 2),
    (0, 2, 1),
    (0, 1, 0),
)

UNIFORM_OVERFLOW_BIN = 58
LBP_HISTOGRAM_BINS = 59
RANK_HISTOGRAM_BINS = 64
RANKED_CODES = 63
RANK_OVERFLOW_BIN = 63


@dataclass(frozen=True)
class BlockGeometry:
    """Size of one cell of the 3x3 comparison grid; footprint is 3*cell each way."""

    cell_w: int
    cell_h: int

    def __post_init__(self):
        if self.cell_w < 1 or self.cell_h < 1:
            raise ValueError(f"cell size must be >= 1, got {self.cell_w}x{self.cell_h}")

    @property
    def footprint_w(self) -> int:
        return 3 * self.cell_w

    @property
    def footprint_h(self) -> int:
        return 3 * self.cell_h


def _circular_transitions(code: int) -> int:
    prev = code & 1
    count = 0
    for i in range(1, 9):
        bit = (code >> (i % 8)) & 1
        if bit != prev:
            count += 1
        prev = bit
    return count


def is_uniform(code: int) -> bool:
    """True iff the circular 8-bit string has at most two 0<->1 transitions."""
    return _circular_transitions(code) <= 2


def _build_uniform_bins() -> np.ndarray:
    bins = np.full(256, UNIFORM_OVERFLOW_BIN, dtype=np.int64)
    uniform = [c for c in range(256) if is_uniform(c)]
    for slot, code in enumerate(uniform):
        bins[code] = slot
    return bins


# 58 uniform codes, ascending code value -> bins 0..57; the rest share bin 58
UNIFORM_BINS = _build_uniform_bins()


def _codes_from_grid(values: np.ndarray, step_x: int, step_y: int) -> np.ndarray:
    """Codes for all footprints over a value grid with block stride (step_x, step_y).

    `values` holds one scalar per block position (pixels for plain LBP,
    block sums for MB-LBP). Output shape is the number of valid footprint
    top-left positions along each axis.
    """
    h, w = values.shape
    out_h = h - 2 * step_y
    out_w = w - 2 * step_x
    if out_h < 1 or out_w < 1:
        raise ValueError("grid too small for a 3x3 footprint")
    center = values[step_y : step_y + out_h, step_x : step_x + out_w]
    codes = np.zeros((out_h, out_w), dtype=np.uint8)
    for dx, dy, shift in _NEIGHBORS:
        block = values[dy * step_y : dy * step_y + out_h, dx * step_x : dx * step_x + out_w]
        codes |= (block >= center).astype(np.uint8) << shift
    return codes


def lbp_code(frame: Frame, x: int, y: int) -> int:
    """8-bit LBP code at pixel (x, y); the pixel must not lie on the border."""
    if not (1 <= x <= frame.width - 2 and 1 <= y <= frame.height - 2):
        raise ValueError(f"({x},{y}) is on the border of a {frame.width}x{frame.height} frame")
    p = frame.pixels
    center = p[y, x]
    code = 0
    for dx, dy, shift in _NEIGHBORS:
        if p[y - 1 + dy, x - 1 + dx] >= center:
            code |= 1 << shift
    return code


def mb_lbp_code(ii: IntegralImage, x: int, y: int, g: BlockGeometry) -> int:
    """MB-LBP code for the footprint whose top-left corner is (x, y).

    Block means are compared via exact integer block sums (all nine blocks
    share one size). A 1x1 geometry reduces to lbp_code at (x+1, y+1).
    """
    if x < 0 or y < 0 or x + g.footprint_w > ii.width or y + g.footprint_h > ii.height:
        raise ValueError(
            f"footprint {g.footprint_w}x{g.footprint_h} at ({x},{y}) exceeds "
            f"{ii.width}x{ii.height} image"
        )
    center = ii.rect_sum(Rect(x + g.cell_w, y + g.cell_h, g.cell_w, g.cell_h))
    code = 0
    for dx, dy, shift in _NEIGHBORS:
        s = ii.rect_sum(Rect(x + dx * g.cell_w, y + dy * g.cell_h, g.cell_w, g.cell_h))
        if s >= center:
            code |= 1 << shift
    return code


def lbp_code_map(frame: Frame) -> np.ndarray:
    """LBP codes of every interior pixel; entry (j, i) is the code at (i+1, j+1)."""
    return _codes_from_grid(frame.pixels, 1, 1)


def mb_lbp_code_map(ii: IntegralImage, g: BlockGeometry) -> np.ndarray:
    """MB-LBP codes of every valid footprint top-left position in the image."""
    return _codes_from_grid(ii.block_sums(g.cell_w, g.cell_h), g.cell_w, g.cell_h)


def lbp_histogram(frame: Frame, region: Rect) -> np.ndarray:
    """59-bin histogram of uniform LBP codes over the interior of region.

    Bins 0..57 hold the 58 uniform codes in ascending code order; bin 58
    collects all non-uniform codes. Bin sum equals (w-2)*(h-2).
    """
    if not frame.contains(region):
        raise ValueError(f"region {region} exceeds frame {frame.width}x{frame.height}")
    if region.w < 3 or region.h < 3:
        raise ValueError(f"region {region.w}x{region.h} has no interior code site")
    sub = frame.pixels[region.y : region.bottom, region.x : region.right]
    codes = _codes_from_grid(sub, 1, 1)
    return np.bincount(UNIFORM_BINS[codes.ravel()], minlength=LBP_HISTOGRAM_BINS)


class RankTable:
    """Maps each MB-LBP code to a histogram bin by occurrence rank.

    The most frequent codes get dedicated bins 0..62 (ties broken by
    ascending code value); every other code shares overflow bin 63. Only
    codes actually observed are ranked, so with fewer than 63 distinct
    observed codes some dedicated bins stay unused.
    """

    def __init__(self, bins: np.ndarray):
        bins = np.asarray(bins, dtype=np.int64)
        if bins.shape != (256,):
            raise ValueError(f"rank table needs 256 entries, got shape {bins.shape}")
        if bins.min() < 0 or bins.max() > RANK_OVERFLOW_BIN:
            raise ValueError("rank table bins must lie in [0, 63]")
        self.bins = bins

    def bin_of(self, code: int) -> int:
        return int(self.bins[code])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RankTable):
            return NotImplemented
        return bool(np.array_equal(self.bins, other.bins))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_text())

    def to_text(self) -> str:
        return "".join(f"{code} {self.bins[code]}\n" for code in range(256))

    @classmethod
    def from_text(cls, text: str) -> "RankTable":
        bins = np.full(256, -1, dtype=np.int64)
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            code_s, bin_s = line.split()
            bins[int(code_s)] = int(bin_s)
        if (bins < 0).any():
            raise ValueError("rank table text does not cover all 256 codes")
        return cls(bins)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RankTable":
        with open(path, "r", encoding="ascii") as fh:
            return cls.from_text(fh.read())


def build_rank_table(code_sets) -> RankTable:
    """Build a RankTable from raw code multisets (arrays of codes in [0, 255]).

    Observed codes are sorted by (frequency descending, code ascending); the
    top 63 get bins 0..62, everything else bin 63.
    """
    counts = np.zeros(256, dtype=np.int64)
    for codes in code_sets:
        arr = np.asarray(codes, dtype=np.int64).ravel()
        if arr.size:
            counts += np.bincount(arr, minlength=256)
    if counts.sum() == 0:
        raise ValueError("no codes observed; cannot rank")
    observed = np.flatnonzero(counts)
    order = observed[np.lexsort((observed, -counts[observed]))]
    bins = np.full(256, RANK_OVERFLOW_BIN, dtype=np.int64)
    for slot, code in enumerate(order[:RANKED_CODES]):
        bins[code] = slot
    return RankTable(bins)


def mb_lbp_histogram(
    ii: IntegralImage, region: Rect, g: BlockGeometry, rt: RankTable
) -> np.ndarray:
    """64-bin rank histogram of MB-LBP codes over all footprints inside region.

    Footprints slide with stride 1; bin sum equals
    (w - 3*cell_w + 1) * (h - 3*cell_h + 1).
    """
    if region.right > ii.width or region.bottom > ii.height:
        raise ValueError(f"region {region} exceeds {ii.width}x{ii.height} image")
    if region.w < g.footprint_w or region.h < g.footprint_h:
        raise ValueError(
            f"region {region.w}x{region.h} too small for footprint "
            f"{g.footprint_w}x{g.footprint_h}"
        )
    sums = ii.block_sums(g.cell_w, g.cell_h)
    sub = sums[
        region.y : region.y + region.h - g.cell_h + 1,
        region.x : region.x + region.w - g.cell_w + 1,
    ]
    codes = _codes_from_grid(sub, g.cell_w, g.cell_h)
    return np.bincount(rt.bins[codes.ravel()], minlength=RANK_HISTOGRAM_BINS)
