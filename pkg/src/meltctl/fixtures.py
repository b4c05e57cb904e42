"""Built-in calibration/demo scan paths.

Two fixtures are emitted in the text scan format of the scanpath module:

* a stepped pyramid: three blocks of equal vector count scanned as one
  layer on top of a previously built substrate, vectors along Y, width
  stepping down block by block, snake ordering with a skywrite between
  vectors.  The trailing half of the widest block is the bulk window used
  when tuning the area target.
* an overhang slab: a solid strip on the plate, then a second layer that
  runs past the strip edge so its vectors cross from solid-backed to
  powder-backed ground mid-stroke.
"""
from __future__ import annotations

FULL_PYRAMID = dict(widths_mm=(20.0, 13.4, 6.7), vectors_per_width=111,
                    substrate_layers=29, power_nominal_W=220.0)
# Small enough to iterate on in tests while keeping three distinct widths
# in the full fixture's 3:2:1 ratio.  The tuning nominal shrinks with the
# footprint: the fixture has to shed the tuned bulk power without the
# substrate under a track ever reaching melt, or the controller loses its
# operating range at high heat factors.
REDUCED_PYRAMID = dict(widths_mm=(6.0, 4.0, 2.0), vectors_per_width=11,
                       substrate_layers=7, power_nominal_W=120.0)


def stepped_pyramid_lines(widths_mm=(20.0, 13.4, 6.7), vectors_per_width=111,
                          hatch_mm: float = 0.09, speed_mm_s: float = 1000.0,
                          layer_thickness_mm: float = 0.04,
                          jump_ms: float = 1.8) -> list[str]:
    """One scanned layer of 3 * vectors_per_width marks; vector i sits at
    x = (i - i_mid) * hatch and spans its block's width along Y.  File z is
    build-local; put the fixture on a prebuilt stub via substrate_layers in
    the grid config."""
    if len(widths_mm) != 3:
        raise ValueError("expected exactly three step widths")
    if vectors_per_width < 1:
        raise ValueError("need at least one vector per width")
    total = 3 * vectors_per_width
    i_mid = total // 2
    out = [f"layer 1 z {layer_thickness_mm:.6f}"]
    for i in range(total):
        w = widths_mm[i // vectors_per_width]
        x = (i - i_mid) * hatch_mm
        y0, y1 = -w / 2.0, w / 2.0
        if i % 2:
            y0, y1 = y1, y0
        out.append(f"mark {x:.6f} {y0:.6f} {x:.6f} {y1:.6f} {speed_mm_s:.3f}")
        if i != total - 1:
            out.append(f"jump {jump_ms:.3f}")
    return out


def pyramid_bulk_window(vectors_per_width=111,
                        hatch_mm: float = 0.09) -> tuple[float, float]:
    """X range (m) of the trailing half of the widest block."""
    total = 3 * vectors_per_width
    i_mid = total // 2
    h = hatch_mm * 1e-3
    first = vectors_per_width // 2
    last = vectors_per_width - 1
    return ((first - i_mid) * h - 0.5 * h, (last - i_mid) * h + 0.5 * h)


def pyramid_block_ranges(vectors_per_width=111,
                         hatch_mm: float = 0.09) -> list[tuple[float, float]]:
    """X range (m) of each block, widest first."""
    total = 3 * vectors_per_width
    i_mid = total // 2
    h = hatch_mm * 1e-3
    out = []
    for b in range(3):
        first = b * vectors_per_width
        last = first + vectors_per_width - 1
        out.append(((first - i_mid) * h - 0.5 * h, (last - i_mid) * h + 0.5 * h))
    return out


def overhang_slab_lines(solid_len_mm: float = 4.0, overhang_len_mm: float = 2.0,
                        n_lines: int = 10, hatch_mm: float = 0.09,
                        speed_mm_s: float = 1000.0,
                        layer_thickness_mm: float = 0.04,
                        jump_ms: float = 1.8) -> list[str]:
    """Layer 1 marks x in [0, solid_len]; layer 2 marks x in
    [0, solid_len + overhang_len], so each second-layer vector crosses the
    solid edge and its far part rides on powder."""
    if solid_len_mm <= 0 or overhang_len_mm <= 0 or n_lines < 1:
        raise ValueError("slab dimensions must be positive")
    out = []
    for file_layer, x_end in ((1, solid_len_mm),
                              (2, solid_len_mm + overhang_len_mm)):
        out.append(f"layer {file_layer} z {file_layer * layer_thickness_mm:.6f}")
        for j in range(n_lines):
            y = (j - (n_lines - 1) / 2.0) * hatch_mm
            x0, x1 = 0.0, x_end
            if j % 2:
                x0, x1 = x1, x0
            out.append(f"mark {x0:.6f} {y:.6f} {x1:.6f} {y:.6f} {speed_mm_s:.3f}")
            if j != n_lines - 1:
                out.append(f"jump {jump_ms:.3f}")
    return out


def write_lines(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
