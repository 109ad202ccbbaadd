"""Figure-data emission: contour grids as CSV, contours as static SVG.

Everything here is deterministic given the artifacts: grids are sampled
on a fixed lattice, contour lines come from marching squares with linear
interpolation, and the SVG writer emits plain 1.1 markup (filled band
rects, polylines, axes) with no external dependencies.
"""

import os

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .lyapunov import evaluate_V
from .serialize import write_csv

__all__ = [
    "marching_squares", "contour_bands", "SvgCanvas",
    "render_contour_svg", "render_heatmap_svg", "emit_figures",
]


# ----------------------------------------------------------------------
# geometry


def _interp(p, q, vp, vq, level):
    t = 0.5 if vq == vp else (level - vp) / (vq - vp)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def marching_squares(xs, ys, z, level):
    """Iso-lines of z (shape (len(xs), len(ys))) at one level.

    Returns a list of polylines, each an (m, 2) array in data coordinates.
    Saddle cells are split by the cell-centre average, the usual
    disambiguation.
    """
    z = np.asarray(z, dtype=float)
    segs = []
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            corners = [(xs[i], ys[j]), (xs[i + 1], ys[j]),
                       (xs[i + 1], ys[j + 1]), (xs[i], ys[j + 1])]
            vals = [z[i, j], z[i + 1, j], z[i + 1, j + 1], z[i, j + 1]]
            case = sum(1 << k for k in range(4) if vals[k] > level)
            if case in (0, 15):
                continue
            edges = []
            for k in range(4):
                a, b = k, (k + 1) % 4
                if (vals[a] > level) != (vals[b] > level):
                    edges.append(_interp(corners[a], corners[b],
                                         vals[a], vals[b], level))
            if len(edges) == 2:
                segs.append((edges[0], edges[1]))
            elif len(edges) == 4:
                # saddle: pair crossings by the centre value
                centre_above = np.mean(vals) > level
                first_above = vals[0] > level
                if centre_above == first_above:
                    segs.append((edges[0], edges[1]))
                    segs.append((edges[2], edges[3]))
                else:
                    segs.append((edges[0], edges[3]))
                    segs.append((edges[1], edges[2]))
    return _chain(segs)


def _chain(segs, tol=1e-12):
    """Merge segments sharing endpoints into polylines."""
    segs = [list(s) for s in segs]
    polylines = []
    while segs:
        line = segs.pop()
        grew = True
        while grew:
            grew = False
            for k, seg in enumerate(segs):
                for end, att in ((seg[0], seg[1]), (seg[1], seg[0])):
                    if np.allclose(end, line[-1], atol=tol):
                        line.append(att)
                    elif np.allclose(end, line[0], atol=tol):
                        line.insert(0, att)
                    else:
                        continue
                    segs.pop(k)
                    grew = True
                    break
                if grew:
                    break
        polylines.append(np.asarray(line))
    return polylines


def contour_bands(z, n_levels):
    """Cell band indices 0..n_levels-1 with edges linspaced over z's range."""
    z = np.asarray(z, dtype=float)
    lo, hi = float(z.min()), float(z.max())
    if hi <= lo:
        return np.zeros(z.shape, dtype=int), np.array([lo, hi])
    edges = np.linspace(lo, hi, n_levels + 1)
    idx = np.clip(np.digitize(z, edges[1:-1]), 0, n_levels - 1)
    return idx, edges


# ----------------------------------------------------------------------
# svg


class SvgCanvas:
    """Minimal SVG 1.1 writer with a data-to-pixel transform."""

    def __init__(self, bounds, size=480, margin=48):
        self.bounds = bounds
        self.size = size
        self.margin = margin
        self.parts = []

    def px(self, x, y):
        (x0, x1), (y0, y1) = self.bounds
        inner = self.size - 2 * self.margin
        px = self.margin + (x - x0) / (x1 - x0) * inner
        py = self.size - self.margin - (y - y0) / (y1 - y0) * inner
        return px, py

    def rect(self, x, y, w, h, fill):
        x0, y0 = self.px(x, y + h)
        x1, y1 = self.px(x + w, y)
        self.parts.append(
            f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{x1 - x0:.2f}" '
            f'height="{y1 - y0:.2f}" fill="{fill}"/>')

    def polyline(self, points, stroke, width=1.2):
        coords = " ".join(f"{px:.2f},{py:.2f}"
                          for px, py in (self.px(x, y) for x, y in points))
        self.parts.append(f'<polyline points="{coords}" fill="none" '
                          f'stroke="{stroke}" stroke-width="{width}"/>')

    def text(self, x_px, y_px, s, size=11, anchor="middle"):
        self.parts.append(f'<text x="{x_px:.2f}" y="{y_px:.2f}" '
                          f'font-size="{size}" font-family="sans-serif" '
                          f'text-anchor="{anchor}">{s}</text>')

    def group(self, gid, body):
        self.parts.append(f'<g id="{gid}">')
        self.parts.extend(body)
        self.parts.append("</g>")

    def axes(self, title, xlabel="x1", ylabel="x2", ticks=5):
        (x0, x1), (y0, y1) = self.bounds
        for x, y in (((x0, y0), (x1, y0)), ((x0, y0), (x0, y1))):
            self.polyline([x, y], stroke="#000", width=1.0)
        for t in np.linspace(x0, x1, ticks):
            px, py = self.px(t, y0)
            self.parts.append(f'<line x1="{px:.2f}" y1="{py:.2f}" '
                              f'x2="{px:.2f}" y2="{py + 5:.2f}" stroke="#000"/>')
            self.text(px, py + 18, f"{t:g}")
        for t in np.linspace(y0, y1, ticks):
            px, py = self.px(x0, t)
            self.parts.append(f'<line x1="{px - 5:.2f}" y1="{py:.2f}" '
                              f'x2="{px:.2f}" y2="{py:.2f}" stroke="#000"/>')
            self.text(px - 8, py + 4, f"{t:g}", anchor="end")
        self.text(self.size / 2, self.size - 8, xlabel)
        self.text(self.size / 2, 20, title, size=13)
        self.text(14, self.size / 2, ylabel)

    def write(self, path):
        body = "\n".join(self.parts)
        with open(path, "w") as fh:
            fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
                     f'width="{self.size}" height="{self.size}" '
                     f'viewBox="0 0 {self.size} {self.size}">\n'
                     f'<rect width="100%" height="100%" fill="#fff"/>\n'
                     f"{body}\n</svg>\n")


def _band_fill(k, n):
    shade = 235 - int(160 * (k / max(n - 1, 1)))
    return f"rgb({shade},{shade},255)"


def render_contour_svg(path, xs, ys, z, n_levels, title, boundary=None):
    """Filled contour bands plus iso-lines; returns band count rendered."""
    z = np.asarray(z, dtype=float)
    bounds = ((xs[0], xs[-1]), (ys[0], ys[-1]))
    canvas = SvgCanvas(bounds)
    idx, edges = contour_bands(z, n_levels)
    cells = []
    dxs = np.diff(xs)
    dys = np.diff(ys)
    for i in range(len(xs) - 1):
        # run-length encode each column strip to keep the file small
        j = 0
        while j < len(ys) - 1:
            k = idx[i, j]
            j1 = j
            while j1 + 1 < len(ys) - 1 and idx[i, j1 + 1] == k:
                j1 += 1
            x0p, y0p = canvas.px(xs[i], ys[j1 + 1])
            x1p, y1p = canvas.px(xs[i] + dxs[i], ys[j])
            cells.append(f'<rect x="{x0p:.2f}" y="{y0p:.2f}" '
                         f'width="{x1p - x0p:.2f}" height="{y1p - y0p:.2f}" '
                         f'fill="{_band_fill(int(k), n_levels)}"/>')
            j = j1 + 1
    canvas.group("bands", cells)
    lines = []
    for level in edges[1:-1]:
        for poly in marching_squares(xs, ys, z, level):
            coords = " ".join(f"{px:.2f},{py:.2f}"
                              for px, py in (canvas.px(x, y) for x, y in poly))
            lines.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="#334" stroke-width="0.8"/>')
    canvas.group("isolines", lines)
    if boundary is not None:
        for poly in boundary:
            canvas.polyline(poly, stroke="#c22", width=2.0)
    canvas.axes(title)
    canvas.write(path)
    return len(np.unique(idx))


def render_heatmap_svg(path, cells, bounds, title):
    """Occupancy heat map: visit counts shaded on the state box."""
    cells = np.asarray(cells, dtype=float)
    canvas = SvgCanvas(bounds)
    n1, n2 = cells.shape
    (x0, x1), (y0, y1) = bounds
    w = (x1 - x0) / n1
    h = (y1 - y0) / n2
    top = cells.max()
    body = []
    for i in range(n1):
        for j in range(n2):
            if cells[i, j] == 0:
                continue
            shade = 1.0 if top == 0 else cells[i, j] / top
            val = 245 - int(170 * shade)
            xp, yp = canvas.px(x0 + i * w, y0 + (j + 1) * h)
            xq, yq = canvas.px(x0 + (i + 1) * w, y0 + j * h)
            body.append(f'<rect x="{xp:.2f}" y="{yp:.2f}" '
                        f'width="{xq - xp:.2f}" height="{yq - yp:.2f}" '
                        f'fill="rgb(255,{val},{val})"/>')
    canvas.group("heat", body)
    canvas.axes(title)
    canvas.write(path)


# ----------------------------------------------------------------------
# run-directory emission


def _lattice(counts):
    xs = np.linspace(-1.0, 1.0, counts[0])
    ys = np.linspace(-1.0, 1.0, counts[1])
    g1, g2 = np.meshgrid(xs, ys, indexing="ij")
    return xs, ys, np.column_stack([g1.ravel(), g2.ravel()])


def emit_figures(run_dir, counts=(100, 100), n_levels=8):
    """Write contour CSVs and SVGs for a completed run directory.

    Requires the safe-set artifacts; the model checkpoint and occupancy
    grid are used when present (a known-model run has zero predictive
    std, an unexplored run has no occupancy).  Returns the list of
    written paths.
    """
    from .lyapunov import load_lyapunov
    from .model import load_model
    from .policy import load_policy

    lyap_path = os.path.join(run_dir, "03-learn-safe-set", "lyapunov.txt")
    pol_path = os.path.join(run_dir, "03-learn-safe-set", "policy.txt")
    missing = [p for p in (lyap_path, pol_path) if not os.path.exists(p)]
    if missing:
        raise ContractViolation("missing artifacts: " + ", ".join(missing))

    lyap = load_lyapunov(lyap_path)
    policy = load_policy(pol_path)
    model_path = os.path.join(run_dir, "02-train-model", "model.txt")
    model = load_model(model_path) if os.path.exists(model_path) else None

    out_dir = os.path.join(run_dir, "07-export-grid")
    os.makedirs(out_dir, exist_ok=True)
    xs, ys, grid = _lattice(counts)
    with T.no_grad():
        v = evaluate_V(grid, lyap).data
        u = policy(T.Tensor(grid)).data
        if model is None:
            std = np.zeros_like(grid)
        else:
            _, std_t = model.predict_delta(T.Tensor(grid), T.Tensor(u))
            std = std_t.data

    written = []

    def emit_csv(name, header, cols):
        path = os.path.join(out_dir, name)
        write_csv(path, header, cols)
        written.append(path)

    emit_csv("v_grid.csv", ["x1", "x2", "V", "u", "in_set"],
             [grid[:, 0], grid[:, 1], v, u[:, 0],
              (v <= lyap.l_s.data).astype(int)])
    emit_csv("sigma_grid.csv", ["x1", "x2", "sigma1", "sigma2"],
             [grid[:, 0], grid[:, 1], std[:, 0], std[:, 1]])

    level = float(lyap.l_s.data)
    boundary = marching_squares(xs, ys, v.reshape(counts), level)
    piece = np.concatenate([np.full(len(p), k) for k, p in enumerate(boundary)]) \
        if boundary else np.empty(0)
    pts = np.concatenate(boundary, axis=0) if boundary else np.empty((0, 2))
    emit_csv("boundary.csv", ["piece", "x1", "x2"],
             [piece.astype(int), pts[:, 0], pts[:, 1]])

    v_svg = os.path.join(out_dir, "v_contours.svg")
    render_contour_svg(v_svg, xs, ys, v.reshape(counts), n_levels,
                       "value function", boundary=boundary)
    written.append(v_svg)
    s_svg = os.path.join(out_dir, "sigma_contours.svg")
    render_contour_svg(s_svg, xs, ys, std.sum(axis=1).reshape(counts),
                       n_levels, "predictive std")
    written.append(s_svg)

    occ_path = os.path.join(run_dir, "05-explore", "occupancy.csv")
    if os.path.exists(occ_path):
        from .serialize import read_csv
        _, occ = read_csv(occ_path)
        side = int(round(np.sqrt(len(occ["count"]))))
        cells = occ["count"].reshape((side, side))
        h_svg = os.path.join(out_dir, "occupancy.svg")
        render_heatmap_svg(h_svg, cells, ((-1.0, 1.0), (-1.0, 1.0)),
                           "exploration occupancy")
        written.append(h_svg)
    return written
