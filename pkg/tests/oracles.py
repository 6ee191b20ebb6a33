"""Independent reference implementations shared by the unit and acceptance
suites.  Deliberately written as plain loops: these must stay independent of
the vectorized code paths they check."""

import math

import numpy as np


def oracle_splat(signal, field):
    """Per-destination scan over all sources.  Winner per cell: nearest
    transformed depth when the field carries one (ties: later row-major
    source), else the last row-major source."""
    sig = np.asarray(signal, dtype=np.float64)
    squeeze = sig.ndim == 2
    if squeeze:
        sig = sig[:, :, None]
    h, w = field.valid.shape
    out = np.zeros_like(sig)
    best = {}
    for y in range(h):
        for x in range(w):
            if not field.valid[y, x]:
                continue
            tx = math.floor(field.target[y, x, 0] + 0.5)
            ty = math.floor(field.target[y, x, 1] + 0.5)
            if not (0 <= tx < w and 0 <= ty < h):
                continue
            d = field.depth[y, x] if field.depth is not None else 0.0
            key = (ty, tx)
            if key not in best or d <= best[key][0]:
                best[key] = (d, (y, x))
    for (ty, tx), (_, (y, x)) in best.items():
        out[ty, tx] = sig[y, x]
    return out[:, :, 0] if squeeze else out


def oracle_affine_field(transform, h, w):
    """Per-pixel loop for 2D translate/scale fields."""
    target = np.zeros((h, w, 2))
    valid = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            if transform.kind == "translate2d":
                tx, ty = x + transform.offset[0], y + transform.offset[1]
            else:
                sx, sy = transform.scale2d
                px, py = transform.pivot2d
                tx, ty = px + sx * (x - px), py + sy * (y - py)
            target[y, x] = (tx, ty)
            valid[y, x] = 0 <= tx < w and 0 <= ty < h
    return target, valid


def oracle_project_field(transform, depth, intr):
    """Per-pixel back-project / move / re-project for 3D fields."""
    h, w = depth.shape
    A = transform.affine3d()
    target = np.zeros((h, w, 2))
    zs = np.zeros((h, w))
    valid = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            d = depth[y, x]
            p = np.array([d * (x - intr.cx) / intr.fx, d * (y - intr.cy) / intr.fy, d])
            q = A[:3, :3] @ p + A[:3, 3]
            zs[y, x] = q[2]
            if q[2] <= 1e-9:
                continue
            tx = intr.fx * q[0] / q[2] + intr.cx
            ty = intr.fy * q[1] / q[2] + intr.cy
            target[y, x] = (tx, ty)
            valid[y, x] = 0 <= tx < w and 0 <= ty < h
    return target, zs, valid


def softmax_rows(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def manual_attention(q, k, v):
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    am = softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
    return am @ v


def oracle_remove(a_edit, a_ref, m_obj, m_bg, h, w, rows=None, corr="rows"):
    """Loop transliteration of the removal rule over attention maps."""
    a_edit = np.asarray(a_edit, dtype=np.float64)
    a_ref = np.asarray(a_ref, dtype=np.float64)
    c = a_edit @ (a_ref.T if corr == "rows" else a_ref)
    coords = [(x, y) for y in range(h) for x in range(w)]
    diag = math.hypot(h - 1, w - 1)
    row_sel = m_obj if rows is None else rows
    terms = []
    for i in range(c.shape[0]):
        if row_sel[i] < 0.5:
            continue
        vals_bg = [c[i, j] * m_bg[j] for j in range(c.shape[1])]
        vals_ob = [c[i, j] * m_obj[j] for j in range(c.shape[1])]
        u = int(np.argmax(vals_bg))
        rho_ob = max(max(vals_bg), 1e-12)
        rho_oo = max(max(vals_ob), 1e-12)
        d = 0.0 if diag == 0 else math.hypot(coords[i][0] - coords[u][0],
                                             coords[i][1] - coords[u][1]) / diag
        terms.append(math.exp(-d) * (math.log(rho_oo) - math.log(rho_ob)))
    return float(np.mean(terms)) if terms else 0.0


def largest_bright_shift(input_image, edited, threshold=0.5):
    """Centroid displacement of the largest bright connected component of the
    edited image, relative to the input's bright centroid."""
    from scipy import ndimage

    bright = np.asarray(edited).mean(axis=2) > threshold
    b0 = np.asarray(input_image).mean(axis=2) > threshold
    lab, n = ndimage.label(bright)
    if n == 0 or not b0.any():
        return float("nan"), float("nan")
    sizes = ndimage.sum(bright, lab, range(1, n + 1))
    main = lab == (1 + int(np.argmax(sizes)))
    cy1, cx1 = np.argwhere(main).mean(axis=0)
    cy0, cx0 = np.argwhere(b0).mean(axis=0)
    return float(cx1 - cx0), float(cy1 - cy0)
