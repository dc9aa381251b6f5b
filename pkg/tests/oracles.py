"""Independent straight-line reference implementations used by the tests.

Written with plain Python loops over pixels so they share no code with the
vectorised library versions.
"""
import math

EPS = 2.220446049250313e-16


def counts(pred, gt, n=256):
    """Per-threshold (tp, fp) by direct pixel enumeration."""
    tps, fps = [], []
    rows, cols = len(gt), len(gt[0])
    for k in range(n):
        t = k / (n - 1)
        tp = fp = 0
        for i in range(rows):
            for j in range(cols):
                if float(pred[i][j]) >= t:
                    if gt[i][j]:
                        tp += 1
                    else:
                        fp += 1
        tps.append(tp)
        fps.append(fp)
    return tps, fps


def max_f(pred, gt, beta2=0.3, n=256):
    tps, fps = counts(pred, gt, n)
    n_fg = sum(1 for row in gt for v in row if v)
    best = 0.0
    for tp, fp in zip(tps, fps):
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / n_fg if n_fg else 1.0
        den = beta2 * p + r
        f = (1 + beta2) * p * r / den if den else 0.0
        best = max(best, f)
    return best


def mae(pred, gt):
    total = 0.0
    n = 0
    for prow, grow in zip(pred, gt):
        for p, g in zip(prow, grow):
            total += abs(float(p) - float(g))
            n += 1
    return total / n


def _mean(xs):
    return sum(xs) / len(xs)


def _std1(xs):
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def _object(xs):
    if not xs:
        return 0.0
    x = _mean(xs)
    return 2.0 * x / (x * x + 1.0 + _std1(xs) + EPS)


def _ssim(pb, gb):
    xs = [v for row in pb for v in row]
    ys = [v for row in gb for v in row]
    n = len(xs)
    x, y = _mean(xs), _mean(ys)
    sx = sum((a - x) ** 2 for a in xs) / (n - 1 + EPS)
    sy = sum((b - y) ** 2 for b in ys) / (n - 1 + EPS)
    sxy = sum((a - x) * (b - y) for a, b in zip(xs, ys)) / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def s_measure(pred, gt, alpha=0.5):
    rows, cols = len(gt), len(gt[0])
    p = [[float(v) for v in row] for row in pred]
    g = [[1.0 if v else 0.0 for v in row] for row in gt]
    area = rows * cols
    fg_area = sum(sum(row) for row in g)
    u = fg_area / area
    if fg_area == 0:
        return 1.0 - sum(sum(row) for row in p) / area
    if fg_area == area:
        return sum(sum(row) for row in p) / area

    fg_vals = [p[i][j] for i in range(rows) for j in range(cols) if g[i][j]]
    bg_vals = [1.0 - p[i][j] for i in range(rows) for j in range(cols) if not g[i][j]]
    s_obj = u * _object(fg_vals) + (1 - u) * _object(bg_vals)

    sx = sum(g[i][j] * (j + 1) for i in range(rows) for j in range(cols))
    sy = sum(g[i][j] * (i + 1) for i in range(rows) for j in range(cols))
    X = int(math.floor(sx / fg_area + 0.5))
    Y = int(math.floor(sy / fg_area + 0.5))
    blocks = [((0, Y), (0, X)), ((0, Y), (X, cols)), ((Y, rows), (0, X)), ((Y, rows), (X, cols))]
    s_reg = 0.0
    for (r0, r1), (c0, c1) in blocks:
        if r1 <= r0 or c1 <= c0:
            continue
        pb = [row[c0:c1] for row in p[r0:r1]]
        gb = [row[c0:c1] for row in g[r0:r1]]
        w = (r1 - r0) * (c1 - c0) / area
        s_reg += w * _ssim(pb, gb)
    return max(alpha * s_obj + (1 - alpha) * s_reg, 0.0)


def adam(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-stepped scalar Adam; returns the iterate after every step."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out
