"""Independent reference computations: plain-Python loops, no torch losses."""

import math

import numpy as np
import torch


def scalar_ce(logits, target, ignore_id=255):
    """Mean over non-ignored pixels of -log softmax; logits (C, H, W) as nested floats."""
    logits = np.asarray(logits, dtype=np.float64)
    c, h, w = logits.shape
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            t = int(target[y][x])
            if t == ignore_id:
                continue
            zs = [float(logits[k, y, x]) for k in range(c)]
            m = max(zs)
            lse = m + math.log(sum(math.exp(z - m) for z in zs))
            total += lse - zs[t]
            count += 1
    return total / count if count else 0.0


def scalar_ppa(s_p, eps=1e-12):
    s = 0.0
    for v in np.asarray(s_p, dtype=np.float64).ravel():
        if v > 0:
            s += float(v)
    return math.log(eps + s)


def scalar_stage1(s_fb, s_t, s_p, g1, g2, deltas, ignore_id=255):
    """Per-sample weighted sum of the three cross-entropies, then a plain average."""
    vals = []
    for i, d in enumerate(deltas):
        vals.append(scalar_ce(s_fb[i], g1[i], ignore_id) + d * scalar_ce(s_t[i], g1[i], ignore_id)
                    + (1 - d) * scalar_ce(s_p[i], g2[i], ignore_id))
    return sum(vals) / len(vals)


def scalar_stage2(s_t, s_p, g1, eps=1e-12, ignore_id=255):
    vals = [scalar_ce(s_t[i], g1[i], ignore_id) + scalar_ppa(s_p[i], eps) for i in range(len(s_t))]
    return sum(vals) / len(vals)


def finite_difference_check(loss_fn, params, n_sample=500, step=1e-4, seed=0):
    """Compare autograd with central differences on a random sample of scalar parameters.

    Returns (relative errors, number checked). ``loss_fn`` must be float64 and
    deterministic.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    flat = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(flat), size=min(n_sample, len(flat)), replace=False)
    errs = []
    with torch.no_grad():
        for k in pick:
            pi, j = flat[int(k)]
            view = params[pi].view(-1)
            orig = view[j].item()
            view[j] = orig + step
            up = loss_fn().item()
            view[j] = orig - step
            down = loss_fn().item()
            view[j] = orig
            numeric = (up - down) / (2 * step)
            analytic = grads[pi].view(-1)[j].item()
            denom = max(abs(numeric), abs(analytic), 1e-6)
            errs.append(abs(numeric - analytic) / denom)
    return np.array(errs), len(pick)


def brute_pairs(ids):
    """Pixel walk over 8-neighbourhoods."""
    h, w = ids.shape
    pairs = set()
    for y in range(h):
        for x in range(w):
            a = int(ids[y, x])
            if not a:
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        b = int(ids[yy, xx])
                        if b and b != a:
                            pairs.add((min(a, b), max(a, b)))
    return pairs


def brute_keep(kind, classes, ids, cooc, arg, any_pair=False):
    inst_ids = sorted(int(i) for i in np.unique(ids) if i)
    pairs = brute_pairs(ids)
    touched = {i for p in pairs for i in p}
    if kind == "occ1":
        return len(pairs) > 0
    if kind == "occall":
        return bool(inst_ids) and all(i in touched for i in inst_ids)
    if kind == "nobj":
        return len(inst_ids) == arg
    if kind == "nuniq":
        return len(classes) == arg
    if kind == "cooc":
        flags = [cooc[a][b] < arg for a in classes for b in classes if a < b]
        return any(flags) if any_pair else all(flags)
    if kind == "excl":
        return classes == {arg}
    if kind == "with":
        return arg[0] in classes and arg[1] in classes
    raise AssertionError(kind)
