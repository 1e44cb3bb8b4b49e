"""Independent oracles and gradient-check utilities used across the tests."""
import math

import numpy as np

MASK64 = (1 << 64) - 1


def directional_check(f, x, grad, direction, h=1e-3):
    """Relative error between a central difference of ``f`` along ``direction``
    and the analytic directional derivative ``<grad, direction>``."""
    fd = (f(x + h * direction) - f(x - h * direction)) / (2 * h)
    an = float(np.sum(grad * direction))
    return abs(fd - an) / max(abs(fd), abs(an), 1e-12)


def conv2d_loops(x, w, stride=1, pad=0):
    """Cross-correlation by explicit loops, zero padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, f, i, j] = float(np.sum(patch * w[f]))
    return out


def bilinear_loops(x, out_h, out_w):
    """Scalar half-pixel bilinear resize with edge clamping."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))

    def coords(d, size_in, size_out):
        src = max((d + 0.5) * size_in / size_out - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size_in - 1)
        return i0, min(i0 + 1, size_in - 1), src - i0

    for i in range(out_h):
        r0, r1, a = coords(i, h, out_h)
        for j in range(out_w):
            c0, c1, b = coords(j, w, out_w)
            out[:, :, i, j] = ((1 - a) * (1 - b) * x[:, :, r0, c0] + (1 - a) * b * x[:, :, r0, c1]
                               + a * (1 - b) * x[:, :, r1, c0] + a * b * x[:, :, r1, c1])
    return out


class SplitMixOracle:
    """Textbook SplitMix64 generator on Python ints."""

    def __init__(self, seed):
        self.state = seed & MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self):
        return (self.next() >> 11) / 2.0 ** 53


def fisher_yates_prefix(oracle, n, m):
    items = list(range(n))
    for i in range(m):
        j = i + int(oracle.uniform() * (n - i))
        items[i], items[j] = items[j], items[i]
    return items[:m]


def _finalize(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def child_key(key, *tags):
    """Key of a derived stream: one re-keying step per tag."""
    import zlib
    for tag in tags:
        v = zlib.crc32(tag.encode()) if isinstance(tag, str) else int(tag)
        key = _finalize((_finalize(key ^ 0xD1B54A32D192ED03) + (v + 1) * 0x9E3779B97F4A7C15)
                        & MASK64)
    return key


class ScalarStream(SplitMixOracle):
    """Scalar draws on top of the textbook generator."""

    def normal_pair(self):
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        return r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)

    def gamma(self, a):
        if a < 1:
            g = self.gamma(a + 1)
            return g * self.uniform() ** (1 / a)
        d = a - 1 / 3
        c = 1 / math.sqrt(9 * d)
        while True:
            x = self.normal_pair()[0]
            v = (1 + c * x) ** 3
            if 1 + c * x <= 0:
                continue
            u = self.uniform()
            if u < 1 - 0.0331 * x ** 4 or math.log(u) < 0.5 * x * x + d * (1 - v + math.log(v)):
                return d * v


def partition_oracle(labels, num_classes, K, beta, seed):
    """Per-client index lists, recomputed from scratch."""
    shards = [dict() for _ in range(K)]
    for y in range(num_classes):
        idx = [i for i, lab in enumerate(labels) if lab == y]
        s = ScalarStream(child_key(seed, y))
        g = [s.gamma(beta) for _ in range(K)]
        total = sum(g)
        if total > 0:
            p = [v / total for v in g]
        else:
            p = [0.0] * K
            p[max(range(K), key=lambda i: g[i])] = 1.0
        order = [idx[j] for j in fisher_yates_prefix(s, len(idx), len(idx))]
        raw = [q * len(idx) for q in p]
        counts = [math.floor(r) for r in raw]
        leftover = len(idx) - sum(counts)
        ranked = sorted(range(K), key=lambda i: (-(raw[i] - counts[i]), i))
        for i in ranked[:leftover]:
            counts[i] += 1
        start = 0
        for k in range(K):
            shards[k][y] = order[start:start + counts[k]]
            start += counts[k]
    return shards


def encoder_pattern(params, x):
    """Signs of every ReLU input of the encoder at ``x``."""
    from collabdm import encoder as enc
    _, cache = enc.forward(params, x)
    return np.concatenate([(y > 0).ravel() for _, y, _ in cache])


def smooth_between(pattern, x, d, h=1e-3):
    """True when no ReLU changes sign on the segment probed by a central difference."""
    p0 = pattern(x)
    return (np.array_equal(p0, pattern(x + h * d))
            and np.array_equal(p0, pattern(x - h * d)))


def draw_smooth_direction(pattern, x, rng, tries=200, h=1e-3):
    """A random unit direction along which the central difference is kink-free."""
    for _ in range(tries):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d)
        if smooth_between(pattern, x, d, h):
            return d
    return None


CRITERIA = []  # one summary line per acceptance criterion, printed at session end


def report_criterion(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    CRITERIA.append(line)
    print(line)
    return ok
