"""Independent reference values for the caption-metric fixtures.

Brute-force implementations (exact fractions where possible) used to pin the
expected numbers in the Rust fixture table. Run: python3 tools/metric_oracle.py
"""
import itertools
import math
import re
from collections import Counter
from fractions import Fraction


def tok(s):
    s = "".join(c.lower() if c.isalnum() else (" " if c.isspace() else "") for c in s)
    return s.split()


def bleu(h, refs, n):
    if not h:
        return 0.0
    logs = 0.0
    for k in range(1, n + 1):
        hg = Counter(tuple(h[i:i + k]) for i in range(len(h) - k + 1))
        mx = Counter()
        for r in refs:
            for g, c in Counter(tuple(r[i:i + k]) for i in range(len(r) - k + 1)).items():
                mx[g] = max(mx[g], c)
        m = sum(min(c, mx[g]) for g, c in hg.items())
        total = max(len(h) - k + 1, 0)
        if m == 0:
            if k == 1:
                return 0.0
            p = Fraction(1, total + 1)
        else:
            p = Fraction(m, total)
        logs += math.log(p)
    c = len(h)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(logs / n)


def lcs(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            t[i + 1][j + 1] = t[i][j] + 1 if x == y else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


def rouge(h, refs, beta=1.2):
    best = 0.0
    for r in refs:
        l = lcs(h, r)
        if l == 0:
            continue
        R, P = Fraction(l, len(r)), Fraction(l, len(h))
        f = (1 + beta**2) * R * P / (R + beta**2 * P)
        best = max(best, float(f))
    return best


def alignments(h, r):
    """Every injective matching between equal words, as sorted (i, j) lists."""
    pairs = [(i, j) for i in range(len(h)) for j in range(len(r)) if h[i] == r[j]]
    out = []
    for size in range(len(pairs), -1, -1):
        for combo in itertools.combinations(pairs, size):
            if len({i for i, _ in combo}) == size and len({j for _, j in combo}) == size:
                out.append(sorted(combo))
        if out:
            return out
    return [[]]


def chunks(al):
    c, prev = 0, None
    for i, j in al:
        if prev is None or not (prev[0] + 1 == i and prev[1] + 1 == j):
            c += 1
        prev = (i, j)
    return c


def meteor(h, refs):
    best = 0.0
    for r in refs:
        als = alignments(h, r)
        m = len(als[0])
        if m == 0:
            continue
        ch = min(chunks(a) for a in als)
        P, R = Fraction(m, len(h)), Fraction(m, len(r))
        f = 10 * P * R / (R + 9 * P)
        pen = Fraction(1, 2) * Fraction(ch, m) ** 3
        best = max(best, float(f * (1 - pen)))
    return best


FIXTURES = [
    ("a b c", ["a b d"]),
    ("a b c d", ["a c b d"]),
    ("the cat", ["the cat"]),
    ("cat", ["cat"]),
    ("a red block appears in the north west", ["a red block appears in the north west"]),
    ("x y z", ["a b c"]),
    ("a red block appears in the north", ["a red block has been added to the north", "the north now contains a red block"]),
    ("the the the the", ["the cat is on the mat"]),
    ("a red block", ["a red block appears in the north west"]),
    ("there is a new blue block in the south east of the scene", ["a blue block appears in the south east", "a new blue block is built in the south east"]),
    ("north west block red a", ["a red block appears in the north west"]),
    ("the scene is unchanged", ["there is no change", "the scene is unchanged", "nothing has changed in the scene"]),
    ("the cat", ["the dog the cat"]),
    ("a green block disappears from the center", ["the green block in the center is removed", "the center no longer contains a green block"]),
]

if __name__ == "__main__":
    for hyp, refs in FIXTURES:
        h, rs = tok(hyp), [tok(r) for r in refs]
        print(f"{hyp!r}: bleu1={bleu(h, rs, 1)!r} bleu4={bleu(h, rs, 4)!r} meteor={meteor(h, rs)!r} rouge={rouge(h, rs)!r}")
