"""Naive reference implementations used as independent test oracles.

Everything here is deliberately slow and literal (Python loops, fsum) so it
shares no code path with the kernels it checks.
"""

import math


def matmul_triple_loop(a, b):
    rows, inner = len(a), len(a[0])
    cols = len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += float(a[i][k]) * float(b[k][j])
            out[i][j] = acc
    return out


def frobenius_fsum(a):
    return math.sqrt(math.fsum(float(v) * float(v) for row in a for v in row))


def softmax_row(row):
    exps = [math.exp(float(v)) for v in row]
    total = math.fsum(exps)
    return [e / total for e in exps]


def cosine_fsum(a, b):
    dot = math.fsum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(math.fsum(float(x) * float(x) for x in a))
    nb = math.sqrt(math.fsum(float(y) * float(y) for y in b))
    return dot / (na * nb)


def layer_norm_two_pass(x, gain, bias, eps):
    n = len(x)
    mean = math.fsum(float(v) for v in x) / n
    var = math.fsum((float(v) - mean) ** 2 for v in x) / n
    scale = math.sqrt(var + eps)
    return [(float(v) - mean) / scale * float(g) + float(b) for v, g, b in zip(x, gain, bias)]


def column_means(rows):
    cols = len(rows[0])
    n = len(rows)
    return [math.fsum(float(r[j]) for r in rows) / n for j in range(cols)]
