"""Explicit-loop reference implementations used as test oracles.

Nothing here touches the package's tensor code; everything is plain Python
floats and ``math``.
"""

import math


def dot(u, v):
    return sum(float(a) * float(b) for a, b in zip(u, v))


def normalize_rows(x):
    out = []
    for row in x:
        n = math.sqrt(sum(float(a) * float(a) for a in row))
        out.append([float(a) / (n + 1e-12) for a in row])
    return out


def token_interaction(a, b):
    """Half the sum of both sides' mean best-match dot products."""
    b_side = sum(max(dot(bj, ai) for ai in a) for bj in b) / len(b)
    a_side = sum(max(dot(ai, bj) for bj in b) for ai in a) / len(a)
    return 0.5 * (b_side + a_side)


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def mlp(x, h1, b1, h2, b2):
    hidden = [max(0.0, sum(x[d] * h1[d][k] for d in range(len(x))) + b1[k]) for k in range(len(b1))]
    return [sum(hidden[k] * h2[k][d] for k in range(len(hidden))) + b2[d] for d in range(len(b2))]


def aggregate(x, W, h1, b1, h2, b2):
    """Slot j = sum_t softmax_t(x_t . W[:, j]) * mlp(x_t)."""
    n, m = len(x), len(W[0])
    h = [mlp(row, h1, b1, h2, b2) for row in x]
    out = []
    for j in range(m):
        w = softmax([sum(x[t][d] * W[d][j] for d in range(len(x[t]))) for t in range(n)])
        out.append([sum(w[t] * h[t][d] for t in range(n)) for d in range(len(h[0]))])
    return out


def infonce_positive_set(s, pos_sets):
    n = len(s)
    total = 0.0
    for mat in (s, [[s[j][i] for j in range(n)] for i in range(n)]):
        for i in range(n):
            neg = [j for j in range(n) if j not in pos_sets[i]]
            for k in pos_sets[i]:
                denom = sum(math.exp(mat[i][j]) for j in neg) + math.exp(mat[i][k])
                total += math.log(math.exp(mat[i][k]) / denom)
    return -total / (2 * n)


def combined_score(video, text, alpha, beta):
    """video/text: dicts with normalized 'tokens', 'mid', 'glob' row lists."""
    return (
        token_interaction(text["tokens"], video["tokens"])
        + alpha * token_interaction(text["mid"], video["mid"])
        + beta * dot(text["glob"][0], video["glob"][0])
    )


def hardest(s, pos_sets):
    """(video per text row, text per video column); -1 when no negative."""
    n = len(s)
    by_text, by_video = [], []
    for i in range(n):
        best, arg = -math.inf, -1
        for j in range(n):
            if j not in pos_sets[i] and s[i][j] > best:
                best, arg = s[i][j], j
        by_text.append(arg)
        best, arg = -math.inf, -1
        for j in range(n):
            if j not in pos_sets[i] and s[j][i] > best:
                best, arg = s[j][i], j
        by_video.append(arg)
    return by_text, by_video


def sorted_rank(row, truth):
    """Rank via a descending stable sort, then moved up past equal scores."""
    order = sorted(range(len(row)), key=lambda j: -row[j])
    pos = order.index(truth)
    while pos > 0 and row[order[pos - 1]] == row[truth]:
        pos -= 1
    return pos + 1


def positive_sets(view1, view2):
    n = len(view1)
    out = []
    for i in range(n):
        own = dot(view1[i], view2[i])
        out.append({i} | {j for j in range(n) if j != i and dot(view1[i], view1[j]) >= own})
    return out
