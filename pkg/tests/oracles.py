"""Independent reference implementations: plain Python loops, no vectorization, no package code."""

import math


def naive_mean(vectors):
    n = len(vectors)
    return [sum(v[i] for v in vectors) / n for i in range(len(vectors[0]))]


def naive_euclid(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def naive_cosine_distance(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return 1.0 - dot / (na * nb)


def naive_project(z, mean, comps):
    """comps: D rows x k columns."""
    k = len(comps[0])
    centered = [z[i] - mean[i] for i in range(len(z))]
    return [sum(centered[i] * comps[i][j] for i in range(len(z))) for j in range(k)]


def naive_softmax(xs):
    m = max(xs)
    ex = [math.exp(x - m) for x in xs]
    s = sum(ex)
    return [e / s for e in ex]


def naive_dcpn(support, labels, queries, n_way, scales, metric="euclidean", tau=1.0, squared=False, pca=None):
    """support/queries: lists of dicts {"global": [...], "local": [...]}; returns per-query
    (distances[c][s], alpha[c], probs[c], predicted)."""

    def with_mix(f):
        f = dict(f)
        if pca is not None:
            f["mix"] = (naive_project(f["global"], pca["mean_g"], pca["comp_g"])
                        + naive_project(f["local"], pca["mean_l"], pca["comp_l"]))
        return f

    support = [with_mix(f) for f in support]
    queries = [with_mix(f) for f in queries]
    protos = []
    for c in range(n_way):
        members = [f for f, y in zip(support, labels) if y == c]
        protos.append({s: naive_mean([m[s] for m in members]) for s in scales})
    out = []
    for q in queries:
        dist = []
        for c in range(n_way):
            row = []
            for s in scales:
                if metric == "euclidean":
                    d = naive_euclid(q[s], protos[c][s])
                    d = d * d if squared else d
                else:
                    d = naive_cosine_distance(q[s], protos[c][s])
                row.append(d / tau)
            dist.append(row)
        alpha = [sum(math.exp(-d) for d in row) for row in dist]
        probs = naive_softmax(alpha)
        # softmax is strictly increasing, so the winner is read off alpha, where no rounding merges classes
        best = 0
        for c in range(1, n_way):
            if alpha[c] > alpha[best]:
                best = c
        out.append((dist, alpha, probs, best))
    return out


def naive_confusion(preds, labels, n_way):
    """Full n_way x n_way matrix m[true][pred]."""
    m = [[0] * n_way for _ in range(n_way)]
    for p, y in zip(preds, labels):
        m[y][p] += 1
    return m


def naive_metrics(preds, labels, n_way):
    m = naive_confusion(preds, labels, n_way)
    total = len(labels)
    prec, rec, f1 = [], [], []
    pooled_hits = 0
    for c in range(n_way):
        tp = m[c][c]
        fp = sum(m[r][c] for r in range(n_way)) - tp
        fn = sum(m[c][k] for k in range(n_way)) - tp
        tn = total - tp - fp - fn
        pooled_hits += tp + tn
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    correct = sum(m[c][c] for c in range(n_way))
    return {
        "accuracy": correct / total,
        "pooled_accuracy": pooled_hits / (total * n_way),
        "precision": sum(prec) / n_way,
        "recall": sum(rec) / n_way,
        "f1": sum(f1) / n_way,
    }


def naive_auc(probs, labels, n_way):
    """Pairwise-comparison AUC per class, macro-averaged over classes with both outcomes."""
    scores = []
    for c in range(n_way):
        pos = [row[c] for row, y in zip(probs, labels) if y == c]
        neg = [row[c] for row, y in zip(probs, labels) if y != c]
        if not pos or not neg:
            continue
        wins = 0.0
        for a in pos:
            for b in neg:
                wins += 1.0 if a > b else 0.5 if a == b else 0.0
        scores.append(wins / (len(pos) * len(neg)))
    return sum(scores) / len(scores)
