"""Extended-precision pairwise loss, written from the definitions with plain loops."""
import mpmath as mp

DPS = 40


def _softmax(v):
    m = max(v)
    e = [mp.exp(x - m) for x in v]
    s = mp.fsum(e)
    return [x / s for x in e]


def _refine(params, f):
    k = len(f)
    x = _softmax(f) if params.softmax_rescale else list(f)
    order = sorted(range(k), key=lambda i: (-x[i], i))
    r = [x[i] for i in order]
    phi = [mp.fsum(mp.mpf(params.weight[i, j]) * r[j] for j in range(k)) + mp.mpf(params.bias[i])
           for i in range(k)]
    psi = [mp.sqrt((r[i] - r[i + 1]) / (1 + mp.exp(-phi[i]))) for i in range(k - 1)] + [phi[k - 1]]
    out = [mp.mpf(0)] * k
    tail = mp.mpf(0)
    for i in range(k - 1, -1, -1):
        tail += psi[i]
        out[order[i]] = tail + (f[order[i]] if params.residual else 0)
    return out


def _scores(kind, p):
    k = len(p)
    if kind == "THR":
        return [1 - q for q in p]
    order = sorted(range(k), key=lambda i: (-p[i], i))
    ahead = mp.mpf(0)
    s = [None] * k
    for i in order:
        s[i] = ahead + p[i]
        ahead += p[i]
    return s


def pairwise_loss_mp(params, logits, labels, kind, T):
    """Mean sigmoid((S_true - S_pair) / T) over the batch times its K-label expansion."""
    with mp.workdps(DPS):
        A = [_scores(kind, _softmax(_refine(params, [mp.mpf(float(v)) for v in row]))) for row in logits]
        flat = [a for row in A for a in row]
        T = mp.mpf(T)
        terms = [1 / (1 + mp.exp(-(A[i][y] - a) / T)) for i, y in enumerate(labels) for a in flat]
        return mp.fsum(terms) / len(terms)
