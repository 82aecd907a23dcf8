"""Independent slow reference implementations used as test oracles."""

import itertools

import numpy as np


def naive_attend(p, g, k, v, mask, W, b):
    """Loop form: q_i = W p_i + b + g_i, a_ij = softmax_j(q_i . k_j), c_i = sum_j a_ij v_j."""
    m, d = p.shape
    out = np.zeros((m, v.shape[1]))
    for i in range(m):
        q = [sum(W[r, c] * p[i, c] for c in range(d)) + b[r] + g[i, r] for r in range(W.shape[0])]
        scores = [sum(q[r] * k[j, r] for r in range(len(q))) if mask[j] else None for j in range(len(k))]
        top = max(s for s in scores if s is not None)
        w = [np.exp(s - top) if s is not None else 0.0 for s in scores]
        z = sum(w)
        for j in range(len(k)):
            out[i] += (w[j] / z) * v[j]
    return out


def naive_dual_attend(p, g, enc_a, enc_b, W, b, Wd, bd):
    ca = naive_attend(p, g, *enc_a, W, b)
    cb = naive_attend(p, g, *enc_b, W, b)
    out = np.zeros((p.shape[0], Wd.shape[0]))
    for i in range(p.shape[0]):
        cat = list(ca[i]) + list(cb[i])
        for r in range(Wd.shape[0]):
            out[i, r] = sum(Wd[r, c] * cat[c] for c in range(len(cat))) + bd[r]
    return out


def brute_alignment(gold, hyp):
    """Lexicographically smallest maximum-length matching, by exhaustive enumeration."""
    n, m = len(gold), len(hyp)
    for size in range(min(n, m), -1, -1):
        found = [list(zip(gi, hi))
                 for gi in itertools.combinations(range(n), size)
                 for hi in itertools.combinations(range(m), size)
                 if all(gold[a] == hyp[c] for a, c in zip(gi, hi))]
        if found:
            return min(found)
    return []


def brute_chunk_keys(gold, hyp):
    """(gold_start, gold_end, hyp words) for each unmatched region of the brute alignment."""
    out = []
    ga = ha = 0
    for a, c in brute_alignment(gold, hyp) + [(len(gold), len(hyp))]:
        if a > ga or c > ha:
            out.append((ga, a, tuple(hyp[ha:c])))
        ga, ha = a + 1, c + 1
    return out


def brute_recall(pairs, nbest, k):
    """Reference (chunks recalled, chunks total, utterances recalled, utterances total)."""
    chunks_total = chunks_hit = utt_hit = 0
    for pair in pairs:
        hyps = nbest[pair.id][:k]
        predicted = [brute_chunk_keys(pair.true_words, h) for h in hyps]
        for chunk in brute_chunk_keys(pair.true_words, pair.recognized_words):
            chunks_total += 1
            chunks_hit += any(chunk in keys for keys in predicted)
        utt_hit += any(tuple(h) == tuple(pair.recognized_words) for h in hyps)
    return chunks_hit, chunks_total, utt_hit, len(pairs)
