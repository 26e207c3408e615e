"""Numpy implementation of the retrieval kernel, used when the extension is absent."""

import numpy as np


def topk_batch(query_terms, offsets, postings, term_weights, n_samples, k):
    Q = query_terms.shape[0]
    out_pos = np.full((Q, k), -1, dtype=np.int64)
    out_score = np.full((Q, k), np.nan, dtype=np.float64)
    for q in range(Q):
        terms = query_terms[q][query_terms[q] >= 0]
        if len(terms) == 0:
            continue
        lists = [postings[offsets[t] : offsets[t + 1]] for t in terms]
        cand = np.concatenate(lists)
        weights = np.repeat(term_weights[terms], [len(x) for x in lists])
        uniq, inv = np.unique(cand, return_inverse=True)
        scores = np.zeros(len(uniq))
        # add.at is unbuffered and sequential, so sums follow field order
        np.add.at(scores, inv, weights)
        keep = scores > 0
        uniq, scores = uniq[keep], scores[keep]
        order = np.lexsort((uniq, -scores))[:k]
        out_pos[q, : len(order)] = uniq[order]
        out_score[q, : len(order)] = scores[order]
    return out_pos, out_score
