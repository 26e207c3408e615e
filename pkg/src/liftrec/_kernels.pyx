# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled posting-list scoring for the BM25-style retriever."""

import numpy as np

cimport numpy as cnp

ctypedef long long i64


cdef inline bint _better(double sa, i64 pa, double sb, i64 pb) nogil:
    return sa > sb or (sa == sb and pa < pb)


def topk_batch(
    const i64[:, ::1] query_terms,
    const i64[::1] offsets,
    const i64[::1] postings,
    const double[::1] term_weights,
    i64 n_samples,
    int k,
):
    """Score every query against the candidates reachable through its posting lists.

    ``query_terms[q, j]`` is the term slot of field j of query q (-1 when the
    value never occurs). Scores are accumulated field by field, only
    candidates with a positive score are kept, and the best ``k`` come back
    ordered by (score desc, position asc). Unused slots hold -1 / nan.
    """
    cdef Py_ssize_t Q = query_terms.shape[0]
    cdef Py_ssize_t M = query_terms.shape[1]
    out_pos_arr = np.full((Q, k), -1, dtype=np.int64)
    out_score_arr = np.full((Q, k), np.nan, dtype=np.float64)
    scratch_arr = np.zeros(n_samples, dtype=np.float64)
    seen_arr = np.zeros(n_samples, dtype=np.uint8)
    touched_arr = np.empty(max(n_samples, 1), dtype=np.int64)
    best_pos_arr = np.empty(max(k, 1), dtype=np.int64)
    best_sc_arr = np.empty(max(k, 1), dtype=np.float64)

    cdef i64[:, ::1] out_pos = out_pos_arr
    cdef double[:, ::1] out_score = out_score_arr
    cdef double[::1] scratch = scratch_arr
    cdef unsigned char[::1] seen = seen_arr
    cdef i64[::1] touched = touched_arr
    cdef i64[::1] best_pos = best_pos_arr
    cdef double[::1] best_sc = best_sc_arr

    cdef Py_ssize_t q, j, i, slot
    cdef i64 term, p, s, nt, cnt
    cdef double w, sc

    with nogil:
        for q in range(Q):
            nt = 0
            for j in range(M):
                term = query_terms[q, j]
                if term < 0:
                    continue
                w = term_weights[term]
                for p in range(offsets[term], offsets[term + 1]):
                    s = postings[p]
                    if not seen[s]:
                        seen[s] = 1
                        touched[nt] = s
                        nt += 1
                    scratch[s] += w

            cnt = 0
            for i in range(nt):
                s = touched[i]
                sc = scratch[s]
                scratch[s] = 0.0
                seen[s] = 0
                if sc <= 0.0:
                    continue
                if cnt == k and not _better(sc, s, best_sc[k - 1], best_pos[k - 1]):
                    continue
                slot = cnt if cnt < k else k - 1
                while slot > 0 and _better(sc, s, best_sc[slot - 1], best_pos[slot - 1]):
                    best_sc[slot] = best_sc[slot - 1]
                    best_pos[slot] = best_pos[slot - 1]
                    slot -= 1
                best_sc[slot] = sc
                best_pos[slot] = s
                if cnt < k:
                    cnt += 1

            for i in range(cnt):
                out_pos[q, i] = best_pos[i]
                out_score[q, i] = best_sc[i]

    return out_pos_arr, out_score_arr
