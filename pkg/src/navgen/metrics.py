"""Text and image evaluation metrics.

Text metrics (BLEU-4, ROUGE-L, METEOR-lite, CIDEr) are implemented from their
reference definitions over the shared word normalizer. Image metrics are SSIM
(8x8 sliding window on luma), PSNR, and a mean-cosine score over a caller
supplied embedding function.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict

import numpy as np

from .errors import (
    DimensionMismatch,
    LengthMismatch,
    NoReferences,
    ZeroNormEmbedding,
)
from .textnorm import split_words

# ---------------------------------------------------------------------------
# text metrics
# ---------------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, references) -> float:
    """BLEU with n = 1..4, modified precision, closest-reference brevity penalty.

    No smoothing: any zero n-gram precision zeroes the score.
    """
    if not references:
        raise NoReferences("bleu4 needs at least one reference")
    cand = split_words(candidate)
    refs = [split_words(r) for r in references]
    if not cand:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        counts = _ngrams(cand, n)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        max_ref = Counter()
        for ref in refs:
            for g, c in _ngrams(ref, n).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        for g, c in counts.items():
            clipped += min(c, max_ref.get(g, 0))
        if clipped == 0:
            return 0.0
        log_sum += 0.25 * math.log(clipped / total)

    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum)


def _lcs_len(a, b):
    # classic O(len(a)*len(b)) dynamic program
    m, n = len(a), len(b)
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        ai = a[i - 1]
        for j in range(1, n + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[n]


def rouge_l(candidate: str, references, beta: float = 1.2) -> float:
    """LCS F-measure, max over references."""
    if not references:
        raise NoReferences("rouge_l needs at least one reference")
    cand = split_words(candidate)
    best = 0.0
    for r in references:
        ref = split_words(r)
        if not cand or not ref:
            continue
        lcs = _lcs_len(cand, ref)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        rec = lcs / len(ref)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def _match_stats(cand, ref, node_cap=200_000):
    """Exact-match unigram alignment: (max matches, min chunks over max alignments).

    Branch-and-bound over candidate positions; exact for instruction-sized
    inputs, bounded at `node_cap` explored nodes for pathological duplication.
    """
    quota = {}
    c_counts = Counter(cand)
    r_counts = Counter(ref)
    for w, c in c_counts.items():
        q = min(c, r_counts.get(w, 0))
        if q:
            quota[w] = q
    matches = sum(quota.values())
    if matches == 0:
        return 0, 0

    ref_pos = defaultdict(list)
    for j, w in enumerate(ref):
        ref_pos[w].append(j)
    # remaining candidate occurrences of w at/after position i
    remaining = [Counter() for _ in range(len(cand) + 1)]
    for i in range(len(cand) - 1, -1, -1):
        remaining[i] = remaining[i + 1].copy()
        remaining[i][cand[i]] += 1

    best = [matches + 1]
    nodes = [0]

    def dfs(i, need, used, chunks, last):
        if chunks >= best[0] or nodes[0] > node_cap:
            return
        if not need:
            best[0] = min(best[0], chunks)
            return
        nodes[0] += 1
        w = cand[i]
        options = []
        if w in need:
            cands = [j for j in ref_pos[w] if j not in used]
            # extending the current chunk first makes pruning effective
            cands.sort(key=lambda j: (0 if last == (i - 1, j - 1) else 1, j))
            for j in cands:
                options.append(j)
        for j in options:
            nc = chunks if last == (i - 1, j - 1) else chunks + 1
            nxt = dict(need)
            if nxt[w] == 1:
                del nxt[w]
            else:
                nxt[w] -= 1
            dfs(i + 1, nxt, used | {j}, nc, (i, j))
        # skip position i if the quota for w can still be met later
        if w not in need or remaining[i + 1][w] >= need[w]:
            dfs(i + 1, need, used, chunks, last)

    dfs(0, dict(quota), frozenset(), 0, None)
    return matches, best[0]


def meteor_lite(candidate: str, references) -> float:
    """Exact-match METEOR: Fmean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3."""
    if not references:
        raise NoReferences("meteor_lite needs at least one reference")
    cand = split_words(candidate)
    best = 0.0
    for r in references:
        ref = split_words(r)
        if not cand or not ref:
            continue
        m, chunks = _match_stats(cand, ref)
        if m == 0:
            continue
        p = m / len(cand)
        rec = m / len(ref)
        fmean = 10 * p * rec / (rec + 9 * p)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return best


def cider(candidates, references) -> float:
    """Corpus CIDEr: tf-idf n-gram cosine (n = 1..4) averaged over n and
    references, x10, then averaged over candidates."""
    scores = cider_per_sample(candidates, references)
    return float(np.mean(scores)) if scores else 0.0


def cider_per_sample(candidates, references):
    if len(candidates) != len(references):
        raise LengthMismatch(
            f"{len(candidates)} candidates vs {len(references)} reference lists")
    if not candidates:
        raise LengthMismatch("cider needs at least one candidate")
    for refs in references:
        if not refs:
            raise NoReferences("every candidate needs at least one reference")

    ref_tokens = [[split_words(r) for r in refs] for refs in references]
    cand_tokens = [split_words(c) for c in candidates]

    # document frequency: number of candidate entries whose reference set
    # contains the n-gram
    df = Counter()
    for refs in ref_tokens:
        seen = set()
        for ref in refs:
            for n in range(1, 5):
                seen.update(_ngrams(ref, n).keys())
        df.update(seen)
    corpus_size = len(references)

    def tfidf_vec(tokens):
        vecs = []
        for n in range(1, 5):
            counts = _ngrams(tokens, n)
            vec = {g: c * math.log(corpus_size / max(1.0, df[g])) for g, c in counts.items()}
            vecs.append(vec)
        return vecs

    def cosine(u, v):
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        dot = sum(x * v[g] for g, x in u.items() if g in v)
        return dot / (nu * nv)

    out = []
    for cand, refs in zip(cand_tokens, ref_tokens):
        cvecs = tfidf_vec(cand)
        sim = 0.0
        for ref in refs:
            rvecs = tfidf_vec(ref)
            sim += sum(cosine(cvecs[n], rvecs[n]) for n in range(4)) / 4.0
        out.append(10.0 * sim / len(refs))
    return out


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def _as_gray(img):
    px = img.pixels if hasattr(img, "pixels") else np.asarray(img)
    px = px.astype(np.float64)
    if px.ndim == 3:
        return px @ _LUMA
    return px


def ssim(a, b, window: int = 8) -> float:
    """Mean structural similarity over all window x window patches (stride 1)
    of the luma-converted images."""
    ga, gb = _as_gray(a), _as_gray(b)
    if ga.shape != gb.shape:
        raise DimensionMismatch(f"shape mismatch {ga.shape} vs {gb.shape}")
    win = min(window, ga.shape[0], ga.shape[1])
    wa = np.lib.stride_tricks.sliding_window_view(ga, (win, win))
    wb = np.lib.stride_tricks.sliding_window_view(gb, (win, win))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def psnr(a, b) -> float:
    """20*log10(255/sqrt(MSE)) over all channels; +inf for identical images."""
    pa = (a.pixels if hasattr(a, "pixels") else np.asarray(a)).astype(np.float64)
    pb = (b.pixels if hasattr(b, "pixels") else np.asarray(b)).astype(np.float64)
    if pa.shape != pb.shape:
        raise DimensionMismatch(f"shape mismatch {pa.shape} vs {pb.shape}")
    mse = ((pa - pb) ** 2).mean()
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(255.0 / math.sqrt(mse))


def embed_cosine(images, target, embedder) -> float:
    """Mean cosine similarity between embedded images and an embedded target."""
    tv = np.asarray(embedder(target), dtype=np.float64)
    tn = np.linalg.norm(tv)
    if tn == 0.0:
        raise ZeroNormEmbedding("target embedding has zero norm")
    sims = []
    for img in images:
        v = np.asarray(embedder(img), dtype=np.float64)
        if v.shape != tv.shape:
            raise DimensionMismatch(f"embedding shapes differ: {v.shape} vs {tv.shape}")
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ZeroNormEmbedding("image embedding has zero norm")
        sims.append(float(v @ tv / (n * tn)))
    return float(np.mean(sims))
