"""Retrieval metrics and biological evaluations.

Everything here is plain numpy over frozen embeddings: cross-modal Recall@k,
average precision with permutation-test significance and Benjamini-Hochberg
filtering, replicate detection, sister matching, gene-relationship recall over
similarity-distribution tails, and control-anchored batch correction (kernel
PCA fit on controls, then per-batch standardization against transformed
controls).

Determinism rules: candidate ties break by ascending candidate id, permutation
streams are keyed by (seed, query id), and kernel-PCA eigenvector signs are
fixed by making each vector's largest-magnitude entry positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import generator


# ---------------------------------------------------------------------------
# similarity containers

@dataclass
class SimilarityMatrix:
    s: np.ndarray
    row_ids: list
    col_ids: list

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.s.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError(f"similarity shape {self.s.shape} does not match id lists")
        if self.s.size and (self.s.min() < -1.0 - 1e-4 or self.s.max() > 1.0 + 1e-4):
            raise ValueError("similarities must lie in [-1, 1]")
        self.s = np.clip(self.s, -1.0, 1.0)


def cosine_matrix(p, q, row_ids, col_ids):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    if (pn < 1e-30).any() or (qn < 1e-30).any():
        raise ValueError("zero-norm embedding row")
    return SimilarityMatrix((p / pn) @ (q / qn).T, list(row_ids), list(col_ids))


@dataclass
class RankedList:
    """Candidates in retrieval order (descending score, ties by ascending id)."""

    candidate_ids: list
    relevance: np.ndarray

    def __post_init__(self):
        self.relevance = np.asarray(self.relevance, dtype=bool)
        if len(self.candidate_ids) != self.relevance.shape[0]:
            raise ValueError("one relevance flag per candidate required")

    @property
    def n_relevant(self):
        return int(self.relevance.sum())


def rank_candidates(scores, candidate_ids, relevant_ids):
    """Sort candidates by descending score; ties break by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(candidate_ids)),
                   key=lambda i: (-scores[i], candidate_ids[i]))
    relevant = set(relevant_ids)
    ids = [candidate_ids[i] for i in order]
    flags = np.array([cid in relevant for cid in ids], dtype=bool)
    return RankedList(candidate_ids=ids, relevance=flags)


# ---------------------------------------------------------------------------
# core metrics

def recall_at_k(sim, k):
    """Fraction of rows whose true (same-id) column ranks in the top k."""
    n = len(sim.row_ids)
    if sim.s.shape[0] != sim.s.shape[1] or sorted(sim.row_ids) != sorted(sim.col_ids):
        raise ValueError("recall_at_k needs a square matrix over matched ids")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    col_index = {cid: j for j, cid in enumerate(sim.col_ids)}
    true_cols = np.array([col_index[rid] for rid in sim.row_ids])
    true_scores = sim.s[np.arange(n), true_cols]
    better = (sim.s > true_scores[:, None]).sum(axis=1)
    ranks = better + 1
    tied_rows = np.nonzero((sim.s == true_scores[:, None]).sum(axis=1) > 1)[0]
    for i in tied_rows:
        rid = sim.row_ids[i]
        j = true_cols[i]
        ranks[i] += sum(1 for jj in np.nonzero(sim.s[i] == true_scores[i])[0]
                        if jj != j and sim.col_ids[jj] < rid)
    return float((ranks <= k).mean())


def _ap_from_flags(flags):
    flags = np.asarray(flags, dtype=np.float64)
    n_rel = flags.sum()
    precision = np.cumsum(flags) / np.arange(1, flags.size + 1)
    return float((precision * flags).sum() / n_rel)


def average_precision(ranked):
    """AP = sum_k (R_k - R_{k-1}) P_k over the ranked candidate list."""
    if ranked.n_relevant == 0:
        raise ValueError("average precision needs at least one relevant candidate")
    return _ap_from_flags(ranked.relevance)


def permutation_pvalue(ranked, n_perms, seed, query_key=""):
    """Add-one permutation p-value for an observed AP.

    Null: relevance positions are exchangeable. Permutations are drawn from a
    stream keyed by (seed, query_key) so each query is reproducible in
    isolation; p = (1 + #{AP_perm >= AP_obs}) / (n_perms + 1).
    """
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    observed = average_precision(ranked)
    flags = ranked.relevance.astype(np.float64)
    n = flags.size
    rng = generator(seed, "permutation", query_key)
    hits = 0
    chunk = max(1, min(n_perms, 65536 // max(n, 1)))
    done = 0
    ranks = np.arange(1, n + 1, dtype=np.float64)
    n_rel = flags.sum()
    while done < n_perms:
        m = min(chunk, n_perms - done)
        perms = rng.permuted(np.tile(flags, (m, 1)), axis=1)
        ap = (np.cumsum(perms, axis=1) / ranks * perms).sum(axis=1) / n_rel
        hits += int((ap >= observed).sum())
        done += m
    return (1 + hits) / (n_perms + 1)


def benjamini_hochberg(pvalues, alpha=0.05):
    """Step-up FDR control; returns a boolean rejection flag per input."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if (p < 0).any() or (p > 1).any():
        raise ValueError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    m = p.size
    thresholds = alpha * np.arange(1, m + 1) / m
    passing = np.nonzero(p[order] <= thresholds)[0]
    flags = np.zeros(m, dtype=bool)
    if passing.size:
        cutoff = p[order[passing[-1]]]
        flags = p <= cutoff
    return flags


# ---------------------------------------------------------------------------
# batch correction

def _kernel(x, y, kind, gamma, degree, coef0):
    if kind == "linear":
        return x @ y.T
    if kind == "rbf":
        sq = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * x @ y.T
        return np.exp(-gamma * np.maximum(sq, 0.0))
    if kind == "polynomial":
        return (gamma * (x @ y.T) + coef0) ** degree
    raise ValueError(f"unknown kernel {kind!r}")


class BatchCorrector:
    """Kernel PCA fit on all controls, then per-batch control standardization."""

    def __init__(self, kernel="linear", gamma=None, degree=3, coef0=1.0,
                 n_components=None):
        if kernel not in ("linear", "rbf", "polynomial"):
            raise ValueError(f"unknown kernel {kernel!r}")
        self.kernel = kernel
        self.gamma = gamma
        self.degree = degree
        self.coef0 = coef0
        self.n_components = n_components
        self._controls = None
        self._alphas = None
        self._k_fit_mean_rows = None
        self._k_fit_mean = None

    def _fit_kpca(self, controls):
        m = controls.shape[0]
        gamma = self.gamma if self.gamma is not None else 1.0 / controls.shape[1]
        k = _kernel(controls, controls, self.kernel, gamma, self.degree, self.coef0)
        row_mean = k.mean(axis=0)
        total_mean = k.mean()
        kc = k - row_mean[None, :] - row_mean[:, None] + total_mean
        eigvals, eigvecs = np.linalg.eigh(kc)
        order = np.argsort(eigvals)[::-1]
        eigvals, eigvecs = eigvals[order], eigvecs[:, order]
        tol = max(eigvals.max(), 0.0) * 1e-10
        keep = eigvals > max(tol, 1e-12)
        if not keep.any():
            raise ValueError("singular kernel matrix: no positive eigenvalues")
        eigvals, eigvecs = eigvals[keep], eigvecs[:, keep]
        if self.n_components is not None:
            eigvals = eigvals[:self.n_components]
            eigvecs = eigvecs[:, :self.n_components]
        # deterministic sign: largest-magnitude coefficient is positive
        for j in range(eigvecs.shape[1]):
            pivot = np.argmax(np.abs(eigvecs[:, j]))
            if eigvecs[pivot, j] < 0:
                eigvecs[:, j] = -eigvecs[:, j]
        self._controls = controls
        self._gamma = gamma
        self._alphas = eigvecs / np.sqrt(eigvals)[None, :]
        self._k_fit_mean_rows = row_mean
        self._k_fit_mean = total_mean

    def _transform(self, x):
        k = _kernel(x, self._controls, self.kernel, self._gamma, self.degree,
                    self.coef0)
        kc = (k - k.mean(axis=1, keepdims=True) - self._k_fit_mean_rows[None, :]
              + self._k_fit_mean)
        return kc @ self._alphas

    def correct(self, embeddings, control_flags, batch_ids):
        """Transform all embeddings, then z-score per batch against that
        batch's transformed controls (zero-variance dims standardize with
        scale 1)."""
        x = np.asarray(embeddings, dtype=np.float64)
        control_flags = np.asarray(control_flags, dtype=bool)
        batch_ids = list(batch_ids)
        if x.ndim != 2 or x.shape[0] != control_flags.size or len(batch_ids) != x.shape[0]:
            raise ValueError("embeddings, control flags, and batch ids must align")
        for batch in sorted(set(batch_ids)):
            n_ctrl = sum(1 for b, c in zip(batch_ids, control_flags) if b == batch and c)
            if n_ctrl < 2:
                raise ValueError(f"batch {batch} has {n_ctrl} controls, need >= 2")
        self._fit_kpca(x[control_flags])
        transformed = self._transform(x)
        out = np.empty_like(transformed)
        for batch in sorted(set(batch_ids)):
            in_batch = np.array([b == batch for b in batch_ids])
            ctrl = transformed[in_batch & control_flags]
            mean = ctrl.mean(axis=0)
            std = ctrl.std(axis=0)
            std = np.where(std < 1e-12, 1.0, std)
            out[in_batch] = (transformed[in_batch] - mean) / std
        return out


def batch_correct(embeddings, control_flags, batch_ids, kernel="linear", **kwargs):
    return BatchCorrector(kernel=kernel, **kwargs).correct(embeddings, control_flags,
                                                           batch_ids)


# ---------------------------------------------------------------------------
# replicate detection and sister matching

@dataclass
class QueryResult:
    query_id: str
    group: str
    ap: float
    pvalue: float
    significant: bool = False


@dataclass
class MapReport:
    queries: list
    map_unfiltered: float
    map_filtered: float
    filtered_fraction: float
    per_group: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    @property
    def n_queries(self):
        return len(self.queries)


def _finalize_map(queries, skipped, alpha, group_of=None):
    if not queries:
        return MapReport(queries=[], map_unfiltered=float("nan"),
                         map_filtered=float("nan"), filtered_fraction=0.0,
                         skipped=skipped)
    flags = benjamini_hochberg([q.pvalue for q in queries], alpha=alpha)
    for q, flag in zip(queries, flags):
        q.significant = bool(flag)

    def grouped_mean(selector):
        groups = {}
        for q in queries:
            if selector(q):
                groups.setdefault(q.group, []).append(q.ap)
        if not groups:
            return float("nan"), {}
        per_group = {g: float(np.mean(v)) for g, v in sorted(groups.items())}
        return float(np.mean(list(per_group.values()))), per_group

    map_unf, _ = grouped_mean(lambda q: True)
    map_fil, per_group = grouped_mean(lambda q: q.significant)
    frac = float(np.mean([q.significant for q in queries]))
    return MapReport(queries=queries, map_unfiltered=map_unf, map_filtered=map_fil,
                     filtered_fraction=frac, per_group=per_group, skipped=skipped)


def replicate_detection_map(embeddings, control_perts, n_perms=10000, seed=0,
                            alpha=0.05):
    """Replicates-vs-controls retrieval.

    `embeddings` maps (perturbation, batch) to a vector. Each non-control
    (perturbation, batch) embedding queries a candidate pool of its own
    replicates from other batches (relevant) plus every control embedding
    (irrelevant). Per-query APs are permutation-tested, BH-filtered, averaged
    per perturbation and then across perturbations.
    """
    control_perts = set(control_perts)
    keys = sorted(embeddings)
    by_pert = {}
    for pert, batch in keys:
        by_pert.setdefault(pert, []).append(batch)
    control_keys = [(p, b) for (p, b) in keys if p in control_perts]
    if not control_keys:
        raise ValueError("no control embeddings available")

    queries = []
    skipped = []
    for pert in sorted(by_pert):
        if pert in control_perts:
            continue
        batches = by_pert[pert]
        if len(batches) < 2:
            skipped.append(pert)
            continue
        for batch in batches:
            query_key = f"{pert}/{batch}"
            query_vec = embeddings[(pert, batch)]
            cand_keys = [(pert, b) for b in batches if b != batch] + control_keys
            cand_ids = [f"{p}/{b}" for p, b in cand_keys]
            cand = np.stack([embeddings[k] for k in cand_keys])
            scores = cosine_matrix(query_vec[None, :], cand, ["q"], cand_ids).s[0]
            relevant = [f"{pert}/{b}" for b in batches if b != batch]
            ranked = rank_candidates(scores, cand_ids, relevant)
            ap = average_precision(ranked)
            pval = permutation_pvalue(ranked, n_perms, seed, query_key=query_key)
            queries.append(QueryResult(query_id=query_key, group=pert, ap=ap,
                                       pvalue=pval))
    return _finalize_map(queries, skipped, alpha)


def aggregate_embeddings(embeddings, method="mean"):
    """Collapse (perturbation, batch) embeddings to one vector per perturbation."""
    if method not in ("mean", "median"):
        raise ValueError(f"unknown aggregation {method!r}")
    by_pert = {}
    for (pert, _), vec in sorted(embeddings.items()):
        by_pert.setdefault(pert, []).append(np.asarray(vec, dtype=np.float64))
    reduce = np.mean if method == "mean" else np.median
    return {pert: reduce(np.stack(vecs), axis=0) for pert, vecs in by_pert.items()}


def sister_matching_map(aggregated, gene_map, class_map, mode="within",
                        n_perms=10000, seed=0, alpha=0.05):
    """Same-target retrieval among batch-aggregated embeddings.

    `mode` restricts the candidate pool to the query's own class ("within") or
    to all other classes ("across"); relevant candidates are those sharing at
    least one annotated target gene. Queries without a relevant candidate are
    skipped. Group means are per perturbation class.
    """
    if mode not in ("within", "across"):
        raise ValueError(f"unknown mode {mode!r}")
    ids = sorted(i for i in aggregated if i in gene_map and i in class_map)
    missing = sorted(i for i in aggregated if i not in gene_map or i not in class_map)
    genes = {i: set(gene_map[i]) for i in ids}

    queries = []
    skipped = list(missing)
    for qid in ids:
        if mode == "within":
            pool = [c for c in ids if c != qid and class_map[c] == class_map[qid]]
        else:
            pool = [c for c in ids if c != qid and class_map[c] != class_map[qid]]
        relevant = [c for c in pool if genes[qid] & genes[c]]
        if not relevant:
            skipped.append(qid)
            continue
        cand = np.stack([aggregated[c] for c in pool])
        scores = cosine_matrix(aggregated[qid][None, :], cand, ["q"], pool).s[0]
        ranked = rank_candidates(scores, pool, relevant)
        ap = average_precision(ranked)
        pval = permutation_pvalue(ranked, n_perms, seed, query_key=f"sister/{qid}")
        queries.append(QueryResult(query_id=qid, group=class_map[qid], ap=ap,
                                   pvalue=pval))
    return _finalize_map(queries, skipped, alpha)


# ---------------------------------------------------------------------------
# gene-gene relationship recall

@dataclass
class RelationSet:
    pairs: set
    source: str = ""

    def __post_init__(self):
        cleaned = set()
        for a, b in self.pairs:
            if a == b:
                raise ValueError(f"self-pair {a!r} in relation set")
            cleaned.add((min(a, b), max(a, b)))
        self.pairs = cleaned

    def __len__(self):
        return len(self.pairs)

    def restricted_to(self, ids):
        ids = set(ids)
        return RelationSet({p for p in self.pairs if p[0] in ids and p[1] in ids},
                           self.source)


def relation_sets_from_rows(rows):
    by_source = {}
    for a, b, source in rows:
        by_source.setdefault(source, set()).add((a, b))
    return {src: RelationSet(pairs, src) for src, pairs in sorted(by_source.items())}


def gene_gene_recall(aggregated, relations, tail_fraction=0.10):
    """Fraction of known pairs landing in the extreme tails of the pairwise
    similarity distribution (half from the top, half from the bottom)."""
    if not 0.0 < tail_fraction <= 0.5:
        raise ValueError("tail_fraction must lie in (0, 0.5]")
    ids = sorted(aggregated)
    known = relations.restricted_to(ids)
    if len(known) == 0:
        raise ValueError("no relations among scored perturbations")
    mat = np.stack([aggregated[i] for i in ids])
    sims = cosine_matrix(mat, mat, ids, ids).s
    pairs = []
    values = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            pairs.append((ids[i], ids[j]))
            values.append(sims[i, j])
    values = np.asarray(values)
    order = sorted(range(len(pairs)), key=lambda k: (-values[k], pairs[k]))
    k_tail = int(len(pairs) * tail_fraction / 2.0 + 0.5)
    top = {pairs[i] for i in order[:k_tail]}
    bottom = {pairs[i] for i in order[len(order) - k_tail:]}
    hits = sum(1 for p in known.pairs if p in top or p in bottom)
    return hits / len(known)
