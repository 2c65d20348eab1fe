"""Independent reference implementations used by the tests.

Everything here is deliberately naive: explicit loops, dense arrays and
direct formulas, sharing no code with the package beyond graph accessors.
"""
import itertools

import numpy as np

from hsgnn.hetgraph import HeteroGraph, Schema


def random_graph(rng, types=("V", "D", "M"), max_per_type=8, density=None, edge_types=None):
    """Small random typed graph; every pair of distinct types may carry edges."""
    counts = {t: int(rng.integers(1, max_per_type + 1)) for t in types}
    if edge_types is None:
        edge_types = [(a, b) for a, b in itertools.combinations(types, 2)]
    schema = Schema(tuple(types), tuple(edge_types), human_types=(types[0],))
    keys = {t: [f"{t.lower()}{i}" for i in range(counts[t])] for t in types}
    edges = {}
    for a, b in edge_types:
        p = rng.uniform(0.1, 0.7) if density is None else density
        edges[(a, b)] = [(keys[a][i], keys[b][j]) for i in range(counts[a]) for j in range(counts[b])
                         if rng.random() < p]
    return HeteroGraph.from_edge_lists(schema, keys, edges)


def dense_adj(graph, a, b):
    return np.asarray(graph.adjacency(a, b).todense(), dtype=np.int64)


def enumerate_paths(graph, types):
    """Count meta-path instances by depth-first enumeration over neighbour lists."""
    adj = {}
    for x, y in zip(types[:-1], types[1:]):
        A = dense_adj(graph, x, y)
        adj[(x, y)] = [list(np.flatnonzero(row)) for row in A]
    n0, n1 = graph.count(types[0]), graph.count(types[-1])
    out = np.zeros((n0, n1), dtype=np.int64)

    def walk(step, node, start):
        if step == len(types) - 1:
            out[start, node] += 1
            return
        for nxt in adj[(types[step], types[step + 1])][node]:
            walk(step + 1, nxt, start)

    for s in range(n0):
        walk(0, s, s)
    return out


def sps_direct(pc_full):
    """Symmetric PathSim on a dense N x N count matrix: (C+C^T)/(c_ii+c_jj)."""
    C = np.asarray(pc_full, dtype=np.float64)
    n = C.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            num = C[i, j] + C[j, i]
            den = C[i, i] + C[j, j]
            out[i, j] = num / den if den > 0 and num > 0 else 0.0
    return out


def full_count_matrix(graph, types):
    """N x N matrix holding PC in block (t1, tn) and, on the diagonal, the self counts.

    Palindromic paths use the diagonal of PC; asymmetric ones use round-trip
    counts (M M^T)_ii for t1 nodes and (M^T M)_jj for tn nodes.
    """
    M = enumerate_paths(graph, types)
    n = graph.n_nodes
    C = np.zeros((n, n), dtype=np.int64)
    r0, r1 = graph.offset(types[0]), graph.offset(types[-1])
    C[r0:r0 + M.shape[0], r1:r1 + M.shape[1]] = M
    if list(types) != list(types)[::-1]:
        for i in range(M.shape[0]):
            C[r0 + i, r0 + i] = int(sum(M[i, j] ** 2 for j in range(M.shape[1])))
        for j in range(M.shape[1]):
            C[r1 + j, r1 + j] = int(sum(M[i, j] ** 2 for i in range(M.shape[0])))
    return C


def _same_end_oracle(graph, types):
    """Both ends share a type but the path is not a palindrome: every node is
    both a start and an end, so its self count is the mean of its two round
    trips and the numerator is PC(i,j) + PC(j,i)."""
    M = enumerate_paths(graph, types)
    m = M.shape[0]
    selfc = [(sum(M[i, k] ** 2 for k in range(m)) + sum(M[k, i] ** 2 for k in range(m))) / 2 for i in range(m)]
    S = np.zeros((graph.n_nodes, graph.n_nodes))
    r = graph.offset(types[0])
    for i in range(m):
        for j in range(m):
            num, den = M[i, j] + M[j, i], selfc[i] + selfc[j]
            S[r + i, r + j] = num / den if num > 0 and den > 0 else 0.0
    return S


def sps_oracle(graph, types):
    if types[0] == types[-1] and list(types) != list(types)[::-1]:
        return _same_end_oracle(graph, types)
    C = full_count_matrix(graph, types)
    S = sps_direct(C)
    if list(types) != list(types)[::-1]:
        # only the (t1, tn) block and its mirror carry similarity
        n = graph.n_nodes
        mask = np.zeros((n, n), dtype=bool)
        s0, s1 = graph.type_slice(types[0]), graph.type_slice(types[-1])
        mask[s0, s1] = True
        mask[s1, s0] = True
        S = np.where(mask, S, 0.0)
    return S


# -- network pieces ----------------------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def leaky(x, s=0.2):
    return np.where(x > 0, x, s * x)


def dense_gcn_norm(A):
    A = np.asarray(A, dtype=np.float64)
    M = A + np.eye(A.shape[0])
    d = M.sum(axis=1)
    Dm = np.diag(1.0 / np.sqrt(d))
    return Dm @ M @ Dm


def scalar_attention(F, omega, pairs, act=leaky):
    """Weights w_kij = softmax_k act(omega_k . [f_i || f_j]) computed pair by pair."""
    K = omega.shape[0]
    out = np.zeros((len(pairs), K))
    for e, (i, j) in enumerate(pairs):
        z = np.array([act(float(np.dot(omega[k], np.concatenate([F[i], F[j]])))) for k in range(K)])
        ez = np.exp(z - z.max())
        out[e] = ez / ez.sum()
    return out


def dense_forward(mats, F, params, variant, aggregator="concat", att=leaky, gnn=relu):
    """Step-by-step dense HSGNN forward: per-path GNNs, aggregation, attention, fusion, head."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    F = np.asarray(F, dtype=np.float64)
    K, n = len(mats), F.shape[0]
    support = sorted({(i, j) for m in mats for i, j in zip(*np.nonzero(m))})
    if variant == "agg_attention":
        blocks = [gnn(dense_gcn_norm(mats[k]) @ F @ params["meta_W"][k]) for k in range(K)]
        F_meta = np.hstack(blocks) if aggregator == "concat" else sum(blocks) / K
    else:
        F_meta = F
    A = np.zeros((n, n))
    if variant == "sum":
        w = np.exp(params["w"] - params["w"].max())
        w /= w.sum()
        for k in range(K):
            A += w[k] * mats[k]
    else:
        W = scalar_attention(F_meta, params["omega"], support, att)
        for e, (i, j) in enumerate(support):
            A[i, j] = sum(W[e, k] * mats[k][i, j] for k in range(K))
    logits = dense_gcn_norm(A) @ F_meta @ params["head_W"] + params["head_b"]
    return logits, A, F_meta


def scalar_bce(logits, labels, rows):
    tot, cnt = 0.0, 0
    for i in rows:
        for j in range(logits.shape[1]):
            x, y = float(logits[i, j]), float(labels[i, j])
            p = 1.0 / (1.0 + np.exp(-x))
            tot += -(y * np.log(p) + (1 - y) * np.log(1 - p))
            cnt += 1
    return tot / cnt


def scalar_precision(scores, truth, k, capped=True):
    vals = []
    for s, t in zip(scores, truth):
        true = {j for j, v in enumerate(t) if v}
        if not true:
            continue
        ranked = sorted(range(len(s)), key=lambda j: (-s[j], j))[:k]
        hits = sum(1 for j in ranked if j in true)
        vals.append(hits / (min(k, len(true)) if capped else k))
    return float(np.mean(vals))


def headache_graph():
    """Two visits of one patient: v1 {d1, d2}, v2 {d2, d3}, plus medications.

    headache (d2) and benzodiazepines (m1) share the two visits, so the D-V-M
    PathCount between them is 2.
    """
    schema = Schema(("C", "V", "D", "M"), (("C", "V"), ("V", "D"), ("V", "M")), human_types=("C", "V"))
    keys = {"C": ["p1"], "V": ["v1", "v2"], "D": ["d1", "headache", "d3"], "M": ["benzodiazepines", "m2"]}
    edges = {
        ("C", "V"): [("p1", "v1"), ("p1", "v2")],
        ("V", "D"): [("v1", "d1"), ("v1", "headache"), ("v2", "headache"), ("v2", "d3")],
        ("V", "M"): [("v1", "benzodiazepines"), ("v2", "benzodiazepines"), ("v2", "m2")],
    }
    return HeteroGraph.from_edge_lists(schema, keys, edges)


def random_instance(rng, n=20, K=2, d=6, density=0.3):
    """K symmetric nonnegative N x N matrices (values in (0, 1]) and dense features."""
    mats = []
    for _ in range(K):
        M = np.triu(rng.uniform(0.05, 1.0, (n, n)) * (rng.random((n, n)) < density))
        mats.append(M + np.triu(M, 1).T)
    return mats, rng.normal(size=(n, d))


def kink_distance(net, params):
    """Smallest |pre-activation| feeding a relu/leaky_relu kink in one forward pass.

    Central differences are only meaningful when no kink lies within the
    probe step, so gradient-check fixtures are drawn until this is large.
    """
    _, cache = net.forward(params)
    vals = [np.inf]
    if "att_pre" in cache:
        vals.append(np.abs(cache["att_pre"]).min())
    for y in cache.get("meta_pre", []):
        vals.append(np.abs(y[y != 0]).min() if np.any(y != 0) else np.inf)
    return float(min(vals))
