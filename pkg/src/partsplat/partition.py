"""Initial-timestamp part discovery.

Multi-view mask labels are lifted to 3-D parts in three steps: depth-gated
visibility per view, a pairwise co-occurrence graph whose edge weight is the
number of views where two primitives share a mask label over the number of
views where both are visible, and greedy modularity (Louvain) clustering.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import InconsistentInput, ValidationError
from .field import PartField
from .geom import CameraModel, project_many


def project_pixels(field: PartField, camera: CameraModel):
    """Integer pixel of each primitive's projected center.

    Returns (pixels (N, 2) int (col, row), in_image (N,), depths (N,)).
    Pixels of invalid projections are (-1, -1).
    """
    uv, z, valid = project_many(camera, field.centers)
    pix = np.full((len(field), 2), -1, dtype=np.int64)
    pix[valid] = np.rint(uv[valid]).astype(np.int64)
    in_image = (
        valid
        & (pix[:, 0] >= 0)
        & (pix[:, 0] < camera.width)
        & (pix[:, 1] >= 0)
        & (pix[:, 1] < camera.height)
    )
    return pix, in_image, z


def visible_set(
    field: PartField, camera: CameraModel, depth: np.ndarray, theta_depth: float
) -> np.ndarray:
    """Indices of primitives whose projected pixel lands in-image and whose
    camera-frame depth agrees with the depth map within theta_depth."""
    if theta_depth <= 0:
        raise ValidationError("theta_depth must be positive")
    pix, in_image, z = project_pixels(field, camera)
    idx = np.flatnonzero(in_image)
    dmap = np.asarray(depth, dtype=float)[pix[idx, 1], pix[idx, 0]]
    close = np.abs(z[idx] - dmap) < theta_depth
    return idx[close]


@dataclass
class PartGraph:
    """Sparse co-occurrence graph over primitive indices.

    Edges exist only for pairs that share at least one mask label in some
    co-visible view; weight = numerator / denominator with the raw counts
    kept for exact (rational) comparisons.
    """

    n_nodes: int
    edges_j: np.ndarray
    edges_k: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.numerator / self.denominator

    def edge_count(self) -> int:
        return len(self.edges_j)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["j", "k", "weight", "denominator"])
            for j, k, w, d in zip(self.edges_j, self.edges_k, self.weights, self.denominator):
                writer.writerow([int(j), int(k), repr(float(w)), int(d)])


def build_part_graph(
    n_primitives: int,
    visibility: list[np.ndarray],
    masks: list[np.ndarray],
    pixels: list[np.ndarray],
) -> PartGraph:
    """Count per-view co-membership of visible primitives bucketed by mask
    label; never enumerates all primitive pairs.

    visibility[v] holds visible primitive indices, masks[v] the (H, W) label
    image, and pixels[v] the (N, 2) integer (col, row) pixel of every
    primitive (only visible entries are read).
    """
    n_views = len(visibility)
    if not (len(masks) == len(pixels) == n_views):
        raise ValidationError("visibility, masks and pixels must align per view")

    vis_matrix = np.zeros((n_views, n_primitives), dtype=bool)
    pair_keys = []
    for v in range(n_views):
        vis = np.asarray(visibility[v], dtype=np.int64)
        if len(vis) == 0:
            continue
        vis_matrix[v, vis] = True
        pix = pixels[v][vis]
        bad = (pix[:, 0] < 0) | (pix[:, 1] < 0)
        if bad.any():
            raise InconsistentInput(
                f"view {v}: {bad.sum()} visible primitives have no pixel"
            )
        labels = np.asarray(masks[v])[pix[:, 1], pix[:, 0]]
        for label in np.unique(labels):
            if label < 0:
                continue
            members = np.sort(vis[labels == label])
            if len(members) < 2:
                continue
            jj, kk = np.triu_indices(len(members), k=1)
            pair_keys.append(members[jj] * n_primitives + members[kk])

    if pair_keys:
        keys, counts = np.unique(np.concatenate(pair_keys), return_counts=True)
        ej = (keys // n_primitives).astype(np.int64)
        ek = (keys % n_primitives).astype(np.int64)
        den = (vis_matrix[:, ej] & vis_matrix[:, ek]).sum(axis=0).astype(np.int64)
        num = counts.astype(np.int64)
    else:
        ej = ek = num = den = np.zeros(0, dtype=np.int64)
    return PartGraph(n_primitives, ej, ek, num, den)


def _adjacency(graph: PartGraph):
    adj = [dict() for _ in range(graph.n_nodes)]
    for j, k, w in zip(graph.edges_j, graph.edges_k, graph.weights):
        if w == 0.0 or j == k:
            continue
        adj[j][int(k)] = adj[j].get(int(k), 0.0) + float(w)
        adj[k][int(j)] = adj[k].get(int(j), 0.0) + float(w)
    return adj


def _local_moves(adj, self_loops, resolution):
    """One Louvain level: index-ordered local moves until stable.

    Returns (community array, moved_any).  Ties in gain go to the lower
    community id; a node moves only on strictly positive gain over staying.
    """
    n = len(adj)
    degree = np.array(
        [sum(nbrs.values()) + 2.0 * self_loops[i] for i, nbrs in enumerate(adj)]
    )
    two_m = degree.sum()
    comm = np.arange(n)
    comm_tot = degree.copy()
    if two_m <= 0:
        return comm, False

    moved_any = False
    improved = True
    while improved:
        improved = False
        for i in range(n):
            ci = comm[i]
            links = {}
            for j, w in adj[i].items():
                links[comm[j]] = links.get(comm[j], 0.0) + w
            comm_tot[ci] -= degree[i]
            gain_stay = links.get(ci, 0.0) - resolution * comm_tot[ci] * degree[i] / two_m
            best_c, best_gain = ci, gain_stay
            for c in sorted(links):
                if c == ci:
                    continue
                gain = links[c] - resolution * comm_tot[c] * degree[i] / two_m
                if gain > best_gain or (gain == best_gain and c < best_c):
                    best_c, best_gain = c, gain
            comm_tot[best_c] += degree[i]
            if best_c != ci:
                comm[i] = best_c
                improved = True
                moved_any = True
    return comm, moved_any


def louvain_cluster(graph: PartGraph, resolution: float = 1.0) -> np.ndarray:
    """Greedy modularity clustering; deterministic (index-ordered moves, ties
    toward the lower community id, no randomness).  Isolated nodes end up as
    singleton clusters.  Returns per-node cluster labels 0..C-1."""
    if graph.n_nodes == 0:
        raise ValidationError("empty graph")
    adj = _adjacency(graph)
    self_loops = np.zeros(graph.n_nodes)
    labels = np.arange(graph.n_nodes)

    while True:
        comm, moved = _local_moves(adj, self_loops, resolution)
        if not moved:
            break
        uniq, packed = np.unique(comm, return_inverse=True)
        labels = packed[labels]
        # aggregate: communities become nodes, internal weight becomes self-loops
        n_new = len(uniq)
        new_adj = [dict() for _ in range(n_new)]
        new_self = np.zeros(n_new)
        for i, nbrs in enumerate(adj):
            ci = packed[i]
            for j, w in nbrs.items():
                if j < i:
                    continue
                cj = packed[j]
                if ci == cj:
                    new_self[ci] += w
                else:
                    a, b = (ci, cj) if ci < cj else (cj, ci)
                    new_adj[a][b] = new_adj[a].get(b, 0.0) + w
                    new_adj[b][a] = new_adj[b].get(a, 0.0) + w
        new_self += np.bincount(packed, weights=self_loops, minlength=n_new)
        adj, self_loops = new_adj, new_self
        if n_new == 1:
            break

    _, final = np.unique(labels, return_inverse=True)
    return final.astype(np.int64)


def modularity(graph: PartGraph, labels: np.ndarray, resolution: float = 1.0) -> float:
    """Weighted Newman modularity of a partition (direct evaluation)."""
    w_in = np.zeros(int(labels.max()) + 1)
    degree = np.zeros(graph.n_nodes)
    for j, k, w in zip(graph.edges_j, graph.edges_k, graph.weights):
        degree[j] += w
        degree[k] += w
        if labels[j] == labels[k]:
            w_in[labels[j]] += w
    two_m = degree.sum()
    if two_m <= 0:
        return 0.0
    comm_deg = np.bincount(labels, weights=degree, minlength=len(w_in))
    return float(
        2.0 * w_in.sum() / two_m - resolution * ((comm_deg / two_m) ** 2).sum()
    )


def attach_small_clusters(
    field: PartField, clustering: np.ndarray, min_size: int
) -> np.ndarray:
    """Merge clusters smaller than min_size into the cluster of the nearest
    primitive belonging to a cluster of at least min_size.

    Primitives invisible in every view have no co-occurrence evidence and end
    up as singletons; spatial attachment keeps them riding with the body they
    sit inside.  No-op when min_size <= 1 or no cluster reaches min_size.
    """
    labels = np.asarray(clustering, dtype=np.int64).copy()
    if min_size <= 1:
        return labels
    uniq, counts = np.unique(labels, return_counts=True)
    big = uniq[counts >= min_size]
    if len(big) == 0 or len(big) == len(uniq):
        return labels
    from scipy.spatial import cKDTree

    big_idx = np.flatnonzero(np.isin(labels, big))
    small_idx = np.flatnonzero(~np.isin(labels, big))
    _, nearest = cKDTree(field.centers[big_idx]).query(field.centers[small_idx])
    labels[small_idx] = labels[big_idx[nearest]]
    return labels


def assign_part_ids(field: PartField, clustering: np.ndarray) -> PartField:
    """Write contiguous part ids ordered by descending cluster size (ties by
    lower cluster label).  Idempotent for a fixed clustering."""
    labels = np.asarray(clustering, dtype=np.int64)
    if labels.shape != (len(field),):
        raise ValidationError(
            f"clustering covers {labels.shape[0]} of {len(field)} primitives"
        )
    uniq, counts = np.unique(labels, return_counts=True)
    order = np.lexsort((uniq, -counts))
    remap = {int(uniq[o]): new_id for new_id, o in enumerate(order)}
    out = field.copy()
    out.part_ids = np.array([remap[int(c)] for c in labels], dtype=np.int32)
    return out


def clustering_to_json(labels: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        json.dump({str(i): int(c) for i, c in enumerate(labels)}, fh, sort_keys=True)
        fh.write("\n")
