"""Skeleton adjacency construction, center-distance partitioning, and
joint-to-part pooling maps.

Everything here is plain numpy and immutable after construction; the
trainable mask copies are minted downstream when a layer takes ownership.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, ShapeError, TopologyError

BUILTIN_LAYOUTS = ("ntu25", "kinetics18")


@dataclass(frozen=True)
class SkeletonGraph:
    """Physical body topology: V joints, undirected bone edges, a center joint."""

    num_joints: int
    edges: tuple
    center_joint: int

    def __post_init__(self):
        v = self.num_joints
        if v < 1:
            raise TopologyError(f"num_joints must be positive, got {v}")
        if not (0 <= self.center_joint < v):
            raise TopologyError(f"center joint {self.center_joint} out of range [0, {v})")
        norm = []
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if not (0 <= i < v and 0 <= j < v):
                raise TopologyError(f"edge ({i}, {j}) references joints outside [0, {v})")
            if i == j:
                raise TopologyError(f"self-loop ({i}, {i}) not allowed in the edge list")
            norm.append((i, j))
        object.__setattr__(self, "edges", tuple(norm))
        if self.hop_distances().max() == np.iinfo(np.int64).max:
            raise TopologyError("graph is not connected from the center joint")

    def hop_distances(self):
        """BFS hop count from every joint to the center joint (INT64_MAX if unreachable)."""
        v = self.num_joints
        adj = [[] for _ in range(v)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        dist = np.full(v, np.iinfo(np.int64).max, dtype=np.int64)
        dist[self.center_joint] = 0
        queue = deque([self.center_joint])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if dist[w] > dist[u] + 1:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist


@dataclass(frozen=True)
class PartitionedAdjacency:
    """K normalized sub-adjacencies plus the matching mask initial values.

    ``subsets[i]`` is the normalized matrix for partition i; ``masks[i]``
    the value a trainable mask should start from (a copy of ``subsets[i]``).
    ``raw_subsets`` keeps the un-normalized split, whose elementwise sum is
    exactly A + I.
    """

    subsets: np.ndarray
    masks: np.ndarray
    raw_subsets: np.ndarray

    @property
    def K(self):
        return self.subsets.shape[0]

    @property
    def num_joints(self):
        return self.subsets.shape[1]


@dataclass(frozen=True)
class GrainMapping:
    """Joints-to-parts pooling: rows average the member joints of one part."""

    grain_id: int
    pooling: np.ndarray

    @property
    def part_count(self):
        return self.pooling.shape[0]

    def validate(self, num_joints):
        p = self.pooling
        if p.ndim != 2 or p.shape[1] != num_joints:
            raise ConfigError(f"grain {self.grain_id}: pooling shape {p.shape} "
                              f"does not cover {num_joints} joints")
        if (p < 0).any():
            raise ConfigError(f"grain {self.grain_id}: negative pooling weights")
        nonzero_per_col = (p != 0).sum(axis=0)
        if (nonzero_per_col != 1).any():
            bad = int(np.flatnonzero(nonzero_per_col != 1)[0])
            raise ConfigError(f"grain {self.grain_id}: joint {bad} must belong to "
                              f"exactly one part, found {int(nonzero_per_col[bad])}")
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigError(f"grain {self.grain_id}: pooling rows must sum to 1")


def build_adjacency(graph):
    """Binary adjacency with self-loops: entry (i, j) is 1 iff bone or i == j."""
    v = graph.num_joints
    a = np.eye(v)
    for i, j in graph.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a


def normalize_adjacency(a_hat):
    """Degree-rescaled adjacency.

    Entry (u, v) is divided by sqrt(out-degree of u) * sqrt(in-degree of v),
    which on symmetric input is exactly the symmetric D^-1/2 A D^-1/2 form.
    Zero-degree rows (legitimate in partition subsets) stay zero instead of
    dividing by zero.
    """
    a = np.asarray(a_hat, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    if (a < 0).any():
        raise ShapeError("adjacency entries must be non-negative")
    row = a.sum(axis=1)
    col = a.sum(axis=0)
    r = np.where(row > 0, 1.0 / np.sqrt(np.where(row > 0, row, 1.0)), 0.0)
    c = np.where(col > 0, 1.0 / np.sqrt(np.where(col > 0, col, 1.0)), 0.0)
    return r[:, None] * a * c[None, :]


def partition_adjacency(graph):
    """Center-distance partition into root / centripetal / centrifugal subsets.

    Entry (i, j) of A + I lands in: the root subset when i == j or both
    endpoints sit at equal hop distance from the center; the centripetal
    subset when j is closer to the center than i; the centrifugal subset
    when j is farther.  Each subset is normalized independently and the
    masks start as copies of the normalized subsets.
    """
    dist = graph.hop_distances()
    v = graph.num_joints
    raw = np.zeros((3, v, v))
    raw[0] += np.eye(v)
    for i, j in graph.edges:
        for a, b in ((i, j), (j, i)):
            # row a aggregates from column b
            if dist[b] < dist[a]:
                raw[1, a, b] = 1.0
            elif dist[b] > dist[a]:
                raw[2, a, b] = 1.0
            else:
                raw[0, a, b] = 1.0
    subsets = np.stack([normalize_adjacency(raw[k]) for k in range(3)])
    return PartitionedAdjacency(subsets=subsets, masks=subsets.copy(),
                                raw_subsets=raw)


def uniform_pooling(parts, num_joints, grain_id):
    """Pooling matrix averaging each part's member joints."""
    mat = np.zeros((len(parts), num_joints))
    for p, joints in enumerate(parts):
        if not joints:
            raise ConfigError(f"grain {grain_id}: part {p} has no joints")
        mat[p, list(joints)] = 1.0 / len(joints)
    gm = GrainMapping(grain_id=grain_id, pooling=mat)
    gm.validate(num_joints)
    return gm


@dataclass(frozen=True)
class Layout:
    """A named skeleton layout: graph, part grains, and bone orientation."""

    name: str
    graph: SkeletonGraph
    part_grains: tuple            # coarse-to-fine part lists, excluding the joint grain
    bone_pairs: tuple = field(default=())

    def grain_mappings(self):
        """Identity joint grain first, then the declared part grains."""
        v = self.graph.num_joints
        grains = [GrainMapping(grain_id=0, pooling=np.eye(v))]
        for g, parts in enumerate(self.part_grains, start=1):
            grains.append(uniform_pooling(parts, v, g))
        return grains


def build_grain_mappings(layout):
    """Grain list for a layout name, path, or Layout object."""
    if not isinstance(layout, Layout):
        layout = load_layout(layout)
    return layout.grain_mappings()


# -- layout file format -------------------------------------------------------
#
# Plain text, whitespace separated, '#' starts a comment:
#   joints 25
#   center 20
#   edge 0 1
#   bone 0 1                      (source joint, target joint toward center)
#   grain 1 part 0 joints 2,3     (grain 0 is always the implicit identity)


def parse_layout(text, name="custom"):
    num_joints = None
    center = None
    edges = []
    bones = []
    grains = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "joints":
                num_joints = int(tok[1])
            elif tok[0] == "center":
                center = int(tok[1])
            elif tok[0] == "edge":
                edges.append((int(tok[1]), int(tok[2])))
            elif tok[0] == "bone":
                bones.append((int(tok[1]), int(tok[2])))
            elif tok[0] == "grain":
                if tok[2] != "part" or tok[4] != "joints":
                    raise ValueError("expected 'grain G part P joints a,b,...'")
                g, p = int(tok[1]), int(tok[3])
                joints = tuple(int(s) for s in tok[5].split(",") if s)
                grains.setdefault(g, {})[p] = joints
            else:
                raise ValueError(f"unknown directive {tok[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"{name}: line {lineno}: {exc}") from exc
    if num_joints is None or center is None:
        raise ConfigError(f"{name}: missing 'joints' or 'center' directive")
    graph = SkeletonGraph(num_joints=num_joints, edges=tuple(edges),
                          center_joint=center)

    part_grains = []
    for g in sorted(grains):
        if g != len(part_grains) + 1:
            raise ConfigError(f"{name}: grain ids must be 1..G contiguous, got {g}")
        by_part = grains[g]
        if sorted(by_part) != list(range(len(by_part))):
            raise ConfigError(f"{name}: grain {g} part ids must be 0..P-1")
        part_grains.append(tuple(by_part[p] for p in sorted(by_part)))

    layout = Layout(name=name, graph=graph, part_grains=tuple(part_grains),
                    bone_pairs=tuple(bones))
    # materializing the grains validates coverage / exclusivity eagerly
    layout.grain_mappings()
    return layout


def load_layout(source):
    """Load a layout by builtin name or from a file path."""
    text = None
    name = str(source)
    if name in BUILTIN_LAYOUTS:
        text = resources.files("stfnet.layouts").joinpath(f"{name}.txt").read_text()
    else:
        try:
            with open(name, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(
                f"unknown layout {name!r}: not builtin {BUILTIN_LAYOUTS} "
                f"and not a readable file ({exc})") from exc
        name = name.rsplit("/", 1)[-1].removesuffix(".txt")
    return parse_layout(text, name=name)
