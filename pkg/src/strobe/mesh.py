"""Structured space-time triangulations of the rectangle (0,L) x (0,T).

Uniform quads split along the lower-left/upper-right diagonal; DG nodes
are duplicated per element so deforming a mesh is a plain node rewrite.
Boundary facets carry side tags (bottom t=0, right x=L, top t=T, left
x=0) used by the weak Dirichlet operators.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .refelem import ReferenceElement, reference_element

INTERIOR, BOTTOM, RIGHT, TOP, LEFT = 0, 1, 2, 3, 4


@dataclass
class SpaceTimeMesh:
    """Triangulation of the space-time rectangle with DG node layout.

    Attributes:
        vertices: geometric corner table, ((nx+1)*(nt+1), 2).
        elements: vertex-index triples per triangle, (N_e, 3), CCW.
        nodes: duplicated DG nodes, (N_e * n_lp, 2); block k holds
            element k's nodes in reference-lattice order.
        facet_elems: (N_f, 2) adjacent element ids, -1 on boundary.
        facet_btype: (N_f,) side tag, INTERIOR for shared facets.
        normals: (N_f, 2) unit normal, outward from facet_elems[:, 0].
    """

    L: float
    T: float
    nx: int
    nt: int
    p: int
    vertices: np.ndarray
    elements: np.ndarray
    nodes: np.ndarray
    facet_elems: np.ndarray
    facet_btype: np.ndarray
    facet_verts: np.ndarray
    normals: np.ndarray
    facet_lengths: np.ndarray
    ref: ReferenceElement = field(repr=False)
    jac: np.ndarray = field(repr=False)      # (N_e, 2, 2) affine Jacobians
    inv_jac: np.ndarray = field(repr=False)
    det_jac: np.ndarray = field(repr=False)

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_facets(self) -> int:
        return self.facet_elems.shape[0]

    @property
    def n_lp(self) -> int:
        return self.ref.n_lp

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def element_areas(self) -> np.ndarray:
        return 0.5 * self.det_jac

    def corner_coords(self, k) -> np.ndarray:
        return self.vertices[self.elements[k]]

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Element ids containing each point; O(1) structured lookup.

        Points on the split diagonal resolve to the lower element index.
        """
        pts = np.atleast_2d(points)
        hx = self.L / self.nx
        ht = self.T / self.nt
        ix = np.clip((pts[:, 0] / hx).astype(int), 0, self.nx - 1)
        it = np.clip((pts[:, 1] / ht).astype(int), 0, self.nt - 1)
        u = pts[:, 0] / hx - ix
        v = pts[:, 1] / ht - it
        upper = v > u
        return 2 * (it * self.nx + ix) + upper.astype(int)

    def ref_coords(self, points: np.ndarray, elems: np.ndarray) -> np.ndarray:
        """Reference coordinates of physical points inside given elements."""
        pts = np.atleast_2d(points)
        v0 = self.vertices[self.elements[elems, 0]]
        return np.einsum("kab,kb->ka", self.inv_jac[elems], pts - v0)

    def facet_normal_and_length(self, facet_id: int) -> tuple[np.ndarray, float]:
        """Positive unit normal and Euclidean length of one facet."""
        if not 0 <= facet_id < self.n_facets:
            raise IndexError(f"facet id {facet_id} out of range")
        return self.normals[facet_id].copy(), float(self.facet_lengths[facet_id])

    def node_groups(self) -> np.ndarray:
        """Unique-location id per DG node, from the structured lattice.

        Shape (n_nodes,); ids index an implicit (p*nx+1) x (p*nt+1) grid.
        """
        hx = self.L / (self.nx * self.p)
        ht = self.T / (self.nt * self.p)
        gx = np.rint(self.nodes[:, 0] / hx).astype(int)
        gt = np.rint(self.nodes[:, 1] / ht).astype(int)
        return gt * (self.p * self.nx + 1) + gx

    def connectivity_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.elements, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.facet_elems, dtype=np.int64).tobytes())
        return h.hexdigest()

    def mesh_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.vertices, self.nodes):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.elements, dtype=np.int64).tobytes())
        h.update(str(self.p).encode())
        return h.hexdigest()


@dataclass
class DeformedMesh:
    """Node-repositioned copy of a base mesh (connectivity shared)."""

    base: SpaceTimeMesh
    nodes: np.ndarray


def build_structured_mesh(L: float, T: float, nx: int, nt: int, p: int) -> SpaceTimeMesh:
    """Build the 2*nx*nt-triangle structured mesh of (0,L) x (0,T)."""
    if L <= 0 or T <= 0:
        raise ValueError("extents must be positive")
    if nx < 1 or nt < 1:
        raise ValueError("cell counts must be >= 1")
    if p not in (1, 2, 3):
        raise ValueError("polynomial order must be in {1, 2, 3}")

    xs = np.linspace(0.0, L, nx + 1)
    ts = np.linspace(0.0, T, nt + 1)
    Xg, Tg = np.meshgrid(xs, ts, indexing="xy")
    vertices = np.stack([Xg.ravel(), Tg.ravel()], axis=-1)

    def vid(ix, it):
        return it * (nx + 1) + ix

    elements = []
    for it in range(nt):
        for ix in range(nx):
            a, b = vid(ix, it), vid(ix + 1, it)
            c, d = vid(ix + 1, it + 1), vid(ix, it + 1)
            elements.append((a, b, c))   # lower triangle, u >= v
            elements.append((a, c, d))   # upper triangle
    elements = np.asarray(elements, dtype=np.int64)

    ref = reference_element(p)
    v0 = vertices[elements[:, 0]]
    jac = np.stack(
        [vertices[elements[:, 1]] - v0, vertices[elements[:, 2]] - v0], axis=-1
    )
    det_jac = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    if np.any(det_jac <= 0):
        raise ValueError("element orientation must be positive")
    inv_jac = np.empty_like(jac)
    inv_jac[:, 0, 0] = jac[:, 1, 1] / det_jac
    inv_jac[:, 0, 1] = -jac[:, 0, 1] / det_jac
    inv_jac[:, 1, 0] = -jac[:, 1, 0] / det_jac
    inv_jac[:, 1, 1] = jac[:, 0, 0] / det_jac

    # duplicated DG nodes: Psi_k applied to the reference lattice
    nodes = v0[:, None, :] + np.einsum("kab,ib->kia", jac, ref.nodes)
    nodes = nodes.reshape(-1, 2)

    facet_elems, facet_btype, facet_verts, normals, lengths = _build_facets(
        vertices, elements, L, T
    )
    return SpaceTimeMesh(
        L=L, T=T, nx=nx, nt=nt, p=p,
        vertices=vertices, elements=elements, nodes=nodes,
        facet_elems=facet_elems, facet_btype=facet_btype,
        facet_verts=facet_verts, normals=normals, facet_lengths=lengths,
        ref=ref, jac=jac, inv_jac=inv_jac, det_jac=det_jac,
    )


def _build_facets(vertices, elements, L, T):
    edge_map: dict[tuple[int, int], list[int]] = {}
    for k, (a, b, c) in enumerate(elements):
        for v1, v2 in ((a, b), (b, c), (c, a)):
            key = (min(v1, v2), max(v1, v2))
            edge_map.setdefault(key, []).append(k)

    keys = sorted(edge_map.keys())
    n_f = len(keys)
    facet_elems = np.full((n_f, 2), -1, dtype=np.int64)
    facet_btype = np.zeros(n_f, dtype=np.int64)
    facet_verts = np.asarray(keys, dtype=np.int64)
    normals = np.zeros((n_f, 2))
    lengths = np.zeros(n_f)

    for f, key in enumerate(keys):
        adj = sorted(edge_map[key])
        if len(adj) > 2:
            raise ValueError("facet shared by more than two elements")
        kp = adj[0]
        facet_elems[f, 0] = kp
        if len(adj) == 2:
            facet_elems[f, 1] = adj[1]
        va, vb = vertices[key[0]], vertices[key[1]]
        tangent = vb - va
        lengths[f] = np.linalg.norm(tangent)
        n = np.array([tangent[1], -tangent[0]]) / lengths[f]
        # orient outward from the plus element
        centroid = vertices[elements[kp]].mean(axis=0)
        mid = 0.5 * (va + vb)
        if np.dot(n, mid - centroid) < 0:
            n = -n
        normals[f] = n
        if len(adj) == 1:
            mx, mt = mid
            if abs(mt) < 1e-12 * max(T, 1.0):
                facet_btype[f] = BOTTOM
            elif abs(mt - T) < 1e-12 * max(T, 1.0):
                facet_btype[f] = TOP
            elif abs(mx) < 1e-12 * max(L, 1.0):
                facet_btype[f] = LEFT
            elif abs(mx - L) < 1e-12 * max(L, 1.0):
                facet_btype[f] = RIGHT
            else:
                raise ValueError("boundary facet off the rectangle boundary")
    return facet_elems, facet_btype, facet_verts, normals, lengths


def deform_mesh(mesh: SpaceTimeMesh, phi) -> DeformedMesh:
    """Mapped copy of the mesh: node x -> x + phi(x), connectivity shared."""
    disp = phi.evaluate(mesh.nodes)
    return DeformedMesh(base=mesh, nodes=mesh.nodes + disp)
