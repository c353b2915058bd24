"""Bar templates over the lower-left quarter cell ``[0, 0.5]^2``.

Both templates share a 3x3 node lattice (corners, edge midpoints and the
center of the quarter).  The build direction is +y.
"""
from __future__ import annotations

import numpy as np

from .exceptions import ParameterError
from .lattice import Bar, LatticeUnit, DEFAULT_GAMMA, DEFAULT_KS_K

TEMPLATE_NODES = np.array([(0.25 * i, 0.25 * j) for j in range(3) for i in range(3)])


def _node(i, j):
    return j * 3 + i


def _edges_full21():
    axis = []
    for j in range(3):
        for i in range(2):
            axis.append((_node(i, j), _node(i + 1, j)))
    for i in range(3):
        for j in range(2):
            axis.append((_node(i, j), _node(i, j + 1)))
    diag = []
    for j in range(2):
        for i in range(2):
            diag.append((_node(i, j), _node(i + 1, j + 1)))
            diag.append((_node(i + 1, j), _node(i, j + 1)))
    # one corner-to-edge brace through the two lower sub-squares
    brace = [(_node(0, 0), _node(2, 1))]
    return axis + diag + brace


def _edges_selfsupport10():
    diag = []
    for j in range(2):
        for i in range(2):
            diag.append((_node(i, j), _node(i + 1, j + 1)))
            diag.append((_node(i + 1, j), _node(i, j + 1)))
    vertical = [(_node(1, 0), _node(1, 1)), (_node(1, 1), _node(1, 2))]
    return diag + vertical


TEMPLATES = {"full21": _edges_full21, "selfsupport10": _edges_selfsupport10}


def template_edges(name: str) -> list[tuple[int, int]]:
    try:
        return TEMPLATES[name]()
    except KeyError:
        raise ParameterError(f"unknown unit template {name!r}; choose from {sorted(TEMPLATES)}") from None


def make_unit(name: str, width: float = 0.05, ks_k: float = DEFAULT_KS_K,
              gamma: float = DEFAULT_GAMMA) -> LatticeUnit:
    """Quarter-mirror unit on a named template with a uniform bar width."""
    bars = tuple(Bar(TEMPLATE_NODES[a], TEMPLATE_NODES[b], width) for a, b in template_edges(name))
    return LatticeUnit(bars=bars, symmetry="quarter-mirror", ks_k=ks_k, heaviside_gamma=gamma, name=name)
