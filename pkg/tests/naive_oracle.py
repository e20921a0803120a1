"""Brute-force answer sets: try every assignment of the bound variables.

Each query type is written directly as a disjunction of conjunctions of
atoms ``(source, relation_slot, target)``, where a source is ``("e", i)``
(anchor i) or a variable name and ``"?"`` is the answer variable. Atoms are
evaluated as boolean adjacency tensors broadcast over one axis per variable.
"""

import numpy as np

FORMULAS = {
    "1p": [[(("e", 0), 0, "?")]],
    "2p": [[(("e", 0), 0, "v"), ("v", 1, "?")]],
    "3p": [[(("e", 0), 0, "v1"), ("v1", 1, "v2"), ("v2", 2, "?")]],
    "4p": [[(("e", 0), 0, "v1"), ("v1", 1, "v2"), ("v2", 2, "v3"), ("v3", 3, "?")]],
    "5p": [[(("e", 0), 0, "v1"), ("v1", 1, "v2"), ("v2", 2, "v3"), ("v3", 3, "v4"), ("v4", 4, "?")]],
    "2i": [[(("e", 0), 0, "?"), (("e", 1), 1, "?")]],
    "3i": [[(("e", 0), 0, "?"), (("e", 1), 1, "?"), (("e", 2), 2, "?")]],
    "pi": [[(("e", 0), 0, "v"), ("v", 1, "?"), (("e", 1), 2, "?")]],
    "ip": [[(("e", 0), 0, "v"), (("e", 1), 1, "v"), ("v", 2, "?")]],
    "2u": [[(("e", 0), 0, "?")], [(("e", 1), 1, "?")]],
    "up": [[(("e", 0), 0, "v"), ("v", 2, "?")], [(("e", 1), 1, "v"), ("v", 2, "?")]],
    "3ip": [[(("e", 0), 0, "v"), (("e", 1), 1, "v"), (("e", 2), 2, "v"), ("v", 3, "?")]],
    "i2p": [[(("e", 0), 0, "v1"), (("e", 1), 1, "v1"), ("v1", 2, "v2"), ("v2", 3, "?")]],
}

# distributed forms, relation slots as (r1, r3, r2, r3)
DISTRIBUTED = {
    "ip": [[(("e", 0), 0, "v"), (("e", 1), 2, "v"), ("v", 1, "?"), ("v", 3, "?")]],
    "up": [[(("e", 0), 0, "v"), ("v", 1, "?")], [(("e", 1), 2, "v"), ("v", 3, "?")]],
}


def adjacency(n_entities, n_relations, triples):
    adj = np.zeros((n_relations, n_entities, n_entities), dtype=bool)
    for h, r, t in triples:
        adj[r, h, t] = True
    return adj


def _conjunct(adj, atoms, anchors, relations):
    n = adj.shape[1]
    variables = sorted({x for a in atoms for x in (a[0], a[2]) if isinstance(x, str)} - {"?"}) + ["?"]
    axis = {v: i for i, v in enumerate(variables)}
    acc = np.ones((n,) * len(variables), dtype=bool)
    for src, slot, dst in atoms:
        mat = adj[relations[slot]]
        shape = [1] * len(variables)
        if isinstance(src, tuple):
            vec = mat[anchors[src[1]]]
            shape[axis[dst]] = n
            acc &= vec.reshape(shape)
        else:
            i, j = axis[src], axis[dst]
            if i < j:
                shape[i], shape[j] = n, n
                acc &= mat.reshape(shape)
            else:
                shape[j], shape[i] = n, n
                acc &= mat.T.reshape(shape)
    return acc.reshape(-1, n).any(axis=0) if len(variables) > 1 else acc


def naive_answers(adj, qtype, anchors, relations, distributed=False):
    formula = (DISTRIBUTED if distributed else FORMULAS)[qtype]
    out = np.zeros(adj.shape[1], dtype=bool)
    for atoms in formula:
        out |= _conjunct(adj, atoms, anchors, relations)
    return tuple(int(i) for i in np.flatnonzero(out))
