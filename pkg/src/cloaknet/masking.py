"""Per-round additive masks for activations that leave the secure world.

Each mask id pairs one PushMask (adds ``M`` before the tensor crosses to the
untrusted side) with one PopMask (subtracts ``U`` after restoration).  For an
outsourced linear layer ``U`` is that layer's original operator applied to
``M``; for a tensor that is merely carried through the untrusted side ``U``
is ``M`` itself.  Masks are redrawn every round.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .graph import LayerSpec, mask_unmask_term
from .rng import Stream, as_stream


@dataclass
class MaskSpec:
    mask_id: str
    shape: tuple  # shape of the tensor being masked
    pop: LayerSpec  # PopMask node; carries the operator used for U
    scale: float = 1.0

    @property
    def unmask_shape(self) -> tuple:
        from .graph import node_output_shape

        op = self.pop.attrs["op"]
        if op == "identity":
            return tuple(self.shape)
        kind = {"conv": "Conv", "pwconv": "Conv", "dwconv": "DWConv"}[op]
        probe = LayerSpec("probe", kind, ["x"], dict(self.pop.attrs), {"kernel": self.pop.weights["original_kernel"]})
        return node_output_shape(probe, [self.shape])


@dataclass
class MaskState:
    round_id: int = 0
    masks: dict = field(default_factory=dict)
    unmasks: dict = field(default_factory=dict)

    def mask(self, mask_id):
        return self.masks.get(mask_id)

    def unmask(self, mask_id):
        return self.unmasks.get(mask_id)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.masks.values()) + sum(a.nbytes for a in self.unmasks.values())


def _spec_list(model):
    if hasattr(model, "mask_specs"):
        return model.mask_specs()
    return list(model)


def _unmask_node(spec: MaskSpec) -> LayerSpec:
    pop = spec.pop
    if pop.attrs["op"] == "identity":
        return pop
    return pop.copy(weights={"kernel": pop.weights["original_kernel"]})


def generate_round_masks(
    model,
    rng,
    round_id: int = 1,
    scale: float = 1.0,
    into: MaskState | None = None,
    dtype=None,
) -> MaskState:
    """Draw fresh masks for every mask id of ``model`` (a PartB or a list of MaskSpec).

    ``scale`` multiplies each spec's own magnitude; ``scale=0`` yields all-zero
    masks (debug mode).  With ``into`` the arrays of an existing state are
    overwritten in place rather than reallocated.  ``dtype`` defaults to the
    model's weight dtype.
    """
    if dtype is None:
        meta = getattr(model, "meta", {})
        dtype = meta.get("dtype", "float32")
    dtype = np.dtype(dtype)
    rng = as_stream(rng)
    state = into if into is not None else MaskState()
    state.round_id = round_id
    for spec in _spec_list(model):
        mu = float(scale) * float(spec.scale)
        stream = rng.child("round", round_id, spec.mask_id)
        if mu == 0.0:
            m = np.zeros(spec.shape, dtype=dtype)
        else:
            m = stream.uniform(-mu, mu, spec.shape, dtype=dtype)
        u = mask_unmask_term(_unmask_node(spec), m).astype(dtype, copy=False)
        if into is not None and spec.mask_id in state.masks:
            state.masks[spec.mask_id][...] = m
            state.unmasks[spec.mask_id][...] = u
        else:
            state.masks[spec.mask_id] = m
            state.unmasks[spec.mask_id] = u
    return state


def push_mask(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    if x.shape != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match tensor {x.shape}", "shape")
    return x + m


def pop_mask(y: np.ndarray, u: np.ndarray) -> np.ndarray:
    if y.shape != u.shape:
        raise ShapeError(f"unmask term shape {u.shape} does not match tensor {y.shape}", "shape")
    return y - u


class ZeroMasks:
    """Mask provider for running a converted graph without masking."""

    def mask(self, mask_id):
        return None

    def unmask(self, mask_id):
        return None
