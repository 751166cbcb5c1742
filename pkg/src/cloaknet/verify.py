"""End-to-end verification of a converted model against the original."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import snm
from .convert import PartB, canonicalize
from .errors import InvalidParams
from .graph import ModelGraph, run_graph
from .rng import as_stream
from .runtime import DEFAULT_BUDGET, infer, round_begin, session_init
from .tensor import max_rel_error


@dataclass
class VerifyReport:
    passed: bool
    max_error: float
    trials: int
    tolerance: float
    errors: list = field(default_factory=list)  # per-trial max relative error
    layer: str | None = None  # first original layer whose secure output diverged
    trial: int | None = None  # trial where the first failure happened

    def to_text(self) -> str:
        head = f"verify {'PASS' if self.passed else 'FAIL'}: max relative error {self.max_error:.3e} over {self.trials} trials (tolerance {self.tolerance:g})"
        if self.passed:
            return head
        return f"{head}\n  first divergence at layer {self.layer!r} in trial {self.trial}"


def random_input(shape, seed, trial: int = 0, dtype=np.float32) -> np.ndarray:
    return as_stream(seed).child("input", trial).uniform(-1.0, 1.0, tuple(shape), dtype=dtype)


def locate_divergence(original: ModelGraph, clean: dict, probe: dict, tolerance: float) -> str | None:
    """First original node (in graph order) whose secure-world value drifts past ``tolerance``."""
    for node in original.nodes:
        got = probe.get(node.name)
        if got is not None and max_rel_error(got, clean[node.name]) > tolerance:
            return node.name
    return None


def verify_model(
    original: ModelGraph,
    part_a: ModelGraph,
    part_b: PartB | bytes,
    trials: int = 100,
    tolerance: float = 1e-4,
    seed: int = 0,
    budget: int = DEFAULT_BUDGET,
    mask_scale: float = 1.0,
    faults: dict | None = None,
) -> VerifyReport:
    """Run ``trials`` random inputs through both worlds and compare with the reference interpreter.

    Each trial starts a fresh mask round.  The secure executor runs with a
    debug probe so a failure can be pinned to the first diverging layer.
    """
    if trials < 1:
        raise InvalidParams(f"trials must be >= 1, got {trials}")
    g = canonicalize(original)
    probe: dict = {}
    session = session_init(part_a, part_b, budget, seed=seed, mask_scale=mask_scale, faults=faults, probe=probe)
    dtype = np.dtype(part_a.nodes[0].weights["kernel"].dtype) if part_a.nodes and part_a.nodes[0].weights else np.float32
    errors = []
    report = VerifyReport(True, 0.0, trials, tolerance, errors)
    try:
        for t in range(trials):
            round_begin(session)
            x = random_input(g.input_shape, seed, t, dtype)
            probe.clear()
            y, _ = infer(session, x)
            ref, clean = run_graph(g, x, keep=True)
            err = max_rel_error(y, ref)
            errors.append(err)
            if err > tolerance and report.passed:
                report.passed = False
                report.trial = t
                report.layer = locate_divergence(g, clean, probe, tolerance) or g.output
    finally:
        session.close()
    report.max_error = max(errors)
    return report


def sabotage(part_b: PartB, layer: str, what: str) -> PartB:
    """Copy of ``part_b`` with one secret of ``layer`` corrupted.

    ``what='lambda'`` flips the sign of the first restore scalar;
    ``what='perm'`` swaps the first two entries of the restore permutation.
    """
    if what not in ("lambda", "perm"):
        raise InvalidParams(f"unknown sabotage {what!r}; use 'lambda' or 'perm'")
    bad = snm.loads(snm.dumps(part_b))
    targets = [
        n
        for n in bad.all_nodes()
        if n.attrs.get("layer") == layer and n.kind in ("LinearTransform", "ShuffleChannel") and "perm" in n.weights
    ]
    if not targets:
        raise InvalidParams(f"layer {layer!r} has no restore step in Part B")
    node = targets[-1] if targets[-1].kind == "LinearTransform" else targets[0]
    w = node.weights
    if what == "lambda":
        if "lambdas" not in w:
            raise InvalidParams(f"{node.name} carries no scalars")
        w["lambdas"][0] = -w["lambdas"][0]
    else:
        if len(w["perm"]) < 2:
            raise InvalidParams(f"{node.name}: permutation too short to corrupt")
        w["perm"][[0, 1]] = w["perm"][[1, 0]]
    return bad
