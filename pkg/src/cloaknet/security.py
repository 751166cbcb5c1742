"""Executable side of the security argument.

* Feasible pre-images (Appendix D): given a published filter, build other
  original filters plus witness secrets that transform to exactly the same
  bytes.  Verification replays the transform, so equality is bitwise.
* Adversary-view audits (Fig. 10, Lemma 1).
* Parameter counts of the equivalent CNN an attacker would have to learn (§6.4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .convert import canonicalize
from .errors import InvalidParams
from .graph import ModelGraph, infer_shapes, run_graph
from .rng import Stream, as_stream
from .tensor import ConvFilter, DWFilter, max_rel_error
from .transform import (
    ConvTransformSecret,
    DWTransformSecret,
    ObfuscationParams,
    dw_transform_input,
    expanded_count,
    sample_scalars,
    transform_conv,
    transform_dwconv,
)

MAX_NUDGE = 4  # ulps tried in each direction when solving for an exact kernel entry
EXPOSURE_TOL = 1e-3  # a masked input this close to the clean one counts as exposed


@dataclass
class FeasiblePreimage:
    """A candidate original filter plus the secret that maps it onto the published one."""

    kernels: np.ndarray
    witness: ConvTransformSecret | DWTransformSecret
    mask_positions: tuple = ()  # published positions holding pure mask kernels (Omega)

    @property
    def scales(self) -> np.ndarray:
        """``d_i = 1 / lambda_i`` as in the depthwise form of Appendix D."""
        return 1.0 / self.witness.lambdas.astype(np.float64)


def _solve_exact(target: np.ndarray, offset: np.ndarray, lam) -> np.ndarray | None:
    """Entries ``w`` with ``lam * w + offset == target`` bitwise in the target dtype.

    Starts from the real-valued solution and walks a few ulps either way for
    entries that round wrongly.  Returns None if some entry has no solution.
    """
    dt = target.dtype.type
    lam = dt(lam)
    w = ((target.astype(np.float64) - offset.astype(np.float64)) / float(lam)).astype(target.dtype)

    def ok(cand):
        return (cand * lam + offset) == target

    good = ok(w)
    if good.all():
        return w
    for direction in (np.inf, -np.inf):
        probe = w.copy()
        for _ in range(MAX_NUDGE):
            probe = np.where(good, probe, np.nextafter(probe, dt(direction)))
            hit = ok(probe) & ~good
            w = np.where(hit, probe, w)
            good |= hit
            if good.all():
                return w
    return None


def sample_preimages(
    what, n: int, k: int, rng=0, params: ObfuscationParams | None = None, max_tries: int = 1000
) -> list:
    """``k`` pairwise-distinct pre-images of a published conv filter with ``n`` real kernels."""
    kernels = what.kernels if isinstance(what, ConvFilter) else np.asarray(what)
    m = kernels.shape[3]
    if not 1 <= n <= m:
        raise InvalidParams(f"need 1 <= n <= m, got n={n}, m={m}")
    params = params or ObfuscationParams(dyadic=True)
    rng = as_stream(rng)
    out, seen, tries = [], set(), 0
    while len(out) < k:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(
                f"only {len(out)} distinct pre-images after {max_tries} attempts; "
                "bitwise witnesses need exactly representable differences (see dyadic mode)"
            )
        p = _one_preimage(kernels, n, params, rng.child("sample", tries))
        if p is None:
            continue
        key = p.kernels.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(p)
    return out


def _one_preimage(kernels: np.ndarray, n: int, params: ObfuscationParams, rng: Stream):
    m = kernels.shape[3]
    extra = m - n
    positions = rng.child("omega").permutation(m)
    omega = tuple(int(i) for i in sorted(positions[:extra]))
    # perm[j] is where expanded kernel j sits; mask kernels take Omega, real ones the rest
    perm = np.concatenate([positions[extra:], positions[:extra]])
    mask = kernels[..., perm[n:]]
    index = rng.child("index").integers(extra, n) if extra else np.zeros(n, dtype=np.int64)
    lam = sample_scalars(n, params, rng.child("lambda"), kernels.dtype)
    cand = np.empty(kernels.shape[:3] + (n,), dtype=kernels.dtype)
    for i in range(n):
        target = kernels[..., perm[i]]
        offset = mask[..., index[i]] if extra else np.zeros_like(target)
        choices = [index[i]] + [c for c in range(extra) if c != index[i]]
        for c in choices or [0]:
            offset = mask[..., c] if extra else np.zeros_like(target)
            w = _solve_exact(target, offset, lam[i])
            if w is not None:
                index[i] = c
                break
        else:
            return None
        cand[..., i] = w
    secret = ConvTransformSecret(lam, mask.copy(), index, perm)
    return FeasiblePreimage(cand, secret, omega)


def verify_preimage(p: FeasiblePreimage, what) -> bool:
    """True iff re-applying the transform with the witness reproduces ``what`` bit for bit."""
    if isinstance(p.witness, DWTransformSecret):
        target = what.kernels if isinstance(what, DWFilter) else np.asarray(what)
        got = transform_dwconv(DWFilter(p.kernels), p.witness).kernels
    else:
        target = what.kernels if isinstance(what, ConvFilter) else np.asarray(what)
        if p.kernels.shape[3] != p.witness.n or p.witness.m != target.shape[3]:
            return False
        got = transform_conv(ConvFilter(p.kernels), p.witness).kernels
    return got.shape == target.shape and got.dtype == target.dtype and got.tobytes() == target.tobytes()


def sample_dw_preimages(what, k: int, rng=0, params: ObfuscationParams | None = None, max_tries: int = 1000) -> list:
    """Depthwise pre-images ``[d_1 w_sigma(1), ..., d_n w_sigma(n)]`` with witness ``(sigma, d)``."""
    kernels = what.kernels if isinstance(what, DWFilter) else np.asarray(what)
    n = kernels.shape[2]
    params = params or ObfuscationParams(dyadic=True)
    rng = as_stream(rng)
    out, seen, tries = [], set(), 0
    while len(out) < k:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"only {len(out)} distinct depthwise pre-images after {max_tries} attempts")
        r = rng.child("sample", tries)
        perm = r.child("sigma").permutation(n)
        lam = sample_scalars(n, params, r.child("lambda"), kernels.dtype)
        cand = np.empty_like(kernels)
        for i in range(n):
            w = _solve_exact(kernels[..., perm[i]], np.zeros_like(kernels[..., 0]), lam[i])
            if w is None:
                break
            cand[..., i] = w
        else:
            key = cand.tobytes()
            if key not in seen:
                seen.add(key)
                out.append(FeasiblePreimage(cand, DWTransformSecret(lam, perm)))
    return out


def embed_preimage(p: FeasiblePreimage, m_big: int, rng=0, params: ObfuscationParams | None = None):
    """Lift a pre-image witnessed at ``m`` kernels to a witness with ``m_big > m`` kernels.

    Extra decoy kernels are drawn fresh and inserted at random published
    positions.  Returns ``(embedded_preimage, published_filter)``; the old
    published kernels reappear unchanged at the positions ``keep``.
    """
    s = p.witness
    if m_big < s.m:
        raise InvalidParams(f"cannot embed m={s.m} into smaller m={m_big}")
    params = params or ObfuscationParams()
    rng = as_stream(rng)
    add = m_big - s.m
    shape = p.kernels.shape[:3]
    fresh = rng.child("decoys").uniform(-params.scalar_bound, params.scalar_bound, shape + (add,), dtype=p.kernels.dtype)
    mask = np.concatenate([s.mask_filter, fresh], axis=3)
    slots = np.sort(rng.child("slots").permutation(m_big)[: s.m])  # where the old published kernels go
    others = np.setdiff1d(np.arange(m_big), slots)
    perm = np.concatenate([slots[s.perm], others])
    big = ConvTransformSecret(s.lambdas, mask, s.index, perm)
    lifted = FeasiblePreimage(p.kernels, big, tuple(sorted(int(q) for q in perm[s.n :])))
    return lifted, transform_conv(ConvFilter(p.kernels), big), slots


def witness_class_count(m: int, n: int) -> int:
    """Distinct choices of mask positions Omega: C(m, m - n)."""
    return math.comb(m, m - n)


def count_equivalent_params(graph: ModelGraph, ratio: float) -> tuple[int, int]:
    """Parameters of the original linear layers vs. of the equivalent CNN an attacker must learn.

    Per §6.4 / Fig. 8, for each conv with ``n`` kernels the attacker keeps the
    published conv fixed and learns an ``m x n`` pointwise mixing layer plus the
    4 per-channel BatchNorm parameters.  Depthwise layers need an ``n x n``
    mixing on each side.
    """
    g = canonicalize(graph)
    users = g.consumers()
    victim = adversary = 0
    for node in g.nodes:
        if node.kind not in ("Conv", "PWConv", "DWConv"):
            continue
        kern = node.weights["kernel"]
        nxt = users.get(node.name, [])
        bn = 4 * (kern.shape[-1]) if len(nxt) == 1 and nxt[0].kind == "BatchNorm" else 0
        if node.kind == "DWConv":
            n = kern.shape[2]
            victim += int(np.prod(kern.shape)) + bn
            adversary += 2 * n * n + bn
        else:
            n = kern.shape[3]
            victim += int(np.prod(kern.shape)) + bn
            adversary += expanded_count(n, ratio) * n + bn
    return victim, adversary


def _feeds_linear(g: ModelGraph) -> dict:
    """Whether each node's output reaches another linear layer downstream."""
    users = g.consumers()
    reach: dict = {}
    for node in reversed(g.nodes):
        reach[node.name] = any(u.kind in ("Conv", "PWConv", "DWConv") or reach[u.name] for u in users.get(node.name, []))
    return reach


@dataclass
class AuditReport:
    checks: list = field(default_factory=list)  # dicts: check, layer, passed, detail

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def failures(self, check: str | None = None) -> list:
        return [c for c in self.checks if not c["passed"] and (check is None or c["check"] == check)]

    def add(self, check: str, layer: str, passed: bool, detail: str) -> None:
        self.checks.append({"check": check, "layer": layer, "passed": bool(passed), "detail": detail})

    def to_text(self) -> str:
        lines = [f"{'PASS' if c['passed'] else 'FAIL'} ({c['check']}) {c['layer']}: {c['detail']}" for c in self.checks]
        lines.append(f"audit {'passed' if self.passed else 'FAILED'}: {len(self.checks)} checks, {len(self.failures())} failures")
        return "\n".join(lines)


def audit_view(view, original: ModelGraph, secrets: dict) -> AuditReport:
    """Check one inference's adversary view against the original model.

    (a) no original kernel appears verbatim among the published weights,
    (b) every outsourced layer except the first sees an input that differs
        from the clean activation mapped into the same coordinates,
    (c) Lemma 1 bookkeeping: unknowns exceed equations for every layer.
    """
    g = canonicalize(original)
    report = AuditReport()
    shapes = infer_shapes(g)
    _, clean = run_graph(g, view.model_input, keep=True)
    published = [np.asarray(w) for w in view.weights.values()]
    feeds_linear = _feeds_linear(g)
    for node in g.nodes:
        if node.kind not in ("Conv", "PWConv", "DWConv"):
            continue
        name = node.name
        kern = node.weights["kernel"]
        cols = [kern[..., i] for i in range(kern.shape[-1])]
        leaked = [
            i
            for i, col in enumerate(cols)
            if any(col.shape == w.shape[:-1] and any(np.array_equal(col, w[..., j]) for j in range(w.shape[-1])) for w in published)
        ]
        report.add("a", name, not leaked, f"{len(leaked)} of {len(cols)} original kernels appear verbatim")

        first = node.inputs[0] == g.input_name
        seen = view.layer_inputs.get(f"{name}/obf")
        if seen is None:
            report.add("b", name, False, "layer input missing from the view")
        elif not first:
            expect = clean[node.inputs[0]]
            if node.kind == "DWConv":
                expect = dw_transform_input(expect, secrets[name])
            gap = max_rel_error(seen, expect)
            exposed = gap <= EXPOSURE_TOL
            report.add("b", name, not exposed, f"{'clean activation exposed' if exposed else 'masked input differs from clean input'} (relative gap {gap:.2e})")
        else:
            report.add("b", name, np.array_equal(seen, view.model_input), "first layer sees the public model input")

        x_size = int(np.prod(shapes[node.inputs[0]]))
        y_size = int(np.prod(shapes[name]))
        out_masked = feeds_linear[name]  # exposed only through a later layer's masked input
        unknowns = int(np.prod(kern.shape)) + (2 * x_size if not first else 0) + (2 * y_size if out_masked else 0)
        detail = f"{unknowns} unknowns vs {y_size} equations"
        if first and not out_masked:
            detail += "; input and output both observable (single linear layer, outside Lemma 1's setting)"
        report.add("c", name, unknowns > y_size, detail)
    return report
